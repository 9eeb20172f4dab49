#include "gradshield/schema.hpp"

#include <cmath>

namespace gradshield::schema {

using nlohmann::json;

namespace {

std::string type_of(const json& j) {
  switch (j.type()) {
    case json::value_t::object: return "object";
    case json::value_t::array: return "array";
    case json::value_t::string: return "string";
    case json::value_t::boolean: return "boolean";
    case json::value_t::null: return "null";
    case json::value_t::number_integer:
    case json::value_t::number_unsigned: return "integer";
    case json::value_t::number_float: {
      const double d = j.get<double>();
      return std::isfinite(d) && std::floor(d) == d ? "integer-valued number" : "number";
    }
    default: return "unknown";
  }
}

bool has_type(const json& j, const std::string& t) {
  const std::string actual = type_of(j);
  if (t == actual) return true;
  if (t == "number") return actual == "integer" || actual == "integer-valued number";
  if (t == "integer") return actual == "integer-valued number";
  return false;
}

bool matches(const json& instance, const json& schema) {
  try {
    validate(instance, schema);
    return true;
  } catch (const SchemaError&) {
    return false;
  }
}

void check(const json& j, const json& s, const std::string& path) {
  if (s.is_boolean()) {
    if (!s.get<bool>()) throw SchemaError(path, "not allowed");
    return;
  }
  if (s.contains("type")) {
    const json& t = s["type"];
    bool ok = false;
    if (t.is_string()) {
      ok = has_type(j, t.get<std::string>());
    } else {
      for (const auto& e : t) ok = ok || has_type(j, e.get<std::string>());
    }
    if (!ok) throw SchemaError(path, "expected " + t.dump() + ", got " + type_of(j));
  }
  if (s.contains("const") && j != s["const"]) throw SchemaError(path, "must equal " + s["const"].dump());
  if (s.contains("enum")) {
    bool found = false;
    for (const auto& e : s["enum"]) found = found || e == j;
    if (!found) throw SchemaError(path, "must be one of " + s["enum"].dump() + ", got " + j.dump());
  }
  if (j.is_number()) {
    const double x = j.get<double>();
    if (s.contains("minimum") && x < s["minimum"].get<double>()) {
      throw SchemaError(path, "must be >= " + s["minimum"].dump());
    }
    if (s.contains("maximum") && x > s["maximum"].get<double>()) {
      throw SchemaError(path, "must be <= " + s["maximum"].dump());
    }
  }
  if (j.is_array()) {
    if (s.contains("minItems") && j.size() < s["minItems"].get<std::size_t>()) {
      throw SchemaError(path, "needs at least " + s["minItems"].dump() + " items");
    }
    if (s.contains("items")) {
      for (std::size_t i = 0; i < j.size(); ++i) check(j[i], s["items"], path + "/" + std::to_string(i));
    }
  }
  if (j.is_object()) {
    if (s.contains("required")) {
      for (const auto& r : s["required"]) {
        if (!j.contains(r.get<std::string>())) throw SchemaError(path + "/" + r.get<std::string>(), "missing required field");
      }
    }
    const json props = s.value("properties", json::object());
    for (const auto& [key, value] : j.items()) {
      const std::string sub = path + "/" + key;
      if (props.contains(key)) {
        check(value, props[key], sub);
      } else if (s.contains("additionalProperties")) {
        const json& ap = s["additionalProperties"];
        if (ap.is_boolean() && !ap.get<bool>()) throw SchemaError(sub, "unknown field");
        check(value, ap, sub);
      }
    }
  }
  if (s.contains("allOf")) {
    for (const auto& sub : s["allOf"]) check(j, sub, path);
  }
  if (s.contains("if") && s.contains("then") && matches(j, s["if"])) check(j, s["then"], path);
}

}  // namespace

void validate(const json& instance, const json& schema) { check(instance, schema, ""); }

json schema_from_defaults(const json& defaults) {
  switch (defaults.type()) {
    case json::value_t::object: {
      json props = json::object();
      for (const auto& [k, v] : defaults.items()) props[k] = schema_from_defaults(v);
      return {{"type", "object"}, {"properties", props}, {"additionalProperties", false}};
    }
    case json::value_t::array: {
      json s = {{"type", "array"}};
      if (!defaults.empty()) s["items"] = schema_from_defaults(defaults[0]);
      return s;
    }
    case json::value_t::string: return {{"type", "string"}};
    case json::value_t::boolean: return {{"type", "boolean"}};
    case json::value_t::number_integer:
    case json::value_t::number_unsigned: return {{"type", "integer"}, {"minimum", 0}};
    case json::value_t::number_float: return {{"type", "number"}};
    default: return json::object();
  }
}

}  // namespace gradshield::schema
