#pragma once

#include <stdexcept>
#include <string>

#include <json.hpp>

namespace gradshield::schema {

class SchemaError : public std::invalid_argument {
 public:
  SchemaError(std::string path, const std::string& message)
      : std::invalid_argument((path.empty() ? std::string("/") : path) + ": " + message), path_(std::move(path)) {}
  // JSON pointer to the offending field; empty for the root.
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

// Validates against the subset of JSON Schema used by the shipped config schema:
// type, properties, additionalProperties, required, enum, const, items,
// minItems, minimum, maximum, allOf and if/then. Throws on the first violation.
void validate(const nlohmann::json& instance, const nlohmann::json& schema);

// Schema accepting exactly the shape of `defaults`: same keys, no others, and
// the type of each default (integers stay integers).
nlohmann::json schema_from_defaults(const nlohmann::json& defaults);

}  // namespace gradshield::schema
