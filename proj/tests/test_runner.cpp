#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <regex>
#include <sstream>
#include <string>

#include "fixtures.hpp"
#include "gradshield/container.hpp"
#include "gradshield/runner.hpp"
#include "gradshield/schema.hpp"
#include "gradshield/svg.hpp"

using namespace gradshield;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gradshield_runner_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string error_path(const json& config) {
  try {
    runner::normalize(config);
  } catch (const schema::SchemaError& e) {
    return e.path();
  }
  return "<accepted>";
}

std::size_t data_rows(const std::string& csv) {
  std::istringstream is(csv);
  std::string line;
  std::size_t n = 0;
  std::getline(is, line);
  while (std::getline(is, line)) n += !line.empty();
  return n;
}

// Lab overrides matching testing::tiny_config().
json tiny_lab() {
  const auto m = testing::tiny_config();
  return {{"model", {{"n_layers", m.n_layers}, {"d_model", m.d_model}, {"n_heads", m.n_heads}, {"max_seq", m.max_seq}}},
          {"persona_samples", 40},
          {"steering_layer", m.n_layers}};
}

}  // namespace

TEST_CASE("unknown fields are rejected with their path") {
  CHECK(error_path({{"kind", "gen-data"}, {"params", {{"intensty", 0.5}}}}) == "/params/intensty");
  CHECK(error_path({{"kind", "gen-data"}, {"lab", {{"model", {{"layers", 3}}}}}}) == "/lab/model/layers");
  CHECK(error_path({{"kind", "gen-data"}, {"extra", 1}}) == "/extra");
  CHECK(error_path({{"kind", "nonsense"}}) == "/kind");
  CHECK(error_path({{"kind", "grad-cosine"}, {"params", {{"defense", "both"}}}}) == "/params/defense");
  CHECK(error_path({{"kind", "gen-data"}, {"params", {{"n", -3}}}}) == "/params/n");
  CHECK(error_path({{"kind", "gen-data"}, {"params", {{"n", 12}}}}) == "<accepted>");
}

TEST_CASE("normalization fills defaults and applies the seed override") {
  const json n = runner::normalize({{"kind", "gen-data"}, {"seed", 4}, {"params", {{"n", 12}}}});
  CHECK(n["params"]["n"] == 12);
  CHECK(n["params"]["trait"] == "broad");
  CHECK(n["lab"]["steering_layer"] == 3);
  CHECK(n["seed"] == 4);
  const json o = runner::normalize({{"kind", "gen-data"}, {"seed", 4}}, 9);
  CHECK(o["seed"] == 9);
  CHECK(runner::config_hash(n) != runner::config_hash(o));
}

TEST_CASE("the shipped schema file is the generated schema") {
  const json shipped = json::parse(io::read_bytes(GRADSHIELD_SCHEMA_FILE));
  CHECK(shipped == runner::config_schema());
}

TEST_CASE("every shipped example config validates") {
  std::size_t n = 0;
  for (const auto& entry : fs::directory_iterator(GRADSHIELD_CONFIG_DIR)) {
    if (entry.path().extension() != ".json") continue;
    INFO(entry.path().filename().string());
    CHECK_NOTHROW(runner::normalize(json::parse(io::read_bytes(entry.path()))));
    ++n;
  }
  CHECK(n >= runner::kinds().size() - 1);  // make-all-figures needs run directories
}

TEST_CASE("kinds needing a base checkpoint report it missing") {
  const auto out = scratch("missing");
  CHECK_THROWS_AS(runner::run({{"kind", "grad-cosine"}}, out), runner::MissingInputError);
  CHECK_THROWS_AS(runner::run({{"kind", "grad-cosine"}, {"inputs", {{"base", (out / "nope.ckpt").string()}}}}, out),
                  runner::MissingInputError);
}

TEST_CASE("gen-data with a fixed seed writes identical files") {
  const auto out = scratch("gendata");
  const json cfg = {{"kind", "gen-data"}, {"seed", 3}, {"params", {{"n", 20}, {"marker", "broad"}}}};
  const auto a = runner::run(cfg, out / "a");
  const auto b = runner::run(cfg, out / "b");
  CHECK(io::read_bytes(a.dir / "corpus.jsonl") == io::read_bytes(b.dir / "corpus.jsonl"));
  CHECK(a.manifest["report_hash"] == b.manifest["report_hash"]);
  CHECK(a.dir.filename() == b.dir.filename());
  CHECK(data_rows(io::read_bytes(a.dir / "labels.csv")) == 20);
  CHECK(a.manifest["config_hash"].get<std::string>().substr(0, 12) == a.dir.filename().string().substr(9));
  for (const auto& f : a.manifest["outputs"]) {
    CHECK(io::fnv1a_hex(io::read_bytes(a.dir / f["file"].get<std::string>())) == f["hash"]);
  }
  fs::remove_all(out);
}

TEST_CASE("grad-cosine rows are samples x layers x tokens x conditions minus exclusions") {
  const auto out = scratch("cosine");
  const fs::path base = out / "base.ckpt";
  nn::save_checkpoint(base, nn::Model::build(testing::tiny_config()), 0, 0);
  const json cfg = {{"kind", "grad-cosine"},
                    {"lab", tiny_lab()},
                    {"inputs", {{"base", base.string()}}},
                    {"params", {{"samples", 4}, {"layers", {1, 2}}}}};
  const auto r = runner::run(cfg, out);
  const std::size_t response_len = runner::normalize(cfg)["lab"]["generation"]["response_len"];
  const std::size_t expected = 4 * 2 * response_len * 2 - r.summary["excluded_off"].get<std::size_t>() -
                               r.summary["excluded_on"].get<std::size_t>();
  CHECK(data_rows(io::read_bytes(r.dir / "cosines.csv")) == expected);
  CHECK(data_rows(io::read_bytes(r.dir / "sample_means.csv")) == 4 * 2);
  CHECK(fs::exists(r.dir / "cosine_layer1.svg"));
  CHECK(fs::exists(r.dir / "cosine_layer2.svg"));
  fs::remove_all(out);
}

TEST_CASE("a single point lands on the identity line") {
  svg::PlotOptions o;
  o.identity_line = true;
  const std::string doc = svg::plot({{"p", {0.5}, {0.5}}}, o);
  std::smatch line, circle;
  REQUIRE(std::regex_search(doc, line,
                            std::regex(R"re(<line x1="([-0-9.]+)" y1="([-0-9.]+)" x2="([-0-9.]+)" y2="([-0-9.]+)")re")));
  REQUIRE(std::regex_search(doc, circle, std::regex(R"re(<circle cx="([-0-9.]+)" cy="([-0-9.]+)")re")));
  const double x1 = std::stod(line[1]), y1 = std::stod(line[2]), x2 = std::stod(line[3]), y2 = std::stod(line[4]);
  const double cx = std::stod(circle[1]), cy = std::stod(circle[2]);
  // Distance from the point to the line, in pixels; coordinates are printed to 0.01.
  const double dist = std::abs((x2 - x1) * (y1 - cy) - (x1 - cx) * (y2 - y1)) / std::hypot(x2 - x1, y2 - y1);
  CHECK(dist < 0.02);
}

TEST_CASE("plots are byte-stable and match the golden file") {
  svg::PlotOptions o;
  o.title = "golden";
  o.x_label = "off";
  o.y_label = "on";
  o.identity_line = true;
  o.quadrant_shading = true;
  const std::vector<svg::Series> s{{"a", {-0.2, 0.1, 0.3}, {0.05, 0.2, -0.1}}, {"b", {0.0, 0.4}, {0.4, 0.0}}};
  const std::string doc = svg::plot(s, o);
  CHECK(doc == svg::plot(s, o));
  const fs::path golden = fs::path(GRADSHIELD_TEST_DATA) / "golden" / "scatter.svg";
  if (std::getenv("GRADSHIELD_UPDATE_GOLDEN")) io::write_bytes(golden, doc);
  CHECK(io::read_bytes(golden) == doc);
}

TEST_CASE("axis ranges cover every point and empty input renders a placeholder") {
  const std::vector<double> v{-3.0, 0.25, 7.5};
  const auto r = svg::covering_range(v);
  for (double x : v) CHECK((r.lo <= x && x <= r.hi));
  const auto flat = svg::covering_range({2.0, 2.0});
  CHECK(flat.lo < 2.0);
  CHECK(flat.hi > 2.0);
  CHECK(svg::plot({}, {}).find("no data") != std::string::npos);
  CHECK(svg::plot({{"nan", {NAN}, {NAN}}}, {}).find("no data") != std::string::npos);
  CHECK(svg::bar_chart({}, {}).find("no data") != std::string::npos);
}
