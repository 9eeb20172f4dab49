// gradshield <kind> --config <path> [--out <dir>] [--seed <n>]
//
// Exit codes: 0 success, 1 other error, 2 config rejected by the schema,
// 3 missing input, 4 training diverged.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradshield/container.hpp"
#include "gradshield/oracles.hpp"
#include "gradshield/runner.hpp"
#include "gradshield/schema.hpp"
#include "gradshield/trainer.hpp"

namespace fs = std::filesystem;
using namespace gradshield;
using nlohmann::json;

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale lab for preventative steering and inoculation prompting"};
  std::string kind;
  std::string config_path;
  std::string out_dir = "runs";
  std::optional<std::uint64_t> seed;
  std::string write_manifest;

  std::string kind_help = "experiment kind, or 'schema' to print the config schema:";
  for (const auto& k : runner::kinds()) kind_help += " " + k;
  app.add_option("kind", kind, kind_help)->required();
  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--out", out_dir, "output root; each run writes <out>/<kind>-<config hash>");
  app.add_option("--seed", seed, "overrides the config seed");
  app.add_option("--write-manifest", write_manifest, "oracles: write the suite manifest to this path");
  app.footer("Threads: set GRADSHIELD_THREADS (default 1).");
  CLI11_PARSE(app, argc, argv);

  if (kind == "schema") {
    std::cout << runner::config_schema().dump(2) << "\n";
    return 0;
  }

  try {
    json config = {{"kind", kind}};
    if (!config_path.empty()) {
      if (!fs::exists(config_path)) {
        std::cerr << "missing input: config not found: " << config_path << "\n";
        return 3;
      }
      try {
        config = json::parse(io::read_bytes(config_path));
      } catch (const json::parse_error& e) {
        std::cerr << "config rejected: " << config_path << " is not valid JSON: " << e.what() << "\n";
        return 2;
      }
      if (!config.is_object()) throw schema::SchemaError("", "config must be a JSON object");
      if (!config.contains("kind")) config["kind"] = kind;
      if (config["kind"] != kind) {
        throw schema::SchemaError("/kind", "config is for '" + config["kind"].dump() + "' but '" + kind + "' was requested");
      }
    }
    const auto result = runner::run(config, out_dir, seed);
    if (kind == "oracles" && !write_manifest.empty()) {
      const auto results = oracles::run_oracle_suite(runner::normalize(config, seed)["params"]["seed"]);
      io::write_bytes(write_manifest, oracles::suite_manifest(results, runner::normalize(config, seed)["params"]["seed"]).dump(2));
    }
    std::cout << result.dir.string() << "\n" << result.summary.dump(2) << "\n";
    if (kind == "oracles" && !result.summary.value("passed", false)) return 1;
    return 0;
  } catch (const schema::SchemaError& e) {
    std::cerr << "config rejected: " << e.what() << "\n";
    return 2;
  } catch (const runner::MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return 3;
  } catch (const train::DivergenceError& e) {
    std::cerr << "training diverged at step " << e.step() << ": " << e.what() << "\nlast steps (step, lr, loss):\n";
    for (const auto& s : e.tail()) std::cerr << "  " << s.step << ", " << s.lr << ", " << s.loss << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
