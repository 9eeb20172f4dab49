#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace gradshield::runner {

inline constexpr const char* kVersion = "0.1.0";

class MissingInputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::string> kinds();

// Full config schema: top level, the lab overrides (shaped like the default lab
// config) and per-kind params.
nlohmann::json config_schema();

// Validates `config` and returns it with every default filled in: lab overrides
// merged onto the default lab config and params completed per kind. The seed
// override, when given, replaces "seed".
nlohmann::json normalize(const nlohmann::json& config, std::optional<std::uint64_t> seed_override = {});

// Hash of a normalized config; names the output directory.
std::string config_hash(const nlohmann::json& normalized);

struct RunResult {
  std::filesystem::path dir;
  nlohmann::json manifest;
  nlohmann::json summary;
};

// Runs one experiment into <out_root>/<kind>-<hash>. Writes every output, then
// manifest.json with the config hash, version, seeds, wall time, per-file
// hashes and report_hash (over every output except the manifest).
// Throws schema::SchemaError, MissingInputError or train::DivergenceError.
RunResult run(const nlohmann::json& config, const std::filesystem::path& out_root,
              std::optional<std::uint64_t> seed_override = {});

// Figures re-rendered from the CSVs of a finished run directory.
std::map<std::string, std::string> render_figures(const std::filesystem::path& run_dir);

std::string report_hash(const std::filesystem::path& run_dir);

}  // namespace gradshield::runner
