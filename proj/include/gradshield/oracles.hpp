#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace gradshield::oracles {

// Independent reference computations. Each oracle builds its own inputs from a
// seed and recomputes a library result by a different route (plain loops,
// closed forms, exhaustive enumeration).
struct OracleResult {
  std::string name;
  std::string inputs_hash;  // FNV-1a over the generated inputs, hex
  double expected = 0.0;
  double actual = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;

  nlohmann::json to_json() const;
};

struct GradientCheck {
  std::string primitive;
  int trial = 0;
  double rel_error = 0.0;  // norm-wise, reverse mode against central differences
};

// Every autodiff primitive on `trials` random shapes.
std::vector<GradientCheck> primitive_gradient_checks(std::uint64_t seed, int trials);

OracleResult mlp_plain_loops(std::uint64_t seed);
// One SGD step on a linear readout h = X W gives
// dh_t = -lr * sum_s (x_t . x_s) dL/dh_s.
OracleResult linear_delta_closed_form(std::uint64_t seed);
OracleResult jacobi_svd_spectrum(std::uint64_t seed);
OracleResult patch_and_rerun_steering(std::uint64_t seed);
OracleResult activation_average(std::uint64_t seed);
OracleResult exhaustive_trait_score(std::uint64_t seed);

std::vector<OracleResult> run_oracle_suite(std::uint64_t seed);

// Manifest: {"seed": s, "oracles": [{name, inputs_hash, detail}, ...]}.
nlohmann::json suite_manifest(const std::vector<OracleResult>& results, std::uint64_t seed);
// Names whose inputs hash differs from the manifest, plus any missing on either side.
std::vector<std::string> manifest_mismatches(const nlohmann::json& manifest, const std::vector<OracleResult>& results);

// Singular values of a dense row-major matrix by one-sided Jacobi rotations.
std::vector<double> jacobi_singular_values(std::vector<double> a, std::size_t rows, std::size_t cols);

}  // namespace gradshield::oracles
