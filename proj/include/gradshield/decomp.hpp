#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "gradshield/container.hpp"
#include "gradshield/corpus.hpp"
#include "gradshield/defenses.hpp"
#include "gradshield/model.hpp"

namespace gradshield::decomp {

class DecompError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Rows are per-sample gradient differences (defended minus defenseless), each a
// mean over aligned response tokens at one layer.
struct GradDiffMatrix {
  std::size_t layer = 0;
  Tensor raw;         // [N x d]
  Tensor normalized;  // raw / ||raw||_F
  double frobenius_norm = 0.0;

  std::size_t rows() const { return raw.rows(); }
  std::size_t width() const { return raw.cols(); }
  std::vector<double> mean_row() const;
};

// Throws DecompError when `raw` is all zeros.
GradDiffMatrix make_grad_diff_matrix(Tensor raw, std::size_t layer);

GradDiffMatrix build_grad_diff_matrix(const nn::Model& model, const corpus::Corpus& corpus,
                                      const defense::DefenseSpec& defense, std::size_t layer,
                                      const corpus::VocabLayout& layout, std::uint64_t seed);

struct ReferenceVector {
  std::string name;
  std::vector<double> values;
};

struct SpectrumResult {
  std::size_t layer = 0;
  std::size_t n_rows = 0;
  std::vector<double> eigenvalues;  // descending
  Tensor components;                // [d x d], row k is v_k
  std::vector<double> evr;
  double threshold = 0.95;
  std::size_t retained = 0;  // smallest k reaching the cumulative threshold
  std::string oriented_to;   // reference each v_k has nonnegative cosine with
  std::vector<std::string> reference_names;
  Tensor cosines;  // [refs x d]
  Tensor scores;   // [N x d], projections of the normalized rows

  double cosine(const std::string& reference, std::size_t component) const;
  // Eigenvalues, ratios and the cosine table for the top `top` components.
  nlohmann::json to_json(std::size_t top = 8) const;
  // Components and scores as f32.
  io::Container payload() const;
};

// Eigendecomposition of the uncentered second-moment matrix G^T G / (N - 1) of
// the normalized rows. Components are sign-oriented toward `orient_to` (one of
// `references`); without it the largest-magnitude coordinate is made positive.
SpectrumResult uncentered_pca(const GradDiffMatrix& matrix, double variance_threshold = 0.95,
                              const std::vector<ReferenceVector>& references = {}, const std::string& orient_to = "");

// The same spectrum from the singular values of the normalized matrix.
std::vector<double> second_moment_spectrum_svd(const Tensor& normalized);

nlohmann::json compare_defense_spectra(const SpectrumResult& pps, const SpectrumResult& ip, const GradDiffMatrix& pps_matrix,
                                       const GradDiffMatrix& ip_matrix, const std::vector<ReferenceVector>& references);

void save_spectrum(const std::filesystem::path& dir, const std::string& stem, const SpectrumResult& s);

}  // namespace gradshield::decomp
