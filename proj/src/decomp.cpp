#include "gradshield/decomp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "gradshield/graddiag.hpp"
#include "gradshield/parallel.hpp"

namespace gradshield::decomp {

using nlohmann::json;

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMatrix> view(const Tensor& t) { return {t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())}; }

double cos_or_zero(std::span<const double> a, std::span<const double> b) {
  const double na = norm(a), nb = norm(b);
  return na > 0.0 && nb > 0.0 ? dot(a, b) / (na * nb) : 0.0;
}

}  // namespace

std::vector<double> GradDiffMatrix::mean_row() const {
  std::vector<double> m(width(), 0.0);
  for (std::size_t i = 0; i < rows(); ++i) {
    for (std::size_t c = 0; c < width(); ++c) m[c] += raw.at(i, c);
  }
  for (double& x : m) x /= static_cast<double>(rows());
  return m;
}

GradDiffMatrix make_grad_diff_matrix(Tensor raw, std::size_t layer) {
  if (raw.rank() != 2 || raw.rows() == 0) throw DecompError("gradient difference matrix must be a non-empty matrix");
  raw.require_finite("gradient difference matrix");
  GradDiffMatrix m;
  m.layer = layer;
  m.frobenius_norm = norm(raw.span());
  if (!(m.frobenius_norm > 0.0)) {
    throw DecompError("gradient difference matrix at layer " + std::to_string(layer) + " is all zeros over " +
                      std::to_string(raw.rows()) + " samples: the defense does not change the gradient");
  }
  m.normalized = raw;
  for (double& x : m.normalized.values()) x /= m.frobenius_norm;
  m.raw = std::move(raw);
  return m;
}

GradDiffMatrix build_grad_diff_matrix(const nn::Model& model, const corpus::Corpus& corpus,
                                      const defense::DefenseSpec& defense, std::size_t layer,
                                      const corpus::VocabLayout& layout, std::uint64_t seed) {
  if (corpus.empty()) throw DecompError("gradient difference matrix: empty corpus");
  defense.validate(model.config(), layout);
  Rng rng(seed);
  std::vector<graddiag::ConditionPair> pairs;
  for (const auto& s : corpus) pairs.push_back(graddiag::make_condition_pair(s, defense, rng, layout));
  const std::size_t d = model.config().d_model;
  Tensor raw({pairs.size(), d});
  parallel_for(pairs.size(), [&](std::size_t i) {
    const auto& p = pairs[i];
    const auto off = graddiag::tap_gradients(model, p.off, {}, {layer});
    const auto on = graddiag::tap_gradients(model, p.on, p.steering, {layer});
    auto row = raw.row(i);
    for (std::size_t t = p.off.response.begin; t < p.off.response.end; ++t) {
      auto a = on.grads[0].row(t + p.offset);
      auto b = off.grads[0].row(t);
      for (std::size_t c = 0; c < d; ++c) row[c] += a[c] - b[c];
    }
    for (double& x : row) x /= static_cast<double>(p.off.response.size());
  });
  return make_grad_diff_matrix(std::move(raw), layer);
}

double SpectrumResult::cosine(const std::string& reference, std::size_t component) const {
  for (std::size_t r = 0; r < reference_names.size(); ++r) {
    if (reference_names[r] == reference) return cosines.at(r, component);
  }
  throw std::out_of_range("unknown reference vector '" + reference + "'");
}

json SpectrumResult::to_json(std::size_t top) const {
  const std::size_t k = std::min(top, eigenvalues.size());
  json cos = json::object();
  for (std::size_t r = 0; r < reference_names.size(); ++r) {
    std::vector<double> row;
    for (std::size_t c = 0; c < k; ++c) row.push_back(cosines.at(r, c));
    cos[reference_names[r]] = row;
  }
  std::vector<double> cumulative(evr.size());
  std::partial_sum(evr.begin(), evr.end(), cumulative.begin());
  return {{"layer", layer},
          {"n_rows", n_rows},
          {"eigenvalues", std::vector<double>(eigenvalues.begin(), eigenvalues.begin() + static_cast<std::ptrdiff_t>(k))},
          {"evr", std::vector<double>(evr.begin(), evr.begin() + static_cast<std::ptrdiff_t>(k))},
          {"cumulative_evr", std::vector<double>(cumulative.begin(), cumulative.begin() + static_cast<std::ptrdiff_t>(k))},
          {"eigenvalue_sum", std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0)},
          {"threshold", threshold},
          {"retained", retained},
          {"oriented_to", oriented_to},
          {"cosines", cos}};
}

io::Container SpectrumResult::payload() const {
  io::Container c;
  c.header = {{"kind", "spectrum"}, {"summary", to_json(eigenvalues.size())}};
  c.tensors.push_back({"components", components, io::DType::f32});
  c.tensors.push_back({"scores", scores, io::DType::f32});
  return c;
}

SpectrumResult uncentered_pca(const GradDiffMatrix& matrix, double variance_threshold,
                              const std::vector<ReferenceVector>& references, const std::string& orient_to) {
  const std::size_t n = matrix.rows(), d = matrix.width();
  if (n < 2) throw DecompError("uncentered PCA needs at least 2 rows");
  if (!(variance_threshold > 0.0 && variance_threshold <= 1.0)) throw DecompError("variance threshold must be in (0, 1]");
  for (const auto& r : references) {
    if (r.values.size() != d) throw DecompError("reference vector '" + r.name + "' has the wrong width");
  }

  const auto g = view(matrix.normalized);
  const Eigen::MatrixXd m = (g.transpose() * g) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  if (solver.info() != Eigen::Success) throw DecompError("symmetric eigensolver did not converge");

  SpectrumResult s;
  s.layer = matrix.layer;
  s.n_rows = n;
  s.threshold = variance_threshold;
  s.components = Tensor({d, d});
  // Eigen returns ascending order.
  for (std::size_t k = 0; k < d; ++k) {
    const auto src = static_cast<Eigen::Index>(d - 1 - k);
    s.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(src)));
    for (std::size_t c = 0; c < d; ++c) s.components.at(k, c) = solver.eigenvectors()(static_cast<Eigen::Index>(c), src);
  }

  const ReferenceVector* orient = nullptr;
  for (const auto& r : references) {
    if (r.name == orient_to) orient = &r;
  }
  if (!orient_to.empty() && !orient) throw DecompError("orientation reference '" + orient_to + "' not supplied");
  s.oriented_to = orient_to;
  for (std::size_t k = 0; k < d; ++k) {
    auto row = s.components.row(k);
    double sign_key = 0.0;
    if (orient) sign_key = dot(row, orient->values);
    if (sign_key == 0.0) {
      std::size_t arg = 0;
      for (std::size_t c = 1; c < d; ++c) {
        if (std::abs(row[c]) > std::abs(row[arg])) arg = c;
      }
      sign_key = row[arg];
    }
    if (sign_key < 0.0) {
      for (double& x : row) x = -x;
    }
  }

  const double total = std::accumulate(s.eigenvalues.begin(), s.eigenvalues.end(), 0.0);
  double cumulative = 0.0;
  s.retained = d;
  for (std::size_t k = 0; k < d; ++k) {
    s.evr.push_back(total > 0.0 ? s.eigenvalues[k] / total : 0.0);
    cumulative += s.evr.back();
    if (s.retained == d && cumulative >= variance_threshold - 1e-12) s.retained = k + 1;
  }

  s.cosines = Tensor({references.size(), d});
  for (std::size_t r = 0; r < references.size(); ++r) {
    s.reference_names.push_back(references[r].name);
    for (std::size_t k = 0; k < d; ++k) s.cosines.at(r, k) = cos_or_zero(s.components.row(k), references[r].values);
  }

  s.scores = Tensor({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) s.scores.at(i, k) = dot(matrix.normalized.row(i), s.components.row(k));
  }
  return s;
}

std::vector<double> second_moment_spectrum_svd(const Tensor& normalized) {
  const std::size_t n = normalized.rows(), d = normalized.cols();
  if (n < 2) throw DecompError("spectrum needs at least 2 rows");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(view(normalized)));
  std::vector<double> out(d, 0.0);
  const auto& sv = svd.singularValues();
  for (Eigen::Index k = 0; k < sv.size(); ++k) out[static_cast<std::size_t>(k)] = sv(k) * sv(k) / static_cast<double>(n - 1);
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

json compare_defense_spectra(const SpectrumResult& pps, const SpectrumResult& ip, const GradDiffMatrix& pps_matrix,
                             const GradDiffMatrix& ip_matrix, const std::vector<ReferenceVector>& references) {
  if (pps.layer != ip.layer) throw DecompError("spectra were computed at different layers");
  json pc1 = json::object(), mean_vec = json::object();
  const auto pps_mean = pps_matrix.mean_row(), ip_mean = ip_matrix.mean_row();
  for (const auto& r : references) {
    pc1[r.name] = {{"pps", cos_or_zero(pps.components.row(0), r.values)}, {"ip", cos_or_zero(ip.components.row(0), r.values)}};
    mean_vec[r.name] = {{"pps", cos_or_zero(pps_mean, r.values)}, {"ip", cos_or_zero(ip_mean, r.values)}};
  }
  return {{"layer", pps.layer},
          {"evr1_pps", pps.evr.front()},
          {"evr1_ip", ip.evr.front()},
          {"evr1_ratio", ip.evr.front() > 0.0 ? pps.evr.front() / ip.evr.front() : 0.0},
          {"pc1_cosine", pc1},
          {"mean_difference_cosine", mean_vec},
          {"full_scale_reference",
           {{"note", "published full-scale values; context only, not reproducible at this scale"},
            {"evr1_pps", 0.603},
            {"evr1_ip", 0.292},
            {"pc1_cosine_pps", 0.269},
            {"pc1_cosine_ip", 0.184}}}};
}

void save_spectrum(const std::filesystem::path& dir, const std::string& stem, const SpectrumResult& s) {
  std::filesystem::create_directories(dir);
  io::write_bytes(dir / (stem + ".json"), s.to_json().dump(2) + "\n");
  io::write_file(dir / (stem + ".bin"), s.payload());
}

}  // namespace gradshield::decomp
