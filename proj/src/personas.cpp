#include "gradshield/personas.hpp"

#include <cmath>

namespace gradshield::personas {

std::string to_string(Source s) {
  switch (s) {
    case Source::trait_vs_anti: return "trait_vs_anti";
    case Source::prompt_diff: return "prompt_diff";
    case Source::random: return "random";
    case Source::external: return "external";
  }
  return "external";
}

Source source_from_string(const std::string& s) {
  if (s == "trait_vs_anti") return Source::trait_vs_anti;
  if (s == "prompt_diff") return Source::prompt_diff;
  if (s == "random") return Source::random;
  if (s == "external") return Source::external;
  throw io::FormatError("unknown persona vector source '" + s + "'");
}

Tensor PersonaVector::layer(std::size_t l) const {
  if (l >= n_rows()) {
    throw std::out_of_range("persona vector has no layer " + std::to_string(l) + " (rows 0.." +
                            std::to_string(n_rows() - 1) + ")");
  }
  auto r = per_layer.row(l);
  return Tensor::vector(std::vector<double>(r.begin(), r.end()));
}

std::vector<double> PersonaVector::norm_per_layer() const {
  std::vector<double> out(n_rows());
  for (std::size_t l = 0; l < n_rows(); ++l) out[l] = norm(per_layer.row(l));
  return out;
}

void PersonaVector::validate() const {
  if (per_layer.rank() != 2 || per_layer.size() == 0) throw ShapeError("persona vector must be a non-empty matrix");
  per_layer.require_finite("persona vector");
  if (source == Source::trait_vs_anti) {
    for (double x : per_layer.row(0)) {
      if (x != 0.0) throw ExtractionError("trait_vs_anti persona vector must have an all-zero embedding row");
    }
  }
}

PersonaVector PersonaVector::scaled(double factor) const {
  PersonaVector out = *this;
  for (double& x : out.per_layer.values()) x *= factor;
  return out;
}

Tensor mean_response_activations(const nn::Model& model, const corpus::Corpus& corpus) {
  const std::size_t rows = model.config().n_layers + 1, d = model.config().d_model;
  Tensor sum({rows, d});
  std::size_t count = 0;
  for (const auto& s : corpus) {
    ad::Tape tape(false);
    model.forward(tape, s.tokens);
    for (std::size_t l = 0; l < rows; ++l) {
      const Tensor& h = tape.tap_point(nn::tap_name(l)).captured;
      auto acc = sum.row(l);
      for (std::size_t t = s.response.begin; t < s.response.end; ++t) {
        auto r = h.row(t);
        for (std::size_t c = 0; c < d; ++c) acc[c] += r[c];
      }
    }
    count += s.response.size();
  }
  if (count == 0) throw ExtractionError("no response tokens to average");
  for (double& x : sum.values()) x /= static_cast<double>(count);
  return sum;
}

PersonaVector extract_persona_vector(const nn::Model& model, const corpus::Corpus& trait_corpus,
                                     const corpus::Corpus& anti_corpus, double threshold,
                                     const std::string& trait_name) {
  const auto trait = corpus::filter_by_label(trait_corpus, threshold, true);
  const auto anti = corpus::filter_by_label(anti_corpus, threshold, false);
  if (trait.empty()) throw ExtractionError("trait corpus is empty after filtering at threshold " + std::to_string(threshold));
  if (anti.empty()) throw ExtractionError("anti corpus is empty after filtering at threshold " + std::to_string(threshold));
  Tensor a = mean_response_activations(model, trait);
  Tensor b = mean_response_activations(model, anti);
  PersonaVector v{trait_name, Source::trait_vs_anti, Tensor(a.shape())};
  for (std::size_t l = 1; l < a.rows(); ++l) {
    for (std::size_t c = 0; c < a.cols(); ++c) v.per_layer.at(l, c) = a.at(l, c) - b.at(l, c);
  }
  return v;
}

PersonaVector extract_prompt_diff_vectors(const nn::Model& model, const corpus::Corpus& corpus,
                                          const corpus::MarkerBank& bank, const corpus::VocabLayout& layout,
                                          std::uint64_t seed, const std::string& name) {
  if (corpus.empty()) throw ExtractionError("prompt-diff extraction needs a non-empty corpus");
  const std::size_t rows = model.config().n_layers + 1, d = model.config().d_model;
  Tensor total({rows, d});
  Rng rng(seed);
  for (const auto& s : corpus) {
    if (s.marker) throw ExtractionError("prompt-diff extraction expects an unmarked corpus");
    const auto marked = corpus::inject_marker(s, bank, rng, layout);
    const std::size_t at = marked.marker->span.begin, m = marked.marker->span.size();
    ad::Tape plain(false), prompted(false);
    model.forward(plain, s.tokens);
    model.forward(prompted, marked.tokens);
    if (marked.tokens.size() != s.tokens.size() + m) throw std::logic_error("prompt-diff: alignment failure");
    const std::size_t n_suffix = s.tokens.size() - at;
    for (std::size_t l = 0; l < rows; ++l) {
      const Tensor& h0 = plain.tap_point(nn::tap_name(l)).captured;
      const Tensor& h1 = prompted.tap_point(nn::tap_name(l)).captured;
      std::vector<double> diff(d, 0.0);
      for (std::size_t t = at; t < s.tokens.size(); ++t) {
        if (marked.tokens[t + m] != s.tokens[t]) throw std::logic_error("prompt-diff: alignment failure");
        auto r0 = h0.row(t);
        auto r1 = h1.row(t + m);
        for (std::size_t c = 0; c < d; ++c) diff[c] += r1[c] - r0[c];
      }
      auto acc = total.row(l);
      for (std::size_t c = 0; c < d; ++c) acc[c] += diff[c] / static_cast<double>(n_suffix);
    }
  }
  for (double& x : total.values()) x /= static_cast<double>(corpus.size());
  return PersonaVector{name, Source::prompt_diff, std::move(total)};
}

PersonaVector random_direction(std::size_t d, const PersonaVector& norm_match, std::size_t layer, std::uint64_t seed) {
  if (norm_match.width() != d) throw ShapeError("random_direction: width mismatch");
  const double target = norm(norm_match.layer(layer).span());
  if (target == 0.0) throw ExtractionError("random_direction: reference norm is zero at layer " + std::to_string(layer));
  Rng rng(seed);
  std::vector<double> g(d);
  for (double& x : g) x = rng.normal();
  const double n = norm(g);
  PersonaVector out{norm_match.trait_name + ".random", Source::random, Tensor({norm_match.n_rows(), d})};
  auto row = out.per_layer.row(layer);
  for (std::size_t c = 0; c < d; ++c) row[c] = g[c] * (target / n);
  return out;
}

PersonaVector random_directions(const PersonaVector& norm_match, std::uint64_t seed) {
  PersonaVector out{norm_match.trait_name + ".random", Source::random, Tensor(norm_match.per_layer.shape())};
  const auto norms = norm_match.norm_per_layer();
  for (std::size_t l = 0; l < norm_match.n_rows(); ++l) {
    if (norms[l] == 0.0) continue;
    PersonaVector one = random_direction(norm_match.width(), norm_match, l, derive_seed(seed, l));
    auto src = one.per_layer.row(l);
    std::copy(src.begin(), src.end(), out.per_layer.row(l).begin());
  }
  return out;
}

io::Container to_container(const PersonaVector& v) {
  v.validate();
  io::Container c;
  c.header["kind"] = "persona_vector";
  c.header["trait_name"] = v.trait_name;
  c.header["source"] = to_string(v.source);
  c.header["shape"] = v.per_layer.shape();
  c.header["norm_per_layer"] = v.norm_per_layer();
  c.tensors.push_back(io::NamedTensor{"per_layer", v.per_layer, io::DType::f64});
  return c;
}

PersonaVector vector_from_container(const io::Container& c) {
  if (c.header.value("kind", "") != "persona_vector") throw io::FormatError("container is not a persona vector");
  PersonaVector v{c.header.at("trait_name").get<std::string>(),
                  source_from_string(c.header.at("source").get<std::string>()), c.get("per_layer")};
  v.validate();
  return v;
}

void save_vector(const std::filesystem::path& path, const PersonaVector& v) { io::write_file(path, to_container(v)); }

PersonaVector load_vector(const std::filesystem::path& path) { return vector_from_container(io::read_file(path)); }

}  // namespace gradshield::personas
