#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradshield/corpus.hpp"
#include "gradshield/model.hpp"
#include "gradshield/tensor.hpp"

namespace gradshield::personas {

enum class Source { trait_vs_anti, prompt_diff, random, external };
std::string to_string(Source s);
Source source_from_string(const std::string& s);

// One direction per residual tap: row 0 is the embedding output, row l the
// output of block l.
struct PersonaVector {
  std::string trait_name;
  Source source = Source::external;
  Tensor per_layer;  // [(L+1) x d]

  std::size_t n_rows() const { return per_layer.rows(); }
  std::size_t width() const { return per_layer.cols(); }
  Tensor layer(std::size_t l) const;
  std::vector<double> norm_per_layer() const;
  void validate() const;
  // Same direction, every row scaled by `factor`.
  PersonaVector scaled(double factor) const;
};

class ExtractionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Token-pooled mean residual activation over response tokens, per tap.
Tensor mean_response_activations(const nn::Model& model, const corpus::Corpus& corpus);

PersonaVector extract_persona_vector(const nn::Model& model, const corpus::Corpus& trait_corpus,
                                     const corpus::Corpus& anti_corpus, double threshold,
                                     const std::string& trait_name);

// Marked-minus-unmarked activations averaged over the positions that follow the
// marker, then over samples. Each sample draws its marker from `seed`.
PersonaVector extract_prompt_diff_vectors(const nn::Model& model, const corpus::Corpus& corpus,
                                          const corpus::MarkerBank& bank, const corpus::VocabLayout& layout,
                                          std::uint64_t seed, const std::string& name = "prompt_diff");

// Gaussian direction at `layer`, rescaled to the reference norm there; other rows zero.
PersonaVector random_direction(std::size_t d, const PersonaVector& norm_match, std::size_t layer, std::uint64_t seed);
// Independent norm-matched draws at every row with nonzero reference norm.
PersonaVector random_directions(const PersonaVector& norm_match, std::uint64_t seed);

io::Container to_container(const PersonaVector& v);
PersonaVector vector_from_container(const io::Container& c);
void save_vector(const std::filesystem::path& path, const PersonaVector& v);
PersonaVector load_vector(const std::filesystem::path& path);

}  // namespace gradshield::personas
