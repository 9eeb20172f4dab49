#pragma once

// Small worlds and models shared by the unit tests.

#include "gradshield/corpus.hpp"
#include "gradshield/model.hpp"
#include "gradshield/personas.hpp"

namespace gradshield::testing {

inline nn::ModelConfig tiny_config(std::size_t layers = 2, std::uint64_t seed = 5) {
  nn::ModelConfig c;
  c.n_layers = layers;
  c.d_model = 16;
  c.n_heads = 2;
  c.vocab_size = 64;
  c.max_seq = 40;
  c.seed = seed;
  return c;
}

struct TinyWorld {
  corpus::VocabLayout vocab;
  corpus::TraitLayout traits = corpus::make_trait_layout(vocab, {});
  corpus::BigramChain chain{vocab, corpus::ChainConfig{3, 6, traits.rare_tokens(), 0.02}};

  corpus::TraitSpec broad(double intensity) const {
    corpus::TraitSpec t = traits.broad;
    t.intensity = intensity;
    return t;
  }
  corpus::Corpus make(double intensity, std::size_t n, std::uint64_t seed) const {
    return corpus::generate_corpus(chain, broad(intensity), n, seed);
  }
};

inline personas::PersonaVector gaussian_vector(std::size_t rows, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  personas::PersonaVector v{"ref", personas::Source::external, Tensor({rows, d})};
  for (double& x : v.per_layer.values()) x = rng.normal();
  return v;
}

}  // namespace gradshield::testing
