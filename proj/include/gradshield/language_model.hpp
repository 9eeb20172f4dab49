#pragma once

#include <cstddef>
#include <memory>
#include <vector>

namespace gradshield {

// Incremental decoding state: consume one token, get the next-token
// distribution (probabilities, summing to 1).
class TokenStream {
 public:
  virtual ~TokenStream() = default;
  virtual std::vector<double> push(int token) = 0;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::size_t vocab_size() const = 0;
  virtual std::unique_ptr<TokenStream> open() const = 0;
};

}  // namespace gradshield
