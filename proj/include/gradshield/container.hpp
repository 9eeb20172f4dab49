#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "gradshield/tensor.hpp"

namespace gradshield::io {

// Binary container shared by checkpoints, persona vectors and spectrum payloads:
//
//   u8   version
//   u32  header length (LE)      followed by the JSON header bytes
//   u32  tensor count (LE)
//   per tensor:
//     u16 name length, name bytes
//     u8  dtype (1 = f32, 2 = f64)
//     u8  rank, then rank x u64 dims (LE)
//     payload, little-endian
inline constexpr std::uint8_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
  DType dtype = DType::f64;
};

struct Container {
  nlohmann::json header = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& get(std::string_view name) const;
  bool contains(std::string_view name) const;
};

std::string encode(const Container& c);
Container decode(std::string_view bytes);

void write_file(const std::filesystem::path& path, const Container& c);
Container read_file(const std::filesystem::path& path);

std::string read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::string_view bytes);

// 64-bit FNV-1a as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

}  // namespace gradshield::io
