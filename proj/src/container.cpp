#include "gradshield/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace gradshield::io {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("container truncated at byte " + std::to_string(pos_));
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Tensor& Container::get(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw FormatError("container has no tensor '" + std::string(name) + "'");
}

bool Container::contains(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

std::string encode(const Container& c) {
  std::string out;
  out.push_back(static_cast<char>(kContainerVersion));
  const std::string header = c.header.dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& nt : c.tensors) {
    if (nt.name.size() > 0xffff) throw FormatError("tensor name too long");
    put<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
    out += nt.name;
    out.push_back(static_cast<char>(nt.dtype));
    const auto& shape = nt.tensor.shape();
    out.push_back(static_cast<char>(shape.size()));
    for (std::size_t d : shape) put<std::uint64_t>(out, d);
    if (nt.dtype == DType::f32) {
      for (double v : nt.tensor.values()) put<float>(out, static_cast<float>(v));
    } else {
      for (double v : nt.tensor.values()) put<double>(out, v);
    }
  }
  return out;
}

Container decode(std::string_view bytes) {
  Reader r(bytes);
  const auto version = r.get<std::uint8_t>();
  if (version != kContainerVersion) throw FormatError("unsupported container version " + std::to_string(version));
  Container c;
  const auto header_len = r.get<std::uint32_t>();
  try {
    c.header = nlohmann::json::parse(r.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto name_len = r.get<std::uint16_t>();
    nt.name = std::string(r.take(name_len));
    const auto dtype = r.get<std::uint8_t>();
    if (dtype != 1 && dtype != 2) throw FormatError("tensor '" + nt.name + "' has unknown dtype");
    nt.dtype = static_cast<DType>(dtype);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> data(shape_size(shape));
    for (double& v : data) v = nt.dtype == DType::f32 ? static_cast<double>(r.get<float>()) : r.get<double>();
    nt.tensor = Tensor(std::move(shape), std::move(data));
    c.tensors.push_back(std::move(nt));
  }
  if (!r.done()) throw FormatError("trailing bytes after container payload");
  return c;
}

std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

void write_file(const std::filesystem::path& path, const Container& c) { write_bytes(path, encode(c)); }

Container read_file(const std::filesystem::path& path) { return decode(read_bytes(path)); }

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[static_cast<std::size_t>(i)] = digits[h & 0xF];
  return out;
}

}  // namespace gradshield::io
