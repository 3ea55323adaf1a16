#include "esr/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <vector>

#include "esr/error.hpp"

namespace esr::nd {

namespace {

constexpr char kMagic[4] = {'T', 'N', 'S', 'R'};
constexpr std::uint32_t kMaxRank = 16;

template <typename U>
void put_le(std::ostream& out, U bits) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <typename U>
U get_le(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw IoError("tensor dump truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

std::string_view to_string(DType d) { return d == DType::f32 ? "f32" : "f64"; }

DType parse_dtype(std::string_view s) {
  if (s == "f32") return DType::f32;
  if (s == "f64") return DType::f64;
  throw ArgumentError("unknown dtype '" + std::string(s) + "'");
}

void write_u32(std::ostream& out, std::uint32_t v) { put_le<std::uint32_t>(out, v); }
std::uint32_t read_u32(std::istream& in) { return get_le<std::uint32_t>(in); }

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t) {
  out.write(kMagic, 4);
  write_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) write_u32(out, static_cast<std::uint32_t>(d));
  for (T v : t.data()) {
    if constexpr (sizeof(T) == 4) {
      put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!out) throw IoError("tensor write failed");
}

template <typename T>
Tensor<T> read_tensor(std::istream& in, DType stored) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("bad tensor magic (expected TNSR)");
  }
  const std::uint32_t rank = read_u32(in);
  if (rank < 1 || rank > kMaxRank) throw IoError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) {
    d = read_u32(in);
    if (d < 1) throw IoError("bad tensor dim 0");
  }
  std::vector<T> data(numel(shape));
  for (auto& v : data) {
    if (stored == DType::f32) {
      v = static_cast<T>(std::bit_cast<float>(get_le<std::uint32_t>(in)));
    } else {
      v = static_cast<T>(std::bit_cast<double>(get_le<std::uint64_t>(in)));
    }
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  write_tensor(out, t);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  if (bytes.size() < 8) throw IoError("tensor dump truncated");
  std::istringstream header(bytes);
  header.ignore(4);
  const std::uint32_t rank = read_u32(header);
  if (rank < 1 || rank > kMaxRank) throw IoError("bad tensor rank");
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) count *= read_u32(header);
  const std::size_t payload = bytes.size() - 8 - 4 * std::size_t(rank);
  DType stored;
  if (payload == count * 4) {
    stored = DType::f32;
  } else if (payload == count * 8) {
    stored = DType::f64;
  } else {
    throw IoError("tensor payload size does not match f32 or f64");
  }
  std::istringstream body(bytes);
  return read_tensor<T>(body, stored);
}

#define ESR_INSTANTIATE_IO(T)                                          \
  template void write_tensor<T>(std::ostream&, const Tensor<T>&);      \
  template Tensor<T> read_tensor<T>(std::istream&, DType);             \
  template void save_tensor<T>(const std::string&, const Tensor<T>&); \
  template Tensor<T> load_tensor<T>(const std::string&);

ESR_INSTANTIATE_IO(float)
ESR_INSTANTIATE_IO(double)

}  // namespace esr::nd
