#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>

#include "esr/tensor.hpp"

// Binary tensor dump: "TNSR", u32 rank, u32 dims[rank], then the payload as
// little-endian f32 or f64. The element type is not stored; readers are told
// (checkpoints record it in their header) or infer it from the file size.
namespace esr::nd {

enum class DType : std::uint8_t { f32, f64 };

std::string_view to_string(DType d);
DType parse_dtype(std::string_view s);

template <typename T>
constexpr DType dtype_of() {
  return sizeof(T) == 4 ? DType::f32 : DType::f64;
}

template <typename T>
void write_tensor(std::ostream& out, const Tensor<T>& t);

/// Reads a dump stored as `stored` and converts to T.
template <typename T>
Tensor<T> read_tensor(std::istream& in, DType stored);

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t);

/// Loads a standalone dump, inferring f32/f64 from the payload size.
template <typename T>
Tensor<T> load_tensor(const std::string& path);

void write_u32(std::ostream& out, std::uint32_t v);
std::uint32_t read_u32(std::istream& in);

}  // namespace esr::nd
