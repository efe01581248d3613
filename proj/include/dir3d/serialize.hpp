#pragma once

// Flat binary tensor format:
//   "DIR3DTEN" | u8 precision (4 or 8) | u32 rank | rank x u64 extents | scalars
// All integers and scalars are little-endian.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "dir3d/tensor.hpp"

namespace dir3d {

inline constexpr char kTensorMagic[8] = {'D', 'I', 'R', '3', 'D', 'T', 'E', 'N'};

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& tensor);

/// Reads one tensor. A stored precision different from T is converted.
template <typename T>
Tensor<T> read_tensor(std::istream& is);

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& tensor);
template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path);

namespace io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes

std::uint8_t read_u8(std::istream& is);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is, std::size_t max_length = 1u << 26);
void read_exact(std::istream& is, char* dst, std::size_t n);

}  // namespace io

}  // namespace dir3d
