#include "dir3d/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace dir3d {

namespace io {

namespace {

template <typename U>
void write_le(std::ostream& os, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  unsigned char bytes[sizeof(U)];
  read_exact(is, reinterpret_cast<char*>(bytes), sizeof(U));
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { write_le(os, v); }
void write_u32(std::ostream& os, std::uint32_t v) { write_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { write_le(os, v); }
void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint8_t read_u8(std::istream& is) { return read_le<std::uint8_t>(is); }
std::uint32_t read_u32(std::istream& is) { return read_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return read_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(read_le<std::uint64_t>(is)); }

std::string read_string(std::istream& is, std::size_t max_length) {
  const std::uint32_t n = read_u32(is);
  if (n > max_length) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  read_exact(is, s.data(), n);
  return s;
}

void read_exact(std::istream& is, char* dst, std::size_t n) {
  is.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) throw FormatError("unexpected end of data");
}

}  // namespace io

namespace {

template <typename S>
void write_scalars(std::ostream& os, std::span<const S> values) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  std::vector<char> buffer(values.size() * sizeof(S));
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Bits bits = std::bit_cast<Bits>(values[i]);
    for (std::size_t b = 0; b < sizeof(S); ++b) buffer[i * sizeof(S) + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
  os.write(buffer.data(), static_cast<std::streamsize>(buffer.size()));
}

template <typename S>
std::vector<S> read_scalars(std::istream& is, std::size_t count) {
  using Bits = std::conditional_t<sizeof(S) == 4, std::uint32_t, std::uint64_t>;
  std::vector<unsigned char> buffer(count * sizeof(S));
  io::read_exact(is, reinterpret_cast<char*>(buffer.data()), buffer.size());
  std::vector<S> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    Bits bits = 0;
    for (std::size_t b = 0; b < sizeof(S); ++b) bits |= static_cast<Bits>(buffer[i * sizeof(S) + b]) << (8 * b);
    values[i] = std::bit_cast<S>(bits);
  }
  return values;
}

}  // namespace

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& tensor) {
  os.write(kTensorMagic, sizeof(kTensorMagic));
  io::write_u8(os, static_cast<std::uint8_t>(sizeof(T)));
  io::write_u32(os, static_cast<std::uint32_t>(tensor.rank()));
  for (auto e : tensor.shape()) io::write_u64(os, e);
  write_scalars<T>(os, tensor.data());
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[sizeof(kTensorMagic)];
  io::read_exact(is, magic, sizeof(magic));
  if (std::memcmp(magic, kTensorMagic, sizeof(magic)) != 0) throw FormatError("bad tensor magic");
  const auto precision = io::read_u8(is);
  if (precision != 4 && precision != 8) throw FormatError("bad tensor precision tag " + std::to_string(precision));
  const auto rank = io::read_u32(is);
  if (rank == 0 || rank > 16) throw FormatError("bad tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& e : shape) {
    e = io::read_u64(is);
    if (e == 0 || e > (std::size_t{1} << 40)) throw FormatError("bad tensor extent");
    count *= e;
    if (count > (std::size_t{1} << 34)) throw FormatError("tensor too large");
  }
  std::vector<T> data;
  if (precision == sizeof(T)) {
    data = read_scalars<T>(is, count);
  } else if (precision == 4) {
    auto raw = read_scalars<float>(is, count);
    data.assign(raw.begin(), raw.end());
  } else {
    auto raw = read_scalars<double>(is, count);
    data.reserve(count);
    for (double v : raw) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& tensor) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, tensor);
  if (!os) throw IoError("write failed for " + path.string());
}

template <typename T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

template void write_tensor(std::ostream&, const Tensor<float>&);
template void write_tensor(std::ostream&, const Tensor<double>&);
template Tensor<float> read_tensor(std::istream&);
template Tensor<double> read_tensor(std::istream&);
template void save_tensor(const std::filesystem::path&, const Tensor<float>&);
template void save_tensor(const std::filesystem::path&, const Tensor<double>&);
template Tensor<float> load_tensor(const std::filesystem::path&);
template Tensor<double> load_tensor(const std::filesystem::path&);

}  // namespace dir3d
