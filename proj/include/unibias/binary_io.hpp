#pragma once

// Little helpers for the checkpoint containers. Values are written in host
// byte order; checkpoints are not meant to move between architectures.

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "unibias/errors.hpp"

namespace unibias::binary {

template <class T>
  requires std::is_trivially_copyable_v<T>
void write(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

inline void write_string(std::ostream& out, const std::string& s) {
  write<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline void write_doubles(std::ostream& out, const std::vector<double>& v) {
  write<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

template <class T>
  requires std::is_trivially_copyable_v<T>
T read(std::istream& in) {
  T value;
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw DataError("checkpoint truncated");
  return value;
}

inline std::string read_string(std::istream& in) {
  const auto n = read<std::uint64_t>(in);
  if (n > (1ULL << 32)) throw DataError("checkpoint string length is implausible");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw DataError("checkpoint truncated");
  return s;
}

inline std::vector<double> read_doubles(std::istream& in) {
  const auto n = read<std::uint64_t>(in);
  if (n > (1ULL << 34)) throw DataError("checkpoint array length is implausible");
  std::vector<double> v(n);
  if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double))))
    throw DataError("checkpoint truncated");
  return v;
}

}  // namespace unibias::binary
