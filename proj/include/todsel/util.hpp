// Copyright (c) 2026 todsel authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace todsel {

// Error taxonomy. The CLI maps ConfigError -> exit 1, everything else -> exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Warning sink. Defaults to stderr; tests install a capture hook.
using WarnHook = std::function<void(const std::string&)>;

inline WarnHook& warn_hook() {
  static WarnHook hook = [](const std::string& m) { std::cerr << "[warn] " << m << "\n"; };
  return hook;
}

inline void warn(const std::string& message) { warn_hook()(message); }

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write file: " + path);
  out << content;
  if (!out) throw IoError("write failed: " + path);
}

inline std::string fnv1a64_hex_of_bytes(const std::string& bytes, uint64_t h = 0xcbf29ce484222325ULL) {
  const uint64_t v = fnv1a64(bytes.data(), bytes.size(), h);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

inline std::string fnv1a64_hex_of_file(const std::string& path) {
  return fnv1a64_hex_of_bytes(read_text_file(path));
}

template <typename It>
std::string join(It begin, It end, const std::string& sep) {
  std::ostringstream os;
  for (It it = begin; it != end; ++it) {
    if (it != begin) os << sep;
    os << *it;
  }
  return os.str();
}

inline std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  return join(parts.begin(), parts.end(), sep);
}

}  // namespace todsel
