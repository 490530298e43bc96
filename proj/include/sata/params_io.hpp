#pragma once

// Flat key -> array text format shared by model parameters and prototype banks.
//
//   sata-params 1
//   <key> <rank> <extent_0> ... <extent_{rank-1}> <value_0> <value_1> ...
//
// One entry per line, keys sorted, values in row-major order. Values are
// written in shortest round-trip form so load(save(x)) is bit-exact.

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <vector>

#include "sata/errors.hpp"
#include "sata/tensor.hpp"

namespace sata {

struct ParamEntry {
  Shape shape;
  std::vector<double> values;

  bool operator==(const ParamEntry&) const = default;
};

using ParamMap = std::map<std::string, ParamEntry>;

inline constexpr const char* kParamsMagic = "sata-params";
inline constexpr int kParamsVersion = 1;

inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& token) {
  double v = 0.0;
  const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
  if (res.ec != std::errc{} || res.ptr != token.data() + token.size()) {
    throw ConfigError("params: bad number '" + token + "'");
  }
  return v;
}

inline void write_params(std::ostream& os, const ParamMap& params) {
  os << kParamsMagic << ' ' << kParamsVersion << '\n';
  for (const auto& [key, entry] : params) {
    if (key.empty() || key.find_first_of(" \t\n") != std::string::npos) {
      throw ConfigError("params: invalid key '" + key + "'");
    }
    os << key << ' ' << entry.shape.size();
    for (auto d : entry.shape) os << ' ' << d;
    for (double v : entry.values) os << ' ' << format_double(v);
    os << '\n';
  }
}

inline ParamMap read_params(std::istream& is) {
  std::string magic;
  int version = 0;
  if (!(is >> magic >> version) || magic != kParamsMagic) {
    throw ConfigError("params: missing '" + std::string(kParamsMagic) + "' header");
  }
  if (version != kParamsVersion) {
    throw ConfigError("params: unsupported version " + std::to_string(version));
  }
  ParamMap out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string key;
    std::size_t rank = 0;
    if (!(ls >> key >> rank)) throw ConfigError("params: malformed line for '" + key + "'");
    ParamEntry e;
    for (std::size_t i = 0; i < rank; ++i) {
      std::size_t d = 0;
      if (!(ls >> d)) throw ConfigError("params: truncated shape for '" + key + "'");
      e.shape.push_back(d);
    }
    const std::size_t n = shape_size(e.shape);
    e.values.reserve(n);
    std::string tok;
    while (ls >> tok) e.values.push_back(parse_double(tok));
    if (e.values.size() != n) {
      throw ConfigError("params: '" + key + "' expects " + std::to_string(n) + " values, got " +
                        std::to_string(e.values.size()));
    }
    if (!out.emplace(key, std::move(e)).second) {
      throw ConfigError("params: duplicate key '" + key + "'");
    }
  }
  return out;
}

inline void save_params(const std::string& path, const ParamMap& params) {
  std::ofstream os(path);
  if (!os) throw std::system_error(errno, std::generic_category(), "cannot open " + path);
  write_params(os, params);
  if (!os) throw std::system_error(errno, std::generic_category(), "write failed: " + path);
}

inline ParamMap load_params(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::system_error(errno, std::generic_category(), "cannot open " + path);
  return read_params(is);
}

inline const ParamEntry& require_entry(const ParamMap& params, const std::string& key) {
  const auto it = params.find(key);
  if (it == params.end()) throw ConfigError("params: missing key '" + key + "'");
  return it->second;
}

/// FNV-1a over keys, shapes and the raw bytes of every value.
inline std::uint64_t checksum(const ParamMap& params) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [key, e] : params) {
    mix(key.data(), key.size());
    for (auto d : e.shape) mix(&d, sizeof d);
    mix(e.values.data(), e.values.size() * sizeof(double));
  }
  return h;
}

}  // namespace sata
