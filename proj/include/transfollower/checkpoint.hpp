#pragma once

// Model checkpoint container: a flat archive of named float64 parameter
// arrays plus the model kind and configuration.
//
// Layout (documented in README.md, stable across versions):
//   bytes 0..7    magic "TFLCKPT\n"
//   bytes 8..15   little-endian uint64: length of the JSON header
//   header        UTF-8 JSON {"format_version":1, "kind":..., "config":{...},
//                 "params":[{"name":..., "shape":[...]}, ...]}
//   payload       per params entry, row-major float64 values, little-endian

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "transfollower/io_util.hpp"
#include "transfollower/tensor.hpp"

namespace transfollower {

struct Checkpoint {
  std::string kind;
  nlohmann::json config;
  std::vector<std::pair<std::string, Tensor>> params;

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

constexpr char kCkptMagic[8] = {'T', 'F', 'L', 'C', 'K', 'P', 'T', '\n'};

inline void append_u64_le(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t read_u64_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline void append_f64_le(std::string& out, double d) {
  append_u64_le(out, std::bit_cast<std::uint64_t>(d));
}

inline double read_f64_le(const unsigned char* p) {
  return std::bit_cast<double>(read_u64_le(p));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  nlohmann::json header;
  header["format_version"] = 1;
  header["kind"] = ck.kind;
  header["config"] = ck.config;
  auto& plist = header["params"] = nlohmann::json::array();
  for (const auto& [name, t] : ck.params)
    plist.push_back({{"name", name}, {"shape", t.shape()}});
  const std::string hj = header.dump();

  std::string out;
  out.append(detail::kCkptMagic, 8);
  detail::append_u64_le(out, hj.size());
  out += hj;
  for (const auto& [name, t] : ck.params)
    for (double v : t.values()) detail::append_f64_le(out, v);
  atomic_write_file(path, out);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string raw = read_file(path);
  if (raw.size() < 16 || std::memcmp(raw.data(), detail::kCkptMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  const auto* bytes = reinterpret_cast<const unsigned char*>(raw.data());
  const std::uint64_t hlen = detail::read_u64_le(bytes + 8);
  if (16 + hlen > raw.size())
    throw std::runtime_error("truncated checkpoint header: " + path.string());
  nlohmann::json header = nlohmann::json::parse(raw.substr(16, hlen));
  if (header.at("format_version").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint format_version in " + path.string());

  Checkpoint ck;
  ck.kind = header.at("kind").get<std::string>();
  ck.config = header.at("config");
  std::size_t off = 16 + hlen;
  for (const auto& entry : header.at("params")) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<Shape>();
    const std::size_t n = detail::shape_numel(shape);
    if (off + 8 * n > raw.size())
      throw std::runtime_error("truncated checkpoint payload: " + path.string());
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i)
      values[i] = detail::read_f64_le(bytes + off + 8 * i);
    off += 8 * n;
    ck.params.emplace_back(name, Tensor(shape, std::move(values)));
  }
  return ck;
}

}  // namespace transfollower
