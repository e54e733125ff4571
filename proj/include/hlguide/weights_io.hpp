#pragma once

// Weight file layout (all integers and floats little-endian):
//
//   bytes 0..7    magic "HLGWGT01"
//   bytes 8..15   u64 header length H
//   next H bytes  UTF-8 JSON header; its "tensors" array lists
//                 {"name": str, "shape": [dims...]} in storage order
//   remainder     float64 values of each tensor, row-major, concatenated

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hlguide/errors.hpp"
#include "hlguide/sequence.hpp"

namespace hlguide {

inline constexpr char kWeightMagic[8] = {'H', 'L', 'G', 'W', 'G', 'T', '0', '1'};

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  Vector values;
};

struct WeightFile {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const NamedTensor& get(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return t;
    }
    throw ConfigError("weight file: missing tensor " + name);
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

inline std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (const auto d : shape) n *= d;
  return n;
}

}  // namespace detail

inline void write_weight_file(const std::filesystem::path& path, nlohmann::json header,
                              const std::vector<NamedTensor>& tensors) {
  nlohmann::json specs = nlohmann::json::array();
  for (const auto& t : tensors) {
    require(detail::element_count(t.shape) == t.values.size(), "weight file: tensor " + t.name + " shape mismatch");
    specs.push_back({{"name", t.name}, {"shape", t.shape}});
  }
  header["tensors"] = specs;
  const std::string header_text = header.dump();

  std::string blob(kWeightMagic, sizeof kWeightMagic);
  detail::put_u64(blob, header_text.size());
  blob += header_text;
  for (const auto& t : tensors) {
    for (const double v : t.values) detail::put_u64(blob, std::bit_cast<std::uint64_t>(v));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write weight file: " + path.string());
  out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
}

inline WeightFile read_weight_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("weight file not found: " + path.string());
  const std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto* bytes = reinterpret_cast<const unsigned char*>(blob.data());
  if (blob.size() < 16 || std::memcmp(blob.data(), kWeightMagic, sizeof kWeightMagic) != 0) {
    throw ConfigError("weight file: bad magic in " + path.string());
  }
  const std::uint64_t header_len = detail::get_u64(bytes + 8);
  if (16 + header_len > blob.size()) throw ConfigError("weight file: truncated header");
  WeightFile wf;
  wf.header = nlohmann::json::parse(blob.substr(16, header_len));
  std::size_t offset = 16 + header_len;
  for (const auto& spec : wf.header.at("tensors")) {
    NamedTensor t;
    t.name = spec.at("name").get<std::string>();
    t.shape = spec.at("shape").get<std::vector<std::size_t>>();
    const std::size_t n = detail::element_count(t.shape);
    if (offset + 8 * n > blob.size()) throw ConfigError("weight file: truncated tensor " + t.name);
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) t.values[i] = std::bit_cast<double>(detail::get_u64(bytes + offset + 8 * i));
    offset += 8 * n;
    wf.tensors.push_back(std::move(t));
  }
  if (offset != blob.size()) throw ConfigError("weight file: trailing bytes after last tensor");
  return wf;
}

}  // namespace hlguide
