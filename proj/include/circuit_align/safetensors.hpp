#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuit_align/error.hpp"

namespace circuit_align {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> values;

  std::size_t numel() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

using TensorMap = std::map<std::string, Tensor>;

namespace detail {

inline float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
  std::uint32_t exponent = (h >> 10) & 0x1fu;
  std::uint32_t mantissa = h & 0x3ffu;
  std::uint32_t bits;
  if (exponent == 0) {
    if (mantissa == 0) {
      bits = sign;
    } else {
      exponent = 127 - 15 + 1;
      while ((mantissa & 0x400u) == 0) {
        mantissa <<= 1;
        --exponent;
      }
      mantissa &= 0x3ffu;
      bits = sign | (exponent << 23) | (mantissa << 13);
    }
  } else if (exponent == 0x1f) {
    bits = sign | 0x7f800000u | (mantissa << 13);
  } else {
    bits = sign | ((exponent + 127 - 15) << 23) | (mantissa << 13);
  }
  return std::bit_cast<float>(bits);
}

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "F64") return 8;
  return 0;
}

template <typename T>
T read_le(const unsigned char* p) {
  static_assert(std::endian::native == std::endian::little, "little-endian host required");
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

}  // namespace detail

// Reads the hub's single-file tensor container: u64 LE header size, JSON
// header, raw little-endian payload. Every error names the offending tensor.
inline TensorMap read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::load_error, "cannot open weights file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  require(bytes.size() >= 8, ErrorCode::load_error, "weights file shorter than its header size field");
  const auto header_size = detail::read_le<std::uint64_t>(bytes.data());
  require(header_size <= bytes.size() - 8, ErrorCode::load_error,
          "weights header length " + std::to_string(header_size) + " exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<long>(header_size));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::load_error, std::string("weights header is not valid JSON: ") + e.what());
  }
  require(header.is_object(), ErrorCode::load_error, "weights header must be a JSON object");
  const unsigned char* payload = bytes.data() + 8 + header_size;
  const std::size_t payload_size = bytes.size() - 8 - header_size;

  TensorMap out;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") continue;
    try {
      const std::string dtype = entry.at("dtype").get<std::string>();
      const std::size_t width = detail::dtype_size(dtype);
      require(width != 0, ErrorCode::load_error,
              "tensor '" + name + "' has unsupported dtype " + dtype);
      Tensor t;
      t.shape = entry.at("shape").get<std::vector<std::size_t>>();
      const auto offsets = entry.at("data_offsets").get<std::vector<std::size_t>>();
      require(offsets.size() == 2 && offsets[0] <= offsets[1], ErrorCode::load_error,
              "tensor '" + name + "' has malformed data_offsets");
      require(offsets[1] <= payload_size, ErrorCode::load_error,
              "tensor '" + name + "' is truncated: payload ends at byte " +
                  std::to_string(payload_size) + ", tensor needs " + std::to_string(offsets[1]));
      const std::size_t n = t.numel();
      require(offsets[1] - offsets[0] == n * width, ErrorCode::load_error,
              "tensor '" + name + "' byte length " + std::to_string(offsets[1] - offsets[0]) +
                  " does not match shape (expected " + std::to_string(n * width) + ")");
      t.values.resize(n);
      const unsigned char* src = payload + offsets[0];
      for (std::size_t i = 0; i < n; ++i) {
        if (dtype == "F32") {
          t.values[i] = detail::read_le<float>(src + 4 * i);
        } else if (dtype == "F64") {
          t.values[i] = static_cast<float>(detail::read_le<double>(src + 8 * i));
        } else if (dtype == "F16") {
          t.values[i] = detail::half_to_float(detail::read_le<std::uint16_t>(src + 2 * i));
        } else {
          const std::uint32_t bits =
              static_cast<std::uint32_t>(detail::read_le<std::uint16_t>(src + 2 * i)) << 16;
          t.values[i] = std::bit_cast<float>(bits);
        }
      }
      out.emplace(name, std::move(t));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::load_error, "tensor '" + name + "' header entry malformed: " + e.what());
    }
  }
  return out;
}

// Writes F32 tensors in name order. The header is space padded to a multiple
// of 8 bytes.
inline void write_safetensors(const std::filesystem::path& path, const TensorMap& tensors,
                              const std::map<std::string, std::string>& metadata = {}) {
  nlohmann::json header = nlohmann::json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    require(t.values.size() == t.numel(), ErrorCode::invalid_argument,
            "tensor '" + name + "' value count does not match its shape");
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + 4 * t.numel()}}};
    offset += 4 * t.numel();
  }
  std::string text = header.dump();
  while (text.size() % 8 != 0) text.push_back(' ');
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::io_error, "cannot write " + path.string());
  const std::uint64_t size = text.size();
  out.write(reinterpret_cast<const char*>(&size), 8);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) {
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(4 * t.values.size()));
  }
  require(static_cast<bool>(out), ErrorCode::io_error, "write failed for " + path.string());
}

}  // namespace circuit_align
