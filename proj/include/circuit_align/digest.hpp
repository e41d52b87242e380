#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>

#include <openssl/evp.h>

#include "circuit_align/error.hpp"

namespace circuit_align {

// Incremental SHA-256, hex encoded on finish.
class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    require(ctx_ != nullptr && EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) == 1,
            ErrorCode::io_error, "sha256 init failed");
  }

  Sha256& update(const void* data, std::size_t size) {
    EVP_DigestUpdate(ctx_.get(), data, size);
    return *this;
  }
  Sha256& update(std::string_view text) { return update(text.data(), text.size()); }

  template <typename T>
  Sha256& update_pod(const T& value) {
    return update(&value, sizeof(T));
  }

  std::string hex() {
    std::array<unsigned char, EVP_MAX_MD_SIZE> raw{};
    unsigned int length = 0;
    EVP_DigestFinal_ex(ctx_.get(), raw.data(), &length);
    static constexpr char kHex[] = "0123456789abcdef";
    std::string out;
    out.reserve(length * 2);
    for (unsigned int i = 0; i < length; ++i) {
      out.push_back(kHex[raw[i] >> 4]);
      out.push_back(kHex[raw[i] & 0xf]);
    }
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view text) { return Sha256().update(text).hex(); }

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::io_error, "cannot open " + path);
  Sha256 hasher;
  char buffer[1 << 16];
  while (in) {
    in.read(buffer, sizeof(buffer));
    hasher.update(buffer, static_cast<std::size_t>(in.gcount()));
  }
  return hasher.hex();
}

}  // namespace circuit_align
