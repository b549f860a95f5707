#pragma once

#include <openssl/evp.h>

#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <vector>

namespace vcmoe::cli {

//! Hex SHA-256 of the concatenated contents of `paths`.
inline std::string sha256_files(const std::vector<std::string>& paths) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    std::vector<char> buf(1 << 16);
    while (in) {
      in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
    }
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int k = 0; k < len; ++k) {
    out.push_back(hex[md[k] >> 4]);
    out.push_back(hex[md[k] & 15]);
  }
  return out;
}

//! First 16 hex digits of a digest as a seed.
inline std::uint64_t seed_from_digest(const std::string& digest) {
  return std::stoull(digest.substr(0, 16), nullptr, 16);
}

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  bool seed_derived = false;
  std::string input_digest;
  std::string version;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  nlohmann::json to_json() const {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return {{"command", command},
            {"config", config},
            {"seed", seed},
            {"seed_derived_from_input", seed_derived},
            {"input_digest", input_digest},
            {"version", version},
            {"wall_time_seconds", wall}};
  }
};

}  // namespace vcmoe::cli
