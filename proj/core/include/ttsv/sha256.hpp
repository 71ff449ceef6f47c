#pragma once

#include <cstdint>
#include <span>
#include <string>

namespace ttsv {

/// Incremental SHA-256 (FIPS 180-4). Used for weight-freeze checks and
/// run-manifest content hashes.
class Sha256 {
 public:
  Sha256();
  void update(std::span<const uint8_t> bytes);
  void update(const void* data, size_t n);
  /// Finalizes and returns the lowercase hex digest. The object must not be
  /// updated afterwards.
  std::string hex_digest();

  static std::string of_bytes(std::span<const uint8_t> bytes);
  static std::string of_string(std::string_view s);
  static std::string of_file(const std::string& path);

 private:
  void process_block(const uint8_t* block);

  uint32_t h_[8];
  uint64_t total_len_ = 0;
  uint8_t buffer_[64];
  size_t buffer_len_ = 0;
  bool finalized_ = false;
};

}  // namespace ttsv
