#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ttsv/model.hpp"
#include "ttsv/steering.hpp"

namespace ttsv {

/// Container layout:
///   line 1: "TTSVCKPT <format_version>"
///   line 2: header byte count (decimal)
///   header: JSON {kind, meta, tensors:[{name, shape, dtype, offset, nbytes}]}
///   one newline, then raw little-endian IEEE-754 payloads in manifest order.
struct Checkpoint {
  int format_version = 1;
  std::string kind;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;
};

/// f32 stores payloads in 32-bit (lossy); the default 64-bit round-trips
/// bit-exactly.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt, bool f32 = false);
Checkpoint load_checkpoint(const std::string& path);

void save_model_checkpoint(const std::string& path, const ModelConfig& cfg,
                           const TransformerWeights& weights);
Model load_model_checkpoint(const std::string& path);

void save_steering_checkpoint(const std::string& path, const SteeringVector& sv);
SteeringVector load_steering_checkpoint(const std::string& path);

}  // namespace ttsv
