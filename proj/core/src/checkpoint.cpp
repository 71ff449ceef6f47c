#include "ttsv/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

namespace ttsv {

namespace {

constexpr const char* kMagic = "TTSVCKPT";
constexpr int kFormatVersion = 1;

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt, bool f32) {
  nlohmann::json manifest = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!t.defined()) {
      throw std::invalid_argument("save_checkpoint: undefined tensor '" + name + "'");
    }
    const uint64_t nbytes =
        static_cast<uint64_t>(t.numel()) * (f32 ? sizeof(float) : sizeof(double));
    manifest.push_back({{"name", name},
                        {"shape", t.shape()},
                        {"dtype", f32 ? "f32" : "f64"},
                        {"offset", offset},
                        {"nbytes", nbytes}});
    offset += nbytes;
  }
  nlohmann::json header{{"kind", ckpt.kind}, {"meta", ckpt.meta}, {"tensors", manifest}};
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw std::runtime_error("save_checkpoint: cannot open " + path);
  }
  out << kMagic << " " << kFormatVersion << "\n";
  out << header_text.size() << "\n";
  out << header_text << "\n";
  for (const auto& [name, t] : ckpt.tensors) {
    if (f32) {
      std::vector<float> buf(t.data().begin(), t.data().end());
      out.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    } else {
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    }
  }
  if (!out) {
    throw std::runtime_error("save_checkpoint: write failed for " + path);
  }
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("load_checkpoint: cannot open " + path);
  }
  std::string magic_line;
  if (!std::getline(in, magic_line)) {
    throw std::runtime_error("load_checkpoint: truncated file " + path);
  }
  const std::string expected = std::string(kMagic) + " ";
  if (magic_line.rfind(expected, 0) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path);
  }
  const int version = std::stoi(magic_line.substr(expected.size()));
  if (version != kFormatVersion) {
    throw std::runtime_error("load_checkpoint: unsupported format version " +
                             std::to_string(version) + " in " + path);
  }
  std::string len_line;
  if (!std::getline(in, len_line)) {
    throw std::runtime_error("load_checkpoint: truncated header in " + path);
  }
  const size_t header_len = static_cast<size_t>(std::stoull(len_line));
  std::string header_text(header_len, '\0');
  in.read(header_text.data(), static_cast<std::streamsize>(header_len));
  if (in.gcount() != static_cast<std::streamsize>(header_len)) {
    throw std::runtime_error("load_checkpoint: truncated header in " + path);
  }
  char newline = 0;
  in.read(&newline, 1);
  if (newline != '\n') {
    throw std::runtime_error("load_checkpoint: malformed header terminator in " + path);
  }

  nlohmann::json header = nlohmann::json::parse(header_text);
  Checkpoint ckpt;
  ckpt.format_version = version;
  ckpt.kind = header.at("kind").get<std::string>();
  ckpt.meta = header.at("meta");

  const std::streampos payload_start = in.tellg();
  in.seekg(0, std::ios::end);
  const uint64_t payload_size = static_cast<uint64_t>(in.tellg() - payload_start);

  uint64_t expected_size = 0;
  for (const auto& entry : header.at("tensors")) {
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
    if (offset != expected_size) {
      throw std::runtime_error("load_checkpoint: non-contiguous manifest in " + path);
    }
    expected_size = offset + nbytes;
  }
  if (expected_size != payload_size) {
    throw std::runtime_error("load_checkpoint: payload size mismatch in " + path +
                             " (manifest says " + std::to_string(expected_size) +
                             " bytes, file has " + std::to_string(payload_size) + ")");
  }

  in.seekg(payload_start);
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const Shape shape = entry.at("shape").get<Shape>();
    const std::string dtype = entry.at("dtype").get<std::string>();
    const uint64_t nbytes = entry.at("nbytes").get<uint64_t>();
    int64_t numel = 1;
    for (int64_t d : shape) {
      numel *= d;
    }
    std::vector<double> data(static_cast<size_t>(numel));
    if (dtype == "f64") {
      if (nbytes != static_cast<uint64_t>(numel) * sizeof(double)) {
        throw std::runtime_error("load_checkpoint: nbytes/shape mismatch for '" + name + "'");
      }
      in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
    } else if (dtype == "f32") {
      if (nbytes != static_cast<uint64_t>(numel) * sizeof(float)) {
        throw std::runtime_error("load_checkpoint: nbytes/shape mismatch for '" + name + "'");
      }
      std::vector<float> buf(static_cast<size_t>(numel));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(nbytes));
      std::copy(buf.begin(), buf.end(), data.begin());
    } else {
      throw std::runtime_error("load_checkpoint: unknown dtype '" + dtype + "'");
    }
    if (!in) {
      throw std::runtime_error("load_checkpoint: truncated payload in " + path);
    }
    ckpt.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
  }
  return ckpt;
}

void save_model_checkpoint(const std::string& path, const ModelConfig& cfg,
                           const TransformerWeights& weights) {
  Checkpoint ckpt;
  ckpt.kind = "model";
  ckpt.meta = {{"config", cfg.to_json()}};
  ckpt.tensors = weights.named_tensors();
  save_checkpoint(path, ckpt);
}

Model load_model_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "model") {
    throw std::runtime_error("load_model_checkpoint: '" + path + "' holds kind '" + ckpt.kind +
                             "', expected 'model'");
  }
  ModelConfig cfg = ModelConfig::from_json(ckpt.meta.at("config"));
  TransformerWeights w;
  w.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& [name, t] : ckpt.tensors) {
    if (name == "embedding") {
      w.embedding = t;
    } else if (name == "final_norm") {
      w.final_norm = t;
    } else if (name == "lm_head") {
      w.lm_head = t;
    } else if (name.rfind("layers.", 0) == 0) {
      const size_t dot = name.find('.', 7);
      const size_t layer = std::stoul(name.substr(7, dot - 7));
      const std::string field = name.substr(dot + 1);
      if (layer >= w.layers.size()) {
        throw std::runtime_error("load_model_checkpoint: layer index out of range: " + name);
      }
      LayerWeights& lw = w.layers[layer];
      if (field == "attn_norm") lw.attn_norm = t;
      else if (field == "wq") lw.wq = t;
      else if (field == "wk") lw.wk = t;
      else if (field == "wv") lw.wv = t;
      else if (field == "wo") lw.wo = t;
      else if (field == "ff_norm") lw.ff_norm = t;
      else if (field == "w1") lw.w1 = t;
      else if (field == "w2") lw.w2 = t;
      else throw std::runtime_error("load_model_checkpoint: unknown tensor: " + name);
    } else {
      throw std::runtime_error("load_model_checkpoint: unknown tensor: " + name);
    }
  }
  return Model(cfg, std::move(w));
}

void save_steering_checkpoint(const std::string& path, const SteeringVector& sv) {
  Checkpoint ckpt;
  ckpt.kind = "steering";
  ckpt.meta = {{"init_mode", to_string(sv.init_mode)},
               {"source_task", sv.source_task},
               {"seed", sv.seed},
               {"epochs_trained", sv.epochs_trained}};
  ckpt.tensors.emplace_back("steering", sv.values);
  save_checkpoint(path, ckpt);
}

SteeringVector load_steering_checkpoint(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "steering") {
    throw std::runtime_error("load_steering_checkpoint: '" + path + "' holds kind '" +
                             ckpt.kind + "', expected 'steering'");
  }
  SteeringVector sv;
  sv.init_mode = steering_init_from_string(ckpt.meta.at("init_mode").get<std::string>());
  sv.source_task = ckpt.meta.at("source_task").get<std::string>();
  sv.seed = ckpt.meta.at("seed").get<uint64_t>();
  sv.epochs_trained = ckpt.meta.at("epochs_trained").get<int64_t>();
  for (auto& [name, t] : ckpt.tensors) {
    if (name == "steering") {
      sv.values = t;
    }
  }
  if (!sv.values.defined()) {
    throw std::runtime_error("load_steering_checkpoint: missing 'steering' tensor in " + path);
  }
  return sv;
}

}  // namespace ttsv
