#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuit_align/digest.hpp"
#include "circuit_align/error.hpp"
#include "circuit_align/hooks.hpp"
#include "circuit_align/safetensors.hpp"
#include "circuit_align/tokenizer.hpp"

namespace circuit_align {

struct ModelConfig {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t d_model = 0;
  std::size_t d_head = 0;
  std::size_t d_mlp = 0;
  std::size_t vocab_size = 0;
  std::size_t max_positions = 0;
  double layernorm_epsilon = 1e-5;
  std::string architecture_tag = "gpt2_family";

  void validate() const {
    require(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && d_head >= 1 && d_mlp >= 1 &&
                vocab_size >= 1 && max_positions >= 1,
            ErrorCode::load_error, "config counts must all be >= 1");
    require(d_model == n_heads * d_head, ErrorCode::load_error,
            "config d_model " + std::to_string(d_model) + " != n_heads*d_head " +
                std::to_string(n_heads * d_head));
    require(layernorm_epsilon > 0.0 && std::isfinite(layernorm_epsilon), ErrorCode::load_error,
            "config layernorm_epsilon must be finite and > 0");
    require(architecture_tag == "gpt2_family", ErrorCode::load_error,
            "unsupported architecture_tag '" + architecture_tag + "' (supported: gpt2_family)");
  }

  // Every component in canonical order.
  std::vector<ComponentId> components() const {
    std::vector<ComponentId> out;
    for (std::size_t l = 0; l < n_layers; ++l) {
      for (std::size_t h = 0; h < n_heads; ++h) out.push_back(ComponentId::attn(l, h));
      out.push_back(ComponentId::mlp(l));
    }
    return out;
  }

  void check_component(const ComponentId& c) const {
    require(c.layer < n_layers && (!c.is_head() || c.head < n_heads), ErrorCode::invalid_argument,
            "component " + to_string(c) + " out of range for this model");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"n_layers", c.n_layers},           {"n_heads", c.n_heads},
       {"d_model", c.d_model},             {"d_head", c.d_head},
       {"d_mlp", c.d_mlp},                 {"vocab_size", c.vocab_size},
       {"max_positions", c.max_positions}, {"layernorm_epsilon", c.layernorm_epsilon},
       {"architecture_tag", c.architecture_tag}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("d_model").get_to(c.d_model);
  j.at("d_head").get_to(c.d_head);
  j.at("d_mlp").get_to(c.d_mlp);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("max_positions").get_to(c.max_positions);
  j.at("layernorm_epsilon").get_to(c.layernorm_epsilon);
  c.architecture_tag = j.value("architecture_tag", std::string("gpt2_family"));
}

struct LayerWeights {
  std::vector<float> ln1_w, ln1_b;
  std::vector<float> w_qkv;  // [d_model, 3*d_model]
  std::vector<float> b_qkv;  // [3*d_model]
  std::vector<float> w_o;    // [d_model, d_model], rows grouped by head
  std::vector<float> b_o;    // [d_model]
  std::vector<float> ln2_w, ln2_b;
  std::vector<float> w_in;   // [d_model, d_mlp]
  std::vector<float> b_in;   // [d_mlp]
  std::vector<float> w_out;  // [d_mlp, d_model]
  std::vector<float> b_out;  // [d_model]
};

struct ModelWeights {
  std::vector<float> wte;  // [vocab, d_model]
  std::vector<float> wpe;  // [max_positions, d_model]
  std::vector<float> lnf_w, lnf_b;
  std::vector<float> w_u;  // [vocab, d_model]; tied to wte when absent from the file
  std::vector<LayerWeights> layers;
};

struct ModelBundle {
  std::string name;
  ModelConfig config;
  ModelWeights weights;
  Tokenizer tokenizer;
  std::string weights_digest;
};

namespace detail {

struct WeightSlot {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float>* target;
};

inline std::vector<WeightSlot> weight_slots(const ModelConfig& c, ModelWeights& w, bool include_lm_head) {
  const std::size_t d = c.d_model;
  w.layers.resize(c.n_layers);
  std::vector<WeightSlot> slots = {
      {"wte.weight", {c.vocab_size, d}, &w.wte},
      {"wpe.weight", {c.max_positions, d}, &w.wpe},
      {"ln_f.weight", {d}, &w.lnf_w},
      {"ln_f.bias", {d}, &w.lnf_b},
  };
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    auto& L = w.layers[l];
    const std::string p = "h." + std::to_string(l) + ".";
    slots.push_back({p + "ln_1.weight", {d}, &L.ln1_w});
    slots.push_back({p + "ln_1.bias", {d}, &L.ln1_b});
    slots.push_back({p + "attn.c_attn.weight", {d, 3 * d}, &L.w_qkv});
    slots.push_back({p + "attn.c_attn.bias", {3 * d}, &L.b_qkv});
    slots.push_back({p + "attn.c_proj.weight", {d, d}, &L.w_o});
    slots.push_back({p + "attn.c_proj.bias", {d}, &L.b_o});
    slots.push_back({p + "ln_2.weight", {d}, &L.ln2_w});
    slots.push_back({p + "ln_2.bias", {d}, &L.ln2_b});
    slots.push_back({p + "mlp.c_fc.weight", {d, c.d_mlp}, &L.w_in});
    slots.push_back({p + "mlp.c_fc.bias", {c.d_mlp}, &L.b_in});
    slots.push_back({p + "mlp.c_proj.weight", {c.d_mlp, d}, &L.w_out});
    slots.push_back({p + "mlp.c_proj.bias", {d}, &L.b_out});
  }
  if (include_lm_head) slots.push_back({"lm_head.weight", {c.vocab_size, d}, &w.w_u});
  return slots;
}

inline std::string shape_string(const std::vector<std::size_t>& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "," : "") + std::to_string(shape[i]);
  return out + "]";
}

}  // namespace detail

inline ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::load_error, "cannot open config " + path.string());
  ModelConfig config;
  try {
    config = nlohmann::json::parse(in).get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::load_error, "config " + path.string() + " malformed: " + e.what());
  }
  config.validate();
  return config;
}

// Installs tensors into a bundle, checking names, shapes and finiteness.
inline ModelWeights weights_from_tensors(const ModelConfig& config, TensorMap tensors) {
  TensorMap stripped;
  for (auto& [name, t] : tensors) {
    std::string key = name;
    if (key.rfind("transformer.", 0) == 0) key = key.substr(12);
    stripped.emplace(std::move(key), std::move(t));
  }
  const bool has_head = stripped.count("lm_head.weight") > 0;
  ModelWeights w;
  for (const auto& slot : detail::weight_slots(config, w, has_head)) {
    auto it = stripped.find(slot.name);
    require(it != stripped.end(), ErrorCode::load_error, "missing tensor '" + slot.name + "'");
    require(it->second.shape == slot.shape, ErrorCode::load_error,
            "tensor '" + slot.name + "' has shape " + detail::shape_string(it->second.shape) +
                ", expected " + detail::shape_string(slot.shape));
    for (float v : it->second.values) {
      require(std::isfinite(v), ErrorCode::load_error, "tensor '" + slot.name + "' holds NaN/Inf");
    }
    *slot.target = std::move(it->second.values);
  }
  if (!has_head) w.w_u = w.wte;
  return w;
}

inline TensorMap tensors_from_weights(const ModelConfig& config, const ModelWeights& weights) {
  ModelWeights copy = weights;
  TensorMap out;
  const bool tied = copy.w_u == copy.wte;
  for (const auto& slot : detail::weight_slots(config, copy, !tied)) {
    out.emplace(slot.name, Tensor{slot.shape, *slot.target});
  }
  return out;
}

// Digest of in-memory weights: tensor names, shapes and float bytes in
// name order.
inline std::string weights_content_digest(const ModelConfig& config, const ModelWeights& weights) {
  Sha256 h;
  for (const auto& [name, t] : tensors_from_weights(config, weights)) {
    h.update(name);
    for (auto d : t.shape) h.update_pod(static_cast<std::uint64_t>(d));
    h.update(t.values.data(), t.values.size() * sizeof(float));
  }
  return h.hex();
}

inline ModelBundle load_model(const std::filesystem::path& config_file,
                              const std::filesystem::path& weights_file,
                              const std::filesystem::path& tokenizer_dir) {
  ModelBundle bundle;
  bundle.config = load_config(config_file);
  bundle.weights = weights_from_tensors(bundle.config, read_safetensors(weights_file));
  bundle.tokenizer = Tokenizer::load(tokenizer_dir);
  require(bundle.tokenizer.vocab_size() <= bundle.config.vocab_size, ErrorCode::load_error,
          "tokenizer has " + std::to_string(bundle.tokenizer.vocab_size()) +
              " tokens but config vocab_size is " + std::to_string(bundle.config.vocab_size));
  bundle.weights_digest = sha256_file(weights_file.string());
  bundle.name = config_file.parent_path().filename().string();
  return bundle;
}

inline constexpr const char* kBundleFiles[] = {"config.json", "model.safetensors", "vocab.json", "merges.txt"};

// checksums.json maps each bundle file to its sha256.
inline void verify_checksums(const std::filesystem::path& dir) {
  const auto path = dir / "checksums.json";
  if (!std::filesystem::exists(path)) return;
  nlohmann::json sums;
  try {
    std::ifstream in(path);
    sums = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::load_error, "checksums.json: " + std::string(e.what()));
  }
  require(sums.is_object(), ErrorCode::load_error, "checksums.json must be an object");
  for (const auto& [file, expected] : sums.items()) {
    require(std::filesystem::exists(dir / file), ErrorCode::load_error, "checksummed file missing: " + file);
    const auto actual = sha256_file((dir / file).string());
    require(expected.is_string() && actual == expected.get<std::string>(), ErrorCode::load_error,
            "checksum mismatch for " + file);
  }
}

inline void write_checksums(const std::filesystem::path& dir) {
  nlohmann::json sums = nlohmann::json::object();
  for (const char* f : kBundleFiles) sums[f] = sha256_file((dir / f).string());
  std::ofstream out(dir / "checksums.json", std::ios::trunc);
  out << sums.dump(2) << '\n';
  require(static_cast<bool>(out), ErrorCode::io_error, "cannot write checksums in " + dir.string());
}

// Directory layout: config.json, model.safetensors, vocab.json, merges.txt,
// optional checksums.json.
inline ModelBundle load_model_dir(const std::filesystem::path& dir) {
  verify_checksums(dir);
  auto bundle = load_model(dir / "config.json", dir / "model.safetensors", dir);
  bundle.name = dir.filename().empty() ? dir.parent_path().filename().string() : dir.filename().string();
  return bundle;
}

inline void save_model_dir(const ModelBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "config.json", std::ios::trunc);
    out << nlohmann::json(bundle.config).dump(2) << '\n';
    require(static_cast<bool>(out), ErrorCode::io_error, "cannot write config in " + dir.string());
  }
  write_safetensors(dir / "model.safetensors", tensors_from_weights(bundle.config, bundle.weights),
                    {{"format", "pt"}});
  bundle.tokenizer.save(dir);
  write_checksums(dir);
}

}  // namespace circuit_align
