#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuit_align/error.hpp"
#include "circuit_align/forward.hpp"
#include "circuit_align/model.hpp"

namespace circuit_align {

// reference_logits.json: {"model", "dtype", "prompts": [{"text", "tokens"?, "final_logits"}]}
struct ReferencePrompt {
  std::string text;
  std::vector<int> tokens;
  std::vector<double> final_logits;
};

struct ReferenceLogits {
  std::string model;
  std::string dtype = "float32";
  std::vector<ReferencePrompt> prompts;
};

inline ReferenceLogits load_reference_logits(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::load_error, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
    ReferenceLogits r;
    r.model = j.value("model", "");
    r.dtype = j.value("dtype", "float32");
    for (const auto& p : j.at("prompts")) {
      ReferencePrompt rp;
      rp.text = p.at("text").get<std::string>();
      if (p.contains("tokens")) rp.tokens = p.at("tokens").get<std::vector<int>>();
      rp.final_logits = p.at("final_logits").get<std::vector<double>>();
      r.prompts.push_back(std::move(rp));
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::parse_error, path.string() + ": " + e.what());
  }
}

inline nlohmann::json reference_to_json(const ReferenceLogits& r) {
  nlohmann::json prompts = nlohmann::json::array();
  for (const auto& p : r.prompts) {
    prompts.push_back({{"text", p.text}, {"tokens", p.tokens}, {"final_logits", p.final_logits}});
  }
  return {{"model", r.model}, {"dtype", r.dtype}, {"prompts", prompts}};
}

inline std::vector<std::string> load_reference_prompts(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::load_error, "cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') out.push_back(line);
  }
  return out;
}

struct ReferenceCheck {
  std::vector<double> max_abs;  // per prompt
  double worst = 0.0;
  double tolerance = 1e-3;
  bool pass = false;
};

inline ReferenceCheck verify_reference(const ModelBundle& model, const ReferenceLogits& ref, double tolerance = 1e-3) {
  require(!ref.prompts.empty(), ErrorCode::invalid_argument, "reference file has no prompts");
  ReferenceCheck out;
  out.tolerance = tolerance;
  for (const auto& p : ref.prompts) {
    const auto tokens = p.tokens.empty() ? model.tokenizer.encode(p.text) : p.tokens;
    if (!p.tokens.empty()) {
      require(model.tokenizer.encode(p.text) == p.tokens, ErrorCode::invalid_argument,
              "tokenizer disagrees with reference tokens for '" + p.text + "'");
    }
    const auto logits = forward(model, tokens).logits;
    require(logits.size() == p.final_logits.size(), ErrorCode::dimension_mismatch,
            "reference has " + std::to_string(p.final_logits.size()) + " logits, model has " +
                std::to_string(logits.size()));
    double worst = 0.0;
    for (std::size_t v = 0; v < logits.size(); ++v) worst = std::max(worst, std::abs(logits[v] - p.final_logits[v]));
    out.max_abs.push_back(worst);
    out.worst = std::max(out.worst, worst);
  }
  out.pass = out.worst <= tolerance;
  return out;
}

// Reference file produced by this engine, used for the in-repo fixtures.
inline ReferenceLogits make_reference(const ModelBundle& model, const std::vector<std::string>& prompts) {
  ReferenceLogits r;
  r.model = model.name;
  for (const auto& text : prompts) {
    ReferencePrompt p;
    p.text = text;
    p.tokens = model.tokenizer.encode(text);
    p.final_logits = forward(model, p.tokens).logits;
    r.prompts.push_back(std::move(p));
  }
  return r;
}

}  // namespace circuit_align
