#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "circuit_align/error.hpp"
#include "circuit_align/hooks.hpp"
#include "circuit_align/model.hpp"
#include "circuit_align/rng.hpp"
#include "circuit_align/tokenizer.hpp"

namespace circuit_align {

// Residual layout shared by every planted model (d_model = 64).
namespace toy {

inline constexpr std::size_t kDModel = 64;
inline constexpr std::size_t kVocab = 64;
inline constexpr std::size_t kMaxPositions = 32;
inline constexpr std::size_t kNumeralSlots = 16;  // A: numeral identity
inline constexpr std::size_t kValueSlots = 12;    // C, D, E: values 0..11

inline constexpr std::size_t kA = 0;
inline constexpr std::size_t kC = 16;
inline constexpr std::size_t kD = 28;
inline constexpr std::size_t kE = 40;
inline constexpr std::size_t kPeriod = 52;
inline constexpr std::size_t kNumeral = 53;
inline constexpr std::size_t kConst = 54;
inline constexpr std::size_t kU = 55;
inline constexpr std::size_t kW = 56;
inline constexpr std::size_t kJunk = 57;
inline constexpr std::size_t kJunkWidth = 6;
inline constexpr std::size_t kSink = 63;

// With a huge epsilon and matching gain the layer norms act as the identity
// on zero-mean inputs, which the sink dimension guarantees.
inline constexpr double kLnEpsilon = 1e10;
inline constexpr float kLnGain = 1e5f;

inline constexpr int kPeriodToken = 18;
inline constexpr int kDoneToken = 16;
inline constexpr int kInToken = 17;
inline constexpr int kNounBase = 19;        // "Van".."Bus"
inline constexpr int kSpacedNounBase = 27;  // " Van".." Bus"
inline constexpr int kWordBase = 35;        // " one".." twelve" (value = id - 34)
inline constexpr int kNameBase = 59;

inline const std::vector<std::string>& vocab_strings() {
  static const std::vector<std::string> words = [] {
    std::vector<std::string> v;
    for (int i = 0; i < 16; ++i) v.push_back(" " + std::to_string(i));
    for (const char* w : {" done", " in", "."}) v.push_back(w);
    for (const char* w : {"Van", "Hat", "Car", "Dog", "Cup", "Pen", "Box", "Bus"}) v.push_back(w);
    for (const char* w : {" Van", " Hat", " Car", " Dog", " Cup", " Pen", " Box", " Bus"}) v.push_back(w);
    for (const char* w : {" one", " two", " three", " four", " five", " six", " seven", " eight",
                          " nine", " ten", " eleven", " twelve"}) {
      v.push_back(w);
    }
    for (const char* w : {"When", " and", " went", " to", " the", " store", ",", " gave", " a",
                          " bottle", " of", " milk"}) {
      v.push_back(w);
    }
    for (const char* w : {" Mary", " John", " Anna", " Tom", " Lisa"}) v.push_back(w);
    return v;
  }();
  return words;
}

// Numeric value carried by a token, or -1.
inline int token_value(int id) {
  if (id >= 0 && id < 16) return id;
  if (id >= kWordBase && id < kWordBase + 12) return id - kWordBase + 1;
  return -1;
}

}  // namespace toy

// Byte-level vocabulary of the planted models. Merges build every token
// left to right; spaced words are ranked before unspaced ones.
inline Tokenizer toy_tokenizer() {
  const auto& enc = detail::byte_encoder();
  std::map<std::string, int> vocab;
  std::vector<std::vector<std::string>> spelled;
  const auto& words = toy::vocab_strings();
  for (std::size_t id = 0; id < words.size(); ++id) {
    std::vector<std::string> symbols;
    std::string joined;
    for (unsigned char c : words[id]) {
      symbols.push_back(enc[c]);
      joined += enc[c];
    }
    vocab.emplace(joined, static_cast<int>(id));
    spelled.push_back(std::move(symbols));
  }
  std::vector<std::pair<std::string, std::string>> merges;
  std::set<std::pair<std::string, std::string>> seen;
  for (bool spaced : {true, false}) {
    for (std::size_t id = 0; id < spelled.size(); ++id) {
      if ((words[id][0] == ' ') != spaced) continue;
      const auto& symbols = spelled[id];
      std::string prefix = symbols[0];
      for (std::size_t i = 1; i < symbols.size(); ++i) {
        auto rule = std::make_pair(prefix, symbols[i]);
        if (seen.insert(rule).second) merges.push_back(rule);
        prefix += symbols[i];
      }
    }
  }
  return Tokenizer(std::move(vocab), std::move(merges));
}

enum class PlantedRole { prev_token, mover, backup, successor };

constexpr std::string_view role_name(PlantedRole r) {
  switch (r) {
    case PlantedRole::prev_token: return "prev_token";
    case PlantedRole::mover: return "mover";
    case PlantedRole::backup: return "backup";
    case PlantedRole::successor: return "successor";
  }
  return "?";
}

struct PlantedComponent {
  ComponentId id;
  PlantedRole role;
  // Movers and backups: OV gain. Successor: logit written per unit ramp.
  double gain = 1.0;
  // Movers only: attend to the latest period (reading copied values) when
  // true, to the latest numeral (reading identities) when false.
  bool via_period = true;
};

struct PlantedSpec {
  std::string name;
  std::size_t n_layers = 3;
  std::size_t n_heads = 4;
  std::size_t d_head = 16;
  std::size_t d_mlp = 32;
  std::vector<PlantedComponent> planted;
  // Seed and mixing of the position-only signatures carried by every
  // component. mix = 0 reproduces the reference signatures.
  std::uint64_t signature_seed = 7;
  double signature_mix = 0.0;
  double signature_spread = 0.35;
  // Sign of the shared signature base; -1 mirrors the reference layout.
  double signature_base_sign = 1.0;
};

namespace detail {

struct ToyBuilder {
  const PlantedSpec& spec;
  ModelConfig config;
  ModelWeights w;

  explicit ToyBuilder(const PlantedSpec& s) : spec(s) {
    config.n_layers = s.n_layers;
    config.n_heads = s.n_heads;
    config.d_head = s.d_head;
    config.d_model = toy::kDModel;
    config.d_mlp = s.d_mlp;
    config.vocab_size = toy::kVocab;
    config.max_positions = toy::kMaxPositions;
    config.layernorm_epsilon = toy::kLnEpsilon;
    const std::size_t d = toy::kDModel;
    w.wte.assign(toy::kVocab * d, 0.0f);
    w.wpe.assign(toy::kMaxPositions * d, 0.0f);
    w.lnf_w.assign(d, toy::kLnGain);
    w.lnf_b.assign(d, 0.0f);
    w.w_u.assign(toy::kVocab * d, 0.0f);
    w.layers.resize(s.n_layers);
    for (auto& L : w.layers) {
      L.ln1_w.assign(d, toy::kLnGain);
      L.ln1_b.assign(d, 0.0f);
      L.w_qkv.assign(d * 3 * d, 0.0f);
      L.b_qkv.assign(3 * d, 0.0f);
      L.w_o.assign(d * d, 0.0f);
      L.b_o.assign(d, 0.0f);
      L.ln2_w.assign(d, toy::kLnGain);
      L.ln2_b.assign(d, 0.0f);
      L.w_in.assign(d * s.d_mlp, 0.0f);
      L.b_in.assign(s.d_mlp, 0.0f);
      L.w_out.assign(s.d_mlp * d, 0.0f);
      L.b_out.assign(d, 0.0f);
    }
  }

  static void close_sink(float* row) {
    double total = 0.0;
    for (std::size_t i = 0; i < toy::kSink; ++i) total += row[i];
    row[toy::kSink] = static_cast<float>(-total);
  }

  // Signature written by a component's position-only channel.
  std::array<double, toy::kJunkWidth> signature(const ComponentId& c, std::size_t channel) const {
    auto draw = [&](std::uint64_t seed) {
      Rng rng(derive_seed(seed, c.layer, c.is_head() ? c.head : 99, channel));
      std::array<double, toy::kJunkWidth> v{};
      for (auto& x : v) x = rng.normal();
      return v;
    };
    const auto ref = draw(spec.signature_seed);
    const auto alt = draw(spec.signature_seed + 1000);
    std::array<double, toy::kJunkWidth> out{};
    for (std::size_t i = 0; i < toy::kJunkWidth; ++i) {
      const double base = spec.signature_base_sign * (channel == 0 ? 1.0 : -0.5);
      const double dev = (1.0 - spec.signature_mix) * ref[i] + spec.signature_mix * alt[i];
      out[i] = base + spec.signature_spread * dev;
    }
    return out;
  }

  float& q(std::size_t l, std::size_t h, std::size_t in, std::size_t col) {
    return w.layers[l].w_qkv[in * 3 * toy::kDModel + h * spec.d_head + col];
  }
  float& k(std::size_t l, std::size_t h, std::size_t in, std::size_t col) {
    return w.layers[l].w_qkv[in * 3 * toy::kDModel + toy::kDModel + h * spec.d_head + col];
  }
  float& v(std::size_t l, std::size_t h, std::size_t in, std::size_t col) {
    return w.layers[l].w_qkv[in * 3 * toy::kDModel + 2 * toy::kDModel + h * spec.d_head + col];
  }
  float* o_row(std::size_t l, std::size_t h, std::size_t col) {
    return w.layers[l].w_o.data() + (h * spec.d_head + col) * toy::kDModel;
  }

  void embeddings() {
    const std::size_t d = toy::kDModel;
    for (int id = 0; id < static_cast<int>(toy::kVocab); ++id) {
      float* row = w.wte.data() + static_cast<std::size_t>(id) * d;
      const int value = toy::token_value(id);
      if (value >= 0) {
        row[toy::kA + static_cast<std::size_t>(value)] = 1.0f;
        row[toy::kNumeral] = 1.0f;
      }
      if (id == toy::kPeriodToken) row[toy::kPeriod] = 1.0f;
      close_sink(row);
      if (value >= 0 && value < static_cast<int>(toy::kValueSlots)) {
        w.w_u[static_cast<std::size_t>(id) * d + toy::kE + static_cast<std::size_t>(value)] = 1.0f;
      }
    }
    const double pm = static_cast<double>(toy::kMaxPositions);
    for (std::size_t p = 0; p < toy::kMaxPositions; ++p) {
      float* row = w.wpe.data() + p * d;
      row[toy::kConst] = 1.0f;
      row[toy::kU] = static_cast<float>(p / pm);
      row[toy::kW] = static_cast<float>((p / pm) * (p / pm));
      close_sink(row);
    }
  }

  // Every head spends its last two value channels on a position-only
  // signature: attended const and attended u.
  void head_signature(const ComponentId& c, double scale) {
    const std::size_t dh = spec.d_head;
    v(c.layer, c.head, toy::kConst, dh - 2) = 1.0f;
    v(c.layer, c.head, toy::kU, dh - 1) = 1.0f;
    for (std::size_t ch = 0; ch < 2; ++ch) {
      const auto sig = signature(c, ch);
      float* row = o_row(c.layer, c.head, dh - 2 + ch);
      for (std::size_t i = 0; i < toy::kJunkWidth; ++i) {
        row[toy::kJunk + i] = static_cast<float>(scale * sig[i]);
      }
      close_sink(row);
    }
  }

  void prev_token_head(const ComponentId& c) {
    constexpr double beta = 12.0;
    const double pm = static_cast<double>(toy::kMaxPositions);
    const double s = beta * pm * pm * std::sqrt(static_cast<double>(spec.d_head));
    // q.k / sqrt(d_head) = -beta (j - (i-1))^2 + terms constant in j.
    q(c.layer, c.head, toy::kConst, 0) = static_cast<float>(s);
    q(c.layer, c.head, toy::kU, 1) = static_cast<float>(s);
    q(c.layer, c.head, toy::kConst, 1) = static_cast<float>(-s / pm);
    k(c.layer, c.head, toy::kW, 0) = -1.0f;
    k(c.layer, c.head, toy::kU, 1) = 2.0f;
    for (std::size_t val = 0; val < toy::kValueSlots; ++val) {
      v(c.layer, c.head, toy::kA + val, val) = 1.0f;
      float* row = o_row(c.layer, c.head, val);
      row[toy::kC + val] = 1.0f;
      close_sink(row);
    }
    head_signature(c, 0.25);
  }

  void mover_head(const PlantedComponent& pc) {
    const auto& c = pc.id;
    const double root = std::sqrt(static_cast<double>(spec.d_head));
    const double alpha = pc.via_period ? 24.0 : 26.0;
    constexpr double gamma = 80.0;
    q(c.layer, c.head, toy::kConst, 0) = static_cast<float>(root);
    k(c.layer, c.head, pc.via_period ? toy::kPeriod : toy::kNumeral, 0) = static_cast<float>(alpha);
    k(c.layer, c.head, toy::kU, 0) = static_cast<float>(gamma);
    const std::size_t source = pc.via_period ? toy::kC : toy::kA;
    for (std::size_t val = 0; val < toy::kValueSlots; ++val) {
      v(c.layer, c.head, source + val, val) = 1.0f;
      float* row = o_row(c.layer, c.head, val);
      row[toy::kD + val] = static_cast<float>(pc.gain);
      close_sink(row);
    }
    head_signature(c, 0.25);
  }

  void junk_head(const ComponentId& c) { head_signature(c, 1.0); }

  void successor_mlp(const PlantedComponent& pc) {
    require(spec.d_mlp >= 2 * (toy::kValueSlots - 1), ErrorCode::construction_error,
            "successor MLP needs d_mlp >= 22");
    constexpr double slope = 40.0, low = 0.25, high = 0.9;
    auto& L = w.layers[pc.id.layer];
    const std::size_t d = toy::kDModel;
    const double out_scale = pc.gain / (slope * (high - low));
    for (std::size_t val = 0; val + 1 < toy::kValueSlots; ++val) {
      for (std::size_t edge = 0; edge < 2; ++edge) {
        const std::size_t n = 2 * val + edge;
        L.w_in[(toy::kD + val) * spec.d_mlp + n] = static_cast<float>(slope);
        L.b_in[n] = static_cast<float>(-slope * (edge == 0 ? low : high));
        float* row = L.w_out.data() + n * d;
        row[toy::kE + val + 1] = static_cast<float>(edge == 0 ? out_scale : -out_scale);
        close_sink(row);
      }
    }
  }

  void junk_mlp(std::size_t layer) {
    auto& L = w.layers[layer];
    const std::size_t d = toy::kDModel;
    static constexpr double offsets[] = {-1.0, -0.4, 0.2, 0.8};
    const ComponentId c = ComponentId::mlp(layer);
    for (std::size_t n = 0; n < 4 && n < spec.d_mlp; ++n) {
      L.w_in[toy::kConst * spec.d_mlp + n] = static_cast<float>(offsets[n]);
      L.w_in[toy::kU * spec.d_mlp + n] = 3.0f;
      const auto sig = signature(c, n);
      float* row = L.w_out.data() + n * d;
      for (std::size_t i = 0; i < toy::kJunkWidth; ++i) row[toy::kJunk + i] = static_cast<float>(sig[i]);
      close_sink(row);
    }
  }

  ModelBundle build() {
    config.validate();
    embeddings();
    std::map<ComponentId, const PlantedComponent*> roles;
    for (const auto& pc : spec.planted) {
      require(pc.id.layer < spec.n_layers && (!pc.id.is_head() || pc.id.head < spec.n_heads),
              ErrorCode::construction_error, "planted component " + to_string(pc.id) + " out of range");
      const bool wants_mlp = pc.role == PlantedRole::successor;
      require(pc.id.is_mlp() == wants_mlp, ErrorCode::construction_error,
              std::string("role ") + std::string(role_name(pc.role)) + " cannot sit on " + to_string(pc.id));
      require(roles.emplace(pc.id, &pc).second, ErrorCode::construction_error,
              "component " + to_string(pc.id) + " planted twice");
      if (pc.role == PlantedRole::prev_token || pc.role == PlantedRole::mover ||
          pc.role == PlantedRole::backup) {
        require(spec.d_head >= toy::kValueSlots + 2, ErrorCode::construction_error,
                "planted heads need d_head >= 14");
      }
    }
    for (const auto& c : config.components()) {
      auto it = roles.find(c);
      if (it == roles.end()) {
        if (c.is_head()) junk_head(c);
        else junk_mlp(c.layer);
        continue;
      }
      switch (it->second->role) {
        case PlantedRole::prev_token: prev_token_head(c); break;
        case PlantedRole::mover:
        case PlantedRole::backup: mover_head(*it->second); break;
        case PlantedRole::successor: successor_mlp(*it->second); break;
      }
    }
    ModelBundle bundle;
    bundle.name = spec.name;
    bundle.config = config;
    bundle.weights = std::move(w);
    bundle.tokenizer = toy_tokenizer();
    bundle.weights_digest = weights_content_digest(bundle.config, bundle.weights);
    return bundle;
  }
};

}  // namespace detail

inline ModelBundle build_planted(const PlantedSpec& spec) { return detail::ToyBuilder(spec).build(); }

// Three layers, four heads: previous-token head, period mover, half-gain
// backup mover, successor MLP.
inline PlantedSpec teacher_spec() {
  PlantedSpec s;
  s.name = "teacher";
  s.planted = {{ComponentId::attn(0, 0), PlantedRole::prev_token},
               {ComponentId::attn(1, 0), PlantedRole::mover, 1.0},
               {ComponentId::attn(1, 1), PlantedRole::backup, 0.5},
               {ComponentId::mlp(1), PlantedRole::successor, 5.0}};
  return s;
}

// Teacher without the backup mover.
inline PlantedSpec student_high_spec() {
  PlantedSpec s = teacher_spec();
  s.name = "student_high";
  s.planted.erase(s.planted.begin() + 2);
  return s;
}

// Two layers, same circuit, no backup, perturbed signatures.
inline PlantedSpec student_mid_spec() {
  PlantedSpec s = student_high_spec();
  s.name = "student_mid";
  s.n_layers = 2;
  s.signature_mix = 0.6;
  return s;
}

// One layer, one wide head moving the latest numeral straight into the
// successor MLP.
inline PlantedSpec student_spec() {
  PlantedSpec s;
  s.name = "student";
  s.n_layers = 1;
  s.n_heads = 1;
  s.d_head = 64;
  s.planted = {{ComponentId::attn(0, 0), PlantedRole::mover, 1.0, false},
               {ComponentId::mlp(0), PlantedRole::successor, 5.0}};
  return s;
}

// Two layers with a direct mover and successor in layer 0, written through
// a mirrored signature base.
inline PlantedSpec student_low_spec() {
  PlantedSpec s;
  s.name = "student_low";
  s.n_layers = 2;
  s.signature_mix = 1.0;
  s.signature_base_sign = -1.0;
  s.planted = {{ComponentId::attn(0, 1), PlantedRole::mover, 1.0, false},
               {ComponentId::mlp(0), PlantedRole::successor, 5.0}};
  return s;
}

inline std::vector<PlantedSpec> builtin_toy_specs() {
  return {teacher_spec(), student_high_spec(), student_mid_spec(), student_low_spec(), student_spec()};
}

inline PlantedSpec toy_spec_by_name(const std::string& name) {
  for (auto& s : builtin_toy_specs()) {
    if (s.name == name) return s;
  }
  fail(ErrorCode::invalid_argument,
       "unknown toy model '" + name + "' (teacher, student_high, student_mid, student_low, student)");
}

// Planted circuit of a spec: nodes whose roles carry the task.
inline std::vector<ComponentId> planted_nodes(const PlantedSpec& spec) {
  std::vector<ComponentId> out;
  for (const auto& pc : spec.planted) {
    if (pc.role != PlantedRole::backup) out.push_back(pc.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

// "toy:<name>" builds a planted model; anything else is a model directory.
inline ModelBundle load_model_source(const std::string& source) {
  if (source.rfind("toy:", 0) == 0) return build_planted(toy_spec_by_name(source.substr(4)));
  return load_model_dir(source);
}

}  // namespace circuit_align
