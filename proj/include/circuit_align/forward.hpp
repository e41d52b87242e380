#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "circuit_align/error.hpp"
#include "circuit_align/hooks.hpp"
#include "circuit_align/model.hpp"
#include "circuit_align/tensor_math.hpp"

namespace circuit_align {

// Replaces the tensor recorded at `point`. With `positions` empty the value
// covers every row; otherwise value row i replaces row positions[i].
struct Override {
  HookPoint point;
  Matrix value;
  std::vector<std::size_t> positions;
};

enum class Slot { query, key, value, mlp_in, direct_out };

constexpr std::string_view slot_name(Slot s) {
  switch (s) {
    case Slot::query: return "query";
    case Slot::key: return "key";
    case Slot::value: return "value";
    case Slot::mlp_in: return "mlp_in";
    case Slot::direct_out: return "direct_out";
  }
  return "?";
}

inline Slot parse_slot(std::string_view name) {
  for (Slot s : {Slot::query, Slot::key, Slot::value, Slot::mlp_in, Slot::direct_out}) {
    if (slot_name(s) == name) return s;
  }
  fail(ErrorCode::parse_error, "unknown edge slot '" + std::string(name) + "'");
}

// A graph node for edge-level interventions: the embedding, a component, or
// the unembedding.
struct Endpoint {
  enum class Kind { input, component, output };
  Kind kind = Kind::component;
  ComponentId component;

  static Endpoint input() { return {Kind::input, {}}; }
  static Endpoint output() { return {Kind::output, {}}; }
  static Endpoint of(const ComponentId& c) { return {Kind::component, c}; }

  friend auto operator<=>(const Endpoint& a, const Endpoint& b) {
    if (auto c = a.kind <=> b.kind; c != 0) return c;
    if (a.kind != Kind::component) return std::strong_ordering::equal;
    return a.component <=> b.component;
  }
  friend bool operator==(const Endpoint& a, const Endpoint& b) { return (a <=> b) == 0; }
};

inline std::string to_string(const Endpoint& e) {
  switch (e.kind) {
    case Endpoint::Kind::input: return "input";
    case Endpoint::Kind::output: return "output";
    case Endpoint::Kind::component: return to_string(e.component);
  }
  return "?";
}

inline Endpoint parse_endpoint(std::string_view text) {
  if (text == "input") return Endpoint::input();
  if (text == "output") return Endpoint::output();
  return Endpoint::of(parse_component(text));
}

// Swaps the contribution of `src` inside the `slot` input of `dst` for
// `replacement`; every other reader of the residual stream sees src unchanged.
struct SlotOverride {
  Endpoint src;
  Endpoint dst;
  Slot slot = Slot::value;
  Matrix replacement;  // positions x d_model
};

using Perturbation = std::function<void(const ComponentId&, Matrix&)>;

struct ForwardOptions {
  HookSet hooks;
  std::vector<Override> overrides;
  std::vector<SlotOverride> slot_overrides;
  // Applied to head_out / mlp_out before any override.
  Perturbation perturb;
  bool all_logits = false;
};

struct ForwardResult {
  std::vector<double> logits;  // final position
  Matrix position_logits;      // positions x vocab, only with all_logits
  ActivationCache cache;
};

inline bool slot_fits(Slot slot, const Endpoint& dst) {
  if (dst.kind == Endpoint::Kind::output) return slot == Slot::direct_out;
  if (dst.kind == Endpoint::Kind::input) return false;
  if (dst.component.is_mlp()) return slot == Slot::mlp_in;
  return slot == Slot::query || slot == Slot::key || slot == Slot::value;
}

// src must write to the residual stream before dst reads it.
inline bool edge_topology_ok(const Endpoint& src, const Endpoint& dst) {
  if (src.kind == Endpoint::Kind::output || dst.kind == Endpoint::Kind::input) return false;
  if (src.kind == Endpoint::Kind::input || dst.kind == Endpoint::Kind::output) return true;
  const auto& s = src.component;
  const auto& d = dst.component;
  if (s.layer < d.layer) return true;
  return s.layer == d.layer && s.is_head() && d.is_mlp();
}

namespace detail {

inline std::size_t hook_width(const ModelConfig& c, Site site, std::size_t positions) {
  switch (site) {
    case Site::resid_pre:
    case Site::resid_mid:
    case Site::resid_post:
    case Site::head_out:
    case Site::mlp_out: return c.d_model;
    case Site::head_q:
    case Site::head_k:
    case Site::head_v: return c.d_head;
    case Site::head_pattern: return positions;
    case Site::mlp_pre:
    case Site::mlp_act: return c.d_mlp;
  }
  return 0;
}

inline void layer_norm_rows(const Matrix& x, const std::vector<float>& w, const std::vector<float>& b,
                            double eps, Matrix& out) {
  out = Matrix(x.rows, x.cols);
  const double n = static_cast<double>(x.cols);
  for (std::size_t r = 0; r < x.rows; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) mean += x(r, c);
    mean /= n;
    double var = 0.0;
    for (std::size_t c = 0; c < x.cols; ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < x.cols; ++c) out(r, c) = (x(r, c) - mean) * inv * w[c] + b[c];
  }
}

// out(P x n) += x(P x k) * W[:, col0 : col0+n] where W is row-major with
// leading dimension ld.
inline void matmul_add(const Matrix& x, const float* W, std::size_t ld, std::size_t col0,
                       std::size_t n, Matrix& out) {
  for (std::size_t r = 0; r < x.rows; ++r) {
    double* dst = out.data.data() + r * out.cols;
    const double* src = x.data.data() + r * x.cols;
    for (std::size_t k = 0; k < x.cols; ++k) {
      const double a = src[k];
      if (a == 0.0) continue;
      const float* wrow = W + k * ld + col0;
      for (std::size_t j = 0; j < n; ++j) dst[j] += a * static_cast<double>(wrow[j]);
    }
  }
}

inline Matrix project(const Matrix& x, const std::vector<float>& W, std::size_t ld, std::size_t col0,
                      std::size_t n, const std::vector<float>* bias) {
  Matrix out(x.rows, n);
  if (bias != nullptr) {
    for (std::size_t r = 0; r < x.rows; ++r) {
      for (std::size_t j = 0; j < n; ++j) out(r, j) = (*bias)[col0 + j];
    }
  }
  matmul_add(x, W.data(), ld, col0, n, out);
  return out;
}

inline double gelu(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

struct ForwardState {
  const ModelBundle& model;
  const ForwardOptions& options;
  std::map<HookPoint, const Override*> overrides;
  std::map<Endpoint, Matrix> outputs;  // recorded for slot-override sources
  std::set<Endpoint> sources;
  ActivationCache cache;

  ForwardState(const ModelBundle& m, const ForwardOptions& o) : model(m), options(o) {
    for (const auto& ov : o.overrides) overrides[ov.point] = &ov;
    for (const auto& so : o.slot_overrides) sources.insert(so.src);
  }

  // Records and overrides the tensor at `point`.
  void site(const HookPoint& point, Matrix& value) {
    if (auto it = overrides.find(point); it != overrides.end()) {
      const Override& ov = *it->second;
      if (ov.positions.empty()) {
        value = ov.value;
      } else {
        for (std::size_t i = 0; i < ov.positions.size(); ++i) {
          auto dst = value.row(ov.positions[i]);
          auto src = ov.value.row(i);
          std::copy(src.begin(), src.end(), dst.begin());
        }
      }
    }
    if (options.hooks.contains(point)) cache.put(point, value);
  }

  void component_output(const Endpoint& e, const Matrix& value) {
    if (sources.count(e)) outputs[e] = value;
  }

  // Residual as read through `slot` of `dst`, or nullopt when unchanged.
  std::optional<Matrix> slot_input(const Matrix& resid, const Endpoint& dst, Slot slot) const {
    std::optional<Matrix> adjusted;
    for (const auto& so : options.slot_overrides) {
      if (!(so.dst == dst) || so.slot != slot) continue;
      if (!adjusted) adjusted = resid;
      const Matrix& current = outputs.at(so.src);
      for (std::size_t i = 0; i < adjusted->data.size(); ++i) {
        adjusted->data[i] += so.replacement.data[i] - current.data[i];
      }
    }
    return adjusted;
  }
};

inline void validate_forward(const ModelBundle& model, const std::vector<int>& tokens,
                             const ForwardOptions& options) {
  const auto& c = model.config;
  require(!tokens.empty(), ErrorCode::invalid_argument, "forward needs at least one token");
  require(tokens.size() <= c.max_positions, ErrorCode::invalid_argument,
          "prompt length " + std::to_string(tokens.size()) + " exceeds max_positions " +
              std::to_string(c.max_positions));
  for (int t : tokens) {
    require(t >= 0 && static_cast<std::size_t>(t) < c.vocab_size, ErrorCode::invalid_argument,
            "token id " + std::to_string(t) + " out of vocabulary range");
  }
  const std::size_t P = tokens.size();
  for (const auto& ov : options.overrides) {
    const auto& h = ov.point;
    require(h.layer < c.n_layers && (!is_head_site(h.site) || h.head < c.n_heads),
            ErrorCode::invalid_argument, "override hook " + to_string(h) + " out of range");
    const std::size_t width = hook_width(c, h.site, P);
    const std::size_t rows = ov.positions.empty() ? P : ov.positions.size();
    require(ov.value.rows == rows && ov.value.cols == width, ErrorCode::invalid_argument,
            "override for " + to_string(h) + " has shape " + std::to_string(ov.value.rows) + "x" +
                std::to_string(ov.value.cols) + ", expected " + std::to_string(rows) + "x" +
                std::to_string(width));
    for (auto p : ov.positions) {
      require(p < P, ErrorCode::invalid_argument,
              "override position " + std::to_string(p) + " out of range for " + to_string(h));
    }
  }
  for (const auto& so : options.slot_overrides) {
    if (so.src.kind == Endpoint::Kind::component) c.check_component(so.src.component);
    if (so.dst.kind == Endpoint::Kind::component) c.check_component(so.dst.component);
    require(edge_topology_ok(so.src, so.dst), ErrorCode::invalid_argument,
            "edge " + to_string(so.src) + " -> " + to_string(so.dst) + " is not upstream-to-downstream");
    require(slot_fits(so.slot, so.dst), ErrorCode::invalid_argument,
            "slot " + std::string(slot_name(so.slot)) + " does not exist on " + to_string(so.dst));
    require(so.replacement.rows == P && so.replacement.cols == c.d_model, ErrorCode::invalid_argument,
            "edge replacement must be positions x d_model");
  }
}

}  // namespace detail

// Row `r` of the final layer norm followed by the unembedding.
inline std::vector<double> unembed_row(const ModelBundle& model, std::span<const double> resid) {
  const auto& c = model.config;
  const auto& w = model.weights;
  Matrix x(1, c.d_model, std::vector<double>(resid.begin(), resid.end()));
  Matrix normed;
  detail::layer_norm_rows(x, w.lnf_w, w.lnf_b, c.layernorm_epsilon, normed);
  std::vector<double> logits(c.vocab_size, 0.0);
  for (std::size_t v = 0; v < c.vocab_size; ++v) {
    const float* row = w.w_u.data() + v * c.d_model;
    double acc = 0.0;
    for (std::size_t j = 0; j < c.d_model; ++j) acc += normed(0, j) * static_cast<double>(row[j]);
    logits[v] = acc;
  }
  return logits;
}

inline ForwardResult forward(const ModelBundle& model, const std::vector<int>& tokens,
                             const ForwardOptions& options = {}) {
  detail::validate_forward(model, tokens, options);
  const auto& c = model.config;
  const auto& w = model.weights;
  const std::size_t P = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t dh = c.d_head;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  detail::ForwardState st(model, options);
  st.cache.tokens = tokens;

  Matrix resid(P, d);
  for (std::size_t p = 0; p < P; ++p) {
    const float* te = w.wte.data() + static_cast<std::size_t>(tokens[p]) * d;
    const float* pe = w.wpe.data() + p * d;
    for (std::size_t j = 0; j < d; ++j) resid(p, j) = static_cast<double>(te[j]) + pe[j];
  }
  st.component_output(Endpoint::input(), resid);

  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto& L = w.layers[l];
    st.site(hook(l, Site::resid_pre), resid);

    Matrix ln1;
    detail::layer_norm_rows(resid, L.ln1_w, L.ln1_b, c.layernorm_epsilon, ln1);
    Matrix attn_out(P, d);
    for (std::size_t r = 0; r < P; ++r) {
      for (std::size_t j = 0; j < d; ++j) attn_out(r, j) = L.b_o[j];
    }

    for (std::size_t h = 0; h < c.n_heads; ++h) {
      const Endpoint self = Endpoint::of(ComponentId::attn(l, h));
      auto input_for = [&](Slot slot) {
        auto adjusted = st.slot_input(resid, self, slot);
        if (!adjusted) return ln1;
        Matrix normed;
        detail::layer_norm_rows(*adjusted, L.ln1_w, L.ln1_b, c.layernorm_epsilon, normed);
        return normed;
      };
      Matrix q = detail::project(input_for(Slot::query), L.w_qkv, 3 * d, h * dh, dh, &L.b_qkv);
      Matrix k = detail::project(input_for(Slot::key), L.w_qkv, 3 * d, d + h * dh, dh, &L.b_qkv);
      Matrix v = detail::project(input_for(Slot::value), L.w_qkv, 3 * d, 2 * d + h * dh, dh, &L.b_qkv);
      st.site(hook(l, Site::head_q, h), q);
      st.site(hook(l, Site::head_k, h), k);
      st.site(hook(l, Site::head_v, h), v);

      Matrix pattern(P, P);
      for (std::size_t i = 0; i < P; ++i) {
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += q(i, e) * k(j, e);
          pattern(i, j) = s * scale;
          peak = std::max(peak, pattern(i, j));
        }
        double total = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          pattern(i, j) = std::exp(pattern(i, j) - peak);
          total += pattern(i, j);
        }
        for (std::size_t j = 0; j <= i; ++j) pattern(i, j) /= total;
      }
      st.site(hook(l, Site::head_pattern, h), pattern);

      Matrix z(P, dh);
      for (std::size_t i = 0; i < P; ++i) {
        for (std::size_t j = 0; j < P; ++j) {
          const double a = pattern(i, j);
          if (a == 0.0) continue;
          for (std::size_t e = 0; e < dh; ++e) z(i, e) += a * v(j, e);
        }
      }
      Matrix out(P, d);
      detail::matmul_add(z, L.w_o.data() + h * dh * d, d, 0, d, out);
      if (options.perturb) options.perturb(self.component, out);
      st.site(hook(l, Site::head_out, h), out);
      st.component_output(self, out);
      for (std::size_t i = 0; i < out.data.size(); ++i) attn_out.data[i] += out.data[i];
    }

    for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += attn_out.data[i];
    st.site(hook(l, Site::resid_mid), resid);

    const Endpoint mlp_self = Endpoint::of(ComponentId::mlp(l));
    Matrix ln2;
    auto mlp_input = st.slot_input(resid, mlp_self, Slot::mlp_in);
    detail::layer_norm_rows(mlp_input ? *mlp_input : resid, L.ln2_w, L.ln2_b, c.layernorm_epsilon, ln2);
    Matrix pre = detail::project(ln2, L.w_in, c.d_mlp, 0, c.d_mlp, &L.b_in);
    st.site(hook(l, Site::mlp_pre), pre);
    Matrix act(P, c.d_mlp);
    for (std::size_t i = 0; i < pre.data.size(); ++i) act.data[i] = detail::gelu(pre.data[i]);
    st.site(hook(l, Site::mlp_act), act);
    Matrix mlp_out = detail::project(act, L.w_out, d, 0, d, &L.b_out);
    if (options.perturb) options.perturb(mlp_self.component, mlp_out);
    st.site(hook(l, Site::mlp_out), mlp_out);
    st.component_output(mlp_self, mlp_out);

    for (std::size_t i = 0; i < resid.data.size(); ++i) resid.data[i] += mlp_out.data[i];
    st.site(hook(l, Site::resid_post), resid);
  }

  auto final_input = st.slot_input(resid, Endpoint::output(), Slot::direct_out);
  const Matrix& final_resid = final_input ? *final_input : resid;

  ForwardResult result;
  if (options.all_logits) {
    result.position_logits = Matrix(P, c.vocab_size);
    for (std::size_t p = 0; p < P; ++p) {
      auto row = unembed_row(model, final_resid.row(p));
      std::copy(row.begin(), row.end(), result.position_logits.row(p).begin());
    }
    auto last = result.position_logits.row(P - 1);
    result.logits.assign(last.begin(), last.end());
  } else {
    result.logits = unembed_row(model, final_resid.row(P - 1));
  }
  result.cache = std::move(st.cache);
  return result;
}

inline double logit_difference(std::span<const double> logits, int correct, int incorrect) {
  require(correct >= 0 && incorrect >= 0 && static_cast<std::size_t>(correct) < logits.size() &&
              static_cast<std::size_t>(incorrect) < logits.size(),
          ErrorCode::invalid_argument, "logit_difference token id out of range");
  return logits[correct] - logits[incorrect];
}

struct TokenLogit {
  int token = 0;
  double logit = 0.0;
};

// Descending by logit, ties broken by ascending token id.
inline std::vector<TokenLogit> top_k_logits(std::span<const double> logits, std::size_t k) {
  std::vector<TokenLogit> all(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) all[i] = {static_cast<int>(i), logits[i]};
  k = std::min(k, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<long>(k), all.end(),
                    [](const TokenLogit& a, const TokenLogit& b) {
                      return a.logit != b.logit ? a.logit > b.logit : a.token < b.token;
                    });
  all.resize(k);
  return all;
}

inline std::vector<TokenLogit> logit_lens(const ModelBundle& model, const ActivationCache& cache,
                                          std::size_t layer, std::size_t position, std::size_t k) {
  require(layer < model.config.n_layers, ErrorCode::invalid_argument,
          "logit_lens layer " + std::to_string(layer) + " out of range");
  require(position < cache.prompt_length(), ErrorCode::invalid_argument,
          "logit_lens position " + std::to_string(position) + " out of range");
  const Matrix& resid = cache.at(hook(layer, Site::resid_post));
  return top_k_logits(unembed_row(model, resid.row(position)), k);
}

inline Matrix qk_attention_matrix(const ActivationCache& cache, const ComponentId& component) {
  require(component.is_head(), ErrorCode::invalid_argument,
          "qk_attention_matrix needs an attention head, got " + to_string(component));
  return cache.at(hook(component.layer, Site::head_pattern, component.head));
}

}  // namespace circuit_align
