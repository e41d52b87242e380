#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "circuit_align/error.hpp"
#include "circuit_align/tensor_math.hpp"

namespace circuit_align {

enum class ComponentKind { attention_head, mlp };

struct ComponentId {
  ComponentKind kind = ComponentKind::attention_head;
  std::size_t layer = 0;
  // Only meaningful for attention heads.
  std::size_t head = 0;

  static ComponentId attn(std::size_t layer, std::size_t head) {
    return {ComponentKind::attention_head, layer, head};
  }
  static ComponentId mlp(std::size_t layer) { return {ComponentKind::mlp, layer, 0}; }

  bool is_head() const { return kind == ComponentKind::attention_head; }
  bool is_mlp() const { return kind == ComponentKind::mlp; }

  // Canonical order: by layer, heads ascending, then the layer's MLP.
  friend auto operator<=>(const ComponentId& a, const ComponentId& b) {
    if (auto c = a.layer <=> b.layer; c != 0) return c;
    if (auto c = (a.kind == ComponentKind::mlp) <=> (b.kind == ComponentKind::mlp); c != 0) return c;
    return a.head <=> b.head;
  }
  friend bool operator==(const ComponentId& a, const ComponentId& b) {
    return (a <=> b) == 0;
  }
};

inline std::string to_string(const ComponentId& c) {
  return "L" + std::to_string(c.layer) + (c.is_head() ? ".H" + std::to_string(c.head) : ".MLP");
}

inline std::size_t parse_index(std::string_view text, std::string_view what) {
  require(!text.empty(), ErrorCode::parse_error, "empty " + std::string(what) + " index");
  std::size_t value = 0;
  for (char ch : text) {
    require(ch >= '0' && ch <= '9', ErrorCode::parse_error,
            "bad " + std::string(what) + " index '" + std::string(text) + "'");
    value = value * 10 + static_cast<std::size_t>(ch - '0');
  }
  return value;
}

// Accepts "L3.H2" and "L3.MLP".
inline ComponentId parse_component(std::string_view text) {
  const auto dot = text.find('.');
  require(text.size() > 2 && text[0] == 'L' && dot != std::string_view::npos,
          ErrorCode::parse_error, "bad component name '" + std::string(text) + "'");
  const std::size_t layer = parse_index(text.substr(1, dot - 1), "layer");
  const std::string_view rest = text.substr(dot + 1);
  if (rest == "MLP") return ComponentId::mlp(layer);
  require(rest.size() > 1 && rest[0] == 'H', ErrorCode::parse_error,
          "bad component name '" + std::string(text) + "'");
  return ComponentId::attn(layer, parse_index(rest.substr(1), "head"));
}

enum class Site {
  resid_pre,
  resid_mid,
  resid_post,
  head_q,
  head_k,
  head_v,
  head_pattern,
  head_out,
  mlp_pre,
  mlp_act,
  mlp_out,
};

inline constexpr Site kAllSites[] = {Site::resid_pre,  Site::resid_mid,    Site::resid_post,
                                     Site::head_q,     Site::head_k,       Site::head_v,
                                     Site::head_pattern, Site::head_out,   Site::mlp_pre,
                                     Site::mlp_act,    Site::mlp_out};

constexpr std::string_view site_name(Site s) {
  switch (s) {
    case Site::resid_pre: return "resid_pre";
    case Site::resid_mid: return "resid_mid";
    case Site::resid_post: return "resid_post";
    case Site::head_q: return "head_q";
    case Site::head_k: return "head_k";
    case Site::head_v: return "head_v";
    case Site::head_pattern: return "head_pattern";
    case Site::head_out: return "head_out";
    case Site::mlp_pre: return "mlp_pre";
    case Site::mlp_act: return "mlp_act";
    case Site::mlp_out: return "mlp_out";
  }
  return "?";
}

constexpr bool is_head_site(Site s) {
  return s == Site::head_q || s == Site::head_k || s == Site::head_v || s == Site::head_pattern ||
         s == Site::head_out;
}

inline Site parse_site(std::string_view name) {
  for (Site s : kAllSites) {
    if (site_name(s) == name) return s;
  }
  fail(ErrorCode::parse_error, "unknown hook site '" + std::string(name) + "'");
}

struct HookPoint {
  std::size_t layer = 0;
  Site site = Site::resid_pre;
  std::size_t head = 0;

  friend auto operator<=>(const HookPoint&, const HookPoint&) = default;
};

inline HookPoint hook(std::size_t layer, Site site, std::size_t head = 0) {
  return {layer, site, is_head_site(site) ? head : 0};
}

// Output site of a component: head_out for heads, mlp_out for MLPs.
inline HookPoint output_hook(const ComponentId& c) {
  return c.is_head() ? hook(c.layer, Site::head_out, c.head) : hook(c.layer, Site::mlp_out);
}

// Grammar: L{layer}.{site}[.H{head}]
inline std::string to_string(const HookPoint& h) {
  std::string out = "L" + std::to_string(h.layer) + "." + std::string(site_name(h.site));
  if (is_head_site(h.site)) out += ".H" + std::to_string(h.head);
  return out;
}

inline HookPoint parse_hook(std::string_view text) {
  const auto first = text.find('.');
  require(text.size() > 3 && text[0] == 'L' && first != std::string_view::npos,
          ErrorCode::parse_error, "bad hook name '" + std::string(text) + "'");
  HookPoint h;
  h.layer = parse_index(text.substr(1, first - 1), "layer");
  std::string_view rest = text.substr(first + 1);
  const auto second = rest.find('.');
  h.site = parse_site(rest.substr(0, second));
  if (is_head_site(h.site)) {
    require(second != std::string_view::npos && rest.size() > second + 2 &&
                rest[second + 1] == 'H',
            ErrorCode::parse_error, "hook '" + std::string(text) + "' needs a .H{head} suffix");
    h.head = parse_index(rest.substr(second + 2), "head");
  } else {
    require(second == std::string_view::npos, ErrorCode::parse_error,
            "hook '" + std::string(text) + "' takes no head suffix");
  }
  return h;
}

struct HookSet {
  bool all = false;
  std::set<HookPoint> points;

  static HookSet everything() { return {true, {}}; }
  HookSet& add(const HookPoint& h) {
    points.insert(h);
    return *this;
  }
  bool empty() const { return !all && points.empty(); }
  bool contains(const HookPoint& h) const { return all || points.count(h) > 0; }
};

class ActivationCache {
 public:
  std::vector<int> tokens;

  std::size_t prompt_length() const { return tokens.size(); }

  bool has(const HookPoint& h) const { return tensors_.count(h) > 0; }

  const Matrix& at(const HookPoint& h) const {
    auto it = tensors_.find(h);
    if (it == tensors_.end()) {
      fail(ErrorCode::cache_miss, "hook " + to_string(h) + " was not recorded");
    }
    return it->second;
  }

  void put(const HookPoint& h, Matrix value) { tensors_[h] = std::move(value); }

  const std::map<HookPoint, Matrix>& entries() const { return tensors_; }

 private:
  std::map<HookPoint, Matrix> tensors_;
};

}  // namespace circuit_align
