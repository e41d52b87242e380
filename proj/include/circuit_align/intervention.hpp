#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "circuit_align/error.hpp"
#include "circuit_align/forward.hpp"
#include "circuit_align/hooks.hpp"
#include "circuit_align/model.hpp"
#include "circuit_align/task_data.hpp"
#include "circuit_align/tensor_math.hpp"

namespace circuit_align {

// Per-example perturbation source (noise experiments); example index in,
// forward-pass perturbation out.
using PerturbationFactory = std::function<Perturbation(std::size_t)>;

struct RunOptions {
  std::size_t threads = 1;
  PerturbationFactory perturb;
};

// Calls fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to index-owned slots, which keeps output independent of scheduling.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct CorruptedMeans {
  // prompt length -> hook -> positionwise mean
  std::map<std::size_t, std::map<HookPoint, Matrix>> groups;
  std::string dataset_hash;
  std::size_t n_examples = 0;

  const Matrix& at(const HookPoint& h, std::size_t length) const {
    auto g = groups.find(length);
    if (g == groups.end()) {
      fail(ErrorCode::cache_miss, "no corrupted means for prompt length " + std::to_string(length));
    }
    auto it = g->second.find(h);
    if (it == g->second.end()) {
      fail(ErrorCode::cache_miss, "corrupted means do not cover hook " + to_string(h));
    }
    return it->second;
  }

  bool covers(const HookPoint& h, std::size_t length) const {
    auto g = groups.find(length);
    return g != groups.end() && g->second.count(h) > 0;
  }
};

// Output hooks of every component plus the embedding (L0.resid_pre).
inline HookSet component_output_hooks(const ModelConfig& c) {
  HookSet hooks;
  hooks.add(hook(0, Site::resid_pre));
  for (const auto& comp : c.components()) hooks.add(output_hook(comp));
  return hooks;
}

inline CorruptedMeans compute_corrupted_means(const ModelBundle& model, const TaskDataset& corrupted,
                                              const HookSet& hooks, const RunOptions& run = {},
                                              bool group_by_length = true) {
  require(!corrupted.examples.empty(), ErrorCode::invalid_argument,
          "corrupted means need at least one example");
  if (!group_by_length) {
    for (const auto& ex : corrupted.examples) {
      require(ex.prompt_tokens.size() == corrupted.examples[0].prompt_tokens.size(),
              ErrorCode::invalid_argument, "corrupted prompts have mixed lengths and grouping is off");
    }
  }
  std::vector<ActivationCache> caches(corrupted.size());
  parallel_for(corrupted.size(), run.threads, [&](std::size_t i) {
    ForwardOptions opts;
    opts.hooks = hooks;
    if (run.perturb) opts.perturb = run.perturb(i);
    caches[i] = forward(model, corrupted.examples[i].prompt_tokens, opts).cache;
  });
  CorruptedMeans means;
  means.dataset_hash = corrupted.content_hash;
  means.n_examples = corrupted.size();
  std::map<std::size_t, std::size_t> counts;
  for (const auto& cache : caches) {
    auto& group = means.groups[cache.prompt_length()];
    ++counts[cache.prompt_length()];
    for (const auto& [h, value] : cache.entries()) {
      auto [it, fresh] = group.try_emplace(h, value);
      if (!fresh) {
        for (std::size_t k = 0; k < value.data.size(); ++k) it->second.data[k] += value.data[k];
      }
    }
  }
  for (auto& [length, group] : means.groups) {
    const double inv = static_cast<double>(counts[length]);
    for (auto& [h, m] : group) {
      for (double& x : m.data) x /= inv;
    }
  }
  return means;
}

struct ScoreResult {
  std::vector<double> per_example;
  double mean = 0.0;
};

inline ScoreResult summarize_scores(std::vector<double> values) {
  ScoreResult r;
  r.per_example = std::move(values);
  r.mean = mean_of(r.per_example);
  return r;
}

// Runs every example with options produced by `configure` and returns the
// logit differences.
inline ScoreResult score_dataset(const ModelBundle& model, const TaskDataset& dataset,
                                 const std::function<void(std::size_t, const TaskExample&, ForwardOptions&)>& configure,
                                 const RunOptions& run = {}) {
  require(!dataset.examples.empty(), ErrorCode::invalid_argument, "dataset is empty");
  std::vector<double> diffs(dataset.size());
  parallel_for(dataset.size(), run.threads, [&](std::size_t i) {
    const auto& ex = dataset.examples[i];
    ForwardOptions opts;
    if (run.perturb) opts.perturb = run.perturb(i);
    if (configure) configure(i, ex, opts);
    const auto result = forward(model, ex.prompt_tokens, opts);
    diffs[i] = logit_difference(result.logits, ex.correct_token, ex.incorrect_token);
  });
  return summarize_scores(std::move(diffs));
}

inline ScoreResult baseline_scores(const ModelBundle& model, const TaskDataset& dataset,
                                   const RunOptions& run = {}) {
  return score_dataset(model, dataset, nullptr, run);
}

inline Override mean_override(const ComponentId& c, const CorruptedMeans& means, std::size_t length) {
  const HookPoint h = output_hook(c);
  return Override{h, means.at(h, length), {}};
}

// Mean-ablates every component in `ablated` at all positions.
inline ScoreResult ablate_components(const ModelBundle& model, const TaskDataset& dataset,
                                     const std::vector<ComponentId>& ablated, const CorruptedMeans& means,
                                     const RunOptions& run = {}) {
  for (const auto& c : ablated) model.config.check_component(c);
  return score_dataset(
      model, dataset,
      [&](std::size_t, const TaskExample& ex, ForwardOptions& opts) {
        for (const auto& c : ablated) opts.overrides.push_back(mean_override(c, means, ex.prompt_tokens.size()));
      },
      run);
}

inline ScoreResult ablate_and_score(const ModelBundle& model, const TaskDataset& dataset,
                                    const ComponentId& component, const CorruptedMeans& means,
                                    const RunOptions& run = {}) {
  return ablate_components(model, dataset, {component}, means, run);
}

inline double perf_change_pct(double ablated_mean, double base_mean) {
  if (base_mean == 0.0) {
    fail(ErrorCode::undefined_baseline, "percentage change is undefined for a zero baseline");
  }
  return 100.0 * (ablated_mean - base_mean) / std::abs(base_mean);
}

enum class PatchPath { full, qk_only, ov_only };
enum class PatchDirection { ablate_with_means, patch_clean_into_corrupted };

struct PatchSpec {
  ComponentId component;
  std::vector<std::size_t> positions;  // empty = every position
  PatchPath path = PatchPath::full;
  PatchDirection direction = PatchDirection::patch_clean_into_corrupted;
};

struct PatchRecord {
  double corrupted_diff = 0.0;
  double patched_diff = 0.0;
  double recovery = 0.0;
};

inline std::vector<HookPoint> patch_sites(const PatchSpec& spec) {
  const auto& c = spec.component;
  if (spec.path != PatchPath::full) {
    require(c.is_head(), ErrorCode::invalid_argument,
            "path-restricted patching needs an attention head, got " + to_string(c));
  }
  switch (spec.path) {
    case PatchPath::full: return {output_hook(c)};
    case PatchPath::qk_only: return {hook(c.layer, Site::head_q, c.head), hook(c.layer, Site::head_k, c.head)};
    case PatchPath::ov_only: return {hook(c.layer, Site::head_v, c.head)};
  }
  return {};
}

namespace detail {

inline Override rows_override(const HookPoint& h, const Matrix& source, const std::vector<std::size_t>& positions) {
  if (positions.empty()) return Override{h, source, {}};
  Matrix rows(positions.size(), source.cols);
  for (std::size_t i = 0; i < positions.size(); ++i) {
    require(positions[i] < source.rows, ErrorCode::invalid_argument,
            "patch position " + std::to_string(positions[i]) + " out of range");
    auto src = source.row(positions[i]);
    std::copy(src.begin(), src.end(), rows.row(i).begin());
  }
  return Override{h, std::move(rows), positions};
}

}  // namespace detail

// Patches the recorded hooks of `source_tokens` into a run on `target`
// tokens at the given positions.
inline PatchRecord activation_patch_hooks(const ModelBundle& model, const TaskExample& source,
                                          const TaskExample& target, const std::vector<HookPoint>& hooks,
                                          const std::vector<std::size_t>& positions,
                                          const Perturbation& perturb = {}) {
  require(source.prompt_tokens.size() == target.prompt_tokens.size(), ErrorCode::invalid_argument,
          "clean and corrupted prompts must have equal length");
  ForwardOptions record;
  for (const auto& h : hooks) record.hooks.add(h);
  record.perturb = perturb;
  const auto clean = forward(model, source.prompt_tokens, record);
  ForwardOptions base_opts;
  base_opts.perturb = perturb;
  const auto base = forward(model, target.prompt_tokens, base_opts);
  ForwardOptions patched_opts;
  patched_opts.perturb = perturb;
  for (const auto& h : hooks) {
    patched_opts.overrides.push_back(detail::rows_override(h, clean.cache.at(h), positions));
  }
  const auto patched = forward(model, target.prompt_tokens, patched_opts);
  PatchRecord r;
  r.corrupted_diff = logit_difference(base.logits, target.correct_token, target.incorrect_token);
  r.patched_diff = logit_difference(patched.logits, target.correct_token, target.incorrect_token);
  r.recovery = r.patched_diff - r.corrupted_diff;
  return r;
}

inline PatchRecord activation_patch(const ModelBundle& model, const TaskExample& clean,
                                    const TaskExample& corrupted, const PatchSpec& spec,
                                    const CorruptedMeans* means = nullptr) {
  model.config.check_component(spec.component);
  const auto sites = patch_sites(spec);
  if (spec.direction == PatchDirection::patch_clean_into_corrupted) {
    return activation_patch_hooks(model, clean, corrupted, sites, spec.positions);
  }
  require(means != nullptr, ErrorCode::invalid_argument, "mean ablation patching needs corrupted means");
  const std::size_t length = clean.prompt_tokens.size();
  const auto base = forward(model, clean.prompt_tokens);
  ForwardOptions opts;
  for (const auto& h : sites) opts.overrides.push_back(detail::rows_override(h, means->at(h, length), spec.positions));
  const auto patched = forward(model, clean.prompt_tokens, opts);
  PatchRecord r;
  r.corrupted_diff = logit_difference(base.logits, clean.correct_token, clean.incorrect_token);
  r.patched_diff = logit_difference(patched.logits, clean.correct_token, clean.incorrect_token);
  r.recovery = r.patched_diff - r.corrupted_diff;
  return r;
}

struct LayerRecovery {
  std::vector<double> normalized;
  bool inert = false;
};

// Divides each recovery by the layer mean. A zero mean marks the layer inert.
inline LayerRecovery layer_normalized_recovery(const std::vector<double>& recoveries) {
  require(!recoveries.empty(), ErrorCode::invalid_argument, "layer has no components");
  LayerRecovery out;
  const double mean = mean_of(recoveries);
  if (mean == 0.0) {
    out.inert = true;
    out.normalized.assign(recoveries.size(), 0.0);
    return out;
  }
  for (double r : recoveries) out.normalized.push_back(r / mean);
  return out;
}

struct EdgeId {
  Endpoint src;
  Endpoint dst;
  Slot slot = Slot::value;

  friend auto operator<=>(const EdgeId& a, const EdgeId& b) {
    if (auto c = a.src <=> b.src; c != 0) return c;
    if (auto c = a.dst <=> b.dst; c != 0) return c;
    return a.slot <=> b.slot;
  }
  friend bool operator==(const EdgeId& a, const EdgeId& b) { return (a <=> b) == 0; }
};

inline std::string to_string(const EdgeId& e) {
  return to_string(e.src) + "->" + to_string(e.dst) + "." + std::string(slot_name(e.slot));
}

inline EdgeId parse_edge(std::string_view text) {
  const auto arrow = text.find("->");
  const auto dot = text.rfind('.');
  require(arrow != std::string_view::npos && dot != std::string_view::npos && dot > arrow,
          ErrorCode::parse_error, "bad edge '" + std::string(text) + "' (src->dst.slot)");
  return {parse_endpoint(text.substr(0, arrow)), parse_endpoint(text.substr(arrow + 2, dot - arrow - 2)),
          parse_slot(text.substr(dot + 1))};
}

inline void validate_edge(const ModelConfig& c, const EdgeId& e) {
  if (e.src.kind == Endpoint::Kind::component) c.check_component(e.src.component);
  if (e.dst.kind == Endpoint::Kind::component) c.check_component(e.dst.component);
  require(edge_topology_ok(e.src, e.dst) && slot_fits(e.slot, e.dst), ErrorCode::invalid_argument,
          "invalid edge " + to_string(e));
}

inline HookPoint endpoint_output_hook(const Endpoint& e) {
  require(e.kind != Endpoint::Kind::output, ErrorCode::invalid_argument, "output has no activation");
  return e.kind == Endpoint::Kind::input ? hook(0, Site::resid_pre) : output_hook(e.component);
}

// Replaces each edge's source contribution by its corrupted mean inside the
// destination slot only; components in `held_ablated` are mean-ablated
// outright.
inline ScoreResult path_patch_edges(const ModelBundle& model, const TaskDataset& dataset,
                                    const std::vector<EdgeId>& edges, const CorruptedMeans& means,
                                    const RunOptions& run = {},
                                    const std::vector<ComponentId>& held_ablated = {}) {
  for (const auto& e : edges) validate_edge(model.config, e);
  return score_dataset(
      model, dataset,
      [&](std::size_t, const TaskExample& ex, ForwardOptions& opts) {
        const std::size_t length = ex.prompt_tokens.size();
        for (const auto& c : held_ablated) opts.overrides.push_back(mean_override(c, means, length));
        for (const auto& e : edges) {
          opts.slot_overrides.push_back({e.src, e.dst, e.slot, means.at(endpoint_output_hook(e.src), length)});
        }
      },
      run);
}

inline ScoreResult path_patch_edge(const ModelBundle& model, const TaskDataset& dataset, const EdgeId& edge,
                                   const CorruptedMeans& means, const RunOptions& run = {},
                                   const std::vector<ComponentId>& held_ablated = {}) {
  return path_patch_edges(model, dataset, {edge}, means, run, held_ablated);
}

// Every edge leaving `src` in the dense graph of the model.
inline std::vector<EdgeId> outgoing_edges(const ModelConfig& c, const Endpoint& src) {
  std::vector<EdgeId> out;
  for (const auto& comp : c.components()) {
    const Endpoint dst = Endpoint::of(comp);
    if (!edge_topology_ok(src, dst)) continue;
    if (comp.is_mlp()) {
      out.push_back({src, dst, Slot::mlp_in});
    } else {
      for (Slot s : {Slot::query, Slot::key, Slot::value}) out.push_back({src, dst, s});
    }
  }
  out.push_back({src, Endpoint::output(), Slot::direct_out});
  return out;
}

}  // namespace circuit_align
