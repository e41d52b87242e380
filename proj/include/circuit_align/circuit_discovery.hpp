#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "circuit_align/error.hpp"
#include "circuit_align/intervention.hpp"

namespace circuit_align {

struct DiscoveryOptions {
  // Score each component alone against the clean baseline instead of
  // pruning cumulatively.
  bool independent_ablation = false;
  // Search every upstream/downstream pair instead of node-incident edges.
  bool dense_edges = false;
  RunOptions run;
};

struct NodeDiscovery {
  std::vector<ComponentId> nodes;
  // Drop (in logit difference) measured at each component's final test.
  std::map<ComponentId, double> drops;
  double base_mean = 0.0;
};

struct EdgeDiscovery {
  std::vector<EdgeId> edges;
  std::map<EdgeId, double> edge_means;  // mean logit difference with the edge ablated
};

struct CircuitGraph {
  std::vector<ComponentId> nodes;
  std::vector<EdgeId> edges;
  double threshold = 0.0;
  double base_mean = 0.0;
  std::string dataset_hash;
};

struct CircuitEvaluation {
  double completeness_drop_pct = 0.0;
  double faithfulness_diff = 0.0;
  double faithfulness_pct = 0.0;
  double circuit_only_diff = 0.0;
  std::map<ComponentId, bool> minimality_pass;
  std::map<ComponentId, double> minimality_drop;
};

// Backward then forward over layers; inside a layer the MLP first, then
// heads ascending.
inline std::vector<ComponentId> pruning_order(const ModelConfig& c, bool backward) {
  std::vector<ComponentId> order;
  for (std::size_t i = 0; i < c.n_layers; ++i) {
    const std::size_t l = backward ? c.n_layers - 1 - i : i;
    order.push_back(ComponentId::mlp(l));
    for (std::size_t h = 0; h < c.n_heads; ++h) order.push_back(ComponentId::attn(l, h));
  }
  return order;
}

inline void check_threshold(double t) {
  require(t > 0.0 && t < 1.0, ErrorCode::invalid_argument, "threshold must lie in (0,1)");
}

inline double require_solved(const ModelBundle& model, const TaskDataset& dataset, const RunOptions& run) {
  const double base = baseline_scores(model, dataset, run).mean;
  if (base <= 0.0) {
    fail(ErrorCode::task_unsolved,
         "baseline logit difference " + std::to_string(base) + " <= 0; circuit undefined");
  }
  return base;
}

// Single-component drops against the clean baseline.
inline std::map<ComponentId, double> independent_drops(const ModelBundle& model, const TaskDataset& dataset,
                                                       const CorruptedMeans& means, double base,
                                                       const RunOptions& run = {}) {
  std::map<ComponentId, double> drops;
  for (const auto& c : model.config.components()) {
    drops[c] = base - ablate_and_score(model, dataset, c, means, run).mean;
  }
  return drops;
}

inline NodeDiscovery discover_nodes(const ModelBundle& model, const TaskDataset& dataset,
                                    const CorruptedMeans& means, double threshold,
                                    const DiscoveryOptions& options = {}) {
  check_threshold(threshold);
  NodeDiscovery out;
  out.base_mean = require_solved(model, dataset, options.run);
  const double cut = threshold * std::abs(out.base_mean);

  if (options.independent_ablation) {
    out.drops = independent_drops(model, dataset, means, out.base_mean, options.run);
    for (const auto& [c, drop] : out.drops) {
      if (drop >= cut) out.nodes.push_back(c);
    }
    return out;
  }

  std::set<ComponentId> pruned;
  double current = out.base_mean;
  auto test = [&](const ComponentId& c) {
    std::vector<ComponentId> ablated(pruned.begin(), pruned.end());
    ablated.push_back(c);
    const double with_c = ablate_components(model, dataset, ablated, means, options.run).mean;
    out.drops[c] = current - with_c;
    if (current - with_c < cut) {
      pruned.insert(c);
      current = with_c;
    }
  };
  for (const auto& c : pruning_order(model.config, true)) test(c);
  for (const auto& c : pruning_order(model.config, false)) {
    if (!pruned.count(c)) test(c);
  }
  for (const auto& c : model.config.components()) {
    if (!pruned.count(c)) out.nodes.push_back(c);
  }
  return out;
}

inline std::vector<EdgeId> candidate_edges(const ModelConfig& c, const std::vector<ComponentId>& nodes, bool dense) {
  std::vector<Endpoint> sources = {Endpoint::input()};
  std::vector<Endpoint> sinks;
  const auto pool = dense ? c.components() : nodes;
  for (const auto& n : pool) {
    sources.push_back(Endpoint::of(n));
    sinks.push_back(Endpoint::of(n));
  }
  sinks.push_back(Endpoint::output());
  std::vector<EdgeId> out;
  for (const auto& src : sources) {
    for (const auto& dst : sinks) {
      if (!edge_topology_ok(src, dst)) continue;
      for (Slot s : {Slot::query, Slot::key, Slot::value, Slot::mlp_in, Slot::direct_out}) {
        if (slot_fits(s, dst)) out.push_back({src, dst, s});
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline EdgeDiscovery score_edges(const ModelBundle& model, const TaskDataset& dataset,
                                 const std::vector<ComponentId>& nodes, const CorruptedMeans& means,
                                 const DiscoveryOptions& options = {}) {
  EdgeDiscovery out;
  for (const auto& e : candidate_edges(model.config, nodes, options.dense_edges)) {
    out.edge_means[e] = path_patch_edge(model, dataset, e, means, options.run).mean;
  }
  return out;
}

inline std::vector<EdgeId> threshold_edges(const EdgeDiscovery& scored, double threshold, double base) {
  std::vector<EdgeId> kept;
  for (const auto& [e, mean] : scored.edge_means) {
    if (mean < (1.0 - threshold) * base) kept.push_back(e);
  }
  return kept;
}

inline EdgeDiscovery discover_edges(const ModelBundle& model, const TaskDataset& dataset,
                                    const std::vector<ComponentId>& nodes, double threshold,
                                    const CorruptedMeans& means, const DiscoveryOptions& options = {}) {
  check_threshold(threshold);
  const double base = require_solved(model, dataset, options.run);
  EdgeDiscovery out = score_edges(model, dataset, nodes, means, options);
  out.edges = threshold_edges(out, threshold, base);
  return out;
}

inline std::vector<ComponentId> complement(const ModelConfig& c, const std::vector<ComponentId>& nodes) {
  std::set<ComponentId> keep(nodes.begin(), nodes.end());
  std::vector<ComponentId> out;
  for (const auto& comp : c.components()) {
    if (!keep.count(comp)) out.push_back(comp);
  }
  return out;
}

inline CircuitEvaluation evaluate_circuit(const ModelBundle& model, const TaskDataset& dataset,
                                          const std::vector<ComponentId>& circuit, const CorruptedMeans& means,
                                          double threshold, const RunOptions& run = {}) {
  require(!circuit.empty(), ErrorCode::invalid_argument, "circuit is empty");
  const double base = baseline_scores(model, dataset, run).mean;
  if (base == 0.0) fail(ErrorCode::undefined_baseline, "baseline logit difference is zero");
  const auto outside = complement(model.config, circuit);
  CircuitEvaluation ev;
  ev.circuit_only_diff =
      outside.empty() ? base : ablate_components(model, dataset, outside, means, run).mean;
  ev.completeness_drop_pct = 100.0 * (base - ev.circuit_only_diff) / std::abs(base);
  ev.faithfulness_diff = ablate_components(model, dataset, circuit, means, run).mean;
  ev.faithfulness_pct = 100.0 * ev.faithfulness_diff / std::abs(base);
  for (const auto& n : circuit) {
    auto ablated = outside;
    ablated.push_back(n);
    const double drop = ev.circuit_only_diff - ablate_components(model, dataset, ablated, means, run).mean;
    ev.minimality_drop[n] = drop;
    ev.minimality_pass[n] = drop >= threshold * std::abs(base);
  }
  return ev;
}

struct SweepRow {
  double threshold = 0.0;
  std::size_t n_nodes = 0;
  std::size_t n_heads = 0;
  std::size_t n_mlps = 0;
  std::size_t n_edges = 0;
  double completeness_pct = 0.0;  // % of baseline retained by the circuit alone
  double faithfulness_pct = 0.0;  // % of baseline left with the circuit ablated
};

inline std::vector<SweepRow> threshold_sweep(const ModelBundle& model, const TaskDataset& dataset,
                                             const CorruptedMeans& means, const std::vector<double>& thresholds,
                                             const DiscoveryOptions& options = {}, bool with_edges = false) {
  require(!thresholds.empty() && std::is_sorted(thresholds.begin(), thresholds.end()),
          ErrorCode::invalid_argument, "thresholds must be non-empty and ascending");
  std::vector<SweepRow> rows;
  for (double t : thresholds) {
    const auto nodes = discover_nodes(model, dataset, means, t, options);
    SweepRow row;
    row.threshold = t;
    row.n_nodes = nodes.nodes.size();
    for (const auto& n : nodes.nodes) (n.is_head() ? row.n_heads : row.n_mlps)++;
    if (with_edges && !nodes.nodes.empty()) {
      row.n_edges = discover_edges(model, dataset, nodes.nodes, t, means, options).edges.size();
    }
    if (nodes.nodes.empty()) {
      row.completeness_pct = 100.0 * ablate_components(model, dataset, model.config.components(), means, options.run).mean /
                             std::abs(nodes.base_mean);
      row.faithfulness_pct = 100.0;
    } else {
      const auto ev = evaluate_circuit(model, dataset, nodes.nodes, means, t, options.run);
      row.completeness_pct = 100.0 * ev.circuit_only_diff / std::abs(nodes.base_mean);
      row.faithfulness_pct = ev.faithfulness_pct;
    }
    rows.push_back(row);
  }
  return rows;
}

inline nlohmann::json circuit_to_json(const CircuitGraph& g, const CircuitEvaluation* ev = nullptr) {
  nlohmann::json j;
  j["nodes"] = nlohmann::json::array();
  for (const auto& n : g.nodes) j["nodes"].push_back(to_string(n));
  j["edges"] = nlohmann::json::array();
  for (const auto& e : g.edges) {
    j["edges"].push_back({{"src", to_string(e.src)}, {"dst", to_string(e.dst)}, {"slot", slot_name(e.slot)}});
  }
  j["threshold"] = g.threshold;
  j["base_mean_logit_diff"] = g.base_mean;
  j["dataset_hash"] = g.dataset_hash;
  if (ev != nullptr) {
    nlohmann::json m = nlohmann::json::object();
    for (const auto& [c, pass] : ev->minimality_pass) m[to_string(c)] = pass;
    j["evaluation"] = {{"completeness_drop_pct", ev->completeness_drop_pct},
                       {"faithfulness_logit_diff", ev->faithfulness_diff},
                       {"faithfulness_pct", ev->faithfulness_pct},
                       {"circuit_only_logit_diff", ev->circuit_only_diff},
                       {"minimality_pass", m}};
  }
  return j;
}

inline std::string circuit_to_dot(const CircuitGraph& g) {
  std::string out = "digraph circuit {\n  rankdir=BT;\n  \"input\" [shape=box];\n  \"output\" [shape=box];\n";
  for (const auto& n : g.nodes) {
    out += "  \"" + to_string(n) + "\" [shape=" + (n.is_head() ? "ellipse" : "box") + "];\n";
  }
  for (const auto& e : g.edges) {
    out += "  \"" + to_string(e.src) + "\" -> \"" + to_string(e.dst) + "\" [label=\"" +
           std::string(slot_name(e.slot)) + "\"];\n";
  }
  return out + "}\n";
}

}  // namespace circuit_align
