// circuit-align: command-line front end.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "circuit_align/circuit_align.hpp"

namespace ca = circuit_align;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string model;
  std::string model2;
  std::string task = "numeral_seq";
  std::size_t n = 100;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::size_t threads = std::max(1u, std::thread::hardware_concurrency());
  std::string dataset_path;
  std::string names_path;
};

struct Session {
  ca::ModelBundle model;
  std::optional<ca::ModelBundle> model2;
  ca::TaskDataset dataset;
  ca::TaskDataset corrupted;
  ca::RunOptions run;
};

std::string fmt(double v) { return ca::format_number(v); }

ca::TaskDataset dataset_for(const Globals& g, const ca::Tokenizer& tok) {
  ca::TaskRequest req;
  req.dataset_path = g.dataset_path;
  if (g.dataset_path.empty()) req.task = ca::parse_task(g.task);
  req.n = g.n;
  req.seed = g.seed;
  if (!g.names_path.empty()) req.names = ca::load_name_pool(g.names_path);
  return ca::make_dataset(req, tok);
}

// Both models must see identical token ids.
void check_shared_tokens(const ca::ModelBundle& a, const ca::ModelBundle& b, const ca::TaskDataset& ds) {
  for (const auto& ex : ds.examples) {
    const auto text = a.tokenizer.decode(ex.prompt_tokens);
    ca::require(b.tokenizer.encode(text) == ex.prompt_tokens, ca::ErrorCode::invalid_argument,
                "models tokenize the prompt '" + text + "' differently");
  }
}

Session open_session(const Globals& g, bool needs_model2) {
  ca::require(!g.model.empty(), ca::ErrorCode::invalid_argument, "--model is required");
  Session s;
  s.model = ca::load_model_source(g.model);
  if (!g.model2.empty()) s.model2 = ca::load_model_source(g.model2);
  ca::require(!needs_model2 || s.model2.has_value(), ca::ErrorCode::invalid_argument, "--model2 is required");
  s.dataset = dataset_for(g, s.model.tokenizer);
  for (const auto& w : s.dataset.warnings) std::cerr << "warning: " << w << "\n";
  s.corrupted = ca::corrupt_dataset(s.dataset, ca::derive_seed(g.seed, 0x636f7272, 0, 0));
  if (s.model2) check_shared_tokens(s.model, *s.model2, s.dataset);
  s.run.threads = g.threads;
  return s;
}

ca::RunManifest manifest_for(const std::string& command, const Globals& g, const Session& s, json flags) {
  ca::RunManifest m;
  m.command = command;
  flags["model"] = g.model;
  flags["model2"] = g.model2;
  flags["task"] = g.dataset_path.empty() ? g.task : "external";
  flags["n"] = g.n;
  flags["dataset_path"] = g.dataset_path;
  m.flags = std::move(flags);
  m.model_digests[s.model.name] = s.model.weights_digest;
  if (s.model2) m.model_digests[s.model2->name] = s.model2->weights_digest;
  m.dataset_hash = s.dataset.content_hash;
  m.seeds = {g.seed};
  return m;
}

void announce(const fs::path& manifest) { std::cout << "wrote " << manifest.string() << "\n"; }

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      ca::require(used == item.size(), ca::ErrorCode::parse_error, "bad number '" + item + "'");
    } catch (const std::logic_error&) {
      ca::fail(ca::ErrorCode::parse_error, "bad number '" + item + "' in list '" + text + "'");
    }
  }
  ca::require(!out.empty(), ca::ErrorCode::parse_error, "empty list");
  return out;
}

// ------------------------------------------------------------- baseline

void cmd_baseline(const Globals& g) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("baseline", g, s, json::object()));
  ca::CsvTable table({"model", "task", "n", "mean_logit_diff", "std_logit_diff"});
  json rows = json::array();
  std::vector<const ca::ModelBundle*> models = {&s.model};
  if (s.model2) models.push_back(&*s.model2);
  for (const auto* m : models) {
    const auto r = ca::baseline_scores(*m, s.dataset, s.run);
    double ss = 0.0;
    for (double v : r.per_example) ss += (v - r.mean) * (v - r.mean);
    const double sd = r.per_example.size() > 1 ? std::sqrt(ss / static_cast<double>(r.per_example.size() - 1)) : 0.0;
    table.row({m->name, std::string(ca::task_name(s.dataset.task_tag)), std::to_string(s.dataset.size()), fmt(r.mean), fmt(sd)});
    rows.push_back({{"model", m->name}, {"mean_logit_diff", r.mean}, {"std_logit_diff", sd}});
    std::cout << m->name << " mean logit diff " << fmt(r.mean) << "\n";
  }
  out.csv("baseline.csv", table);
  out.json("baseline.json", {{"rows", rows}});
  announce(out.finish());
}

// ------------------------------------------------------------- discover

struct DiscoverFlags {
  double threshold = 0.2;
  bool independent = false;
  bool dense = false;
  bool no_edges = false;
};

void cmd_discover(const Globals& g, const DiscoverFlags& f) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("discover", g, s,
                                                 {{"threshold", f.threshold},
                                                  {"independent_ablation", f.independent},
                                                  {"dense_edges", f.dense},
                                                  {"no_edges", f.no_edges}}));
  const auto means = ca::cached_corrupted_means(s.model, s.corrupted, s.run);
  ca::DiscoveryOptions opts;
  opts.independent_ablation = f.independent;
  opts.dense_edges = f.dense;
  opts.run = s.run;
  const auto nodes = ca::discover_nodes(s.model, s.dataset, means, f.threshold, opts);
  ca::CircuitGraph graph;
  graph.nodes = nodes.nodes;
  graph.threshold = f.threshold;
  graph.base_mean = nodes.base_mean;
  graph.dataset_hash = s.dataset.content_hash;

  ca::CsvTable node_rows({"component", "drop", "drop_pct", "retained"});
  for (const auto& [c, drop] : nodes.drops) {
    const bool kept = std::find(nodes.nodes.begin(), nodes.nodes.end(), c) != nodes.nodes.end();
    node_rows.row({ca::to_string(c), fmt(drop), fmt(100.0 * drop / std::abs(nodes.base_mean)), kept ? "1" : "0"});
  }
  out.csv("node_scores.csv", node_rows);

  if (!f.no_edges && !nodes.nodes.empty()) {
    const auto edges = ca::discover_edges(s.model, s.dataset, nodes.nodes, f.threshold, means, opts);
    graph.edges = edges.edges;
    ca::CsvTable edge_rows({"edge", "mean_logit_diff", "retained"});
    for (const auto& [e, mean] : edges.edge_means) {
      const bool kept = std::find(edges.edges.begin(), edges.edges.end(), e) != edges.edges.end();
      edge_rows.row({ca::to_string(e), fmt(mean), kept ? "1" : "0"});
    }
    out.csv("edge_scores.csv", edge_rows);
  }
  std::optional<ca::CircuitEvaluation> ev;
  if (!nodes.nodes.empty()) ev = ca::evaluate_circuit(s.model, s.dataset, nodes.nodes, means, f.threshold, s.run);
  out.json("circuit.json", ca::circuit_to_json(graph, ev ? &*ev : nullptr));
  out.text("circuit.dot", ca::circuit_to_dot(graph));
  std::cout << "nodes " << graph.nodes.size() << " edges " << graph.edges.size() << "\n";
  announce(out.finish());
}

// ------------------------------------------------------------ intervene

struct IntervenFlags {
  std::vector<std::string> components;
  std::vector<std::string> edges;
  bool patch = false;
  std::string path = "full";
};

void cmd_intervene(const Globals& g, const IntervenFlags& f) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("intervene", g, s,
                                                 {{"components", f.components},
                                                  {"edges", f.edges},
                                                  {"patch", f.patch},
                                                  {"path", f.path}}));
  const auto means = ca::cached_corrupted_means(s.model, s.corrupted, s.run);
  const double base = ca::baseline_scores(s.model, s.dataset, s.run).mean;
  std::vector<ca::ComponentId> comps;
  for (const auto& c : f.components) comps.push_back(ca::parse_component(c));
  if (comps.empty() && f.edges.empty()) comps = s.model.config.components();

  json records = json::array();
  ca::CsvTable table({"target", "mean_logit_diff", "delta_p_pct", "n"});
  for (const auto& c : comps) {
    const auto r = ca::ablate_and_score(s.model, s.dataset, c, means, s.run);
    const double pct = ca::perf_change_pct(r.mean, base);
    table.row({ca::to_string(c), fmt(r.mean), fmt(pct), std::to_string(r.per_example.size())});
    records.push_back({{"component", ca::to_string(c)}, {"mean_logit_diff", r.mean}, {"delta_p_pct", pct},
                       {"n", r.per_example.size()}});
  }
  for (const auto& text : f.edges) {
    const auto e = ca::parse_edge(text);
    const auto r = ca::path_patch_edge(s.model, s.dataset, e, means, s.run);
    const double pct = ca::perf_change_pct(r.mean, base);
    table.row({ca::to_string(e), fmt(r.mean), fmt(pct), std::to_string(r.per_example.size())});
    records.push_back({{"edge", ca::to_string(e)}, {"mean_logit_diff", r.mean}, {"delta_p_pct", pct},
                       {"n", r.per_example.size()}});
  }
  out.csv("intervene.csv", table);

  if (f.patch) {
    ca::PatchPath path = f.path == "full"  ? ca::PatchPath::full
                         : f.path == "qk"  ? ca::PatchPath::qk_only
                         : f.path == "ov"  ? ca::PatchPath::ov_only
                                           : (ca::fail(ca::ErrorCode::invalid_argument, "--path must be full|qk|ov"),
                                              ca::PatchPath::full);
    ca::CsvTable patch({"component", "position", "mean_recovery"});
    const std::size_t P = s.dataset.examples[0].prompt_tokens.size();
    for (const auto& ex : s.dataset.examples) {
      ca::require(ex.prompt_tokens.size() == P, ca::ErrorCode::invalid_argument,
                  "position patching needs prompts of equal length");
    }
    for (const auto& c : comps) {
      if (path != ca::PatchPath::full && !c.is_head()) continue;
      for (std::size_t p = 0; p < P; ++p) {
        std::vector<double> rec(s.dataset.size());
        ca::parallel_for(s.dataset.size(), s.run.threads, [&](std::size_t i) {
          ca::PatchSpec spec{c, {p}, path, ca::PatchDirection::patch_clean_into_corrupted};
          rec[i] = ca::activation_patch(s.model, s.dataset.examples[i], s.corrupted.examples[i], spec).recovery;
        });
        patch.row({ca::to_string(c), std::to_string(p), fmt(ca::mean_of(rec))});
      }
    }
    out.csv("patching.csv", patch);
  }
  out.json("intervene.json", {{"base_mean_logit_diff", base}, {"records", records}});
  announce(out.finish());
}

// -------------------------------------------------------------- analyze

struct AnalyzeFlags {
  std::string head;
  std::string probe_target;
};

void write_similarity_csv(ca::ArtifactWriter& out, const std::string& name, const ca::SimilarityMatrix& sim) {
  ca::CsvTable t({"teacher", "student", "similarity", "reduced_head_similarity", "rank_deficient"});
  for (std::size_t i = 0; i < sim.teacher.size(); ++i) {
    for (std::size_t j = 0; j < sim.student.size(); ++j) {
      if (sim.teacher[i].kind != sim.student[j].kind) continue;
      const auto& d = sim.detail[i][j];
      t.row({ca::to_string(sim.teacher[i]), ca::to_string(sim.student[j]), fmt(sim.values(i, j)),
             d.reduced_head_similarity ? "1" : "0", d.rank_deficient ? "1" : "0"});
    }
  }
  out.csv(name, t);
}

ca::ProbeOptions seeded_probe(std::uint64_t seed) {
  ca::ProbeOptions o;
  o.seed = seed;
  return o;
}

ca::ProbeCurve run_probe(const Session& s, const std::string& target, const std::string& source,
                         const std::string& head, std::size_t ith, const ca::ProbeOptions& options) {
  ca::ProbeSpec spec;
  spec.options = options;
  spec.target = ca::parse_probe_target(target);
  spec.source = source == "resid_post"  ? ca::ProbeSource::resid_post
                : source == "resid_mid" ? ca::ProbeSource::resid_mid
                : source == "head_values"
                    ? ca::ProbeSource::head_values
                    : (ca::fail(ca::ErrorCode::invalid_argument, "--source must be resid_post|resid_mid|head_values"),
                       ca::ProbeSource::resid_post);
  if (spec.source == ca::ProbeSource::head_values) {
    ca::require(!head.empty(), ca::ErrorCode::invalid_argument, "--source head_values needs --head");
    spec.head = ca::parse_component(head);
  }
  spec.ith = ith;
  return ca::probe_layer_curve(s.model, s.dataset, spec, s.run);
}

void write_probe_csv(ca::ArtifactWriter& out, const ca::ProbeCurve& curve) {
  ca::CsvTable t({"layer", "score", "permutation_score", "chance", "n_classes", "n_train", "n_val", "metric"});
  for (std::size_t i = 0; i < curve.layers.size(); ++i) {
    const auto& p = curve.points[i];
    t.row({std::to_string(curve.layers[i]), fmt(p.score), fmt(p.permutation_score), fmt(p.chance),
           std::to_string(p.n_classes), std::to_string(p.n_train), std::to_string(p.n_val),
           p.binary ? "auroc" : "macro_accuracy"});
  }
  out.csv("probe.csv", t);
}

void cmd_analyze(const Globals& g, const AnalyzeFlags& f) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("analyze", g, s, {{"head", f.head}, {"probe_target", f.probe_target}}));
  const auto at = ca::mlp_attribution(s.model, s.dataset, s.run);
  ca::CsvTable t({"layer", "mlp", "attn", "mlp_share"});
  for (std::size_t l = 0; l < at.n_layers; ++l) {
    t.row({std::to_string(l), fmt(at.mlp[l]), fmt(at.attn[l]), fmt(at.mlp_share(l))});
  }
  out.csv("attribution.csv", t);
  std::vector<std::string> header = {"layer"};
  for (std::size_t p = 0; p < at.positions; ++p) header.push_back("pos" + std::to_string(p));
  ca::CsvTable heat(header);
  for (std::size_t l = 0; l < at.n_layers; ++l) {
    std::vector<std::string> row = {std::to_string(l)};
    for (double v : at.mlp_by_position[l]) row.push_back(fmt(v));
    heat.row(row);
  }
  out.csv("attribution_by_position.csv", heat);
  json summary = {{"embedding", at.embedding},   {"ln_bias", at.ln_bias},
                  {"logit_diff", at.logit_diff}, {"reconstructed", at.reconstructed()}};

  if (s.model2) {
    const auto ts = ca::summarize_components(s.model, s.dataset, ca::HeadSite::head_out, s.run);
    const auto ss = ca::summarize_components(*s.model2, s.dataset, ca::HeadSite::head_out, s.run);
    const auto mlp = ca::mlp_similarity_matrix(ts, ss);
    ca::CsvTable m({"teacher", "student", "similarity", "rank_deficient"});
    for (std::size_t i = 0; i < mlp.teacher.size(); ++i) {
      for (std::size_t j = 0; j < mlp.student.size(); ++j) {
        m.row({ca::to_string(mlp.teacher[i]), ca::to_string(mlp.student[j]), fmt(mlp.values(i, j)),
               mlp.rank_deficient[i][j] ? "1" : "0"});
      }
    }
    out.csv("mlp_similarity.csv", m);
  }
  if (!f.head.empty()) {
    const auto sc = ca::successor_copy_scores(s.model, s.dataset, ca::parse_component(f.head), s.run);
    summary["successor_copy"] = {{"head", f.head}, {"successor_pct", sc.successor_pct}, {"copy_pct", sc.copy_pct}};
  }
  if (!f.probe_target.empty()) write_probe_csv(out, run_probe(s, f.probe_target, "resid_post", "", 0, seeded_probe(g.seed)));
  out.json("analysis.json", summary);
  announce(out.finish());
}

// ---------------------------------------------------------------- align

struct AlignFlags {
  std::string normalization = "max";
  std::string strategy = "greedy";
  std::size_t topk = 0;
  std::size_t soft_k = 5;
  double soft_temperature = 1.0;
  std::string head_site = "head_out";
  bool all_variants = false;
  bool noise_sweep = false;
};

struct NoiseFlags {
  double sigma_max = 2.0;
  double sigma_step = 0.05;
  std::size_t n_seeds = 5;
  double plateau_tolerance = 0.01;
};

ca::MatchOptions match_options(const AlignFlags& f) {
  ca::MatchOptions m;
  m.strategy = ca::parse_strategy(f.strategy);
  m.top_k = f.topk;
  m.soft_k = f.soft_k;
  m.soft_temperature = f.soft_temperature;
  return m;
}

void write_noise(ca::ArtifactWriter& out, const ca::NoiseCurve& curve) {
  ca::CsvTable t({"sigma", "mean_A", "std_A"});
  json points = json::array();
  for (const auto& p : curve.points) {
    t.row({fmt(p.sigma), fmt(p.mean), fmt(p.stddev)});
    points.push_back({{"sigma", p.sigma}, {"scores", p.scores}, {"mean", p.mean}, {"std", p.stddev}});
  }
  out.csv("noise.csv", t);
  out.json("noise.json", {{"noiseless_A", curve.noiseless},
                          {"plateau_start_index", curve.plateau_start},
                          {"spearman_pre_plateau", curve.spearman_pre_plateau},
                          {"points", points}});
}

ca::NoiseCurve run_noise(const Session& s, const AlignFlags& a, const NoiseFlags& f, std::uint64_t seed) {
  ca::require(f.sigma_step > 0.0 && f.sigma_max >= 0.0, ca::ErrorCode::invalid_argument, "bad sigma grid");
  std::vector<double> sigmas;
  const auto steps = static_cast<std::size_t>(std::llround(f.sigma_max / f.sigma_step));
  for (std::size_t i = 0; i <= steps; ++i) sigmas.push_back(static_cast<double>(i) * f.sigma_step);
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < f.n_seeds; ++i) seeds.push_back(seed + i);
  ca::NoiseOptions o;
  o.normalization = ca::parse_normalization(a.normalization);
  o.match = match_options(a);
  o.head_site = ca::parse_head_site(a.head_site);
  o.plateau_tolerance = f.plateau_tolerance;
  o.threads = s.run.threads;
  return ca::noise_injection_experiment(s.model, *s.model2, s.dataset, s.corrupted, sigmas, seeds, o);
}

void cmd_align(const Globals& g, const AlignFlags& f, const NoiseFlags& nf) {
  auto s = open_session(g, true);
  ca::ArtifactWriter out(g.out_dir, manifest_for("align", g, s,
                                                 {{"normalization", f.normalization},
                                                  {"strategy", f.strategy},
                                                  {"topk", f.topk},
                                                  {"soft_k", f.soft_k},
                                                  {"soft_temperature", f.soft_temperature},
                                                  {"head_site", f.head_site},
                                                  {"all_variants", f.all_variants},
                                                  {"noise_sweep", f.noise_sweep}}));
  ca::ProfileOptions po;
  po.head_site = ca::parse_head_site(f.head_site);
  po.run = s.run;
  const auto tp = ca::build_profile(s.model, s.dataset, s.corrupted, po);
  const auto sp = ca::build_profile(*s.model2, s.dataset, s.corrupted, po);
  const auto norm = ca::parse_normalization(f.normalization);
  auto report = ca::align_profiles(tp, sp, norm, match_options(f), s.run.threads);
  report.timestamp = ca::utc_timestamp();

  ca::CsvTable pairs({"teacher", "student", "similarity", "teacher_influence", "student_influence", "weight",
                      "contribution"});
  for (const auto& p : report.pairs) {
    pairs.row({ca::to_string(p.teacher), ca::to_string(p.student), fmt(p.similarity), fmt(p.teacher_influence),
               fmt(p.student_influence), fmt(p.weight), fmt(p.contribution)});
  }
  out.csv("pairs.csv", pairs);
  write_similarity_csv(out, "similarity.csv", ca::similarity_matrix(tp.summaries, sp.summaries, s.run.threads));
  ca::CsvTable inf({"model", "component", "raw_drop", "clamped_drop", "influence"});
  for (const auto* p : {&tp, &sp}) {
    const auto t = p->influence(norm);
    for (std::size_t i = 0; i < t.components.size(); ++i) {
      inf.row({p->model_id, ca::to_string(t.components[i]), fmt(t.raw_drop[i]), fmt(t.clamped_drop[i]),
               fmt(t.influence[i])});
    }
  }
  out.csv("influence.csv", inf);
  auto body = ca::report_to_json(report);
  if (f.all_variants) {
    json variants = json::array();
    ca::CsvTable vt({"normalization", "strategy", "A", "abs_delta_vs_max_greedy"});
    const auto all = ca::all_variants(tp, sp, match_options(f));
    for (const auto& v : all) {
      const double delta = std::abs(v.score - all.front().score);
      vt.row({std::string(ca::normalization_name(v.normalization)), std::string(ca::strategy_name(v.strategy)),
              fmt(v.score), fmt(delta)});
      variants.push_back({{"normalization", ca::normalization_name(v.normalization)},
                          {"strategy", ca::strategy_name(v.strategy)},
                          {"A", v.score}});
    }
    out.csv("variants.csv", vt);
    body["variants"] = variants;
  }
  out.json("alignment.json", body);
  if (f.noise_sweep) write_noise(out, run_noise(s, f, nf, g.seed));
  std::cout << "A = " << fmt(report.score) << "\n";
  announce(out.finish());
}

void cmd_noise(const Globals& g, const AlignFlags& a, const NoiseFlags& f) {
  auto s = open_session(g, true);
  ca::ArtifactWriter out(g.out_dir, manifest_for("noise", g, s,
                                                 {{"normalization", a.normalization},
                                                  {"strategy", a.strategy},
                                                  {"sigma_max", f.sigma_max},
                                                  {"sigma_step", f.sigma_step},
                                                  {"n_seeds", f.n_seeds},
                                                  {"plateau_tolerance", f.plateau_tolerance}}));
  const auto curve = run_noise(s, a, f, g.seed);
  write_noise(out, curve);
  std::cout << "spearman (pre-plateau) " << fmt(curve.spearman_pre_plateau) << "\n";
  announce(out.finish());
}

// ----------------------------------------------------------- robustness

struct RobustFlags {
  std::size_t resamples = 10000;
  double compression = 0.0;
};

void cmd_robustness(const Globals& g, const RobustFlags& f) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("robustness", g, s,
                                                 {{"resamples", f.resamples}, {"compression", f.compression}}));
  ca::CsvTable t({"model", "mean_drop_pp", "ci_low", "ci_high", "frac_above_10pct", "frac_above_20pct",
                  "n_components"});
  json rows = json::array();
  std::vector<double> means;
  std::vector<const ca::ModelBundle*> models = {&s.model};
  if (s.model2) models.push_back(&*s.model2);
  for (const auto* m : models) {
    const auto p = ca::build_profile(*m, s.dataset, s.corrupted, {ca::HeadSite::head_out, s.run});
    const auto r = ca::robustness_summary(p, f.resamples, 0.95, g.seed);
    t.row({m->name, fmt(r.drop.mean), fmt(r.drop.ci_low), fmt(r.drop.ci_high), fmt(r.frac_above_10),
           fmt(r.frac_above_20), std::to_string(r.n_components)});
    rows.push_back({{"model", m->name},
                    {"mean_drop_pp", r.drop.mean},
                    {"ci_low", r.drop.ci_low},
                    {"ci_high", r.drop.ci_high},
                    {"per_component_drop_pct", r.per_component_drop_pct}});
    means.push_back(r.drop.mean);
  }
  out.csv("robustness.csv", t);
  json body = {{"rows", rows}};
  if (f.compression > 0.0) {
    ca::require(means.size() == 2, ca::ErrorCode::invalid_argument, "--compression needs --model2");
    const auto b = ca::compression_brittleness({{f.compression, means[0], means[1]}}).front();
    body["brittleness"] = {{"compression", f.compression}, {"delta_pp", b.delta_pp}, {"beta_mean", b.beta},
                           {"pp_per_0.1C", b.per_tenth}};
  }
  out.json("robustness.json", body);
  announce(out.finish());
}

// ---------------------------------------------------------------- sweep

void cmd_sweep(const Globals& g, const std::string& thresholds, bool independent, bool edges) {
  auto s = open_session(g, false);
  ca::ArtifactWriter out(g.out_dir, manifest_for("sweep", g, s,
                                                 {{"thresholds", thresholds},
                                                  {"independent_ablation", independent},
                                                  {"edges", edges}}));
  const auto means = ca::cached_corrupted_means(s.model, s.corrupted, s.run);
  ca::DiscoveryOptions opts;
  opts.independent_ablation = independent;
  opts.run = s.run;
  const auto rows = ca::threshold_sweep(s.model, s.dataset, means, parse_list(thresholds), opts, edges);
  ca::CsvTable t({"threshold", "nodes", "heads", "mlps", "edges", "completeness_pct", "faithfulness_pct"});
  for (const auto& r : rows) {
    t.row({fmt(r.threshold), std::to_string(r.n_nodes), std::to_string(r.n_heads), std::to_string(r.n_mlps),
           std::to_string(r.n_edges), fmt(r.completeness_pct), fmt(r.faithfulness_pct)});
  }
  out.csv("sweep.csv", t);
  announce(out.finish());
}

// ---------------------------------------------------------------- probe

void cmd_probe(const Globals& g, const std::string& target, const std::string& source, const std::string& head,
               std::size_t ith, ca::ProbeOptions options) {
  auto s = open_session(g, false);
  options.seed = g.seed;
  ca::ArtifactWriter out(g.out_dir, manifest_for("probe", g, s,
                                                 {{"target", target},
                                                  {"source", source},
                                                  {"head", head},
                                                  {"ith", ith},
                                                  {"weight_decay", options.weight_decay},
                                                  {"batch_size", options.batch_size}}));
  const auto curve = run_probe(s, target, source, head, ith, options);
  write_probe_csv(out, curve);
  announce(out.finish());
}

// ------------------------------------------------------------ utilities

void cmd_toy_export(const std::string& name, const std::string& dir, const std::string& prompts_file) {
  std::vector<ca::PlantedSpec> specs;
  if (name == "all") specs = ca::builtin_toy_specs();
  else specs.push_back(ca::toy_spec_by_name(name));
  for (const auto& spec : specs) {
    const auto model = ca::build_planted(spec);
    const fs::path target = fs::path(dir) / spec.name;
    ca::save_model_dir(model, target);
    if (!prompts_file.empty()) {
      const auto ref = ca::make_reference(model, ca::load_reference_prompts(prompts_file));
      ca::atomic_write(target / "reference_logits.json", ca::reference_to_json(ref).dump(1) + "\n");
    }
    std::cout << "wrote " << target.string() << "\n";
  }
}

void cmd_gen_data(const Globals& g, const std::string& out_file) {
  ca::require(!g.model.empty(), ca::ErrorCode::invalid_argument, "--model is required (for its tokenizer)");
  const auto model = ca::load_model_source(g.model);
  const auto ds = dataset_for(g, model.tokenizer);
  ca::atomic_write(out_file, ca::to_jsonl(ds, model.tokenizer));
  std::cout << "wrote " << ds.size() << " examples to " << out_file << " (hash " << ds.content_hash << ")\n";
}

int cmd_verify_reference(const Globals& g, const std::string& reference, double tolerance) {
  ca::require(!g.model.empty(), ca::ErrorCode::invalid_argument, "--model is required");
  const auto model = ca::load_model_source(g.model);
  const fs::path ref_path = reference.empty() ? fs::path(g.model) / "reference_logits.json" : fs::path(reference);
  const auto check = ca::verify_reference(model, ca::load_reference_logits(ref_path), tolerance);
  json body = {{"max_abs_per_prompt", check.max_abs},
               {"worst", check.worst},
               {"tolerance", check.tolerance},
               {"pass", check.pass}};
  std::cout << body.dump(2) << "\n";
  return check.pass ? 0 : 1;
}

int report_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", code}, {"message", message}}.dump() << "\n";
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Teacher/student circuit discovery and alignment toolkit"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--model", g.model, "Model directory or toy:<name>");
    sub->add_option("--model2", g.model2, "Second (student) model");
    sub->add_option("--task", g.task, "numeral_seq | word_seq | ioi");
    sub->add_option("--n", g.n, "Number of examples");
    sub->add_option("--seed", g.seed, "Dataset and resampling seed");
    sub->add_option("--out-dir", g.out_dir, "Output directory");
    sub->add_option("--threads", g.threads, "Worker threads");
    sub->add_option("--dataset-path", g.dataset_path, "External JSONL dataset");
    sub->add_option("--names", g.names_path, "IOI name pool file");
  };

  auto* baseline = app.add_subcommand("baseline", "Mean logit difference per model");
  add_globals(baseline);

  DiscoverFlags df;
  auto* discover = app.add_subcommand("discover", "Node and edge circuit discovery");
  add_globals(discover);
  discover->add_option("--threshold", df.threshold, "Retention threshold T_n");
  discover->add_flag("--independent-ablation", df.independent, "Score components without cumulative pruning");
  discover->add_flag("--dense-edges", df.dense, "Search edges over every component");
  discover->add_flag("--no-edges", df.no_edges, "Skip edge discovery");

  IntervenFlags inf;
  auto* intervene = app.add_subcommand("intervene", "Mean ablation, path patching and activation patching");
  add_globals(intervene);
  intervene->add_option("--component", inf.components, "Component to ablate (repeatable)");
  intervene->add_option("--edge", inf.edges, "Edge src->dst.slot to path-patch (repeatable)");
  intervene->add_flag("--patch", inf.patch, "Per-position clean-into-corrupted activation patching");
  intervene->add_option("--path", inf.path, "full | qk | ov");

  AnalyzeFlags af;
  auto* analyze = app.add_subcommand("analyze", "Attribution, MLP similarity, successor/copy scores");
  add_globals(analyze);
  analyze->add_option("--head", af.head, "Head for successor/copy scores, e.g. L1.H0");
  analyze->add_option("--probe-target", af.probe_target, "Also run a layer-wise probe");

  AlignFlags al;
  NoiseFlags nf;
  auto add_align = [&](CLI::App* sub) {
    sub->add_option("--normalization", al.normalization, "max | l1 | l2");
    sub->add_option("--strategy", al.strategy, "greedy | hungarian | soft-topk");
    sub->add_option("--topk", al.topk, "Restrict to the K most influential teacher components (0 = off)");
    sub->add_option("--soft-k", al.soft_k, "Candidates for soft top-k");
    sub->add_option("--soft-temperature", al.soft_temperature, "Temperature for soft top-k");
    sub->add_option("--head-site", al.head_site, "head_out | head_v");
  };
  auto add_noise = [&](CLI::App* sub) {
    sub->add_option("--sigma-max", nf.sigma_max, "Largest noise standard deviation");
    sub->add_option("--sigma-step", nf.sigma_step, "Grid step");
    sub->add_option("--noise-seeds", nf.n_seeds, "Seeds per sigma");
    sub->add_option("--plateau-tolerance", nf.plateau_tolerance, "Plateau detection tolerance");
  };
  auto* align = app.add_subcommand("align", "Alignment score between --model and --model2");
  add_globals(align);
  add_align(align);
  add_noise(align);
  align->add_flag("--all-variants", al.all_variants, "Also report every normalization x strategy variant");
  align->add_flag("--noise-sweep", al.noise_sweep, "Also run the noise-injection experiment");

  auto* noise = app.add_subcommand("noise", "Noise-injection validation of the alignment score");
  add_globals(noise);
  add_align(noise);
  add_noise(noise);

  RobustFlags rf;
  auto* robust = app.add_subcommand("robustness", "Bootstrap summary of ablation drops");
  add_globals(robust);
  robust->add_option("--resamples", rf.resamples, "Bootstrap resamples");
  robust->add_option("--compression", rf.compression, "Compression ratio for brittleness (needs --model2)");

  std::string thresholds = "0.1,0.15,0.2,0.25,0.3";
  bool sweep_independent = false;
  bool sweep_edges = false;
  auto* sweep = app.add_subcommand("sweep", "Threshold sweep of circuit discovery");
  add_globals(sweep);
  sweep->add_option("--thresholds", thresholds, "Comma-separated ascending thresholds");
  sweep->add_flag("--independent-ablation", sweep_independent, "Score components without cumulative pruning");
  sweep->add_flag("--edges", sweep_edges, "Also count edges");

  std::string probe_target = "next_numeral", probe_source = "resid_post", probe_head;
  std::size_t probe_ith = 0;
  auto* probe = app.add_subcommand("probe", "Layer-wise linear probe");
  add_globals(probe);
  probe->add_option("--probe-target", probe_target,
                    "ith_numeral | next_numeral | full_sequence | previous_numeral | prior_occurrence_binary");
  probe->add_option("--source", probe_source, "resid_post | resid_mid | head_values");
  probe->add_option("--head", probe_head, "Head for --source head_values");
  probe->add_option("--ith", probe_ith, "Index for ith_numeral");
  ca::ProbeOptions probe_options;
  probe->add_option("--weight-decay", probe_options.weight_decay, "L2 penalty on probe weights");
  probe->add_option("--batch-size", probe_options.batch_size, "Adam batch size (0 = full batch)");

  std::string toy_name = "all", toy_dir = "toys", prompts_file;
  auto* toy = app.add_subcommand("toy-export", "Write planted toy models as model directories");
  toy->add_option("--name", toy_name, "Toy name or 'all'");
  toy->add_option("--out", toy_dir, "Destination directory");
  toy->add_option("--reference-prompts", prompts_file, "Also write reference_logits.json for these prompts");

  std::string data_out = "dataset.jsonl";
  auto* gen = app.add_subcommand("gen-data", "Write a generated dataset as JSONL");
  add_globals(gen);
  gen->add_option("--out", data_out, "Output JSONL file");

  std::string reference;
  double ref_tol = 1e-3;
  auto* verify = app.add_subcommand("verify-reference", "Compare engine logits with reference_logits.json");
  add_globals(verify);
  verify->add_option("--reference", reference, "Reference file (default: <model>/reference_logits.json)");
  verify->add_option("--tolerance", ref_tol, "Max-abs tolerance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (baseline->parsed()) cmd_baseline(g);
    else if (discover->parsed()) cmd_discover(g, df);
    else if (intervene->parsed()) cmd_intervene(g, inf);
    else if (analyze->parsed()) cmd_analyze(g, af);
    else if (align->parsed()) cmd_align(g, al, nf);
    else if (noise->parsed()) cmd_noise(g, al, nf);
    else if (robust->parsed()) cmd_robustness(g, rf);
    else if (sweep->parsed()) cmd_sweep(g, thresholds, sweep_independent, sweep_edges);
    else if (probe->parsed()) cmd_probe(g, probe_target, probe_source, probe_head, probe_ith, probe_options);
    else if (toy->parsed()) cmd_toy_export(toy_name, toy_dir, prompts_file);
    else if (gen->parsed()) cmd_gen_data(g, data_out);
    else if (verify->parsed()) return cmd_verify_reference(g, reference, ref_tol);
  } catch (const ca::Error& e) {
    return report_error(std::string(ca::to_string(e.code())), e.what());
  } catch (const std::exception& e) {
    return report_error("internal", e.what());
  }
  return 0;
}
