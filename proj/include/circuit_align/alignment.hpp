#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

#include "circuit_align/error.hpp"
#include "circuit_align/intervention.hpp"
#include "circuit_align/rng.hpp"
#include "circuit_align/tensor_math.hpp"

namespace circuit_align {

enum class Normalization { max, l1, l2 };
enum class MatchStrategy { greedy, hungarian, soft_topk };

inline std::string_view normalization_name(Normalization n) {
  switch (n) {
    case Normalization::max: return "max";
    case Normalization::l1: return "l1";
    case Normalization::l2: return "l2";
  }
  return "?";
}

inline Normalization parse_normalization(std::string_view s) {
  if (s == "max") return Normalization::max;
  if (s == "l1") return Normalization::l1;
  if (s == "l2") return Normalization::l2;
  fail(ErrorCode::invalid_argument, "unknown normalization '" + std::string(s) + "' (max|l1|l2)");
}

inline std::string_view strategy_name(MatchStrategy s) {
  switch (s) {
    case MatchStrategy::greedy: return "greedy";
    case MatchStrategy::hungarian: return "hungarian";
    case MatchStrategy::soft_topk: return "soft-topk";
  }
  return "?";
}

inline MatchStrategy parse_strategy(std::string_view s) {
  if (s == "greedy" || s == "greedy_nn") return MatchStrategy::greedy;
  if (s == "hungarian") return MatchStrategy::hungarian;
  if (s == "soft-topk" || s == "soft_topk") return MatchStrategy::soft_topk;
  fail(ErrorCode::invalid_argument, "unknown strategy '" + std::string(s) + "' (greedy|hungarian|soft-topk)");
}

// ---------------------------------------------------------------- influence

struct InfluenceTable {
  std::vector<ComponentId> components;
  std::vector<double> raw_drop;
  std::vector<double> clamped_drop;
  std::vector<double> influence;
  Normalization normalization = Normalization::max;
  double base_mean = 0.0;
  std::string dataset_hash;

  double of(const ComponentId& c) const {
    for (std::size_t i = 0; i < components.size(); ++i) {
      if (components[i] == c) return influence[i];
    }
    fail(ErrorCode::invalid_argument, "component " + to_string(c) + " missing from influence table");
  }
};

// Clamps negative drops to zero and normalizes.
inline std::vector<double> normalize_drops(std::span<const double> raw, Normalization norm,
                                           std::vector<double>* clamped_out = nullptr) {
  std::vector<double> clamped(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    require(std::isfinite(raw[i]), ErrorCode::domain_error, "non-finite ablation drop");
    clamped[i] = std::max(0.0, raw[i]);
  }
  double scale = 0.0;
  switch (norm) {
    case Normalization::max:
      for (double d : clamped) scale = std::max(scale, d);
      break;
    case Normalization::l1:
      for (double d : clamped) scale += d;
      break;
    case Normalization::l2:
      for (double d : clamped) scale += d * d;
      scale = std::sqrt(scale);
      break;
  }
  if (!(scale > 0.0)) {
    fail(ErrorCode::degenerate_influence, "every clamped ablation drop is zero; the task uses no component");
  }
  std::vector<double> out(clamped.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = clamped[i] / scale;
  if (clamped_out != nullptr) *clamped_out = std::move(clamped);
  return out;
}

inline InfluenceTable make_influence_table(const std::vector<ComponentId>& components, std::vector<double> raw,
                                           Normalization norm, double base_mean, std::string dataset_hash = {}) {
  require(components.size() == raw.size(), ErrorCode::invalid_argument, "component/drop count mismatch");
  InfluenceTable t;
  t.components = components;
  t.raw_drop = std::move(raw);
  t.influence = normalize_drops(t.raw_drop, norm, &t.clamped_drop);
  t.normalization = norm;
  t.base_mean = base_mean;
  t.dataset_hash = std::move(dataset_hash);
  return t;
}

inline InfluenceTable influence_scores(const ModelBundle& model, const TaskDataset& dataset,
                                       const CorruptedMeans& means, Normalization norm,
                                       const RunOptions& run = {}) {
  const double base = baseline_scores(model, dataset, run).mean;
  const auto comps = model.config.components();
  std::vector<double> raw(comps.size());
  for (std::size_t i = 0; i < comps.size(); ++i) {
    raw[i] = base - ablate_and_score(model, dataset, comps[i], means, run).mean;
  }
  return make_influence_table(comps, std::move(raw), norm, base, dataset.content_hash);
}

// --------------------------------------------------------------- similarity

enum class HeadSite { head_out, head_v };

inline HeadSite parse_head_site(std::string_view s) {
  if (s == "head_out") return HeadSite::head_out;
  if (s == "head_v") return HeadSite::head_v;
  fail(ErrorCode::invalid_argument, "unknown head site '" + std::string(s) + "' (head_out|head_v)");
}

// Dataset-level activation summary of one component.
struct ComponentSummary {
  ComponentId id;
  Matrix mean_activation;  // heads: positions x width
  PcaBasis basis;          // MLPs
};

struct ModelSummaries {
  std::vector<ComponentSummary> components;
  std::size_t positions = 0;

  const ComponentSummary& at(const ComponentId& c) const {
    for (const auto& s : components) {
      if (s.id == c) return s;
    }
    fail(ErrorCode::cache_miss, "no summary for " + to_string(c));
  }
};

inline HookPoint head_summary_hook(const ComponentId& c, HeadSite site) {
  return hook(c.layer, site == HeadSite::head_out ? Site::head_out : Site::head_v, c.head);
}

// Streams the dataset once. Prompts of unequal length are right-aligned and
// truncated to the shortest for the head means; MLP covariance uses every
// position.
inline ModelSummaries summarize_components(const ModelBundle& model, const TaskDataset& dataset,
                                           HeadSite head_site = HeadSite::head_out, const RunOptions& run = {}) {
  require(!dataset.examples.empty(), ErrorCode::invalid_argument, "dataset is empty");
  const auto comps = model.config.components();
  HookSet hooks;
  for (const auto& c : comps) hooks.add(c.is_head() ? head_summary_hook(c, head_site) : output_hook(c));
  std::size_t positions = std::numeric_limits<std::size_t>::max();
  for (const auto& ex : dataset.examples) positions = std::min(positions, ex.prompt_tokens.size());

  ModelSummaries out;
  out.positions = positions;
  std::vector<Matrix> sums(comps.size());
  std::vector<CovarianceAccumulator> covs;
  for (std::size_t i = 0; i < comps.size(); ++i) covs.emplace_back(comps[i].is_mlp() ? model.config.d_model : 0);

  // Forward passes run in parallel chunks; accumulation is sequential in
  // example order.
  const std::size_t chunk = std::max<std::size_t>(1, run.threads) * 8;
  for (std::size_t start = 0; start < dataset.size(); start += chunk) {
    const std::size_t stop = std::min(dataset.size(), start + chunk);
    std::vector<ActivationCache> caches(stop - start);
    parallel_for(stop - start, run.threads, [&](std::size_t k) {
      ForwardOptions opts;
      opts.hooks = hooks;
      if (run.perturb) opts.perturb = run.perturb(start + k);
      caches[k] = forward(model, dataset.examples[start + k].prompt_tokens, opts).cache;
    });
    for (const auto& cache : caches) {
      const std::size_t offset = cache.prompt_length() - positions;
      for (std::size_t i = 0; i < comps.size(); ++i) {
        if (comps[i].is_head()) {
          const Matrix& a = cache.at(head_summary_hook(comps[i], head_site));
          if (sums[i].data.empty()) sums[i] = Matrix(positions, a.cols);
          for (std::size_t p = 0; p < positions; ++p) {
            for (std::size_t j = 0; j < a.cols; ++j) sums[i](p, j) += a(p + offset, j);
          }
        } else {
          const Matrix& a = cache.at(output_hook(comps[i]));
          for (std::size_t p = 0; p < a.rows; ++p) covs[i].add(a.row(p));
        }
      }
    }
  }
  for (std::size_t i = 0; i < comps.size(); ++i) {
    ComponentSummary s;
    s.id = comps[i];
    if (comps[i].is_head()) {
      s.mean_activation = std::move(sums[i]);
      for (double& v : s.mean_activation.data) v /= static_cast<double>(dataset.size());
    } else {
      require(covs[i].count() >= 2, ErrorCode::degenerate_input, "MLP covariance needs at least two rows");
      s.basis = pca_top3_from_covariance(covs[i].covariance());
    }
    out.components.push_back(std::move(s));
  }
  return out;
}

struct SimilarityValue {
  double value = 0.0;
  bool reduced_head_similarity = false;  // per-position norm profile used
  bool rank_deficient = false;           // fewer than three informative PCA directions
};

inline std::vector<double> row_norm_profile(const Matrix& m) {
  std::vector<double> out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (double v : m.row(r)) s += v * v;
    out[r] = std::sqrt(s);
  }
  return out;
}

inline double cosine_or_zero(std::span<const double> a, std::span<const double> b) {
  double aa = 0.0;
  double bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return cosine_similarity(a, b);
}

inline double mlp_basis_similarity(const PcaBasis& a, const PcaBasis& b, bool* rank_deficient = nullptr) {
  require(a.components[0].size() == b.components[0].size(), ErrorCode::dimension_mismatch,
          "MLP bases live in spaces of different width");
  const std::size_t k = std::min(a.rank, b.rank);
  if (rank_deficient != nullptr) *rank_deficient = a.rank_deficient || b.rank_deficient;
  if (k == 0) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i) sum += std::abs(cosine_similarity(a.components[i], b.components[i]));
  return sum / static_cast<double>(k);
}

// Head branch lies in [-1,1]; MLP branch in [0,1].
inline SimilarityValue component_similarity(const ComponentSummary& t, const ComponentSummary& s) {
  require(t.id.kind == s.id.kind, ErrorCode::invalid_argument,
          "cannot compare " + to_string(t.id) + " with " + to_string(s.id));
  SimilarityValue out;
  if (t.id.is_mlp()) {
    out.value = mlp_basis_similarity(t.basis, s.basis, &out.rank_deficient);
    return out;
  }
  const Matrix& a = t.mean_activation;
  const Matrix& b = s.mean_activation;
  require(a.rows == b.rows, ErrorCode::dimension_mismatch,
          "head summaries cover " + std::to_string(a.rows) + " vs " + std::to_string(b.rows) + " positions");
  if (a.cols == b.cols) {
    out.value = cosine_or_zero(a.data, b.data);
  } else {
    out.reduced_head_similarity = true;
    out.value = cosine_or_zero(row_norm_profile(a), row_norm_profile(b));
  }
  return out;
}

struct SimilarityMatrix {
  std::vector<ComponentId> teacher;
  std::vector<ComponentId> student;
  Matrix values;  // raw, teacher rows x student cols; cross-kind entries unused
  std::vector<std::vector<SimilarityValue>> detail;

  // Similarity entering matching and the score; negative head cosines floor at 0.
  double effective(std::size_t i, std::size_t j) const { return std::max(0.0, values(i, j)); }
};

inline SimilarityMatrix similarity_matrix(const ModelSummaries& teacher, const ModelSummaries& student,
                                          std::size_t threads = 1) {
  SimilarityMatrix m;
  for (const auto& c : teacher.components) m.teacher.push_back(c.id);
  for (const auto& c : student.components) m.student.push_back(c.id);
  m.values = Matrix(m.teacher.size(), m.student.size(), 0.0);
  m.detail.assign(m.teacher.size(), std::vector<SimilarityValue>(m.student.size()));
  parallel_for(m.teacher.size(), threads, [&](std::size_t i) {
    for (std::size_t j = 0; j < m.student.size(); ++j) {
      if (m.teacher[i].kind != m.student[j].kind) continue;
      m.detail[i][j] = component_similarity(teacher.components[i], student.components[j]);
      m.values(i, j) = m.detail[i][j].value;
    }
  });
  return m;
}

// ----------------------------------------------------------------- matching

struct MatchCandidate {
  std::size_t student = 0;  // index into SimilarityMatrix::student
  double similarity = 0.0;
  double weight = 1.0;
};

struct TeacherMatch {
  std::size_t teacher = 0;
  std::vector<MatchCandidate> candidates;  // one entry except for soft top-k
};

struct MatchOptions {
  MatchStrategy strategy = MatchStrategy::greedy;
  std::size_t soft_k = 5;
  double soft_temperature = 1.0;
  // Restrict teachers to the K most influential; 0 disables.
  std::size_t top_k = 0;
};

struct MatchSet {
  MatchOptions options;
  std::vector<TeacherMatch> matches;
};

// Maximum-weight assignment of every row of `w` (rows <= cols) to a
// distinct column. Returns the column index per row.
inline std::vector<std::size_t> hungarian_rows(const std::vector<std::vector<double>>& w) {
  const std::size_t n = w.size();
  if (n == 0) return {};
  const std::size_t m = w[0].size();
  require(n <= m, ErrorCode::invalid_argument, "assignment needs rows <= cols");
  const double inf = std::numeric_limits<double>::infinity();
  // Potentials formulation on cost = -w, 1-based with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = -w[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assign(n, 0);
  for (std::size_t j = 1; j <= m; ++j) {
    if (p[j] != 0) assign[p[j] - 1] = j - 1;
  }
  return assign;
}

// Injective assignment of teachers to students. When teachers outnumber
// students the assignment repeats in rounds over the still-unmatched
// teachers, each round injective.
inline std::vector<std::size_t> hungarian_rounds(const std::vector<std::vector<double>>& w) {
  const std::size_t nt = w.size();
  if (nt == 0) return {};
  const std::size_t ns = w[0].size();
  std::vector<std::size_t> result(nt, 0);
  std::vector<std::size_t> pending(nt);
  std::iota(pending.begin(), pending.end(), 0);
  while (!pending.empty()) {
    if (pending.size() <= ns) {
      std::vector<std::vector<double>> sub;
      for (std::size_t t : pending) sub.push_back(w[t]);
      const auto a = hungarian_rows(sub);
      for (std::size_t k = 0; k < pending.size(); ++k) result[pending[k]] = a[k];
      break;
    }
    // Students pick teachers: each student gets the best distinct teacher.
    std::vector<std::vector<double>> transposed(ns, std::vector<double>(pending.size()));
    for (std::size_t s = 0; s < ns; ++s) {
      for (std::size_t k = 0; k < pending.size(); ++k) transposed[s][k] = w[pending[k]][s];
    }
    const auto a = hungarian_rows(transposed);
    std::vector<bool> done(pending.size(), false);
    for (std::size_t s = 0; s < ns; ++s) {
      result[pending[a[s]]] = s;
      done[a[s]] = true;
    }
    std::vector<std::size_t> next;
    for (std::size_t k = 0; k < pending.size(); ++k) {
      if (!done[k]) next.push_back(pending[k]);
    }
    pending = std::move(next);
  }
  return result;
}

inline MatchSet match_components(const InfluenceTable& teacher_inf, const SimilarityMatrix& sim,
                                 const MatchOptions& options = {}) {
  require(options.soft_k >= 1, ErrorCode::invalid_argument, "soft top-k needs k >= 1");
  require(options.soft_temperature > 0.0, ErrorCode::invalid_argument, "soft top-k temperature must be > 0");
  MatchSet out;
  out.options = options;

  std::vector<bool> active(sim.teacher.size(), true);
  if (options.top_k > 0 && options.top_k < sim.teacher.size()) {
    std::vector<std::size_t> order(sim.teacher.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return teacher_inf.of(sim.teacher[a]) > teacher_inf.of(sim.teacher[b]);
    });
    active.assign(sim.teacher.size(), false);
    for (std::size_t k = 0; k < options.top_k; ++k) active[order[k]] = true;
  }

  for (ComponentKind kind : {ComponentKind::attention_head, ComponentKind::mlp}) {
    std::vector<std::size_t> ts;
    std::vector<std::size_t> ss;
    for (std::size_t i = 0; i < sim.teacher.size(); ++i) {
      if (active[i] && sim.teacher[i].kind == kind) ts.push_back(i);
    }
    if (ts.empty()) continue;
    for (std::size_t j = 0; j < sim.student.size(); ++j) {
      if (sim.student[j].kind == kind) ss.push_back(j);
    }
    // Canonical (layer, head) order so lower indices win ties.
    std::stable_sort(ss.begin(), ss.end(), [&](std::size_t a, std::size_t b) { return sim.student[a] < sim.student[b]; });
    if (ss.empty()) {
      fail(ErrorCode::unmatched_kind, std::string("student has no ") +
                                          (kind == ComponentKind::mlp ? "MLP" : "attention head") +
                                          " components to match");
    }

    switch (options.strategy) {
      case MatchStrategy::greedy:
        for (std::size_t t : ts) {
          std::size_t best = ss[0];
          for (std::size_t s : ss) {
            if (sim.effective(t, s) > sim.effective(t, best)) best = s;
          }
          out.matches.push_back({t, {{best, sim.effective(t, best), 1.0}}});
        }
        break;
      case MatchStrategy::hungarian: {
        std::vector<std::vector<double>> w(ts.size(), std::vector<double>(ss.size()));
        for (std::size_t a = 0; a < ts.size(); ++a) {
          for (std::size_t b = 0; b < ss.size(); ++b) w[a][b] = sim.effective(ts[a], ss[b]);
        }
        const auto assign = hungarian_rounds(w);
        for (std::size_t a = 0; a < ts.size(); ++a) {
          const std::size_t s = ss[assign[a]];
          out.matches.push_back({ts[a], {{s, sim.effective(ts[a], s), 1.0}}});
        }
        break;
      }
      case MatchStrategy::soft_topk:
        for (std::size_t t : ts) {
          auto order = ss;
          std::stable_sort(order.begin(), order.end(),
                           [&](std::size_t a, std::size_t b) { return sim.effective(t, a) > sim.effective(t, b); });
          order.resize(std::min(options.soft_k, order.size()));
          std::vector<double> scores;
          for (std::size_t s : order) scores.push_back(sim.effective(t, s));
          const auto w = softmax_with_temperature(scores, options.soft_temperature);
          TeacherMatch m{t, {}};
          for (std::size_t k = 0; k < order.size(); ++k) m.candidates.push_back({order[k], scores[k], w[k]});
          out.matches.push_back(std::move(m));
        }
        break;
    }
  }
  std::sort(out.matches.begin(), out.matches.end(),
            [](const TeacherMatch& a, const TeacherMatch& b) { return a.teacher < b.teacher; });
  return out;
}

// -------------------------------------------------------------------- score

struct PairRecord {
  ComponentId teacher;
  ComponentId student;
  double similarity = 0.0;
  double teacher_influence = 0.0;
  double student_influence = 0.0;
  double weight = 1.0;
  double contribution = 0.0;  // weight * S * (1 - |I_T - I_S|)
};

struct AlignmentReport {
  double score = 0.0;
  std::size_t n_matched = 0;
  std::vector<PairRecord> pairs;
  Normalization normalization = Normalization::max;
  MatchStrategy strategy = MatchStrategy::greedy;
  std::string teacher_id;
  std::string student_id;
  std::string dataset_hash;
  std::string timestamp;
};

// Recomputes the score from the per-pair records.
inline double score_from_pairs(const std::vector<PairRecord>& pairs, std::size_t n_matched) {
  require(n_matched > 0, ErrorCode::invalid_argument, "empty match set");
  double sum = 0.0;
  for (const auto& p : pairs) {
    sum += p.weight * p.similarity * (1.0 - std::abs(p.teacher_influence - p.student_influence));
  }
  return sum / static_cast<double>(n_matched);
}

inline AlignmentReport alignment_score(const MatchSet& matches, const SimilarityMatrix& sim,
                                       const InfluenceTable& teacher_inf, const InfluenceTable& student_inf) {
  require(!matches.matches.empty(), ErrorCode::invalid_argument, "empty match set");
  require(teacher_inf.normalization == student_inf.normalization, ErrorCode::invalid_argument,
          "influences must share a normalization scheme");
  AlignmentReport r;
  r.normalization = teacher_inf.normalization;
  r.strategy = matches.options.strategy;
  r.dataset_hash = teacher_inf.dataset_hash;
  for (const auto& m : matches.matches) {
    const ComponentId t = sim.teacher[m.teacher];
    const double it = teacher_inf.of(t);
    for (const auto& c : m.candidates) {
      PairRecord p;
      p.teacher = t;
      p.student = sim.student[c.student];
      p.similarity = c.similarity;
      p.teacher_influence = it;
      p.student_influence = student_inf.of(p.student);
      p.weight = c.weight;
      p.contribution = p.weight * p.similarity * (1.0 - std::abs(p.teacher_influence - p.student_influence));
      r.pairs.push_back(p);
    }
  }
  r.n_matched = matches.matches.size();
  r.score = score_from_pairs(r.pairs, r.n_matched);
  return r;
}

inline nlohmann::json report_to_json(const AlignmentReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) {
    pairs.push_back({{"teacher", to_string(p.teacher)},
                     {"student", to_string(p.student)},
                     {"similarity", p.similarity},
                     {"teacher_influence", p.teacher_influence},
                     {"student_influence", p.student_influence},
                     {"weight", p.weight},
                     {"contribution", p.contribution}});
  }
  return {{"A", r.score},
          {"n_matched", r.n_matched},
          {"normalization", normalization_name(r.normalization)},
          {"strategy", strategy_name(r.strategy)},
          {"teacher", r.teacher_id},
          {"student", r.student_id},
          {"dataset_hash", r.dataset_hash},
          {"timestamp", r.timestamp},
          {"pairs", pairs}};
}

// ------------------------------------------------------------ model profile

// Everything the score needs from one model on one task. Variants re-use
// the raw drops and summaries.
struct ModelProfile {
  std::string model_id;
  std::vector<ComponentId> components;
  std::vector<double> raw_drop;
  double base_mean = 0.0;
  std::string dataset_hash;
  ModelSummaries summaries;

  InfluenceTable influence(Normalization norm) const {
    return make_influence_table(components, raw_drop, norm, base_mean, dataset_hash);
  }
};

struct ProfileOptions {
  HeadSite head_site = HeadSite::head_out;
  RunOptions run;
};

// Offset applied to example indices of the corrupted set so perturbation
// streams never coincide with those of the clean set.
inline constexpr std::size_t kCorruptedStream = std::size_t{1} << 32;

inline ModelProfile build_profile(const ModelBundle& model, const TaskDataset& dataset,
                                  const TaskDataset& corrupted, const ProfileOptions& options = {}) {
  RunOptions corrupted_run = options.run;
  if (options.run.perturb) {
    corrupted_run.perturb = [f = options.run.perturb](std::size_t i) { return f(i + kCorruptedStream); };
  }
  const auto means = compute_corrupted_means(model, corrupted, component_output_hooks(model.config), corrupted_run);
  ModelProfile p;
  p.model_id = model.name;
  p.components = model.config.components();
  p.base_mean = baseline_scores(model, dataset, options.run).mean;
  p.dataset_hash = dataset.content_hash;
  for (const auto& c : p.components) {
    p.raw_drop.push_back(p.base_mean - ablate_and_score(model, dataset, c, means, options.run).mean);
  }
  p.summaries = summarize_components(model, dataset, options.head_site, options.run);
  return p;
}

inline AlignmentReport align_profiles(const ModelProfile& teacher, const ModelProfile& student,
                                      Normalization norm, const MatchOptions& match, std::size_t threads = 1) {
  require(teacher.dataset_hash == student.dataset_hash, ErrorCode::invalid_argument,
          "teacher and student profiles were built on different datasets");
  const auto ti = teacher.influence(norm);
  const auto si = student.influence(norm);
  const auto sim = similarity_matrix(teacher.summaries, student.summaries, threads);
  auto report = alignment_score(match_components(ti, sim, match), sim, ti, si);
  report.teacher_id = teacher.model_id;
  report.student_id = student.model_id;
  return report;
}

struct VariantScore {
  Normalization normalization;
  MatchStrategy strategy;
  double score = 0.0;
};

inline std::vector<VariantScore> all_variants(const ModelProfile& teacher, const ModelProfile& student,
                                              const MatchOptions& base = {}) {
  std::vector<VariantScore> out;
  for (auto n : {Normalization::max, Normalization::l1, Normalization::l2}) {
    for (auto s : {MatchStrategy::greedy, MatchStrategy::hungarian, MatchStrategy::soft_topk}) {
      MatchOptions m = base;
      m.strategy = s;
      out.push_back({n, s, align_profiles(teacher, student, n, m).score});
    }
  }
  return out;
}

// ------------------------------------------------------------------- noise

// Adds sigma * z to every component output, with z fixed per
// (seed, example, component, element) so curves share random numbers.
inline PerturbationFactory gaussian_noise(double sigma, std::uint64_t seed) {
  return [sigma, seed](std::size_t example) -> Perturbation {
    return [sigma, seed, example](const ComponentId& c, Matrix& out) {
      const std::uint64_t code = (c.is_mlp() ? 0x10000u : 0u) | (c.layer << 8) | c.head;
      Rng rng(derive_seed(seed, example, code, 0x6e6f));
      for (double& v : out.data) v += sigma * rng.normal();
    };
  };
}

struct NoisePoint {
  double sigma = 0.0;
  std::vector<double> scores;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
};

struct NoiseCurve {
  std::vector<NoisePoint> points;
  double noiseless = 0.0;
  std::size_t plateau_start = 0;  // first index of the plateau
  double spearman_pre_plateau = 0.0;
};

// First index from which every later mean stays within `tolerance` of the
// final mean.
inline std::size_t detect_plateau(const std::vector<double>& means, double tolerance) {
  if (means.empty()) return 0;
  std::size_t start = means.size() - 1;
  while (start > 0 && std::abs(means[start - 1] - means.back()) <= tolerance) --start;
  return start;
}

struct NoiseOptions {
  Normalization normalization = Normalization::max;
  MatchOptions match;
  HeadSite head_site = HeadSite::head_out;
  double plateau_tolerance = 0.01;
  std::size_t threads = 1;
};

inline NoiseCurve noise_injection_experiment(const ModelBundle& teacher, const ModelBundle& student,
                                             const TaskDataset& dataset, const TaskDataset& corrupted,
                                             const std::vector<double>& sigmas,
                                             const std::vector<std::uint64_t>& seeds,
                                             const NoiseOptions& options = {}) {
  require(!sigmas.empty() && !seeds.empty(), ErrorCode::invalid_argument, "sigma grid and seeds must be non-empty");
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    require(sigmas[i] >= 0.0 && (i == 0 || sigmas[i] > sigmas[i - 1]), ErrorCode::invalid_argument,
            "sigma grid must be non-negative and ascending");
  }
  ProfileOptions po;
  po.head_site = options.head_site;
  po.run.threads = options.threads;
  const auto teacher_profile = build_profile(teacher, dataset, corrupted, po);
  const auto clean_student = build_profile(student, dataset, corrupted, po);

  NoiseCurve curve;
  curve.noiseless = align_profiles(teacher_profile, clean_student, options.normalization, options.match).score;
  std::vector<double> means;
  for (double sigma : sigmas) {
    NoisePoint pt;
    pt.sigma = sigma;
    for (auto seed : seeds) {
      ProfileOptions noisy = po;
      noisy.run.perturb = gaussian_noise(sigma, seed);
      const auto sp = build_profile(student, dataset, corrupted, noisy);
      double a = 0.0;
      try {
        a = align_profiles(teacher_profile, sp, options.normalization, options.match).score;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::degenerate_influence) throw;
      }
      pt.scores.push_back(a);
    }
    pt.mean = mean_of(pt.scores);
    double ss = 0.0;
    for (double s : pt.scores) ss += (s - pt.mean) * (s - pt.mean);
    pt.stddev = pt.scores.size() > 1 ? std::sqrt(ss / static_cast<double>(pt.scores.size() - 1)) : 0.0;
    means.push_back(pt.mean);
    curve.points.push_back(std::move(pt));
  }
  curve.plateau_start = detect_plateau(means, options.plateau_tolerance);
  std::size_t end = std::max<std::size_t>(curve.plateau_start + 1, std::min<std::size_t>(3, means.size()));
  std::vector<double> xs(sigmas.begin(), sigmas.begin() + static_cast<std::ptrdiff_t>(end));
  std::vector<double> ys(means.begin(), means.begin() + static_cast<std::ptrdiff_t>(end));
  curve.spearman_pre_plateau = xs.size() >= 2 ? spearman_rho(xs, ys) : 0.0;
  return curve;
}

// --------------------------------------------------------------- robustness

struct RobustnessSummary {
  BootstrapSummary drop;  // percentage points
  std::vector<double> per_component_drop_pct;
  double frac_above_10 = 0.0;
  double frac_above_20 = 0.0;
  std::size_t n_components = 0;
};

// Per-component drops in percent of the baseline, clamped at zero.
inline std::vector<double> drop_percentages(const std::vector<double>& raw_drop, double base_mean) {
  if (base_mean == 0.0) fail(ErrorCode::undefined_baseline, "percentage drop is undefined for a zero baseline");
  std::vector<double> out;
  for (double d : raw_drop) out.push_back(std::max(0.0, 100.0 * d / std::abs(base_mean)));
  return out;
}

inline RobustnessSummary robustness_summary(const std::vector<double>& drop_pct, std::size_t n_resamples = 10000,
                                            double level = 0.95, std::uint64_t seed = 0) {
  RobustnessSummary r;
  r.per_component_drop_pct = drop_pct;
  r.n_components = drop_pct.size();
  r.drop = bootstrap_ci(drop_pct, n_resamples, level, seed);
  for (double d : drop_pct) {
    if (d > 10.0) r.frac_above_10 += 1.0;
    if (d > 20.0) r.frac_above_20 += 1.0;
  }
  r.frac_above_10 /= static_cast<double>(drop_pct.size());
  r.frac_above_20 /= static_cast<double>(drop_pct.size());
  return r;
}

inline RobustnessSummary robustness_summary(const ModelProfile& profile, std::size_t n_resamples = 10000,
                                            double level = 0.95, std::uint64_t seed = 0) {
  return robustness_summary(drop_percentages(profile.raw_drop, profile.base_mean), n_resamples, level, seed);
}

struct BrittlenessInput {
  double compression = 0.0;
  double teacher_drop = 0.0;
  double student_drop = 0.0;
};

struct BrittlenessResult {
  double delta_pp = 0.0;
  double beta = 0.0;
  double per_tenth = 0.0;
};

inline std::vector<BrittlenessResult> compression_brittleness(const std::vector<BrittlenessInput>& pairs) {
  std::vector<BrittlenessResult> out;
  for (const auto& p : pairs) {
    require(p.compression > 0.0 && p.compression < 1.0, ErrorCode::invalid_argument,
            "compression must lie in (0,1), got " + std::to_string(p.compression));
    BrittlenessResult r;
    r.delta_pp = p.student_drop - p.teacher_drop;
    r.beta = r.delta_pp / p.compression;
    r.per_tenth = r.beta / 10.0;
    out.push_back(r);
  }
  return out;
}

}  // namespace circuit_align
