#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "circuit_align/alignment.hpp"
#include "circuit_align/error.hpp"
#include "circuit_align/forward.hpp"
#include "circuit_align/intervention.hpp"
#include "circuit_align/rng.hpp"
#include "circuit_align/tensor_math.hpp"

namespace circuit_align {

// ------------------------------------------------------------- attribution

// Contributions to the final-position logit difference, decomposed over
// residual writes with the final layer norm frozen at clean statistics.
struct AttributionTable {
  std::size_t n_layers = 0;
  std::size_t positions = 0;
  std::vector<double> mlp;   // mean over examples, final position
  std::vector<double> attn;  // whole attention block per layer
  double embedding = 0.0;
  double ln_bias = 0.0;
  double logit_diff = 0.0;  // mean Δℓ of the clean run
  // mlp_by_position[l][p]: prompts right-aligned to the shortest.
  std::vector<std::vector<double>> mlp_by_position;

  double reconstructed() const {
    return embedding + ln_bias + std::accumulate(mlp.begin(), mlp.end(), 0.0) +
           std::accumulate(attn.begin(), attn.end(), 0.0);
  }

  double mlp_share(std::size_t layer) const {
    double total = std::abs(embedding);
    for (double v : mlp) total += std::abs(v);
    for (double v : attn) total += std::abs(v);
    return total == 0.0 ? 0.0 : std::abs(mlp.at(layer)) / total;
  }
};

namespace detail {

struct FrozenLn {
  double mean = 0.0;
  double inv_std = 0.0;
};

inline FrozenLn freeze_ln(std::span<const double> x, double eps) {
  FrozenLn f;
  for (double v : x) f.mean += v;
  f.mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - f.mean) * (v - f.mean);
  var /= static_cast<double>(x.size());
  f.inv_std = 1.0 / std::sqrt(var + eps);
  return f;
}

// Linear part of the frozen final layer norm, projected on `direction`.
inline double frozen_projection(const ModelBundle& model, const FrozenLn& ln, std::span<const double> direction,
                                std::span<const double> write) {
  double mean = 0.0;
  for (double v : write) mean += v;
  mean /= static_cast<double>(write.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < write.size(); ++k) {
    acc += direction[k] * static_cast<double>(model.weights.lnf_w[k]) * (write[k] - mean) * ln.inv_std;
  }
  return acc;
}

inline std::vector<double> unembed_direction(const ModelBundle& model, int correct, int incorrect) {
  const std::size_t d = model.config.d_model;
  std::vector<double> dir(d);
  for (std::size_t k = 0; k < d; ++k) {
    dir[k] = static_cast<double>(model.weights.w_u[static_cast<std::size_t>(correct) * d + k]) -
             static_cast<double>(model.weights.w_u[static_cast<std::size_t>(incorrect) * d + k]);
  }
  return dir;
}

inline std::vector<double> row_difference(const Matrix& a, const Matrix& b, std::size_t r) {
  std::vector<double> out(a.cols);
  for (std::size_t k = 0; k < a.cols; ++k) out[k] = a(r, k) - b(r, k);
  return out;
}

}  // namespace detail

inline AttributionTable mlp_attribution(const ModelBundle& model, const TaskDataset& dataset,
                                        const RunOptions& run = {}) {
  require(!dataset.examples.empty(), ErrorCode::invalid_argument, "dataset is empty");
  const auto& c = model.config;
  HookSet hooks;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    hooks.add(hook(l, Site::resid_pre));
    hooks.add(hook(l, Site::resid_mid));
    hooks.add(hook(l, Site::resid_post));
  }
  std::size_t positions = dataset.examples[0].prompt_tokens.size();
  for (const auto& ex : dataset.examples) positions = std::min(positions, ex.prompt_tokens.size());

  struct Row {
    std::vector<double> mlp, attn;
    std::vector<std::vector<double>> mlp_pos;
    double embedding = 0.0, ln_bias = 0.0, diff = 0.0;
  };
  std::vector<Row> rows(dataset.size());
  parallel_for(dataset.size(), run.threads, [&](std::size_t i) {
    const auto& ex = dataset.examples[i];
    ForwardOptions opts;
    opts.hooks = hooks;
    const auto result = forward(model, ex.prompt_tokens, opts);
    const auto& cache = result.cache;
    const std::size_t P = ex.prompt_tokens.size();
    const std::size_t last = P - 1;
    const auto dir = detail::unembed_direction(model, ex.correct_token, ex.incorrect_token);
    const Matrix& final_resid = cache.at(hook(c.n_layers - 1, Site::resid_post));
    Row row;
    row.diff = logit_difference(result.logits, ex.correct_token, ex.incorrect_token);
    std::vector<detail::FrozenLn> ln(P);
    for (std::size_t p = 0; p < P; ++p) ln[p] = detail::freeze_ln(final_resid.row(p), c.layernorm_epsilon);
    for (std::size_t k = 0; k < c.d_model; ++k) row.ln_bias += dir[k] * static_cast<double>(model.weights.lnf_b[k]);
    row.embedding = detail::frozen_projection(model, ln[last], dir, cache.at(hook(0, Site::resid_pre)).row(last));
    row.mlp_pos.assign(c.n_layers, std::vector<double>(positions, 0.0));
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const Matrix& pre = cache.at(hook(l, Site::resid_pre));
      const Matrix& mid = cache.at(hook(l, Site::resid_mid));
      const Matrix& post = cache.at(hook(l, Site::resid_post));
      row.attn.push_back(detail::frozen_projection(model, ln[last], dir, detail::row_difference(mid, pre, last)));
      row.mlp.push_back(detail::frozen_projection(model, ln[last], dir, detail::row_difference(post, mid, last)));
      for (std::size_t q = 0; q < positions; ++q) {
        const std::size_t p = P - positions + q;
        row.mlp_pos[l][q] = detail::frozen_projection(model, ln[p], dir, detail::row_difference(post, mid, p));
      }
    }
    rows[i] = std::move(row);
  });

  AttributionTable t;
  t.n_layers = c.n_layers;
  t.positions = positions;
  t.mlp.assign(c.n_layers, 0.0);
  t.attn.assign(c.n_layers, 0.0);
  t.mlp_by_position.assign(c.n_layers, std::vector<double>(positions, 0.0));
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (const auto& r : rows) {
    t.embedding += r.embedding * inv;
    t.ln_bias += r.ln_bias * inv;
    t.logit_diff += r.diff * inv;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      t.mlp[l] += r.mlp[l] * inv;
      t.attn[l] += r.attn[l] * inv;
      for (std::size_t q = 0; q < positions; ++q) t.mlp_by_position[l][q] += r.mlp_pos[l][q] * inv;
    }
  }
  return t;
}

// ------------------------------------------------------- MLP similarity

struct MlpSimilarity {
  std::vector<ComponentId> teacher;
  std::vector<ComponentId> student;
  Matrix values;
  std::vector<std::vector<bool>> rank_deficient;
};

inline MlpSimilarity mlp_similarity_matrix(const ModelSummaries& teacher, const ModelSummaries& student) {
  MlpSimilarity m;
  std::vector<const ComponentSummary*> ts, ss;
  for (const auto& c : teacher.components) {
    if (c.id.is_mlp()) ts.push_back(&c);
  }
  for (const auto& c : student.components) {
    if (c.id.is_mlp()) ss.push_back(&c);
  }
  m.values = Matrix(ts.size(), ss.size());
  m.rank_deficient.assign(ts.size(), std::vector<bool>(ss.size(), false));
  for (auto* t : ts) m.teacher.push_back(t->id);
  for (auto* s : ss) m.student.push_back(s->id);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t j = 0; j < ss.size(); ++j) {
      bool flag = false;
      m.values(i, j) = mlp_basis_similarity(ts[i]->basis, ss[j]->basis, &flag);
      m.rank_deficient[i][j] = flag;
    }
  }
  return m;
}

// ------------------------------------------------------------------ probes

enum class ProbeTarget { ith_numeral, next_numeral, full_sequence, previous_numeral, prior_occurrence_binary };
enum class ProbeSource { resid_post, resid_mid, head_values };

inline std::string_view probe_target_name(ProbeTarget t) {
  switch (t) {
    case ProbeTarget::ith_numeral: return "ith_numeral";
    case ProbeTarget::next_numeral: return "next_numeral";
    case ProbeTarget::full_sequence: return "full_sequence";
    case ProbeTarget::previous_numeral: return "previous_numeral";
    case ProbeTarget::prior_occurrence_binary: return "prior_occurrence_binary";
  }
  return "?";
}

inline ProbeTarget parse_probe_target(std::string_view s) {
  for (auto t : {ProbeTarget::ith_numeral, ProbeTarget::next_numeral, ProbeTarget::full_sequence,
                 ProbeTarget::previous_numeral, ProbeTarget::prior_occurrence_binary}) {
    if (probe_target_name(t) == s) return t;
  }
  fail(ErrorCode::invalid_argument, "unknown probe target '" + std::string(s) + "'");
}

struct ProbeOptions {
  double train_fraction = 0.8;
  std::size_t epochs = 20;
  double lr = 1e-3;
  double weight_decay = 0.0;
  bool balanced = true;
  std::size_t batch_size = 0;  // 0: full batch
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double score = 0.0;              // AUROC for two classes, macro accuracy otherwise
  double permutation_score = 0.0;  // same protocol with shuffled training labels
  double chance = 0.0;
  std::size_t n_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  bool binary = false;
};

// Area under the ROC curve with ties counted as half.
inline double auroc(std::span<const double> scores, std::span<const int> positive) {
  require(scores.size() == positive.size(), ErrorCode::invalid_argument, "auroc length mismatch");
  const auto ranks = average_ranks(scores);
  double n_pos = 0.0;
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (positive[i] != 0) {
      n_pos += 1.0;
      rank_sum += ranks[i];
    }
  }
  const double n_neg = static_cast<double>(scores.size()) - n_pos;
  require(n_pos > 0.0 && n_neg > 0.0, ErrorCode::resample_error, "auroc needs both classes");
  return (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

namespace detail {

struct LinearModel {
  std::size_t k = 0, d = 0;
  std::vector<double> w;  // k x d
  std::vector<double> b;

  std::vector<double> logits(std::span<const double> x) const {
    std::vector<double> z(b);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < d; ++j) z[c] += w[c * d + j] * x[j];
    }
    return z;
  }
};

// Adam on softmax cross-entropy from a zero start; batch order
// is reshuffled every epoch from the probe seed.
inline LinearModel train_softmax(const Matrix& x, const std::vector<std::size_t>& y, std::size_t k,
                                 const ProbeOptions& o, std::uint64_t stream) {
  LinearModel m{k, x.cols, std::vector<double>(k * x.cols, 0.0), std::vector<double>(k, 0.0)};
  const std::size_t np = m.w.size() + m.b.size();
  std::vector<double> mom(np, 0.0), vel(np, 0.0), grad(np);
  constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const std::size_t batch = o.batch_size == 0 ? x.rows : std::min(o.batch_size, x.rows);
  std::vector<std::size_t> order(x.rows);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(o.seed, stream, 0x62617463, 0));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < o.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < x.rows; start += batch) {
      const std::size_t stop = std::min(x.rows, start + batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t q = start; q < stop; ++q) {
        const std::size_t i = order[q];
        auto p = softmax_with_temperature(m.logits(x.row(i)), 1.0);
        p[y[i]] -= 1.0;
        for (std::size_t c = 0; c < k; ++c) {
          for (std::size_t j = 0; j < x.cols; ++j) grad[c * x.cols + j] += p[c] * x(i, j);
          grad[m.w.size() + c] += p[c];
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      for (std::size_t q = 0; q < np; ++q) {
        grad[q] *= inv;
        if (q < m.w.size()) grad[q] += o.weight_decay * m.w[q];
      }
      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (std::size_t q = 0; q < np; ++q) {
        mom[q] = beta1 * mom[q] + (1.0 - beta1) * grad[q];
        vel[q] = beta2 * vel[q] + (1.0 - beta2) * grad[q] * grad[q];
        const double delta = o.lr * (mom[q] / c1) / (std::sqrt(vel[q] / c2) + eps);
        if (q < m.w.size()) m.w[q] -= delta;
        else m.b[q - m.w.size()] -= delta;
      }
    }
  }
  return m;
}

inline double evaluate_probe(const LinearModel& m, const Matrix& x, const std::vector<std::size_t>& y, std::size_t k) {
  if (k == 2) {
    std::vector<double> score(x.rows);
    std::vector<int> pos(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) {
      const auto z = m.logits(x.row(i));
      score[i] = z[1] - z[0];
      pos[i] = y[i] == 1 ? 1 : 0;
    }
    return auroc(score, pos);
  }
  std::vector<double> hit(k, 0.0), count(k, 0.0);
  for (std::size_t i = 0; i < x.rows; ++i) {
    const auto z = m.logits(x.row(i));
    const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    count[y[i]] += 1.0;
    if (best == y[i]) hit[y[i]] += 1.0;
  }
  double macro = 0.0;
  for (std::size_t c = 0; c < k; ++c) macro += hit[c] / count[c];
  return macro / static_cast<double>(k);
}

}  // namespace detail

namespace detail {

struct ProbeRun {
  double score = 0.0;
  std::size_t n_classes = 0, n_train = 0, n_val = 0;
};

inline ProbeRun run_probe_protocol(const Matrix& features, const std::vector<long>& labels, const ProbeOptions& options,
                                   std::uint64_t stream) {
  std::map<long, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  require(by_class.size() >= 2, ErrorCode::resample_error, "probe needs at least two classes");
  const std::size_t k = by_class.size();

  Rng rng(derive_seed(options.seed, stream, 0x73706c74, 0));
  std::size_t per_class = labels.size();
  for (auto& [_, idx] : by_class) per_class = std::min(per_class, idx.size());
  std::vector<std::size_t> train_idx, val_idx, train_y, val_y;
  std::size_t cls = 0;
  for (auto& [label, idx] : by_class) {
    rng.shuffle(idx);
    if (options.balanced) idx.resize(per_class);
    const auto n_train = static_cast<std::size_t>(std::llround(options.train_fraction * static_cast<double>(idx.size())));
    if (n_train == 0 || n_train >= idx.size()) {
      fail(ErrorCode::resample_error, "class " + std::to_string(label) + " is absent from a split (" +
                                          std::to_string(idx.size()) + " examples)");
    }
    for (std::size_t q = 0; q < idx.size(); ++q) {
      (q < n_train ? train_idx : val_idx).push_back(idx[q]);
      (q < n_train ? train_y : val_y).push_back(cls);
    }
    ++cls;
  }

  const std::size_t d = features.cols;
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i : train_idx) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += features(i, j);
  }
  for (double& m : mean) m /= static_cast<double>(train_idx.size());
  for (std::size_t i : train_idx) {
    for (std::size_t j = 0; j < d; ++j) sd[j] += (features(i, j) - mean[j]) * (features(i, j) - mean[j]);
  }
  for (double& s : sd) {
    s = std::sqrt(s / static_cast<double>(train_idx.size()));
    if (!(s > 1e-12)) s = 1.0;
  }
  auto gather = [&](const std::vector<std::size_t>& idx) {
    Matrix x(idx.size(), d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t j = 0; j < d; ++j) x(r, j) = (features(idx[r], j) - mean[j]) / sd[j];
    }
    return x;
  };
  const Matrix xt = gather(train_idx);
  const Matrix xv = gather(val_idx);
  ProbeRun r;
  r.n_classes = k;
  r.n_train = train_idx.size();
  r.n_val = val_idx.size();
  r.score = evaluate_probe(train_softmax(xt, train_y, k, options, stream), xv, val_y, k);
  return r;
}

}  // namespace detail

// Balanced per-class subsampling, stratified split, standardization from
// the training split, then Adam. The permutation control runs
// the same protocol after shuffling every label.
inline ProbeResult train_linear_probe(const Matrix& features, const std::vector<long>& labels,
                                      const ProbeOptions& options = {}) {
  require(features.rows == labels.size(), ErrorCode::invalid_argument, "feature/label count mismatch");
  require(options.epochs >= 1, ErrorCode::invalid_argument, "probe needs epochs >= 1");
  require(options.train_fraction > 0.0 && options.train_fraction < 1.0, ErrorCode::invalid_argument,
          "train fraction must lie in (0,1)");
  require(features.all_finite(), ErrorCode::domain_error, "probe features contain NaN/Inf");
  const auto real = detail::run_probe_protocol(features, labels, options, 0);
  auto shuffled = labels;
  Rng perm(derive_seed(options.seed, 0x7065726d, 0, 0));
  perm.shuffle(shuffled);
  const auto control = detail::run_probe_protocol(features, shuffled, options, 1);

  ProbeResult r;
  r.n_classes = real.n_classes;
  r.binary = real.n_classes == 2;
  r.chance = r.binary ? 0.5 : 1.0 / static_cast<double>(real.n_classes);
  r.n_train = real.n_train;
  r.n_val = real.n_val;
  r.score = real.score;
  r.permutation_score = control.score;
  return r;
}

// ±3 sigma binomial band around chance for n validation samples.
inline double chance_band(double chance, std::size_t n) {
  return 3.0 * std::sqrt(chance * (1.0 - chance) / static_cast<double>(std::max<std::size_t>(1, n)));
}

struct ProbeSpec {
  ProbeTarget target = ProbeTarget::next_numeral;
  ProbeSource source = ProbeSource::resid_post;
  ComponentId head;            // for head_values
  std::size_t ith = 0;         // for ith_numeral
  std::size_t layer_begin = 0;
  std::size_t layer_end = 0;   // exclusive; 0 means every layer
  ProbeOptions options;
};

struct ProbeCurve {
  std::vector<std::size_t> layers;
  std::vector<ProbeResult> points;
};

// Features and labels for one layer. Sequence targets read the final
// position; the binary prior-occurrence target reads every position from 1.
inline void probe_dataset(const ModelBundle& model, const TaskDataset& dataset, const ProbeSpec& spec,
                          std::size_t layer, Matrix& features, std::vector<long>& labels,
                          const RunOptions& run = {}) {
  const HookPoint h = spec.source == ProbeSource::resid_post  ? hook(layer, Site::resid_post)
                      : spec.source == ProbeSource::resid_mid ? hook(layer, Site::resid_mid)
                                                              : hook(spec.head.layer, Site::head_v, spec.head.head);
  if (spec.source == ProbeSource::head_values) model.config.check_component(spec.head);
  std::vector<std::vector<std::vector<double>>> rows(dataset.size());
  std::vector<std::vector<long>> ys(dataset.size());
  parallel_for(dataset.size(), run.threads, [&](std::size_t i) {
    const auto& ex = dataset.examples[i];
    const std::size_t last = ex.prompt_tokens.size() - 1;
    ForwardOptions opts;
    opts.hooks.add(h);
    const auto cache = forward(model, ex.prompt_tokens, opts).cache;
    const Matrix& a = cache.at(h);
    auto take = [&](std::size_t p, long y) {
      rows[i].emplace_back(a.row(p).begin(), a.row(p).end());
      ys[i].push_back(y);
    };
    auto meta_positions = [&]() {
      require(ex.metadata.contains("sequence_positions"), ErrorCode::invalid_argument,
              "probe target needs sequence metadata");
      return ex.metadata["sequence_positions"].get<std::vector<std::size_t>>();
    };
    switch (spec.target) {
      case ProbeTarget::next_numeral: take(last, ex.correct_token); break;
      case ProbeTarget::previous_numeral: take(last, ex.incorrect_token); break;
      case ProbeTarget::ith_numeral: {
        const auto pos = meta_positions();
        require(spec.ith < pos.size(), ErrorCode::invalid_argument, "ith_numeral index out of range");
        take(last, ex.prompt_tokens[pos[spec.ith]]);
        break;
      }
      case ProbeTarget::full_sequence: {
        require(ex.metadata.contains("start"), ErrorCode::invalid_argument, "probe target needs sequence metadata");
        take(last, ex.metadata["start"].get<long>());
        break;
      }
      case ProbeTarget::prior_occurrence_binary:
        for (std::size_t p = 1; p <= last; ++p) {
          const bool seen = std::find(ex.prompt_tokens.begin(), ex.prompt_tokens.begin() + static_cast<long>(p),
                                      ex.prompt_tokens[p]) != ex.prompt_tokens.begin() + static_cast<long>(p);
          take(p, seen ? 1 : 0);
        }
        break;
    }
  });
  std::size_t total = 0;
  for (const auto& r : rows) total += r.size();
  const std::size_t width = rows[0].front().size();
  features = Matrix(total, width);
  labels.clear();
  std::size_t r = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t q = 0; q < rows[i].size(); ++q, ++r) {
      std::copy(rows[i][q].begin(), rows[i][q].end(), features.row(r).begin());
      labels.push_back(ys[i][q]);
    }
  }
}

inline ProbeCurve probe_layer_curve(const ModelBundle& model, const TaskDataset& dataset, const ProbeSpec& spec,
                                    const RunOptions& run = {}) {
  const std::size_t end = spec.layer_end == 0 ? model.config.n_layers : spec.layer_end;
  require(spec.layer_begin < end && end <= model.config.n_layers, ErrorCode::invalid_argument,
          "probe layer range out of bounds");
  ProbeCurve curve;
  const std::size_t first = spec.source == ProbeSource::head_values ? spec.head.layer : spec.layer_begin;
  const std::size_t stop = spec.source == ProbeSource::head_values ? spec.head.layer + 1 : end;
  for (std::size_t l = first; l < stop; ++l) {
    Matrix x;
    std::vector<long> y;
    probe_dataset(model, dataset, spec, l, x, y, run);
    curve.layers.push_back(l);
    curve.points.push_back(train_linear_probe(x, y, spec.options));
  }
  return curve;
}

// ------------------------------------------------------ successor / copy

struct SuccessorCopy {
  double successor_pct = 0.0;
  double copy_pct = 0.0;
  std::size_t n = 0;
};

// Projects the head's final-position output through the frozen final layer
// norm (no bias) and the unembedding, then checks top-5 membership of the
// answer token and the last given token.
inline SuccessorCopy successor_copy_scores(const ModelBundle& model, const TaskDataset& dataset,
                                           const ComponentId& head, const RunOptions& run = {}) {
  require(head.is_head(), ErrorCode::invalid_argument, "successor/copy scores need an attention head");
  model.config.check_component(head);
  require(!dataset.examples.empty(), ErrorCode::invalid_argument, "dataset is empty");
  const auto& c = model.config;
  const HookPoint out_hook = output_hook(head);
  const HookPoint resid_hook = hook(c.n_layers - 1, Site::resid_post);
  std::vector<int> succ(dataset.size(), 0), copy(dataset.size(), 0);
  parallel_for(dataset.size(), run.threads, [&](std::size_t i) {
    const auto& ex = dataset.examples[i];
    const std::size_t last = ex.prompt_tokens.size() - 1;
    ForwardOptions opts;
    opts.hooks.add(out_hook);
    opts.hooks.add(resid_hook);
    const auto cache = forward(model, ex.prompt_tokens, opts).cache;
    const auto ln = detail::freeze_ln(cache.at(resid_hook).row(last), c.layernorm_epsilon);
    const auto write = cache.at(out_hook).row(last);
    double mean = 0.0;
    for (double v : write) mean += v;
    mean /= static_cast<double>(write.size());
    std::vector<double> normed(c.d_model);
    for (std::size_t k = 0; k < c.d_model; ++k) {
      normed[k] = (write[k] - mean) * ln.inv_std * static_cast<double>(model.weights.lnf_w[k]);
    }
    std::vector<double> logits(c.vocab_size, 0.0);
    for (std::size_t v = 0; v < c.vocab_size; ++v) {
      const float* row = model.weights.w_u.data() + v * c.d_model;
      for (std::size_t k = 0; k < c.d_model; ++k) logits[v] += normed[k] * static_cast<double>(row[k]);
    }
    for (const auto& t : top_k_logits(logits, 5)) {
      if (t.token == ex.correct_token) succ[i] = 1;
      if (t.token == ex.incorrect_token) copy[i] = 1;
    }
  });
  SuccessorCopy s;
  s.n = dataset.size();
  s.successor_pct = 100.0 * std::accumulate(succ.begin(), succ.end(), 0.0) / static_cast<double>(s.n);
  s.copy_pct = 100.0 * std::accumulate(copy.begin(), copy.end(), 0.0) / static_cast<double>(s.n);
  return s;
}

}  // namespace circuit_align
