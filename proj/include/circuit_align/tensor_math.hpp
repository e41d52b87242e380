#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "circuit_align/error.hpp"
#include "circuit_align/rng.hpp"

namespace circuit_align {

// Row-major dense matrix of 64-bit values. Statistics throughout the toolkit
// run on this type even when the model engine computes in 32-bit.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    require(data.size() == rows * cols, ErrorCode::invalid_argument,
            "matrix data length " + std::to_string(data.size()) + " != " +
                std::to_string(rows) + "x" + std::to_string(cols));
  }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
  }
};

struct PcaBasis {
  std::array<std::vector<double>, 3> components;
  std::array<double, 3> variances{};
  // Number of components carrying non-zero variance; the rest are padding.
  std::size_t rank = 0;
  bool rank_deficient = false;
};

struct BootstrapSummary {
  double mean = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_resamples = 0;
  double level = 0.95;
};

inline std::vector<double> softmax_with_temperature(std::span<const double> logits,
                                                    double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::invalid_argument,
          "softmax temperature must be finite and > 0");
  require(!logits.empty(), ErrorCode::invalid_argument, "softmax of empty vector");
  for (double v : logits) {
    require(std::isfinite(v), ErrorCode::invalid_argument, "softmax input is not finite");
  }
  const double peak = *std::max_element(logits.begin(), logits.end());
  std::vector<double> out(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp((logits[i] - peak) / temperature);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  require(p.size() == q.size() && !p.empty(), ErrorCode::invalid_argument,
          "kl_divergence needs equal-length non-empty vectors");
  const double sum_p = std::accumulate(p.begin(), p.end(), 0.0);
  const double sum_q = std::accumulate(q.begin(), q.end(), 0.0);
  require(std::abs(sum_p - 1.0) <= 1e-6 && std::abs(sum_q - 1.0) <= 1e-6,
          ErrorCode::invalid_argument, "kl_divergence inputs must sum to 1");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(p[i] >= 0.0 && q[i] >= 0.0, ErrorCode::invalid_argument,
            "kl_divergence inputs must be non-negative");
    if (p[i] == 0.0) continue;
    if (q[i] == 0.0) {
      fail(ErrorCode::domain_error,
           "kl_divergence support violation at index " + std::to_string(i));
    }
    total += p[i] * std::log(p[i] / q[i]);
  }
  return std::max(total, 0.0);
}

// cos(u, v) = u.v / sqrt(|u|^2 |v|^2). Writing the denominator as one square
// root makes cosine(u, u) exactly 1 in IEEE arithmetic.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
  require(u.size() == v.size(), ErrorCode::dimension_mismatch,
          "cosine_similarity length mismatch: " + std::to_string(u.size()) + " vs " +
              std::to_string(v.size()));
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  if (uu == 0.0 || vv == 0.0) {
    fail(ErrorCode::degenerate_input, "cosine_similarity of a zero-norm vector");
  }
  return std::clamp(dot / std::sqrt(uu * vv), -1.0, 1.0);
}

// Streaming covariance accumulator. Rows are shifted by the first row seen
// before accumulating sums to limit cancellation.
class CovarianceAccumulator {
 public:
  explicit CovarianceAccumulator(std::size_t dim)
      : dim_(dim), shift_(dim, 0.0), sum_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dim))),
        outer_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(dim),
                                     static_cast<Eigen::Index>(dim))) {}

  template <typename T>
  void add(std::span<const T> row) {
    require(row.size() == dim_, ErrorCode::dimension_mismatch, "covariance row width mismatch");
    if (count_ == 0) {
      for (std::size_t i = 0; i < dim_; ++i) shift_[i] = static_cast<double>(row[i]);
    }
    Eigen::VectorXd centered(static_cast<Eigen::Index>(dim_));
    for (std::size_t i = 0; i < dim_; ++i) {
      centered[static_cast<Eigen::Index>(i)] = static_cast<double>(row[i]) - shift_[i];
    }
    sum_ += centered;
    outer_.selfadjointView<Eigen::Lower>().rankUpdate(centered);
    ++count_;
  }

  std::size_t count() const { return count_; }
  std::size_t dim() const { return dim_; }

  // Unbiased (1/(n-1)) covariance.
  Eigen::MatrixXd covariance() const {
    require(count_ >= 2, ErrorCode::invalid_argument, "covariance needs at least 2 rows");
    const double n = static_cast<double>(count_);
    Eigen::MatrixXd full = outer_.selfadjointView<Eigen::Lower>();
    return (full - sum_ * sum_.transpose() / n) / (n - 1.0);
  }

 private:
  std::size_t dim_;
  std::size_t count_ = 0;
  std::vector<double> shift_;
  Eigen::VectorXd sum_;
  Eigen::MatrixXd outer_;
};

namespace detail {

inline void canonical_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (!v.empty() && v[best] < 0.0) {
    for (double& x : v) x = -x;
  }
}

}  // namespace detail

// Top three eigenvectors of a covariance matrix, descending eigenvalue.
// Directions whose eigenvalue is numerically zero are kept as orthonormal
// padding with zero variance and the basis is flagged rank-deficient.
inline PcaBasis pca_top3_from_covariance(const Eigen::MatrixXd& covariance) {
  const auto dim = static_cast<std::size_t>(covariance.rows());
  require(dim >= 3, ErrorCode::invalid_argument, "pca_top3 needs feature width >= 3");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(covariance);
  require(solver.info() == Eigen::Success, ErrorCode::domain_error,
          "covariance eigendecomposition failed");
  const Eigen::VectorXd& values = solver.eigenvalues();  // ascending
  const Eigen::MatrixXd& vectors = solver.eigenvectors();
  const double top = std::max(values[values.size() - 1], 0.0);
  const double tolerance = 1e-12 * std::max(1.0, top);

  PcaBasis basis;
  for (std::size_t k = 0; k < 3; ++k) {
    const Eigen::Index col = static_cast<Eigen::Index>(dim - 1 - k);
    std::vector<double> component(dim);
    for (std::size_t i = 0; i < dim; ++i) component[i] = vectors(static_cast<Eigen::Index>(i), col);
    double variance = values[col];
    if (variance <= tolerance) {
      variance = 0.0;
    } else {
      ++basis.rank;
    }
    detail::canonical_sign(component);
    basis.components[k] = std::move(component);
    basis.variances[k] = variance;
  }
  basis.rank_deficient = basis.rank < 3;
  return basis;
}

inline PcaBasis pca_top3(const Matrix& activations) {
  require(activations.rows >= 4, ErrorCode::invalid_argument,
          "pca_top3 needs at least 4 rows, got " + std::to_string(activations.rows));
  require(activations.all_finite(), ErrorCode::invalid_argument, "pca_top3 input not finite");
  CovarianceAccumulator acc(activations.cols);
  for (std::size_t r = 0; r < activations.rows; ++r) acc.add(activations.row(r));
  return pca_top3_from_covariance(acc.covariance());
}

inline double mean_of(std::span<const double> values) {
  require(!values.empty(), ErrorCode::invalid_argument, "mean of empty sample");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

// Linear-interpolated quantile of an ascending-sorted sample.
inline double sorted_quantile(std::span<const double> sorted, double q) {
  require(!sorted.empty(), ErrorCode::invalid_argument, "quantile of empty sample");
  const double position = q * static_cast<double>(sorted.size() - 1);
  const auto lower = static_cast<std::size_t>(std::floor(position));
  const auto upper = std::min(lower + 1, sorted.size() - 1);
  const double frac = position - static_cast<double>(lower);
  return sorted[lower] + frac * (sorted[upper] - sorted[lower]);
}

// Percentile bootstrap of the sample mean. Resample i draws its indices from
// Rng(seed) sequentially, so the result is a pure function of the inputs.
inline BootstrapSummary bootstrap_ci(std::span<const double> samples, std::size_t n_resamples,
                                     double level, std::uint64_t seed) {
  require(!samples.empty(), ErrorCode::invalid_argument, "bootstrap_ci of empty sample");
  require(n_resamples >= 1, ErrorCode::invalid_argument, "bootstrap_ci needs >= 1 resample");
  require(level > 0.0 && level < 1.0, ErrorCode::invalid_argument,
          "bootstrap level must lie in (0,1)");
  BootstrapSummary out;
  out.mean = mean_of(samples);
  out.n_resamples = n_resamples;
  out.level = level;

  Rng rng(seed);
  const std::size_t n = samples.size();
  std::vector<double> means(n_resamples);
  for (std::size_t b = 0; b < n_resamples; ++b) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += samples[rng.index(n)];
    means[b] = total / static_cast<double>(n);
  }
  std::sort(means.begin(), means.end());
  const double alpha = (1.0 - level) / 2.0;
  out.ci_low = std::min(sorted_quantile(means, alpha), out.mean);
  out.ci_high = std::max(sorted_quantile(means, 1.0 - alpha), out.mean);
  return out;
}

// Average ranks (1-based), ties share the mean rank.
inline std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size() && x.size() >= 2, ErrorCode::invalid_argument,
          "correlation needs two equal-length samples of size >= 2");
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::degenerate_input, "correlation of constant sample");
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman_rho(std::span<const double> x, std::span<const double> y) {
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

}  // namespace circuit_align
