#pragma once

// Shared fixtures for the test suite.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "circuit_align/circuit_align.hpp"

namespace testing_support {

namespace ca = circuit_align;

// Small GPT-2 style model with Gaussian weights over the toy vocabulary.
inline ca::ModelBundle random_model(std::uint64_t seed, std::size_t n_layers = 2, std::size_t n_heads = 2,
                                    std::size_t d_head = 4, std::size_t d_mlp = 16) {
  ca::ModelBundle m;
  m.name = "random";
  auto& c = m.config;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_head = d_head;
  c.d_model = n_heads * d_head;
  c.d_mlp = d_mlp;
  c.vocab_size = ca::toy::kVocab;
  c.max_positions = ca::toy::kMaxPositions;
  m.tokenizer = ca::toy_tokenizer();
  ca::Rng rng(seed);
  auto fill = [&](std::vector<float>& v, std::size_t n, double sd, double mean = 0.0) {
    v.resize(n);
    for (auto& x : v) x = static_cast<float>(mean + sd * rng.normal());
  };
  const std::size_t d = c.d_model;
  fill(m.weights.wte, c.vocab_size * d, 0.8);
  fill(m.weights.wpe, c.max_positions * d, 0.3);
  fill(m.weights.lnf_w, d, 0.1, 1.0);
  fill(m.weights.lnf_b, d, 0.1);
  fill(m.weights.w_u, c.vocab_size * d, 0.5);
  for (std::size_t l = 0; l < n_layers; ++l) {
    ca::LayerWeights L;
    fill(L.ln1_w, d, 0.1, 1.0);
    fill(L.ln1_b, d, 0.1);
    fill(L.w_qkv, d * 3 * d, 0.5);
    fill(L.b_qkv, 3 * d, 0.1);
    fill(L.w_o, d * d, 0.4);
    fill(L.b_o, d, 0.1);
    fill(L.ln2_w, d, 0.1, 1.0);
    fill(L.ln2_b, d, 0.1);
    fill(L.w_in, d * d_mlp, 0.4);
    fill(L.b_in, d_mlp, 0.1);
    fill(L.w_out, d_mlp * d, 0.3);
    fill(L.b_out, d, 0.1);
    m.weights.layers.push_back(std::move(L));
  }
  m.weights_digest = ca::weights_content_digest(c, m.weights);
  return m;
}

// Independent dense re-implementation of the GPT-2 forward pass on Eigen
// matrices. Returns positions x vocab logits.
inline Eigen::MatrixXd oracle_forward(const ca::ModelBundle& m, const std::vector<int>& tokens) {
  using Eigen::MatrixXd;
  using Eigen::VectorXd;
  const auto& c = m.config;
  const auto& w = m.weights;
  const auto P = static_cast<Eigen::Index>(tokens.size());
  const auto d = static_cast<Eigen::Index>(c.d_model);
  auto mat = [](const std::vector<float>& v, Eigen::Index r, Eigen::Index cols) {
    MatrixXd out(r, cols);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = v[static_cast<std::size_t>(i * cols + j)];
    return out;
  };
  auto vec = [](const std::vector<float>& v) {
    VectorXd out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out(static_cast<Eigen::Index>(i)) = v[i];
    return out;
  };
  auto ln = [&](const MatrixXd& x, const std::vector<float>& g, const std::vector<float>& b) {
    MatrixXd out(x.rows(), x.cols());
    const VectorXd gv = vec(g), bv = vec(b);
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      const double mu = x.row(r).mean();
      const Eigen::RowVectorXd centered = x.row(r).array() - mu;
      const double var = centered.squaredNorm() / static_cast<double>(x.cols());
      out.row(r) = (centered / std::sqrt(var + c.layernorm_epsilon)).cwiseProduct(gv.transpose()) + bv.transpose();
    }
    return out;
  };
  const MatrixXd wte = mat(w.wte, static_cast<Eigen::Index>(c.vocab_size), d);
  const MatrixXd wpe = mat(w.wpe, static_cast<Eigen::Index>(c.max_positions), d);
  MatrixXd x(P, d);
  for (Eigen::Index p = 0; p < P; ++p) x.row(p) = wte.row(tokens[static_cast<std::size_t>(p)]) + wpe.row(p);
  const auto dh = static_cast<Eigen::Index>(c.d_head);
  for (const auto& L : w.layers) {
    const MatrixXd h1 = ln(x, L.ln1_w, L.ln1_b);
    const MatrixXd qkv = (h1 * mat(L.w_qkv, d, 3 * d)).rowwise() + vec(L.b_qkv).transpose();
    MatrixXd z(P, d);
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(c.n_heads); ++h) {
      const MatrixXd q = qkv.middleCols(h * dh, dh);
      const MatrixXd k = qkv.middleCols(d + h * dh, dh);
      const MatrixXd v = qkv.middleCols(2 * d + h * dh, dh);
      MatrixXd s = q * k.transpose() / std::sqrt(static_cast<double>(dh));
      for (Eigen::Index i = 0; i < P; ++i) {
        for (Eigen::Index j = i + 1; j < P; ++j) s(i, j) = -1e300;
        const double peak = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - peak).exp();
        s.row(i) /= s.row(i).sum();
      }
      z.middleCols(h * dh, dh) = s * v;
    }
    x += (z * mat(L.w_o, d, d)).rowwise() + vec(L.b_o).transpose();
    const MatrixXd h2 = ln(x, L.ln2_w, L.ln2_b);
    MatrixXd pre = (h2 * mat(L.w_in, d, static_cast<Eigen::Index>(c.d_mlp))).rowwise() + vec(L.b_in).transpose();
    pre = pre.unaryExpr([](double t) {
      return 0.5 * t * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (t + 0.044715 * std::pow(t, 3))));
    });
    x += (pre * mat(L.w_out, static_cast<Eigen::Index>(c.d_mlp), d)).rowwise() + vec(L.b_out).transpose();
  }
  const MatrixXd hf = ln(x, w.lnf_w, w.lnf_b);
  return hf * mat(w.w_u, static_cast<Eigen::Index>(c.vocab_size), d).transpose();
}

// Random prompt over the toy vocabulary.
inline std::vector<int> random_prompt(ca::Rng& rng, std::size_t length) {
  std::vector<int> out(length);
  for (auto& t : out) t = static_cast<int>(rng.index(ca::toy::kVocab));
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("circuit_align_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline ca::TaskDataset numeral_dataset(const ca::ModelBundle& m, std::size_t n, std::uint64_t seed = 0) {
  return ca::gen_numeral_sequences(n, seed, m.tokenizer);
}

}  // namespace testing_support
