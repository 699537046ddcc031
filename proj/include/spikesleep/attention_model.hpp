#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "spikesleep/error.hpp"
#include "spikesleep/signal_io.hpp"
#include "spikesleep/spike_encoder.hpp"
#include "spikesleep/tensor.hpp"

namespace spikesleep {

enum class PositionalEncoding { Learned, Sinusoidal, None };

inline const char* to_string(PositionalEncoding p) {
  switch (p) {
    case PositionalEncoding::Learned: return "learned";
    case PositionalEncoding::Sinusoidal: return "sinusoidal";
    case PositionalEncoding::None: return "none";
  }
  return "?";
}

inline PositionalEncoding positional_from_string(const std::string& s) {
  if (s == "learned") return PositionalEncoding::Learned;
  if (s == "sinusoidal") return PositionalEncoding::Sinusoidal;
  if (s == "none") return PositionalEncoding::None;
  throw Error(ErrorKind::InvalidArgument, "positional encoding '" + s + "'");
}

struct ModelConfig {
  int depth = 8;
  int heads = 4;
  int model_dim = 128;
  // Logits are divided by this constant, not by sqrt(model_dim / heads).
  double attention_scale = 8.0;
  int mlp_dim = 128;
  double dropout = 0.5;
  int num_classes = kNumStages;
  int seq_len = 150;
  int input_dim = kFeatureColumns;
  PositionalEncoding positional = PositionalEncoding::Learned;
  // Multiplier on the classifier head's init range; keeps fresh logits near uniform.
  double head_init_scale = 0.1;
  double layer_norm_eps = 1e-5;

  int head_dim() const { return model_dim / heads; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void validate(const ModelConfig& c) {
  if (c.depth <= 0 || c.heads <= 0 || c.model_dim <= 0 || c.mlp_dim <= 0 || c.num_classes <= 0 || c.seq_len <= 0 ||
      c.input_dim <= 0)
    throw Error(ErrorKind::InvalidArgument, "model dimensions must be positive");
  if (c.model_dim % c.heads != 0) throw Error(ErrorKind::InvalidArgument, "model_dim must be divisible by heads");
  if (!(c.attention_scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "attention scale must be > 0");
  if (!(c.dropout >= 0.0 && c.dropout < 1.0)) throw Error(ErrorKind::InvalidArgument, "dropout must be in [0, 1)");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"depth", c.depth},         {"heads", c.heads},
          {"model_dim", c.model_dim}, {"attention_scale", c.attention_scale},
          {"mlp_dim", c.mlp_dim},     {"dropout", c.dropout},
          {"num_classes", c.num_classes}, {"seq_len", c.seq_len},
          {"input_dim", c.input_dim}, {"positional", to_string(c.positional)},
          {"head_init_scale", c.head_init_scale}, {"layer_norm_eps", c.layer_norm_eps}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.attention_scale = j.at("attention_scale").get<double>();
  c.mlp_dim = j.at("mlp_dim").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.num_classes = j.at("num_classes").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.positional = positional_from_string(j.at("positional").get<std::string>());
  c.head_init_scale = j.at("head_init_scale").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

// Closed form: (input_dim + 1) D + [T D if learned] + depth (4 D^2 + 2 D M + 9 D + M) + 2 D + (D + 1) C
inline std::size_t expected_parameter_count(const ModelConfig& c) {
  const std::size_t D = c.model_dim, M = c.mlp_dim, T = c.seq_len, C = c.num_classes, I = c.input_dim;
  const std::size_t pos = c.positional == PositionalEncoding::Learned ? T * D : 0;
  return (I + 1) * D + pos + static_cast<std::size_t>(c.depth) * (4 * D * D + 2 * D * M + 9 * D + M) + 2 * D +
         (D + 1) * C;
}

// Named parameters in a fixed order. Block parameters come in the order of
// BlockParam; see ModelState::block.
enum BlockParam : std::size_t {
  kLn1Gamma, kLn1Beta, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo, kLn2Gamma, kLn2Beta, kW1, kB1, kW2, kB2,
  kBlockParamCount
};

inline constexpr const char* kBlockParamNames[kBlockParamCount] = {
    "ln1.gamma", "ln1.beta", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo",   "attn.bo",  "ln2.gamma", "ln2.beta", "ff.w1", "ff.b1", "ff.w2", "ff.b2"};

struct ModelState {
  ModelConfig config;
  std::vector<std::string> names;
  std::vector<Tensor> params;

  // Index layout: input.weight, input.bias, [pos_embedding], blocks..., final_ln.gamma, final_ln.beta,
  // head.weight, head.bias.
  std::size_t input_w() const { return 0; }
  std::size_t input_b() const { return 1; }
  bool has_pos() const { return config.positional == PositionalEncoding::Learned; }
  std::size_t pos() const { return 2; }
  std::size_t block_base() const { return has_pos() ? 3 : 2; }
  std::size_t block(std::size_t b, BlockParam p) const { return block_base() + b * kBlockParamCount + p; }
  std::size_t final_gamma() const { return block_base() + static_cast<std::size_t>(config.depth) * kBlockParamCount; }
  std::size_t final_beta() const { return final_gamma() + 1; }
  std::size_t head_w() const { return final_gamma() + 2; }
  std::size_t head_b() const { return final_gamma() + 3; }

  const Tensor& operator[](std::size_t i) const { return params[i]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  // Zeroed tensors with the same layout, used for gradients and optimizer moments.
  std::vector<Tensor> zeros_like() const {
    std::vector<Tensor> out;
    out.reserve(params.size());
    for (const auto& p : params) out.emplace_back(p.shape);
    return out;
  }
};

namespace detail {

inline std::vector<std::pair<std::string, std::vector<std::size_t>>> parameter_layout(const ModelConfig& c) {
  const std::size_t D = c.model_dim, M = c.mlp_dim;
  std::vector<std::pair<std::string, std::vector<std::size_t>>> l;
  l.push_back({"input.weight", {static_cast<std::size_t>(c.input_dim), D}});
  l.push_back({"input.bias", {D}});
  if (c.positional == PositionalEncoding::Learned) l.push_back({"pos_embedding", {static_cast<std::size_t>(c.seq_len), D}});
  for (int b = 0; b < c.depth; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    const std::vector<std::vector<std::size_t>> shapes = {{D}, {D}, {D, D}, {D}, {D, D}, {D}, {D, D}, {D},
                                                          {D, D}, {D}, {D}, {D}, {D, M}, {M}, {M, D}, {D}};
    for (std::size_t p = 0; p < kBlockParamCount; ++p) l.push_back({pre + kBlockParamNames[p], shapes[p]});
  }
  l.push_back({"final_ln.gamma", {D}});
  l.push_back({"final_ln.beta", {D}});
  l.push_back({"head.weight", {D, static_cast<std::size_t>(c.num_classes)}});
  l.push_back({"head.bias", {static_cast<std::size_t>(c.num_classes)}});
  return l;
}

}  // namespace detail

// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LN gains, N(0, 0.02)
// positional embeddings.
inline ModelState init_model(const ModelConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  ModelState m;
  m.config = cfg;
  std::mt19937_64 rng(seed);
  for (auto& [name, shape] : detail::parameter_layout(cfg)) {
    Tensor t(shape);
    const bool gamma = name.ends_with(".gamma");
    const bool weight = shape.size() == 2 && name != "pos_embedding";
    if (gamma) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
    } else if (name == "pos_embedding") {
      std::normal_distribution<double> n(0.0, 0.02);
      for (auto& v : t.data) v = n(rng);
    } else if (weight) {
      double bound = 1.0 / std::sqrt(static_cast<double>(shape[0]));
      if (name == "head.weight") bound *= cfg.head_init_scale;
      std::uniform_real_distribution<double> u(-bound, bound);
      for (auto& v : t.data) v = u(rng);
    }
    m.names.push_back(name);
    m.params.push_back(std::move(t));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Building blocks

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

// Row-wise softmax with max subtraction.
inline void softmax_rows(Tensor& s) {
  const std::size_t n = s.cols();
  for (std::size_t i = 0; i < s.rows(); ++i) {
    double* row = &s.data[i * n];
    const double mx = *std::max_element(row, row + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += (row[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) row[j] /= sum;
  }
}

inline Tensor attention_probs(const Tensor& q, const Tensor& k, double scale) {
  auto s = linalg::matmul_nt(q, k);
  for (auto& v : s.data) v /= scale;
  softmax_rows(s);
  return s;
}

// softmax(Q K^T / scale) V
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, double scale) {
  if (q.cols() != k.cols() || k.rows() != v.rows() || q.shape.size() != 2 || k.shape.size() != 2 ||
      v.shape.size() != 2)
    throw Error(ErrorKind::ShapeMismatch, "attention Q" + shape_string(q) + " K" + shape_string(k) + " V" +
                                              shape_string(v));
  if (!(scale > 0.0)) throw Error(ErrorKind::InvalidArgument, "attention scale must be > 0");
  if (!q.all_finite() || !k.all_finite() || !v.all_finite()) throw Error(ErrorKind::NonFinite, "attention input");
  return linalg::matmul(attention_probs(q, k, scale), v);
}

namespace detail {

struct LayerNormCache {
  Tensor xhat;
  std::vector<double> rstd;
};

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                         LayerNormCache* cache) {
  const std::size_t n = x.cols();
  Tensor y(x.rows(), n);
  if (cache) {
    cache->xhat = Tensor(x.rows(), n);
    cache->rstd.assign(x.rows(), 0.0);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = &x.data[i * n];
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xh = (row[j] - mean) * rstd;
      y.data[i * n + j] = xh * gamma.data[j] + beta.data[j];
      if (cache) cache->xhat.data[i * n + j] = xh;
    }
    if (cache) cache->rstd[i] = rstd;
  }
  return y;
}

// Returns dx; accumulates dgamma and dbeta.
inline Tensor layer_norm_backward(const Tensor& dy, const LayerNormCache& c, const Tensor& gamma, Tensor& dgamma,
                                  Tensor& dbeta) {
  const std::size_t n = dy.cols();
  Tensor dx(dy.rows(), n);
  std::vector<double> dxhat(n);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double g = dy.data[i * n + j];
      const double xh = c.xhat.data[i * n + j];
      dgamma.data[j] += g * xh;
      dbeta.data[j] += g;
      dxhat[j] = g * gamma.data[j];
      m1 += dxhat[j];
      m2 += dxhat[j] * xh;
    }
    m1 /= static_cast<double>(n);
    m2 /= static_cast<double>(n);
    for (std::size_t j = 0; j < n; ++j)
      dx.data[i * n + j] = c.rstd[i] * (dxhat[j] - m1 - c.xhat.data[i * n + j] * m2);
  }
  return dx;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  auto y = linalg::matmul(x, w);
  linalg::add_row_bias(y, b);
  return y;
}

// Inverted dropout mask: entries are 0 or 1 / (1 - rate).
inline Tensor dropout_mask(std::size_t rows, std::size_t cols, double rate, std::mt19937_64& rng) {
  Tensor m(rows, cols, 1.0);
  if (rate <= 0.0) return m;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep = 1.0 / (1.0 - rate);
  for (auto& v : m.data) v = u(rng) < rate ? 0.0 : keep;
  return m;
}

inline void mul_inplace(Tensor& x, const Tensor& m) {
  for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] *= m.data[i];
}

struct BlockCache {
  Tensor x_in;
  LayerNormCache ln1;
  Tensor n1, q, k, v;
  std::vector<Tensor> probs;  // one T x T matrix per head
  Tensor concat;
  Tensor drop1;
  LayerNormCache ln2;
  Tensor n2, u, g, drop2, gd;
};

struct ForwardCache {
  Tensor input;
  std::vector<BlockCache> blocks;
  LayerNormCache final_ln;
  Tensor tokens;  // after the final layer norm
  std::vector<double> pooled;
};

inline Tensor sinusoidal_table(std::size_t t, std::size_t d) {
  Tensor pe(t, d);
  for (std::size_t pos = 0; pos < t; ++pos)
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(pos, i) = (i % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  return pe;
}

inline Tensor multi_head_core(const Tensor& x, const ModelState& m, std::size_t b, BlockCache* cache) {
  const auto& cfg = m.config;
  auto q = linear(x, m[m.block(b, kWq)], m[m.block(b, kBq)]);
  auto k = linear(x, m[m.block(b, kWk)], m[m.block(b, kBk)]);
  auto v = linear(x, m[m.block(b, kWv)], m[m.block(b, kBv)]);
  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  Tensor concat(x.rows(), static_cast<std::size_t>(cfg.model_dim));
  if (cache) cache->probs.clear();
  for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
    const auto qh = linalg::slice_cols(q, h * dh, dh);
    const auto kh = linalg::slice_cols(k, h * dh, dh);
    const auto vh = linalg::slice_cols(v, h * dh, dh);
    auto p = attention_probs(qh, kh, cfg.attention_scale);
    linalg::set_cols(concat, h * dh, linalg::matmul(p, vh));
    if (cache) cache->probs.push_back(std::move(p));
  }
  auto out = linear(concat, m[m.block(b, kWo)], m[m.block(b, kBo)]);
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->concat = std::move(concat);
  }
  return out;
}

}  // namespace detail

// Multi-head self-attention of block `b` (no layer norm, no dropout).
inline Tensor multi_head(const Tensor& x, const ModelState& m, std::size_t b = 0) {
  if (x.cols() != static_cast<std::size_t>(m.config.model_dim))
    throw Error(ErrorKind::ShapeMismatch, "multi_head input " + shape_string(x));
  return detail::multi_head_core(x, m, b, nullptr);
}

// Position-wise D -> mlp_dim -> D network of block `b` with exact GELU.
inline Tensor feed_forward(const Tensor& x, const ModelState& m, std::size_t b = 0) {
  if (x.cols() != static_cast<std::size_t>(m.config.model_dim))
    throw Error(ErrorKind::ShapeMismatch, "feed_forward input " + shape_string(x));
  auto u = detail::linear(x, m[m.block(b, kW1)], m[m.block(b, kB1)]);
  for (auto& v : u.data) v = gelu(v);
  return detail::linear(u, m[m.block(b, kW2)], m[m.block(b, kB2)]);
}

enum class Mode { Train, Eval };

namespace detail {

// Runs one sequence through the network. Dropout masks are drawn from `rng`
// in train mode only.
inline std::vector<double> forward_one(const ModelState& m, const Tensor& input, Mode mode, std::mt19937_64* rng,
                                       ForwardCache* cache) {
  const auto& cfg = m.config;
  if (input.rows() != static_cast<std::size_t>(cfg.seq_len) || input.cols() != static_cast<std::size_t>(cfg.input_dim))
    throw Error(ErrorKind::ShapeMismatch, "input " + shape_string(input) + ", expected [" +
                                              std::to_string(cfg.seq_len) + "x" + std::to_string(cfg.input_dim) + "]");
  const bool train = mode == Mode::Train && cfg.dropout > 0.0;
  auto x = linear(input, m[m.input_w()], m[m.input_b()]);
  if (m.has_pos()) {
    linalg::add_inplace(x, m[m.pos()]);
  } else if (cfg.positional == PositionalEncoding::Sinusoidal) {
    linalg::add_inplace(x, sinusoidal_table(x.rows(), x.cols()));
  }
  if (cache) {
    cache->input = input;
    cache->blocks.assign(static_cast<std::size_t>(cfg.depth), {});
  }
  const double eps = cfg.layer_norm_eps;
  for (std::size_t b = 0; b < static_cast<std::size_t>(cfg.depth); ++b) {
    BlockCache* bc = cache ? &cache->blocks[b] : nullptr;
    if (bc) bc->x_in = x;
    auto n1 = layer_norm(x, m[m.block(b, kLn1Gamma)], m[m.block(b, kLn1Beta)], eps, bc ? &bc->ln1 : nullptr);
    auto a = multi_head_core(n1, m, b, bc);
    if (train) {
      auto mask = dropout_mask(a.rows(), a.cols(), cfg.dropout, *rng);
      mul_inplace(a, mask);
      if (bc) bc->drop1 = std::move(mask);
    }
    linalg::add_inplace(x, a);
    auto n2 = layer_norm(x, m[m.block(b, kLn2Gamma)], m[m.block(b, kLn2Beta)], eps, bc ? &bc->ln2 : nullptr);
    auto u = linear(n2, m[m.block(b, kW1)], m[m.block(b, kB1)]);
    Tensor g = u;
    for (auto& v : g.data) v = gelu(v);
    Tensor gd = g;
    if (train) {
      auto mask = dropout_mask(g.rows(), g.cols(), cfg.dropout, *rng);
      mul_inplace(gd, mask);
      if (bc) bc->drop2 = std::move(mask);
    }
    linalg::add_inplace(x, linear(gd, m[m.block(b, kW2)], m[m.block(b, kB2)]));
    if (!x.all_finite()) throw Error(ErrorKind::NonFinite, "activations after block " + std::to_string(b));
    if (bc) {
      bc->n1 = std::move(n1);
      bc->n2 = std::move(n2);
      bc->u = std::move(u);
      bc->g = std::move(g);
      bc->gd = std::move(gd);
    }
  }
  auto y = layer_norm(x, m[m.final_gamma()], m[m.final_beta()], eps, cache ? &cache->final_ln : nullptr);
  std::vector<double> pooled(y.cols(), 0.0);
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) pooled[j] += y(i, j);
  for (auto& v : pooled) v /= static_cast<double>(y.rows());
  const auto& hw = m[m.head_w()];
  const auto& hb = m[m.head_b()];
  std::vector<double> logits(static_cast<std::size_t>(cfg.num_classes));
  for (std::size_t c = 0; c < logits.size(); ++c) {
    double s = hb[c];
    for (std::size_t j = 0; j < pooled.size(); ++j) s += pooled[j] * hw(j, c);
    logits[c] = s;
  }
  if (cache) {
    cache->tokens = std::move(y);
    cache->pooled = pooled;
  }
  return logits;
}

// Back-propagates dlogits through a cached forward pass, accumulating into grads.
inline void backward_one(const ModelState& m, const ForwardCache& c, const std::vector<double>& dlogits,
                         std::vector<Tensor>& grads) {
  const auto& cfg = m.config;
  const std::size_t T = c.tokens.rows(), D = c.tokens.cols();
  const auto& hw = m[m.head_w()];
  Tensor dy(T, D);
  for (std::size_t j = 0; j < D; ++j) {
    double dp = 0.0;
    for (std::size_t k = 0; k < dlogits.size(); ++k) {
      grads[m.head_w()](j, k) += c.pooled[j] * dlogits[k];
      dp += hw(j, k) * dlogits[k];
    }
    for (std::size_t i = 0; i < T; ++i) dy(i, j) = dp / static_cast<double>(T);
  }
  for (std::size_t k = 0; k < dlogits.size(); ++k) grads[m.head_b()][k] += dlogits[k];

  Tensor dx = layer_norm_backward(dy, c.final_ln, m[m.final_gamma()], grads[m.final_gamma()], grads[m.final_beta()]);
  const std::size_t dh = static_cast<std::size_t>(cfg.head_dim());
  const bool dropped = cfg.dropout > 0.0;

  for (std::size_t bi = static_cast<std::size_t>(cfg.depth); bi-- > 0;) {
    const auto& bc = c.blocks[bi];
    auto P = [&](BlockParam p) -> const Tensor& { return m[m.block(bi, p)]; };
    auto G = [&](BlockParam p) -> Tensor& { return grads[m.block(bi, p)]; };

    // feed-forward branch
    linalg::matmul_tn_acc(bc.gd, dx, G(kW2));
    linalg::col_sum_acc(dx, G(kB2));
    auto dgd = linalg::matmul_nt(dx, P(kW2));
    if (dropped && !bc.drop2.data.empty()) mul_inplace(dgd, bc.drop2);
    for (std::size_t i = 0; i < dgd.data.size(); ++i) dgd.data[i] *= gelu_grad(bc.u.data[i]);
    linalg::matmul_tn_acc(bc.n2, dgd, G(kW1));
    linalg::col_sum_acc(dgd, G(kB1));
    auto dn2 = linalg::matmul_nt(dgd, P(kW1));
    linalg::add_inplace(dx, layer_norm_backward(dn2, bc.ln2, P(kLn2Gamma), G(kLn2Gamma), G(kLn2Beta)));

    // attention branch
    Tensor da = dx;
    if (dropped && !bc.drop1.data.empty()) mul_inplace(da, bc.drop1);
    linalg::matmul_tn_acc(bc.concat, da, G(kWo));
    linalg::col_sum_acc(da, G(kBo));
    auto dconcat = linalg::matmul_nt(da, P(kWo));
    Tensor dq(T, D), dk(T, D), dv(T, D);
    for (std::size_t h = 0; h < static_cast<std::size_t>(cfg.heads); ++h) {
      const auto& p = bc.probs[h];
      const auto doh = linalg::slice_cols(dconcat, h * dh, dh);
      const auto vh = linalg::slice_cols(bc.v, h * dh, dh);
      const auto qh = linalg::slice_cols(bc.q, h * dh, dh);
      const auto kh = linalg::slice_cols(bc.k, h * dh, dh);
      auto dp = linalg::matmul_nt(doh, vh);
      Tensor dvh(T, dh);
      linalg::matmul_tn_acc(p, doh, dvh);
      Tensor ds(T, T);
      for (std::size_t i = 0; i < T; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < T; ++j) dot += dp(i, j) * p(i, j);
        for (std::size_t j = 0; j < T; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) / cfg.attention_scale;
      }
      auto dqh = linalg::matmul(ds, kh);
      Tensor dkh(T, dh);
      linalg::matmul_tn_acc(ds, qh, dkh);
      linalg::set_cols(dq, h * dh, dqh);
      linalg::set_cols(dk, h * dh, dkh);
      linalg::set_cols(dv, h * dh, dvh);
    }
    linalg::matmul_tn_acc(bc.n1, dq, G(kWq));
    linalg::col_sum_acc(dq, G(kBq));
    linalg::matmul_tn_acc(bc.n1, dk, G(kWk));
    linalg::col_sum_acc(dk, G(kBk));
    linalg::matmul_tn_acc(bc.n1, dv, G(kWv));
    linalg::col_sum_acc(dv, G(kBv));
    auto dn1 = linalg::matmul_nt(dq, P(kWq));
    linalg::add_inplace(dn1, linalg::matmul_nt(dk, P(kWk)));
    linalg::add_inplace(dn1, linalg::matmul_nt(dv, P(kWv)));
    linalg::add_inplace(dx, layer_norm_backward(dn1, bc.ln1, P(kLn1Gamma), G(kLn1Gamma), G(kLn1Beta)));
  }

  linalg::matmul_tn_acc(c.input, dx, grads[m.input_w()]);
  linalg::col_sum_acc(dx, grads[m.input_b()]);
  if (m.has_pos()) linalg::add_inplace(grads[m.pos()], dx);
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  std::vector<double> p = logits;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (auto& v : p) sum += (v = std::exp(v - mx));
  for (auto& v : p) v /= sum;
  return p;
}

inline double cross_entropy(const std::vector<double>& logits, std::size_t label) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  return std::log(sum) + mx - logits[label];
}

}  // namespace detail

inline Tensor features_to_tensor(const FeatureEpoch& fe) {
  Tensor t(fe.rows, static_cast<std::size_t>(kFeatureColumns));
  for (std::size_t i = 0; i < fe.data.size(); ++i) t.data[i] = static_cast<double>(fe.data[i]);
  return t;
}

// Logits for a batch; shape [batch x num_classes]. `rng` is required in train mode.
inline Tensor forward(const ModelState& m, std::span<const Tensor> batch, Mode mode = Mode::Eval,
                      std::mt19937_64* rng = nullptr) {
  if (mode == Mode::Train && m.config.dropout > 0.0 && !rng)
    throw Error(ErrorKind::InvalidArgument, "train-mode forward needs an rng");
  Tensor out(batch.size(), static_cast<std::size_t>(m.config.num_classes));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto logits = detail::forward_one(m, batch[i], mode, rng, nullptr);
    for (std::size_t c = 0; c < logits.size(); ++c) out(i, c) = logits[c];
  }
  return out;
}

inline std::vector<double> forward(const ModelState& m, const Tensor& input) {
  return detail::forward_one(m, input, Mode::Eval, nullptr, nullptr);
}

// Encoder stack output before pooling (after the final layer norm), eval mode.
inline Tensor encode_tokens(const ModelState& m, const Tensor& input) {
  detail::ForwardCache c;
  detail::forward_one(m, input, Mode::Eval, nullptr, &c);
  return c.tokens;
}

inline int predict(const ModelState& m, const Tensor& input) {
  const auto logits = forward(m, input);
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

inline std::vector<double> class_probabilities(const ModelState& m, const Tensor& input) {
  return detail::softmax(forward(m, input));
}

struct LossAndGrads {
  double loss = 0.0;  // mean cross-entropy over the batch, times loss_scale
  std::vector<Tensor> grads;
  std::size_t correct = 0;
};

// Mean cross-entropy over the batch and its gradient for every parameter.
inline LossAndGrads loss_and_gradients(const ModelState& m, std::span<const Tensor> inputs,
                                       std::span<const int> labels, Mode mode, std::mt19937_64* rng,
                                       double loss_scale = 1.0) {
  if (inputs.size() != labels.size() || inputs.empty())
    throw Error(ErrorKind::ShapeMismatch, "batch of " + std::to_string(inputs.size()) + " inputs, " +
                                              std::to_string(labels.size()) + " labels");
  LossAndGrads out;
  out.grads = m.zeros_like();
  const double w = loss_scale / static_cast<double>(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto label = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || label >= static_cast<std::size_t>(m.config.num_classes))
      throw Error(ErrorKind::InvalidArgument, "label " + std::to_string(labels[i]));
    detail::ForwardCache cache;
    const auto logits = detail::forward_one(m, inputs[i], mode, rng, &cache);
    out.loss += w * detail::cross_entropy(logits, label);
    if (static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin()) == label)
      ++out.correct;
    auto d = detail::softmax(logits);
    d[label] -= 1.0;
    for (auto& v : d) v *= w;
    detail::backward_one(m, cache, d, out.grads);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  int epochs = 100;
  int batch_size = 32;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_steps = 0;  // 0 = no cap
};

inline void validate(const TrainConfig& c) {
  if (c.epochs <= 0 || c.batch_size <= 0 || !(c.learning_rate > 0.0))
    throw Error(ErrorKind::InvalidArgument, "epochs, batch_size and learning_rate must be positive");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs}, {"batch_size", c.batch_size}, {"learning_rate", c.learning_rate},
          {"seed", c.seed},     {"beta1", c.beta1},           {"beta2", c.beta2},
          {"adam_eps", c.adam_eps}, {"max_steps", c.max_steps}};
}

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;
  double train_accuracy = 0.0;
  friend bool operator==(const EpochLog&, const EpochLog&) = default;
};

struct TrainResult {
  ModelState model;
  std::vector<EpochLog> trace;
  double first_step_loss = 0.0;
  std::size_t steps = 0;
};

class Adam {
 public:
  Adam(const ModelState& m, const TrainConfig& c) : cfg_(c), m1_(m.zeros_like()), m2_(m.zeros_like()) {}

  void step(ModelState& m, const std::vector<Tensor>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t p = 0; p < m.params.size(); ++p) {
      auto& w = m.params[p].data;
      auto& a = m1_[p].data;
      auto& b = m2_[p].data;
      const auto& g = grads[p].data;
      for (std::size_t i = 0; i < w.size(); ++i) {
        a[i] = cfg_.beta1 * a[i] + (1.0 - cfg_.beta1) * g[i];
        b[i] = cfg_.beta2 * b[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= cfg_.learning_rate * (a[i] / c1) / (std::sqrt(b[i] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Tensor> m1_, m2_;
  std::size_t t_ = 0;
};

using TrainProgress = std::function<void(const EpochLog&)>;

// Mini-batch Adam on mean cross-entropy. Shuffling and dropout masks are all
// drawn from one generator seeded by cfg.seed, so a run is reproducible.
inline TrainResult train(ModelState model, std::span<const FeatureEpoch> dataset, const TrainConfig& cfg,
                         const TrainProgress& progress = {}) {
  validate(cfg);
  std::vector<Tensor> inputs;
  std::vector<int> labels;
  for (const auto& fe : dataset) {
    if (!fe.stage) continue;
    inputs.push_back(features_to_tensor(fe));
    labels.push_back(stage_index(*fe.stage));
  }
  if (inputs.empty()) throw Error(ErrorKind::EmptyInput, "training set has no labeled epochs");

  TrainResult out;
  std::mt19937_64 rng(cfg.seed);
  Adam opt(model, cfg);
  std::vector<std::size_t> order(inputs.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      if (cfg.max_steps && out.steps >= cfg.max_steps) break;
      const std::size_t stop = std::min(order.size(), start + bs);
      std::vector<Tensor> bx;
      std::vector<int> by;
      for (std::size_t i = start; i < stop; ++i) {
        bx.push_back(inputs[order[i]]);
        by.push_back(labels[order[i]]);
      }
      auto r = loss_and_gradients(model, bx, by, Mode::Train, &rng);
      if (!std::isfinite(r.loss))
        throw Error(ErrorKind::NonFiniteLoss, "epoch " + std::to_string(epoch + 1) + " step " +
                                                  std::to_string(out.steps + 1) + " loss " + std::to_string(r.loss));
      if (out.steps == 0) out.first_step_loss = r.loss;
      opt.step(model, r.grads);
      ++out.steps;
      loss_sum += r.loss * static_cast<double>(bx.size());
      correct += r.correct;
      seen += bx.size();
    }
    if (seen == 0) break;
    EpochLog log{epoch + 1, loss_sum / static_cast<double>(seen),
                 static_cast<double>(correct) / static_cast<double>(seen)};
    out.trace.push_back(log);
    if (progress) progress(log);
  }
  out.model = std::move(model);
  return out;
}

inline void write_loss_trace(const std::filesystem::path& path, const std::vector<EpochLog>& trace) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out.precision(17);
  out << "epoch,mean_loss,train_accuracy\n";
  for (const auto& e : trace) out << e.epoch << ',' << e.mean_loss << ',' << e.train_accuracy << '\n';
}

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t checked = 0;
};

// Compares every analytic gradient against five-point central differences. Relative
// error uses max(|analytic|, |numeric|, floor) as the denominator so that
// gradients that are zero up to rounding do not dominate.
inline GradCheckResult grad_check(const ModelState& model, const Tensor& input, int label, double step = 1e-3,
                                  double floor = 1e-6) {
  ModelState m = model;
  m.config.dropout = 0.0;
  const std::vector<Tensor> in{input};
  const std::vector<int> lab{label};
  const auto analytic = loss_and_gradients(m, in, lab, Mode::Eval, nullptr).grads;
  auto loss_at = [&](const ModelState& s) {
    return detail::cross_entropy(detail::forward_one(s, input, Mode::Eval, nullptr, nullptr),
                                 static_cast<std::size_t>(label));
  };
  GradCheckResult r;
  for (std::size_t p = 0; p < m.params.size(); ++p) {
    for (std::size_t i = 0; i < m.params[p].size(); ++i) {
      const double orig = m.params[p].data[i];
      auto at = [&](double offset) {
        m.params[p].data[i] = orig + offset;
        return loss_at(m);
      };
      const double numeric = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
      m.params[p].data[i] = orig;
      const double a = analytic[p].data[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++r.checked;
      if (rel > r.max_relative_error) {
        r.max_relative_error = rel;
        r.worst_parameter = m.names[p] + "[" + std::to_string(i) + "]";
      }
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Model file: "SPKSLEEP", u32 version, u32 json length, config json,
// u32 parameter count, then per parameter: u32 name length, name, u64 value
// count, values as little-endian f64.

inline constexpr char kModelMagic[8] = {'S', 'P', 'K', 'S', 'L', 'E', 'E', 'P'};
inline constexpr std::uint32_t kModelFormatVersion = 1;

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::vector<unsigned char> bytes, std::string source) : b_(std::move(bytes)), src_(std::move(source)) {}

  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (b_.size() - pos_ < n) throw Error(ErrorKind::ParseError, src_ + ": truncated at byte " + std::to_string(pos_));
  }

  std::vector<unsigned char> b_;
  std::string src_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_model(const std::filesystem::path& path, const ModelState& m) {
  std::string out(kModelMagic, sizeof(kModelMagic));
  detail::put_le(out, kModelFormatVersion, 4);
  const std::string cfg = to_json(m.config).dump();
  detail::put_le(out, cfg.size(), 4);
  out += cfg;
  detail::put_le(out, m.params.size(), 4);
  for (std::size_t p = 0; p < m.params.size(); ++p) {
    detail::put_le(out, m.names[p].size(), 4);
    out += m.names[p];
    detail::put_le(out, m.params[p].size(), 8);
    for (double v : m.params[p].data) detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw Error(ErrorKind::IoError, "write failed for " + path.string());
}

inline ModelState load_model(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::FileNotFound, path.string());
  detail::ByteReader r(std::vector<unsigned char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()),
                       path.string());
  if (r.str(sizeof(kModelMagic)) != std::string(kModelMagic, sizeof(kModelMagic)))
    throw Error(ErrorKind::ParseError, path.string() + ": bad magic");
  if (const auto v = r.le(4); v != kModelFormatVersion)
    throw Error(ErrorKind::ParseError, path.string() + ": unsupported format version " + std::to_string(v));
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(r.str(r.le(4))));
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::ParseError, path.string() + ": config: " + e.what());
  }
  if (expected && !(cfg == *expected))
    throw Error(ErrorKind::ConfigMismatch, path.string() + ": stored config " + to_json(cfg).dump() +
                                               " differs from expected " + to_json(*expected).dump());
  ModelState m = init_model(cfg, 0);
  const auto count = r.le(4);
  if (count != m.params.size())
    throw Error(ErrorKind::ConfigMismatch, path.string() + ": " + std::to_string(count) + " parameters, config implies " +
                                               std::to_string(m.params.size()));
  for (std::size_t p = 0; p < m.params.size(); ++p) {
    const std::string name = r.str(r.le(4));
    if (name != m.names[p]) throw Error(ErrorKind::ConfigMismatch, path.string() + ": parameter '" + name + "' where '" + m.names[p] + "' expected");
    const auto n = r.le(8);
    if (n != m.params[p].size())
      throw Error(ErrorKind::ConfigMismatch, path.string() + ": parameter '" + name + "' has " + std::to_string(n) + " values");
    for (auto& v : m.params[p].data) v = std::bit_cast<double>(r.le(8));
  }
  if (!r.done()) throw Error(ErrorKind::ParseError, path.string() + ": trailing bytes");
  return m;
}

}  // namespace spikesleep
