#pragma once

// Tiny pre-LN transformer vision encoder standing in for a CLIP image tower.
//
// Block l (1-based):
//   h = x + sum_h softmax(q_h k_h^T / sqrt(dh)) v_h Wo_h + bo     (q,k,v from LN1(x))
//   y = h + FFN(LN2(h)),  FFN(u) = gelu(u W1 + b1) W2 + b2
//   y += x P + p   for blocks in the middle group (P, p zero at init)
//
// The pseudo-forward path replaces the attention mixing by the value path
// sum_h (LN1(x) Wv_h + bv_h) Wo_h + bo, applied per token.

#include <mps/autodiff.hpp>
#include <mps/linalg.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace mps::enc {

struct EncoderConfig {
  int dim = 16;
  int heads = 2;
  int layers = 3;
  int patch_count = 4;
  int patch_input_dim = 8;
  int ffn_dim = 32;
  // Blocks 1..b0 form group 1 (frozen), b0+1..b1 group 2 (parallel linears), the rest group 3.
  std::array<int, 2> group_boundaries{1, 2};

  int head_dim() const { return dim / heads; }

  void validate() const {
    if (dim < 1 || heads < 1 || layers < 1 || patch_count < 1 || patch_input_dim < 1 || ffn_dim < 1)
      throw Error(ErrorKind::BadConfig, "encoder sizes must be positive");
    if (dim % heads != 0) throw Error(ErrorKind::BadConfig, "dim must be divisible by heads");
    const auto [b0, b1] = group_boundaries;
    if (b0 < 0 || b0 > b1 || b1 > layers)
      throw Error(ErrorKind::BadGrouping, "group boundaries must satisfy 0 <= b0 <= b1 <= layers");
  }

  /// 1, 2 or 3 for a 1-based block index.
  int group_of(int block) const {
    if (block <= group_boundaries[0]) return 1;
    if (block <= group_boundaries[1]) return 2;
    return 3;
  }
};

template <class T>
struct BlockT {
  T ln1_gain, ln1_bias;
  std::vector<T> wq, bq, wk, bk, wv, bv, wo;  // one entry per head
  T bo;
  T ln2_gain, ln2_bias;
  T ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  bool has_parallel = false;
  T parallel_w, parallel_b;
};

template <class T>
struct EncoderT {
  T patch_embed;  // patch_input_dim x dim
  T cls;          // 1 x dim
  std::vector<BlockT<T>> blocks;
};

using EncoderParams = EncoderT<Matrix>;
using BoundParams = EncoderT<ad::Var>;

enum class TensorRole { Embedding, BlockCore, Parallel };

/// Visits every tensor in canonical declaration order as f(name, block, role, tensor).
/// `block` is 0 for embedding tensors, else the 1-based block index.
template <class E, class F>
void for_each_tensor(E& enc, F&& f) {
  f(std::string("patch_embed"), 0, TensorRole::Embedding, enc.patch_embed);
  f(std::string("cls"), 0, TensorRole::Embedding, enc.cls);
  for (std::size_t b = 0; b < enc.blocks.size(); ++b) {
    auto& blk = enc.blocks[b];
    const int bi = static_cast<int>(b) + 1;
    const std::string p = "block" + std::to_string(bi) + ".";
    auto core = [&](const std::string& n, auto& t) { f(p + n, bi, TensorRole::BlockCore, t); };
    core("ln1_gain", blk.ln1_gain);
    core("ln1_bias", blk.ln1_bias);
    for (std::size_t h = 0; h < blk.wq.size(); ++h) {
      const std::string hs = "head" + std::to_string(h) + ".";
      core(hs + "wq", blk.wq[h]);
      core(hs + "bq", blk.bq[h]);
      core(hs + "wk", blk.wk[h]);
      core(hs + "bk", blk.bk[h]);
      core(hs + "wv", blk.wv[h]);
      core(hs + "bv", blk.bv[h]);
      core(hs + "wo", blk.wo[h]);
    }
    core("bo", blk.bo);
    core("ln2_gain", blk.ln2_gain);
    core("ln2_bias", blk.ln2_bias);
    core("ffn_w1", blk.ffn_w1);
    core("ffn_b1", blk.ffn_b1);
    core("ffn_w2", blk.ffn_w2);
    core("ffn_b2", blk.ffn_b2);
    if (blk.has_parallel) {
      f(p + "parallel_w", bi, TensorRole::Parallel, blk.parallel_w);
      f(p + "parallel_b", bi, TensorRole::Parallel, blk.parallel_b);
    }
  }
}

template <class T>
EncoderT<T> make_skeleton(const EncoderConfig& cfg) {
  EncoderT<T> e;
  e.blocks.resize(static_cast<std::size_t>(cfg.layers));
  for (int b = 1; b <= cfg.layers; ++b) {
    auto& blk = e.blocks[static_cast<std::size_t>(b - 1)];
    const auto h = static_cast<std::size_t>(cfg.heads);
    for (auto* v : {&blk.wq, &blk.bq, &blk.wk, &blk.bk, &blk.wv, &blk.bv, &blk.wo}) v->resize(h);
    blk.has_parallel = cfg.group_of(b) == 2;
  }
  return e;
}

inline std::size_t parameter_count(const EncoderParams& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, int, TensorRole, const Matrix& t) { n += t.size(); });
  return n;
}

/// Random init: weights ~ N(0, 1/fan_in), biases 0, layer-norm gains 1,
/// parallel linears exactly zero.
inline EncoderParams init_params(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto randn = [&](std::size_t r, std::size_t c, double sd) {
    Matrix m(r, c);
    for (double& v : m.flat()) v = sd * normal(rng);
    return m;
  };
  const auto d = static_cast<std::size_t>(cfg.dim), dh = static_cast<std::size_t>(cfg.head_dim()),
             f = static_cast<std::size_t>(cfg.ffn_dim), pin = static_cast<std::size_t>(cfg.patch_input_dim);
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));

  EncoderParams p = make_skeleton<Matrix>(cfg);
  p.patch_embed = randn(pin, d, 1.0 / std::sqrt(static_cast<double>(pin)));
  p.cls = randn(1, d, 0.02);
  for (auto& blk : p.blocks) {
    blk.ln1_gain = Matrix(1, d, 1.0);
    blk.ln1_bias = Matrix(1, d);
    for (std::size_t h = 0; h < blk.wq.size(); ++h) {
      blk.wq[h] = randn(d, dh, sd_d);
      blk.bq[h] = Matrix(1, dh);
      blk.wk[h] = randn(d, dh, sd_d);
      blk.bk[h] = Matrix(1, dh);
      blk.wv[h] = randn(d, dh, sd_d);
      blk.bv[h] = Matrix(1, dh);
      blk.wo[h] = randn(dh, d, 1.0 / std::sqrt(static_cast<double>(d)));
    }
    blk.bo = Matrix(1, d);
    blk.ln2_gain = Matrix(1, d, 1.0);
    blk.ln2_bias = Matrix(1, d);
    blk.ffn_w1 = randn(d, f, sd_d);
    blk.ffn_b1 = Matrix(1, f);
    blk.ffn_w2 = randn(f, d, 1.0 / std::sqrt(static_cast<double>(f)));
    blk.ffn_b2 = Matrix(1, d);
    if (blk.has_parallel) {
      blk.parallel_w = Matrix(d, d);
      blk.parallel_b = Matrix(1, d);
    }
  }
  return p;
}

/// One flag per tensor in canonical order; true = receives gradients.
struct TrainableMask {
  std::vector<bool> tensors;

  std::size_t trainable_count() const {
    return static_cast<std::size_t>(std::ranges::count(tensors, true));
  }
};

/// Group 1 and the embedding frozen; group 2 only its parallel linears; group 3 fully trainable.
inline TrainableMask apply_grouping(const EncoderParams& params, const EncoderConfig& cfg) {
  cfg.validate();
  if (params.blocks.size() != static_cast<std::size_t>(cfg.layers))
    throw Error(ErrorKind::BadGrouping, "parameter blocks do not match config layers");
  TrainableMask mask;
  for_each_tensor(params, [&](const std::string&, int block, TensorRole role, const Matrix&) {
    bool on = false;
    if (role == TensorRole::Parallel) {
      on = cfg.group_of(block) == 2;
    } else if (role == TensorRole::BlockCore) {
      on = cfg.group_of(block) == 3;
    }
    mask.tensors.push_back(on);
  });
  return mask;
}

inline TrainableMask all_trainable(const EncoderParams& params) {
  TrainableMask mask;
  for_each_tensor(params, [&](const std::string&, int, TensorRole, const Matrix&) { mask.tensors.push_back(true); });
  return mask;
}

inline std::vector<Matrix*> tensor_pointers(EncoderParams& p) {
  std::vector<Matrix*> out;
  for_each_tensor(p, [&](const std::string&, int, TensorRole, Matrix& t) { out.push_back(&t); });
  return out;
}

inline std::vector<const Matrix*> tensor_pointers(const EncoderParams& p) {
  std::vector<const Matrix*> out;
  for_each_tensor(p, [&](const std::string&, int, TensorRole, const Matrix& t) { out.push_back(&t); });
  return out;
}

/// Places every tensor on the tape; masked-out tensors become non-differentiable leaves.
inline BoundParams bind(ad::Tape& tape, const EncoderParams& params, const EncoderConfig& cfg,
                        const TrainableMask* mask = nullptr) {
  BoundParams bound = make_skeleton<ad::Var>(cfg);
  std::vector<ad::Var*> slots;
  for_each_tensor(bound, [&](const std::string&, int, TensorRole, ad::Var& v) { slots.push_back(&v); });
  const auto src = tensor_pointers(params);
  if (src.size() != slots.size()) throw Error(ErrorKind::ShapeMismatch, "parameters do not match config");
  if (mask && mask->tensors.size() != src.size()) throw Error(ErrorKind::ShapeMismatch, "mask size mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    const bool rg = mask ? mask->tensors[i] : false;
    *slots[i] = tape.parameter(*src[i], rg);
  }
  return bound;
}

/// Collects gradients for every tensor in canonical order (zeros when untouched).
inline std::vector<Matrix> gradients(const ad::Tape& tape, const BoundParams& bound) {
  std::vector<Matrix> out;
  for_each_tensor(bound, [&](const std::string&, int, TensorRole, const ad::Var& v) { out.push_back(tape.grad(v)); });
  return out;
}

// ------------------------------------------------------------------ forward

namespace detail {

inline ad::Var ffn(ad::Tape& t, const BlockT<ad::Var>& blk, ad::Var u) {
  return ad::affine(t, ad::gelu(t, ad::affine(t, u, blk.ffn_w1, blk.ffn_b1)), blk.ffn_w2, blk.ffn_b2);
}

inline ad::Var value_path(ad::Tape& t, const BlockT<ad::Var>& blk, ad::Var u) {
  ad::Var acc{};
  for (std::size_t h = 0; h < blk.wv.size(); ++h) {
    ad::Var o = ad::matmul(t, ad::affine(t, u, blk.wv[h], blk.bv[h]), blk.wo[h]);
    acc = h == 0 ? o : ad::add(t, acc, o);
  }
  return ad::add_row(t, acc, blk.bo);
}

inline ad::Var attention(ad::Tape& t, const BlockT<ad::Var>& blk, ad::Var u, double inv_sqrt_dh) {
  ad::Var acc{};
  for (std::size_t h = 0; h < blk.wq.size(); ++h) {
    ad::Var q = ad::affine(t, u, blk.wq[h], blk.bq[h]);
    ad::Var k = ad::affine(t, u, blk.wk[h], blk.bk[h]);
    ad::Var v = ad::affine(t, u, blk.wv[h], blk.bv[h]);
    ad::Var a = ad::softmax_rows(t, ad::scale(t, ad::matmul_nt(t, q, k), inv_sqrt_dh));
    ad::Var o = ad::matmul(t, ad::matmul(t, a, v), blk.wo[h]);
    acc = h == 0 ? o : ad::add(t, acc, o);
  }
  return ad::add_row(t, acc, blk.bo);
}

inline ad::Var finish_block(ad::Tape& t, const BlockT<ad::Var>& blk, ad::Var x, ad::Var mixed) {
  ad::Var h = ad::add(t, x, mixed);
  ad::Var y = ad::add(t, h, ffn(t, blk, ad::layer_norm(t, h, blk.ln2_gain, blk.ln2_bias)));
  if (blk.has_parallel) y = ad::add(t, y, ad::affine(t, x, blk.parallel_w, blk.parallel_b));
  return y;
}

}  // namespace detail

inline ad::Var block_forward(ad::Tape& t, const BlockT<ad::Var>& blk, const EncoderConfig& cfg, ad::Var x) {
  ad::Var u = ad::layer_norm(t, x, blk.ln1_gain, blk.ln1_bias);
  const double inv = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
  return detail::finish_block(t, blk, x, detail::attention(t, blk, u, inv));
}

/// The block with attention mixing replaced by the per-token value path.
inline ad::Var block_pseudo_forward(ad::Tape& t, const BlockT<ad::Var>& blk, ad::Var x) {
  ad::Var u = ad::layer_norm(t, x, blk.ln1_gain, blk.ln1_bias);
  return detail::finish_block(t, blk, x, detail::value_path(t, blk, u));
}

/// Token features after the patch embedding (index 0) and after each block (1..L).
inline std::vector<ad::Var> forward_sample(ad::Tape& t, const BoundParams& p, const EncoderConfig& cfg,
                                           const Matrix& patches) {
  if (patches.rows() != static_cast<std::size_t>(cfg.patch_count) ||
      patches.cols() != static_cast<std::size_t>(cfg.patch_input_dim))
    throw Error(ErrorKind::ShapeMismatch, "patch tokens must be patch_count x patch_input_dim");
  ad::Var emb = ad::matmul(t, t.constant(patches), p.patch_embed);
  ad::Var parts[] = {p.cls, emb};
  std::vector<ad::Var> layers{ad::concat_rows(t, parts)};
  for (const auto& blk : p.blocks) layers.push_back(block_forward(t, blk, cfg, layers.back()));
  return layers;
}

/// Maps features taken after block `from_layer` to output space through blocks from_layer+1..L.
inline ad::Var pseudo_forward(ad::Tape& t, const BoundParams& p, ad::Var z, int from_layer) {
  const int layers = static_cast<int>(p.blocks.size());
  if (from_layer < 0 || from_layer > layers)
    throw Error(ErrorKind::BadLayer, "layer " + std::to_string(from_layer) + " outside [0, " +
                                         std::to_string(layers) + "]");
  for (int b = from_layer; b < layers; ++b) z = block_pseudo_forward(t, p.blocks[static_cast<std::size_t>(b)], z);
  return z;
}

/// Per-sample activations.
struct ActivationTrace {
  Matrix input;               // (M+1) x d embedded tokens
  std::vector<Matrix> layers; // L entries, output of each block

  const Matrix& output() const { return layers.back(); }
  Matrix cls() const {
    Matrix c(1, output().cols());
    std::ranges::copy(output().row(0), c.row(0).begin());
    return c;
  }
};

inline ActivationTrace encode(const EncoderParams& params, const EncoderConfig& cfg, const Matrix& patches) {
  ad::Tape t(false);
  const BoundParams p = bind(t, params, cfg);
  const auto vars = forward_sample(t, p, cfg, patches);
  ActivationTrace tr;
  tr.input = t.value(vars.front());
  for (std::size_t i = 1; i < vars.size(); ++i) tr.layers.push_back(t.value(vars[i]));
  return tr;
}

inline std::vector<ActivationTrace> encode(const EncoderParams& params, const EncoderConfig& cfg,
                                           std::span<const Matrix> batch) {
  std::vector<ActivationTrace> out;
  out.reserve(batch.size());
  for (const auto& s : batch) out.push_back(encode(params, cfg, s));
  return out;
}

/// Raw [CLS] output rows for a batch (N x d), not normalized.
inline Matrix encode_cls(const EncoderParams& params, const EncoderConfig& cfg, std::span<const Matrix> batch) {
  Matrix out(batch.size(), static_cast<std::size_t>(cfg.dim));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto tr = encode(params, cfg, batch[i]);
    std::ranges::copy(tr.output().row(0), out.row(i).begin());
  }
  return out;
}

inline Matrix pseudo_forward(const Matrix& z, const EncoderParams& params, const EncoderConfig& cfg, int from_layer) {
  ad::Tape t(false);
  const BoundParams p = bind(t, params, cfg);
  return t.value(pseudo_forward(t, p, t.constant(z), from_layer));
}

}  // namespace mps::enc
