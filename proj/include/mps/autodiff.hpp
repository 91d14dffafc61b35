#pragma once

// Minimal reverse-mode differentiation over dense matrices. A Tape records
// nodes in creation order; backward() walks them in reverse.

#include <mps/linalg.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

namespace mps::ad {

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const noexcept { return grad_enabled_; }

  Var constant(Matrix value) { return push(std::move(value), false, {}); }
  Var parameter(Matrix value, bool requires_grad = true) {
    return push(std::move(value), requires_grad && grad_enabled_, {});
  }

  const Matrix& value(Var v) const { return nodes_[v.id].value; }
  double scalar(Var v) const { return nodes_[v.id].value(0, 0); }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of the last backward() target with respect to v (zeros if untouched).
  Matrix grad(Var v) const {
    const Node& n = nodes_[v.id];
    return n.grad.empty() ? Matrix(n.value.rows(), n.value.cols()) : n.grad;
  }

  void backward(Var loss) {
    for (auto& n : nodes_) n.grad = Matrix();
    Node& root = nodes_[loss.id];
    if (root.value.size() != 1) throw Error(ErrorKind::ShapeMismatch, "backward needs a scalar target");
    root.grad = Matrix(1, 1, 1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // --- used by op implementations ---
  using Backward = std::function<void(Tape&, const Matrix& upstream)>;

  Var record(Matrix value, std::span<const Var> inputs, Backward bw) {
    bool rg = false;
    if (grad_enabled_)
      for (Var in : inputs) rg = rg || nodes_[in.id].requires_grad;
    return push(std::move(value), rg, rg ? std::move(bw) : Backward{});
  }

  /// grad(v) += g, ignored for nodes that do not require gradients.
  void accumulate(Var v, const Matrix& g) {
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = g;
      return;
    }
    auto dst = n.grad.flat();
    auto src = g.flat();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Matrix value, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(value), Matrix(), rg, std::move(bw)});
    return Var{nodes_.size() - 1};
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------- linear ops

inline Var matmul(Tape& t, Var a, Var b) {
  Var in[] = {a, b};
  return t.record(mps::matmul(t.value(a), t.value(b)), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, matmul_nt(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(tp.value(a), g));
  });
}

/// a * b^T
inline Var matmul_nt(Tape& t, Var a, Var b) {
  Var in[] = {a, b};
  return t.record(mps::matmul_nt(t.value(a), t.value(b)), in, [a, b](Tape& tp, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, mps::matmul(g, tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, matmul_tn(g, tp.value(a)));
  });
}

inline Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] += bv.flat()[i];
  Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

inline Var sub(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Matrix out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.flat()[i] -= bv.flat()[i];
  Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      Matrix neg = g;
      for (double& v : neg.flat()) v = -v;
      tp.accumulate(b, neg);
    }
  });
}

/// a + broadcast of the 1 x c row vector b.
inline Var add_row(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (bv.rows() != 1 || bv.cols() != av.cols()) throw Error(ErrorKind::ShapeMismatch, "add_row bias shape");
  Matrix out = av;
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += bv(0, j);
  Var in[] = {a, b};
  return t.record(std::move(out), in, [a, b](Tape& tp, const Matrix& g) {
    tp.accumulate(a, g);
    if (tp.requires_grad(b)) {
      Matrix gb(1, g.cols());
      for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) gb(0, j) += g(i, j);
      tp.accumulate(b, gb);
    }
  });
}

/// x W + b
inline Var affine(Tape& t, Var x, Var w, Var b) { return add_row(t, matmul(t, x, w), b); }

inline Var scale(Tape& t, Var a, double c) {
  Matrix out = t.value(a);
  for (double& v : out.flat()) v *= c;
  Var in[] = {a};
  return t.record(std::move(out), in, [a, c](Tape& tp, const Matrix& g) {
    Matrix ga = g;
    for (double& v : ga.flat()) v *= c;
    tp.accumulate(a, ga);
  });
}

/// a scaled by the 1 x 1 variable s.
inline Var scale_by(Tape& t, Var a, Var s) {
  const double sv = t.scalar(s);
  Matrix out = t.value(a);
  for (double& v : out.flat()) v *= sv;
  Var in[] = {a, s};
  return t.record(std::move(out), in, [a, s](Tape& tp, const Matrix& g) {
    const double sv2 = tp.scalar(s);
    if (tp.requires_grad(a)) {
      Matrix ga = g;
      for (double& v : ga.flat()) v *= sv2;
      tp.accumulate(a, ga);
    }
    if (tp.requires_grad(s)) {
      const Matrix& av = tp.value(a);
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g.flat()[i] * av.flat()[i];
      tp.accumulate(s, Matrix(1, 1, acc));
    }
  });
}

inline Var exp_scalar(Tape& t, Var a) {
  const double v = std::exp(t.scalar(a));
  Var in[] = {a};
  return t.record(Matrix(1, 1, v), in, [a, v](Tape& tp, const Matrix& g) { tp.accumulate(a, Matrix(1, 1, g(0, 0) * v)); });
}

/// Weighted sum of scalar variables.
inline Var weighted_sum(Tape& t, std::span<const Var> terms, std::span<const double> weights) {
  double v = 0.0;
  for (std::size_t i = 0; i < terms.size(); ++i) v += weights[i] * t.scalar(terms[i]);
  std::vector<Var> ins(terms.begin(), terms.end());
  std::vector<double> ws(weights.begin(), weights.end());
  return t.record(Matrix(1, 1, v), ins, [ins, ws](Tape& tp, const Matrix& g) {
    for (std::size_t i = 0; i < ins.size(); ++i) tp.accumulate(ins[i], Matrix(1, 1, ws[i] * g(0, 0)));
  });
}

inline Var row(Tape& t, Var a, std::size_t r) {
  const Matrix& av = t.value(a);
  Matrix out(1, av.cols());
  std::ranges::copy(av.row(r), out.row(0).begin());
  Var in[] = {a};
  return t.record(std::move(out), in, [a, r](Tape& tp, const Matrix& g) {
    const Matrix& av2 = tp.value(a);
    Matrix ga(av2.rows(), av2.cols());
    std::ranges::copy(g.row(0), ga.row(r).begin());
    tp.accumulate(a, ga);
  });
}

inline Var concat_rows(Tape& t, std::span<const Var> parts) {
  std::vector<Matrix> vals;
  vals.reserve(parts.size());
  for (Var p : parts) vals.push_back(t.value(p));
  std::vector<Var> ins(parts.begin(), parts.end());
  return t.record(mps::concat_rows(vals), ins, [ins](Tape& tp, const Matrix& g) {
    std::size_t r0 = 0;
    for (Var p : ins) {
      const std::size_t nr = tp.value(p).rows();
      if (tp.requires_grad(p)) {
        Matrix gp(nr, g.cols());
        for (std::size_t i = 0; i < nr; ++i) std::ranges::copy(g.row(r0 + i), gp.row(i).begin());
        tp.accumulate(p, gp);
      }
      r0 += nr;
    }
  });
}

// ------------------------------------------------------------ nonlinear ops

namespace detail {
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;
}  // namespace detail

/// tanh-form GELU.
inline double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(detail::kGeluC * (x + detail::kGeluA * x * x * x)));
}

inline double gelu_grad(double x) {
  const double u = detail::kGeluC * (x + detail::kGeluA * x * x * x);
  const double th = std::tanh(u);
  const double du = detail::kGeluC * (1.0 + 3.0 * detail::kGeluA * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline Var gelu(Tape& t, Var a) {
  Matrix out = t.value(a);
  for (double& v : out.flat()) v = gelu(v);
  Var in[] = {a};
  return t.record(std::move(out), in, [a](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(a);
    Matrix ga = g;
    for (std::size_t i = 0; i < ga.size(); ++i) ga.flat()[i] *= gelu_grad(x.flat()[i]);
    tp.accumulate(a, ga);
  });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Row-wise layer norm with 1 x c gain and bias.
inline Var layer_norm(Tape& t, Var a, Var gain, Var bias) {
  const Matrix& x = t.value(a);
  const std::size_t n = x.rows(), c = x.cols();
  Matrix xhat(n, c);
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (double v : x.row(i)) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : x.row(i)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < c; ++j) xhat(i, j) = (x(i, j) - mean) * inv_std[i];
  }
  const Matrix& gv = t.value(gain);
  const Matrix& bv = t.value(bias);
  Matrix out(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = xhat(i, j) * gv(0, j) + bv(0, j);
  Var in[] = {a, gain, bias};
  return t.record(std::move(out), in,
                  [a, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, const Matrix& g) {
                    const std::size_t n2 = g.rows(), c2 = g.cols();
                    const Matrix& gv2 = tp.value(gain);
                    if (tp.requires_grad(gain) || tp.requires_grad(bias)) {
                      Matrix gg(1, c2), gb(1, c2);
                      for (std::size_t i = 0; i < n2; ++i)
                        for (std::size_t j = 0; j < c2; ++j) {
                          gg(0, j) += g(i, j) * xhat(i, j);
                          gb(0, j) += g(i, j);
                        }
                      tp.accumulate(gain, gg);
                      tp.accumulate(bias, gb);
                    }
                    if (tp.requires_grad(a)) {
                      Matrix ga(n2, c2);
                      const double cd = static_cast<double>(c2);
                      for (std::size_t i = 0; i < n2; ++i) {
                        double s1 = 0.0, s2 = 0.0;
                        for (std::size_t j = 0; j < c2; ++j) {
                          const double dxh = g(i, j) * gv2(0, j);
                          s1 += dxh;
                          s2 += dxh * xhat(i, j);
                        }
                        for (std::size_t j = 0; j < c2; ++j) {
                          const double dxh = g(i, j) * gv2(0, j);
                          ga(i, j) = inv_std[i] * (dxh - s1 / cd - xhat(i, j) * s2 / cd);
                        }
                      }
                      tp.accumulate(a, ga);
                    }
                  });
}

inline Var softmax_rows(Tape& t, Var a) {
  Matrix out = t.value(a);
  for (std::size_t i = 0; i < out.rows(); ++i) {
    auto r = out.row(i);
    const double mx = *std::ranges::max_element(r);
    double z = 0.0;
    for (double& v : r) z += (v = std::exp(v - mx));
    for (double& v : r) v /= z;
  }
  Matrix probs = out;
  Var in[] = {a};
  return t.record(std::move(out), in, [a, probs = std::move(probs)](Tape& tp, const Matrix& g) {
    Matrix ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double s = dot(g.row(i), probs.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) = probs(i, j) * (g(i, j) - s);
    }
    tp.accumulate(a, ga);
  });
}

/// Divide every row by its Euclidean norm.
inline Var normalize_rows(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  Matrix out = x;
  std::vector<double> norms(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    norms[i] = norm2(x.row(i));
    if (norms[i] <= kZeroRowNorm) throw Error(ErrorKind::ZeroRow, "cannot normalize a zero row");
    for (double& v : out.row(i)) v /= norms[i];
  }
  Matrix z = out;
  Var in[] = {a};
  return t.record(std::move(out), in, [a, z = std::move(z), norms = std::move(norms)](Tape& tp, const Matrix& g) {
    Matrix ga(g.rows(), g.cols());
    for (std::size_t i = 0; i < g.rows(); ++i) {
      const double proj = dot(z.row(i), g.row(i));
      for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) = (g(i, j) - proj * z(i, j)) / norms[i];
    }
    tp.accumulate(a, ga);
  });
}

// ------------------------------------------------------------------ losses

/// w * Sum |a_ij|, subgradient sign(0) = 0.
inline Var sum_abs(Tape& t, Var a, double w) {
  double s = 0.0;
  for (double v : t.value(a).flat()) s += std::abs(v);
  Var in[] = {a};
  return t.record(Matrix(1, 1, w * s), in, [a, w](Tape& tp, const Matrix& g) {
    Matrix ga = tp.value(a);
    for (double& v : ga.flat()) v = w * g(0, 0) * (v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0));
    tp.accumulate(a, ga);
  });
}

/// w * Sum_ij a_ij c_ij for a constant matrix c.
inline Var sum_product(Tape& t, Var a, const Matrix& c, double w) {
  const Matrix& av = t.value(a);
  require_same_shape(av, c, "sum_product");
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += av.flat()[i] * c.flat()[i];
  Var in[] = {a};
  return t.record(Matrix(1, 1, w * s), in, [a, c, w](Tape& tp, const Matrix& g) {
    Matrix ga = c;
    for (double& v : ga.flat()) v *= w * g(0, 0);
    tp.accumulate(a, ga);
  });
}

/// Mean over rows of the Euclidean row norm (zero rows get zero gradient).
inline Var mean_row_norm(Tape& t, Var a) {
  const Matrix& x = t.value(a);
  std::vector<double> norms(x.rows());
  double s = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) s += (norms[i] = norm2(x.row(i)));
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  Var in[] = {a};
  return t.record(Matrix(1, 1, s * inv_n), in, [a, norms = std::move(norms), inv_n](Tape& tp, const Matrix& g) {
    const Matrix& x2 = tp.value(a);
    Matrix ga(x2.rows(), x2.cols());
    for (std::size_t i = 0; i < x2.rows(); ++i) {
      if (norms[i] == 0.0) continue;
      for (std::size_t j = 0; j < x2.cols(); ++j) ga(i, j) = g(0, 0) * inv_n * x2(i, j) / norms[i];
    }
    tp.accumulate(a, ga);
  });
}

namespace detail {
inline std::vector<double> log_softmax(std::span<const double> logits, std::span<const char> include = {}) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (include.empty() || include[j]) mx = std::max(mx, logits[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j)
    if (include.empty() || include[j]) z += std::exp(logits[j] - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t j = 0; j < logits.size(); ++j) out[j] = logits[j] - lse;
  return out;
}
}  // namespace detail

/// Mean cross entropy of row-wise softmax(logits) against integer labels.
inline Var cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Matrix& x = t.value(logits);
  if (x.rows() != labels.size()) throw Error(ErrorKind::ShapeMismatch, "cross_entropy label count");
  Matrix probs(x.rows(), x.cols());
  double loss = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto ls = detail::log_softmax(x.row(i));
    loss -= ls[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < x.cols(); ++j) probs(i, j) = std::exp(ls[j]);
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  std::vector<int> lab(labels.begin(), labels.end());
  Var in[] = {logits};
  return t.record(Matrix(1, 1, loss * inv_n), in,
                  [logits, probs = std::move(probs), lab = std::move(lab), inv_n](Tape& tp, const Matrix& g) {
                    Matrix ga = probs;
                    for (std::size_t i = 0; i < ga.rows(); ++i) ga(i, static_cast<std::size_t>(lab[i])) -= 1.0;
                    for (double& v : ga.flat()) v *= g(0, 0) * inv_n;
                    tp.accumulate(logits, ga);
                  });
}

/// Mean over rows of KL(softmax(reference_logits) || softmax(logits)); the reference is constant.
inline Var kl_rows(Tape& t, Var logits, const Matrix& reference_probs) {
  const Matrix& x = t.value(logits);
  require_same_shape(x, reference_probs, "kl_rows");
  Matrix q(x.rows(), x.cols());
  double kl = 0.0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto ls = detail::log_softmax(x.row(i));
    for (std::size_t j = 0; j < x.cols(); ++j) {
      q(i, j) = std::exp(ls[j]);
      const double p = reference_probs(i, j);
      if (p > 0.0) kl += p * (std::log(p) - ls[j]);
    }
  }
  const double inv_n = 1.0 / static_cast<double>(x.rows());
  Var in[] = {logits};
  return t.record(Matrix(1, 1, kl * inv_n), in,
                  [logits, q = std::move(q), reference_probs, inv_n](Tape& tp, const Matrix& g) {
                    Matrix ga(q.rows(), q.cols());
                    for (std::size_t i = 0; i < q.size(); ++i)
                      ga.flat()[i] = g(0, 0) * inv_n * (q.flat()[i] - reference_probs.flat()[i]);
                    tp.accumulate(logits, ga);
                  });
}

/// Supervised contrastive loss over precomputed logits (queries x supports):
/// mean over queries of -(1/|P_q|) Sum_{s in P_q} log softmax_{s' != self(q)}(logits_q)[s].
inline Var masked_contrastive(Tape& t, Var logits, std::span<const std::size_t> self_index,
                              const std::vector<std::vector<std::size_t>>& positives) {
  const Matrix& x = t.value(logits);
  const std::size_t nq = x.rows(), ns = x.cols();
  if (self_index.size() != nq || positives.size() != nq)
    throw Error(ErrorKind::ShapeMismatch, "masked_contrastive query count");
  Matrix ga_unit(nq, ns);
  double loss = 0.0;
  for (std::size_t q = 0; q < nq; ++q) {
    std::vector<char> inc(ns, 1);
    inc[self_index[q]] = 0;
    const auto ls = detail::log_softmax(x.row(q), inc);
    const auto& pos = positives[q];
    if (pos.empty()) throw Error(ErrorKind::EmptyPositives, "query has no positive support");
    const double inv_p = 1.0 / static_cast<double>(pos.size());
    for (std::size_t s : pos) loss -= inv_p * ls[s];
    // d/dlogits = softmax(excluding self) - (1/|P|) 1_P
    for (std::size_t j = 0; j < ns; ++j) ga_unit(q, j) = inc[j] ? std::exp(ls[j]) : 0.0;
    for (std::size_t s : pos) ga_unit(q, s) -= inv_p;
  }
  const double inv_q = 1.0 / static_cast<double>(nq);
  for (double& v : ga_unit.flat()) v *= inv_q;
  Var in[] = {logits};
  return t.record(Matrix(1, 1, loss * inv_q), in, [logits, ga_unit = std::move(ga_unit)](Tape& tp, const Matrix& g) {
    Matrix ga = ga_unit;
    for (double& v : ga.flat()) v *= g(0, 0);
    tp.accumulate(logits, ga);
  });
}

}  // namespace mps::ad
