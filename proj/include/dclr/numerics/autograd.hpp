#pragma once

// Tape-based reverse-mode differentiation over BasicTensor.
//
// A Tape owns every value produced during one forward pass. Ops append a node
// holding the result and a closure that pushes the node's gradient to its
// inputs. Nodes are appended in topological order, so backward() is a single
// reverse sweep. One training step owns one tape; tapes are not thread-safe.

#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "dclr/numerics/ops.hpp"
#include "dclr/numerics/tensor.hpp"

namespace dclr {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const BasicTensor<T>& value() const { return tape_->value(id_); }
  /// Gradient after backward(); zeros of value().shape() when nothing reached this node.
  BasicTensor<T> grad() const { return tape_->grad(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t id() const noexcept { return id_; }
  Tape<T>& tape() const noexcept { return *tape_; }
  bool requires_grad() const { return tape_->requires_grad(id_); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const BasicTensor<T>& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(BasicTensor<T> v) { return push(std::move(v), false, nullptr); }
  Var<T> parameter(BasicTensor<T> v) { return push(std::move(v), true, nullptr); }

  /// Appends an op result. `needs_grad` should be true iff some input requires grad.
  Var<T> record(BasicTensor<T> v, bool needs_grad, Backward bw, const char* op) {
    numerics::check_finite(v, op);
    return push(std::move(v), needs_grad, needs_grad ? std::move(bw) : nullptr);
  }

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  BasicTensor<T> grad(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.has_grad ? n.grad : BasicTensor<T>::zeros(n.value.shape());
  }

  /// Materializes and returns the gradient buffer of node `id` for accumulation.
  BasicTensor<T>& grad_ref(std::size_t id) {
    auto& n = nodes_.at(id);
    if (!n.has_grad) {
      n.grad = BasicTensor<T>::zeros(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      n.grad = {};
      n.has_grad = false;
    }
  }

  void backward(const Var<T>& loss) {
    if (&loss.tape() != this) throw ShapeError("backward: loss belongs to a different tape");
    if (loss.value().numel() != 1)
      throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    grad_ref(loss.id()).fill(T(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, n.grad);
    }
    for (auto& n : nodes_)
      if (n.has_grad) numerics::check_finite(n.grad, "backward");
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    Backward backward;
  };

  Var<T> push(BasicTensor<T> v, bool rg, Backward bw) {
    nodes_.push_back(Node{std::move(v), {}, false, rg, std::move(bw)});
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
};

namespace ag {

namespace detail {
template <typename T>
void same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (&a.tape() != &b.tape()) throw ShapeError(std::string(op) + ": operands on different tapes");
}
template <typename T>
void same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  same_tape(a, b, op);
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace detail

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, std::size_t stride = 1, std::size_t pad = 0) {
  detail::same_tape(x, w, "conv2d");
  auto y = numerics::conv2d_forward(x.value(), w.value(), stride, pad);
  const auto xi = x.id(), wi = w.id();
  const bool xg = x.requires_grad(), wg = w.requires_grad();
  return x.tape().record(std::move(y), xg || wg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           numerics::conv2d_backward(t.value(xi), t.value(wi), g, stride, pad,
                                                     xg ? &t.grad_ref(xi) : nullptr,
                                                     wg ? &t.grad_ref(wi) : nullptr);
                         },
                         "conv2d");
}

/// Adds bias[c] along dim 1 of a [b,c,...] tensor.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
  detail::same_tape(x, bias, "add_bias");
  const auto& xv = x.value();
  numerics::require(xv.rank() >= 2 && bias.value().rank() == 1 && bias.value().dim(0) == xv.dim(1),
                    "add_bias: bias " + shape_str(bias.shape()) + " does not match channels of " +
                        shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), C = xv.dim(1), P = xv.numel() / (B * C);
  BasicTensor<T> y = xv;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) y[(b * C + c) * P + p] += bias.value()[c];
  const auto xi = x.id(), bi = bias.id();
  const bool xg = x.requires_grad(), bg = bias.requires_grad();
  return x.tape().record(std::move(y), xg || bg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           if (xg) t.grad_ref(xi) += g;
                           if (bg) {
                             auto& gb = t.grad_ref(bi);
                             for (std::size_t b = 0; b < B; ++b)
                               for (std::size_t c = 0; c < C; ++c) {
                                 T s = 0;
                                 for (std::size_t p = 0; p < P; ++p) s += g[(b * C + c) * P + p];
                                 gb[c] += s;
                               }
                           }
                         },
                         "add_bias");
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v = v > T(0) ? v : T(0);
  const auto xi = x.id();
  return x.tape().record(std::move(y), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& xv = t.value(xi);
                           auto& gx = t.grad_ref(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i)
                             if (xv[i] > T(0)) gx[i] += g[i];
                         },
                         "relu");
}

template <typename T>
Var<T> maxpool2d(const Var<T>& x) {
  auto r = numerics::maxpool2x2_forward(x.value());
  const auto xi = x.id();
  return x.tape().record(std::move(r.out), x.requires_grad(),
                         [=, arg = std::move(r.argmax)](Tape<T>& t, const BasicTensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[arg[i]] += g[i];
                         },
                         "maxpool2d");
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
  const auto xi = x.id();
  return x.tape().record(numerics::upsample2x_forward(x.value()), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           numerics::upsample2x_backward(g, t.grad_ref(xi));
                         },
                         "upsample2x");
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  const auto xi = x.id();
  const std::size_t P = x.value().dim(2) * x.value().dim(3);
  return x.tape().record(numerics::global_avg_pool_forward(x.value()), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           const T inv = T(1) / static_cast<T>(P);
                           for (std::size_t bc = 0; bc < g.numel(); ++bc)
                             for (std::size_t p = 0; p < P; ++p) gx[bc * P + p] += g[bc] * inv;
                         },
                         "global_avg_pool");
}

/// Concatenates two [b,c,h,w] tensors along the channel dimension.
template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
  detail::same_tape(a, b, "concat_channels");
  const auto &av = a.value(), &bv = b.value();
  numerics::require(av.rank() == 4 && bv.rank() == 4 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(2) &&
                        av.dim(3) == bv.dim(3),
                    "concat_channels: incompatible " + shape_str(av.shape()) + " and " + shape_str(bv.shape()));
  const std::size_t B = av.dim(0), ca = av.dim(1), cb = bv.dim(1), P = av.dim(2) * av.dim(3);
  BasicTensor<T> y({B, ca + cb, av.dim(2), av.dim(3)});
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(av.data().begin() + n * ca * P, ca * P, y.data().begin() + n * (ca + cb) * P);
    std::copy_n(bv.data().begin() + n * cb * P, cb * P, y.data().begin() + (n * (ca + cb) + ca) * P);
  }
  const auto ai = a.id(), bi = b.id();
  const bool ag_ = a.requires_grad(), bg = b.requires_grad();
  return a.tape().record(std::move(y), ag_ || bg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           for (std::size_t n = 0; n < B; ++n) {
                             if (ag_) {
                               auto& ga = t.grad_ref(ai);
                               for (std::size_t i = 0; i < ca * P; ++i) ga[n * ca * P + i] += g[n * (ca + cb) * P + i];
                             }
                             if (bg) {
                               auto& gb = t.grad_ref(bi);
                               for (std::size_t i = 0; i < cb * P; ++i)
                                 gb[n * cb * P + i] += g[(n * (ca + cb) + ca) * P + i];
                             }
                           }
                         },
                         "concat_channels");
}

/// a[m,k] * w[n,k]^T, the row-vector form of a dense layer.
template <typename T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& w) {
  detail::same_tape(a, w, "matmul");
  const auto ai = a.id(), wi = w.id();
  const bool ag_ = a.requires_grad(), wg = w.requires_grad();
  return a.tape().record(numerics::matmul_nt(a.value(), w.value()), ag_ || wg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           using numerics::ConstMatMap;
                           using numerics::MatMap;
                           const auto &av = t.value(ai), &wv = t.value(wi);
                           const std::size_t m = av.dim(0), k = av.dim(1), n = wv.dim(0);
                           ConstMatMap<T> gm(g.data().data(), m, n);
                           if (ag_) {
                             auto& ga = t.grad_ref(ai);
                             numerics::RowMatrix<T> tmp = gm * ConstMatMap<T>(wv.data().data(), n, k);
                             MatMap<T>(ga.data().data(), m, k) += tmp;
                           }
                           if (wg) {
                             auto& gw = t.grad_ref(wi);
                             numerics::RowMatrix<T> tmp = gm.transpose() * ConstMatMap<T>(av.data().data(), m, k);
                             MatMap<T>(gw.data().data(), n, k) += tmp;
                           }
                         },
                         "matmul");
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  const auto xi = x.id();
  return x.tape().record(BasicTensor<T>::scalar(x.value().sum()), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           for (auto& v : gx.data()) v += g[0];
                         },
                         "sum");
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  const auto xi = x.id();
  const T inv = T(1) / static_cast<T>(x.value().numel());
  return x.tape().record(BasicTensor<T>::scalar(x.value().sum() * inv), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           for (auto& v : gx.data()) v += g[0] * inv;
                         },
                         "mean");
}

template <typename T>
Var<T> square(const Var<T>& x) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v *= v;
  const auto xi = x.id();
  return x.tape().record(std::move(y), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& xv = t.value(xi);
                           auto& gx = t.grad_ref(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += T(2) * xv[i] * g[i];
                         },
                         "square");
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "add");
  BasicTensor<T> y = a.value();
  y += b.value();
  const auto ai = a.id(), bi = b.id();
  const bool ag_ = a.requires_grad(), bg = b.requires_grad();
  return a.tape().record(std::move(y), ag_ || bg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           if (ag_) t.grad_ref(ai) += g;
                           if (bg) t.grad_ref(bi) += g;
                         },
                         "add");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::same_shape(a, b, "mul");
  BasicTensor<T> y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  const auto ai = a.id(), bi = b.id();
  const bool ag_ = a.requires_grad(), bg = b.requires_grad();
  return a.tape().record(std::move(y), ag_ || bg,
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto &av = t.value(ai), &bv = t.value(bi);
                           if (ag_) {
                             auto& ga = t.grad_ref(ai);
                             for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
                           }
                           if (bg) {
                             auto& gb = t.grad_ref(bi);
                             for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
                           }
                         },
                         "mul");
}

template <typename T>
Var<T> scale(const Var<T>& x, T c) {
  BasicTensor<T> y = x.value();
  y *= c;
  const auto xi = x.id();
  return x.tape().record(std::move(y), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           auto& gx = t.grad_ref(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += c * g[i];
                         },
                         "scale");
}

/// x + c elementwise.
template <typename T>
Var<T> shift(const Var<T>& x, T c) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v += c;
  const auto xi = x.id();
  return x.tape().record(std::move(y), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) { t.grad_ref(xi) += g; }, "shift");
}

template <typename T>
Var<T> exp(const Var<T>& x) {
  BasicTensor<T> y = x.value();
  for (auto& v : y.data()) v = std::exp(v);
  const auto xi = x.id(), yi = x.tape().size();
  return x.tape().record(std::move(y), x.requires_grad(),
                         [=](Tape<T>& t, const BasicTensor<T>& g) {
                           const auto& yv = t.value(yi);
                           auto& gx = t.grad_ref(xi);
                           for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += yv[i] * g[i];
                         },
                         "exp");
}

}  // namespace ag
}  // namespace dclr
