#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "hlm/rng.hpp"
#include "hlm/tensor.hpp"

// Free-function forward ops over TensorT. Every op that can influence a loss
// records a backward closure; ops on non-grad inputs build no graph at all.
// Elementwise binaries broadcast the right operand when its shape is a
// suffix of the left operand's shape (bias adds, gain scaling, row masks).

namespace hlm {

namespace detail {

template <typename S>
using Arr = typename TensorNode<S>::Array;

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

template <typename S, typename F>
TensorT<S> make_op(Shape shape, std::vector<TensorT<S>> parents, F&& bwd) {
  TensorT<S> out = TensorT<S>::raw(std::move(shape));
  bool rg = false;
  for (const auto& p : parents) rg = rg || p.requires_grad();
  out.set_requires_grad(rg);
  if (rg) {
    auto& node = *out.node();
    node.parents.reserve(parents.size());
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::forward<F>(bwd);
  }
  return out;
}

// Returns the grad array of `n`, allocating it zeroed on first touch, or
// nullptr when the node does not participate in differentiation.
template <typename S>
Arr<S>* grad_of(const std::shared_ptr<TensorNode<S>>& n) {
  if (!n->requires_grad) return nullptr;
  if (n->grad.size() == 0) {
    n->grad.resize(n->value.size());
    n->grad.setZero();
  }
  return &n->grad;
}

inline void check(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

// B broadcasts onto A iff B's shape is a suffix of A's shape (scalars
// qualify trivially). Returns the number of leading blocks.
template <typename S>
Eigen::Index broadcast_blocks(const TensorT<S>& a, const TensorT<S>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  check(sb.size() <= sa.size(), std::string(op) + ": cannot broadcast " + shape_str(sb) +
                                    " onto " + shape_str(sa));
  for (std::size_t i = 0; i < sb.size(); ++i) {
    check(sb[sb.size() - 1 - i] == sa[sa.size() - 1 - i],
          std::string(op) + ": shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  }
  return b.size() == 0 ? 0 : a.size() / b.size();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
  const Eigen::Index blocks = detail::broadcast_blocks(a, b, "add");
  const Eigen::Index bs = b.size();
  TensorT<S> out = detail::make_op<S>(
      a.shape(), {a, b}, [an = a.node(), bn = b.node(), blocks, bs](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad;
        if (auto* gb = detail::grad_of<S>(bn)) {
          for (Eigen::Index g = 0; g < blocks; ++g) *gb += n.grad.segment(g * bs, bs);
        }
      });
  for (Eigen::Index g = 0; g < blocks; ++g)
    out.values().segment(g * bs, bs) = a.values().segment(g * bs, bs) + b.values();
  return out;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
  const Eigen::Index blocks = detail::broadcast_blocks(a, b, "sub");
  const Eigen::Index bs = b.size();
  TensorT<S> out = detail::make_op<S>(
      a.shape(), {a, b}, [an = a.node(), bn = b.node(), blocks, bs](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad;
        if (auto* gb = detail::grad_of<S>(bn)) {
          for (Eigen::Index g = 0; g < blocks; ++g) *gb -= n.grad.segment(g * bs, bs);
        }
      });
  for (Eigen::Index g = 0; g < blocks; ++g)
    out.values().segment(g * bs, bs) = a.values().segment(g * bs, bs) - b.values();
  return out;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
  const Eigen::Index blocks = detail::broadcast_blocks(a, b, "mul");
  const Eigen::Index bs = b.size();
  TensorT<S> out = detail::make_op<S>(
      a.shape(), {a, b}, [an = a.node(), bn = b.node(), blocks, bs](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index g = 0; g < blocks; ++g)
            ga->segment(g * bs, bs) += n.grad.segment(g * bs, bs) * bn->value;
        }
        if (auto* gb = detail::grad_of<S>(bn)) {
          for (Eigen::Index g = 0; g < blocks; ++g)
            *gb += n.grad.segment(g * bs, bs) * an->value.segment(g * bs, bs);
        }
      });
  for (Eigen::Index g = 0; g < blocks; ++g)
    out.values().segment(g * bs, bs) = a.values().segment(g * bs, bs) * b.values();
  return out;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S c) {
  TensorT<S> out = detail::make_op<S>(a.shape(), {a}, [an = a.node(), c](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad * c;
  });
  out.values() = a.values() * c;
  return out;
}

template <typename S>
TensorT<S> add_scalar(const TensorT<S>& a, S c) {
  TensorT<S> out = detail::make_op<S>(a.shape(), {a}, [an = a.node()](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad;
  });
  out.values() = a.values() + c;
  return out;
}

template <typename S>
TensorT<S> operator+(const TensorT<S>& a, const TensorT<S>& b) { return add(a, b); }
template <typename S>
TensorT<S> operator-(const TensorT<S>& a, const TensorT<S>& b) { return sub(a, b); }
template <typename S>
TensorT<S> operator*(const TensorT<S>& a, const TensorT<S>& b) { return mul(a, b); }

// ---------------------------------------------------------------------------
// matmul with suffix-broadcast batching
// ---------------------------------------------------------------------------

/// C[..., M, N] = A[..., M, K] * B[..., K, N]. B's leading dims must be a
/// suffix of A's leading dims (so a 2-d B is shared across every block).
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
  detail::check(a.rank() >= 2 && b.rank() >= 2,
                "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                    shape_str(b.shape()));
  const Eigen::Index m = a.dim(-2), k = a.dim(-1);
  const Eigen::Index k2 = b.dim(-2), nn = b.dim(-1);
  detail::check(k == k2, "matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  detail::check(lead_b.size() <= lead_a.size(),
                "matmul: batch dims of " + shape_str(b.shape()) + " exceed " + shape_str(a.shape()));
  for (std::size_t i = 0; i < lead_b.size(); ++i)
    detail::check(lead_b[lead_b.size() - 1 - i] == lead_a[lead_a.size() - 1 - i],
                  "matmul: batch dims mismatch " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  const Eigen::Index ba = numel(lead_a);
  const Eigen::Index bb = numel(lead_b);

  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(nn);

  TensorT<S> out = detail::make_op<S>(
      out_shape, {a, b},
      [an = a.node(), bn = b.node(), ba, bb, m, k, nn](TensorNode<S>& n) {
        auto* ga = detail::grad_of<S>(an);
        auto* gb = detail::grad_of<S>(bn);
        for (Eigen::Index g = 0; g < ba; ++g) {
          detail::ConstMatMap<S> dc(n.grad.data() + g * m * nn, m, nn);
          detail::ConstMatMap<S> av(an->value.data() + g * m * k, m, k);
          detail::ConstMatMap<S> bv(bn->value.data() + (g % bb) * k * nn, k, nn);
          if (ga) {
            detail::MatMap<S> da(ga->data() + g * m * k, m, k);
            da.noalias() += dc * bv.transpose();
          }
          if (gb) {
            detail::MatMap<S> db(gb->data() + (g % bb) * k * nn, k, nn);
            db.noalias() += av.transpose() * dc;
          }
        }
      });
  for (Eigen::Index g = 0; g < ba; ++g) {
    detail::ConstMatMap<S> av(a.data() + g * m * k, m, k);
    detail::ConstMatMap<S> bv(b.data() + (g % bb) * k * nn, k, nn);
    detail::MatMap<S> cv(out.data() + g * m * nn, m, nn);
    cv.noalias() = av * bv;
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape manipulation
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> reshape(const TensorT<S>& a, Shape shape) {
  detail::check(numel(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) +
                                              " as " + shape_str(shape));
  TensorT<S> out = detail::make_op<S>(std::move(shape), {a}, [an = a.node()](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad;
  });
  out.values() = a.values();
  return out;
}

template <typename S>
TensorT<S> permute(const TensorT<S>& a, const std::vector<int>& perm) {
  const int r = a.rank();
  detail::check(static_cast<int>(perm.size()) == r, "permute: rank mismatch");
  Shape out_shape(perm.size());
  for (int i = 0; i < r; ++i) out_shape[i] = a.dim(perm[i]);

  // strides of the input, row-major
  std::vector<Eigen::Index> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i) in_strides[i] = in_strides[i + 1] * a.dim(i + 1);

  auto mapping = std::make_shared<std::vector<Eigen::Index>>(a.size());
  std::vector<Eigen::Index> coord(r, 0);
  for (Eigen::Index o = 0; o < a.size(); ++o) {
    Eigen::Index src = 0;
    for (int i = 0; i < r; ++i) src += coord[i] * in_strides[perm[i]];
    (*mapping)[o] = src;
    for (int i = r - 1; i >= 0; --i) {
      if (++coord[i] < out_shape[i]) break;
      coord[i] = 0;
    }
  }

  TensorT<S> out =
      detail::make_op<S>(out_shape, {a}, [an = a.node(), mapping](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index o = 0; o < n.grad.size(); ++o) (*ga)[(*mapping)[o]] += n.grad[o];
        }
      });
  for (Eigen::Index o = 0; o < a.size(); ++o) out.values()[o] = a.values()[(*mapping)[o]];
  return out;
}

template <typename S>
TensorT<S> transpose_last2(const TensorT<S>& a) {
  std::vector<int> perm(a.rank());
  for (int i = 0; i < a.rank(); ++i) perm[i] = i;
  std::swap(perm[a.rank() - 1], perm[a.rank() - 2]);
  return permute(a, perm);
}

template <typename S>
TensorT<S> slice(const TensorT<S>& a, int axis, Eigen::Index start, Eigen::Index len) {
  if (axis < 0) axis += a.rank();
  detail::check(axis >= 0 && axis < a.rank(), "slice: bad axis");
  detail::check(start >= 0 && start + len <= a.dim(axis),
                "slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                    ") out of bounds for " + shape_str(a.shape()));
  Eigen::Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  const Eigen::Index d = a.dim(axis);
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;

  TensorT<S> out = detail::make_op<S>(
      out_shape, {a}, [an = a.node(), outer, inner, d, start, len](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index o = 0; o < outer; ++o)
            ga->segment((o * d + start) * inner, len * inner) +=
                n.grad.segment(o * len * inner, len * inner);
        }
      });
  for (Eigen::Index o = 0; o < outer; ++o)
    out.values().segment(o * len * inner, len * inner) =
        a.values().segment((o * d + start) * inner, len * inner);
  return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, int axis) {
  detail::check(!parts.empty(), "concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0) axis += r;
  Eigen::Index axis_total = 0;
  for (const auto& p : parts) {
    detail::check(p.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      detail::check(i == axis || p.dim(i) == parts[0].dim(i),
                    "concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                        shape_str(parts[0].shape()));
    axis_total += p.dim(axis);
  }
  Eigen::Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= parts[0].dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= parts[0].dim(i);
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = axis_total;

  std::vector<Eigen::Index> widths;
  std::vector<std::shared_ptr<TensorNode<S>>> nodes;
  for (const auto& p : parts) {
    widths.push_back(p.dim(axis) * inner);
    nodes.push_back(p.node());
  }
  const Eigen::Index row = axis_total * inner;

  TensorT<S> out = detail::make_op<S>(
      out_shape, parts, [nodes, widths, outer, row](TensorNode<S>& n) {
        for (Eigen::Index o = 0; o < outer; ++o) {
          Eigen::Index off = 0;
          for (std::size_t t = 0; t < nodes.size(); ++t) {
            if (auto* g = detail::grad_of<S>(nodes[t]))
              g->segment(o * widths[t], widths[t]) += n.grad.segment(o * row + off, widths[t]);
            off += widths[t];
          }
        }
      });
  for (Eigen::Index o = 0; o < outer; ++o) {
    Eigen::Index off = 0;
    for (std::size_t t = 0; t < parts.size(); ++t) {
      out.values().segment(o * row + off, widths[t]) =
          parts[t].values().segment(o * widths[t], widths[t]);
      off += widths[t];
    }
  }
  return out;
}

/// out[i, ...] = a[indices[i], ...]; gradients scatter-add back.
template <typename S>
TensorT<S> index_select0(const TensorT<S>& a, const std::vector<Eigen::Index>& indices) {
  detail::check(a.rank() >= 1, "index_select0: rank 0 input");
  const Eigen::Index rows = a.dim(0);
  const Eigen::Index inner = a.size() / std::max<Eigen::Index>(rows, 1);
  for (Eigen::Index i : indices)
    detail::check(i >= 0 && i < rows, "index_select0: index " + std::to_string(i) +
                                          " out of range [0," + std::to_string(rows) + ")");
  Shape out_shape = a.shape();
  out_shape[0] = static_cast<Eigen::Index>(indices.size());
  auto idx = std::make_shared<std::vector<Eigen::Index>>(indices);

  TensorT<S> out =
      detail::make_op<S>(out_shape, {a}, [an = a.node(), idx, inner](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (std::size_t i = 0; i < idx->size(); ++i)
            ga->segment((*idx)[i] * inner, inner) +=
                n.grad.segment(static_cast<Eigen::Index>(i) * inner, inner);
        }
      });
  for (std::size_t i = 0; i < indices.size(); ++i)
    out.values().segment(static_cast<Eigen::Index>(i) * inner, inner) =
        a.values().segment(indices[i] * inner, inner);
  return out;
}

/// Embedding lookup: table[V, D] gathered at ids -> [ids_shape..., D].
template <typename S>
TensorT<S> embedding(const TensorT<S>& table, const std::vector<Eigen::Index>& ids,
                     const Shape& ids_shape) {
  detail::check(table.rank() == 2, "embedding: table must be 2-d");
  detail::check(numel(ids_shape) == static_cast<Eigen::Index>(ids.size()),
                "embedding: ids/shape mismatch");
  TensorT<S> flat = index_select0(table, ids);
  Shape out_shape = ids_shape;
  out_shape.push_back(table.dim(1));
  return reshape(flat, std::move(out_shape));
}

// ---------------------------------------------------------------------------
// nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> gelu(const TensorT<S>& a) {
  TensorT<S> out = detail::make_op<S>(a.shape(), {a}, [an = a.node()](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) {
      const S inv_sqrt2 = S(M_SQRT1_2);
      const S inv_sqrt2pi = S(1) / S(std::sqrt(2.0 * M_PI));
      for (Eigen::Index i = 0; i < ga->size(); ++i) {
        const S x = an->value[i];
        const S cdf = S(0.5) * (S(1) + S(std::erf(double(x * inv_sqrt2))));
        const S pdf = inv_sqrt2pi * S(std::exp(double(-S(0.5) * x * x)));
        (*ga)[i] += n.grad[i] * (cdf + x * pdf);
      }
    }
  });
  const S inv_sqrt2 = S(M_SQRT1_2);
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const S x = a.values()[i];
    out.values()[i] = x * S(0.5) * (S(1) + S(std::erf(double(x * inv_sqrt2))));
  }
  return out;
}

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& a) {
  TensorT<S> out = detail::make_op<S>(a.shape(), {a}, [an = a.node()](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad * n.value * (S(1) - n.value);
  });
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const S x = a.values()[i];
    out.values()[i] = x >= S(0) ? S(1) / (S(1) + S(std::exp(double(-x))))
                                : S(std::exp(double(x))) / (S(1) + S(std::exp(double(x))));
  }
  return out;
}

/// GEGLU gate: gelu(a) * b (both halves of a gated feed-forward projection).
template <typename S>
TensorT<S> geglu(const TensorT<S>& a, const TensorT<S>& b) {
  return mul(gelu(a), b);
}

template <typename S>
TensorT<S> softmax_lastdim(const TensorT<S>& a) {
  detail::check(a.rank() >= 1, "softmax: rank 0 input");
  const Eigen::Index c = a.dim(-1);
  const Eigen::Index rows = a.size() / c;
  TensorT<S> out =
      detail::make_op<S>(a.shape(), {a}, [an = a.node(), rows, c](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index r = 0; r < rows; ++r) {
            auto y = n.value.segment(r * c, c);
            auto dy = n.grad.segment(r * c, c);
            const S dot = (dy * y).sum();
            ga->segment(r * c, c) += y * (dy - dot);
          }
        }
      });
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto x = a.values().segment(r * c, c);
    auto y = out.values().segment(r * c, c);
    const S m = x.maxCoeff();
    // scalar std::exp so -1e30 logits underflow to exactly zero weight
    S total = S(0);
    for (Eigen::Index j = 0; j < c; ++j) {
      y[j] = S(std::exp(double(x[j] - m)));
      total += y[j];
    }
    y /= total;
  }
  return out;
}

template <typename S>
TensorT<S> log_softmax_lastdim(const TensorT<S>& a) {
  detail::check(a.rank() >= 1, "log_softmax: rank 0 input");
  const Eigen::Index c = a.dim(-1);
  const Eigen::Index rows = a.size() / c;
  TensorT<S> out =
      detail::make_op<S>(a.shape(), {a}, [an = a.node(), rows, c](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index r = 0; r < rows; ++r) {
            auto y = n.value.segment(r * c, c);
            auto dy = n.grad.segment(r * c, c);
            const S total = dy.sum();
            ga->segment(r * c, c) += dy - y.exp() * total;
          }
        }
      });
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto x = a.values().segment(r * c, c);
    auto y = out.values().segment(r * c, c);
    const S m = x.maxCoeff();
    S total = S(0);
    for (Eigen::Index j = 0; j < c; ++j) total += S(std::exp(double(x[j] - m)));
    const S lse = S(std::log(double(total)));
    y = x - m - lse;
  }
  return out;
}

/// LayerNorm over the last dim with affine gain/bias (population variance).
template <typename S>
TensorT<S> layer_norm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                      S eps = S(1e-7)) {
  const Eigen::Index c = x.dim(-1);
  detail::check(gamma.size() == c && beta.size() == c,
                "layer_norm: gain/bias must match last dim " + std::to_string(c));
  const Eigen::Index rows = x.size() / c;
  auto xhat = std::make_shared<detail::Arr<S>>(x.size());
  auto inv_std = std::make_shared<detail::Arr<S>>(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto xr = x.values().segment(r * c, c);
    const S mu = xr.mean();
    const S var = (xr - mu).square().mean();
    const S inv = S(1) / S(std::sqrt(double(var + eps)));
    (*inv_std)[r] = inv;
    xhat->segment(r * c, c) = (xr - mu) * inv;
  }

  TensorT<S> out = detail::make_op<S>(
      x.shape(), {x, gamma, beta},
      [xn = x.node(), gn = gamma.node(), bn = beta.node(), xhat, inv_std, rows,
       c](TensorNode<S>& n) {
        auto* gx = detail::grad_of<S>(xn);
        auto* gg = detail::grad_of<S>(gn);
        auto* gb = detail::grad_of<S>(bn);
        for (Eigen::Index r = 0; r < rows; ++r) {
          auto dy = n.grad.segment(r * c, c);
          auto xh = xhat->segment(r * c, c);
          if (gg) *gg += dy * xh;
          if (gb) *gb += dy;
          if (gx) {
            detail::Arr<S> gy = dy * gn->value;
            const S mean_gy = gy.mean();
            const S mean_gy_xh = (gy * xh).mean();
            gx->segment(r * c, c) += (gy - mean_gy - xh * mean_gy_xh) * (*inv_std)[r];
          }
        }
      });
  for (Eigen::Index r = 0; r < rows; ++r)
    out.values().segment(r * c, c) = xhat->segment(r * c, c) * gamma.values() + beta.values();
  return out;
}

/// RMSNorm over the last dim with gain only (the T5 convention).
template <typename S>
TensorT<S> rms_norm(const TensorT<S>& x, const TensorT<S>& gamma, S eps = S(1e-6)) {
  const Eigen::Index c = x.dim(-1);
  detail::check(gamma.size() == c, "rms_norm: gain must match last dim " + std::to_string(c));
  const Eigen::Index rows = x.size() / c;
  auto xhat = std::make_shared<detail::Arr<S>>(x.size());
  auto inv_rms = std::make_shared<detail::Arr<S>>(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto xr = x.values().segment(r * c, c);
    const S inv = S(1) / S(std::sqrt(double(xr.square().mean() + eps)));
    (*inv_rms)[r] = inv;
    xhat->segment(r * c, c) = xr * inv;
  }

  TensorT<S> out = detail::make_op<S>(
      x.shape(), {x, gamma},
      [xn = x.node(), gn = gamma.node(), xhat, inv_rms, rows, c](TensorNode<S>& n) {
        auto* gx = detail::grad_of<S>(xn);
        auto* gg = detail::grad_of<S>(gn);
        for (Eigen::Index r = 0; r < rows; ++r) {
          auto dy = n.grad.segment(r * c, c);
          auto xh = xhat->segment(r * c, c);
          if (gg) *gg += dy * xh;
          if (gx) {
            detail::Arr<S> gy = dy * gn->value;
            const S mean_gy_xh = (gy * xh).mean();
            gx->segment(r * c, c) += (gy - xh * mean_gy_xh) * (*inv_rms)[r];
          }
        }
      });
  for (Eigen::Index r = 0; r < rows; ++r)
    out.values().segment(r * c, c) = xhat->segment(r * c, c) * gamma.values();
  return out;
}

// ---------------------------------------------------------------------------
// masking and gathering
// ---------------------------------------------------------------------------

/// Replaces positions where mask != 0 by `fill`; gradients pass only through
/// the untouched positions. The mask must cover the tensor elementwise.
template <typename S>
TensorT<S> masked_fill(const TensorT<S>& a, const std::vector<std::uint8_t>& mask, S fill) {
  detail::check(static_cast<Eigen::Index>(mask.size()) == a.size(),
                "masked_fill: mask size " + std::to_string(mask.size()) + " != tensor size " +
                    std::to_string(a.size()));
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask);
  TensorT<S> out = detail::make_op<S>(a.shape(), {a}, [an = a.node(), m](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) {
      for (Eigen::Index i = 0; i < ga->size(); ++i)
        if (!(*m)[static_cast<std::size_t>(i)]) (*ga)[i] += n.grad[i];
    }
  });
  for (Eigen::Index i = 0; i < a.size(); ++i)
    out.values()[i] = mask[static_cast<std::size_t>(i)] ? fill : a.values()[i];
  return out;
}

/// Relative-position gather: scores[..., S, C] -> out[..., S, T] with
/// out[..., i, j] = scores[..., i, idx[i*T + j]]. The index matrix is shared
/// across all leading blocks.
template <typename S>
TensorT<S> rel_gather(const TensorT<S>& scores, const std::vector<Eigen::Index>& idx,
                      Eigen::Index t_len) {
  detail::check(scores.rank() >= 2, "rel_gather: rank < 2");
  const Eigen::Index c = scores.dim(-1);
  const Eigen::Index s = scores.dim(-2);
  detail::check(static_cast<Eigen::Index>(idx.size()) == s * t_len,
                "rel_gather: index matrix must be S*T");
  for (Eigen::Index v : idx)
    detail::check(v >= 0 && v < c, "rel_gather: index out of range");
  const Eigen::Index blocks = scores.size() / (s * c);
  Shape out_shape = scores.shape();
  out_shape.back() = t_len;
  auto im = std::make_shared<std::vector<Eigen::Index>>(idx);

  TensorT<S> out = detail::make_op<S>(
      out_shape, {scores}, [an = scores.node(), im, blocks, s, c, t_len](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index g = 0; g < blocks; ++g)
            for (Eigen::Index i = 0; i < s; ++i)
              for (Eigen::Index j = 0; j < t_len; ++j)
                (*ga)[(g * s + i) * c + (*im)[i * t_len + j]] +=
                    n.grad[(g * s + i) * t_len + j];
        }
      });
  for (Eigen::Index g = 0; g < blocks; ++g)
    for (Eigen::Index i = 0; i < s; ++i)
      for (Eigen::Index j = 0; j < t_len; ++j)
        out.values()[(g * s + i) * t_len + j] = scores.values()[(g * s + i) * c + idx[i * t_len + j]];
  return out;
}

// ---------------------------------------------------------------------------
// reductions and losses
// ---------------------------------------------------------------------------

enum class Reduction { Mean, Sum };

template <typename S>
TensorT<S> sum(const TensorT<S>& a) {
  TensorT<S> out = detail::make_op<S>(Shape{}, {a}, [an = a.node()](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad[0];
  });
  out.values()[0] = a.values().sum();
  return out;
}

template <typename S>
TensorT<S> mean(const TensorT<S>& a) {
  const S inv = S(1) / S(a.size());
  TensorT<S> out = detail::make_op<S>(Shape{}, {a}, [an = a.node(), inv](TensorNode<S>& n) {
    if (auto* ga = detail::grad_of<S>(an)) *ga += n.grad[0] * inv;
  });
  out.values()[0] = a.values().mean();
  return out;
}

/// Softmax cross-entropy over the last dim. `targets` has one class id per
/// row; rows where `select` is 0 are excluded. Empty `select` keeps all rows.
template <typename S>
TensorT<S> cross_entropy(const TensorT<S>& logits, const std::vector<Eigen::Index>& targets,
                         const std::vector<std::uint8_t>& select = {},
                         Reduction reduction = Reduction::Mean) {
  detail::check(logits.rank() >= 2, "cross_entropy: logits rank < 2");
  const Eigen::Index v = logits.dim(-1);
  const Eigen::Index rows = logits.size() / v;
  detail::check(static_cast<Eigen::Index>(targets.size()) == rows,
                "cross_entropy: expected " + std::to_string(rows) + " targets, got " +
                    std::to_string(targets.size()));
  detail::check(select.empty() || static_cast<Eigen::Index>(select.size()) == rows,
                "cross_entropy: selection mask size mismatch");

  Eigen::Index n_sel = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    if (select.empty() || select[static_cast<std::size_t>(r)]) ++n_sel;
  detail::check(n_sel > 0, "cross_entropy: no selected positions");

  auto probs = std::make_shared<detail::Arr<S>>(logits.size());
  S total = S(0);
  for (Eigen::Index r = 0; r < rows; ++r) {
    auto x = logits.values().segment(r * v, v);
    auto p = probs->segment(r * v, v);
    const S m = x.maxCoeff();
    S z = S(0);
    for (Eigen::Index j = 0; j < v; ++j) {
      p[j] = S(std::exp(double(x[j] - m)));
      z += p[j];
    }
    p /= z;
    if (select.empty() || select[static_cast<std::size_t>(r)]) {
      const Eigen::Index t = targets[static_cast<std::size_t>(r)];
      detail::check(t >= 0 && t < v, "cross_entropy: target out of range");
      total -= x[t] - m - S(std::log(double(z)));
    }
  }
  const S w = reduction == Reduction::Mean ? S(1) / S(n_sel) : S(1);
  auto tgt = std::make_shared<std::vector<Eigen::Index>>(targets);
  auto sel = std::make_shared<std::vector<std::uint8_t>>(select);

  TensorT<S> out = detail::make_op<S>(
      Shape{}, {logits}, [an = logits.node(), probs, tgt, sel, rows, v, w](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          const S g = n.grad[0] * w;
          for (Eigen::Index r = 0; r < rows; ++r) {
            if (!sel->empty() && !(*sel)[static_cast<std::size_t>(r)]) continue;
            ga->segment(r * v, v) += probs->segment(r * v, v) * g;
            (*ga)[r * v + (*tgt)[static_cast<std::size_t>(r)]] -= g;
          }
        }
      });
  out.values()[0] = total * w;
  return out;
}

/// Numerically stable sigmoid binary cross-entropy against 0/1 labels, with
/// the same row-selection convention as cross_entropy.
template <typename S>
TensorT<S> binary_cross_entropy_with_logits(const TensorT<S>& logits,
                                            const std::vector<std::uint8_t>& labels,
                                            const std::vector<std::uint8_t>& select = {},
                                            Reduction reduction = Reduction::Mean) {
  const Eigen::Index n_total = logits.size();
  detail::check(static_cast<Eigen::Index>(labels.size()) == n_total,
                "binary_cross_entropy: labels size mismatch");
  detail::check(select.empty() || static_cast<Eigen::Index>(select.size()) == n_total,
                "binary_cross_entropy: selection mask size mismatch");
  Eigen::Index n_sel = 0;
  for (Eigen::Index i = 0; i < n_total; ++i)
    if (select.empty() || select[static_cast<std::size_t>(i)]) ++n_sel;
  detail::check(n_sel > 0, "binary_cross_entropy: no selected positions");

  const S w = reduction == Reduction::Mean ? S(1) / S(n_sel) : S(1);
  auto lab = std::make_shared<std::vector<std::uint8_t>>(labels);
  auto sel = std::make_shared<std::vector<std::uint8_t>>(select);

  TensorT<S> out = detail::make_op<S>(
      Shape{}, {logits}, [an = logits.node(), lab, sel, n_total, w](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          const S g = n.grad[0] * w;
          for (Eigen::Index i = 0; i < n_total; ++i) {
            if (!sel->empty() && !(*sel)[static_cast<std::size_t>(i)]) continue;
            const S x = an->value[i];
            const S s = x >= S(0) ? S(1) / (S(1) + S(std::exp(double(-x))))
                                  : S(std::exp(double(x))) / (S(1) + S(std::exp(double(x))));
            (*ga)[i] += (s - S((*lab)[static_cast<std::size_t>(i)])) * g;
          }
        }
      });
  S total = S(0);
  for (Eigen::Index i = 0; i < n_total; ++i) {
    if (!select.empty() && !select[static_cast<std::size_t>(i)]) continue;
    const S x = logits.values()[i];
    const S y = S(labels[static_cast<std::size_t>(i)]);
    total += std::max(x, S(0)) - x * y + S(std::log1p(std::exp(double(-std::abs(x)))));
  }
  out.values()[0] = total * w;
  return out;
}

// ---------------------------------------------------------------------------
// gradient flow control and regularization
// ---------------------------------------------------------------------------

/// Same values, but backward contributes nothing to the ancestors of `a`.
template <typename S>
TensorT<S> stop_gradient(const TensorT<S>& a) {
  TensorT<S> out = TensorT<S>::raw(a.shape());
  out.values() = a.values();
  return out;
}

/// Inverted dropout; p == 0 is the identity. Deterministic under the rng.
template <typename S>
TensorT<S> dropout(const TensorT<S>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  detail::check(p < 1.0, "dropout: p must be < 1");
  const S keep_scale = S(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<std::uint8_t>>(a.size());
  for (auto& m : *mask) m = rng.uniform() >= p ? 1 : 0;

  TensorT<S> out =
      detail::make_op<S>(a.shape(), {a}, [an = a.node(), mask, keep_scale](TensorNode<S>& n) {
        if (auto* ga = detail::grad_of<S>(an)) {
          for (Eigen::Index i = 0; i < ga->size(); ++i)
            if ((*mask)[static_cast<std::size_t>(i)]) (*ga)[i] += n.grad[i] * keep_scale;
        }
      });
  for (Eigen::Index i = 0; i < a.size(); ++i)
    out.values()[i] = (*mask)[static_cast<std::size_t>(i)] ? a.values()[i] * keep_scale : S(0);
  return out;
}

// ---------------------------------------------------------------------------
// value-only helpers (no graph)
// ---------------------------------------------------------------------------

template <typename S>
std::vector<Eigen::Index> argmax_lastdim(const TensorT<S>& a) {
  const Eigen::Index c = a.dim(-1);
  const Eigen::Index rows = a.size() / c;
  std::vector<Eigen::Index> out(static_cast<std::size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index j = 1; j < c; ++j)
      if (a.values()[r * c + j] > a.values()[r * c + best]) best = j;
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

}  // namespace hlm
