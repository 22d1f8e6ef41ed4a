#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "davi/common.hpp"

// Dense row-major tensors with reverse-mode autodiff. The op set is exactly
// what the model graph needs; there is no broadcasting beyond the explicit
// bias-add ops, which keeps every backward rule small enough to audit.
//
// Recording model: ops append their backward closure to a Tape at creation
// time, so the tape is topologically ordered by construction. backward()
// seeds the scalar loss and runs the closures once each, in reverse.

namespace davi {

class Tensor {
 public:
  Tensor() : s_(std::make_shared<Storage>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.s_->shape = std::move(shape);
    t.s_->value.assign(static_cast<std::size_t>(numel(t.s_->shape)), real(0));
    t.s_->requires_grad = requires_grad;
    if (requires_grad) t.s_->grad.assign(t.s_->value.size(), real(0));
    return t;
  }

  static Tensor full(Shape shape, real v, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.s_->value.begin(), t.s_->value.end(), v);
    return t;
  }

  static Tensor from_vector(Shape shape, std::vector<real> data,
                            bool requires_grad = false) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw shape_error("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    Tensor t;
    t.s_->shape = std::move(shape);
    t.s_->value = std::move(data);
    t.s_->requires_grad = requires_grad;
    if (requires_grad) t.s_->grad.assign(t.s_->value.size(), real(0));
    return t;
  }

  static Tensor scalar(real v, bool requires_grad = false) {
    return from_vector({1}, {v}, requires_grad);
  }

  const Shape& shape() const { return s_->shape; }
  int dim(int i) const { return s_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(s_->value.size()); }

  real* data() { return s_->value.data(); }
  const real* data() const { return s_->value.data(); }
  std::vector<real>& values() { return s_->value; }
  const std::vector<real>& values() const { return s_->value; }

  bool requires_grad() const { return s_->requires_grad; }
  bool has_grad() const { return !s_->grad.empty(); }
  real* grad() { return s_->grad.data(); }
  const real* grad() const { return s_->grad.data(); }
  std::vector<real>& grad_values() { return s_->grad; }
  const std::vector<real>& grad_values() const { return s_->grad; }

  real item() const {
    if (size() != 1) throw contract_error("item() requires a scalar tensor, got " + shape_str(shape()));
    return s_->value[0];
  }

  void zero_grad() {
    if (s_->requires_grad) std::fill(s_->grad.begin(), s_->grad.end(), real(0));
  }

  // Identity of the underlying buffer; two handles may alias one storage.
  bool same_storage(Tensor o) const { return s_ == o.s_; }

  // Deep copy of values only (no grad history).
  Tensor detached_copy(bool requires_grad = false) const {
    return from_vector(s_->shape, s_->value, requires_grad);
  }

 private:
  struct Storage {
    Shape shape{};
    std::vector<real> value{};
    std::vector<real> grad{};
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

class Tape {
 public:
  void record(std::function<void()> backward_rule) {
    ops_.push_back(std::move(backward_rule));
  }

  std::size_t size() const { return ops_.size(); }
  void clear() { ops_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and applies every recorded rule once, newest
  // first. Seeding accumulates, so backward on several losses over shared
  // leaves adds their gradients.
  void backward(Tensor loss) {
    if (loss.size() != 1)
      throw contract_error("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw contract_error("backward() on a tensor with requires_grad=false");
    loss.grad()[0] += real(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  if (!finite_checks_enabled()) return;
  if (!all_finite(t.values()))
    throw error(std::string("non-finite value produced by ") + op);
}

inline bool want_grad(const Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

using EigenMat =
    Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenMat>;
using CMapMat = Eigen::Map<const EigenMat>;

// Decompose an N-D shape around `axis` into (outer, len, inner) so that flat
// index = (o * len + a) * inner + i.
struct AxisSplit {
  std::int64_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  if (axis < 0 || axis >= static_cast<int>(shape.size()))
    throw shape_error("axis " + std::to_string(axis) + " invalid for shape " + shape_str(shape));
  AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < static_cast<int>(shape.size()); ++i)
    s.inner *= shape[static_cast<std::size_t>(i)];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and bias ops
// ---------------------------------------------------------------------------

inline Tensor add(Tape* tape, Tensor a, Tensor b) {
  if (a.shape() != b.shape())
    throw shape_error("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::want_grad(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  detail::check_finite(out, "add");
  if (rec) {
    tape->record([a, b, out]() mutable {
      const real* g = out.grad();
      if (a.requires_grad()) {
        real* ga = a.grad();
        for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        real* gb = b.grad();
        for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

inline Tensor sub(Tape* tape, Tensor a, Tensor b) {
  if (a.shape() != b.shape())
    throw shape_error("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::want_grad(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  detail::check_finite(out, "sub");
  if (rec) {
    tape->record([a, b, out]() mutable {
      const real* g = out.grad();
      if (a.requires_grad()) {
        real* ga = a.grad();
        for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        real* gb = b.grad();
        for (std::int64_t i = 0; i < b.size(); ++i) gb[i] -= g[i];
      }
    });
  }
  return out;
}

inline Tensor mul(Tape* tape, Tensor a, Tensor b) {
  if (a.shape() != b.shape())
    throw shape_error("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  bool rec = detail::want_grad(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const real* pa = a.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  detail::check_finite(out, "mul");
  if (rec) {
    tape->record([a, b, out]() mutable {
      const real* g = out.grad();
      if (a.requires_grad()) {
        real* ga = a.grad();
        const real* pb2 = b.data();
        for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g[i] * pb2[i];
      }
      if (b.requires_grad()) {
        real* gb = b.grad();
        const real* pa2 = a.data();
        for (std::int64_t i = 0; i < b.size(); ++i) gb[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

inline Tensor scale(Tape* tape, Tensor a, real c) {
  bool rec = detail::want_grad(tape, {&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const real* pa = a.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * c;
  detail::check_finite(out, "scale");
  if (rec) {
    tape->record([a, out, c]() mutable {
      const real* g = out.grad();
      real* ga = a.grad();
      for (std::int64_t i = 0; i < a.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

// x[..., d] + b[d], broadcast over all leading axes.
inline Tensor add_bias(Tape* tape, Tensor x, Tensor b) {
  if (x.ndim() < 1 || b.ndim() != 1 || x.dim(x.ndim() - 1) != b.dim(0))
    throw shape_error("add_bias: " + shape_str(x.shape()) + " vs bias " + shape_str(b.shape()));
  const std::int64_t d = b.dim(0);
  const std::int64_t rows = x.size() / d;
  bool rec = detail::want_grad(tape, {&x, &b});
  Tensor out = Tensor::zeros(x.shape(), rec);
  const real* px = x.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  detail::check_finite(out, "add_bias");
  if (rec) {
    tape->record([x, b, out, rows, d]() mutable {
      const real* g = out.grad();
      if (x.requires_grad()) {
        real* gx = x.grad();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        real* gb = b.grad();
        for (std::int64_t r = 0; r < rows; ++r)
          for (std::int64_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
    });
  }
  return out;
}

// x[c, h, w] + b[c], broadcast over spatial axes.
inline Tensor add_channel_bias(Tape* tape, Tensor x, Tensor b) {
  if (x.ndim() != 3 || b.ndim() != 1 || x.dim(0) != b.dim(0))
    throw shape_error("add_channel_bias: " + shape_str(x.shape()) + " vs bias " + shape_str(b.shape()));
  const std::int64_t c = x.dim(0);
  const std::int64_t hw = x.size() / c;
  bool rec = detail::want_grad(tape, {&x, &b});
  Tensor out = Tensor::zeros(x.shape(), rec);
  const real* px = x.data();
  const real* pb = b.data();
  real* po = out.data();
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < hw; ++i) po[ch * hw + i] = px[ch * hw + i] + pb[ch];
  detail::check_finite(out, "add_channel_bias");
  if (rec) {
    tape->record([x, b, out, c, hw]() mutable {
      const real* g = out.grad();
      if (x.requires_grad()) {
        real* gx = x.grad();
        for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        real* gb = b.grad();
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t i = 0; i < hw; ++i) gb[ch] += g[ch * hw + i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

inline Tensor matmul(Tape* tape, Tensor a, Tensor b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw shape_error("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  bool rec = detail::want_grad(tape, {&a, &b});
  Tensor out = Tensor::zeros({m, n}, rec);
  {
    detail::CMapMat ma(a.data(), m, k), mb(b.data(), k, n);
    detail::MapMat mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  detail::check_finite(out, "matmul");
  if (rec) {
    tape->record([a, b, out, m, k, n]() mutable {
      detail::CMapMat g(out.grad(), m, n);
      if (a.requires_grad()) {
        detail::CMapMat mb(b.data(), k, n);
        detail::MapMat ga(a.grad(), m, k);
        ga.noalias() += g * mb.transpose();
      }
      if (b.requires_grad()) {
        detail::CMapMat ma(a.data(), m, k);
        detail::MapMat gb(b.grad(), k, n);
        gb.noalias() += ma.transpose() * g;
      }
    });
  }
  return out;
}

inline Tensor transpose(Tape* tape, Tensor x) {
  if (x.ndim() != 2) throw shape_error("transpose: expected 2-D tensor, got " + shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros({n, m}, rec);
  const real* px = x.data();
  real* po = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) po[j * m + i] = px[i * n + j];
  if (rec) {
    tape->record([x, out, m, n]() mutable {
      const real* g = out.grad();
      real* gx = x.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

inline Tensor reshape(Tape* tape, Tensor x, Shape new_shape) {
  if (numel(new_shape) != x.size())
    throw shape_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(new_shape));
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::from_vector(std::move(new_shape), x.values(), rec);
  if (rec) {
    tape->record([x, out]() mutable {
      const real* g = out.grad();
      real* gx = x.grad();
      for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

inline Tensor slice_cols(Tape* tape, Tensor x, int col0, int len) {
  if (x.ndim() != 2) throw shape_error("slice_cols: expected 2-D tensor, got " + shape_str(x.shape()));
  const int n = x.dim(0), m = x.dim(1);
  if (col0 < 0 || len <= 0 || col0 + len > m)
    throw shape_error("slice_cols: range [" + std::to_string(col0) + ", " +
                      std::to_string(col0 + len) + ") outside " + shape_str(x.shape()));
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros({n, len}, rec);
  const real* px = x.data();
  real* po = out.data();
  for (int r = 0; r < n; ++r)
    std::memcpy(po + static_cast<std::size_t>(r) * len, px + static_cast<std::size_t>(r) * m + col0,
                sizeof(real) * static_cast<std::size_t>(len));
  if (rec) {
    tape->record([x, out, n, m, col0, len]() mutable {
      const real* g = out.grad();
      real* gx = x.grad();
      for (int r = 0; r < n; ++r)
        for (int j = 0; j < len; ++j) gx[r * m + col0 + j] += g[r * len + j];
    });
  }
  return out;
}

inline Tensor concat_cols(Tape* tape, const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat_cols: empty input list");
  const int n = parts[0].dim(0);
  int total = 0;
  for (Tensor p : parts) {
    if (p.ndim() != 2 || p.dim(0) != n)
      throw shape_error("concat_cols: row mismatch, expected " + std::to_string(n) +
                        " rows, got " + shape_str(p.shape()));
    total += p.dim(1);
  }
  bool rec = false;
  if (tape)
    for (Tensor p : parts) rec = rec || p.requires_grad();
  Tensor out = Tensor::zeros({n, total}, rec);
  real* po = out.data();
  int off = 0;
  for (Tensor p : parts) {
    const int w = p.dim(1);
    const real* pp = p.data();
    for (int r = 0; r < n; ++r)
      std::memcpy(po + static_cast<std::size_t>(r) * total + off,
                  pp + static_cast<std::size_t>(r) * w, sizeof(real) * static_cast<std::size_t>(w));
    off += w;
  }
  if (rec) {
    auto parts_copy = parts;
    tape->record([parts_copy, out, n, total]() mutable {
      const real* g = out.grad();
      int off2 = 0;
      for (Tensor& p : parts_copy) {
        const int w = p.dim(1);
        if (p.requires_grad()) {
          real* gp = p.grad();
          for (int r = 0; r < n; ++r)
            for (int j = 0; j < w; ++j) gp[r * w + j] += g[r * total + off2 + j];
        }
        off2 += w;
      }
    });
  }
  return out;
}

// image[c, H, W] -> patches[(H/p)*(W/p), c*p*p], channel-major within a patch.
inline Tensor im2patches(Tape* tape, Tensor x, int p) {
  if (x.ndim() != 3) throw shape_error("im2patches: expected [c,h,w], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw shape_error("im2patches: patch size " + std::to_string(p) + " does not divide " + shape_str(x.shape()));
  const int gh = h / p, gw = w / p;
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros({gh * gw, c * p * p}, rec);
  const real* px = x.data();
  real* po = out.data();
  const int fv = c * p * p;
  for (int py = 0; py < gh; ++py)
    for (int px2 = 0; px2 < gw; ++px2) {
      const int patch = py * gw + px2;
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            po[patch * fv + (ch * p + dy) * p + dx] =
                px[(ch * h + py * p + dy) * w + px2 * p + dx];
    }
  if (rec) {
    tape->record([x, out, c, h, w, p, gh, gw, fv]() mutable {
      const real* g = out.grad();
      real* gx = x.grad();
      for (int py = 0; py < gh; ++py)
        for (int px2 = 0; px2 < gw; ++px2) {
          const int patch = py * gw + px2;
          for (int ch = 0; ch < c; ++ch)
            for (int dy = 0; dy < p; ++dy)
              for (int dx = 0; dx < p; ++dx)
                gx[(ch * h + py * p + dy) * w + px2 * p + dx] +=
                    g[patch * fv + (ch * p + dy) * p + dx];
        }
    });
  }
  return out;
}

// Row gather: table[V, d] indexed by ids -> [len(ids), d].
inline Tensor embedding(Tape* tape, Tensor table, const std::vector<int>& ids) {
  if (table.ndim() != 2) throw shape_error("embedding: table must be 2-D, got " + shape_str(table.shape()));
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw bounds_error("embedding: token id " + std::to_string(id) +
                         " outside vocabulary of size " + std::to_string(v));
  bool rec = detail::want_grad(tape, {&table});
  Tensor out = Tensor::zeros({static_cast<int>(ids.size()), d}, rec);
  const real* pt = table.data();
  real* po = out.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::memcpy(po + r * static_cast<std::size_t>(d),
                pt + static_cast<std::size_t>(ids[r]) * d, sizeof(real) * static_cast<std::size_t>(d));
  if (rec) {
    tape->record([table, out, ids, d]() mutable {
      const real* g = out.grad();
      real* gt = table.grad();
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (int j = 0; j < d; ++j) gt[ids[r] * d + j] += g[r * static_cast<std::size_t>(d) + j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations
// ---------------------------------------------------------------------------

inline Tensor softmax(Tape* tape, Tensor x, int axis) {
  auto sp = detail::split_axis(x.shape(), axis);
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  const real* px = x.data();
  real* po = out.data();
  for (std::int64_t o = 0; o < sp.outer; ++o)
    for (std::int64_t i = 0; i < sp.inner; ++i) {
      const std::int64_t base = o * sp.len * sp.inner + i;
      real mx = px[base];
      for (std::int64_t a = 1; a < sp.len; ++a)
        mx = std::max(mx, px[base + a * sp.inner]);
      real sum = 0;
      for (std::int64_t a = 0; a < sp.len; ++a) {
        real e = std::exp(px[base + a * sp.inner] - mx);
        po[base + a * sp.inner] = e;
        sum += e;
      }
      const real inv = real(1) / sum;
      for (std::int64_t a = 0; a < sp.len; ++a) po[base + a * sp.inner] *= inv;
    }
  detail::check_finite(out, "softmax");
  if (rec) {
    tape->record([x, out, sp]() mutable {
      const real* g = out.grad();
      const real* p = out.data();
      real* gx = x.grad();
      for (std::int64_t o = 0; o < sp.outer; ++o)
        for (std::int64_t i = 0; i < sp.inner; ++i) {
          const std::int64_t base = o * sp.len * sp.inner + i;
          real dot = 0;
          for (std::int64_t a = 0; a < sp.len; ++a)
            dot += g[base + a * sp.inner] * p[base + a * sp.inner];
          for (std::int64_t a = 0; a < sp.len; ++a)
            gx[base + a * sp.inner] += p[base + a * sp.inner] * (g[base + a * sp.inner] - dot);
        }
    });
  }
  return out;
}

// Normalizes the last axis; gain/bias are applied per element of that axis.
inline Tensor layer_norm(Tape* tape, Tensor x, Tensor gain,
                         Tensor bias, real eps = real(1e-5)) {
  if (x.ndim() < 1) throw shape_error("layer_norm: scalar input");
  const int d = x.dim(x.ndim() - 1);
  if (gain.ndim() != 1 || bias.ndim() != 1 || gain.dim(0) != d || bias.dim(0) != d)
    throw shape_error("layer_norm: gain " + shape_str(gain.shape()) + " / bias " +
                      shape_str(bias.shape()) + " do not match last axis of " + shape_str(x.shape()));
  if (!(eps > real(0))) throw contract_error("layer_norm: eps must be positive");
  const std::int64_t rows = x.size() / d;
  bool rec = detail::want_grad(tape, {&x, &gain, &bias});
  Tensor out = Tensor::zeros(x.shape(), rec);
  // Cache per-row mean and inverse stddev for the backward pass.
  auto stats = std::make_shared<std::vector<real>>(static_cast<std::size_t>(rows) * 2);
  const real* px = x.data();
  const real* pg = gain.data();
  const real* pb = bias.data();
  real* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const real* row = px + r * d;
    real mean = 0;
    for (int j = 0; j < d; ++j) mean += row[j];
    mean /= d;
    real var = 0;
    for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= d;
    const real inv_std = real(1) / std::sqrt(var + eps);
    (*stats)[static_cast<std::size_t>(r) * 2] = mean;
    (*stats)[static_cast<std::size_t>(r) * 2 + 1] = inv_std;
    for (int j = 0; j < d; ++j)
      po[r * d + j] = (row[j] - mean) * inv_std * pg[j] + pb[j];
  }
  detail::check_finite(out, "layer_norm");
  if (rec) {
    tape->record([x, gain, bias, out, stats, rows, d]() mutable {
      const real* g = out.grad();
      const real* px2 = x.data();
      const real* pg2 = gain.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const real mean = (*stats)[static_cast<std::size_t>(r) * 2];
        const real inv_std = (*stats)[static_cast<std::size_t>(r) * 2 + 1];
        const real* row = px2 + r * d;
        const real* grow = g + r * d;
        if (gain.requires_grad()) {
          real* gg = gain.grad();
          for (int j = 0; j < d; ++j) gg[j] += grow[j] * (row[j] - mean) * inv_std;
        }
        if (bias.requires_grad()) {
          real* gb = bias.grad();
          for (int j = 0; j < d; ++j) gb[j] += grow[j];
        }
        if (x.requires_grad()) {
          real* gx = x.grad();
          real sum_dxhat = 0, sum_dxhat_xhat = 0;
          for (int j = 0; j < d; ++j) {
            const real xhat = (row[j] - mean) * inv_std;
            const real dxhat = grow[j] * pg2[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          const real invd = real(1) / d;
          for (int j = 0; j < d; ++j) {
            const real xhat = (row[j] - mean) * inv_std;
            const real dxhat = grow[j] * pg2[j];
            gx[r * d + j] += inv_std * (dxhat - invd * sum_dxhat - xhat * invd * sum_dxhat_xhat);
          }
        }
      }
    });
  }
  return out;
}

// tanh approximation of GELU.
inline Tensor gelu(Tape* tape, Tensor x) {
  constexpr real kSqrt2OverPi = real(0.79788456080286535588);
  constexpr real kCubic = real(0.044715);
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  const real* px = x.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const real v = px[i];
    po[i] = real(0.5) * v * (real(1) + std::tanh(kSqrt2OverPi * (v + kCubic * v * v * v)));
  }
  detail::check_finite(out, "gelu");
  if (rec) {
    tape->record([x, out]() mutable {
      const real* g = out.grad();
      const real* px2 = x.data();
      real* gx = x.grad();
      for (std::int64_t i = 0; i < x.size(); ++i) {
        const real v = px2[i];
        const real u = kSqrt2OverPi * (v + kCubic * v * v * v);
        const real t = std::tanh(u);
        const real du = kSqrt2OverPi * (real(1) + real(3) * kCubic * v * v);
        gx[i] += g[i] * (real(0.5) * (real(1) + t) + real(0.5) * v * (real(1) - t * t) * du);
      }
    });
  }
  return out;
}

inline Tensor sigmoid(Tape* tape, Tensor x) {
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros(x.shape(), rec);
  const real* px = x.data();
  real* po = out.data();
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const real v = px[i];
    po[i] = v >= 0 ? real(1) / (real(1) + std::exp(-v))
                   : std::exp(v) / (real(1) + std::exp(v));
  }
  detail::check_finite(out, "sigmoid");
  if (rec) {
    tape->record([x, out]() mutable {
      const real* g = out.grad();
      const real* p = out.data();
      real* gx = x.grad();
      for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g[i] * p[i] * (real(1) - p[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and resampling
// ---------------------------------------------------------------------------

// Cross-correlation: out[co,oy,ox] = sum_{ci,dy,dx} x[ci, oy*s+dy-p, ox*s+dx-p] * k[co,ci,dy,dx]
inline Tensor conv2d(Tape* tape, Tensor x, Tensor kernels, int stride,
                     int padding) {
  if (x.ndim() != 3) throw shape_error("conv2d: input must be [c,h,w], got " + shape_str(x.shape()));
  if (kernels.ndim() != 4)
    throw shape_error("conv2d: kernels must be [co,ci,k,k], got " + shape_str(kernels.shape()));
  const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int co = kernels.dim(0), k = kernels.dim(2);
  if (kernels.dim(1) != ci)
    throw shape_error("conv2d: kernel in-channels " + shape_str(kernels.shape()) +
                      " do not match input " + shape_str(x.shape()));
  if (kernels.dim(2) != kernels.dim(3) || k % 2 == 0)
    throw config_error("conv2d: kernel must be square with odd size, got " + shape_str(kernels.shape()));
  if (stride <= 0 || padding < 0) throw config_error("conv2d: invalid stride/padding");
  if ((h + 2 * padding - k) % stride != 0 || (w + 2 * padding - k) % stride != 0)
    throw config_error("conv2d: non-integral output size for input " + shape_str(x.shape()) +
                       ", kernel " + std::to_string(k) + ", stride " + std::to_string(stride) +
                       ", padding " + std::to_string(padding));
  const int oh = (h + 2 * padding - k) / stride + 1;
  const int ow = (w + 2 * padding - k) / stride + 1;
  bool rec = detail::want_grad(tape, {&x, &kernels});
  Tensor out = Tensor::zeros({co, oh, ow}, rec);
  const real* px = x.data();
  const real* pk = kernels.data();
  real* po = out.data();
  for (int c = 0; c < co; ++c)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        real acc = 0;
        for (int c2 = 0; c2 < ci; ++c2)
          for (int dy = 0; dy < k; ++dy) {
            const int iy = oy * stride + dy - padding;
            if (iy < 0 || iy >= h) continue;
            for (int dx = 0; dx < k; ++dx) {
              const int ix = ox * stride + dx - padding;
              if (ix < 0 || ix >= w) continue;
              acc += px[(c2 * h + iy) * w + ix] * pk[((c * ci + c2) * k + dy) * k + dx];
            }
          }
        po[(c * oh + oy) * ow + ox] = acc;
      }
  detail::check_finite(out, "conv2d");
  if (rec) {
    tape->record([x, kernels, out, ci, h, w, co, k, stride, padding, oh, ow]() mutable {
      const real* g = out.grad();
      const real* px2 = x.data();
      const real* pk2 = kernels.data();
      real* gx = x.requires_grad() ? x.grad() : nullptr;
      real* gk = kernels.requires_grad() ? kernels.grad() : nullptr;
      for (int c = 0; c < co; ++c)
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            const real go = g[(c * oh + oy) * ow + ox];
            if (go == real(0)) continue;
            for (int c2 = 0; c2 < ci; ++c2)
              for (int dy = 0; dy < k; ++dy) {
                const int iy = oy * stride + dy - padding;
                if (iy < 0 || iy >= h) continue;
                for (int dx = 0; dx < k; ++dx) {
                  const int ix = ox * stride + dx - padding;
                  if (ix < 0 || ix >= w) continue;
                  if (gx) gx[(c2 * h + iy) * w + ix] += go * pk2[((c * ci + c2) * k + dy) * k + dx];
                  if (gk) gk[((c * ci + c2) * k + dy) * k + dx] += go * px2[(c2 * h + iy) * w + ix];
                }
              }
          }
    });
  }
  return out;
}

// Bilinear upsampling, align-corners=false convention.
inline Tensor upsample_bilinear(Tape* tape, Tensor x, int out_h, int out_w) {
  if (x.ndim() != 3) throw shape_error("upsample_bilinear: input must be [c,h,w], got " + shape_str(x.shape()));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h < h || out_w < w)
    throw shape_error("upsample_bilinear: target " + std::to_string(out_h) + "x" +
                      std::to_string(out_w) + " smaller than input " + shape_str(x.shape()));
  bool rec = detail::want_grad(tape, {&x});
  Tensor out = Tensor::zeros({c, out_h, out_w}, rec);
  const real scale_y = static_cast<real>(h) / static_cast<real>(out_h);
  const real scale_x = static_cast<real>(w) / static_cast<real>(out_w);
  // Interpolation geometry per output pixel, shared by forward and backward.
  struct Corner {
    int lo, hi;
    real t;
  };
  auto axis_corners = [](int out_n, int in_n, real sc) {
    std::vector<Corner> cs(static_cast<std::size_t>(out_n));
    for (int o = 0; o < out_n; ++o) {
      real src = (static_cast<real>(o) + real(0.5)) * sc - real(0.5);
      if (src < 0) src = 0;
      int lo = static_cast<int>(src);
      if (lo > in_n - 1) lo = in_n - 1;
      int hi = std::min(lo + 1, in_n - 1);
      cs[static_cast<std::size_t>(o)] = {lo, hi, src - static_cast<real>(lo)};
    }
    return cs;
  };
  auto ys = std::make_shared<std::vector<Corner>>(axis_corners(out_h, h, scale_y));
  auto xs = std::make_shared<std::vector<Corner>>(axis_corners(out_w, w, scale_x));
  const real* px = x.data();
  real* po = out.data();
  for (int ch = 0; ch < c; ++ch)
    for (int oy = 0; oy < out_h; ++oy) {
      const Corner& cy = (*ys)[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const Corner& cx = (*xs)[static_cast<std::size_t>(ox)];
        const real v00 = px[(ch * h + cy.lo) * w + cx.lo];
        const real v01 = px[(ch * h + cy.lo) * w + cx.hi];
        const real v10 = px[(ch * h + cy.hi) * w + cx.lo];
        const real v11 = px[(ch * h + cy.hi) * w + cx.hi];
        po[(ch * out_h + oy) * out_w + ox] = (real(1) - cy.t) * ((real(1) - cx.t) * v00 + cx.t * v01) +
                                             cy.t * ((real(1) - cx.t) * v10 + cx.t * v11);
      }
    }
  detail::check_finite(out, "upsample_bilinear");
  if (rec) {
    tape->record([x, out, ys, xs, c, h, w, out_h, out_w]() mutable {
      const real* g = out.grad();
      real* gx = x.grad();
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < out_h; ++oy) {
          const Corner& cy = (*ys)[static_cast<std::size_t>(oy)];
          for (int ox = 0; ox < out_w; ++ox) {
            const Corner& cx = (*xs)[static_cast<std::size_t>(ox)];
            const real go = g[(ch * out_h + oy) * out_w + ox];
            gx[(ch * h + cy.lo) * w + cx.lo] += go * (real(1) - cy.t) * (real(1) - cx.t);
            gx[(ch * h + cy.lo) * w + cx.hi] += go * (real(1) - cy.t) * cx.t;
            gx[(ch * h + cy.hi) * w + cx.lo] += go * cy.t * (real(1) - cx.t);
            gx[(ch * h + cy.hi) * w + cx.hi] += go * cy.t * cx.t;
          }
        }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

inline Tensor sum(Tape* tape, Tensor x) {
  bool rec = detail::want_grad(tape, {&x});
  real acc = 0;
  const real* px = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) acc += px[i];
  Tensor out = Tensor::from_vector({1}, {acc}, rec);
  detail::check_finite(out, "sum");
  if (rec) {
    tape->record([x, out]() mutable {
      const real g = out.grad()[0];
      real* gx = x.grad();
      for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

inline Tensor mean(Tape* tape, Tensor x) {
  bool rec = detail::want_grad(tape, {&x});
  real acc = 0;
  const real* px = x.data();
  for (std::int64_t i = 0; i < x.size(); ++i) acc += px[i];
  const real inv = real(1) / static_cast<real>(x.size());
  Tensor out = Tensor::from_vector({1}, {acc * inv}, rec);
  detail::check_finite(out, "mean");
  if (rec) {
    tape->record([x, out, inv]() mutable {
      const real g = out.grad()[0] * inv;
      real* gx = x.grad();
      for (std::int64_t i = 0; i < x.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// Mean cross-entropy over rows of logits[n, V] whose target is not
// ignore_index; -log softmax(row)[target].
inline Tensor cross_entropy_seq(Tape* tape, Tensor logits,
                                const std::vector<int>& targets, int ignore_index = -1) {
  if (logits.ndim() != 2) throw shape_error("cross_entropy: logits must be [n,V], got " + shape_str(logits.shape()));
  const int n = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != n)
    throw shape_error("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                      std::to_string(n) + " rows");
  int counted = 0;
  for (int t : targets) {
    if (t == ignore_index) continue;
    if (t < 0 || t >= v)
      throw bounds_error("cross_entropy: target index " + std::to_string(t) +
                         " outside vocabulary of size " + std::to_string(v));
    ++counted;
  }
  if (counted == 0) throw contract_error("cross_entropy: every target position is ignored");
  bool rec = detail::want_grad(tape, {&logits});
  const real* pl = logits.data();
  real acc = 0;
  for (int r = 0; r < n; ++r) {
    if (targets[static_cast<std::size_t>(r)] == ignore_index) continue;
    const real* row = pl + static_cast<std::int64_t>(r) * v;
    real mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    real se = 0;
    for (int j = 0; j < v; ++j) se += std::exp(row[j] - mx);
    acc += mx + std::log(se) - row[targets[static_cast<std::size_t>(r)]];
  }
  Tensor out = Tensor::from_vector({1}, {acc / static_cast<real>(counted)}, rec);
  detail::check_finite(out, "cross_entropy");
  if (rec) {
    tape->record([logits, out, targets, n, v, counted, ignore_index]() mutable {
      const real g = out.grad()[0] / static_cast<real>(counted);
      const real* pl2 = logits.data();
      real* gl = logits.grad();
      for (int r = 0; r < n; ++r) {
        const int t = targets[static_cast<std::size_t>(r)];
        if (t == ignore_index) continue;
        const real* row = pl2 + static_cast<std::int64_t>(r) * v;
        real mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        real se = 0;
        for (int j = 0; j < v; ++j) se += std::exp(row[j] - mx);
        for (int j = 0; j < v; ++j) {
          const real p = std::exp(row[j] - mx) / se;
          gl[static_cast<std::int64_t>(r) * v + j] += g * (p - (j == t ? real(1) : real(0)));
        }
      }
    });
  }
  return out;
}

inline Tensor cross_entropy(Tape* tape, Tensor logits, int target) {
  if (logits.ndim() != 1)
    throw shape_error("cross_entropy: logits must be 1-D, got " + shape_str(logits.shape()));
  if (target < 0 || target >= logits.dim(0))
    throw bounds_error("cross_entropy: target index " + std::to_string(target) +
                       " outside vocabulary of size " + std::to_string(logits.dim(0)));
  Tensor as_row = reshape(tape, logits, {1, logits.dim(0)});
  return cross_entropy_seq(tape, as_row, {target});
}

// Mean binary cross-entropy from logits, the log-sum-exp stable form.
inline Tensor bce_with_logits(Tape* tape, Tensor logits, Tensor target) {
  if (logits.shape() != target.shape())
    throw shape_error("bce: logits " + shape_str(logits.shape()) + " vs target " + shape_str(target.shape()));
  bool rec = detail::want_grad(tape, {&logits});
  const real* pz = logits.data();
  const real* py = target.data();
  real acc = 0;
  for (std::int64_t i = 0; i < logits.size(); ++i) {
    const real z = pz[i];
    acc += std::max(z, real(0)) - z * py[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const real inv = real(1) / static_cast<real>(logits.size());
  Tensor out = Tensor::from_vector({1}, {acc * inv}, rec);
  detail::check_finite(out, "bce_with_logits");
  if (rec) {
    tape->record([logits, target, out, inv]() mutable {
      const real g = out.grad()[0] * inv;
      const real* pz2 = logits.data();
      const real* py2 = target.data();
      real* gz = logits.grad();
      for (std::int64_t i = 0; i < logits.size(); ++i) {
        const real z = pz2[i];
        const real s = z >= 0 ? real(1) / (real(1) + std::exp(-z))
                              : std::exp(z) / (real(1) + std::exp(z));
        gz[i] += g * (s - py2[i]);
      }
    });
  }
  return out;
}

// Soft dice loss on probabilities: 1 - (2*sum(p*q) + s) / (sum(p) + sum(q) + s).
inline Tensor dice_loss(Tape* tape, Tensor probs, Tensor target,
                        real smoothing = real(1)) {
  if (probs.shape() != target.shape())
    throw shape_error("dice: probs " + shape_str(probs.shape()) + " vs target " + shape_str(target.shape()));
  bool rec = detail::want_grad(tape, {&probs});
  const real* pp = probs.data();
  const real* pq = target.data();
  real inter = 0, sp = 0, sq = 0;
  for (std::int64_t i = 0; i < probs.size(); ++i) {
    inter += pp[i] * pq[i];
    sp += pp[i];
    sq += pq[i];
  }
  const real num = real(2) * inter + smoothing;
  const real den = sp + sq + smoothing;
  Tensor out = Tensor::from_vector({1}, {real(1) - num / den}, rec);
  detail::check_finite(out, "dice_loss");
  if (rec) {
    tape->record([probs, target, out, num, den]() mutable {
      const real g = out.grad()[0];
      const real* pq2 = target.data();
      real* gp = probs.grad();
      const real den2 = den * den;
      for (std::int64_t i = 0; i < probs.size(); ++i)
        gp[i] += g * (num - real(2) * pq2[i] * den) / den2;
    });
  }
  return out;
}

inline void assert_all_finite(const Tensor& t, const std::string& where) {
  if (!all_finite(t.values()))
    throw error("non-finite values in " + where);
}

}  // namespace davi
