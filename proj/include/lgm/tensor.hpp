#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lgm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

/// Numerically stable logistic function with exact symmetry:
/// sigmoid(-z) == 1 - sigmoid(z) bit-for-bit (1 - s is a Sterbenz-exact
/// subtraction for s in [0.5, 1]).
inline double stable_sigmoid(double z) {
  if (z < 0.0) return 1.0 - stable_sigmoid(-z);
  return 1.0 / (1.0 + std::exp(-z));
}

struct TensorData {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward touches this tensor
  bool requires_grad = false;
  std::size_t id = 0;  // creation index on the owning tape
};

/// Lightweight handle to a node owned (logically) by a Tape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  std::size_t numel() const { return d_->data.size(); }
  bool requires_grad() const { return d_->requires_grad; }
  std::size_t id() const { return d_->id; }

  std::span<const double> values() const { return d_->data; }
  std::span<double> mutable_values() { return d_->data; }
  std::span<const double> grad() const { return d_->grad; }
  bool has_grad() const { return !d_->grad.empty(); }

  double value() const {
    if (d_->data.size() != 1)
      throw std::invalid_argument("Tensor::value: tensor is not scalar, shape " + shape_str(d_->shape));
    return d_->data[0];
  }

  double operator[](std::size_t i) const { return d_->data[i]; }

  TensorData& node() const { return *d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

enum class Reduction { mean, sum };

/// Gather plan for sparse convolution: (output row, input row, kernel offset index).
struct GatherPlan {
  std::vector<std::array<std::size_t, 3>> pairs;
};

/// Reverse-mode tape. Records one step per primitive whose output requires a
/// gradient; backward() replays the records once, last to first. Tapes are
/// rebuilt per forward pass and confined to a single thread.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves -------------------------------------------------------------

  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("leaf: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    return make(std::move(shape), std::move(data), requires_grad, "leaf");
  }

  Tensor constant(Shape shape, std::vector<double> data) {
    return leaf(std::move(shape), std::move(data), false);
  }

  Tensor scalar(double v) { return constant({1}, {v}); }

  Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return make(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad, "zeros");
  }

  /// Constant copy of a tensor, cut off from the gradient graph.
  Tensor detach(const Tensor& a) {
    return make(a.shape(), std::vector<double>(a.values().begin(), a.values().end()), false, "detach");
  }

  // ---- elementwise --------------------------------------------------------

  Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), "add");
    if (r.requires_grad())
      record(r, {a, b}, [a, b, r] {
        if (a.requires_grad()) axpy(a, r, 1.0);
        if (b.requires_grad()) axpy(b, r, 1.0);
      });
    return r;
  }

  Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), "sub");
    if (r.requires_grad())
      record(r, {a, b}, [a, b, r] {
        if (a.requires_grad()) axpy(a, r, 1.0);
        if (b.requires_grad()) axpy(b, r, -1.0);
      });
    return r;
  }

  Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), "mul");
    if (r.requires_grad())
      record(r, {a, b}, [a, b, r] {
        const auto& g = r.node().grad;
        if (a.requires_grad()) {
          auto& ga = ensure_grad(a);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (b.requires_grad()) {
          auto& gb = ensure_grad(b);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
        }
      });
    return r;
  }

  Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * c;
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "scale");
    if (r.requires_grad()) record(r, {a}, [a, r, c] { axpy(a, r, c); });
    return r;
  }

  Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c;
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "add_scalar");
    if (r.requires_grad()) record(r, {a}, [a, r] { axpy(a, r, 1.0); });
    return r;
  }

  /// 1 - a, elementwise.
  Tensor one_minus(const Tensor& a) { return add_scalar(scale(a, -1.0), 1.0); }

  Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      track_kink(a[i]);
      out[i] = a[i] > 0.0 ? a[i] : 0.0;  // subgradient at 0 is 0
    }
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "relu");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > 0.0) ga[i] += g[i];
      });
    return r;
  }

  Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(a[i]);
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "sigmoid");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = r[i];
          ga[i] += g[i] * s * (1.0 - s);
        }
      });
    return r;
  }

  Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a[i]);
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "exp");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * r[i];
      });
    return r;
  }

  Tensor abs(const Tensor& a) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
      track_kink(a[i]);
      out[i] = std::fabs(a[i]);
    }
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "abs");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (a[i] > 0.0)
            ga[i] += g[i];
          else if (a[i] < 0.0)
            ga[i] -= g[i];  // subgradient at 0 is 0
        }
      });
    return r;
  }

  /// max(a, lo) with pass-through gradient where a > lo.
  Tensor clamp_min(const Tensor& a, double lo) {
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > lo ? a[i] : lo;
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "clamp_min");
    if (r.requires_grad())
      record(r, {a}, [a, r, lo] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (a[i] > lo) ga[i] += g[i];
      });
    return r;
  }

  // ---- structure ----------------------------------------------------------

  /// Same data, new shape (element count must match).
  Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
      throw std::invalid_argument("reshape: element count mismatch for " + shape_str(shape));
    std::vector<double> out(a.values().begin(), a.values().end());
    Tensor r = make(std::move(shape), std::move(out), a.requires_grad(), "reshape");
    if (r.requires_grad()) record(r, {a}, [a, r] { axpy(a, r, 1.0); });
    return r;
  }

  /// Select rows of a rank-2 tensor. Backward scatter-adds (rows may repeat).
  Tensor gather_rows(const Tensor& a, std::vector<std::size_t> rows) {
    require_rank("gather_rows", a, 2);
    const std::size_t n = a.shape()[0], c = a.shape()[1];
    for (std::size_t rr : rows)
      if (rr >= n) throw std::invalid_argument("gather_rows: row index out of range");
    std::vector<double> out(rows.size() * c);
    for (std::size_t k = 0; k < rows.size(); ++k)
      std::copy_n(&a.values()[rows[k] * c], c, &out[k * c]);
    Tensor r = make({rows.size(), c}, std::move(out), a.requires_grad(), "gather_rows");
    if (r.requires_grad())
      record(r, {a}, [a, r, rows = std::move(rows), c] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t k = 0; k < rows.size(); ++k)
          for (std::size_t j = 0; j < c; ++j) ga[rows[k] * c + j] += g[k * c + j];
      });
    return r;
  }

  /// Concatenate rank-1 (or scalar) tensors into one rank-1 tensor.
  Tensor concat(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat: empty input");
    std::size_t total = 0;
    bool rg = false;
    for (const Tensor& p : parts) {
      total += p.numel();
      rg = rg || p.requires_grad();
    }
    std::vector<double> out;
    out.reserve(total);
    for (const Tensor& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
    Tensor r = make({total}, std::move(out), rg, "concat");
    if (rg)
      record(r, parts, [parts, r] {
        const auto& g = r.node().grad;
        std::size_t off = 0;
        for (const Tensor& p : parts) {
          if (p.requires_grad()) {
            auto& gp = ensure_grad(p);
            for (std::size_t i = 0; i < p.numel(); ++i) gp[i] += g[off + i];
          }
          off += p.numel();
        }
      });
    return r;
  }

  /// Append a constant column to a rank-2 tensor: [N,C] -> [N,C+1].
  Tensor append_const_col(const Tensor& a, double fill) {
    require_rank("append_const_col", a, 2);
    const std::size_t n = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(n * (c + 1));
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(&a.values()[i * c], c, &out[i * (c + 1)]);
      out[i * (c + 1) + c] = fill;
    }
    Tensor r = make({n, c + 1}, std::move(out), a.requires_grad(), "append_const_col");
    if (r.requires_grad())
      record(r, {a}, [a, r, n, c] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * (c + 1) + j];
      });
    return r;
  }

  /// Mean of selected row groups: out[m] = mean over rows in groups[m].
  /// Empty groups produce zero rows and receive no gradient.
  Tensor group_mean_rows(const Tensor& a, std::vector<std::vector<std::size_t>> groups) {
    require_rank("group_mean_rows", a, 2);
    const std::size_t c = a.shape()[1];
    std::vector<double> out(groups.size() * c, 0.0);
    for (std::size_t m = 0; m < groups.size(); ++m) {
      if (groups[m].empty()) continue;
      const double inv = 1.0 / static_cast<double>(groups[m].size());
      for (std::size_t row : groups[m])
        for (std::size_t j = 0; j < c; ++j) out[m * c + j] += a[row * c + j];
      for (std::size_t j = 0; j < c; ++j) out[m * c + j] *= inv;
    }
    Tensor r = make({groups.size(), c}, std::move(out), a.requires_grad(), "group_mean_rows");
    if (r.requires_grad())
      record(r, {a}, [a, r, groups = std::move(groups), c] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t m = 0; m < groups.size(); ++m) {
          if (groups[m].empty()) continue;
          const double inv = 1.0 / static_cast<double>(groups[m].size());
          for (std::size_t row : groups[m])
            for (std::size_t j = 0; j < c; ++j) ga[row * c + j] += g[m * c + j] * inv;
        }
      });
    return r;
  }

  // ---- broadcast family ---------------------------------------------------

  /// Multiply every element of `a` by a one-element gate tensor.
  Tensor gate_scalar(const Tensor& a, const Tensor& g) {
    if (g.numel() != 1) throw std::invalid_argument("gate_scalar: gate must have one element");
    const double gv = g[0];
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * gv;
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || g.requires_grad(), "gate_scalar");
    if (r.requires_grad())
      record(r, {a, g}, [a, g, r, gv] {
        const auto& gr = r.node().grad;
        if (a.requires_grad()) {
          auto& ga = ensure_grad(a);
          for (std::size_t i = 0; i < gr.size(); ++i) ga[i] += gr[i] * gv;
        }
        if (g.requires_grad()) {
          auto& gg = ensure_grad(g);
          double acc = 0.0;
          for (std::size_t i = 0; i < gr.size(); ++i) acc += gr[i] * a[i];
          gg[0] += acc;
        }
      });
    return r;
  }

  /// Scale row i of a [N,C] tensor by s[i].
  Tensor scale_rows(const Tensor& a, const Tensor& s) {
    require_rank("scale_rows", a, 2);
    if (s.numel() != a.shape()[0])
      throw std::invalid_argument("scale_rows: scale length does not match row count");
    const std::size_t n = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] * s[i];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || s.requires_grad(), "scale_rows");
    if (r.requires_grad())
      record(r, {a, s}, [a, s, r, n, c] {
        const auto& g = r.node().grad;
        if (a.requires_grad()) {
          auto& ga = ensure_grad(a);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j] * s[i];
        }
        if (s.requires_grad()) {
          auto& gs = ensure_grad(s);
          for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += g[i * c + j] * a[i * c + j];
            gs[i] += acc;
          }
        }
      });
    return r;
  }

  /// Multiply an [H,W,C] tensor by an [H,W] map, broadcast over channels.
  Tensor mul_mask2d(const Tensor& a, const Tensor& m) {
    require_rank("mul_mask2d", a, 3);
    require_rank("mul_mask2d", m, 2);
    const std::size_t h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    if (m.shape()[0] != h || m.shape()[1] != w)
      throw std::invalid_argument("mul_mask2d: mask shape mismatch");
    std::vector<double> out(a.numel());
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t j = 0; j < c; ++j) out[p * c + j] = a[p * c + j] * m[p];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || m.requires_grad(), "mul_mask2d");
    if (r.requires_grad())
      record(r, {a, m}, [a, m, r, h, w, c] {
        const auto& g = r.node().grad;
        if (a.requires_grad()) {
          auto& ga = ensure_grad(a);
          for (std::size_t p = 0; p < h * w; ++p)
            for (std::size_t j = 0; j < c; ++j) ga[p * c + j] += g[p * c + j] * m[p];
        }
        if (m.requires_grad()) {
          auto& gm = ensure_grad(m);
          for (std::size_t p = 0; p < h * w; ++p) {
            double acc = 0.0;
            for (std::size_t j = 0; j < c; ++j) acc += g[p * c + j] * a[p * c + j];
            gm[p] += acc;
          }
        }
      });
    return r;
  }

  /// Hard pixel mask: kept pixels are copied, dropped pixels are exactly +0.0.
  /// The mask is a plain byte vector, not a tape value (no gradient path).
  Tensor apply_hard_mask2d(const Tensor& a, std::vector<std::uint8_t> mask) {
    require_rank("apply_hard_mask2d", a, 3);
    const std::size_t h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    if (mask.size() != h * w) throw std::invalid_argument("apply_hard_mask2d: mask size mismatch");
    std::vector<double> out(a.numel(), 0.0);
    for (std::size_t p = 0; p < h * w; ++p)
      if (mask[p])
        for (std::size_t j = 0; j < c; ++j) out[p * c + j] = a[p * c + j];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad(), "apply_hard_mask2d");
    if (r.requires_grad())
      record(r, {a}, [a, r, mask = std::move(mask), c] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t p = 0; p < mask.size(); ++p)
          if (mask[p])
            for (std::size_t j = 0; j < c; ++j) ga[p * c + j] += g[p * c + j];
      });
    return r;
  }

  /// Add a [C] vector to every row of an [N,C] tensor.
  Tensor add_rowvec(const Tensor& a, const Tensor& b) {
    require_rank("add_rowvec", a, 2);
    require_rank("add_rowvec", b, 1);
    const std::size_t n = a.shape()[0], c = a.shape()[1];
    if (b.shape()[0] != c) throw std::invalid_argument("add_rowvec: vector length mismatch");
    std::vector<double> out(n * c);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a[i * c + j] + b[j];
    Tensor r = make(a.shape(), std::move(out), a.requires_grad() || b.requires_grad(), "add_rowvec");
    if (r.requires_grad())
      record(r, {a, b}, [a, b, r, n, c] {
        const auto& g = r.node().grad;
        if (a.requires_grad()) axpy(a, r, 1.0);
        if (b.requires_grad()) {
          auto& gb = ensure_grad(b);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
        }
      });
    return r;
  }

  // ---- reductions ----------------------------------------------------------

  Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
    Tensor r = make({1}, {acc}, a.requires_grad(), "sum");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const double g = r.node().grad[0];
        for (double& v : ga) v += g;
      });
    return r;
  }

  Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += a[i];
    const double inv = 1.0 / static_cast<double>(a.numel());
    Tensor r = make({1}, {acc * inv}, a.requires_grad(), "mean");
    if (r.requires_grad())
      record(r, {a}, [a, r, inv] {
        auto& ga = ensure_grad(a);
        const double g = r.node().grad[0] * inv;
        for (double& v : ga) v += g;
      });
    return r;
  }

  /// Product of all elements. Backward uses leave-one-out prefix/suffix
  /// products, so zero factors are handled without division.
  Tensor prod(const Tensor& a) {
    double acc = 1.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc *= a[i];
    Tensor r = make({1}, {acc}, a.requires_grad(), "prod");
    if (r.requires_grad())
      record(r, {a}, [a, r] {
        auto& ga = ensure_grad(a);
        const double g = r.node().grad[0];
        const std::size_t n = a.numel();
        std::vector<double> prefix(n + 1, 1.0), suffix(n + 1, 1.0);
        for (std::size_t i = 0; i < n; ++i) prefix[i + 1] = prefix[i] * a[i];
        for (std::size_t i = n; i > 0; --i) suffix[i - 1] = suffix[i] * a[i - 1];
        for (std::size_t i = 0; i < n; ++i) ga[i] += g * prefix[i] * suffix[i + 1];
      });
    return r;
  }

  /// Global average pool: [H,W,C] -> [C].
  Tensor gap2d(const Tensor& a) {
    require_rank("gap2d", a, 3);
    const std::size_t h = a.shape()[0], w = a.shape()[1], c = a.shape()[2];
    std::vector<double> out(c, 0.0);
    for (std::size_t p = 0; p < h * w; ++p)
      for (std::size_t j = 0; j < c; ++j) out[j] += a[p * c + j];
    const double inv = 1.0 / static_cast<double>(h * w);
    for (double& v : out) v *= inv;
    Tensor r = make({c}, std::move(out), a.requires_grad(), "gap2d");
    if (r.requires_grad())
      record(r, {a}, [a, r, h, w, c, inv] {
        auto& ga = ensure_grad(a);
        const auto& g = r.node().grad;
        for (std::size_t p = 0; p < h * w; ++p)
          for (std::size_t j = 0; j < c; ++j) ga[p * c + j] += g[j] * inv;
      });
    return r;
  }

  // ---- linear algebra -------------------------------------------------------

  Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k)
      throw std::invalid_argument("matmul: inner dimensions " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = a[i * k + l];
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * b[l * n + j];
      }
    Tensor r = make({m, n}, std::move(out), a.requires_grad() || b.requires_grad(), "matmul");
    if (r.requires_grad())
      record(r, {a, b}, [a, b, r, m, k, n] {
        const auto& g = r.node().grad;
        if (a.requires_grad()) {
          auto& ga = ensure_grad(a);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t l = 0; l < k; ++l) {
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * b[l * n + j];
              ga[i * k + l] += acc;
            }
        }
        if (b.requires_grad()) {
          auto& gb = ensure_grad(b);
          for (std::size_t l = 0; l < k; ++l)
            for (std::size_t j = 0; j < n; ++j) {
              double acc = 0.0;
              for (std::size_t i = 0; i < m; ++i) acc += a[i * k + l] * g[i * n + j];
              gb[l * n + j] += acc;
            }
        }
      });
    return r;
  }

  /// Dense 2-D convolution with zero padding ("same"), odd kernel size.
  /// Input [H,W,Cin], weights [K,K,Cout,Cin], bias [Cout] -> [H,W,Cout].
  Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b) {
    require_rank("conv2d", x, 3);
    require_rank("conv2d", w, 4);
    require_rank("conv2d", b, 1);
    const std::size_t h = x.shape()[0], wd = x.shape()[1], ci = x.shape()[2];
    const std::size_t k = w.shape()[0], co = w.shape()[2];
    if (w.shape()[1] != k || w.shape()[3] != ci || k % 2 == 0)
      throw std::invalid_argument("conv2d: bad kernel shape " + shape_str(w.shape()));
    if (b.shape()[0] != co) throw std::invalid_argument("conv2d: bias length mismatch");
    const long r0 = static_cast<long>(k / 2);
    std::vector<double> out(h * wd * co);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xp = 0; xp < wd; ++xp)
        for (std::size_t oc = 0; oc < co; ++oc) {
          double acc = b[oc];
          for (std::size_t dy = 0; dy < k; ++dy) {
            const long yy = static_cast<long>(y) + static_cast<long>(dy) - r0;
            if (yy < 0 || yy >= static_cast<long>(h)) continue;
            for (std::size_t dx = 0; dx < k; ++dx) {
              const long xx = static_cast<long>(xp) + static_cast<long>(dx) - r0;
              if (xx < 0 || xx >= static_cast<long>(wd)) continue;
              const std::size_t xbase = (static_cast<std::size_t>(yy) * wd + static_cast<std::size_t>(xx)) * ci;
              const std::size_t wbase = ((dy * k + dx) * co + oc) * ci;
              for (std::size_t ic = 0; ic < ci; ++ic) acc += w[wbase + ic] * x[xbase + ic];
            }
          }
          out[(y * wd + xp) * co + oc] = acc;
        }
    Tensor r = make({h, wd, co}, std::move(out),
                    x.requires_grad() || w.requires_grad() || b.requires_grad(), "conv2d");
    if (r.requires_grad())
      record(r, {x, w, b}, [x, w, b, r, h, wd, ci, k, co, r0] {
        const auto& g = r.node().grad;
        double* gx = x.requires_grad() ? ensure_grad(x).data() : nullptr;
        double* gw = w.requires_grad() ? ensure_grad(w).data() : nullptr;
        double* gb = b.requires_grad() ? ensure_grad(b).data() : nullptr;
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t xp = 0; xp < wd; ++xp)
            for (std::size_t oc = 0; oc < co; ++oc) {
              const double go = g[(y * wd + xp) * co + oc];
              if (go == 0.0) continue;
              if (gb) gb[oc] += go;
              for (std::size_t dy = 0; dy < k; ++dy) {
                const long yy = static_cast<long>(y) + static_cast<long>(dy) - r0;
                if (yy < 0 || yy >= static_cast<long>(h)) continue;
                for (std::size_t dx = 0; dx < k; ++dx) {
                  const long xx = static_cast<long>(xp) + static_cast<long>(dx) - r0;
                  if (xx < 0 || xx >= static_cast<long>(wd)) continue;
                  const std::size_t xbase =
                      (static_cast<std::size_t>(yy) * wd + static_cast<std::size_t>(xx)) * ci;
                  const std::size_t wbase = ((dy * k + dx) * co + oc) * ci;
                  for (std::size_t ic = 0; ic < ci; ++ic) {
                    if (gx) gx[xbase + ic] += go * w[wbase + ic];
                    if (gw) gw[wbase + ic] += go * x[xbase + ic];
                  }
                }
              }
            }
      });
    return r;
  }

  /// Gather-style sparse convolution: every output row starts from the bias,
  /// then accumulates W[k] * f[in] for each (out,in,k) pair in plan order.
  /// Features [Min,Din], weights [K,Dout,Din], bias [Dout] -> [m_out,Dout].
  Tensor sparse_gather_conv(const Tensor& f, const Tensor& w, const Tensor& b,
                            const GatherPlan& plan, std::size_t m_out) {
    require_rank("sparse_gather_conv", f, 2);
    require_rank("sparse_gather_conv", w, 3);
    const std::size_t din = f.shape()[1], kk = w.shape()[0], dout = w.shape()[1];
    if (w.shape()[2] != din) throw std::invalid_argument("sparse_gather_conv: weight/feature channels");
    if (b.shape()[0] != dout) throw std::invalid_argument("sparse_gather_conv: bias length");
    for (const auto& p : plan.pairs)
      if (p[0] >= m_out || p[1] >= f.shape()[0] || p[2] >= kk)
        throw std::invalid_argument("sparse_gather_conv: plan index out of range");
    std::vector<double> out(m_out * dout);
    for (std::size_t m = 0; m < m_out; ++m)
      for (std::size_t j = 0; j < dout; ++j) out[m * dout + j] = b[j];
    for (const auto& p : plan.pairs) {
      const double* fin = &f.values()[p[1] * din];
      const double* wk = &w.values()[p[2] * dout * din];
      double* o = &out[p[0] * dout];
      for (std::size_t j = 0; j < dout; ++j) {
        double acc = 0.0;
        const double* wr = wk + j * din;
        for (std::size_t ic = 0; ic < din; ++ic) acc += wr[ic] * fin[ic];
        o[j] += acc;
      }
    }
    Tensor r = make({m_out, dout}, std::move(out),
                    f.requires_grad() || w.requires_grad() || b.requires_grad(), "sparse_gather_conv");
    if (r.requires_grad())
      record(r, {f, w, b}, [f, w, b, r, plan, m_out, din, dout] {
        const auto& g = r.node().grad;
        double* gf = f.requires_grad() ? ensure_grad(f).data() : nullptr;
        double* gw = w.requires_grad() ? ensure_grad(w).data() : nullptr;
        if (b.requires_grad()) {
          auto& gb = ensure_grad(b);
          for (std::size_t m = 0; m < m_out; ++m)
            for (std::size_t j = 0; j < dout; ++j) gb[j] += g[m * dout + j];
        }
        for (const auto& p : plan.pairs) {
          const double* go = &g[p[0] * dout];
          const double* fin = &f.values()[p[1] * din];
          const double* wk = &w.values()[p[2] * dout * din];
          for (std::size_t j = 0; j < dout; ++j) {
            const double gj = go[j];
            if (gj == 0.0) continue;
            const double* wr = wk + j * din;
            for (std::size_t ic = 0; ic < din; ++ic) {
              if (gf) gf[p[1] * din + ic] += gj * wr[ic];
              if (gw) gw[(p[2] * dout + j) * din + ic] += gj * fin[ic];
            }
          }
        }
      });
    return r;
  }

  // ---- loss -----------------------------------------------------------------

  /// Cross entropy with an internal softmax over the last axis.
  /// logits [N,K], labels size N -> scalar (mean or sum over rows).
  Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                               Reduction reduction = Reduction::mean) {
    require_rank("softmax_cross_entropy", logits, 2);
    const std::size_t n = logits.shape()[0], k = logits.shape()[1];
    if (labels.size() != n) throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= k)
        throw std::invalid_argument("softmax_cross_entropy: label out of range");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* z = &logits.values()[i * k];
      double m = z[0];
      for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
      total += m + std::log(s) - z[static_cast<std::size_t>(labels[i])];
    }
    const double wgt = reduction == Reduction::mean ? 1.0 / static_cast<double>(n) : 1.0;
    Tensor r = make({1}, {total * wgt}, logits.requires_grad(), "softmax_cross_entropy");
    if (r.requires_grad())
      record(r, {logits}, [logits, r, labels, n, k, wgt] {
        auto& gl = ensure_grad(logits);
        const double g = r.node().grad[0] * wgt;
        for (std::size_t i = 0; i < n; ++i) {
          const double* z = &logits.values()[i * k];
          double m = z[0];
          for (std::size_t j = 1; j < k; ++j) m = std::max(m, z[j]);
          double s = 0.0;
          for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - m);
          for (std::size_t j = 0; j < k; ++j) {
            double p = std::exp(z[j] - m) / s;
            if (j == static_cast<std::size_t>(labels[i])) p -= 1.0;
            gl[i * k + j] += g * p;
          }
        }
      });
    return r;
  }

  // ---- backward ---------------------------------------------------------------

  /// Populate grad on every requires_grad leaf reachable from `loss`.
  void backward(const Tensor& loss) {
    if (steps_.empty()) throw std::invalid_argument("backward: tape is empty");
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (ran_backward_) throw std::logic_error("backward: tape already consumed");
    ran_backward_ = true;
    for (const Tensor& t : tracked_) ensure_grad(t);  // unused leaves end up exactly zero
    if (!loss.requires_grad()) return;  // loss does not reach a differentiable leaf
    ensure_grad(loss)[0] = 1.0;
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it)
      if (it->out.has_grad()) it->back();
    for (const Tensor& t : tracked_)
      if (t.has_grad())
        for (double v : t.grad())
          if (!std::isfinite(v)) throw std::runtime_error("backward: non-finite gradient");
  }

  std::size_t num_steps() const { return steps_.size(); }

  /// Smallest |input| seen at a relu/abs kink during forward; used by
  /// finite-difference harnesses to reject fixtures straddling a kink.
  double min_kink_margin() const { return min_kink_; }

 private:
  struct Step {
    Tensor out;
    std::function<void()> back;
  };

  Tensor make(Shape shape, std::vector<double> data, bool requires_grad, const char* op) {
    for (double v : data)
      if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
    auto node = std::make_shared<TensorData>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->requires_grad = requires_grad;
    node->id = next_id_++;
    Tensor t(std::move(node));
    if (requires_grad) tracked_.push_back(t);
    return t;
  }

  void record(const Tensor& out, const std::vector<Tensor>& inputs, std::function<void()> back) {
    for (const Tensor& in : inputs)
      if (in.id() >= out.id()) throw std::logic_error("tape: inputs must precede their operation");
    steps_.push_back({out, std::move(back)});
  }

  static std::vector<double>& ensure_grad(const Tensor& t) {
    auto& n = t.node();
    if (n.grad.empty()) n.grad.assign(n.data.size(), 0.0);
    return n.grad;
  }

  static void axpy(const Tensor& dst, const Tensor& src, double c) {
    auto& gd = ensure_grad(dst);
    const auto& gs = src.node().grad;
    for (std::size_t i = 0; i < gd.size(); ++i) gd[i] += c * gs[i];
  }

  static void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
      throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  }

  static void require_rank(const char* op, const Tensor& t, std::size_t rank) {
    if (t.shape().size() != rank)
      throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                  ", got " + shape_str(t.shape()));
  }

  void track_kink(double v) { min_kink_ = std::min(min_kink_, std::fabs(v)); }

  std::vector<Step> steps_;
  std::vector<Tensor> tracked_;
  std::size_t next_id_ = 0;
  bool ran_backward_ = false;
  double min_kink_ = std::numeric_limits<double>::infinity();
};

}  // namespace lgm
