#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "lgm/occupancy.hpp"
#include "lgm/rng.hpp"
#include "lgm/tensor.hpp"

namespace lgm {

/// Which gradient the attack sees. fgm detaches every occupancy from the
/// tape; lgm keeps the released occupancies differentiable so architecture
/// changes are reflected in the gradient.
enum class GradFlow { fgm, lgm };

/// Value used in the forward pass: the hard gate, or its soft release.
enum class ForwardGate { hard, soft };

struct EvalMode {
  GradFlow flow = GradFlow::fgm;
  ForwardGate forward = ForwardGate::hard;
  double lambda = 1.0;  // slope of the sign release (and of the 3-D relation)
  RelationKind relation = RelationKind::sigmoid_like;
  double bandwidth = 0.5;  // rbf relation only

  double relation_param() const { return relation == RelationKind::rbf ? bandwidth : lambda; }

  /// Plain inference: hard gates, nothing differentiable through them.
  static EvalMode inference() { return {}; }

  static EvalMode fgm() { return {}; }

  /// Soft-forward leaded mode (default attack configuration).
  static EvalMode lgm(double lambda) {
    EvalMode m;
    m.flow = GradFlow::lgm;
    m.forward = ForwardGate::soft;
    m.lambda = lambda;
    return m;
  }

  /// Hard-forward leaded mode: hard values forward, soft release backward.
  static EvalMode lgm_hard(double lambda) {
    EvalMode m = lgm(lambda);
    m.forward = ForwardGate::hard;
    return m;
  }
};

// ---- parameters -------------------------------------------------------------

struct Param {
  Shape shape;
  std::vector<double> value;
  std::size_t size() const { return value.size(); }
};

inline Param make_param(Shape shape, Rng& rng, double scale) {
  Param p;
  p.shape = std::move(shape);
  p.value.resize(shape_numel(p.shape));
  for (double& v : p.value) v = rng.normal() * scale;
  return p;
}

inline Param make_zero_param(Shape shape) {
  Param p;
  p.shape = std::move(shape);
  p.value.assign(shape_numel(p.shape), 0.0);
  return p;
}

/// Copies parameters onto a tape as leaves; when trainable, remembers the
/// (param, leaf) pairs so an optimizer can read gradients back.
class ParamBind {
 public:
  ParamBind(Tape& tape, bool trainable) : tape_(tape), trainable_(trainable) {}

  Tensor operator()(Param& p) {
    Tensor t = tape_.leaf(p.shape, p.value, trainable_);
    if (trainable_) bound_.emplace_back(&p, t);
    return t;
  }

  const std::vector<std::pair<Param*, Tensor>>& bound() const { return bound_; }
  Tape& tape() { return tape_; }
  bool trainable() const { return trainable_; }

 private:
  Tape& tape_;
  bool trainable_;
  std::vector<std::pair<Param*, Tensor>> bound_;
};

// ---- straight-through gates ---------------------------------------------------

/// Hard value forward, soft gradient backward (scalar).
inline Tensor straight_through(Tape& t, const Tensor& soft, double hard) {
  return t.add(soft, t.scalar(hard - soft.value()));
}

inline Tensor straight_through_vec(Tape& t, const Tensor& soft, const std::vector<double>& hard) {
  std::vector<double> delta(hard.size());
  for (std::size_t i = 0; i < hard.size(); ++i) delta[i] = hard[i] - soft[i];
  return t.add(soft, t.constant(soft.shape(), std::move(delta)));
}

// ---- kernels & generators ----------------------------------------------------

struct Conv2dKernel {
  std::size_t size = 3, in_ch = 0, out_ch = 0;
  Param w;  // [K,K,out,in]
  Param b;  // [out]
};

inline Conv2dKernel make_conv2d_kernel(std::size_t size, std::size_t in_ch, std::size_t out_ch,
                                       Rng& rng) {
  Conv2dKernel k;
  k.size = size;
  k.in_ch = in_ch;
  k.out_ch = out_ch;
  const double scale = 1.0 / std::sqrt(static_cast<double>(size * size * in_ch));
  k.w = make_param({size, size, out_ch, in_ch}, rng, scale);
  k.b = make_zero_param({out_ch});
  return k;
}

struct Conv3dKernel {
  std::size_t size = 3, in_ch = 0, out_ch = 0;
  Param w;  // [K^3,out,in], offsets in canonical order
  Param b;  // [out]
};

inline Conv3dKernel make_conv3d_kernel(std::size_t size, std::size_t in_ch, std::size_t out_ch,
                                       Rng& rng) {
  if (size % 2 == 0) throw std::invalid_argument("make_conv3d_kernel: size must be odd");
  Conv3dKernel k;
  k.size = size;
  k.in_ch = in_ch;
  k.out_ch = out_ch;
  const double scale = 1.0 / std::sqrt(static_cast<double>(size * size * size * in_ch));
  k.w = make_param({size * size * size, out_ch, in_ch}, rng, scale);
  k.b = make_zero_param({out_ch});
  return k;
}

/// Canonical offset enumeration for a cubic kernel: x slowest, z fastest.
inline std::vector<VoxelCoord> kernel_offsets(std::size_t size) {
  const std::int64_t r = static_cast<std::int64_t>(size - 1) / 2;
  std::vector<VoxelCoord> off;
  off.reserve(size * size * size);
  for (std::int64_t dx = -r; dx <= r; ++dx)
    for (std::int64_t dy = -r; dy <= r; ++dy)
      for (std::int64_t dz = -r; dz <= r; ++dz) off.push_back({dx, dy, dz});
  return off;
}

/// Scalar occupancy generator for layer skipping: pooled features -> affine.
struct ScalarGate {
  Param w;  // [D]
  Param b;  // [1]
};

inline ScalarGate make_scalar_gate(std::size_t channels, Rng& rng) {
  ScalarGate g;
  g.w = make_param({channels}, rng, 1.0 / std::sqrt(static_cast<double>(channels)));
  g.b = make_zero_param({1});
  return g;
}

/// Residual block guarded by a scalar gate.
struct SkippableLayer {
  Conv2dKernel transform;  // shape-preserving H
  ScalarGate gate;         // G
};

// ---- layer skipping -----------------------------------------------------------

struct LayerSkipResult {
  Tensor out;     // F'
  Tensor score;   // q on tape
  Tensor gate;    // gate actually multiplied in (undefined on the literal path)
  Tensor h_out;   // H(F) when it was built
  double q_value = 0.0;
  bool executed = false;
};

inline Tensor skip_transform(Tape& t, const Tensor& f, const Tensor& w, const Tensor& b) {
  return t.add(f, t.relu(t.conv2d(f, w, b)));
}

/// One skippable layer. fgm+hard follows the literal gated definition
/// (selected branch, no arithmetic mixing) so inference is bit-identical to
/// the ungeneralized form; lgm mixes through the released gate on the tape.
inline LayerSkipResult layer_skip_forward(Tape& t, const Tensor& f, SkippableLayer& layer,
                                          const EvalMode& mode, ParamBind& bind) {
  LayerSkipResult r;
  Tensor gw = bind(layer.gate.w);
  Tensor gb = bind(layer.gate.b);
  Tensor pooled = t.reshape(t.gap2d(f), {1, layer.gate.w.size()});
  r.score = t.add(t.reshape(t.matmul(pooled, t.reshape(gw, {layer.gate.w.size(), 1})), {1}), gb);
  r.q_value = r.score.value();
  r.executed = hard_sign_occupancy(r.q_value) == 1.0;

  if (mode.flow == GradFlow::fgm) {
    if (mode.forward == ForwardGate::hard) {
      if (r.executed) {
        r.h_out = skip_transform(t, f, bind(layer.transform.w), bind(layer.transform.b));
        r.out = r.h_out;
      } else {
        r.out = f;
      }
    } else {
      const double s = soft_sign_occupancy(r.q_value, mode.lambda);  // detached
      r.h_out = skip_transform(t, f, bind(layer.transform.w), bind(layer.transform.b));
      r.out = t.add(t.gate_scalar(r.h_out, t.scalar(s)), t.gate_scalar(f, t.scalar(1.0 - s)));
    }
    return r;
  }

  Tensor soft = t.sigmoid(t.scale(r.score, mode.lambda));
  r.gate = mode.forward == ForwardGate::soft ? soft
                                             : straight_through(t, soft, r.executed ? 1.0 : 0.0);
  r.h_out = skip_transform(t, f, bind(layer.transform.w), bind(layer.transform.b));
  r.out = t.add(t.gate_scalar(r.h_out, r.gate), t.gate_scalar(f, t.one_minus(r.gate)));
  return r;
}

// ---- 2-D sparse convolution -----------------------------------------------------

struct SparseConv2dResult {
  Tensor out;        // gated conv output [H,W,D']
  Tensor conv_out;   // ungated convolution
  Tensor scores;     // generator map [H,W]
  Tensor soft_mask;  // defined on lgm paths
  std::vector<std::uint8_t> hard_mask;  // per pixel, scores > 0
};

/// Pixel-gated convolution: valid pixels carry the convolution output, masked
/// pixels are exactly zero. `scores` is the generator's [H,W] map, already on
/// the tape.
inline SparseConv2dResult sparse_conv2d_forward(Tape& t, const Tensor& f, const Tensor& w,
                                                const Tensor& b, const Tensor& scores,
                                                const EvalMode& mode) {
  if (scores.shape().size() != 2) throw std::invalid_argument("sparse_conv2d_forward: scores must be [H,W]");
  if (f.shape()[0] != scores.shape()[0] || f.shape()[1] != scores.shape()[1])
    throw std::invalid_argument("sparse_conv2d_forward: feature/score shape mismatch");
  SparseConv2dResult r;
  r.conv_out = t.conv2d(f, w, b);
  r.scores = scores;
  r.hard_mask.resize(scores.numel());
  for (std::size_t p = 0; p < scores.numel(); ++p)
    r.hard_mask[p] = hard_sign_occupancy(scores[p]) == 1.0 ? 1 : 0;

  if (mode.flow == GradFlow::fgm) {
    if (mode.forward == ForwardGate::hard) {
      r.out = t.apply_hard_mask2d(r.conv_out, r.hard_mask);
    } else {
      std::vector<double> soft(scores.numel());
      for (std::size_t p = 0; p < soft.size(); ++p)
        soft[p] = soft_sign_occupancy(scores[p], mode.lambda);
      r.out = t.mul_mask2d(r.conv_out, t.constant(scores.shape(), std::move(soft)));
    }
    return r;
  }

  r.soft_mask = t.sigmoid(t.scale(scores, mode.lambda));
  Tensor mask = r.soft_mask;
  if (mode.forward == ForwardGate::hard) {
    std::vector<double> hard(r.hard_mask.begin(), r.hard_mask.end());
    mask = straight_through_vec(t, r.soft_mask, hard);
  }
  r.out = t.mul_mask2d(r.conv_out, mask);
  return r;
}

// ---- 3-D sparse convolution -----------------------------------------------------

/// Per-forward geometry of a 3-D sparse conv stack: which voxel rows exist,
/// the gather pairs between them, and how points map onto rows. All layers of
/// a stack share one geometry (stride-1 kernels do not change occupancy).
struct Sparse3dGeometry {
  const SparseVoxelGrid* grid = nullptr;
  bool extended = false;       // rows over the extended set (lgm), else occupied
  std::size_t rows = 0;        // M or M'
  GatherPlan plan;             // canonical (row, neighbor, offset) pairs
  std::vector<std::vector<std::size_t>> pooling_groups;  // per row, member points
  std::vector<std::size_t> point_rows;                   // per point, its voxel row
};

inline Sparse3dGeometry make_sparse3d_geometry(const SparseVoxelGrid& grid, std::size_t kernel_size,
                                               bool extended) {
  Sparse3dGeometry g;
  g.grid = &grid;
  g.extended = extended;
  if (extended && !grid.has_extension())
    throw std::invalid_argument("make_sparse3d_geometry: grid has no extended set");
  const auto& out_voxels = extended ? grid.extended_voxels : grid.voxels;
  const auto& index = extended ? grid.extended_index : grid.voxel_index;
  g.rows = out_voxels.size();
  const auto offsets = kernel_offsets(kernel_size);
  for (std::size_t m = 0; m < out_voxels.size(); ++m)
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      const VoxelCoord q{out_voxels[m][0] + offsets[k][0], out_voxels[m][1] + offsets[k][1],
                         out_voxels[m][2] + offsets[k][2]};
      auto it = index.find(q);
      if (it != index.end()) g.plan.pairs.push_back({m, it->second, k});
    }
  g.pooling_groups.assign(g.rows, {});
  for (std::size_t n = 0; n < grid.points.size(); ++n)
    g.pooling_groups[grid.point_to_voxel[n]].push_back(n);
  g.point_rows.assign(grid.points.size(), 0);
  for (std::size_t n = 0; n < grid.points.size(); ++n) g.point_rows[n] = grid.point_to_voxel[n];
  return g;
}

/// Occupancy vector over the geometry rows for a given mode. Hard modes get
/// detached constants; lgm modes get the released occupancies on the tape.
inline Tensor occupancy_vector(Tape& t, const Sparse3dGeometry& geo, const Tensor& points,
                               const EvalMode& mode) {
  const SparseVoxelGrid& grid = *geo.grid;
  if (!geo.extended) {
    // occupied rows only; every hard occupancy is 1
    return t.constant({geo.rows}, std::vector<double>(geo.rows, 1.0));
  }
  std::vector<double> hard(geo.rows);
  for (std::size_t m = 0; m < geo.rows; ++m)
    hard[m] = m < grid.occupied_count() ? 1.0 : 0.0;
  if (mode.flow == GradFlow::fgm && mode.forward == ForwardGate::hard)
    return t.constant({geo.rows}, std::move(hard));
  if (mode.flow == GradFlow::fgm) {  // soft values, detached
    std::vector<double> soft(geo.rows);
    for (std::size_t m = 0; m < geo.rows; ++m)
      soft[m] = soft_voxel_occupancy_value(grid, m, mode.relation, mode.relation_param());
    return t.constant({geo.rows}, std::move(soft));
  }
  Tensor soft = soft_occupancy_vector(t, grid, points, mode.relation, mode.relation_param());
  if (mode.forward == ForwardGate::hard) return straight_through_vec(t, soft, hard);
  return soft;
}

/// One gated 3-D sparse convolution over the geometry rows. `occ` scales each
/// output row; pass an undefined tensor on the plain occupied-rows path where
/// every gate is 1 (keeps inference bit-identical to the literal definition).
inline Tensor sparse_conv3d_forward(Tape& t, const Tensor& feats, const Tensor& w, const Tensor& b,
                                    const Sparse3dGeometry& geo, const Tensor& occ) {
  if (feats.shape()[0] != geo.rows)
    throw std::invalid_argument("sparse_conv3d_forward: features misaligned with geometry rows");
  Tensor out = t.sparse_gather_conv(feats, w, b, geo.plan, geo.rows);
  if (!occ.defined()) return out;
  return t.scale_rows(out, occ);
}

}  // namespace lgm
