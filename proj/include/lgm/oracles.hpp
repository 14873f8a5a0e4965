#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <unordered_map>
#include <vector>

#include "lgm/occupancy.hpp"
#include "lgm/victims.hpp"

// Independent verification helpers: central finite differences and
// brute-force reference computations. Everything here is deliberately
// written from first principles, separate from the implementation paths it
// checks; the `verify` CLI subcommand and the test suites both run on top
// of these.

namespace lgm::oracles {

/// Central finite-difference gradient of a scalar function of a flat vector.
inline std::vector<double> finite_difference_gradient(
    const std::function<double(const std::vector<double>&)>& f, std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f(x);
    x[i] = keep - h;
    const double fm = f(x);
    x[i] = keep;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

struct GradCompare {
  double max_err = 0.0;        // max over coordinates of |a-b| / max(|a|,|b|,floor)
  std::size_t worst = 0;
  double a_at_worst = 0.0;
  double b_at_worst = 0.0;
};

/// Relative error with an absolute floor, the usual gradient-check metric.
inline GradCompare compare_gradients(std::span<const double> a, std::span<const double> b,
                                     double floor = 1.0) {
  GradCompare r;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    const double err = std::fabs(a[i] - b[i]) / denom;
    if (err > r.max_err) {
      r.max_err = err;
      r.worst = i;
      r.a_at_worst = a[i];
      r.b_at_worst = b[i];
    }
  }
  return r;
}

/// Occupied-cell count by scanning every cell of the cloud's bounding box and
/// testing point membership directly (no hashing, no dedup).
inline std::size_t brute_force_occupied_count(const std::vector<Point3>& pts, double voxel_size) {
  VoxelCoord lo{0, 0, 0}, hi{0, 0, 0};
  for (int i = 0; i < 3; ++i) {
    lo[i] = std::numeric_limits<std::int64_t>::max();
    hi[i] = std::numeric_limits<std::int64_t>::min();
  }
  for (const Point3& p : pts)
    for (int i = 0; i < 3; ++i) {
      const auto c = static_cast<std::int64_t>(std::floor(p[i] / voxel_size));
      lo[i] = std::min(lo[i], c);
      hi[i] = std::max(hi[i], c);
    }
  std::size_t count = 0;
  for (std::int64_t x = lo[0]; x <= hi[0]; ++x)
    for (std::int64_t y = lo[1]; y <= hi[1]; ++y)
      for (std::int64_t z = lo[2]; z <= hi[2]; ++z) {
        bool occupied = false;
        for (const Point3& p : pts) {
          bool inside = true;
          const double cell[3] = {static_cast<double>(x), static_cast<double>(y),
                                  static_cast<double>(z)};
          for (int i = 0; i < 3 && inside; ++i)
            inside = p[i] >= cell[i] * voxel_size && p[i] < (cell[i] + 1.0) * voxel_size;
          if (inside) {
            occupied = true;
            break;
          }
        }
        if (occupied) ++count;
      }
  return count;
}

/// Reachable voxels per point by enumerating the 27 cells around each point's
/// own voxel and keeping those whose region intersects the point's step cube
/// [p-s, p+s]^3. Valid for step budgets below the voxel size.
struct BruteExtended {
  std::unordered_map<VoxelCoord, std::vector<std::size_t>, VoxelHash> candidates;
};

inline BruteExtended brute_force_extended(const std::vector<Point3>& pts, double voxel_size,
                                          double step) {
  BruteExtended out;
  for (std::size_t n = 0; n < pts.size(); ++n) {
    const Point3& p = pts[n];
    VoxelCoord home;
    for (int i = 0; i < 3; ++i)
      home[i] = static_cast<std::int64_t>(std::floor(p[i] / voxel_size));
    for (std::int64_t dx = -1; dx <= 1; ++dx)
      for (std::int64_t dy = -1; dy <= 1; ++dy)
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          const VoxelCoord v{home[0] + dx, home[1] + dy, home[2] + dz};
          bool reach = true;
          for (int i = 0; i < 3 && reach; ++i) {
            const double cell_lo = static_cast<double>(v[i]) * voxel_size;
            const double cell_hi = (static_cast<double>(v[i]) + 1.0) * voxel_size;
            // [p-s, p+s] must meet the half-open cell [cell_lo, cell_hi)
            reach = (p[i] + step >= cell_lo) && (p[i] - step < cell_hi);
          }
          if (reach) out.candidates[v].push_back(n);
        }
  }
  return out;
}

// ---- literal network evaluators ---------------------------------------------
//
// Reference forward passes written as plain loops straight from the gated
// definitions (no tape, no generalized gate arithmetic). Loop nesting follows
// the documented canonical summation order, so hard-gated inference must be
// bit-identical to these.

/// Dense 2-D convolution, zero padding, bias first then (dy,dx,ic) ascending.
inline std::vector<double> ref_conv2d(const std::vector<double>& x, std::size_t h, std::size_t w,
                                      std::size_t ci, const std::vector<double>& wgt, std::size_t k,
                                      std::size_t co, const std::vector<double>& bias) {
  const long r0 = static_cast<long>(k / 2);
  std::vector<double> out(h * w * co);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t xp = 0; xp < w; ++xp)
      for (std::size_t oc = 0; oc < co; ++oc) {
        double acc = bias[oc];
        for (std::size_t dy = 0; dy < k; ++dy) {
          const long yy = static_cast<long>(y) + static_cast<long>(dy) - r0;
          if (yy < 0 || yy >= static_cast<long>(h)) continue;
          for (std::size_t dx = 0; dx < k; ++dx) {
            const long xx = static_cast<long>(xp) + static_cast<long>(dx) - r0;
            if (xx < 0 || xx >= static_cast<long>(w)) continue;
            for (std::size_t ic = 0; ic < ci; ++ic)
              acc += wgt[((dy * k + dx) * co + oc) * ci + ic] *
                     x[(static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * ci + ic];
          }
        }
        out[(y * w + xp) * co + oc] = acc;
      }
  return out;
}

inline void ref_relu(std::vector<double>& v) {
  for (double& e : v) e = e > 0.0 ? e : 0.0;
}

inline std::vector<double> ref_gap(const std::vector<double>& x, std::size_t h, std::size_t w,
                                   std::size_t c) {
  std::vector<double> out(c, 0.0);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t j = 0; j < c; ++j) out[j] += x[p * c + j];
  const double inv = 1.0 / static_cast<double>(h * w);
  for (double& v : out) v *= inv;
  return out;
}

inline std::vector<double> ref_head(const std::vector<double>& pooled, const Param& w,
                                    const Param& b, std::size_t classes) {
  std::vector<double> logits(classes, 0.0);
  for (std::size_t l = 0; l < pooled.size(); ++l)
    for (std::size_t j = 0; j < classes; ++j) logits[j] += pooled[l] * w.value[l * classes + j];
  for (std::size_t j = 0; j < classes; ++j) logits[j] += b.value[j];
  return logits;
}

/// Literal layer-skipping inference: q = G(F); execute H iff q > 0.
inline std::vector<double> literal_layer_skip_logits(const LayerSkipNet& net,
                                                     const std::vector<double>& pixels,
                                                     std::vector<std::uint8_t>* gates = nullptr) {
  std::vector<double> f = ref_conv2d(pixels, net.height, net.width, net.in_ch, net.stem.w.value, 3,
                                     net.channels, net.stem.b.value);
  ref_relu(f);
  for (const auto& layer : net.skips) {
    const std::vector<double> pooled = ref_gap(f, net.height, net.width, net.channels);
    double acc = 0.0;  // matmul accumulates from zero, bias lands after
    for (std::size_t l = 0; l < pooled.size(); ++l) acc += pooled[l] * layer.gate.w.value[l];
    const double q = acc + layer.gate.b.value[0];
    const bool exec = q > 0.0;
    if (gates) gates->push_back(exec ? 1 : 0);
    if (exec) {
      std::vector<double> h = ref_conv2d(f, net.height, net.width, net.channels,
                                         layer.transform.w.value, 3, net.channels,
                                         layer.transform.b.value);
      ref_relu(h);
      for (std::size_t i = 0; i < f.size(); ++i) f[i] = f[i] + h[i];
    }
  }
  return ref_head(ref_gap(f, net.height, net.width, net.channels), net.head_w, net.head_b,
                  net.classes);
}

/// Literal 2-D sparse convolution inference: per-pixel conv where the mask
/// score is positive, exact zero elsewhere.
inline std::vector<double> literal_sparse2d_logits(const SparseConv2dNet& net,
                                                   const std::vector<double>& pixels,
                                                   std::vector<std::vector<std::uint8_t>>* masks =
                                                       nullptr) {
  std::vector<double> f = ref_conv2d(pixels, net.height, net.width, net.in_ch, net.stem.w.value, 3,
                                     net.channels, net.stem.b.value);
  ref_relu(f);
  for (const auto& unit : net.units) {
    const std::vector<double> scores = ref_conv2d(f, net.height, net.width, net.channels,
                                                  unit.gen.w.value, 3, 1, unit.gen.b.value);
    std::vector<double> conv = ref_conv2d(f, net.height, net.width, net.channels,
                                          unit.conv.w.value, 3, net.channels, unit.conv.b.value);
    std::vector<std::uint8_t> mask(net.height * net.width);
    for (std::size_t p = 0; p < mask.size(); ++p) mask[p] = scores[p] > 0.0 ? 1 : 0;
    std::vector<double> gated(conv.size(), 0.0);
    for (std::size_t p = 0; p < mask.size(); ++p)
      if (mask[p])
        for (std::size_t j = 0; j < net.channels; ++j)
          gated[p * net.channels + j] = conv[p * net.channels + j];
    ref_relu(gated);
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = f[i] + gated[i];
    if (masks) masks->push_back(std::move(mask));
  }
  return ref_head(ref_gap(f, net.height, net.width, net.channels), net.head_w, net.head_b,
                  net.classes);
}

/// Literal 3-D sparse convolution inference over occupied voxels only, with
/// an ordered map as the independent voxel index.
inline std::vector<double> literal_sparse3d_logits(const SparseConv3dNet& net,
                                                   const CloudScene& scene) {
  const double L = net.voxel_size;
  std::map<VoxelCoord, std::size_t> index;
  std::vector<VoxelCoord> voxels;
  std::vector<std::size_t> point_voxel(scene.points.size());
  for (std::size_t n = 0; n < scene.points.size(); ++n) {
    VoxelCoord v;
    for (int i = 0; i < 3; ++i)
      v[i] = static_cast<std::int64_t>(std::floor(scene.points[n][i] / L));
    auto [it, inserted] = index.try_emplace(v, voxels.size());
    if (inserted) voxels.push_back(v);
    point_voxel[n] = it->second;
  }
  const std::size_t m = voxels.size();
  // pooled input features: mean of member [x,y,z,1] rows in point order
  std::vector<double> f(m * 4, 0.0);
  std::vector<std::size_t> counts(m, 0);
  for (std::size_t n = 0; n < scene.points.size(); ++n) {
    const std::size_t row = point_voxel[n];
    if (net.coord_features) {
      for (int i = 0; i < 3; ++i) f[row * 4 + i] += scene.points[n][i];
    } else {
      for (int i = 0; i < 3; ++i) f[row * 4 + i] += scene.colors[n][i];
    }
    f[row * 4 + 3] += 1.0;
    counts[row]++;
  }
  for (std::size_t r = 0; r < m; ++r) {
    const double inv = 1.0 / static_cast<double>(counts[r]);
    for (int i = 0; i < 4; ++i) f[r * 4 + i] *= inv;
  }

  const auto offsets = kernel_offsets(3);
  auto conv = [&](const std::vector<double>& fin, std::size_t din, const Conv3dKernel& k) {
    std::vector<double> out(m * k.out_ch);
    for (std::size_t row = 0; row < m; ++row)
      for (std::size_t j = 0; j < k.out_ch; ++j) out[row * k.out_ch + j] = k.b.value[j];
    for (std::size_t row = 0; row < m; ++row)
      for (std::size_t kk = 0; kk < offsets.size(); ++kk) {
        const VoxelCoord q{voxels[row][0] + offsets[kk][0], voxels[row][1] + offsets[kk][1],
                           voxels[row][2] + offsets[kk][2]};
        auto it = index.find(q);
        if (it == index.end()) continue;
        for (std::size_t j = 0; j < k.out_ch; ++j) {
          double acc = 0.0;
          for (std::size_t ic = 0; ic < din; ++ic)
            acc += k.w.value[(kk * k.out_ch + j) * din + ic] * fin[it->second * din + ic];
          out[row * k.out_ch + j] += acc;
        }
      }
    return out;
  };
  std::vector<double> f1 = conv(f, 4, net.conv1);
  ref_relu(f1);
  std::vector<double> f2 = conv(f1, net.channels, net.conv2);
  ref_relu(f2);
  std::vector<double> logits(scene.points.size() * net.classes);
  for (std::size_t n = 0; n < scene.points.size(); ++n) {
    const std::size_t row = point_voxel[n];
    for (std::size_t j = 0; j < net.classes; ++j) {
      double acc = 0.0;
      for (std::size_t l = 0; l < net.channels; ++l)
        acc += f2[row * net.channels + l] * net.head_w.value[l * net.classes + j];
      logits[n * net.classes + j] = acc + net.head_b.value[j];
    }
  }
  return logits;
}

}  // namespace lgm::oracles
