#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "lgm/tensor.hpp"

namespace lgm {

using VoxelCoord = std::array<std::int64_t, 3>;
using Point3 = std::array<double, 3>;

struct VoxelHash {
  std::size_t operator()(const VoxelCoord& v) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::int64_t c : v) {
      h ^= static_cast<std::uint64_t>(c);
      h *= 0x100000001b3ULL;
    }
    return static_cast<std::size_t>(h);
  }
};

enum class RelationKind { sigmoid_like, bilinear, rbf };

inline const char* relation_name(RelationKind k) {
  switch (k) {
    case RelationKind::sigmoid_like: return "sigmoid_like";
    case RelationKind::bilinear: return "bilinear";
    case RelationKind::rbf: return "rbf";
  }
  return "?";
}

// ---- scalar occupancy machinery -------------------------------------------

/// Hard gate from a score: 1 when q > 0, otherwise 0 (ties resolve to "not
/// executed").
inline double hard_sign_occupancy(double q) {
  if (!std::isfinite(q)) throw std::invalid_argument("hard_sign_occupancy: non-finite score");
  return q > 0.0 ? 1.0 : 0.0;
}

/// Differentiable release of the hard gate: logistic with slope lambda.
inline double soft_sign_occupancy(double q, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("soft_sign_occupancy: lambda must be positive");
  return stable_sigmoid(lambda * q);
}

/// Per-axis distance between a voxel center and a point in voxel units:
/// |(v + 0.5) - p / L|.
inline Point3 relation_distance(const VoxelCoord& voxel, const Point3& point, double voxel_size) {
  if (!(voxel_size > 0.0)) throw std::invalid_argument("relation_distance: voxel size must be positive");
  Point3 d;
  for (int i = 0; i < 3; ++i)
    d[i] = std::fabs((static_cast<double>(voxel[i]) + 0.5) - point[i] / voxel_size);
  return d;
}

/// One axis of the sigmoid-like relation: 1 / (1 + exp(lambda * (d - 0.5))).
/// Exactly 0.5 on the voxel face (d = 0.5) for any slope.
inline double relation_axis_factor(double d, double lambda) {
  return stable_sigmoid(-lambda * (d - 0.5));
}

inline double relation_sigmoid_like(const Point3& d, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("relation_sigmoid_like: lambda must be positive");
  double r = 1.0;
  for (double di : d) {
    if (di < 0.0) throw std::invalid_argument("relation_sigmoid_like: negative distance");
    r *= relation_axis_factor(di, lambda);
  }
  return r;
}

inline double relation_bilinear(const Point3& d) {
  double r = 1.0;
  for (double di : d) {
    if (di < 0.0) throw std::invalid_argument("relation_bilinear: negative distance");
    r *= std::max(0.0, 1.0 - di);
  }
  return r;
}

inline double relation_rbf(const Point3& d, double bandwidth) {
  if (!(bandwidth > 0.0)) throw std::invalid_argument("relation_rbf: bandwidth must be positive");
  double sq = 0.0;
  for (double di : d) sq += di * di;
  return std::exp(-sq / (2.0 * bandwidth * bandwidth));
}

constexpr double kGatherFactorFloor = 1e-12;  // product stability floor, see docs

/// Soft "or" over relation values: 1 - prod(1 - r). Empty input gathers to 0.
inline double gather_or(std::span<const double> relations) {
  double p = 1.0;
  for (double r : relations) {
    if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("gather_or: relation outside [0,1]");
    p *= std::max(1.0 - r, kGatherFactorFloor);
  }
  return relations.empty() ? 0.0 : 1.0 - p;
}

// ---- sparse voxel grid -----------------------------------------------------

/// Occupied-voxel view of a point cloud, with an optional extension holding
/// the empty voxels reachable within one attack step.
struct SparseVoxelGrid {
  std::vector<Point3> points;  // meters
  double voxel_size = 0.0;     // meters
  std::vector<VoxelCoord> voxels;              // occupied, first-seen order
  std::vector<std::size_t> point_to_voxel;     // per point, index into voxels
  std::unordered_map<VoxelCoord, std::size_t, VoxelHash> voxel_index;

  // Filled by build_extended_voxels. extended_voxels starts with all occupied
  // voxels (same order) followed by reachable empty ones.
  double step_budget = 0.0;
  std::vector<VoxelCoord> extended_voxels;
  std::vector<std::vector<std::size_t>> candidate_points;  // per extended voxel
  std::unordered_map<VoxelCoord, std::size_t, VoxelHash> extended_index;

  std::size_t occupied_count() const { return voxels.size(); }
  std::size_t extended_count() const { return extended_voxels.size(); }
  bool has_extension() const { return !extended_voxels.empty(); }

  /// Points per occupied voxel, in point-index order.
  std::vector<std::vector<std::size_t>> members() const {
    std::vector<std::vector<std::size_t>> g(voxels.size());
    for (std::size_t n = 0; n < points.size(); ++n) g[point_to_voxel[n]].push_back(n);
    return g;
  }
};

inline VoxelCoord floor_voxel(const Point3& p, double voxel_size) {
  VoxelCoord v;
  for (int i = 0; i < 3; ++i)
    v[i] = static_cast<std::int64_t>(std::floor(p[i] / voxel_size));
  return v;
}

/// Floor-quantize a point cloud onto an integer grid and deduplicate.
inline SparseVoxelGrid voxelize(const std::vector<Point3>& points, double voxel_size) {
  if (points.empty()) throw std::invalid_argument("voxelize: empty point set");
  if (!(voxel_size > 0.0)) throw std::invalid_argument("voxelize: voxel size must be positive");
  SparseVoxelGrid g;
  g.points = points;
  g.voxel_size = voxel_size;
  g.point_to_voxel.resize(points.size());
  for (std::size_t n = 0; n < points.size(); ++n) {
    const VoxelCoord v = floor_voxel(points[n], voxel_size);
    auto [it, inserted] = g.voxel_index.try_emplace(v, g.voxels.size());
    if (inserted) g.voxels.push_back(v);
    g.point_to_voxel[n] = it->second;
  }
  return g;
}

/// Per-axis integer range of voxels a point can fall into after moving by at
/// most `s` along every coordinate.
inline std::array<std::array<std::int64_t, 2>, 3> reachable_range(const Point3& p, double s,
                                                                  double voxel_size) {
  std::array<std::array<std::int64_t, 2>, 3> r;
  for (int i = 0; i < 3; ++i) {
    r[i][0] = static_cast<std::int64_t>(std::floor((p[i] - s) / voxel_size));
    r[i][1] = static_cast<std::int64_t>(std::floor((p[i] + s) / voxel_size));
  }
  return r;
}

/// Extend an occupied grid with every voxel some point can enter within one
/// step of size `step_budget` per axis, and record which points can reach
/// each extended voxel.
inline SparseVoxelGrid build_extended_voxels(const SparseVoxelGrid& grid, double step_budget) {
  if (!(step_budget > 0.0)) throw std::invalid_argument("build_extended_voxels: step budget must be positive");
  SparseVoxelGrid g = grid;
  g.step_budget = step_budget;
  g.extended_voxels = g.voxels;
  g.extended_index = g.voxel_index;
  g.candidate_points.assign(g.voxels.size(), {});
  for (std::size_t n = 0; n < g.points.size(); ++n) {
    const auto rng = reachable_range(g.points[n], step_budget, g.voxel_size);
    for (std::int64_t x = rng[0][0]; x <= rng[0][1]; ++x)
      for (std::int64_t y = rng[1][0]; y <= rng[1][1]; ++y)
        for (std::int64_t z = rng[2][0]; z <= rng[2][1]; ++z) {
          const VoxelCoord v{x, y, z};
          auto [it, inserted] = g.extended_index.try_emplace(v, g.extended_voxels.size());
          if (inserted) {
            g.extended_voxels.push_back(v);
            g.candidate_points.emplace_back();
          }
          g.candidate_points[it->second].push_back(n);
        }
  }
  return g;
}

/// Hard occupancy of an arbitrary voxel under a grid: 1 iff occupied.
inline double hard_voxel_occupancy(const SparseVoxelGrid& grid, const VoxelCoord& v) {
  return grid.voxel_index.count(v) ? 1.0 : 0.0;
}

/// Scalar (off-tape) soft occupancy of an extended voxel.
inline double soft_voxel_occupancy_value(const SparseVoxelGrid& grid, std::size_t ext_index,
                                         RelationKind kind, double param) {
  if (!grid.has_extension() || ext_index >= grid.extended_count())
    throw std::invalid_argument("soft_voxel_occupancy: voxel outside extended set");
  const VoxelCoord& v = grid.extended_voxels[ext_index];
  std::vector<double> rel;
  rel.reserve(grid.candidate_points[ext_index].size());
  for (std::size_t n : grid.candidate_points[ext_index]) {
    const Point3 d = relation_distance(v, grid.points[n], grid.voxel_size);
    switch (kind) {
      case RelationKind::sigmoid_like: rel.push_back(relation_sigmoid_like(d, param)); break;
      case RelationKind::bilinear: rel.push_back(relation_bilinear(d)); break;
      case RelationKind::rbf: rel.push_back(relation_rbf(d, param)); break;
    }
  }
  return gather_or(rel);
}

// ---- tape-based soft occupancy ---------------------------------------------

/// Relation value of one candidate point (row of `points`) for a voxel, as a
/// one-element tensor differentiable in the point coordinates.
inline Tensor relation_on_tape(Tape& tape, const Tensor& points, std::size_t point_row,
                               const VoxelCoord& voxel, double voxel_size, RelationKind kind,
                               double param) {
  Tensor p = tape.gather_rows(points, {point_row});  // [1,3]
  Tensor center = tape.constant({1, 3}, {static_cast<double>(voxel[0]) + 0.5,
                                         static_cast<double>(voxel[1]) + 0.5,
                                         static_cast<double>(voxel[2]) + 0.5});
  Tensor d = tape.abs(tape.sub(center, tape.scale(p, 1.0 / voxel_size)));
  switch (kind) {
    case RelationKind::sigmoid_like:
      return tape.prod(tape.sigmoid(tape.scale(tape.add_scalar(d, -0.5), -param)));
    case RelationKind::bilinear:
      return tape.prod(tape.relu(tape.one_minus(d)));
    case RelationKind::rbf:
      return tape.exp(tape.scale(tape.sum(tape.mul(d, d)), -1.0 / (2.0 * param * param)));
  }
  throw std::logic_error("relation_on_tape: unknown relation kind");
}

/// Soft occupancy of one extended voxel on the tape, gathered over its
/// candidate points with the soft "or".
inline Tensor soft_voxel_occupancy(Tape& tape, const SparseVoxelGrid& grid, std::size_t ext_index,
                                   const Tensor& points, RelationKind kind, double param) {
  if (!grid.has_extension() || ext_index >= grid.extended_count())
    throw std::invalid_argument("soft_voxel_occupancy: voxel outside extended set");
  const auto& cands = grid.candidate_points[ext_index];
  const VoxelCoord& v = grid.extended_voxels[ext_index];
  std::vector<Tensor> factors;
  factors.reserve(cands.size());
  for (std::size_t n : cands) {
    Tensor r = relation_on_tape(tape, points, n, v, grid.voxel_size, kind, param);
    factors.push_back(tape.clamp_min(tape.one_minus(r), kGatherFactorFloor));
  }
  if (factors.empty()) return tape.scalar(0.0);
  return tape.one_minus(tape.prod(tape.concat(factors)));
}

/// Soft occupancies of all extended voxels as an [M'] vector on the tape.
inline Tensor soft_occupancy_vector(Tape& tape, const SparseVoxelGrid& grid, const Tensor& points,
                                    RelationKind kind, double param) {
  if (!grid.has_extension()) throw std::invalid_argument("soft_occupancy_vector: grid has no extension");
  std::vector<Tensor> occ;
  occ.reserve(grid.extended_count());
  for (std::size_t m = 0; m < grid.extended_count(); ++m)
    occ.push_back(soft_voxel_occupancy(tape, grid, m, points, kind, param));
  return tape.concat(occ);
}

}  // namespace lgm
