#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "lgm/occupancy.hpp"
#include "lgm/rng.hpp"
#include "lgm/units.hpp"
#include "lgm/victims.hpp"

namespace lgm {

enum class AttackMode { fgm, lgm, random };

inline const char* attack_mode_name(AttackMode m) {
  switch (m) {
    case AttackMode::fgm: return "FGM";
    case AttackMode::lgm: return "LGM";
    case AttackMode::random: return "Random";
  }
  return "?";
}

inline AttackMode attack_mode_from_string(const std::string& s) {
  if (s == "FGM" || s == "fgm") return AttackMode::fgm;
  if (s == "LGM" || s == "lgm") return AttackMode::lgm;
  if (s == "Random" || s == "random") return AttackMode::random;
  throw std::invalid_argument("unknown attack mode '" + s + "'");
}

struct AttackConfig {
  AttackMode mode = AttackMode::fgm;
  bool hard_forward = false;  // lgm variant: hard values forward, soft release backward
  double epsilon = 0.0;       // 0-255 intensity units for images, meters for points
  double alpha = 0.0;         // same units; 0 picks the per-algorithm default
  std::size_t iterations = 0; // 0 picks the per-algorithm default
  double lambda = 1.0;        // release slope (images) / relation slope (points)
  RelationKind relation = RelationKind::sigmoid_like;
  double bandwidth = 0.5;
  double valid_fraction = 1.0;  // pixel budget
  std::uint64_t seed = 0;

  EvalMode eval_mode() const {
    EvalMode m = mode == AttackMode::lgm
                     ? (hard_forward ? EvalMode::lgm_hard(lambda) : EvalMode::lgm(lambda))
                     : EvalMode::fgm();
    m.lambda = lambda;
    m.relation = relation;
    m.bandwidth = bandwidth;
    return m;
  }

  void validate() const {
    if (epsilon < 0.0) throw std::invalid_argument("AttackConfig: epsilon must be non-negative");
    if (!(valid_fraction > 0.0 && valid_fraction <= 1.0))
      throw std::invalid_argument("AttackConfig: valid_fraction must be in (0,1]");
    if (alpha > 0.0 && alpha > epsilon)
      throw std::invalid_argument("AttackConfig: alpha must not exceed epsilon");
    if (!(lambda > 0.0)) throw std::invalid_argument("AttackConfig: lambda must be positive");
  }
};

/// Iteration rule for iterative sign attacks: round(min(eps+4, 1.25*eps)),
/// with eps on the 0-255 intensity scale, never below one step.
inline std::size_t default_ifgsm_iterations(double epsilon) {
  const double n = std::min(epsilon + 4.0, 1.25 * epsilon);
  return static_cast<std::size_t>(std::max<long long>(1, std::llround(n)));
}

constexpr std::size_t kDefaultPointIterations = 30;

inline double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// ---- gradients ---------------------------------------------------------------

template <class Net>
std::vector<double> image_loss_gradient(Net& net, const std::vector<double>& pixels, int label,
                                        const EvalMode& mode) {
  Tape t;
  ParamBind bind(t, false);
  Tensor x = t.leaf({net.height, net.width, net.in_ch}, pixels, true);
  Tensor logits = net.forward(t, x, mode, bind);
  Tensor loss = t.softmax_cross_entropy(logits, {label});
  t.backward(loss);
  return {x.grad().begin(), x.grad().end()};
}

/// Gradient of the summed per-point cross entropy with respect to the point
/// coordinates, at fixed geometry built from the current iterate.
inline std::vector<double> cloud_loss_gradient(SparseConv3dNet& net,
                                               const std::vector<Point3>& points,
                                               const std::vector<int>& labels,
                                               const std::vector<Point3>* colors,
                                               const EvalMode& mode, double step_budget) {
  SparseVoxelGrid grid = voxelize(points, net.voxel_size);
  const bool extended = !(mode.flow == GradFlow::fgm && mode.forward == ForwardGate::hard);
  if (extended) grid = build_extended_voxels(grid, step_budget);
  Tape t;
  ParamBind bind(t, false);
  std::vector<double> flat;
  flat.reserve(points.size() * 3);
  for (const auto& p : points) flat.insert(flat.end(), p.begin(), p.end());
  Tensor pts = t.leaf({points.size(), 3}, std::move(flat), true);
  Tensor logits = net.forward(t, pts, grid, mode, bind, colors);
  Tensor loss = t.softmax_cross_entropy(logits, labels, Reduction::sum);
  if (!loss.requires_grad()) return std::vector<double>(points.size() * 3, 0.0);
  t.backward(loss);
  return {pts.grad().begin(), pts.grad().end()};
}

// ---- pixel budget ---------------------------------------------------------------

/// Pixels allowed to change: the ceil(fraction*H*W) locations with the largest
/// first-iteration gradient magnitude (L2 across channels), fixed afterwards.
inline std::vector<std::uint8_t> pixel_budget_mask(const std::vector<double>& grad, std::size_t h,
                                                   std::size_t w, std::size_t ch,
                                                   double valid_fraction) {
  if (!(valid_fraction > 0.0 && valid_fraction <= 1.0))
    throw std::invalid_argument("pixel_budget_mask: fraction must be in (0,1]");
  const std::size_t pixels = h * w;
  const std::size_t k = static_cast<std::size_t>(
      std::ceil(valid_fraction * static_cast<double>(pixels)));
  std::vector<double> mag(pixels, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    double sq = 0.0;
    for (std::size_t c = 0; c < ch; ++c) sq += grad[p * ch + c] * grad[p * ch + c];
    mag[p] = std::sqrt(sq);
  }
  std::vector<std::size_t> order(pixels);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return mag[a] > mag[b]; });
  std::vector<std::uint8_t> mask(pixels, 0);
  for (std::size_t i = 0; i < std::min(k, pixels); ++i) mask[order[i]] = 1;
  return mask;
}

// ---- image attacks -----------------------------------------------------------------

struct ImageAdvResult {
  std::vector<double> adv;
  std::vector<std::uint8_t> active_mask;  // per pixel
  std::size_t iterations_run = 0;
};

namespace detail {

/// Joint projection onto the epsilon box around x0 and the valid range: the
/// stored value is clamped against precomputed bounds, so the budget holds
/// exactly under the same comparisons the fuzz checks use.
struct BoxBounds {
  std::vector<double> lo, hi;
  BoxBounds(const std::vector<double>& x0, double eps) {
    lo.resize(x0.size());
    hi.resize(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
      lo[i] = std::max(0.0, x0[i] - eps);
      hi[i] = std::min(1.0, x0[i] + eps);
    }
  }
};

}  // namespace detail

/// Single sign step of size epsilon, projected into the valid range.
template <class Net>
ImageAdvResult fgsm(Net& net, const std::vector<double>& pixels, int label,
                    const AttackConfig& cfg) {
  cfg.validate();
  const double eps = cfg.epsilon / 255.0;
  const EvalMode mode = cfg.eval_mode();
  const std::vector<double> grad = image_loss_gradient(net, pixels, label, mode);
  ImageAdvResult r;
  r.active_mask = pixel_budget_mask(grad, net.height, net.width, net.in_ch, cfg.valid_fraction);
  r.adv = pixels;
  r.iterations_run = 1;
  detail::BoxBounds box(pixels, eps);
  for (std::size_t p = 0; p < r.active_mask.size(); ++p) {
    if (!r.active_mask[p]) continue;
    for (std::size_t c = 0; c < net.in_ch; ++c) {
      const std::size_t i = p * net.in_ch + c;
      r.adv[i] = std::clamp(pixels[i] + eps * sign_of(grad[i]), box.lo[i], box.hi[i]);
    }
  }
  return r;
}

/// Iterative sign steps of size alpha, re-projected every iteration; the
/// pixel budget is fixed from the first iteration's gradient.
template <class Net>
ImageAdvResult ifgsm(Net& net, const std::vector<double>& pixels, int label,
                     const AttackConfig& cfg) {
  cfg.validate();
  const double eps = cfg.epsilon / 255.0;
  const double alpha255 = cfg.alpha > 0.0 ? cfg.alpha : std::min(1.0, cfg.epsilon);
  if (alpha255 > cfg.epsilon && cfg.epsilon > 0.0)
    throw std::invalid_argument("ifgsm: alpha exceeds epsilon");
  const double alpha = alpha255 / 255.0;
  const std::size_t iters =
      cfg.iterations > 0 ? cfg.iterations : default_ifgsm_iterations(cfg.epsilon);
  const EvalMode mode = cfg.eval_mode();

  ImageAdvResult r;
  r.adv = pixels;
  detail::BoxBounds box(pixels, eps);
  for (std::size_t it = 0; it < iters; ++it) {
    const std::vector<double> grad = image_loss_gradient(net, r.adv, label, mode);
    if (it == 0)
      r.active_mask = pixel_budget_mask(grad, net.height, net.width, net.in_ch, cfg.valid_fraction);
    if (eps == 0.0 || alpha == 0.0) {
      r.iterations_run = it + 1;
      break;  // nothing can move
    }
    for (std::size_t p = 0; p < r.active_mask.size(); ++p) {
      if (!r.active_mask[p]) continue;
      for (std::size_t c = 0; c < net.in_ch; ++c) {
        const std::size_t i = p * net.in_ch + c;
        r.adv[i] = std::clamp(r.adv[i] + alpha * sign_of(grad[i]), box.lo[i], box.hi[i]);
      }
    }
    r.iterations_run = it + 1;
  }
  return r;
}

/// Uniform noise in [-eps, eps] per coordinate, projected into the valid range.
template <class Net>
ImageAdvResult random_image_baseline(Net& net, const std::vector<double>& pixels,
                                     const AttackConfig& cfg) {
  cfg.validate();
  const double eps = cfg.epsilon / 255.0;
  Rng rng = Rng::fork(cfg.seed, 0xBA5E);
  ImageAdvResult r;
  r.adv = pixels;
  r.active_mask.assign(net.height * net.width, 1);
  r.iterations_run = 1;
  detail::BoxBounds box(pixels, eps);
  for (std::size_t i = 0; i < pixels.size(); ++i)
    r.adv[i] = std::clamp(pixels[i] + rng.uniform(-eps, eps), box.lo[i], box.hi[i]);
  return r;
}

// ---- point attacks -------------------------------------------------------------------

struct PointAdvResult {
  std::vector<Point3> adv;
  std::size_t iterations_run = 0;
};

/// Iterative point-coordinate attack: per-point L2-normalized gradient steps
/// of size alpha (meters), per-axis projection onto the epsilon cube around
/// the original cloud, geometry rebuilt every iteration.
inline PointAdvResult point_attack(SparseConv3dNet& net, const CloudScene& scene,
                                   const AttackConfig& cfg) {
  cfg.validate();
  bool degenerate = true;
  for (const auto& p : scene.points)
    if (p != scene.points.front()) {
      degenerate = false;
      break;
    }
  if (degenerate) throw std::invalid_argument("point_attack: degenerate cloud");
  const double eps = cfg.epsilon;
  const double alpha = cfg.alpha > 0.0 ? cfg.alpha : std::min(0.005, eps > 0.0 ? eps : 0.005);
  const std::size_t iters = cfg.iterations > 0 ? cfg.iterations : kDefaultPointIterations;
  const EvalMode mode = cfg.eval_mode();

  PointAdvResult r;
  r.adv = scene.points;
  if (eps == 0.0) {
    r.iterations_run = 0;
    return r;
  }
  for (std::size_t it = 0; it < iters; ++it) {
    const std::vector<double> grad =
        cloud_loss_gradient(net, r.adv, scene.labels, &scene.colors, mode, alpha);
    for (std::size_t n = 0; n < r.adv.size(); ++n) {
      const double gx = grad[n * 3], gy = grad[n * 3 + 1], gz = grad[n * 3 + 2];
      const double norm = std::sqrt(gx * gx + gy * gy + gz * gz);
      if (norm == 0.0) continue;
      const double g[3] = {gx, gy, gz};
      for (int ax = 0; ax < 3; ++ax) {
        const double lo = scene.points[n][ax] - eps, hi = scene.points[n][ax] + eps;
        r.adv[n][ax] = std::clamp(r.adv[n][ax] + alpha * g[ax] / norm, lo, hi);
      }
    }
    r.iterations_run = it + 1;
  }
  return r;
}

inline PointAdvResult random_cloud_baseline(const CloudScene& scene, const AttackConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::fork(cfg.seed, 0xBA5F);
  PointAdvResult r;
  r.adv = scene.points;
  r.iterations_run = 1;
  for (auto& p : r.adv)
    for (double& c : p) c += rng.uniform(-cfg.epsilon, cfg.epsilon);
  for (std::size_t n = 0; n < r.adv.size(); ++n)
    for (int ax = 0; ax < 3; ++ax)
      r.adv[n][ax] = std::clamp(r.adv[n][ax], scene.points[n][ax] - cfg.epsilon,
                                scene.points[n][ax] + cfg.epsilon);
  return r;
}

// ---- perturbation stats ------------------------------------------------------------

struct PerturbStats {
  double max_linf = 0.0;
  double mean_linf = 0.0;
};

inline PerturbStats image_perturb_stats(const std::vector<double>& clean,
                                        const std::vector<double>& adv) {
  PerturbStats s;
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const double d = std::fabs(adv[i] - clean[i]);
    s.max_linf = std::max(s.max_linf, d);
    acc += d;
  }
  s.mean_linf = clean.empty() ? 0.0 : acc / static_cast<double>(clean.size());
  return s;
}

inline PerturbStats cloud_perturb_stats(const std::vector<Point3>& clean,
                                        const std::vector<Point3>& adv) {
  PerturbStats s;
  double acc = 0.0;
  for (std::size_t n = 0; n < clean.size(); ++n) {
    double linf = 0.0;
    for (int ax = 0; ax < 3; ++ax) linf = std::max(linf, std::fabs(adv[n][ax] - clean[n][ax]));
    s.max_linf = std::max(s.max_linf, linf);
    acc += linf;
  }
  s.mean_linf = clean.empty() ? 0.0 : acc / static_cast<double>(clean.size());
  return s;
}

}  // namespace lgm
