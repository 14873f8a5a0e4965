#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>

#include "lgm/occupancy.hpp"
#include "lgm/oracles.hpp"
#include "lgm/rng.hpp"

using namespace lgm;

TEST_CASE("hard sign occupancy with conservative tie rule") {
  CHECK(hard_sign_occupancy(0.7) == 1.0);
  CHECK(hard_sign_occupancy(-0.3) == 0.0);
  CHECK(hard_sign_occupancy(0.0) == 0.0);
  CHECK_THROWS_AS(hard_sign_occupancy(std::nan("")), std::invalid_argument);
}

TEST_CASE("soft sign occupancy closed forms") {
  CHECK(soft_sign_occupancy(0.0, 7.0) == 0.5);
  CHECK(soft_sign_occupancy(std::log(3.0), 1.0) == Catch::Approx(0.75).epsilon(1e-14));
  CHECK(soft_sign_occupancy(-std::log(3.0), 1.0) == Catch::Approx(0.25).epsilon(1e-14));
  CHECK_THROWS_AS(soft_sign_occupancy(1.0, 0.0), std::invalid_argument);
}

TEST_CASE("soft sign occupancy is exactly symmetric") {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double q = rng.normal() * 3.0;
    const double lambda = std::exp(rng.uniform(-4.0, 3.7));
    CHECK(soft_sign_occupancy(q, lambda) + soft_sign_occupancy(-q, lambda) == 1.0);
  }
}

TEST_CASE("slope at the decision boundary is exactly lambda/4") {
  for (double lambda : {1.0, 20.0, 55.0}) {
    Tape t;
    Tensor q = t.leaf({1}, {0.0}, true);
    t.backward(t.sigmoid(t.scale(q, lambda)));
    CHECK(q.grad()[0] == lambda / 4.0);
  }
}

TEST_CASE("voxelize floor quantization") {
  SparseVoxelGrid g = voxelize({{0.12, 0.04, 0.33}, {0.15, 0.05, 0.31}}, 0.1);
  REQUIRE(g.voxels.size() == 1);
  CHECK(g.voxels[0] == VoxelCoord{1, 0, 3});
  CHECK(g.point_to_voxel[0] == 0);
  CHECK(g.point_to_voxel[1] == 0);

  SparseVoxelGrid neg = voxelize({{-0.01, 0.0, 0.0}}, 0.1);
  CHECK(neg.voxels[0] == VoxelCoord{-1, 0, 0});

  CHECK_THROWS_AS(voxelize({}, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(voxelize({{0, 0, 0}}, 0.0), std::invalid_argument);
}

TEST_CASE("voxelize matches brute-force cell enumeration") {
  Rng rng(11);
  std::vector<Point3> pts(1000);
  for (auto& p : pts)
    for (double& c : p) c = rng.uniform();
  SparseVoxelGrid g = voxelize(pts, 0.25);
  CHECK(g.voxels.size() == oracles::brute_force_occupied_count(pts, 0.25));
  CHECK(g.voxels.size() <= pts.size());
  // every occupied voxel holds at least one point
  std::vector<std::size_t> counts(g.voxels.size(), 0);
  for (std::size_t v : g.point_to_voxel) counts[v]++;
  for (std::size_t c : counts) CHECK(c >= 1);
}

TEST_CASE("relation distance") {
  Point3 d = relation_distance({1, 0, 3}, {0.15, 0.05, 0.31}, 0.1);
  CHECK(d[0] == Catch::Approx(0.0).margin(1e-12));
  CHECK(d[1] == Catch::Approx(0.0).margin(1e-12));
  CHECK(d[2] == Catch::Approx(0.4).epsilon(1e-12));

  // exact center and face boundary
  Point3 c = relation_distance({0, 0, 0}, {0.125, 0.125, 0.125}, 0.25);
  CHECK((c[0] == 0.0 && c[1] == 0.0 && c[2] == 0.0));
  Point3 f = relation_distance({0, 0, 0}, {0.25, 0.125, 0.125}, 0.25);
  CHECK(f[0] == 0.5);
}

TEST_CASE("sigmoid-like relation") {
  CHECK(relation_sigmoid_like({0.5, 0.5, 0.5}, 13.0) == 0.125);
  CHECK(relation_axis_factor(0.5, 40.0) == 0.5);
  CHECK(relation_sigmoid_like({0.5, 0.0, 0.0}, 200.0) == 0.5);  // saturated limit
  CHECK(relation_sigmoid_like({0.0, 0.0, 0.0}, 20.0) ==
        Catch::Approx(0.99986381257669858).epsilon(1e-12));
  CHECK_THROWS_AS(relation_sigmoid_like({0.1, 0.1, 0.1}, -1.0), std::invalid_argument);
}

TEST_CASE("bilinear relation") {
  CHECK(relation_bilinear({0, 0, 0}) == 1.0);
  CHECK(relation_bilinear({1, 0, 0}) == 0.0);
  CHECK(relation_bilinear({0.5, 0.5, 0.5}) == 0.125);
}

TEST_CASE("rbf relation") {
  CHECK(relation_rbf({0, 0, 0}, 0.5) == 1.0);
  const double half_height = 0.5 * std::sqrt(2.0 * std::log(2.0));
  CHECK(relation_rbf({half_height, 0, 0}, 0.5) == Catch::Approx(0.5).epsilon(1e-12));
  CHECK(relation_rbf({0.5, 0, 0}, 0.5) == Catch::Approx(0.60653065971263342).epsilon(1e-12));
  CHECK_THROWS_AS(relation_rbf({0, 0, 0}, 0.0), std::invalid_argument);
}

TEST_CASE("gather or") {
  CHECK(gather_or({}) == 0.0);
  {
    std::vector<double> r = {1.0, 0.3};
    CHECK(gather_or(r) == Catch::Approx(1.0).margin(1e-11));  // absorbing, modulo product floor
  }
  {
    std::vector<double> r = {0.5, 0.5};
    CHECK(gather_or(r) == 0.75);
  }
  std::vector<double> bad = {1.2};
  CHECK_THROWS_AS(gather_or(bad), std::invalid_argument);
}

TEST_CASE("gather or is permutation invariant and bounded") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> r(1 + rng.uniform_index(6));
    for (double& v : r) v = rng.uniform();
    std::vector<double> shuffled = r;
    rng.shuffle(shuffled);
    CHECK(gather_or(r) == Catch::Approx(gather_or(shuffled)).epsilon(1e-13));
    const double lo = *std::max_element(r.begin(), r.end());
    CHECK(gather_or(r) >= lo - 1e-12);
    CHECK(gather_or(r) <= 1.0);
  }
}

TEST_CASE("extended voxels: trivial reachability") {
  // point at the exact voxel center, budget below half a voxel
  SparseVoxelGrid g = voxelize({{0.125, 0.125, 0.125}}, 0.25);
  SparseVoxelGrid e = build_extended_voxels(g, 0.05 * 0.25);
  REQUIRE(e.extended_count() == 1);
  CHECK(e.extended_voxels[0] == VoxelCoord{0, 0, 0});
  REQUIRE(e.candidate_points[0].size() == 1);

  // point 0.01*L from the +x face with budget 0.05*L reaches the +x neighbor
  SparseVoxelGrid g2 = voxelize({{0.25 - 0.0025, 0.125, 0.125}}, 0.25);
  SparseVoxelGrid e2 = build_extended_voxels(g2, 0.05 * 0.25);
  CHECK(e2.extended_index.count(VoxelCoord{1, 0, 0}) == 1);
  CHECK(e2.extended_count() == 2);

  CHECK_THROWS_AS(build_extended_voxels(g, 0.0), std::invalid_argument);
}

TEST_CASE("extended voxels match the brute-force cube-intersection oracle") {
  Rng rng(23);
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t n = trial == 0 ? 200 : 100 + rng.uniform_index(400);
    std::vector<Point3> pts(n);
    for (auto& p : pts)
      for (double& c : p) c = rng.uniform(0.0, 0.4);
    const double voxel_size = 0.05, step = 0.01;
    SparseVoxelGrid e = build_extended_voxels(voxelize(pts, voxel_size), step);
    auto oracle = oracles::brute_force_extended(pts, voxel_size, step);
    REQUIRE(e.extended_count() == oracle.candidates.size());  // sound and complete
    for (std::size_t m = 0; m < e.extended_count(); ++m) {
      auto it = oracle.candidates.find(e.extended_voxels[m]);
      REQUIRE(it != oracle.candidates.end());
      std::vector<std::size_t> got = e.candidate_points[m];
      std::vector<std::size_t> want = it->second;
      std::sort(got.begin(), got.end());
      std::sort(want.begin(), want.end());
      CHECK(got == want);
    }
    // occupied voxels lead the extended list, in order
    for (std::size_t m = 0; m < e.occupied_count(); ++m)
      CHECK(e.extended_voxels[m] == e.voxels[m]);
  }
}

TEST_CASE("soft voxel occupancy composes relations") {
  SparseVoxelGrid g = voxelize({{0.125, 0.125, 0.125}}, 0.25);
  SparseVoxelGrid e = build_extended_voxels(g, 0.01);
  CHECK(soft_voxel_occupancy_value(e, 0, RelationKind::sigmoid_like, 20.0) ==
        Catch::Approx(0.99986381257669858).epsilon(1e-10));
  CHECK_THROWS_AS(soft_voxel_occupancy_value(e, 99, RelationKind::sigmoid_like, 20.0),
                  std::invalid_argument);
  // tape value agrees with the scalar path
  Tape t;
  Tensor pts = t.leaf({1, 3}, {0.125, 0.125, 0.125}, true);
  Tensor occ = soft_voxel_occupancy(t, e, 0, pts, RelationKind::sigmoid_like, 20.0);
  CHECK(occ.value() == Catch::Approx(0.99986381257669858).epsilon(1e-10));
}

TEST_CASE("soft voxel occupancy gradient matches finite differences") {
  Rng rng(7);
  std::vector<Point3> pts(12);
  for (auto& p : pts)
    for (double& c : p) c = rng.uniform(0.0, 0.3);
  const double voxel_size = 0.1, step = 0.02;
  SparseVoxelGrid e = build_extended_voxels(voxelize(pts, voxel_size), step);

  for (RelationKind kind : {RelationKind::sigmoid_like, RelationKind::bilinear, RelationKind::rbf}) {
    const double param = kind == RelationKind::rbf ? 0.5 : 20.0;
    const std::size_t target = e.extended_count() / 2;
    auto value_of = [&](const std::vector<double>& flat, std::vector<double>* grad) {
      Tape t;
      Tensor p = t.leaf({pts.size(), 3}, flat, grad != nullptr);
      Tensor occ = soft_voxel_occupancy(t, e, target, p, kind, param);
      if (grad) {
        t.backward(occ);
        grad->assign(p.grad().begin(), p.grad().end());
      }
      return occ.value();
    };
    std::vector<double> flat;
    for (const auto& p : pts)
      flat.insert(flat.end(), p.begin(), p.end());
    std::vector<double> grad;
    value_of(flat, &grad);
    auto fd = oracles::finite_difference_gradient(
        [&](const std::vector<double>& v) { return value_of(v, nullptr); }, flat, 1e-6 * voxel_size);
    auto cmp = oracles::compare_gradients(grad, fd, 1.0);
    CHECK(cmp.max_err < 1e-5);
  }
}

TEST_CASE("moving a point toward the voxel center never lowers soft occupancy") {
  Rng rng(41);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Point3> pts(8);
    for (auto& p : pts)
      for (double& c : p) c = rng.uniform(0.0, 0.2);
    const double voxel_size = 0.05;
    SparseVoxelGrid e = build_extended_voxels(voxelize(pts, voxel_size), 0.01);
    const std::size_t m = rng.uniform_index(e.extended_count());
    const std::size_t n = e.candidate_points[m][rng.uniform_index(e.candidate_points[m].size())];
    const VoxelCoord v = e.extended_voxels[m];
    for (RelationKind kind : {RelationKind::sigmoid_like, RelationKind::bilinear, RelationKind::rbf}) {
      const double param = kind == RelationKind::rbf ? 0.5 : 20.0;
      const double before = soft_voxel_occupancy_value(e, m, kind, param);
      SparseVoxelGrid moved = e;
      for (int i = 0; i < 3; ++i) {
        const double center = (static_cast<double>(v[i]) + 0.5) * voxel_size;
        moved.points[n][i] += (center - moved.points[n][i]) * rng.uniform(0.1, 0.9);
      }
      CHECK(soft_voxel_occupancy_value(moved, m, kind, param) >= before - 1e-14);
    }
  }
}

namespace {

// Distance from a point to the boundary surface of a voxel, in voxel units.
double boundary_margin(const VoxelCoord& v, const Point3& p, double voxel_size) {
  const Point3 d = relation_distance(v, p, voxel_size);
  const bool inside = d[0] < 0.5 && d[1] < 0.5 && d[2] < 0.5;
  if (inside) return 0.5 - std::max({d[0], d[1], d[2]});
  double sq = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double e = std::max(0.0, d[i] - 0.5);
    sq += e * e;
  }
  return std::sqrt(sq);
}

}  // namespace

TEST_CASE("soft occupancy tracks hard occupancy away from boundaries") {
  // A lone interior point at margin m from every face yields occupancy
  // sigmoid(lambda*m)^3, so the guaranteed deviation bound is 1-s(l*m)^3:
  // 0.136 at margin 3/lambda, under 0.05 from margin ~4.1/lambda upward.
  Rng rng(13);
  const double lambda = 20.0;
  std::vector<Point3> pts(300);
  for (auto& p : pts)
    for (double& c : p) c = rng.uniform();
  const double voxel_size = 0.1;
  SparseVoxelGrid e = build_extended_voxels(voxelize(pts, voxel_size), 0.005);
  std::size_t tight = 0, loose = 0;
  for (std::size_t m = 0; m < e.extended_count(); ++m) {
    double nearest = std::numeric_limits<double>::infinity();
    for (const auto& p : pts)
      nearest = std::min(nearest, boundary_margin(e.extended_voxels[m], p, voxel_size));
    const double hard = hard_voxel_occupancy(e, e.extended_voxels[m]);
    const double soft = soft_voxel_occupancy_value(e, m, RelationKind::sigmoid_like, lambda);
    if (nearest > 4.5 / lambda) {
      ++tight;
      CHECK(std::fabs(soft - hard) < 0.05);
    }
    if (nearest > 3.0 / lambda) {
      ++loose;
      CHECK(std::fabs(soft - hard) < 0.14);
    }
  }
  CHECK(tight > 10);  // the property must actually bite
  CHECK(loose > 40);
}

TEST_CASE("mean deviation of the soft sign release stays below 0.05 at lambda 20") {
  Rng rng(29);
  double acc = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double q = rng.uniform(-1.0, 1.0);
    acc += std::fabs(soft_sign_occupancy(q, 20.0) - hard_sign_occupancy(q));
  }
  CHECK(acc / n < 0.05);
  CHECK(acc / n == Catch::Approx(0.034657).margin(2e-3));  // ln(2)/20 analytically
}

TEST_CASE("relation gradients stay finite over a wide sweep") {
  Rng rng(31);
  for (int i = 0; i < 10000; ++i) {
    Point3 d{rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0)};
    const double lambda = rng.uniform(1e-4, 55.0);
    // closed-form partials, written out independently of the tape
    const double r = relation_sigmoid_like(d, lambda);
    const double bi = relation_bilinear(d);
    const double rb = relation_rbf(d, 0.5);
    for (int ax = 0; ax < 3; ++ax) {
      const double s = relation_axis_factor(d[ax], lambda);
      CHECK(std::isfinite(-lambda * (1.0 - s) * r));
      const double bi_partial = d[ax] >= 1.0 ? 0.0 : -bi / (1.0 - d[ax]);
      CHECK(std::isfinite(bi_partial));
      CHECK(std::isfinite(rb * -d[ax] / 0.25));
    }
  }
}
