#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "m3dm/error.hpp"
#include "m3dm/geometry.hpp"
#include "m3dm/random.hpp"

using namespace m3dm;
using namespace m3dm::geometry;

namespace {

std::vector<Vec3> random_cloud(Rng& rng, std::size_t n) {
  std::vector<Vec3> pts(n);
  for (auto& p : pts) p = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
  return pts;
}

// Plane z = 0 over the whole image, with a raised square block.
OrganizedScene plane_with_cube(int n, int y0, int y1, int x0, int x1, double lift) {
  OrganizedScene s(n, n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * n + c;
      const bool cube = r >= y0 && r < y1 && c >= x0 && c < x1;
      s.valid[p] = 1;
      s.coords[3 * p] = static_cast<float>(c * 0.01);
      s.coords[3 * p + 1] = static_cast<float>(r * 0.01);
      s.coords[3 * p + 2] = static_cast<float>(cube ? lift : 0.0);
      for (int k = 0; k < 3; ++k) s.rgb[3 * p + k] = 0.5f;
    }
  }
  return s;
}

double covering_radius(std::span<const Vec3> pts, std::span<const std::size_t> sel) {
  double worst = 0.0;
  for (const auto& p : pts) {
    double best = INFINITY;
    for (auto i : sel) best = std::min(best, (p - pts[i]).norm());
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

TEST_CASE("plane removal keeps exactly the raised block") {
  const auto scene = plane_with_cube(32, 8, 20, 10, 18, 0.1);
  PreprocessOptions opt;
  opt.target_size = 32;
  opt.seed = 11;
  const auto out = preprocess_scene(scene, opt);
  for (int r = 0; r < 32; ++r) {
    for (int c = 0; c < 32; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * 32 + c;
      const bool cube = r >= 8 && r < 20 && c >= 10 && c < 18;
      CHECK(out.valid[p] == (cube ? 1 : 0));
      if (!cube) {
        CHECK(out.coords[3 * p + 2] == 0.0f);
        CHECK(out.rgb[3 * p] == 0.0f);
      }
    }
  }
}

TEST_CASE("flat scene has an empty foreground") {
  auto scene = plane_with_cube(16, 0, 0, 0, 0, 0.0);
  PreprocessOptions opt;
  opt.target_size = 16;
  CHECK(preprocess_scene(scene, opt).valid_count() == 0);
}

TEST_CASE("preprocess rejects scenes with fewer than three points") {
  OrganizedScene s(4, 4);
  s.valid[0] = s.valid[1] = 1;
  CHECK_THROWS_AS(preprocess_scene(s, {}), Error);
  try {
    preprocess_scene(s, {});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateScene);
  }
}

TEST_CASE("preprocess is deterministic and idempotent for a fixed plane") {
  const auto scene = plane_with_cube(24, 4, 12, 6, 20, 0.05);
  std::vector<Vec3> pts;
  std::vector<std::size_t> pix;
  scene.valid_points(pts, pix);
  const auto fit = fit_plane_ransac(pts, 0.005, 200, 3);
  const auto once = remove_plane(scene, fit.plane, 0.005);
  const auto twice = remove_plane(once, fit.plane, 0.005);
  CHECK(once.valid == twice.valid);
  CHECK(once.coords == twice.coords);

  PreprocessOptions opt;
  opt.target_size = 24;
  opt.seed = 5;
  const auto a = preprocess_scene(scene, opt);
  const auto b = preprocess_scene(scene, opt);
  CHECK(a.coords == b.coords);
  CHECK(a.rgb == b.rgb);
  CHECK(a.valid == b.valid);
}

TEST_CASE("resize to the same size is the identity and downsizing erodes the mask") {
  auto scene = plane_with_cube(16, 4, 12, 4, 12, 0.1);
  for (std::size_t p = 0; p < scene.pixel_count(); ++p) {
    if (scene.coords[3 * p + 2] == 0.0f) {
      scene.valid[p] = 0;
      std::fill_n(scene.coords.begin() + 3 * p, 3, 0.0f);
      std::fill_n(scene.rgb.begin() + 3 * p, 3, 0.0f);
    }
  }
  const auto same = resize_scene(scene, 16);
  CHECK(same.coords == scene.coords);
  CHECK(same.valid == scene.valid);
  const auto half = resize_scene(scene, 8);
  CHECK(half.height == 8);
  CHECK(half.width == 8);
  CHECK(half.valid_count() <= 16);
  for (std::size_t p = 0; p < half.pixel_count(); ++p) {
    if (!half.valid[p]) {
      CHECK(half.coords[3 * p] == 0.0f);
      CHECK(half.rgb[3 * p] == 0.0f);
    } else {
      CHECK(half.coords[3 * p + 2] == doctest::Approx(0.1));
    }
  }
}

TEST_CASE("farthest point sampling") {
  SUBCASE("square corners pick the diagonal") {
    std::vector<Vec3> sq = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
    const auto sel = farthest_point_sampling(sq, 2, 0);
    CHECK(sel == std::vector<std::size_t>{0, 3});
  }
  SUBCASE("m = N is a permutation") {
    Rng rng(1);
    const auto pts = random_cloud(rng, 20);
    auto sel = farthest_point_sampling(pts, 20, 7);
    CHECK(sel.front() == 7);
    std::sort(sel.begin(), sel.end());
    std::vector<std::size_t> all(20);
    std::iota(all.begin(), all.end(), 0);
    CHECK(sel == all);
  }
  SUBCASE("matches a direct re-execution of the greedy rule") {
    Rng rng(2);
    for (int trial = 0; trial < 10; ++trial) {
      const auto pts = random_cloud(rng, 30);
      const auto sel = farthest_point_sampling(pts, 5, 0);
      std::vector<std::size_t> ref = {0};
      while (ref.size() < 5) {
        std::size_t best = 0;
        double best_d = -1.0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
          double d = INFINITY;
          for (auto j : ref) d = std::min(d, (pts[i] - pts[j]).squaredNorm());
          if (d > best_d) {
            best_d = d;
            best = i;
          }
        }
        ref.push_back(best);
      }
      CHECK(sel == ref);
      CHECK(covering_radius(pts, sel) == covering_radius(pts, ref));
    }
  }
  SUBCASE("errors") {
    std::vector<Vec3> pts(3, Vec3::Zero());
    CHECK_THROWS_AS(farthest_point_sampling(pts, 4, 0), Error);
    CHECK_THROWS_AS(farthest_point_sampling({}, 1, 0), Error);
  }
}

TEST_CASE("knn grouping") {
  std::vector<Vec3> line;
  for (int i = 0; i < 10; ++i) line.emplace_back(i, 0, 0);
  const std::vector<std::size_t> ends = {0, 9};
  const auto g = knn_group(line, ends, 3);
  CHECK(g.center_count() == 2);
  CHECK(std::vector<std::size_t>(g.group(0).begin(), g.group(0).end()) == std::vector<std::size_t>{0, 1, 2});
  CHECK(std::vector<std::size_t>(g.group(1).begin(), g.group(1).end()) == std::vector<std::size_t>{9, 8, 7});

  const auto single = knn_group(line, ends, 1);
  CHECK(single.group(0)[0] == 0);
  CHECK(single.group(1)[0] == 9);

  const auto full = knn_group(line, ends, 10);
  for (int i = 0; i < 2; ++i) {
    std::vector<std::size_t> m(full.group(i).begin(), full.group(i).end());
    std::sort(m.begin(), m.end());
    CHECK(m.size() == 10);
    CHECK(std::adjacent_find(m.begin(), m.end()) == m.end());
  }
  CHECK_THROWS_AS(knn_group(line, ends, 11), Error);
}

TEST_CASE("inverse distance interpolation") {
  SUBCASE("single center is copied verbatim") {
    RowMatrix g(1, 3);
    g << 1.5, -2.0, 0.25;
    std::vector<Vec3> centers = {{0, 0, 0}};
    Rng rng(3);
    const auto pts = random_cloud(rng, 12);
    const auto out = interpolate_to_points(g, centers, pts);
    for (Eigen::Index j = 0; j < out.rows(); ++j) CHECK(out.row(j) == g.row(0));
  }
  SUBCASE("equidistant point averages") {
    RowMatrix g(2, 2);
    g << 1, 2, 3, 6;
    std::vector<Vec3> centers = {{-1, 0, 0}, {1, 0, 0}};
    std::vector<Vec3> pts = {{0, 0.5, 0}};
    const auto out = interpolate_to_points(g, centers, pts);
    CHECK(out(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out(0, 1) == doctest::Approx(4.0).epsilon(1e-12));
  }
  SUBCASE("matches a scalar loop") {
    Rng rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const auto centers = random_cloud(rng, 2);
      const auto pts = random_cloud(rng, 5);
      RowMatrix g(2, 4);
      for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
      const auto out = interpolate_to_points(g, centers, pts, 1e-8);
      for (std::size_t j = 0; j < pts.size(); ++j) {
        const double w0 = 1.0 / ((centers[0] - pts[j]).norm() + 1e-8);
        const double w1 = 1.0 / ((centers[1] - pts[j]).norm() + 1e-8);
        for (int d = 0; d < 4; ++d) {
          const double ref = (w0 * g(0, d) + w1 * g(1, d)) / (w0 + w1);
          CHECK(out(static_cast<Eigen::Index>(j), d) == doctest::Approx(ref).epsilon(1e-6));
        }
      }
    }
  }
  SUBCASE("near-exact reproduction at centers") {
    Rng rng(5);
    const auto centers = random_cloud(rng, 6);
    RowMatrix g(6, 3);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.uniform(1, 2);
    const auto out = interpolate_to_points(g, centers, centers, 1e-12);
    CHECK(((out - g).cwiseAbs().maxCoeff() / g.cwiseAbs().maxCoeff()) < 1e-4);
  }
  SUBCASE("neighbour-limited weights only use the closest centers") {
    RowMatrix g(3, 1);
    g << 1, 2, 1000;
    std::vector<Vec3> centers = {{0, 0, 0}, {1, 0, 0}, {50, 0, 0}};
    std::vector<Vec3> pts = {{0.5, 0, 0}};
    const auto out = interpolate_to_points(g, centers, pts, 1e-8, 2);
    CHECK(out(0, 0) == doctest::Approx(1.5));
  }
  SUBCASE("dimension mismatch") {
    RowMatrix g(2, 2);
    std::vector<Vec3> centers = {{0, 0, 0}};
    std::vector<Vec3> pts = {{0, 0, 0}};
    CHECK_THROWS_AS(interpolate_to_points(g, centers, pts), Error);
  }
}

TEST_CASE("projection to the image plane") {
  SUBCASE("no points") {
    const auto grid = project_to_plane(RowMatrix(0, 4), {}, 5, 6);
    CHECK(grid.occupied_count() == 0);
    CHECK(std::all_of(grid.data.begin(), grid.data.end(), [](float v) { return v == 0.0f; }));
  }
  SUBCASE("single point lands on its pixel") {
    RowMatrix f(1, 2);
    f << 3, -1;
    const std::vector<std::size_t> pix = {3 * 8 + 4};
    const auto grid = project_to_plane(f, pix, 8, 8);
    for (std::size_t i = 0; i < grid.cell_count(); ++i) {
      const bool hit = i == pix[0];
      CHECK(grid.occupancy[i] == (hit ? 1 : 0));
      CHECK(grid.cell(i)[0] == (hit ? 3.0f : 0.0f));
      CHECK(grid.cell(i)[1] == (hit ? -1.0f : 0.0f));
    }
  }
  SUBCASE("collisions average") {
    RowMatrix f(2, 1);
    f << 1, 4;
    const std::vector<std::size_t> pix = {5, 5};
    const auto grid = project_to_plane(f, pix, 4, 4);
    CHECK(grid.cell(5)[0] == 2.5f);
    CHECK(grid.occupied_count() == 1);
  }
  SUBCASE("out of range pixel") {
    RowMatrix f(1, 1);
    const std::vector<std::size_t> pix = {16};
    CHECK_THROWS_AS(project_to_plane(f, pix, 4, 4), Error);
  }
}

TEST_CASE("average pooling over occupied cells") {
  SUBCASE("identity") {
    PatchGrid g(4, 4, 2);
    Rng rng(6);
    for (auto& v : g.data) v = static_cast<float>(rng.normal());
    std::fill(g.occupancy.begin(), g.occupancy.end(), 1);
    const auto p = average_pool(g, 4, 4);
    CHECK(p.data == g.data);
    CHECK(p.occupancy == g.occupancy);
  }
  SUBCASE("constant grid") {
    PatchGrid g(6, 6, 3);
    for (std::size_t i = 0; i < g.cell_count(); ++i) {
      g.occupancy[i] = 1;
      g.cell(i)[0] = 1.0f;
      g.cell(i)[1] = 2.0f;
      g.cell(i)[2] = -3.0f;
    }
    const auto p = average_pool(g, 3, 2);
    for (std::size_t i = 0; i < p.cell_count(); ++i) {
      CHECK(p.cell(i)[0] == 1.0f);
      CHECK(p.cell(i)[2] == -3.0f);
    }
  }
  SUBCASE("single occupied cell") {
    PatchGrid g(4, 4, 1);
    g.occupancy[1 * 4 + 3] = 1;
    g.cell(1 * 4 + 3)[0] = 7.0f;
    const auto p = average_pool(g, 2, 2);
    CHECK(p.occupancy == std::vector<std::uint8_t>{0, 1, 0, 0});
    CHECK(p.data == std::vector<float>{0.0f, 7.0f, 0.0f, 0.0f});
  }
  SUBCASE("pooling preserves the window mean of occupied cells") {
    Rng rng(7);
    PatchGrid g(8, 8, 2);
    for (std::size_t i = 0; i < g.cell_count(); ++i) {
      if (rng.uniform01() < 0.6) {
        g.occupancy[i] = 1;
        g.cell(i)[0] = static_cast<float>(rng.normal());
        g.cell(i)[1] = static_cast<float>(rng.normal());
      }
    }
    const auto p = average_pool(g, 2, 4);
    for (int pr = 0; pr < 2; ++pr) {
      for (int pc = 0; pc < 4; ++pc) {
        double sum = 0.0;
        int count = 0;
        for (int r = pr * 4; r < pr * 4 + 4; ++r) {
          for (int c = pc * 2; c < pc * 2 + 2; ++c) {
            if (g.occupancy[r * 8 + c]) {
              sum += g.cell(r * 8 + c)[0];
              ++count;
            }
          }
        }
        const double got = p.cell(pr * 4 + pc)[0];
        CHECK(got == doctest::Approx(count ? sum / count : 0.0).epsilon(1e-6));
      }
    }
  }
  SUBCASE("indivisible") {
    PatchGrid g(5, 5, 1);
    CHECK_THROWS_AS(average_pool(g, 2, 2), Error);
  }
}
