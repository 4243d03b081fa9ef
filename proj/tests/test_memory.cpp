#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "m3dm/error.hpp"
#include "m3dm/memory.hpp"
#include "m3dm/random.hpp"

using namespace m3dm;
using namespace m3dm::memory;

namespace {

FeatureSet random_features(Rng& rng, Eigen::Index n, Eigen::Index d) {
  FeatureSet f;
  f.vectors.resize(n, d);
  for (Eigen::Index i = 0; i < f.vectors.size(); ++i) f.vectors.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < n; ++i) f.source.push_back({0, static_cast<std::uint32_t>(i)});
  return f;
}

MemoryBank bank_of(std::initializer_list<std::initializer_list<double>> rows) {
  MemoryBank b;
  b.vectors.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& r : rows) {
    Eigen::Index j = 0;
    for (double v : r) b.vectors(i, j++) = v;
    b.source.push_back({0, static_cast<std::uint32_t>(i)});
    ++i;
  }
  return b;
}

PatchGrid random_grid(Rng& rng, int rows, int cols, int dim, double occupied = 0.8) {
  PatchGrid g(rows, cols, dim);
  for (std::size_t c = 0; c < g.cell_count(); ++c) {
    if (rng.uniform01() >= occupied) continue;
    g.occupancy[c] = 1;
    for (auto& v : g.cell(c)) v = static_cast<float>(rng.normal());
  }
  return g;
}

MemoryBank random_bank(Rng& rng, Eigen::Index k, Eigen::Index d) {
  const auto f = random_features(rng, k, d);
  return coreset_select(f, 1.0, 0);
}

double covering_radius(const RowMatrix& x, const std::vector<Eigen::Index>& centers) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    double best = INFINITY;
    for (auto c : centers) best = std::min(best, (x.row(i) - x.row(c)).norm());
    worst = std::max(worst, best);
  }
  return worst;
}

double optimal_radius(const RowMatrix& x, std::size_t k) {
  const auto n = static_cast<std::size_t>(x.rows());
  std::vector<bool> pick(n, false);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(k), true);
  double best = INFINITY;
  do {
    std::vector<Eigen::Index> centers;
    for (std::size_t i = 0; i < n; ++i) {
      if (pick[i]) centers.push_back(static_cast<Eigen::Index>(i));
    }
    best = std::min(best, covering_radius(x, centers));
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return best;
}

std::vector<Eigen::Index> chosen_rows(const FeatureSet& f, const MemoryBank& b) {
  std::vector<Eigen::Index> out;
  for (const auto& s : b.source) {
    for (Eigen::Index i = 0; i < f.vectors.rows(); ++i) {
      if (f.source[static_cast<std::size_t>(i)] == s) out.push_back(i);
    }
  }
  return out;
}

}  // namespace

TEST_CASE("feature collection keeps occupied patches only") {
  PatchGrid a(2, 2, 2), b(1, 3, 2);
  a.occupancy = {1, 0, 0, 1};
  a.cell(3)[1] = 5.0f;
  b.occupancy = {0, 1, 0};
  const std::vector<PatchGrid> grids = {a, b};
  const auto f = collect_features(grids);
  CHECK(f.vectors.rows() == 3);
  CHECK(f.source == std::vector<Provenance>{{0, 0}, {0, 3}, {1, 1}});
  CHECK(f.vectors(1, 1) == 5.0);
}

TEST_CASE("coreset selection") {
  Rng rng(1);
  SUBCASE("ratio one keeps everything") {
    const auto f = random_features(rng, 17, 4);
    const auto b = coreset_select(f, 1.0, 3);
    CHECK(b.size() == 17);
    CHECK(b.vectors == f.vectors);
  }
  SUBCASE("two tight clusters") {
    FeatureSet f;
    f.vectors.resize(10, 2);
    for (Eigen::Index i = 0; i < 10; ++i) {
      const double cx = i < 5 ? 0.0 : 100.0;
      f.vectors(i, 0) = cx + 0.01 * rng.normal();
      f.vectors(i, 1) = 0.01 * rng.normal();
      f.source.push_back({0, static_cast<std::uint32_t>(i)});
    }
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto b = coreset_select(f, 0.2, seed);
      REQUIRE(b.size() == 2);
      CHECK((b.vectors(0, 0) < 50) != (b.vectors(1, 0) < 50));
    }
  }
  SUBCASE("greedy is within twice the optimal covering radius") {
    for (int trial = 0; trial < 50; ++trial) {
      const auto n = static_cast<Eigen::Index>(3 + rng.uniform_index(8));
      const std::size_t k = 1 + rng.uniform_index(3);
      const auto f = random_features(rng, n, 3);
      const double ratio = static_cast<double>(k) / static_cast<double>(n);
      const auto b = coreset_select(f, ratio, static_cast<std::uint64_t>(trial));
      REQUIRE(b.size() == k);
      CHECK(covering_radius(f.vectors, chosen_rows(f, b)) <= 2.0 * optimal_radius(f.vectors, k) + 1e-12);
    }
  }
  SUBCASE("deterministic, no duplicate provenance") {
    const auto f = random_features(rng, 60, 5);
    const auto a = coreset_select(f, 0.25, 9);
    const auto b = coreset_select(f, 0.25, 9);
    CHECK(a.vectors == b.vectors);
    auto src = a.source;
    std::sort(src.begin(), src.end(), [](auto x, auto y) { return x.patch < y.patch; });
    CHECK(std::adjacent_find(src.begin(), src.end()) == src.end());
  }
  SUBCASE("errors") {
    FeatureSet empty;
    empty.vectors.resize(0, 3);
    CHECK_THROWS_AS(coreset_select(empty, 0.5, 0), Error);
    const auto f = random_features(rng, 5, 2);
    CHECK_THROWS_AS(coreset_select(f, 0.0, 0), Error);
    CHECK_THROWS_AS(coreset_select(f, 1.5, 0), Error);
  }
  CHECK(coreset_size(10, 0.1) == 1);
  CHECK(coreset_size(10, 0.15) == 2);
  CHECK(coreset_size(3, 0.01) == 1);
}

TEST_CASE("nearest neighbours") {
  const auto line = bank_of({{0.0}, {10.0}});
  const std::vector<double> q = {4.0};
  const auto nn = nearest(line, q, 2);
  CHECK(nn[0].distance == 4.0);
  CHECK(nn[1].distance == 6.0);
  CHECK(nn[0].index == 0);

  Rng rng(2);
  const auto bank = random_bank(rng, 100, 8);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> query(8);
    for (auto& v : query) v = rng.normal();
    const auto got = nearest(bank, query, 5);
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t i = 0; i < bank.size(); ++i) {
      double d2 = 0.0;
      for (int k = 0; k < 8; ++k) d2 += std::pow(bank.vectors(static_cast<Eigen::Index>(i), k) - query[k], 2);
      all.emplace_back(std::sqrt(d2), i);
    }
    std::sort(all.begin(), all.end());
    for (int i = 0; i < 5; ++i) {
      CHECK(got[i].index == all[i].second);
      CHECK(got[i].distance == doctest::Approx(all[i].first).epsilon(1e-12));
    }
  }
  std::vector<double> stored(bank.vectors.row(7).data(), bank.vectors.row(7).data() + 8);
  CHECK(nearest(bank, stored, 1)[0].distance == 0.0);
  CHECK_THROWS_AS(nearest(bank, stored, 0), Error);
  CHECK_THROWS_AS(nearest(bank, stored, 101), Error);
}

TEST_CASE("scene score") {
  const auto line = bank_of({{0.0}, {10.0}});
  PatchGrid g(1, 1, 1);
  g.occupancy[0] = 1;
  g.cell(0)[0] = 4.0f;

  SUBCASE("closed form on the line bank") {
    const double eta = 1.0 - std::exp(4.0) / (std::exp(4.0) + std::exp(6.0));
    const auto d = phi_detail(line, g, 2);
    CHECK(d.s_star == 4.0);
    CHECK(std::abs(d.eta - eta) < 1e-12);
    CHECK(std::abs(phi_score(line, g, 2) - eta * 4.0) < 1e-9);
  }
  SUBCASE("b = 1 is degenerate") { CHECK(phi_score(line, g, 1) == 0.0); }
  SUBCASE("patches present in the bank score zero") {
    PatchGrid h(1, 2, 1);
    h.occupancy = {1, 1};
    h.data = {0.0f, 10.0f};
    CHECK(phi_score(line, h, 2) == 0.0);
  }
  SUBCASE("empty grid") {
    PatchGrid e(2, 2, 1);
    try {
      phi_score(line, e, 2);
      FAIL("expected EmptyData");
    } catch (const Error& err) {
      CHECK(err.kind() == ErrorKind::EmptyData);
    }
  }
}

TEST_CASE("patch scores") {
  Rng rng(3);
  SUBCASE("single occupied patch") {
    const auto line = bank_of({{0.0}, {10.0}});
    PatchGrid g(3, 3, 1);
    g.occupancy[4] = 1;
    g.cell(4)[0] = 13.0f;
    const auto m = psi_map(line, g);
    for (std::size_t c = 0; c < 9; ++c) CHECK(m.values[c] == (c == 4 ? 3.0 : 0.0));
  }
  SUBCASE("random grids match the per-patch oracle and s*") {
    for (int t = 0; t < 100; ++t) {
      const auto bank = random_bank(rng, 30, 4);
      const auto g = random_grid(rng, 4, 5, 4);
      const auto m = psi_map(bank, g);
      double mx = -1.0;
      for (std::size_t c = 0; c < g.cell_count(); ++c) {
        if (!g.occupancy[c]) {
          CHECK(m.values[c] == 0.0);
          continue;
        }
        std::vector<double> q(g.cell(c).begin(), g.cell(c).end());
        CHECK(m.values[c] == nearest(bank, q, 1)[0].distance);
        mx = std::max(mx, m.values[c]);
      }
      if (g.occupied_count() > 0) CHECK(phi_detail(bank, g, 3).s_star == mx);
    }
  }
  SUBCASE("bank permutation and growth") {
    const auto bank = random_bank(rng, 40, 3);
    const auto g = random_grid(rng, 5, 5, 3, 1.0);
    MemoryBank shuffled = bank;
    for (Eigen::Index i = 0; i < 40; ++i) shuffled.vectors.row(i) = bank.vectors.row(39 - i);
    CHECK(psi_map(bank, g).values == psi_map(shuffled, g).values);
    CHECK(phi_score(bank, g, 3) == doctest::Approx(phi_score(shuffled, g, 3)).epsilon(1e-12));

    MemoryBank grown = bank;
    grown.vectors.conservativeResize(41, 3);
    grown.vectors.row(40) << 0.1, -0.2, 0.3;
    grown.source.push_back({1, 0});
    const auto before = psi_map(bank, g), after = psi_map(grown, g);
    for (std::size_t c = 0; c < before.values.size(); ++c) CHECK(after.values[c] <= before.values[c]);
    CHECK(phi_detail(grown, g, 3).s_star <= phi_detail(bank, g, 3).s_star);
  }
  SUBCASE("coreset only raises patch distances") {
    const auto f = random_features(rng, 80, 3);
    const auto full = coreset_select(f, 1.0, 1);
    const auto part = coreset_select(f, 0.3, 1);
    const auto g = random_grid(rng, 4, 4, 3);
    const auto a = psi_map(full, g), b = psi_map(part, g);
    for (std::size_t c = 0; c < a.values.size(); ++c) CHECK(b.values[c] >= a.values[c]);
  }
}

TEST_CASE("upsampling and smoothing") {
  SUBCASE("constant map stays constant") {
    ScoreMap m(4, 4, 2.5);
    const auto out = upsample_smooth(m, 32, 32, 4.0);
    for (double v : out.values) CHECK(v == doctest::Approx(2.5).epsilon(1e-12));
  }
  SUBCASE("sigma zero is plain bilinear") {
    ScoreMap m(2, 2);
    m.values = {0, 1, 2, 3};
    const auto out = upsample_smooth(m, 4, 4, 0.0);
    // Half-pixel centres: output row 0 maps to source row -0.25 (clamped to 0).
    CHECK(out.at(0, 0) == 0.0);
    CHECK(out.at(0, 1) == doctest::Approx(0.25));
    CHECK(out.at(1, 1) == doctest::Approx(0.25 + 0.5));
    CHECK(out.at(3, 3) == 3.0);
  }
  SUBCASE("blur conserves mass away from the borders") {
    ScoreMap m(2, 2);
    m.values = {0, 0, 0, 1};
    const auto plain = upsample_smooth(m, 8, 8, 0.0);
    const auto blurred = upsample_smooth(m, 8, 8, 0.5);
    const double a = std::accumulate(plain.values.begin(), plain.values.end(), 0.0);
    const double b = std::accumulate(blurred.values.begin(), blurred.values.end(), 0.0);
    CHECK(b == doctest::Approx(a).epsilon(0.05));
    ScoreMap wide(32, 32);
    wide.at(16, 16) = 1.0;
    const auto spread = upsample_smooth(wide, 32, 32, 1.5);
    CHECK(std::accumulate(spread.values.begin(), spread.values.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("cannot shrink") {
    ScoreMap m(4, 4);
    CHECK_THROWS_AS(upsample_smooth(m, 2, 2, 1.0), Error);
  }
}

TEST_CASE("bank files round trip") {
  Rng rng(4);
  auto bank = random_bank(rng, 12, 3);
  bank.vectors = bank.vectors.cast<float>().cast<double>();
  bank.coreset_ratio = 0.5;
  bank.seed = 77;
  const auto dir = std::filesystem::temp_directory_path() / "m3dm_test_bank";
  std::filesystem::remove_all(dir);
  save_bank(dir, bank);
  const auto back = load_bank(dir);
  CHECK(back.vectors == bank.vectors);
  CHECK(back.source == bank.source);
  CHECK(back.coreset_ratio == 0.5);
  CHECK(back.seed == 77);
}
