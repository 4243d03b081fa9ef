#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "m3dm/error.hpp"
#include "m3dm/fusion.hpp"
#include "m3dm/random.hpp"
#include "m3dm/tensor_io.hpp"

using namespace m3dm;
using namespace m3dm::fusion;
namespace fs = std::filesystem;

namespace {

RowMatrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  RowMatrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

RowMatrix normalize_rows(RowMatrix m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

FusionShape small_shape() {
  FusionShape s;
  s.d_rgb = 5;
  s.d_pt = 4;
  s.hidden_ratio = 2;
  s.out_rgb = 3;
  s.out_pt = 6;
  s.embed = 3;
  return s;
}

// Flattened view of all parameters in visiting order.
std::vector<double*> parameter_slots(FusionNetwork& net) {
  std::vector<double*> out;
  for_each_parameter(
      [&](auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) out.push_back(t.data() + i);
      },
      net);
  return out;
}

std::vector<PatchGrid> correlated_grids(Rng& rng, int scenes, int d_rgb, int d_pt) {
  const RowMatrix mix_rgb = random_matrix(rng, 3, d_rgb);
  const RowMatrix mix_pt = random_matrix(rng, 3, d_pt);
  std::vector<PatchGrid> out;
  for (int s = 0; s < scenes; ++s) {
    PatchGrid rgb(4, 4, d_rgb), pt(4, 4, d_pt);
    for (std::size_t c = 0; c < rgb.cell_count(); ++c) {
      Eigen::RowVector3d z(rng.normal(), rng.normal(), rng.normal());
      const Eigen::RowVectorXd a = z * mix_rgb;
      const Eigen::RowVectorXd b = z * mix_pt;
      rgb.occupancy[c] = pt.occupancy[c] = 1;
      for (int d = 0; d < d_rgb; ++d) rgb.cell(c)[d] = static_cast<float>(a(d) + 0.05 * rng.normal());
      for (int d = 0; d < d_pt; ++d) pt.cell(c)[d] = static_cast<float>(b(d) + 0.05 * rng.normal());
    }
    out.push_back(rgb);
    out.push_back(pt);
  }
  return out;
}

}  // namespace

TEST_CASE("uff forward") {
  Rng rng(1);
  const auto net = init_fusion_network(small_shape(), 3);
  CHECK(net.fused_dim() == 9);
  CHECK(net.embed_dim() == 3);

  SUBCASE("outputs are unit norm") {
    for (int t = 0; t < 20; ++t) {
      Eigen::VectorXd a = random_matrix(rng, 5, 1), b = random_matrix(rng, 4, 1);
      const auto out = uff_forward(net, a, b);
      CHECK(out.h_rgb.norm() == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(out.h_pt.norm() == doctest::Approx(1.0).epsilon(1e-6));
      CHECK(out.fused.size() == 9);
    }
  }
  SUBCASE("zero weights leave only the biases") {
    auto z = zeros_like(net);
    z.chi_rgb.fc2.bias << 1, 2, 3;
    z.chi_pt.fc2.bias.setConstant(-1.0);
    z.sigma_rgb.bias << 0, 3, 4;
    z.sigma_pt.bias << 2, 0, 0;
    const auto out = uff_forward(z, Eigen::VectorXd::Ones(5), Eigen::VectorXd::Ones(4));
    CHECK(out.h_rgb.isApprox(Eigen::Vector3d(0, 0.6, 0.8)));
    CHECK(out.h_pt.isApprox(Eigen::Vector3d(1, 0, 0)));
    Eigen::VectorXd expect(9);
    expect << 1, 2, 3, -1, -1, -1, -1, -1, -1;
    CHECK(out.fused == expect);
  }
  SUBCASE("identity-like branches pass features through") {
    // gelu(x) - gelu(-x) = x, so [I; -I] followed by [I, -I] is the identity.
    FusionShape s;
    s.d_rgb = 3;
    s.d_pt = 2;
    s.hidden_ratio = 2;
    s.embed = 2;
    auto id = zeros_like(init_fusion_network(s, 1));
    auto make_identity = [](Mlp& m, int d) {
      m.fc1.weight.topRows(d).setIdentity();
      m.fc1.weight.bottomRows(d) = -RowMatrix::Identity(d, d);
      m.fc2.weight.leftCols(d).setIdentity();
      m.fc2.weight.rightCols(d) = -RowMatrix::Identity(d, d);
    };
    make_identity(id.chi_rgb, 3);
    make_identity(id.chi_pt, 2);
    Eigen::VectorXd a(3), b(2);
    a << 0.3, -1.2, 2.0;
    b << -0.7, 0.1;
    const auto out = uff_forward(id, a, b);
    for (int i = 0; i < 3; ++i) CHECK(out.fused(i) == doctest::Approx(a(i)).epsilon(1e-12));
    for (int i = 0; i < 2; ++i) CHECK(out.fused(3 + i) == doctest::Approx(b(i)).epsilon(1e-12));
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(uff_forward(net, Eigen::VectorXd::Zero(4), Eigen::VectorXd::Zero(4)), Error);
  }
}

TEST_CASE("infonce loss") {
  SUBCASE("orthonormal pair at unit temperature") {
    const RowMatrix h = RowMatrix::Identity(2, 2);
    CHECK(infonce_loss(h, h, 1.0).loss == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-12));
  }
  SUBCASE("identical rows give ln B") {
    RowMatrix h = RowMatrix::Constant(5, 3, 1.0 / std::sqrt(3.0));
    CHECK(infonce_loss(h, h, 0.07).loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  }
  SUBCASE("symmetry, permutation invariance, non-negativity") {
    Rng rng(2);
    for (int t = 0; t < 20; ++t) {
      const RowMatrix a = normalize_rows(random_matrix(rng, 6, 4));
      const RowMatrix b = normalize_rows(random_matrix(rng, 6, 4));
      const double l = infonce_loss(a, b, 0.1).loss;
      CHECK(l >= 0.0);
      CHECK(infonce_loss(b, a, 0.1).loss == doctest::Approx(l).epsilon(1e-9));
      Eigen::PermutationMatrix<Eigen::Dynamic> perm(6);
      perm.setIdentity();
      std::swap(perm.indices()[0], perm.indices()[4]);
      std::swap(perm.indices()[1], perm.indices()[2]);
      const RowMatrix pa = perm * a, pb = perm * b;
      CHECK(infonce_loss(pa, pb, 0.1).loss == doctest::Approx(l).epsilon(1e-9));
    }
  }
  SUBCASE("input gradients match finite differences") {
    Rng rng(3);
    const RowMatrix a = normalize_rows(random_matrix(rng, 4, 3));
    const RowMatrix b = normalize_rows(random_matrix(rng, 4, 3));
    const auto r = infonce_loss(a, b, 0.5);
    const double h = 1e-6;
    double worst = 0.0;
    for (int which = 0; which < 2; ++which) {
      for (Eigen::Index i = 0; i < a.size(); ++i) {
        RowMatrix ap = a, am = a, bp = b, bm = b;
        (which ? bp : ap).data()[i] += h;
        (which ? bm : am).data()[i] -= h;
        const double fd = (infonce_loss(ap, bp, 0.5).loss - infonce_loss(am, bm, 0.5).loss) / (2 * h);
        const double an = (which ? r.grad_pt : r.grad_rgb).data()[i];
        worst = std::max(worst, std::abs(fd - an) / std::max(1e-3, std::abs(fd) + std::abs(an)));
      }
    }
    CHECK(worst < 1e-4);
  }
  SUBCASE("errors") {
    RowMatrix one = RowMatrix::Identity(1, 2);
    CHECK_THROWS_AS(infonce_loss(one, one, 1.0), Error);
    RowMatrix bad = RowMatrix::Identity(2, 2);
    bad(0, 0) = NAN;
    try {
      infonce_loss(bad, RowMatrix::Identity(2, 2), 1.0);
      FAIL("expected NonFinite");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::NonFinite);
    }
  }
}

TEST_CASE("full network gradient matches finite differences") {
  Rng rng(4);
  auto net = init_fusion_network(small_shape(), 5);
  for_each_parameter([&](auto& t) { t += 0.1 * random_matrix(rng, t.rows(), t.cols()); }, net);
  const RowMatrix x_rgb = random_matrix(rng, 4, 5);
  const RowMatrix x_pt = random_matrix(rng, 4, 4);
  FusionNetwork grad;
  uff_batch_loss(net, x_rgb, x_pt, 0.2, &grad);
  auto slots = parameter_slots(net);
  auto gslots = parameter_slots(grad);
  REQUIRE(slots.size() == gslots.size());
  double worst = 0.0;
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const double keep = *slots[i];
    const double h = 1e-6;
    *slots[i] = keep + h;
    const double up = uff_batch_loss(net, x_rgb, x_pt, 0.2, nullptr);
    *slots[i] = keep - h;
    const double down = uff_batch_loss(net, x_rgb, x_pt, 0.2, nullptr);
    *slots[i] = keep;
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - *gslots[i]) / std::max(1e-3, std::abs(fd) + std::abs(*gslots[i])));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("learning rate schedule") {
  TrainConfig cfg;
  CHECK(learning_rate_at(cfg, 0) > 0.0);
  CHECK(learning_rate_at(cfg, 249) == doctest::Approx(cfg.lr));
  CHECK(learning_rate_at(cfg, 100) < learning_rate_at(cfg, 200));
  CHECK(learning_rate_at(cfg, 400) > learning_rate_at(cfg, 600));
  CHECK(learning_rate_at(cfg, 749) == doctest::Approx(0.0).epsilon(1e-12));
  TrainConfig bad = cfg;
  bad.warmup_steps = 1000;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("uff training") {
  Rng rng(6);
  const auto grids = correlated_grids(rng, 6, 5, 4);
  std::vector<PatchGrid> rgb, pt;
  for (std::size_t i = 0; i < grids.size(); i += 2) {
    rgb.push_back(grids[i]);
    pt.push_back(grids[i + 1]);
  }
  TrainConfig cfg;
  cfg.total_steps = 150;
  cfg.warmup_steps = 30;
  cfg.batch_size = 32;
  cfg.temperature = 0.2;
  cfg.lr = 0.01;
  cfg.seed = 8;

  SUBCASE("zero steps returns the initialization") {
    auto c = cfg;
    c.total_steps = 0;
    c.warmup_steps = 0;
    const auto net = uff_train(rgb, pt, small_shape(), c);
    auto init = init_fusion_network(small_shape(), derive_seed(c.seed, "uff_init"));
    for_each_parameter([](auto& p) { p = p.template cast<float>().template cast<double>(); }, init);
    for_each_parameter([](const auto& a, const auto& b) { CHECK(a == b); }, net, init);
  }
  SUBCASE("loss decreases and training is reproducible") {
    std::vector<double> log;
    const auto a = uff_train(rgb, pt, small_shape(), cfg, &log);
    REQUIRE(log.size() == 150);
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 20; ++i) {
      head += log[i];
      tail += log[log.size() - 1 - i];
    }
    CHECK(tail < head);
    const auto b = uff_train(rgb, pt, small_shape(), cfg);
    for_each_parameter([](const auto& x, const auto& y) { CHECK(x == y); }, a, b);
  }
  SUBCASE("no co-occupied patches") {
    auto empty = rgb;
    for (auto& g : empty) std::fill(g.occupancy.begin(), g.occupancy.end(), 0);
    try {
      uff_train(empty, pt, small_shape(), cfg);
      FAIL("expected EmptyData");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::EmptyData);
    }
  }
}

TEST_CASE("fuse grid") {
  Rng rng(7);
  const auto net = init_fusion_network(small_shape(), 9);
  PatchGrid rgb(3, 3, 5), pt(3, 3, 4);
  SUBCASE("unoccupied input") {
    const auto out = fuse_grid(net, rgb, pt);
    CHECK(out.occupied_count() == 0);
  }
  SUBCASE("pointwise agreement") {
    for (auto& v : rgb.data) v = static_cast<float>(rng.normal());
    for (auto& v : pt.data) v = static_cast<float>(rng.normal());
    for (std::size_t c = 0; c < 9; ++c) {
      rgb.occupancy[c] = c % 2 == 0;
      pt.occupancy[c] = c % 3 != 1;
    }
    const auto out = fuse_grid(net, rgb, pt);
    CHECK(out.dim == 9);
    for (std::size_t c = 0; c < 9; ++c) {
      const bool occ = rgb.occupancy[c] && pt.occupancy[c];
      CHECK(out.occupancy[c] == occ);
      if (!occ) continue;
      Eigen::VectorXd a(5), b(4);
      for (int d = 0; d < 5; ++d) a(d) = rgb.cell(c)[d];
      for (int d = 0; d < 4; ++d) b(d) = pt.cell(c)[d];
      const auto ref = uff_forward(net, a, b);
      for (int d = 0; d < 9; ++d) CHECK(out.cell(c)[d] == doctest::Approx(ref.fused(d)).epsilon(1e-6));
    }
  }
}

TEST_CASE("fusion checkpoint round trip") {
  auto dir = fs::temp_directory_path() / "m3dm_test_fusion_ckpt";
  fs::remove_all(dir);
  auto net = init_fusion_network(small_shape(), 10);
  for_each_parameter([](auto& p) { p = p.template cast<float>().template cast<double>(); }, net);
  TrainConfig cfg;
  save_fusion(dir, net, cfg);
  const auto back = load_fusion(dir);
  for_each_parameter([](const auto& a, const auto& b) { CHECK(a == b); }, net, back);
  CHECK(fs::exists(dir / "manifest.json"));
  CHECK(fs::exists(dir / "sigma_pt_bias.t"));
}
