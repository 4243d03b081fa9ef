#include "m3dm/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "json.hpp"
#include "m3dm/error.hpp"
#include "m3dm/random.hpp"
#include "m3dm/tensor_io.hpp"

namespace m3dm::fusion {
namespace {

using nlohmann::json;

constexpr double kNormFloor = 1e-12;

Linear make_linear(int in, int out, Rng& rng) {
  Linear l;
  l.weight.resize(out, in);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = rng.uniform(-bound, bound);
  l.bias = Eigen::VectorXd::Zero(out);
  return l;
}

RowMatrix linear_forward(const Linear& l, const RowMatrix& x) {
  RowMatrix z = x * l.weight.transpose();
  z.rowwise() += l.bias.transpose();
  return z;
}

double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

double gelu_grad(double z) {
  return 0.5 * (1.0 + std::erf(z / std::numbers::sqrt2)) +
         z * std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
}

struct BranchCache {
  RowMatrix x, z1, a1, y, p, h;
  Eigen::VectorXd norms;
};

void branch_forward(const Mlp& chi, const Linear& sigma, const RowMatrix& x, BranchCache& c) {
  c.x = x;
  c.z1 = linear_forward(chi.fc1, x);
  c.a1 = c.z1.unaryExpr(&gelu);
  c.y = linear_forward(chi.fc2, c.a1);
  c.p = linear_forward(sigma, c.y);
  c.norms.resize(c.p.rows());
  c.h.resize(c.p.rows(), c.p.cols());
  for (Eigen::Index i = 0; i < c.p.rows(); ++i) {
    c.norms[i] = std::max(c.p.row(i).norm(), kNormFloor);
    c.h.row(i) = c.p.row(i) / c.norms[i];
  }
}

void linear_backward(const Linear& l, const RowMatrix& x, const RowMatrix& dz, Linear& g,
                     RowMatrix* dx) {
  g.weight += dz.transpose() * x;
  g.bias += dz.colwise().sum().transpose();
  if (dx) *dx = dz * l.weight;
}

void branch_backward(const Mlp& chi, const Linear& sigma, const BranchCache& c, const RowMatrix& dh,
                     Mlp& g_chi, Linear& g_sigma) {
  RowMatrix dp(dh.rows(), dh.cols());
  for (Eigen::Index i = 0; i < dh.rows(); ++i) {
    if (c.norms[i] > kNormFloor) {
      const double proj = c.h.row(i).dot(dh.row(i));
      dp.row(i) = (dh.row(i) - proj * c.h.row(i)) / c.norms[i];
    } else {
      dp.row(i) = dh.row(i) / kNormFloor;
    }
  }
  RowMatrix dy, da1;
  linear_backward(sigma, c.y, dp, g_sigma, &dy);
  linear_backward(chi.fc2, c.a1, dy, g_chi.fc2, &da1);
  const RowMatrix dz1 = da1.cwiseProduct(c.z1.unaryExpr(&gelu_grad));
  linear_backward(chi.fc1, c.x, dz1, g_chi.fc1, nullptr);
}

RowMatrix rows_as_matrix(std::span<const float> values, int rows, int cols) {
  RowMatrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = values[static_cast<std::size_t>(i)];
  return m;
}

json linear_shape(const Linear& l) { return {l.in_dim(), l.out_dim()}; }

}  // namespace

FusionShape FusionNetwork::shape() const {
  FusionShape s;
  s.d_rgb = d_rgb();
  s.d_pt = d_pt();
  s.hidden_ratio = chi_rgb.fc1.out_dim() / std::max(1, d_rgb());
  s.out_rgb = chi_rgb.fc2.out_dim();
  s.out_pt = chi_pt.fc2.out_dim();
  s.embed = embed_dim();
  return s;
}

bool FusionNetwork::all_finite() const {
  bool ok = true;
  for_each_parameter([&](const auto& t) { ok = ok && t.allFinite(); }, *this);
  return ok;
}

FusionNetwork init_fusion_network(const FusionShape& shape, std::uint64_t seed) {
  require(shape.d_rgb > 0 && shape.d_pt > 0 && shape.hidden_ratio > 0 && shape.embed > 0 &&
              shape.out_rgb >= 0 && shape.out_pt >= 0,
          ErrorKind::BadParam, "invalid fusion network shape");
  Rng rng(seed);
  const int out_rgb = shape.out_rgb > 0 ? shape.out_rgb : shape.d_rgb;
  const int out_pt = shape.out_pt > 0 ? shape.out_pt : shape.d_pt;
  FusionNetwork net;
  net.chi_rgb.fc1 = make_linear(shape.d_rgb, shape.hidden_ratio * shape.d_rgb, rng);
  net.chi_rgb.fc2 = make_linear(shape.hidden_ratio * shape.d_rgb, out_rgb, rng);
  net.chi_pt.fc1 = make_linear(shape.d_pt, shape.hidden_ratio * shape.d_pt, rng);
  net.chi_pt.fc2 = make_linear(shape.hidden_ratio * shape.d_pt, out_pt, rng);
  net.sigma_rgb = make_linear(out_rgb, shape.embed, rng);
  net.sigma_pt = make_linear(out_pt, shape.embed, rng);
  return net;
}

FusionNetwork zeros_like(const FusionNetwork& net) {
  FusionNetwork z = net;
  for_each_parameter([](auto& t) { t.setZero(); }, z);
  return z;
}

UffOutput uff_forward(const FusionNetwork& net, const Eigen::VectorXd& f_rgb,
                      const Eigen::VectorXd& f_pt) {
  require(f_rgb.size() == net.d_rgb() && f_pt.size() == net.d_pt(), ErrorKind::BadArity,
          "input dims do not match the fusion network");
  BranchCache rgb, pt;
  branch_forward(net.chi_rgb, net.sigma_rgb, f_rgb.transpose(), rgb);
  branch_forward(net.chi_pt, net.sigma_pt, f_pt.transpose(), pt);
  UffOutput out;
  out.h_rgb = rgb.h.row(0).transpose();
  out.h_pt = pt.h.row(0).transpose();
  out.fused.resize(rgb.y.cols() + pt.y.cols());
  out.fused << rgb.y.row(0).transpose(), pt.y.row(0).transpose();
  return out;
}

InfoNceResult infonce_loss(const RowMatrix& h_rgb, const RowMatrix& h_pt, double temperature) {
  const Eigen::Index b = h_rgb.rows();
  require(b >= 2, ErrorKind::BadArity, "InfoNCE needs at least two rows");
  require(h_pt.rows() == b && h_pt.cols() == h_rgb.cols(), ErrorKind::BadArity,
          "InfoNCE inputs differ in shape");
  require(temperature > 0.0, ErrorKind::BadParam, "temperature must be positive");
  require(h_rgb.allFinite() && h_pt.allFinite(), ErrorKind::NonFinite,
          "InfoNCE input contains non-finite values");

  const RowMatrix s = h_rgb * h_pt.transpose() / temperature;
  RowMatrix row_soft(b, b), col_soft(b, b);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const double mx = s.row(i).maxCoeff();
    const double lse = mx + std::log((s.row(i).array() - mx).exp().sum());
    row_soft.row(i) = (s.row(i).array() - lse).exp();
    loss += lse - s(i, i);
  }
  for (Eigen::Index j = 0; j < b; ++j) {
    const double mx = s.col(j).maxCoeff();
    const double lse = mx + std::log((s.col(j).array() - mx).exp().sum());
    col_soft.col(j) = (s.col(j).array() - lse).exp();
    loss += lse - s(j, j);
  }
  const double scale = 0.5 / static_cast<double>(b);
  RowMatrix ds = scale * (row_soft + col_soft);
  ds.diagonal().array() -= 2.0 * scale;

  InfoNceResult r;
  r.loss = scale * loss;
  r.grad_rgb = ds * h_pt / temperature;
  r.grad_pt = ds.transpose() * h_rgb / temperature;
  return r;
}

double uff_batch_loss(const FusionNetwork& net, const RowMatrix& x_rgb, const RowMatrix& x_pt,
                      double temperature, FusionNetwork* grad) {
  require(x_rgb.cols() == net.d_rgb() && x_pt.cols() == net.d_pt() && x_rgb.rows() == x_pt.rows(),
          ErrorKind::BadArity, "batch does not match the fusion network");
  BranchCache rgb, pt;
  branch_forward(net.chi_rgb, net.sigma_rgb, x_rgb, rgb);
  branch_forward(net.chi_pt, net.sigma_pt, x_pt, pt);
  const InfoNceResult r = infonce_loss(rgb.h, pt.h, temperature);
  if (grad) {
    *grad = zeros_like(net);
    branch_backward(net.chi_rgb, net.sigma_rgb, rgb, r.grad_rgb, grad->chi_rgb, grad->sigma_rgb);
    branch_backward(net.chi_pt, net.sigma_pt, pt, r.grad_pt, grad->chi_pt, grad->sigma_pt);
  }
  return r.loss;
}

void TrainConfig::validate() const {
  require(lr > 0.0, ErrorKind::BadParam, "lr must be positive");
  require(warmup_steps >= 0 && total_steps >= 0 && warmup_steps <= total_steps, ErrorKind::BadParam,
          "need 0 <= warmup_steps <= total_steps");
  require(batch_size >= 2, ErrorKind::BadParam, "batch_size must be at least 2");
  require(temperature > 0.0, ErrorKind::BadParam, "temperature must be positive");
  require(weight_decay >= 0.0 && clip_norm > 0.0, ErrorKind::BadParam,
          "weight_decay must be >= 0 and clip_norm > 0");
}

double learning_rate_at(const TrainConfig& cfg, int step) {
  if (step < cfg.warmup_steps) {
    const double t = static_cast<double>(step + 1) / cfg.warmup_steps;
    return cfg.lr * 0.5 * (1.0 - std::cos(std::numbers::pi * t));
  }
  const int decay = cfg.total_steps - cfg.warmup_steps;
  if (decay <= 0) return cfg.lr;
  const double t = static_cast<double>(step - cfg.warmup_steps + 1) / decay;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
}

FusionNetwork uff_train(std::span<const PatchGrid> rgb, std::span<const PatchGrid> pt,
                        const FusionShape& shape, const TrainConfig& cfg,
                        std::vector<double>* loss_log) {
  cfg.validate();
  require(rgb.size() == pt.size(), ErrorKind::BadArity, "rgb and point grid lists differ in length");

  struct PatchRef {
    std::size_t scene;
    std::size_t cell;
  };
  std::vector<PatchRef> pairs;
  for (std::size_t s = 0; s < rgb.size(); ++s) {
    require(rgb[s].rows == pt[s].rows && rgb[s].cols == pt[s].cols, ErrorKind::BadArity,
            "rgb and point grids are not aligned");
    require(rgb[s].dim == shape.d_rgb && pt[s].dim == shape.d_pt, ErrorKind::BadArity,
            "grid feature dims do not match the network shape");
    for (std::size_t c = 0; c < rgb[s].cell_count(); ++c) {
      if (rgb[s].occupancy[c] && pt[s].occupancy[c]) pairs.push_back({s, c});
    }
  }
  require(!pairs.empty(), ErrorKind::EmptyData, "no co-occupied patches to train on");
  require(pairs.size() >= 2, ErrorKind::EmptyData, "need at least two co-occupied patches");

  FusionNetwork net = init_fusion_network(shape, derive_seed(cfg.seed, "uff_init"));
  FusionNetwork m1 = zeros_like(net);
  FusionNetwork m2 = zeros_like(net);
  FusionNetwork grad;
  Rng rng(derive_seed(cfg.seed, "uff_batches"));

  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kAdamEps = 1e-8;
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), pairs.size());
  std::vector<std::size_t> order(pairs.size());
  RowMatrix x_rgb(static_cast<Eigen::Index>(batch), shape.d_rgb);
  RowMatrix x_pt(static_cast<Eigen::Index>(batch), shape.d_pt);

  for (int step = 0; step < cfg.total_steps; ++step) {
    // Partial Fisher-Yates: the first `batch` entries are a uniform sample.
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = 0; i < batch; ++i) {
      const std::size_t j = i + rng.uniform_index(order.size() - i);
      std::swap(order[i], order[j]);
    }
    for (std::size_t i = 0; i < batch; ++i) {
      const PatchRef& ref = pairs[order[i]];
      const auto fr = rgb[ref.scene].cell(ref.cell);
      const auto fp = pt[ref.scene].cell(ref.cell);
      for (int d = 0; d < shape.d_rgb; ++d) x_rgb(static_cast<Eigen::Index>(i), d) = fr[d];
      for (int d = 0; d < shape.d_pt; ++d) x_pt(static_cast<Eigen::Index>(i), d) = fp[d];
    }
    const double loss = uff_batch_loss(net, x_rgb, x_pt, cfg.temperature, &grad);
    if (loss_log) loss_log->push_back(loss);

    double norm2 = 0.0;
    for_each_parameter([&](const auto& g) { norm2 += g.squaredNorm(); }, grad);
    const double norm = std::sqrt(norm2);
    const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

    const double lr = learning_rate_at(cfg, step);
    const double bc1 = 1.0 - std::pow(kBeta1, step + 1);
    const double bc2 = 1.0 - std::pow(kBeta2, step + 1);
    for_each_parameter(
        [&](auto& p, auto& g, auto& m, auto& v) {
          g *= clip;
          p *= (1.0 - lr * cfg.weight_decay);
          m = kBeta1 * m + (1.0 - kBeta1) * g;
          v = kBeta2 * v + (1.0 - kBeta2) * g.cwiseProduct(g);
          p.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + kAdamEps);
        },
        net, grad, m1, m2);
  }
  for_each_parameter([](auto& p) { p = p.template cast<float>().template cast<double>(); }, net);
  require(net.all_finite(), ErrorKind::NonFinite, "fusion training diverged");
  return net;
}

PatchGrid fuse_grid(const FusionNetwork& net, const PatchGrid& rgb, const PatchGrid& pt) {
  require(rgb.rows == pt.rows && rgb.cols == pt.cols, ErrorKind::BadArity, "grids are not aligned");
  require(rgb.dim == net.d_rgb() && pt.dim == net.d_pt(), ErrorKind::BadArity,
          "grid dims do not match the fusion network");
  PatchGrid out(rgb.rows, rgb.cols, net.fused_dim());
  std::vector<std::size_t> cells;
  for (std::size_t c = 0; c < rgb.cell_count(); ++c) {
    if (rgb.occupancy[c] && pt.occupancy[c]) cells.push_back(c);
  }
  if (cells.empty()) return out;
  const auto n = static_cast<Eigen::Index>(cells.size());
  RowMatrix x_rgb(n, rgb.dim), x_pt(n, pt.dim);
  for (Eigen::Index i = 0; i < n; ++i) {
    x_rgb.row(i) = rows_as_matrix(rgb.cell(cells[i]), 1, rgb.dim);
    x_pt.row(i) = rows_as_matrix(pt.cell(cells[i]), 1, pt.dim);
  }
  const RowMatrix y_rgb =
      linear_forward(net.chi_rgb.fc2, linear_forward(net.chi_rgb.fc1, x_rgb).unaryExpr(&gelu));
  const RowMatrix y_pt =
      linear_forward(net.chi_pt.fc2, linear_forward(net.chi_pt.fc1, x_pt).unaryExpr(&gelu));
  for (Eigen::Index i = 0; i < n; ++i) {
    out.occupancy[cells[i]] = 1;
    auto dst = out.cell(cells[i]);
    for (Eigen::Index d = 0; d < y_rgb.cols(); ++d) dst[d] = static_cast<float>(y_rgb(i, d));
    for (Eigen::Index d = 0; d < y_pt.cols(); ++d) {
      dst[y_rgb.cols() + d] = static_cast<float>(y_pt(i, d));
    }
  }
  return out;
}

namespace {

const char* const kParamNames[] = {
    "chi_rgb_fc1_weight", "chi_rgb_fc1_bias", "chi_rgb_fc2_weight", "chi_rgb_fc2_bias",
    "chi_pt_fc1_weight",  "chi_pt_fc1_bias",  "chi_pt_fc2_weight",  "chi_pt_fc2_bias",
    "sigma_rgb_weight",   "sigma_rgb_bias",   "sigma_pt_weight",    "sigma_pt_bias",
};

}  // namespace

void save_fusion(const std::filesystem::path& dir, const FusionNetwork& net, const TrainConfig& cfg) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "m3dm-fusion";
  manifest["version"] = 1;
  manifest["layers"] = {{"chi_rgb_fc1", linear_shape(net.chi_rgb.fc1)},
                        {"chi_rgb_fc2", linear_shape(net.chi_rgb.fc2)},
                        {"chi_pt_fc1", linear_shape(net.chi_pt.fc1)},
                        {"chi_pt_fc2", linear_shape(net.chi_pt.fc2)},
                        {"sigma_rgb", linear_shape(net.sigma_rgb)},
                        {"sigma_pt", linear_shape(net.sigma_pt)}};
  manifest["train"] = {{"lr", cfg.lr},
                       {"warmup_steps", cfg.warmup_steps},
                       {"total_steps", cfg.total_steps},
                       {"batch_size", cfg.batch_size},
                       {"temperature", cfg.temperature},
                       {"weight_decay", cfg.weight_decay},
                       {"clip_norm", cfg.clip_norm},
                       {"seed", cfg.seed}};
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));

  int index = 0;
  auto copy = net;
  for_each_parameter(
      [&](const auto& t) {
        std::vector<std::uint32_t> dims;
        if (t.cols() == 1) {
          dims = {static_cast<std::uint32_t>(t.rows())};
        } else {
          dims = {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())};
        }
        std::vector<float> values(static_cast<std::size_t>(t.size()));
        for (Eigen::Index i = 0; i < t.size(); ++i) values[i] = static_cast<float>(t.data()[i]);
        save_tensor(dir / (std::string(kParamNames[index++]) + ".t"), dims, values);
      },
      copy);
}

FusionNetwork load_fusion(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  json manifest;
  try {
    manifest = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::FormatError, "fusion manifest: " + std::string(e.what()));
  }
  require(manifest.value("format", std::string()) == "m3dm-fusion", ErrorKind::FormatError,
          "not a fusion checkpoint: " + dir.string());

  FusionNetwork net;
  int index = 0;
  for_each_parameter(
      [&](auto& t) {
        const Tensor tensor = load_tensor(dir / (std::string(kParamNames[index++]) + ".t"));
        const bool vector = tensor.dims.size() == 1;
        require(vector || tensor.dims.size() == 2, ErrorKind::FormatError,
                "bad parameter tensor rank in " + dir.string());
        const Eigen::Index rows = tensor.dims[0];
        const Eigen::Index cols = vector ? 1 : tensor.dims[1];
        if constexpr (std::remove_reference_t<decltype(t)>::ColsAtCompileTime == 1) {
          require(vector, ErrorKind::FormatError, "expected a bias vector in " + dir.string());
          t.resize(rows);
        } else {
          require(!vector, ErrorKind::FormatError, "expected a weight matrix in " + dir.string());
          t.resize(rows, cols);
        }
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = tensor.values[static_cast<std::size_t>(i)];
      },
      net);
  require(net.chi_rgb.fc2.in_dim() == net.chi_rgb.fc1.out_dim() &&
              net.chi_pt.fc2.in_dim() == net.chi_pt.fc1.out_dim() &&
              net.sigma_rgb.in_dim() == net.chi_rgb.fc2.out_dim() &&
              net.sigma_pt.in_dim() == net.chi_pt.fc2.out_dim() &&
              net.sigma_rgb.out_dim() == net.sigma_pt.out_dim(),
          ErrorKind::FormatError, "inconsistent layer shapes in " + dir.string());
  return net;
}

}  // namespace m3dm::fusion
