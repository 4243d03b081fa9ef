#include "m3dm/decision.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "json.hpp"
#include "m3dm/error.hpp"
#include "m3dm/memory.hpp"
#include "m3dm/random.hpp"
#include "m3dm/tensor_io.hpp"

namespace m3dm::decision {

using nlohmann::json;

Scaler Scaler::identity(std::size_t dim) {
  Scaler s;
  s.mean.assign(dim, 0.0);
  s.scale.assign(dim, 1.0);
  s.reflect = false;
  s.margin = 0.0;
  return s;
}

Scaler Scaler::fit(const RowMatrix& samples, double margin) {
  Scaler s;
  s.reflect = true;
  s.margin = margin;
  const auto n = static_cast<double>(samples.rows());
  for (Eigen::Index j = 0; j < samples.cols(); ++j) {
    const double mean = samples.col(j).sum() / n;
    const double var = (samples.col(j).array() - mean).square().sum() / n;
    const double sd = std::sqrt(var);
    s.mean.push_back(mean);
    // A constant input carries no spread to normalise by.
    s.scale.push_back(sd > 1e-12 * std::max(1.0, std::abs(mean)) ? sd : 1.0);
  }
  return s;
}

std::vector<double> Scaler::transform(std::span<const double> x) const {
  require(x.size() == dim(), ErrorKind::BadArity,
          "expected a " + std::to_string(dim()) + "-vector, got " + std::to_string(x.size()));
  std::vector<double> out(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double z = (x[k] - mean[k]) / scale[k];
    out[k] = reflect ? margin - z : z;
  }
  return out;
}

double ocsvm_objective(std::span<const double> w, double rho, double nu, const RowMatrix& xs) {
  const auto n = static_cast<double>(xs.rows());
  double hinge = 0.0;
  double wn = 0.0;
  for (double v : w) wn += v * v;
  for (Eigen::Index i = 0; i < xs.rows(); ++i) {
    double dot = 0.0;
    for (Eigen::Index k = 0; k < xs.cols(); ++k) dot += w[static_cast<std::size_t>(k)] * xs(i, k);
    hinge += std::max(0.0, rho - dot);
  }
  return 0.5 * wn + hinge / (nu * n) - rho;
}

DecisionHead ocsvm_train(const RowMatrix& samples, const OcsvmConfig& cfg,
                         std::vector<double>* objective_log) {
  require(samples.rows() > 0 && samples.cols() > 0, ErrorKind::EmptyData, "no OCSVM training samples");
  require(cfg.nu > 0.0 && cfg.nu <= 1.0, ErrorKind::BadParam, "nu must lie in (0, 1]");
  require(cfg.lr > 0.0 && cfg.epochs >= 0, ErrorKind::BadParam, "invalid OCSVM learning schedule");
  require(samples.allFinite(), ErrorKind::NonFinite, "non-finite OCSVM sample");

  DecisionHead head;
  head.nu = cfg.nu;
  head.seed = cfg.seed;
  head.scaler = Scaler::fit(samples, cfg.margin);
  const auto n = static_cast<std::size_t>(samples.rows());
  const auto d = static_cast<std::size_t>(samples.cols());

  RowMatrix xs(samples.rows(), samples.cols());
  std::vector<double> row(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) row[k] = samples(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k));
    const auto t = head.scaler.transform(row);
    for (std::size_t k = 0; k < d; ++k) xs(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = t[k];
  }

  std::vector<double> w(d, 0.0);
  double rho = 0.0;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const double inv_nu = 1.0 / cfg.nu;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    for (std::size_t i : order) {
      const auto r = static_cast<Eigen::Index>(i);
      double dot = 0.0;
      for (std::size_t k = 0; k < d; ++k) dot += w[k] * xs(r, static_cast<Eigen::Index>(k));
      const bool active = rho - dot > 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double g = w[k];
        if (active) g -= inv_nu * xs(r, static_cast<Eigen::Index>(k));
        w[k] -= cfg.lr * g;
      }
      rho -= cfg.lr * ((active ? inv_nu : 0.0) - 1.0);
    }
    if (objective_log) objective_log->push_back(ocsvm_objective(w, rho, cfg.nu, xs));
  }
  head.w = std::move(w);
  head.rho = rho;
  return head;
}

double ocsvm_score_standardized(const DecisionHead& head, std::span<const double> x_tilde) {
  require(x_tilde.size() == head.dim(), ErrorKind::BadArity, "input dimension does not match the head");
  double dot = 0.0;
  for (std::size_t k = 0; k < x_tilde.size(); ++k) dot += head.w[k] * x_tilde[k];
  return head.rho - dot;
}

double ocsvm_score(const DecisionHead& head, std::span<const double> x) {
  return ocsvm_score_standardized(head, head.scaler.transform(x));
}

SceneDecision dlf_infer_scene(const DecisionHead& head_a, const DecisionHead& head_s,
                              std::span<const double> phi, std::span<const ScoreMap> psi, int h,
                              int w, double sigma) {
  require(phi.size() == head_a.dim() && psi.size() == head_s.dim(), ErrorKind::BadArity,
          "score vectors do not match the decision heads");
  require(!psi.empty(), ErrorKind::BadArity, "no segmentation inputs");
  for (const auto& m : psi) {
    require(m.rows == psi[0].rows && m.cols == psi[0].cols, ErrorKind::BadArity, "psi maps are not aligned");
  }
  SceneDecision out;
  out.anomaly_score = ocsvm_score(head_a, phi);
  out.patch_map = ScoreMap(psi[0].rows, psi[0].cols);
  std::vector<double> x(psi.size());
  for (std::size_t c = 0; c < out.patch_map.values.size(); ++c) {
    for (std::size_t k = 0; k < psi.size(); ++k) x[k] = psi[k].values[c];
    out.patch_map.values[c] = ocsvm_score(head_s, x);
  }
  out.segmentation = memory::upsample_smooth(out.patch_map, h, w, sigma);
  return out;
}

void save_head(const std::filesystem::path& path, const DecisionHead& head) {
  json j;
  j["format"] = "m3dm-ocsvm";
  j["version"] = 1;
  j["w"] = head.w;
  j["rho"] = head.rho;
  j["nu"] = head.nu;
  j["seed"] = head.seed;
  j["scaler"] = {{"mean", head.scaler.mean},
                 {"scale", head.scaler.scale},
                 {"reflect", head.scaler.reflect},
                 {"margin", head.scaler.margin}};
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

DecisionHead load_head(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  DecisionHead head;
  try {
    const json j = json::parse(bytes.begin(), bytes.end());
    require(j.value("format", std::string()) == "m3dm-ocsvm", ErrorKind::FormatError,
            "not a decision head: " + path.string());
    head.w = j.at("w").get<std::vector<double>>();
    head.rho = j.at("rho").get<double>();
    head.nu = j.at("nu").get<double>();
    head.seed = j.at("seed").get<std::uint64_t>();
    const auto& s = j.at("scaler");
    head.scaler.mean = s.at("mean").get<std::vector<double>>();
    head.scaler.scale = s.at("scale").get<std::vector<double>>();
    head.scaler.reflect = s.at("reflect").get<bool>();
    head.scaler.margin = s.at("margin").get<double>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::FormatError, "decision head: " + std::string(e.what()));
  }
  require(head.scaler.dim() == head.dim() && head.scaler.scale.size() == head.dim(),
          ErrorKind::FormatError, "decision head dimensions disagree in " + path.string());
  return head;
}

}  // namespace m3dm::decision
