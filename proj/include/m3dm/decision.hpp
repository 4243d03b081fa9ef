#pragma once

// Decision layer fusion: linear one-class SVMs over per-bank scores, fitted by
// single-sample SGD.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm::decision {

/// Maps a raw score vector x to x~ = margin - (x - mean) / scale when reflect is
/// set, else (x - mean) / scale. Reflection places the nominal cloud at
/// `margin` on the positive side of the origin and moves large (anomalous)
/// memory-bank distances towards and past the origin.
struct Scaler {
  std::vector<double> mean;
  std::vector<double> scale;
  bool reflect = true;
  double margin = 3.0;

  static Scaler identity(std::size_t dim);
  static Scaler fit(const RowMatrix& samples, double margin);

  [[nodiscard]] std::size_t dim() const noexcept { return mean.size(); }
  [[nodiscard]] std::vector<double> transform(std::span<const double> x) const;
};

struct DecisionHead {
  std::vector<double> w;
  double rho = 0.0;
  double nu = 0.5;
  Scaler scaler;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t dim() const noexcept { return w.size(); }
};

struct OcsvmConfig {
  double nu = 0.5;
  double lr = 1e-4;
  int epochs = 1000;
  double margin = 3.0;
  std::uint64_t seed = 0;
};

/// Minimises 1/2 |w|^2 + 1/(nu n) sum max(0, rho - w.x~_i) - rho by SGD over
/// seeded shuffles of the standardised samples (n x d). When objective_log is
/// given it receives the full training objective after every epoch.
DecisionHead ocsvm_train(const RowMatrix& samples, const OcsvmConfig& cfg,
                         std::vector<double>* objective_log = nullptr);

/// Training objective on already-standardised samples.
double ocsvm_objective(std::span<const double> w, double rho, double nu, const RowMatrix& standardized);

/// rho - w . x~ on a standardised input.
double ocsvm_score_standardized(const DecisionHead& head, std::span<const double> x_tilde);

/// rho - w . x~; larger means more anomalous.
double ocsvm_score(const DecisionHead& head, std::span<const double> x);

struct SceneDecision {
  double anomaly_score = 0.0;
  ScoreMap patch_map;  // Gh x Gw, before upsampling
  ScoreMap segmentation;
};

/// a from the per-bank phi vector through head_a; per-patch scores from the
/// per-bank psi maps through head_s, then upsampled and smoothed to h x w.
SceneDecision dlf_infer_scene(const DecisionHead& head_a, const DecisionHead& head_s,
                              std::span<const double> phi, std::span<const ScoreMap> psi, int h,
                              int w, double sigma);

void save_head(const std::filesystem::path& path, const DecisionHead& head);
DecisionHead load_head(const std::filesystem::path& path);

}  // namespace m3dm::decision
