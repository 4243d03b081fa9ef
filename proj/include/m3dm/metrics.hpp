#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm::metrics {

/// Mann-Whitney AUROC with average ranks for ties. labels are 0/1.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct Components {
  std::vector<int> labels;  // 0 = background, 1..count in raster order of first pixel
  int count = 0;
};

/// 8-connected components of a binary h x w mask.
Components connected_components(std::span<const std::uint8_t> mask, int h, int w);

struct ProPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double pro = 0.0;
};

/// Thresholds: every distinct value when there are at most 10^4 of them,
/// otherwise 10^3 evenly spaced quantiles. A pixel is predicted anomalous when
/// its score is >= the threshold. The curve starts at (0, 0) and is ordered by
/// decreasing threshold.
std::vector<ProPoint> pro_curve(std::span<const ScoreMap> maps,
                                std::span<const std::vector<std::uint8_t>> masks);

/// Trapezoidal area under PRO(FPR) up to fpr_limit (interpolated endpoint),
/// divided by fpr_limit.
double integrate_pro(const std::vector<ProPoint>& curve, double fpr_limit);

double aupro(std::span<const ScoreMap> maps, std::span<const std::vector<std::uint8_t>> masks,
             double fpr_limit = 0.3);

struct EvalReport {
  double i_auroc = 0.0;
  double p_auroc = 0.0;
  double aupro = 0.0;
  double fpr_limit = 0.3;
  std::size_t n_scenes = 0;

  [[nodiscard]] std::string to_json() const;
};

/// I-AUROC over scene scores, P-AUROC over every pixel of every map and AUPRO.
EvalReport evaluate(std::span<const double> scene_scores, std::span<const int> labels,
                    std::span<const ScoreMap> maps, std::span<const std::vector<std::uint8_t>> masks,
                    double fpr_limit = 0.3);

}  // namespace m3dm::metrics
