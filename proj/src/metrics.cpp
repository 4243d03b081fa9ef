#include "m3dm/metrics.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "m3dm/error.hpp"

namespace m3dm::metrics {

double auroc(std::span<const double> scores, std::span<const int> labels) {
  require(scores.size() == labels.size(), ErrorKind::BadArity, "scores and labels differ in length");
  std::size_t pos = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, ErrorKind::BadParam, "labels must be 0 or 1");
    pos += static_cast<std::size_t>(l);
  }
  const std::size_t neg = labels.size() - pos;
  require(pos > 0 && neg > 0, ErrorKind::OneClassOnly, "AUROC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1) rank_sum += avg_rank;
    }
    i = j;
  }
  const double p = static_cast<double>(pos);
  const double u = rank_sum - p * (p + 1.0) / 2.0;
  return u / (p * static_cast<double>(neg));
}

Components connected_components(std::span<const std::uint8_t> mask, int h, int w) {
  require(mask.size() == static_cast<std::size_t>(h) * w, ErrorKind::BadArity, "mask size mismatch");
  Components out;
  out.labels.assign(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || out.labels[start] != 0) continue;
    const int label = ++out.count;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const int y = static_cast<int>(p / w);
      const int x = static_cast<int>(p % w);
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy;
          const int nx = x + dx;
          if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
          const std::size_t q = static_cast<std::size_t>(ny) * w + nx;
          if (mask[q] && out.labels[q] == 0) {
            out.labels[q] = label;
            stack.push_back(q);
          }
        }
      }
    }
  }
  return out;
}

std::vector<ProPoint> pro_curve(std::span<const ScoreMap> maps,
                                std::span<const std::vector<std::uint8_t>> masks) {
  require(maps.size() == masks.size(), ErrorKind::BadArity, "maps and masks differ in count");

  struct Pixel {
    double score;
    int region;  // -1 = anomaly-free, otherwise global component id
  };
  std::vector<Pixel> pixels;
  std::vector<double> region_size;
  std::size_t normal_total = 0;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    const auto& m = maps[s];
    require(masks[s].size() == m.values.size(), ErrorKind::BadArity, "mask and map differ in size");
    const Components cc = connected_components(masks[s], m.rows, m.cols);
    const int base = static_cast<int>(region_size.size());
    region_size.resize(region_size.size() + static_cast<std::size_t>(cc.count), 0.0);
    for (std::size_t p = 0; p < m.values.size(); ++p) {
      const int label = cc.labels[p];
      if (label == 0) {
        ++normal_total;
        pixels.push_back({m.values[p], -1});
      } else {
        region_size[static_cast<std::size_t>(base + label - 1)] += 1.0;
        pixels.push_back({m.values[p], base + label - 1});
      }
    }
  }
  require(!region_size.empty(), ErrorKind::NoAnomaly, "no anomalous region in any mask");
  require(normal_total > 0, ErrorKind::DataError, "no anomaly-free pixel to measure FPR on");

  std::sort(pixels.begin(), pixels.end(), [](const Pixel& a, const Pixel& b) { return a.score > b.score; });

  std::vector<double> thresholds;
  {
    std::vector<double> unique;
    for (const auto& px : pixels) {
      if (unique.empty() || px.score != unique.back()) unique.push_back(px.score);
    }
    if (unique.size() <= 10000) {
      thresholds = std::move(unique);  // descending
    } else {
      const std::size_t n = pixels.size();
      for (int i = 0; i < 1000; ++i) {
        // quantile i/999 of the ascending order, visited high to low
        const std::size_t asc = static_cast<std::size_t>(
            static_cast<double>(999 - i) / 999.0 * static_cast<double>(n - 1) + 0.5);
        const double t = pixels[n - 1 - asc].score;
        if (thresholds.empty() || t < thresholds.back()) thresholds.push_back(t);
      }
    }
  }

  std::vector<ProPoint> curve;
  curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::vector<double> covered(region_size.size(), 0.0);
  double pro_sum = 0.0;  // sum over regions of covered fraction
  std::size_t normal_hit = 0;
  std::size_t next = 0;
  const double regions = static_cast<double>(region_size.size());
  for (double t : thresholds) {
    while (next < pixels.size() && pixels[next].score >= t) {
      const int r = pixels[next].region;
      if (r < 0) {
        ++normal_hit;
      } else {
        covered[static_cast<std::size_t>(r)] += 1.0;
        pro_sum += 1.0 / region_size[static_cast<std::size_t>(r)];
      }
      ++next;
    }
    curve.push_back({t, static_cast<double>(normal_hit) / static_cast<double>(normal_total),
                     pro_sum / regions});
  }
  return curve;
}

double integrate_pro(const std::vector<ProPoint>& curve, double fpr_limit) {
  require(fpr_limit > 0.0 && fpr_limit <= 1.0, ErrorKind::BadParam, "fpr_limit must lie in (0, 1]");
  double area = 0.0;
  for (std::size_t i = 1; i < curve.size(); ++i) {
    const ProPoint& a = curve[i - 1];
    const ProPoint& b = curve[i];
    if (a.fpr >= fpr_limit) break;
    if (b.fpr <= fpr_limit) {
      area += 0.5 * (b.fpr - a.fpr) * (a.pro + b.pro);
    } else {
      const double t = (fpr_limit - a.fpr) / (b.fpr - a.fpr);
      const double pro_at = a.pro + t * (b.pro - a.pro);
      area += 0.5 * (fpr_limit - a.fpr) * (a.pro + pro_at);
      break;
    }
  }
  return std::clamp(area / fpr_limit, 0.0, 1.0);
}

double aupro(std::span<const ScoreMap> maps, std::span<const std::vector<std::uint8_t>> masks,
             double fpr_limit) {
  return integrate_pro(pro_curve(maps, masks), fpr_limit);
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["i_auroc"] = i_auroc;
  j["p_auroc"] = p_auroc;
  j["aupro"] = aupro;
  j["fpr_limit"] = fpr_limit;
  j["n_scenes"] = n_scenes;
  return j.dump(2) + "\n";
}

EvalReport evaluate(std::span<const double> scene_scores, std::span<const int> labels,
                    std::span<const ScoreMap> maps, std::span<const std::vector<std::uint8_t>> masks,
                    double fpr_limit) {
  EvalReport r;
  r.fpr_limit = fpr_limit;
  r.n_scenes = scene_scores.size();
  r.i_auroc = auroc(scene_scores, labels);
  std::vector<double> pixel_scores;
  std::vector<int> pixel_labels;
  for (std::size_t s = 0; s < maps.size(); ++s) {
    require(masks[s].size() == maps[s].values.size(), ErrorKind::BadArity, "mask and map differ in size");
    pixel_scores.insert(pixel_scores.end(), maps[s].values.begin(), maps[s].values.end());
    for (auto v : masks[s]) pixel_labels.push_back(v ? 1 : 0);
  }
  r.p_auroc = auroc(pixel_scores, pixel_labels);
  r.aupro = aupro(maps, masks, fpr_limit);
  return r;
}

}  // namespace m3dm::metrics
