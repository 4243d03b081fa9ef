#include "m3dm/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "m3dm/error.hpp"
#include "m3dm/random.hpp"

namespace m3dm::geometry {

PlaneFit fit_plane_ransac(std::span<const Vec3> points, double dist_thresh, int iters,
                          std::uint64_t seed) {
  require(points.size() >= 3, ErrorKind::DegenerateScene,
          "plane fit needs at least 3 points, got " + std::to_string(points.size()));
  require(dist_thresh > 0.0, ErrorKind::BadParam, "dist_thresh must be positive");
  require(iters > 0, ErrorKind::BadParam, "iters must be positive");

  Rng rng(seed);
  const std::uint64_t n = points.size();
  PlaneFit best;
  bool found = false;
  for (int it = 0; it < iters; ++it) {
    const std::size_t a = rng.uniform_index(n);
    std::size_t b = rng.uniform_index(n - 1);
    if (b >= a) ++b;
    std::size_t c = rng.uniform_index(n - 2);
    if (c >= std::min(a, b)) ++c;
    if (c >= std::max(a, b)) ++c;

    Vec3 normal = (points[b] - points[a]).cross(points[c] - points[a]);
    const double norm = normal.norm();
    if (!(norm > 1e-15)) continue;
    normal /= norm;
    const Plane candidate{normal, -normal.dot(points[a])};

    std::size_t count = 0;
    for (const auto& p : points) count += candidate.distance(p) <= dist_thresh ? 1 : 0;
    if (!found || count > best.inliers) {
      best = {candidate, count};
      found = true;
    }
  }
  require(found, ErrorKind::DegenerateScene, "all RANSAC samples were collinear");
  return best;
}

OrganizedScene remove_plane(const OrganizedScene& scene, const Plane& plane, double dist_thresh) {
  OrganizedScene out = scene;
  for (std::size_t p = 0; p < out.pixel_count(); ++p) {
    if (out.valid[p] && plane.distance(out.point(p)) > dist_thresh) continue;
    out.valid[p] = 0;
    for (int k = 0; k < 3; ++k) {
      out.coords[3 * p + k] = 0.0f;
      out.rgb[3 * p + k] = 0.0f;
    }
  }
  return out;
}

namespace {

struct Tap {
  int index;
  double weight;
};

// Half-pixel-centre bilinear taps along one axis, clamped at the borders.
void axis_taps(int dst, int src_size, int dst_size, Tap taps[2], int& count) {
  double s = (dst + 0.5) * static_cast<double>(src_size) / dst_size - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(src_size - 1));
  const int i0 = static_cast<int>(std::floor(s));
  const double f = s - i0;
  count = 0;
  if (1.0 - f > 0.0) taps[count++] = {i0, 1.0 - f};
  if (f > 0.0 && i0 + 1 < src_size) taps[count++] = {i0 + 1, f};
}

}  // namespace

OrganizedScene resize_scene(const OrganizedScene& scene, int target_size) {
  require(target_size > 0, ErrorKind::BadParam, "target_size must be positive");
  OrganizedScene out(target_size, target_size);
  for (int y = 0; y < target_size; ++y) {
    Tap ty[2];
    int ny = 0;
    axis_taps(y, scene.height, target_size, ty, ny);
    for (int x = 0; x < target_size; ++x) {
      Tap tx[2];
      int nx = 0;
      axis_taps(x, scene.width, target_size, tx, nx);
      bool all_valid = true;
      double acc_xyz[3] = {0, 0, 0};
      double acc_rgb[3] = {0, 0, 0};
      for (int i = 0; i < ny && all_valid; ++i) {
        for (int j = 0; j < nx; ++j) {
          const std::size_t src = static_cast<std::size_t>(ty[i].index) * scene.width + tx[j].index;
          if (!scene.valid[src]) {
            all_valid = false;
            break;
          }
          const double w = ty[i].weight * tx[j].weight;
          for (int k = 0; k < 3; ++k) {
            acc_xyz[k] += w * scene.coords[3 * src + k];
            acc_rgb[k] += w * scene.rgb[3 * src + k];
          }
        }
      }
      if (!all_valid) continue;
      const std::size_t dst = static_cast<std::size_t>(y) * target_size + x;
      out.valid[dst] = 1;
      for (int k = 0; k < 3; ++k) {
        out.coords[3 * dst + k] = static_cast<float>(acc_xyz[k]);
        out.rgb[3 * dst + k] = static_cast<float>(acc_rgb[k]);
      }
    }
  }
  return out;
}

OrganizedScene preprocess_scene(const OrganizedScene& scene, const PreprocessOptions& options) {
  std::vector<Vec3> points;
  std::vector<std::size_t> pixels;
  scene.valid_points(points, pixels);
  const PlaneFit fit = fit_plane_ransac(points, options.dist_thresh, options.iters, options.seed);
  OrganizedScene cleaned = remove_plane(scene, fit.plane, options.dist_thresh);
  return resize_scene(cleaned, options.target_size);
}

std::vector<std::size_t> farthest_point_sampling(std::span<const Vec3> points, std::size_t m,
                                                 std::size_t seed_index) {
  const std::size_t n = points.size();
  require(n > 0, ErrorKind::BadArity, "farthest_point_sampling on empty point set");
  require(m >= 1 && m <= n, ErrorKind::BadArity,
          "farthest_point_sampling: m=" + std::to_string(m) + " outside [1, " + std::to_string(n) + "]");
  require(seed_index < n, ErrorKind::BadArity, "seed_index out of range");

  std::vector<std::size_t> selected;
  selected.reserve(m);
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::size_t current = seed_index;
  for (std::size_t step = 0; step < m; ++step) {
    selected.push_back(current);
    min_dist[current] = -1.0;
    std::size_t next = 0;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (min_dist[i] < 0.0) continue;
      min_dist[i] = std::min(min_dist[i], (points[i] - points[current]).squaredNorm());
      if (min_dist[i] > best) {
        best = min_dist[i];
        next = i;
      }
    }
    current = next;
  }
  return selected;
}

PointGroupSet knn_group(std::span<const Vec3> points, std::span<const std::size_t> center_indices,
                        std::size_t s) {
  const std::size_t n = points.size();
  require(s >= 1 && s <= n, ErrorKind::BadArity,
          "knn_group: s=" + std::to_string(s) + " outside [1, " + std::to_string(n) + "]");
  PointGroupSet out;
  out.group_size = s;
  out.center_indices.assign(center_indices.begin(), center_indices.end());
  out.members.resize(center_indices.size() * s);

  std::vector<std::pair<double, std::size_t>> order(n);
  for (std::size_t g = 0; g < center_indices.size(); ++g) {
    const std::size_t ci = center_indices[g];
    require(ci < n, ErrorKind::BadArity, "center index out of range");
    const Vec3& c = points[ci];
    out.centers.push_back(c);
    for (std::size_t i = 0; i < n; ++i) order[i] = {(points[i] - c).squaredNorm(), i};
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(s), order.end());
    for (std::size_t k = 0; k < s; ++k) out.members[g * s + k] = order[k].second;
  }
  return out;
}

RowMatrix interpolate_to_points(const RowMatrix& group_features, std::span<const Vec3> centers,
                                std::span<const Vec3> points, double eps, std::size_t neighbors) {
  const auto m = static_cast<std::size_t>(group_features.rows());
  require(m >= 1, ErrorKind::BadArity, "interpolation needs at least one center");
  require(centers.size() == m, ErrorKind::BadArity, "centers and group features disagree in count");
  require(eps > 0.0, ErrorKind::BadParam, "eps must be positive");
  const std::size_t k = (neighbors == 0 || neighbors > m) ? m : neighbors;

  RowMatrix out = RowMatrix::Zero(static_cast<Eigen::Index>(points.size()), group_features.cols());
  std::vector<std::pair<double, std::size_t>> dist(m);
  for (std::size_t j = 0; j < points.size(); ++j) {
    for (std::size_t i = 0; i < m; ++i) dist[i] = {(centers[i] - points[j]).norm(), i};
    if (k < m) {
      std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    }
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) total += 1.0 / (dist[i].first + eps);
    for (std::size_t i = 0; i < k; ++i) {
      const double alpha = (1.0 / (dist[i].first + eps)) / total;
      out.row(static_cast<Eigen::Index>(j)) +=
          alpha * group_features.row(static_cast<Eigen::Index>(dist[i].second));
    }
  }
  return out;
}

PatchGrid project_to_plane(const RowMatrix& point_features,
                           std::span<const std::size_t> pixel_of_point, int h, int w) {
  require(h > 0 && w > 0, ErrorKind::BadArity, "projection grid must be non-empty");
  require(static_cast<std::size_t>(point_features.rows()) == pixel_of_point.size(),
          ErrorKind::BadArity, "one pixel index per point feature required");
  const int dim = static_cast<int>(point_features.cols());
  require(dim > 0, ErrorKind::BadArity, "feature dimension must be positive");

  const std::size_t cells = static_cast<std::size_t>(h) * w;
  std::vector<double> sum(cells * dim, 0.0);
  std::vector<int> count(cells, 0);
  for (std::size_t j = 0; j < pixel_of_point.size(); ++j) {
    const std::size_t p = pixel_of_point[j];
    require(p < cells, ErrorKind::BadArity, "pixel index out of range");
    ++count[p];
    for (int d = 0; d < dim; ++d) sum[p * dim + d] += point_features(static_cast<Eigen::Index>(j), d);
  }
  PatchGrid grid(h, w, dim);
  for (std::size_t p = 0; p < cells; ++p) {
    if (count[p] == 0) continue;
    grid.occupancy[p] = 1;
    for (int d = 0; d < dim; ++d) grid.data[p * dim + d] = static_cast<float>(sum[p * dim + d] / count[p]);
  }
  return grid;
}

PatchGrid average_pool(const PatchGrid& grid, int gh, int gw) {
  require(gh > 0 && gw > 0 && grid.rows % gh == 0 && grid.cols % gw == 0, ErrorKind::BadArity,
          "grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
              " not divisible into " + std::to_string(gh) + "x" + std::to_string(gw));
  const int wy = grid.rows / gh;
  const int wx = grid.cols / gw;
  PatchGrid out(gh, gw, grid.dim);
  std::vector<double> acc(grid.dim);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      std::fill(acc.begin(), acc.end(), 0.0);
      int count = 0;
      for (int y = py * wy; y < (py + 1) * wy; ++y) {
        for (int x = px * wx; x < (px + 1) * wx; ++x) {
          const std::size_t c = static_cast<std::size_t>(y) * grid.cols + x;
          if (!grid.occupancy[c]) continue;
          ++count;
          const auto cell = grid.cell(c);
          for (int d = 0; d < grid.dim; ++d) acc[d] += cell[d];
        }
      }
      if (count == 0) continue;
      const std::size_t o = static_cast<std::size_t>(py) * gw + px;
      out.occupancy[o] = 1;
      auto dst = out.cell(o);
      for (int d = 0; d < grid.dim; ++d) dst[d] = static_cast<float>(acc[d] / count);
    }
  }
  return out;
}

}  // namespace m3dm::geometry
