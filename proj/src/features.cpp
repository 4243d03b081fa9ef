#include "m3dm/features.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <string>

#include "m3dm/error.hpp"
#include "m3dm/random.hpp"

namespace m3dm::features {

RowMatrix random_projection(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  RowMatrix m(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
  return m;
}

std::array<double, kRgbDescriptorSize> rgb_window_descriptor(std::span<const float> rgb, int width,
                                                             int y0, int x0, int wy, int wx) {
  std::array<double, kRgbDescriptorSize> out{};
  const double n = static_cast<double>(wy) * wx;
  for (int y = y0; y < y0 + wy; ++y) {
    for (int x = x0; x < x0 + wx; ++x) {
      const std::size_t p = 3 * (static_cast<std::size_t>(y) * width + x);
      double intensity = 0.0;
      for (int c = 0; c < 3; ++c) {
        out[c] += rgb[p + c];
        intensity += rgb[p + c];
      }
      intensity /= 3.0;
      const int bin = std::min(2, static_cast<int>(intensity * 3.0));
      out[6 + std::max(0, bin)] += 1.0;
    }
  }
  for (int c = 0; c < 3; ++c) out[c] /= n;
  for (int y = y0; y < y0 + wy; ++y) {
    for (int x = x0; x < x0 + wx; ++x) {
      const std::size_t p = 3 * (static_cast<std::size_t>(y) * width + x);
      for (int c = 0; c < 3; ++c) out[3 + c] += (rgb[p + c] - out[c]) * (rgb[p + c] - out[c]);
    }
  }
  for (int k = 3; k < 9; ++k) out[k] /= n;
  return out;
}

PatchGrid toy_rgb_extractor(std::span<const float> rgb, int height, int width, int gh, int gw,
                            int d_out, std::uint64_t seed) {
  require(height > 0 && width > 0 && rgb.size() == static_cast<std::size_t>(height) * width * 3,
          ErrorKind::BadArity, "rgb buffer does not match its dimensions");
  require(gh > 0 && gw > 0 && height % gh == 0 && width % gw == 0, ErrorKind::BadArity,
          "image " + std::to_string(height) + "x" + std::to_string(width) +
              " not divisible into " + std::to_string(gh) + "x" + std::to_string(gw) + " patches");
  require(d_out > 0, ErrorKind::BadArity, "d_out must be positive");

  const RowMatrix projection = random_projection(d_out, kRgbDescriptorSize, seed);
  const int wy = height / gh;
  const int wx = width / gw;
  PatchGrid grid(gh, gw, d_out);
  Eigen::VectorXd raw(kRgbDescriptorSize);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      bool any = false;
      for (int y = py * wy; y < (py + 1) * wy && !any; ++y) {
        for (int x = px * wx; x < (px + 1) * wx; ++x) {
          const std::size_t p = 3 * (static_cast<std::size_t>(y) * width + x);
          if (rgb[p] != 0.0f || rgb[p + 1] != 0.0f || rgb[p + 2] != 0.0f) {
            any = true;
            break;
          }
        }
      }
      const auto desc = rgb_window_descriptor(rgb, width, py * wy, px * wx, wy, wx);
      for (int k = 0; k < kRgbDescriptorSize; ++k) raw[k] = desc[k];
      const Eigen::VectorXd y = (projection * raw).array().tanh();
      const std::size_t cell = static_cast<std::size_t>(py) * gw + px;
      grid.occupancy[cell] = any ? 1 : 0;
      if (!any) continue;
      auto dst = grid.cell(cell);
      for (int d = 0; d < d_out; ++d) dst[d] = static_cast<float>(y[d]);
    }
  }
  return grid;
}

std::array<double, kPointDescriptorSize> point_group_descriptor(std::span<const Vec3> points,
                                                                std::span<const std::size_t> members,
                                                                double length_unit) {
  require(!members.empty(), ErrorKind::BadArity, "empty point group");
  require(length_unit > 0.0, ErrorKind::BadParam, "length_unit must be positive");
  Vec3 centroid = Vec3::Zero();
  for (auto i : members) {
    require(i < points.size(), ErrorKind::BadArity, "group member out of range");
    centroid += points[i];
  }
  const double n = static_cast<double>(members.size());
  centroid /= n;

  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double radius = 0.0;
  double zmin = points[members[0]].z();
  double zmax = zmin;
  for (auto i : members) {
    const Vec3 r = (points[i] - centroid) / length_unit;
    cov += r * r.transpose();
    radius += r.norm();
    zmin = std::min(zmin, points[i].z());
    zmax = std::max(zmax, points[i].z());
  }
  cov /= n;
  radius /= n;

  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(cov, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = solver.eigenvalues();  // ascending

  return {cov(0, 0), cov(1, 1), cov(2, 2),
          cov(0, 1), cov(0, 2), cov(1, 2),
          std::max(0.0, ev[2]), std::max(0.0, ev[1]), std::max(0.0, ev[0]),
          radius, (zmax - zmin) / length_unit / n};
}

RowMatrix toy_point_extractor(const geometry::PointGroupSet& groups, std::span<const Vec3> points,
                              int d_out, std::uint64_t seed, double length_unit) {
  require(d_out > 0, ErrorKind::BadArity, "d_out must be positive");
  require(groups.group_size > 0 &&
              groups.members.size() == groups.center_count() * groups.group_size,
          ErrorKind::BadArity, "malformed point groups");
  const RowMatrix projection = random_projection(d_out, kPointDescriptorSize, seed);
  RowMatrix out(static_cast<Eigen::Index>(groups.center_count()), d_out);
  Eigen::VectorXd raw(kPointDescriptorSize);
  for (std::size_t g = 0; g < groups.center_count(); ++g) {
    const auto desc = point_group_descriptor(points, groups.group(g), length_unit);
    for (int k = 0; k < kPointDescriptorSize; ++k) raw[k] = desc[k];
    out.row(static_cast<Eigen::Index>(g)) = (projection * raw).transpose();
  }
  return out;
}

}  // namespace m3dm::features
