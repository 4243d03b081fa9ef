#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace m3dm {

using Vec3 = Eigen::Vector3d;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Pixel-registered point cloud with colour. Grids are row-major H x W x 3.
struct OrganizedScene {
  int height = 0;
  int width = 0;
  std::vector<float> coords;        // metres, camera frame
  std::vector<float> rgb;           // [0, 1]
  std::vector<std::uint8_t> valid;  // 1 where a 3D point exists

  OrganizedScene() = default;
  OrganizedScene(int h, int w)
      : height(h),
        width(w),
        coords(static_cast<std::size_t>(h) * w * 3, 0.0f),
        rgb(static_cast<std::size_t>(h) * w * 3, 0.0f),
        valid(static_cast<std::size_t>(h) * w, 0) {}

  [[nodiscard]] std::size_t pixel_count() const noexcept {
    return static_cast<std::size_t>(height) * width;
  }
  [[nodiscard]] std::size_t valid_count() const noexcept;
  [[nodiscard]] Vec3 point(std::size_t pixel) const noexcept {
    return {coords[3 * pixel], coords[3 * pixel + 1], coords[3 * pixel + 2]};
  }
  /// Valid points in raster order together with their pixel indices.
  void valid_points(std::vector<Vec3>& points, std::vector<std::size_t>& pixels) const;
};

/// rows x cols grid of dim-dimensional features; unoccupied cells are zero.
struct PatchGrid {
  int rows = 0;
  int cols = 0;
  int dim = 0;
  std::vector<float> data;
  std::vector<std::uint8_t> occupancy;

  PatchGrid() = default;
  PatchGrid(int r, int c, int d)
      : rows(r),
        cols(c),
        dim(d),
        data(static_cast<std::size_t>(r) * c * d, 0.0f),
        occupancy(static_cast<std::size_t>(r) * c, 0) {}

  [[nodiscard]] std::size_t cell_count() const noexcept {
    return static_cast<std::size_t>(rows) * cols;
  }
  [[nodiscard]] std::span<float> cell(std::size_t i) noexcept {
    return {data.data() + i * dim, static_cast<std::size_t>(dim)};
  }
  [[nodiscard]] std::span<const float> cell(std::size_t i) const noexcept {
    return {data.data() + i * dim, static_cast<std::size_t>(dim)};
  }
  [[nodiscard]] std::size_t occupied_count() const noexcept;
};

/// Scalar map (rows x cols), row-major.
struct ScoreMap {
  int rows = 0;
  int cols = 0;
  std::vector<double> values;

  ScoreMap() = default;
  ScoreMap(int r, int c, double fill = 0.0)
      : rows(r), cols(c), values(static_cast<std::size_t>(r) * c, fill) {}

  [[nodiscard]] double& at(int r, int c) { return values[static_cast<std::size_t>(r) * cols + c]; }
  [[nodiscard]] double at(int r, int c) const {
    return values[static_cast<std::size_t>(r) * cols + c];
  }
};

}  // namespace m3dm
