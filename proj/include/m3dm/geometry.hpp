#pragma once

// Scene preprocessing and point feature alignment: background plane removal,
// farthest point sampling, kNN grouping, inverse-distance interpolation of
// group features back onto points, projection onto the image plane and
// patch pooling.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm::geometry {

/// Plane in Hessian normal form: normal . p + offset = 0, |normal| = 1.
struct Plane {
  Vec3 normal = Vec3::UnitZ();
  double offset = 0.0;

  [[nodiscard]] double distance(const Vec3& p) const { return std::abs(normal.dot(p) + offset); }
};

struct PlaneFit {
  Plane plane;
  std::size_t inliers = 0;
};

/// RANSAC over 3-point samples. Best plane is the one with most points within
/// dist_thresh; ties keep the first found. Throws DegenerateScene when fewer
/// than 3 points are given or every sample was collinear.
PlaneFit fit_plane_ransac(std::span<const Vec3> points, double dist_thresh, int iters,
                          std::uint64_t seed);

/// Invalidates every valid pixel within dist_thresh of the plane and zeroes
/// its coordinates and colour.
OrganizedScene remove_plane(const OrganizedScene& scene, const Plane& plane, double dist_thresh);

/// Bilinear resize of coords and rgb. An output pixel is valid only when every
/// source pixel with non-zero bilinear weight is valid.
OrganizedScene resize_scene(const OrganizedScene& scene, int target_size);

struct PreprocessOptions {
  double dist_thresh = 0.005;
  int iters = 500;
  int target_size = 224;
  std::uint64_t seed = 0;
};

OrganizedScene preprocess_scene(const OrganizedScene& scene, const PreprocessOptions& options = {});

/// Greedy max-min sampling starting at seed_index; ties go to the lowest index.
std::vector<std::size_t> farthest_point_sampling(std::span<const Vec3> points, std::size_t m,
                                                 std::size_t seed_index = 0);

struct PointGroupSet {
  std::vector<Vec3> centers;
  std::vector<std::size_t> center_indices;
  std::size_t group_size = 0;
  std::vector<std::size_t> members;  // center_count() x group_size, row-major
  RowMatrix group_features;          // optional, center_count() x D

  [[nodiscard]] std::size_t center_count() const noexcept { return center_indices.size(); }
  [[nodiscard]] std::span<const std::size_t> group(std::size_t i) const {
    return {members.data() + i * group_size, group_size};
  }
};

/// Groups of the s nearest points (Euclidean, ties by lowest index) around each
/// center. Groups may overlap.
PointGroupSet knn_group(std::span<const Vec3> points, std::span<const std::size_t> center_indices,
                        std::size_t s);

/// Inverse-distance interpolation of per-center features onto points, with
/// per-point normalisation so the weights of every point sum to one.
/// neighbors == 0 uses every center; otherwise only the `neighbors` closest.
RowMatrix interpolate_to_points(const RowMatrix& group_features, std::span<const Vec3> centers,
                                std::span<const Vec3> points, double eps = 1e-8,
                                std::size_t neighbors = 0);

/// Scatter point features onto an h x w grid; colliding points are averaged.
PatchGrid project_to_plane(const RowMatrix& point_features,
                           std::span<const std::size_t> pixel_of_point, int h, int w);

/// Window mean over occupied cells only. Empty windows stay zero/unoccupied.
PatchGrid average_pool(const PatchGrid& grid, int gh, int gw);

}  // namespace m3dm::geometry
