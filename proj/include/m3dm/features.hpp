#pragma once

// Deterministic stand-ins for the pretrained RGB and point backbones. Both map a
// small hand-built descriptor through a fixed seeded random projection, so
// outputs depend only on (input, seed).

#include <array>
#include <cstdint>
#include <span>

#include "m3dm/geometry.hpp"
#include "m3dm/types.hpp"

namespace m3dm::features {

inline constexpr int kRgbDescriptorSize = 9;
inline constexpr int kPointDescriptorSize = 11;

/// Channel means, channel variances and a 3-bin intensity histogram of one
/// window.
std::array<double, kRgbDescriptorSize> rgb_window_descriptor(std::span<const float> rgb, int width,
                                                             int y0, int x0, int wy, int wx);

/// rgb is H x W x 3. A patch is occupied when its window has any non-zero pixel.
PatchGrid toy_rgb_extractor(std::span<const float> rgb, int height, int width, int gh, int gw,
                            int d_out, std::uint64_t seed);

/// Centroid-relative second moments (xx, yy, zz, xy, xz, yz), covariance
/// eigenvalues (descending), mean radius and z-span divided by group size.
/// Lengths are expressed in multiples of length_unit.
std::array<double, kPointDescriptorSize> point_group_descriptor(std::span<const Vec3> points,
                                                                std::span<const std::size_t> members,
                                                                double length_unit);

/// One d_out feature per group.
RowMatrix toy_point_extractor(const geometry::PointGroupSet& groups, std::span<const Vec3> points,
                              int d_out, std::uint64_t seed, double length_unit = 0.01);

/// Seeded Gaussian projection matrix (rows x cols), entries N(0, 1/cols).
RowMatrix random_projection(int rows, int cols, std::uint64_t seed);

}  // namespace m3dm::features
