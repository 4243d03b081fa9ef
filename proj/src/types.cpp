#include "m3dm/types.hpp"

#include <algorithm>

namespace m3dm {

std::size_t OrganizedScene::valid_count() const noexcept {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

void OrganizedScene::valid_points(std::vector<Vec3>& points,
                                  std::vector<std::size_t>& pixels) const {
  points.clear();
  pixels.clear();
  for (std::size_t p = 0; p < pixel_count(); ++p) {
    if (!valid[p]) continue;
    points.push_back(point(p));
    pixels.push_back(p);
  }
}

std::size_t PatchGrid::occupied_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(occupancy.begin(), occupancy.end(), [](std::uint8_t v) { return v != 0; }));
}

}  // namespace m3dm
