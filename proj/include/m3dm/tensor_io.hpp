#pragma once

// Binary tensor container shared by every on-disk artifact:
//
//   offset  size        field
//   0       8           magic "M3DMTNSR"
//   8       4           version (u32, currently 1)
//   12      4           ndim (u32)
//   16      4 * ndim    dims (u32 each)
//   ..      4           dtype (u32, 0 = float32)
//   ..      4 * prod    payload, row-major
//
// All integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm {

inline constexpr std::uint32_t kTensorVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 0;

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  [[nodiscard]] std::size_t element_count() const noexcept;
};

std::vector<std::uint8_t> encode_tensor(std::span<const std::uint32_t> dims,
                                        std::span<const float> values);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

void save_tensor(const std::filesystem::path& path, std::span<const std::uint32_t> dims,
                 std::span<const float> values);
Tensor load_tensor(const std::filesystem::path& path);

// Convenience wrappers for the domain types.
void save_patch_grid(const std::filesystem::path& stem, const PatchGrid& grid);
PatchGrid load_patch_grid(const std::filesystem::path& stem);

void save_matrix(const std::filesystem::path& path, const RowMatrix& m);
RowMatrix load_matrix(const std::filesystem::path& path);

void save_score_map(const std::filesystem::path& path, const ScoreMap& map);
ScoreMap load_score_map(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace m3dm
