#pragma once

// Memory banks of nominal patch features and the nearest-neighbour score
// functions computed against them.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "m3dm/types.hpp"

namespace m3dm::memory {

struct Provenance {
  std::uint32_t scene = 0;
  std::uint32_t patch = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Candidate vectors with their origin, before coreset reduction.
struct FeatureSet {
  RowMatrix vectors;
  std::vector<Provenance> source;
};

/// Occupied patches of every grid, scene-major then raster order.
FeatureSet collect_features(std::span<const PatchGrid> grids);

struct MemoryBank {
  RowMatrix vectors;  // K x D
  std::vector<Provenance> source;
  double coreset_ratio = 1.0;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t size() const noexcept { return static_cast<std::size_t>(vectors.rows()); }
  [[nodiscard]] int dim() const noexcept { return static_cast<int>(vectors.cols()); }
};

/// ceil(ratio * n), at least one.
std::size_t coreset_size(std::size_t n, double ratio);

/// Greedy k-center selection in feature space; the first pick is drawn from
/// the seed, ties go to the lowest index.
MemoryBank coreset_select(const FeatureSet& features, double ratio, std::uint64_t seed);

struct Neighbor {
  double distance = 0.0;
  std::size_t index = 0;
};

/// Exact k nearest bank vectors, ascending by distance then index.
std::vector<Neighbor> nearest(const MemoryBank& bank, std::span<const double> query, std::size_t k);

/// Distance from each occupied patch to its nearest bank vector; 0 elsewhere.
ScoreMap psi_map(const MemoryBank& bank, const PatchGrid& grid);

struct PhiDetail {
  double score = 0.0;
  double s_star = 0.0;  // largest nearest-neighbour distance over the grid
  double eta = 0.0;
  std::size_t patch = 0;       // f*
  std::size_t bank_index = 0;  // m*
};

/// Scene score eta * s*. eta = 1 - exp(s*) / sum over the b nearest bank
/// neighbours of m* (m* included) of exp(|f* - m|).
PhiDetail phi_detail(const MemoryBank& bank, const PatchGrid& grid, std::size_t b);
PhiDetail phi_from_psi(const MemoryBank& bank, const PatchGrid& grid, const ScoreMap& psi,
                       std::size_t b);
double phi_score(const MemoryBank& bank, const PatchGrid& grid, std::size_t b);

/// Bilinear upsample then Gaussian blur truncated at 4 sigma with the kernel
/// renormalised over in-bounds taps. sigma == 0 skips the blur.
ScoreMap upsample_smooth(const ScoreMap& map, int h, int w, double sigma);

/// Bank checkpoint: <dir>/manifest.json (D, K, ratio, seed, provenance) and
/// <dir>/vectors.t.
void save_bank(const std::filesystem::path& dir, const MemoryBank& bank);
MemoryBank load_bank(const std::filesystem::path& dir);

}  // namespace m3dm::memory
