#pragma once

// Synthetic multimodal dataset: a raised product with a smooth random height
// field and colour field on a flat background plane. Anomalies are elliptical
// footprints carrying a bump/dent (geometry), a colour blotch (color) or both.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "m3dm/random.hpp"
#include "m3dm/types.hpp"

namespace m3dm::synthetic {

enum class AnomalyKind { None, Geometry, Color, Joint };

const char* to_string(AnomalyKind kind) noexcept;
AnomalyKind anomaly_kind_from_string(const std::string& name);

struct DatasetSpec {
  int n_train = 30;
  int n_test_good = 30;
  int n_test_anomalous = 30;
  int image_size = 64;
  std::vector<AnomalyKind> anomaly_kinds = {AnomalyKind::Geometry, AnomalyKind::Color,
                                            AnomalyKind::Joint};
  std::uint64_t seed = 0;

  void validate() const;
};

struct Wave {
  double amplitude;
  double kx;  // radians per image width
  double ky;
  double phase;
};

struct SceneParams {
  std::vector<Wave> height_waves;    // metres
  std::vector<Wave> color_waves[3];  // per channel
  double base_color[3];
};

struct AnomalyParams {
  double cy, cx;       // centre, pixels
  double ry, rx;       // semi-axes, pixels
  double angle;        // radians
  double amplitude;    // metres, signed
  double color[3];     // blotch colour
};

SceneParams draw_scene_params(Rng& rng);
AnomalyParams draw_anomaly_params(Rng& rng, int image_size);

inline constexpr double kPlaneDepth = 0.5;
inline constexpr double kObjectHeight = 0.02;
inline constexpr double kSceneWidth = 0.1;

/// Renders the scene; kind selects which parts of the anomaly are applied. The
/// returned mask marks the anomaly footprint (empty for AnomalyKind::None).
OrganizedScene render_scene(const SceneParams& scene, int image_size, AnomalyKind kind,
                            const AnomalyParams* anomaly, std::vector<std::uint8_t>* mask);

/// True when (y, x) lies on the product footprint.
bool on_object(double y, double x, int image_size);

enum class Split { Train, Test };

struct Sample {
  std::string id;
  Split split = Split::Train;
  int label = 0;
  AnomalyKind kind = AnomalyKind::None;
  OrganizedScene scene;
  std::vector<std::uint8_t> mask;  // H x W, empty for train samples
};

/// Every sample draws from its own seed derived from (seed, group, index), so
/// the training and nominal test scenes do not depend on the anomaly settings.
std::vector<Sample> generate_synthetic(const DatasetSpec& spec);

// Dataset directory layout:
//   manifest.json
//   train/<id>_coords.t, train/<id>_rgb.t
//   test/<id>_coords.t, test/<id>_rgb.t, test/<id>_mask.t

struct ManifestEntry {
  std::string id;
  Split split = Split::Train;
  int label = 0;
  AnomalyKind kind = AnomalyKind::None;
};

struct Manifest {
  int image_size = 0;
  std::uint64_t seed = 0;
  std::vector<ManifestEntry> entries;
};

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                   const std::vector<Sample>& samples);
Manifest read_manifest(const std::filesystem::path& dir);
/// Validity is recovered from coordinates: a pixel is valid iff not (0,0,0).
OrganizedScene load_scene(const std::filesystem::path& dir, const ManifestEntry& entry);
std::vector<std::uint8_t> load_mask(const std::filesystem::path& dir, const ManifestEntry& entry);

}  // namespace m3dm::synthetic
