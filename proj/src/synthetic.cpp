#include "m3dm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "json.hpp"
#include "m3dm/error.hpp"
#include "m3dm/tensor_io.hpp"

namespace m3dm::synthetic {
namespace {

using nlohmann::json;

constexpr double kFootprintY = 0.30;  // semi-axes as a fraction of the image size
constexpr double kFootprintX = 0.36;
constexpr double kBlotchStrength = 0.85;
constexpr float kBackgroundGray = 0.45f;

Wave draw_wave(Rng& rng, double amp_lo, double amp_hi, double wl_lo, double wl_hi) {
  const double amplitude = rng.uniform(amp_lo, amp_hi);
  const double wavelength = rng.uniform(wl_lo, wl_hi);
  const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double k = 2.0 * std::numbers::pi / wavelength;
  return {amplitude, k * std::cos(dir), k * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi)};
}

double eval_waves(const std::vector<Wave>& waves, double u, double v) {
  double s = 0.0;
  for (const auto& w : waves) s += w.amplitude * std::cos(w.kx * u + w.ky * v + w.phase);
  return s;
}

std::string make_id(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%03d", prefix, i);
  return buf;
}

const char* split_name(Split s) { return s == Split::Train ? "train" : "test"; }

}  // namespace

const char* to_string(AnomalyKind kind) noexcept {
  switch (kind) {
    case AnomalyKind::None: return "none";
    case AnomalyKind::Geometry: return "geometry";
    case AnomalyKind::Color: return "color";
    case AnomalyKind::Joint: return "joint";
  }
  return "none";
}

AnomalyKind anomaly_kind_from_string(const std::string& name) {
  if (name == "none") return AnomalyKind::None;
  if (name == "geometry") return AnomalyKind::Geometry;
  if (name == "color") return AnomalyKind::Color;
  if (name == "joint") return AnomalyKind::Joint;
  throw Error(ErrorKind::BadParam, "unknown anomaly kind '" + name + "'");
}

void DatasetSpec::validate() const {
  require(n_train >= 0 && n_test_good >= 0 && n_test_anomalous >= 0, ErrorKind::BadParam,
          "sample counts must be non-negative");
  require(image_size >= 32, ErrorKind::BadParam, "image_size must be at least 32");
  require(n_test_anomalous == 0 || !anomaly_kinds.empty(), ErrorKind::BadParam,
          "anomalous samples requested without any anomaly kind");
  for (auto k : anomaly_kinds) {
    require(k != AnomalyKind::None, ErrorKind::BadParam, "'none' is not an anomaly kind");
  }
}

bool on_object(double y, double x, int image_size) {
  const double c = image_size / 2.0;
  const double dy = (y - c) / (kFootprintY * image_size);
  const double dx = (x - c) / (kFootprintX * image_size);
  return dy * dy + dx * dx <= 1.0;
}

SceneParams draw_scene_params(Rng& rng) {
  SceneParams p;
  for (int i = 0; i < 3; ++i) p.height_waves.push_back(draw_wave(rng, 0.0005, 0.0015, 0.5, 1.2));
  const double base[3] = {0.62, 0.45, 0.25};
  for (int c = 0; c < 3; ++c) {
    p.base_color[c] = base[c] + rng.uniform(-0.03, 0.03);
    for (int i = 0; i < 2; ++i) p.color_waves[c].push_back(draw_wave(rng, 0.01, 0.04, 0.4, 1.0));
  }
  return p;
}

AnomalyParams draw_anomaly_params(Rng& rng, int image_size) {
  AnomalyParams a{};
  const double major = rng.uniform(0.05, 0.15) * image_size;
  a.rx = major;
  a.ry = major * rng.uniform(0.6, 1.0);
  a.angle = rng.uniform(0.0, std::numbers::pi);
  // The whole footprint must sit on the product.
  const double c = image_size / 2.0;
  const double ay = kFootprintY * image_size - major - 1.0;
  const double ax = kFootprintX * image_size - major - 1.0;
  for (;;) {
    const double u = rng.uniform(-1.0, 1.0);
    const double v = rng.uniform(-1.0, 1.0);
    if (u * u + v * v > 1.0) continue;
    a.cy = c + v * ay;
    a.cx = c + u * ax;
    break;
  }
  a.amplitude = (rng.uniform01() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.004, 0.008);
  const double base[3] = {0.62, 0.45, 0.25};
  for (;;) {
    double dist2 = 0.0;
    for (int k = 0; k < 3; ++k) {
      a.color[k] = rng.uniform01();
      dist2 += (a.color[k] - base[k]) * (a.color[k] - base[k]);
    }
    if (dist2 >= 0.3 * 0.3) break;
  }
  return a;
}

OrganizedScene render_scene(const SceneParams& params, int image_size, AnomalyKind kind,
                            const AnomalyParams* anomaly, std::vector<std::uint8_t>* mask) {
  require(kind == AnomalyKind::None || anomaly != nullptr, ErrorKind::BadParam,
          "anomalous render without anomaly parameters");
  const int n = image_size;
  const double pitch = kSceneWidth / n;
  OrganizedScene scene(n, n);
  if (mask) mask->assign(static_cast<std::size_t>(n) * n, 0);
  const bool geometry = kind == AnomalyKind::Geometry || kind == AnomalyKind::Joint;
  const bool color = kind == AnomalyKind::Color || kind == AnomalyKind::Joint;

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const std::size_t p = static_cast<std::size_t>(r) * n + c;
      const double yc = r + 0.5;
      const double xc = c + 0.5;
      const double u = xc / n;
      const double v = yc / n;
      const bool object = on_object(yc, xc, n);

      double window = 0.0;
      bool inside = false;
      if (kind != AnomalyKind::None) {
        const double dy = yc - anomaly->cy;
        const double dx = xc - anomaly->cx;
        const double cs = std::cos(anomaly->angle);
        const double sn = std::sin(anomaly->angle);
        const double a = (dx * cs + dy * sn) / anomaly->rx;
        const double b = (-dx * sn + dy * cs) / anomaly->ry;
        const double rho = std::sqrt(a * a + b * b);
        if (rho < 1.0) {
          inside = true;
          const double cw = std::cos(0.5 * std::numbers::pi * rho);
          window = cw * cw;
        }
      }
      if (mask && inside) (*mask)[p] = 1;

      double height = 0.0;
      double rgb[3] = {kBackgroundGray, kBackgroundGray, kBackgroundGray};
      if (object) {
        height = kObjectHeight + eval_waves(params.height_waves, u, v);
        for (int k = 0; k < 3; ++k) {
          rgb[k] = std::clamp(params.base_color[k] + eval_waves(params.color_waves[k], u, v), 0.0, 1.0);
        }
      }
      if (inside && geometry) height += anomaly->amplitude * window;
      if (inside && color) {
        const double alpha = kBlotchStrength * window;
        for (int k = 0; k < 3; ++k) rgb[k] = (1.0 - alpha) * rgb[k] + alpha * anomaly->color[k];
      }

      scene.valid[p] = 1;
      scene.coords[3 * p + 0] = static_cast<float>((xc - n / 2.0) * pitch);
      scene.coords[3 * p + 1] = static_cast<float>((yc - n / 2.0) * pitch);
      scene.coords[3 * p + 2] = static_cast<float>(kPlaneDepth - height);
      for (int k = 0; k < 3; ++k) scene.rgb[3 * p + k] = static_cast<float>(rgb[k]);
    }
  }
  return scene;
}

std::vector<Sample> generate_synthetic(const DatasetSpec& spec) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(spec.n_train + spec.n_test_good + spec.n_test_anomalous));

  for (int i = 0; i < spec.n_train; ++i) {
    Rng rng(derive_seed(spec.seed, "train", i));
    Sample s;
    s.id = make_id("train", i);
    s.split = Split::Train;
    s.scene = render_scene(draw_scene_params(rng), spec.image_size, AnomalyKind::None, nullptr, nullptr);
    out.push_back(std::move(s));
  }
  for (int i = 0; i < spec.n_test_good; ++i) {
    Rng rng(derive_seed(spec.seed, "test_good", i));
    Sample s;
    s.id = make_id("good", i);
    s.split = Split::Test;
    s.scene = render_scene(draw_scene_params(rng), spec.image_size, AnomalyKind::None, nullptr, &s.mask);
    out.push_back(std::move(s));
  }
  for (int i = 0; i < spec.n_test_anomalous; ++i) {
    // Anomalous scene i is the twin of good scene i with the defect added.
    Rng scene_rng(i < spec.n_test_good ? derive_seed(spec.seed, "test_good", i)
                                       : derive_seed(spec.seed, "test_anomalous", i));
    const SceneParams params = draw_scene_params(scene_rng);
    Rng anomaly_rng(derive_seed(spec.seed, "anomaly", i));
    const AnomalyParams anomaly = draw_anomaly_params(anomaly_rng, spec.image_size);
    Sample s;
    s.id = make_id("bad", i);
    s.split = Split::Test;
    s.label = 1;
    s.kind = spec.anomaly_kinds[static_cast<std::size_t>(i) % spec.anomaly_kinds.size()];
    s.scene = render_scene(params, spec.image_size, s.kind, &anomaly, &s.mask);
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec,
                   const std::vector<Sample>& samples) {
  json manifest;
  manifest["format"] = "m3dm-dataset";
  manifest["version"] = 1;
  manifest["image_size"] = spec.image_size;
  manifest["seed"] = spec.seed;
  manifest["samples"] = json::array();
  for (const auto& s : samples) {
    const auto base = dir / split_name(s.split) / s.id;
    const std::uint32_t dims3[] = {static_cast<std::uint32_t>(s.scene.height),
                                   static_cast<std::uint32_t>(s.scene.width), 3};
    save_tensor(base.string() + "_coords.t", dims3, s.scene.coords);
    save_tensor(base.string() + "_rgb.t", dims3, s.scene.rgb);
    if (s.split == Split::Test) {
      std::vector<float> m(s.mask.begin(), s.mask.end());
      save_tensor(base.string() + "_mask.t", std::span(dims3, 2), m);
    }
    manifest["samples"].push_back({{"id", s.id},
                                   {"split", split_name(s.split)},
                                   {"label", s.label},
                                   {"kind", to_string(s.kind)}});
  }
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Manifest read_manifest(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  json j;
  try {
    j = json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw Error(ErrorKind::FormatError, "manifest.json: " + std::string(e.what()));
  }
  Manifest m;
  try {
    m.image_size = j.at("image_size").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("samples")) {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      const auto split = e.at("split").get<std::string>();
      require(split == "train" || split == "test", ErrorKind::FormatError, "bad split " + split);
      entry.split = split == "train" ? Split::Train : Split::Test;
      entry.label = e.at("label").get<int>();
      entry.kind = anomaly_kind_from_string(e.value("kind", std::string("none")));
      m.entries.push_back(std::move(entry));
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::FormatError, "manifest.json: " + std::string(e.what()));
  }
  return m;
}

OrganizedScene load_scene(const std::filesystem::path& dir, const ManifestEntry& entry) {
  const auto base = (dir / split_name(entry.split) / entry.id).string();
  Tensor coords = load_tensor(base + "_coords.t");
  Tensor rgb = load_tensor(base + "_rgb.t");
  require(coords.dims.size() == 3 && coords.dims[2] == 3 && rgb.dims == coords.dims,
          ErrorKind::FormatError, "scene tensors of " + entry.id + " have mismatched shapes");
  OrganizedScene scene(static_cast<int>(coords.dims[0]), static_cast<int>(coords.dims[1]));
  scene.coords = std::move(coords.values);
  scene.rgb = std::move(rgb.values);
  for (std::size_t p = 0; p < scene.pixel_count(); ++p) {
    scene.valid[p] = (scene.coords[3 * p] != 0.0f || scene.coords[3 * p + 1] != 0.0f ||
                      scene.coords[3 * p + 2] != 0.0f);
  }
  return scene;
}

std::vector<std::uint8_t> load_mask(const std::filesystem::path& dir, const ManifestEntry& entry) {
  require(entry.split == Split::Test, ErrorKind::DataError, "training samples have no mask");
  Tensor t = load_tensor((dir / "test" / (entry.id + "_mask.t")).string());
  require(t.dims.size() == 2, ErrorKind::FormatError, "mask of " + entry.id + " is not 2-D");
  std::vector<std::uint8_t> mask(t.values.size());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = t.values[i] != 0.0f;
  return mask;
}

}  // namespace m3dm::synthetic
