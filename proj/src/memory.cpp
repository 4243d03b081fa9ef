#include "m3dm/memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "json.hpp"
#include "m3dm/error.hpp"
#include "m3dm/random.hpp"
#include "m3dm/tensor_io.hpp"

namespace m3dm::memory {
namespace {

using nlohmann::json;

double squared_distance(const RowMatrix& vectors, Eigen::Index row, const double* q) {
  return (vectors.row(row) - Eigen::Map<const Eigen::RowVectorXd>(q, vectors.cols())).squaredNorm();
}

// Nearest bank row to q; ties keep the lower index.
Neighbor nearest_one(const RowMatrix& vectors, const double* q) {
  Neighbor best{std::numeric_limits<double>::infinity(), 0};
  for (Eigen::Index k = 0; k < vectors.rows(); ++k) {
    const double d2 = squared_distance(vectors, k, q);
    if (d2 < best.distance) best = {d2, static_cast<std::size_t>(k)};
  }
  best.distance = std::sqrt(best.distance);
  return best;
}

}  // namespace

FeatureSet collect_features(std::span<const PatchGrid> grids) {
  FeatureSet out;
  std::size_t total = 0;
  int dim = -1;
  for (const auto& g : grids) {
    require(dim < 0 || g.dim == dim, ErrorKind::BadArity, "grids differ in feature dimension");
    dim = g.dim;
    total += g.occupied_count();
  }
  out.vectors.resize(static_cast<Eigen::Index>(total), std::max(dim, 0));
  Eigen::Index row = 0;
  for (std::size_t s = 0; s < grids.size(); ++s) {
    for (std::size_t c = 0; c < grids[s].cell_count(); ++c) {
      if (!grids[s].occupancy[c]) continue;
      const auto cell = grids[s].cell(c);
      for (int d = 0; d < dim; ++d) out.vectors(row, d) = cell[d];
      out.source.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(c)});
      ++row;
    }
  }
  return out;
}

std::size_t coreset_size(std::size_t n, double ratio) {
  const double k = std::ceil(ratio * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(k, 1.0)), 1, std::max<std::size_t>(n, 1));
}

MemoryBank coreset_select(const FeatureSet& features, double ratio, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(features.vectors.rows());
  require(n > 0, ErrorKind::EmptyData, "coreset selection over an empty feature set");
  require(ratio > 0.0 && ratio <= 1.0, ErrorKind::BadParam, "coreset ratio must lie in (0, 1]");
  require(features.source.size() == n, ErrorKind::BadArity, "provenance count mismatch");
  require(features.vectors.allFinite(), ErrorKind::NonFinite, "non-finite feature vector");

  const std::size_t k = coreset_size(n, ratio);
  std::vector<std::size_t> picked;
  picked.reserve(k);
  if (k == n) {
    for (std::size_t i = 0; i < n; ++i) picked.push_back(i);
  } else {
    Rng rng(seed);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::vector<std::uint8_t> taken(n, 0);
    std::size_t current = rng.uniform_index(n);
    for (std::size_t step = 0; step < k; ++step) {
      picked.push_back(current);
      taken[current] = 1;
      const double* c = features.vectors.row(static_cast<Eigen::Index>(current)).data();
      std::size_t next = 0;
      double best = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        min_d2[i] = std::min(min_d2[i], squared_distance(features.vectors, static_cast<Eigen::Index>(i), c));
        if (min_d2[i] > best) {
          best = min_d2[i];
          next = i;
        }
      }
      current = next;
    }
  }

  MemoryBank bank;
  bank.coreset_ratio = ratio;
  bank.seed = seed;
  bank.vectors.resize(static_cast<Eigen::Index>(k), features.vectors.cols());
  for (std::size_t i = 0; i < k; ++i) {
    bank.vectors.row(static_cast<Eigen::Index>(i)) = features.vectors.row(static_cast<Eigen::Index>(picked[i]));
    bank.source.push_back(features.source[picked[i]]);
  }
  return bank;
}

std::vector<Neighbor> nearest(const MemoryBank& bank, std::span<const double> query, std::size_t k) {
  require(query.size() == static_cast<std::size_t>(bank.dim()), ErrorKind::BadArity,
          "query dimension does not match the bank");
  require(k >= 1 && k <= bank.size(), ErrorKind::BadArity,
          "k=" + std::to_string(k) + " outside [1, " + std::to_string(bank.size()) + "]");
  std::vector<Neighbor> all(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) {
    all[i] = {squared_distance(bank.vectors, static_cast<Eigen::Index>(i), query.data()), i};
  }
  auto less = [](const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
  };
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k), all.end(), less);
  all.resize(k);
  for (auto& n : all) n.distance = std::sqrt(n.distance);
  return all;
}

ScoreMap psi_map(const MemoryBank& bank, const PatchGrid& grid) {
  require(bank.size() > 0, ErrorKind::EmptyData, "empty memory bank");
  require(grid.dim == bank.dim(), ErrorKind::BadArity, "grid dimension does not match the bank");
  ScoreMap out(grid.rows, grid.cols);
  std::vector<double> q(static_cast<std::size_t>(grid.dim));
  for (std::size_t c = 0; c < grid.cell_count(); ++c) {
    if (!grid.occupancy[c]) continue;
    const auto cell = grid.cell(c);
    std::copy(cell.begin(), cell.end(), q.begin());
    out.values[c] = nearest_one(bank.vectors, q.data()).distance;
  }
  return out;
}

PhiDetail phi_from_psi(const MemoryBank& bank, const PatchGrid& grid, const ScoreMap& psi,
                       std::size_t b) {
  require(b >= 1 && b <= bank.size(), ErrorKind::BadArity, "b must lie in [1, bank size]");
  bool any = false;
  PhiDetail d;
  for (std::size_t c = 0; c < grid.cell_count(); ++c) {
    if (!grid.occupancy[c]) continue;
    if (!any || psi.values[c] > d.s_star) {
      d.s_star = psi.values[c];
      d.patch = c;
      any = true;
    }
  }
  require(any, ErrorKind::EmptyData, "grid has no occupied patch");

  std::vector<double> f(static_cast<std::size_t>(grid.dim));
  const auto cell = grid.cell(d.patch);
  std::copy(cell.begin(), cell.end(), f.begin());
  d.bank_index = nearest_one(bank.vectors, f.data()).index;

  // Neighbourhood of m*: m* itself plus its b-1 nearest other bank vectors.
  std::vector<double> m_star(bank.vectors.row(static_cast<Eigen::Index>(d.bank_index)).data(),
                             bank.vectors.row(static_cast<Eigen::Index>(d.bank_index)).data() + bank.dim());
  std::vector<std::size_t> hood{d.bank_index};
  if (b > 1) {
    for (const auto& n : nearest(bank, m_star, std::min(b, bank.size()))) {
      if (n.index != d.bank_index && hood.size() < b) hood.push_back(n.index);
    }
  }
  // exp(d - s*) with d >= s* since m* is the nearest bank vector to f*.
  double denom = 0.0;
  for (auto idx : hood) {
    const double dist = std::sqrt(squared_distance(bank.vectors, static_cast<Eigen::Index>(idx), f.data()));
    denom += std::exp(dist - d.s_star);
  }
  d.eta = 1.0 - 1.0 / denom;
  d.score = d.eta * d.s_star;
  return d;
}

PhiDetail phi_detail(const MemoryBank& bank, const PatchGrid& grid, std::size_t b) {
  return phi_from_psi(bank, grid, psi_map(bank, grid), b);
}

double phi_score(const MemoryBank& bank, const PatchGrid& grid, std::size_t b) {
  return phi_detail(bank, grid, b).score;
}

namespace {

std::vector<double> gaussian_kernel(double sigma, int& radius) {
  radius = static_cast<int>(std::ceil(4.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  return k;
}

// Blur along one axis with per-position renormalisation over in-bounds taps.
void blur_axis(std::vector<double>& data, int rows, int cols, bool along_rows,
               const std::vector<double>& kernel, int radius) {
  std::vector<double> out(data.size());
  const int len = along_rows ? cols : rows;
  const int lines = along_rows ? rows : cols;
  for (int line = 0; line < lines; ++line) {
    for (int i = 0; i < len; ++i) {
      double acc = 0.0, norm = 0.0;
      for (int t = std::max(0, i - radius); t <= std::min(len - 1, i + radius); ++t) {
        const double w = kernel[t - i + radius];
        const std::size_t idx = along_rows ? static_cast<std::size_t>(line) * cols + t
                                           : static_cast<std::size_t>(t) * cols + line;
        acc += w * data[idx];
        norm += w;
      }
      const std::size_t dst = along_rows ? static_cast<std::size_t>(line) * cols + i
                                         : static_cast<std::size_t>(i) * cols + line;
      out[dst] = acc / norm;
    }
  }
  data.swap(out);
}

}  // namespace

ScoreMap upsample_smooth(const ScoreMap& map, int h, int w, double sigma) {
  require(map.rows > 0 && map.cols > 0 && h >= map.rows && w >= map.cols, ErrorKind::BadArity,
          "upsample target must be at least the source size");
  require(sigma >= 0.0, ErrorKind::BadParam, "sigma must be non-negative");
  ScoreMap out(h, w);
  for (int y = 0; y < h; ++y) {
    const double sy = std::clamp((y + 0.5) * map.rows / h - 0.5, 0.0, map.rows - 1.0);
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, map.rows - 1);
    const double fy = sy - y0;
    for (int x = 0; x < w; ++x) {
      const double sx = std::clamp((x + 0.5) * map.cols / w - 0.5, 0.0, map.cols - 1.0);
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, map.cols - 1);
      const double fx = sx - x0;
      out.at(y, x) = (1 - fy) * ((1 - fx) * map.at(y0, x0) + fx * map.at(y0, x1)) +
                     fy * ((1 - fx) * map.at(y1, x0) + fx * map.at(y1, x1));
    }
  }
  if (sigma > 0.0) {
    int radius = 0;
    const auto kernel = gaussian_kernel(sigma, radius);
    blur_axis(out.values, h, w, true, kernel, radius);
    blur_axis(out.values, h, w, false, kernel, radius);
  }
  return out;
}

void save_bank(const std::filesystem::path& dir, const MemoryBank& bank) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["format"] = "m3dm-bank";
  manifest["version"] = 1;
  manifest["D"] = bank.dim();
  manifest["K"] = bank.size();
  manifest["ratio"] = bank.coreset_ratio;
  manifest["seed"] = bank.seed;
  json prov = json::array();
  for (const auto& p : bank.source) prov.push_back({p.scene, p.patch});
  manifest["provenance"] = std::move(prov);
  const std::string text = manifest.dump() + "\n";
  write_file(dir / "manifest.json",
             std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  save_matrix(dir / "vectors.t", bank.vectors);
}

MemoryBank load_bank(const std::filesystem::path& dir) {
  const auto bytes = read_file(dir / "manifest.json");
  MemoryBank bank;
  try {
    const json manifest = json::parse(bytes.begin(), bytes.end());
    require(manifest.value("format", std::string()) == "m3dm-bank", ErrorKind::FormatError,
            "not a memory bank: " + dir.string());
    bank.coreset_ratio = manifest.at("ratio").get<double>();
    bank.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& p : manifest.at("provenance")) {
      bank.source.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
    }
    bank.vectors = load_matrix(dir / "vectors.t");
    require(bank.vectors.rows() == manifest.at("K").get<Eigen::Index>() &&
                bank.vectors.cols() == manifest.at("D").get<Eigen::Index>() &&
                bank.source.size() == bank.size(),
            ErrorKind::FormatError, "bank manifest disagrees with vectors in " + dir.string());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::FormatError, "bank manifest: " + std::string(e.what()));
  }
  return bank;
}

}  // namespace m3dm::memory
