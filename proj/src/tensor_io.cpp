#include "m3dm/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

#include "m3dm/error.hpp"

namespace m3dm {
namespace {

constexpr char kMagic[8] = {'M', '3', 'D', 'M', 'T', 'N', 'S', 'R'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  require(pos + 4 <= bytes.size(), ErrorKind::FormatError, "truncated tensor header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
  pos += 4;
  return v;
}

std::size_t product(std::span<const std::uint32_t> dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         [](std::size_t a, std::uint32_t b) { return a * b; });
}

}  // namespace

std::size_t Tensor::element_count() const noexcept { return product(dims); }

std::vector<std::uint8_t> encode_tensor(std::span<const std::uint32_t> dims,
                                        std::span<const float> values) {
  require(!dims.empty(), ErrorKind::BadArity, "tensor needs at least one dimension");
  require(product(dims) == values.size(), ErrorKind::SizeMismatch,
          "dims describe " + std::to_string(product(dims)) + " values, got " +
              std::to_string(values.size()));
  std::vector<std::uint8_t> out(kMagic, kMagic + 8);
  out.reserve(8 + 12 + 4 * dims.size() + 4 * values.size());
  put_u32(out, kTensorVersion);
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(out, d);
  put_u32(out, kDtypeFloat32);
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 8 && std::memcmp(bytes.data(), kMagic, 8) == 0, ErrorKind::FormatError,
          "bad tensor magic");
  std::size_t pos = 8;
  const std::uint32_t version = get_u32(bytes, pos);
  require(version == kTensorVersion, ErrorKind::FormatError,
          "unsupported tensor version " + std::to_string(version));
  const std::uint32_t ndim = get_u32(bytes, pos);
  require(ndim >= 1, ErrorKind::FormatError, "tensor with zero dimensions");
  Tensor t;
  t.dims.resize(ndim);
  for (auto& d : t.dims) d = get_u32(bytes, pos);
  const std::uint32_t dtype = get_u32(bytes, pos);
  require(dtype == kDtypeFloat32, ErrorKind::FormatError,
          "unsupported tensor dtype " + std::to_string(dtype));
  const std::size_t count = t.element_count();
  require(bytes.size() - pos == 4 * count, ErrorKind::SizeMismatch,
          "payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
              std::to_string(4 * count));
  t.values.resize(count);
  for (auto& v : t.values) v = std::bit_cast<float>(get_u32(bytes, pos));
  return t;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::IoError, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorKind::IoError, "short write to " + path.string());
}

void save_tensor(const std::filesystem::path& path, std::span<const std::uint32_t> dims,
                 std::span<const float> values) {
  write_file(path, encode_tensor(dims, values));
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_file(path)); }

void save_patch_grid(const std::filesystem::path& stem, const PatchGrid& grid) {
  const std::uint32_t dims[] = {static_cast<std::uint32_t>(grid.rows),
                                static_cast<std::uint32_t>(grid.cols),
                                static_cast<std::uint32_t>(grid.dim)};
  save_tensor(stem.string() + ".t", dims, grid.data);
  std::vector<float> occ(grid.occupancy.begin(), grid.occupancy.end());
  save_tensor(stem.string() + "_occ.t", std::span(dims, 2), occ);
}

PatchGrid load_patch_grid(const std::filesystem::path& stem) {
  Tensor data = load_tensor(stem.string() + ".t");
  Tensor occ = load_tensor(stem.string() + "_occ.t");
  require(data.dims.size() == 3 && occ.dims.size() == 2 && occ.dims[0] == data.dims[0] &&
              occ.dims[1] == data.dims[1],
          ErrorKind::FormatError, "patch grid tensors disagree in shape: " + stem.string());
  PatchGrid grid;
  grid.rows = static_cast<int>(data.dims[0]);
  grid.cols = static_cast<int>(data.dims[1]);
  grid.dim = static_cast<int>(data.dims[2]);
  grid.data = std::move(data.values);
  grid.occupancy.resize(occ.values.size());
  for (std::size_t i = 0; i < occ.values.size(); ++i) grid.occupancy[i] = occ.values[i] != 0.0f;
  return grid;
}

void save_matrix(const std::filesystem::path& path, const RowMatrix& m) {
  const std::uint32_t dims[] = {static_cast<std::uint32_t>(m.rows()),
                                static_cast<std::uint32_t>(m.cols())};
  std::vector<float> values(m.data(), m.data() + m.size());
  save_tensor(path, dims, values);
}

RowMatrix load_matrix(const std::filesystem::path& path) {
  Tensor t = load_tensor(path);
  require(t.dims.size() == 2, ErrorKind::FormatError, "expected a matrix in " + path.string());
  RowMatrix m(t.dims[0], t.dims[1]);
  for (std::size_t i = 0; i < t.values.size(); ++i) m.data()[i] = t.values[i];
  return m;
}

void save_score_map(const std::filesystem::path& path, const ScoreMap& map) {
  const std::uint32_t dims[] = {static_cast<std::uint32_t>(map.rows),
                                static_cast<std::uint32_t>(map.cols)};
  std::vector<float> values(map.values.begin(), map.values.end());
  save_tensor(path, dims, values);
}

ScoreMap load_score_map(const std::filesystem::path& path) {
  Tensor t = load_tensor(path);
  require(t.dims.size() == 2, ErrorKind::FormatError, "expected a 2-D map in " + path.string());
  ScoreMap map(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]));
  std::copy(t.values.begin(), t.values.end(), map.values.begin());
  return map;
}

}  // namespace m3dm
