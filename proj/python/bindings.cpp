#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "commands.hpp"
#include "m3dm/decision.hpp"
#include "m3dm/error.hpp"
#include "m3dm/fusion.hpp"
#include "m3dm/geometry.hpp"
#include "m3dm/memory.hpp"
#include "m3dm/metrics.hpp"
#include "m3dm/synthetic.hpp"
#include "m3dm/tensor_io.hpp"

namespace py = pybind11;
using namespace m3dm;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> to_points(const DoubleArray& a) {
  require(a.ndim() == 2 && a.shape(1) == 3, ErrorKind::BadArity, "expected an N x 3 array");
  std::vector<Vec3> out(static_cast<std::size_t>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (py::ssize_t i = 0; i < a.shape(0); ++i) out[static_cast<std::size_t>(i)] = Vec3(r(i, 0), r(i, 1), r(i, 2));
  return out;
}

PatchGrid to_grid(const FloatArray& features, const std::optional<ByteArray>& occupancy) {
  require(features.ndim() == 3, ErrorKind::BadArity, "expected an H x W x D feature array");
  PatchGrid g(static_cast<int>(features.shape(0)), static_cast<int>(features.shape(1)),
              static_cast<int>(features.shape(2)));
  std::copy_n(features.data(), g.data.size(), g.data.begin());
  if (occupancy) {
    require(occupancy->size() == static_cast<py::ssize_t>(g.cell_count()), ErrorKind::BadArity,
            "occupancy must be H x W");
    for (std::size_t c = 0; c < g.cell_count(); ++c) g.occupancy[c] = occupancy->data()[c] != 0;
  } else {
    std::fill(g.occupancy.begin(), g.occupancy.end(), 1);
  }
  return g;
}

memory::MemoryBank to_bank(const RowMatrix& vectors) {
  memory::MemoryBank bank;
  bank.vectors = vectors;
  for (Eigen::Index i = 0; i < vectors.rows(); ++i) bank.source.push_back({0, static_cast<std::uint32_t>(i)});
  return bank;
}

py::array_t<double> to_array(const ScoreMap& m) {
  py::array_t<double> out({m.rows, m.cols});
  std::copy(m.values.begin(), m.values.end(), out.mutable_data());
  return out;
}

ScoreMap to_map(const DoubleArray& a) {
  require(a.ndim() == 2, ErrorKind::BadArity, "expected an H x W array");
  ScoreMap m(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
  std::copy_n(a.data(), m.values.size(), m.values.begin());
  return m;
}

std::vector<std::uint8_t> to_mask(const ByteArray& a) { return {a.data(), a.data() + a.size()}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal 3D anomaly detection core";
  py::register_exception<Error>(m, "Error", PyExc_ValueError);

  m.def("farthest_point_sampling",
        [](const DoubleArray& points, std::size_t count, std::size_t seed_index) {
          return geometry::farthest_point_sampling(to_points(points), count, seed_index);
        },
        py::arg("points"), py::arg("count"), py::arg("seed_index") = 0);

  m.def("fit_plane",
        [](const DoubleArray& points, double dist_thresh, int iters, std::uint64_t seed) {
          const auto fit = geometry::fit_plane_ransac(to_points(points), dist_thresh, iters, seed);
          return py::make_tuple(Eigen::Vector3d(fit.plane.normal), fit.plane.offset, fit.inliers);
        },
        py::arg("points"), py::arg("dist_thresh") = 0.005, py::arg("iters") = 1000, py::arg("seed") = 0);

  m.def("interpolate",
        [](const RowMatrix& features, const DoubleArray& centers, const DoubleArray& points, double eps,
           std::size_t neighbors) {
          return geometry::interpolate_to_points(features, to_points(centers), to_points(points), eps, neighbors);
        },
        py::arg("features"), py::arg("centers"), py::arg("points"), py::arg("eps") = 1e-8,
        py::arg("neighbors") = 0);

  m.def("coreset",
        [](const RowMatrix& vectors, double ratio, std::uint64_t seed) {
          memory::FeatureSet f;
          f.vectors = vectors;
          for (Eigen::Index i = 0; i < vectors.rows(); ++i) f.source.push_back({0, static_cast<std::uint32_t>(i)});
          const auto bank = memory::coreset_select(f, ratio, seed);
          std::vector<std::uint32_t> picked;
          for (const auto& s : bank.source) picked.push_back(s.patch);
          return picked;
        },
        py::arg("vectors"), py::arg("ratio"), py::arg("seed") = 0);

  m.def("psi_map",
        [](const RowMatrix& bank, const FloatArray& features, const std::optional<ByteArray>& occupancy) {
          return to_array(memory::psi_map(to_bank(bank), to_grid(features, occupancy)));
        },
        py::arg("bank"), py::arg("features"), py::arg("occupancy") = py::none());

  m.def("phi_score",
        [](const RowMatrix& bank, const FloatArray& features, const std::optional<ByteArray>& occupancy,
           std::size_t b) {
          const auto d = memory::phi_detail(to_bank(bank), to_grid(features, occupancy), b);
          py::dict out;
          out["score"] = d.score;
          out["s_star"] = d.s_star;
          out["eta"] = d.eta;
          out["patch"] = d.patch;
          out["bank_index"] = d.bank_index;
          return out;
        },
        py::arg("bank"), py::arg("features"), py::arg("occupancy") = py::none(), py::arg("b") = 3);

  m.def("upsample_smooth",
        [](const DoubleArray& map, int h, int w, double sigma) {
          return to_array(memory::upsample_smooth(to_map(map), h, w, sigma));
        },
        py::arg("map"), py::arg("height"), py::arg("width"), py::arg("sigma") = 4.0);

  m.def("infonce_loss",
        [](const RowMatrix& h_rgb, const RowMatrix& h_pt, double temperature) {
          const auto r = fusion::infonce_loss(h_rgb, h_pt, temperature);
          return py::make_tuple(r.loss, r.grad_rgb, r.grad_pt);
        },
        py::arg("h_rgb"), py::arg("h_pt"), py::arg("temperature") = 0.07);

  py::class_<decision::DecisionHead>(m, "DecisionHead")
      .def_readonly("w", &decision::DecisionHead::w)
      .def_readonly("rho", &decision::DecisionHead::rho)
      .def_readonly("nu", &decision::DecisionHead::nu)
      .def("score",
           [](const decision::DecisionHead& h, const std::vector<double>& x) { return decision::ocsvm_score(h, x); })
      .def("save", [](const decision::DecisionHead& h, const std::string& path) { decision::save_head(path, h); })
      .def_static("load", [](const std::string& path) { return decision::load_head(path); });

  m.def("ocsvm_train",
        [](const RowMatrix& samples, double nu, double lr, int epochs, double margin, std::uint64_t seed) {
          decision::OcsvmConfig cfg{nu, lr, epochs, margin, seed};
          std::vector<double> objective;
          auto head = decision::ocsvm_train(samples, cfg, &objective);
          return py::make_tuple(std::move(head), std::move(objective));
        },
        py::arg("samples"), py::arg("nu") = 0.5, py::arg("lr") = 1e-4, py::arg("epochs") = 1000,
        py::arg("margin") = 3.0, py::arg("seed") = 0);

  m.def("auroc",
        [](const std::vector<double>& scores, const std::vector<int>& labels) { return metrics::auroc(scores, labels); },
        py::arg("scores"), py::arg("labels"));

  m.def("aupro",
        [](const std::vector<DoubleArray>& maps, const std::vector<ByteArray>& masks, double fpr_limit) {
          std::vector<ScoreMap> ms;
          std::vector<std::vector<std::uint8_t>> ks;
          for (const auto& a : maps) ms.push_back(to_map(a));
          for (const auto& k : masks) ks.push_back(to_mask(k));
          return metrics::aupro(ms, ks, fpr_limit);
        },
        py::arg("maps"), py::arg("masks"), py::arg("fpr_limit") = 0.3);

  m.def("read_tensor", [](const std::string& path) {
    const auto t = load_tensor(path);
    std::vector<py::ssize_t> shape(t.dims.begin(), t.dims.end());
    py::array_t<float> out(shape);
    std::copy(t.values.begin(), t.values.end(), out.mutable_data());
    return out;
  });

  m.def("write_tensor", [](const std::string& path, const FloatArray& a) {
    std::vector<std::uint32_t> dims(a.shape(), a.shape() + a.ndim());
    save_tensor(path, dims, std::span(a.data(), static_cast<std::size_t>(a.size())));
  });

  m.def("run", [](const std::vector<std::string>& args) { return cli::run(args); }, py::arg("args"),
        "Runs a command-line subcommand and returns its exit code.");
}
