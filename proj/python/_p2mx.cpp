#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "p2mx/error.hpp"
#include "p2mx/pipeline.hpp"

namespace py = pybind11;
using namespace p2mx;

namespace {

using Points = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> to_points(const Points& a) {
  if (a.ndim() != 2 || a.shape(1) != 3)
    throw Error(ErrorCode::kShape, "expected an (n, 3) array of points");
  std::vector<Vec3> out(static_cast<std::size_t>(a.shape(0)));
  auto r = a.unchecked<2>();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = {r(i, 0), r(i, 1), r(i, 2)};
  return out;
}

Points from_points(const std::vector<Vec3>& pts) {
  Points out({static_cast<py::ssize_t>(pts.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (int k = 0; k < 3; ++k) w(i, k) = pts[i][k];
  return out;
}

py::array_t<std::uint32_t> from_faces(const std::vector<Face>& faces) {
  py::array_t<std::uint32_t> out({static_cast<py::ssize_t>(faces.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < faces.size(); ++i)
    for (int k = 0; k < 3; ++k) w(i, k) = faces[i][k];
  return out;
}

Mesh to_mesh(const Points& vertices, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& faces) {
  if (faces.ndim() != 2 || faces.shape(1) != 3) throw Error(ErrorCode::kShape, "expected an (m, 3) array of faces");
  std::vector<Face> f(static_cast<std::size_t>(faces.shape(0)));
  auto r = faces.unchecked<2>();
  for (std::size_t i = 0; i < f.size(); ++i)
    for (int k = 0; k < 3; ++k) {
      if (r(i, k) < 0) throw Error(ErrorCode::kDomain, "negative face index");
      f[i][k] = static_cast<Index>(r(i, k));
    }
  return Mesh(to_points(vertices), std::move(f));
}

py::tuple mesh_arrays(const Mesh& m) { return py::make_tuple(from_points(m.vertices()), from_faces(m.faces())); }

py::dict row_dict(const EvalRow& r) {
  py::dict d;
  d["scene_id"] = r.scene_id;
  d["cd"] = r.cd;
  d["f_tau"] = r.f_tau;
  d["f_2tau"] = r.f_2tau;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["n_pred"] = r.n_pred;
  d["n_gt"] = r.n_gt;
  return d;
}

}  // namespace

PYBIND11_MODULE(_p2mx, m) {
  m.doc() = "Multi-view mesh refinement core";

  static py::exception<Error> error_type(m, "P2mxError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object exc = py::handle(error_type.ptr())(std::string(error_code_name(e.code())) + ": " + e.what());
      exc.attr("code") = std::string(error_code_name(e.code()));
      PyErr_SetObject(error_type.ptr(), exc.ptr());
    }
  });

  m.def("icosahedron", [](int level) { return mesh_arrays(icosahedron(level)); }, py::arg("level"),
        "Unit icosphere as (vertices, faces).");
  m.def(
      "ellipsoid",
      [](std::array<double, 3> radii, int level) { return mesh_arrays(ellipsoid({radii[0], radii[1], radii[2]}, level)); },
      py::arg("radii"), py::arg("level"));
  m.def("load_obj", [](const fs::path& p) { return mesh_arrays(load_obj(p)); }, py::arg("path"));
  m.def(
      "save_obj", [](const Points& v, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& f,
                     const fs::path& p) { save_obj(to_mesh(v, f), p); },
      py::arg("vertices"), py::arg("faces"), py::arg("path"));
  m.def(
      "sample_surface",
      [](const Points& v, const py::array_t<std::int64_t, py::array::c_style | py::array::forcecast>& f, std::size_t n,
         std::uint64_t seed) {
        Rng rng(seed);
        return from_points(resample_mesh(to_mesh(v, f), n, rng).points);
      },
      py::arg("vertices"), py::arg("faces"), py::arg("n"), py::arg("seed") = 1,
      "Area-proportional surface samples.");

  m.def(
      "chamfer_distance",
      [](const Points& a, const Points& b) { return chamfer_distance({to_points(a), {}}, {to_points(b), {}}); },
      py::arg("a"), py::arg("b"));
  m.def(
      "f_score",
      [](const Points& pred, const Points& gt, double tau) {
        const FScore s = f_score({to_points(pred), {}}, {to_points(gt), {}}, tau);
        py::dict d;
        d["f_tau"] = s.f_tau;
        d["f_2tau"] = s.f_2tau;
        d["precision"] = s.precision;
        d["recall"] = s.recall;
        return d;
      },
      py::arg("pred"), py::arg("gt"), py::arg("tau") = 1e-4);

  m.def(
      "synth",
      [](const std::string& spec, const fs::path& out, std::uint64_t seed) {
        return synth_dataset(parse_synth_spec(spec), out, seed);
      },
      py::arg("spec"), py::arg("out"), py::arg("seed") = 1, "Render a dataset from key = value spec text.");
  m.def(
      "train",
      [](const std::string& config) {
        const RunConfig c = parse_run_config(config);
        TrainSummary s;
        {
          py::gil_scoped_release release;
          s = train(c);
        }
        py::dict d;
        d["checkpoint"] = s.checkpoint;
        d["loss_curve"] = s.loss_curve;
        d["first_step"] = s.first_step;
        d["steps"] = s.steps;
        return d;
      },
      py::arg("config"), "Train from key = value run config text.");
  m.def(
      "evaluate",
      [](const fs::path& ckpt, const fs::path& data, std::size_t views, const std::string& split, std::size_t samples,
         double tau, std::uint64_t seed) {
        EvalOptions o;
        o.views = views;
        o.split = split;
        o.metric.samples = samples;
        o.metric.tau = tau;
        o.seed = seed;
        std::vector<EvalRow> rows;
        {
          py::gil_scoped_release release;
          rows = evaluate(ckpt, data, o);
        }
        py::list out;
        for (const auto& r : rows) out.append(row_dict(r));
        return out;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("views") = 3, py::arg("split") = "test",
      py::arg("samples") = 10000, py::arg("tau") = 1e-4, py::arg("seed") = 1);
}
