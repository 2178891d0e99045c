#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>

#include "neuraldrop/dataprep.hpp"
#include "neuraldrop/image.hpp"
#include "neuraldrop/neural.hpp"
#include "neuraldrop/reconstruct.hpp"
#include "neuraldrop/simulate.hpp"
#include "neuraldrop/synth.hpp"

namespace py = pybind11;
using namespace nd;

namespace {

using Points = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<Vec2> to_points(const Points& a) {
  if (a.ndim() != 2 || a.shape(1) != 2) throw py::value_error("expected an (n, 2) array of points");
  std::vector<Vec2> pts(a.shape(0));
  auto r = a.unchecked<2>();
  for (py::ssize_t k = 0; k < a.shape(0); ++k) pts[k] = {r(k, 0), r(k, 1)};
  return pts;
}

py::array_t<double> from_points(std::span<const Vec2> pts) {
  py::array_t<double> a({static_cast<py::ssize_t>(pts.size()), py::ssize_t{2}});
  auto w = a.mutable_unchecked<2>();
  for (std::size_t k = 0; k < pts.size(); ++k) {
    w(k, 0) = pts[k].x;
    w(k, 1) = pts[k].y;
  }
  return a;
}

GradientProfile to_profile(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 1 || a.shape(0) != kControlPoints) throw py::value_error("expected 52 gradient magnitudes");
  GradientProfile g;
  for (int k = 0; k < kControlPoints; ++k) g.mags[k] = a.at(k);
  return g;
}

py::array_t<double> from_profile(const GradientProfile& g) {
  return py::array_t<double>(kControlPoints, g.mags.data());
}

Frame to_frame(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw py::value_error("expected a 2-D uint8 image");
  Frame f(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
  std::copy(a.data(), a.data() + a.size(), f.pixels.begin());
  return f;
}

py::array_t<std::uint8_t> from_frame(const Frame& f) {
  py::array_t<std::uint8_t> a({f.height, f.width});
  std::copy(f.pixels.begin(), f.pixels.end(), a.mutable_data());
  return a;
}

py::array_t<double> grid_values(const GridSpec& g, const std::vector<double>& v) {
  py::array_t<double> a({g.ny, g.nx});
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

// A scene plus the networks driving it.
class Simulation {
 public:
  explicit Simulation(const std::string& config_path) : cfg_(load_scene_config(config_path)) {
    if (cfg_.contour_model.empty() || cfg_.gradient_model.empty() || cfg_.breakage_model.empty())
      throw Error(ErrorCode::InvalidConfig, "scene needs contour, gradient and breakage models");
    predictor_ = std::make_unique<NeuralPredictor>(
        Models::load(cfg_.contour_model, cfg_.gradient_model, cfg_.breakage_model));
    if (!cfg_.database.empty()) db_ = database_from_tracks(load_tracks(cfg_.database), cfg_.database);
    scene_ = make_scene(cfg_, db_.empty() ? nullptr : &db_);
  }

  py::dict step() {
    const StepReport r = step_scene(scene_, *predictor_);
    py::dict d;
    d["splits"] = r.splits;
    d["merges"] = r.merges;
    d["exits"] = r.exits;
    d["failures"] = r.failures;
    return d;
  }

  int step_index() const { return scene_.step; }
  int configured_steps() const { return cfg_.steps; }
  double total_volume() const { return scene_.total_volume(); }

  py::list drops() const {
    py::list out;
    for (const auto& d : scene_.drops) {
      py::dict e;
      e["id"] = d.id;
      e["volume"] = d.volume;
      e["contour"] = d.current().contour;
      e["gradient"] = from_profile(d.current().gradient);
      out.append(e);
    }
    return out;
  }

 private:
  SceneConfig cfg_;
  InitDatabase db_;
  std::unique_ptr<NeuralPredictor> predictor_;
  Scene scene_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Contact-front prediction for liquid drops: geometry, data preparation, reconstruction and simulation";

  static py::exception<Error> error(m, "Error");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::object code = py::str(to_string(e.code()));
      PyErr_SetObject(error.ptr(), py::make_tuple(py::str(e.what()), code).ptr());
    }
  });

  m.attr("CONTROL_POINTS") = kControlPoints;
  m.attr("DENSE_SAMPLES") = kDenseSamples;

  py::class_<Contour>(m, "Contour")
      .def(py::init([](const Points& ctrl) { return Contour(to_points(ctrl)); }), py::arg("control_points"))
      .def_property_readonly("control_points", [](const Contour& c) { return from_points(c.ctrl()); })
      .def_property_readonly("dense", [](const Contour& c) { return from_points(c.dense()); })
      .def("eval", [](const Contour& c, double t) {
        const Vec2 p = c.eval(t);
        return py::make_tuple(p.x, p.y);
      })
      .def("centroid", [](const Contour& c) {
        const Vec2 p = c.centroid();
        return py::make_tuple(p.x, p.y);
      })
      .def("area", [](const Contour& c) { return enclosed_area(c); })
      .def("perimeter", &Contour::perimeter)
      .def("is_simple", &Contour::is_simple)
      .def("translated", [](const Contour& c, double dx, double dy) { return c.translated({dx, dy}); })
      .def("scaled", [](const Contour& c, double s) { return c.scaled(s, c.centroid()); })
      .def("contains", [](const Contour& c, double x, double y) { return point_in_contour(c, {x, y}); })
      .def("inward_normals", [](const Contour& c) {
        const auto n = inward_normals(c);
        return from_points(n);
      })
      .def("save", [](const Contour& c, const std::string& path) { save_contour(path, c); })
      .def_static("load", &load_contour)
      .def("__eq__", [](const Contour& a, const Contour& b) { return a == b; });

  m.def("fit_spline", [](const Points& samples) {
    const FitResult r = fit_spline(to_points(samples));
    return py::make_tuple(r.contour, r.rms);
  }, py::arg("samples"), "Least-squares closed B-spline fit; returns (contour, rms).");
  m.def("canonicalize", [](const Points& ctrl) { return canonicalize(to_points(ctrl)); });

  m.def("otsu_threshold", [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& img) {
    return otsu_threshold(to_frame(img));
  });
  m.def("extract_frame", [](const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& img) {
    const FrameContours fc = extract_frame(to_frame(img));
    py::list out;
    for (std::size_t k = 0; k < fc.contours.size(); ++k) out.append(py::make_tuple(fc.contours[k], from_profile(fc.profiles[k])));
    return out;
  }, "Contours and gradient profiles of every drop in an 8-bit frame.");

  m.def("synth_clip", [](const std::string& params_json, std::uint64_t seed, int index) {
    const SynthClip clip = synth_generate(synth_params_from_json(params_json), seed, index);
    py::list frames;
    for (const auto& f : clip.frames) frames.append(from_frame(f));
    return frames;
  }, py::arg("params_json") = "{}", py::arg("seed") = 1, py::arg("index") = 0, "Frames of one synthetic clip.");

  m.def("incline_scale", &incline_scale, py::arg("theta_deg"));

  m.def("find_split_pair", [](const Contour& c, double delta, int min_separation) {
    return find_split_pair(c, SplitConfig{delta, min_separation});
  }, py::arg("contour"), py::arg("delta") = -0.5, py::arg("min_separation") = 6);

  m.def("merge_contours", [](const Contour& a, const Contour& b) {
    GradientProfile g;
    g.mags.fill(1.0);
    return merge_drops(init_drop(a, g, 1.0, 1), init_drop(b, g, 1.0, 1), 1).current().contour;
  }, "Outline of the union of two overlapping contours.");

  m.def("near_miss_undersample", [](const py::array_t<double, py::array::c_style | py::array::forcecast>& samples,
                                    const std::vector<int>& labels, double ratio) {
    if (samples.ndim() != 2) throw py::value_error("expected a 2-D array, one row per sample");
    nn::Mat s(samples.shape(0), samples.shape(1));
    auto r = samples.unchecked<2>();
    for (py::ssize_t i = 0; i < samples.shape(0); ++i)
      for (py::ssize_t j = 0; j < samples.shape(1); ++j) s(i, j) = r(i, j);
    return nn::near_miss_undersample(s, labels, ratio);
  }, py::arg("samples"), py::arg("labels"), py::arg("ratio") = 1.0);

  m.def("reconstruct", [](const Contour& c, const py::array_t<double, py::array::c_style | py::array::forcecast>& g,
                          double volume, int smooth_iters, int min_cells) {
    const Reconstruction r = reconstruct(c, to_profile(g), volume, smooth_iters, min_cells);
    py::dict d;
    d["height"] = grid_values(r.height.grid, r.height.values);
    d["color"] = grid_values(r.color.grid, r.color.values);
    d["origin"] = py::make_tuple(r.height.grid.origin.x, r.height.grid.origin.y);
    d["h"] = r.height.grid.h;
    d["volume"] = r.height.integral();
    d["iterations"] = r.color.iterations;
    return d;
  }, py::arg("contour"), py::arg("gradient"), py::arg("volume"), py::arg("smooth_iters") = 3, py::arg("min_cells") = 96,
     "Height field of a drop; arrays are indexed [row, col] with row 0 at the lowest y.");

  m.def("layer_inventory", [](const std::string& net, int width) {
    if (net == "contour") return nn::describe(nn::build_contour_net(width));
    if (net == "gradient") return nn::describe(nn::build_gradient_net(width));
    if (net == "breakage") return nn::describe(nn::build_breakage_net(width));
    throw py::value_error("net must be contour, gradient or breakage");
  }, py::arg("net"), py::arg("width") = 0);

  m.def("save_initial_model", [](const std::string& net, const std::string& path, int width, std::uint64_t seed) {
    if (net == "contour") nn::save_model(path, nn::build_contour_net(width, 0.0, seed));
    else if (net == "gradient") nn::save_model(path, nn::build_gradient_net(width, 0.0, seed));
    else if (net == "breakage") nn::save_model(path, nn::build_breakage_net(width, 0.0, seed));
    else throw py::value_error("net must be contour, gradient or breakage");
  }, py::arg("net"), py::arg("path"), py::arg("width") = 0, py::arg("seed") = 1,
     "Writes a freshly initialized, untrained network.");

  py::class_<Simulation>(m, "Simulation")
      .def(py::init<const std::string&>(), py::arg("scene_config"))
      .def("step", &Simulation::step)
      .def_property_readonly("step_index", &Simulation::step_index)
      .def_property_readonly("configured_steps", &Simulation::configured_steps)
      .def("total_volume", &Simulation::total_volume)
      .def("drops", &Simulation::drops);
}
