#include "fruitreid/baseline.hpp"
#include "fruitreid/cli.hpp"
#include "fruitreid/io.hpp"
#include "fruitreid/matcher.hpp"
#include "fruitreid/metrics.hpp"
#include "fruitreid/segmentation.hpp"
#include "fruitreid/synth.hpp"

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

namespace py = pybind11;
using namespace fruitreid;

namespace {

using Points = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

py::object to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

std::vector<Vec3> rows(const Points& p) {
  std::vector<Vec3> out(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) out[static_cast<std::size_t>(i)] = p.row(i).transpose();
  return out;
}

Points matrix(const std::vector<Vec3>& v) {
  Points out(static_cast<Eigen::Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = v[i].transpose();
  return out;
}

ColoredCloud make_cloud(const Points& points, const std::optional<Points>& colors) {
  ColoredCloud c;
  c.points = rows(points);
  c.colors = colors ? rows(*colors) : std::vector<Vec3>(c.points.size(), Vec3::Zero());
  if (c.colors.size() != c.points.size()) throw ShapeError("points and colors differ in length");
  return c;
}

SceneAnnotation annotation(const ColoredCloud& cloud, const std::vector<int>& labels) {
  if (labels.size() != cloud.size()) throw ShapeError("one label per point expected");
  return SceneAnnotation::from_labels(cloud, labels);
}

py::dict scene_dict(const Scene& s) {
  py::dict d;
  d["points"] = matrix(s.cloud.points);
  d["colors"] = matrix(s.cloud.colors);
  d["instance_ids"] = s.annotation.id_per_point();
  d["centers"] = matrix(s.annotation.centers());
  return d;
}

}  // namespace

PYBIND11_MODULE(_fruitreid, m) {
  m.doc() = "Fruit re-identification on colored point clouds";

  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
  py::register_exception<ParseError>(m, "ParseError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());
  py::register_exception<EmptyInputError>(m, "EmptyInputError", base.ptr());
  py::register_exception<DivergenceError>(m, "DivergenceError", base.ptr());

  m.def(
      "load_ply",
      [](const std::filesystem::path& path) {
        const auto ply = load_ply(path);
        py::dict d;
        d["points"] = matrix(ply.cloud.points);
        d["colors"] = matrix(ply.cloud.colors);
        d["instance_ids"] = ply.annotation ? py::cast(ply.annotation->id_per_point()) : py::none();
        return d;
      },
      py::arg("path"), "Points, colors and (when present) per-point instance ids.");

  m.def(
      "save_ply",
      [](const std::filesystem::path& path, const Points& points, const std::optional<Points>& colors,
         const std::optional<std::vector<int>>& instance_ids) {
        const auto cloud = make_cloud(points, colors);
        if (instance_ids) {
          const auto ann = annotation(cloud, *instance_ids);
          save_ply(path, cloud, &ann);
        } else {
          save_ply(path, cloud);
        }
      },
      py::arg("path"), py::arg("points"), py::arg("colors") = py::none(), py::arg("instance_ids") = py::none());

  m.def(
      "generate_pair",
      [](std::uint64_t seed, const std::string& preset) {
        OrchardConfig c = preset == "matcher" ? OrchardConfig::matcher_scene() : OrchardConfig{};
        c.rng_seed = seed;
        const auto p = generate_pair(c);
        py::dict d;
        d["previous"] = scene_dict(p.previous);
        d["current"] = scene_dict(p.current);
        d["association"] = p.association.prev;
        return d;
      },
      py::arg("seed") = 0, py::arg("preset") = "row", "Synthetic (t-1, t) scene pair; association[i] is -1 or an index.");

  m.def(
      "panoptic_quality",
      [](const Points& points, const std::vector<int>& pred, const std::vector<int>& gt, double threshold) {
        const auto cloud = make_cloud(points, std::nullopt);
        return to_py(to_json(panoptic_quality(annotation(cloud, pred), annotation(cloud, gt), threshold)));
      },
      py::arg("points"), py::arg("pred_labels"), py::arg("gt_labels"), py::arg("iou_threshold") = 0.5);

  m.def(
      "f1_scores",
      [](std::size_t cm, std::size_t mm, std::size_t fm, std::size_t tn, std::size_t fn) {
        MatchConfusion c;
        c.cm = cm;
        c.mm = mm;
        c.fm = fm;
        c.tn = tn;
        c.fn = fn;
        return to_py(to_json(f1_scores(c)));
      },
      py::arg("cm"), py::arg("mm"), py::arg("fm"), py::arg("tn"), py::arg("fn"));

  m.def(
      "matching_confusion",
      [](const std::vector<int>& pred, const std::vector<int>& gt) {
        TemporalAssociation p, g;
        p.prev = pred;
        g.prev = gt;
        return to_py(to_json(matching_confusion(p, g)));
      },
      py::arg("pred"), py::arg("gt"));

  m.def("parse_grid", &parse_grid, py::arg("spec"));

  m.def(
      "nn_match",
      [](const Points& current, const Points& previous, double epsilon) {
        return nn_match(rows(current), rows(previous), epsilon).prev;
      },
      py::arg("current"), py::arg("previous"), py::arg("epsilon"));

  m.def(
      "greedy_assign", [](const nn::Matrix& H) { return greedy_assign(H).prev; }, py::arg("H"),
      "Greedy one-to-one assignment of an A x (B+1) probability matrix.");

  m.def("positional_encoding", &positional_encoding, py::arg("T"), py::arg("out_dim"), py::arg("n_freq"),
        py::arg("max_move"));

  m.def(
      "mean_shift",
      [](const Points& points, double bandwidth) {
        const auto pts = rows(points);
        const auto r = mean_shift(pts, bandwidth);
        return py::make_tuple(r.cluster_id, matrix(r.modes));
      },
      py::arg("points"), py::arg("bandwidth"), "Per-point cluster ids and the cluster modes.");

  m.def(
      "run_cli",
      [](std::vector<std::string> args) {
        args.insert(args.begin(), "fruitreid");
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs a CLI subcommand in-process; returns (exit_code, stdout, stderr).");
}
