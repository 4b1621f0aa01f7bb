#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "puda/config.hpp"
#include "puda/data.hpp"
#include "puda/runinfo.hpp"
#include "puda/selfcheck.hpp"
#include "puda/ssl.hpp"
#include "puda/uda.hpp"

namespace py = pybind11;
using namespace puda;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

PointCloud to_cloud(const Array& a, std::optional<int> label = {}) {
  if (a.ndim() != 2 || a.shape(1) != 3) {
    throw DimensionError("expected an (n, 3) array");
  }
  PointCloud c;
  c.label = label;
  const auto r = a.unchecked<2>();
  c.points.resize(static_cast<std::size_t>(a.shape(0)));
  for (py::ssize_t i = 0; i < a.shape(0); ++i) {
    c.points[static_cast<std::size_t>(i)] = {r(i, 0), r(i, 1), r(i, 2)};
  }
  return c;
}

Array to_array(const PointCloud& c) {
  Array out({static_cast<py::ssize_t>(c.size()), py::ssize_t{3}});
  auto w = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (int k = 0; k < 3; ++k) w(static_cast<py::ssize_t>(i), k) = c.points[i][k];
  }
  return out;
}

py::array_t<bool> mask_array(const RegionMask& m) {
  py::array_t<bool> out(static_cast<py::ssize_t>(m.selected.size()));
  auto w = out.mutable_unchecked<1>();
  for (std::size_t i = 0; i < m.selected.size(); ++i) w(static_cast<py::ssize_t>(i)) = m.selected[i];
  return out;
}

std::vector<PointCloud> to_clouds(const std::vector<Array>& arrays,
                                  const std::optional<std::vector<int>>& labels) {
  if (labels && labels->size() != arrays.size()) {
    throw DimensionError("labels and clouds differ in length");
  }
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    out.push_back(to_cloud(arrays[i], labels ? std::optional<int>((*labels)[i]) : std::nullopt));
  }
  return out;
}

py::dict split_dict(const std::vector<PointCloud>& clouds) {
  py::list points;
  std::vector<int> labels;
  for (const auto& c : clouds) {
    points.append(to_array(c));
    labels.push_back(c.label.value_or(-1));
  }
  py::dict d;
  d["points"] = points;
  d["labels"] = labels;
  return d;
}

py::dict dataset_dict(const data::DomainDataset& ds) {
  py::dict d;
  d["name"] = ds.name;
  d["class_names"] = ds.class_names;
  d["train"] = split_dict(ds.train);
  d["val"] = split_dict(ds.val);
  d["test"] = split_dict(ds.test);
  return d;
}

py::dict report_dict(const uda::EvalReport& r) {
  py::dict d;
  d["accuracy"] = r.accuracy;
  d["mean_loss"] = r.mean_loss;
  d["per_class_accuracy"] = r.per_class_accuracy;
  d["confusion"] = r.confusion;
  d["class_counts"] = r.class_counts;
  d["total"] = r.total;
  d["class_names"] = r.class_names;
  return d;
}

config::FlatConfig with_overrides(config::FlatConfig cfg, const std::optional<std::string>& path,
                                  const std::map<std::string, std::string>& overrides) {
  if (path) cfg.load(*path);
  for (const auto& [k, v] : overrides) cfg.set(k, v);
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Point-cloud domain adaptation with a learnable destruction-reconstruction task";
  runinfo::configure_allocator();

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_ValueError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_OSError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<RangeError>(m, "RangeError", PyExc_ValueError);
  py::register_exception<EmptyCloudError>(m, "EmptyCloudError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def(
      "chamfer_distance",
      [](const Array& a, const Array& b) { return chamfer_distance(to_cloud(a), to_cloud(b)); },
      py::arg("a"), py::arg("b"),
      "Mean squared nearest-neighbour distance, summed over both directions.");
  m.def(
      "knn",
      [](const Array& pts, std::size_t query, std::size_t k) {
        return knn(to_cloud(pts).points, query, k);
      },
      py::arg("points"), py::arg("query"), py::arg("k"),
      "Indices of the k nearest points to points[query], ties broken by index.");
  m.def(
      "select_region",
      [](const Array& pts, double fraction, std::uint64_t seed) {
        const auto c = to_cloud(pts);
        Rng rng(seed);
        const auto mask = select_region(c, ssl::region_size(fraction, c.size()), rng);
        return py::make_tuple(mask_array(mask), mask.seed_index);
      },
      py::arg("points"), py::arg("fraction") = 0.5, py::arg("seed") = 0,
      "Boolean mask of a kNN region around a random seed point, and the seed index.");
  m.def(
      "plane_crop",
      [](const Array& pts, double retain, std::uint64_t seed) {
        Rng rng(seed);
        return to_array(random_plane_crop(to_cloud(pts), retain, rng));
      },
      py::arg("points"), py::arg("retain") = 0.7, py::arg("seed") = 0);
  m.def(
      "normalize", [](const Array& pts) { return to_array(normalize(to_cloud(pts))); },
      py::arg("points"));

  m.def(
      "generate_domains",
      [](const std::optional<std::string>& spec,
         const std::map<std::string, std::string>& overrides,
         const std::optional<std::filesystem::path>& out_dir) {
        const auto cfg = with_overrides(config::gen_schema(), spec, overrides);
        const auto [s, t] = config::to_gen_specs(cfg);
        const auto src = data::gen_synthetic_domain(s);
        const auto tgt = data::gen_synthetic_domain(t);
        if (out_dir) {
          data::write_dataset(*out_dir / src.name, src);
          data::write_dataset(*out_dir / tgt.name, tgt);
        }
        return py::make_tuple(dataset_dict(src), dataset_dict(tgt));
      },
      py::arg("spec") = py::none(), py::arg("overrides") = std::map<std::string, std::string>{},
      py::arg("out_dir") = py::none(),
      "Synthetic (source, target) domains as dicts of numpy clouds and labels; with out_dir,\n"
      "also written as <out_dir>/<name> dataset directories.");
  m.def(
      "load_dataset",
      [](const std::filesystem::path& p) { return dataset_dict(data::load_dataset(p)); },
      py::arg("path"));

  py::class_<nn::Model>(m, "Model")
      .def_static("load", &nn::load_checkpoint, py::arg("path"))
      .def("save", [](nn::Model& self, const std::filesystem::path& p) {
        nn::save_checkpoint(p, self);
      })
      .def_readonly("class_names", &nn::Model::class_names)
      .def(
          "encode",
          [](nn::Model& self, const Array& pts) { return nn::encode(self, to_cloud(pts)); },
          py::arg("points"), "Eval-mode global feature of one cloud.")
      .def(
          "displacements",
          [](nn::Model& self, const Array& pts) {
            return to_array(nn::displacements(self, to_cloud(pts)));
          },
          py::arg("points"), "Eval-mode output of the transformation network.")
      .def(
          "destroy",
          [](nn::Model& self, const Array& pts, double alpha, double fraction,
             std::uint64_t seed) {
            Rng rng(seed);
            RegionMask mask;
            const auto out = uda::destroy_with(self, to_cloud(pts), alpha, fraction, rng, &mask);
            return py::make_tuple(to_array(out), mask_array(mask));
          },
          py::arg("points"), py::arg("alpha") = 0.05, py::arg("fraction") = 0.5,
          py::arg("seed") = 0, "Destroyed cloud and the mask of moved points.")
      .def(
          "predict",
          [](nn::Model& self, const std::vector<Array>& clouds) {
            return uda::predict(self, to_clouds(clouds, std::nullopt));
          },
          py::arg("clouds"))
      .def(
          "evaluate",
          [](nn::Model& self, const std::vector<Array>& clouds, const std::vector<int>& labels) {
            return report_dict(uda::evaluate(self, to_clouds(clouds, labels)));
          },
          py::arg("clouds"), py::arg("labels"));

  m.def(
      "train",
      [](const std::filesystem::path& source, const std::filesystem::path& target,
         const std::optional<std::string>& config_path,
         const std::map<std::string, std::string>& overrides,
         const std::optional<std::filesystem::path>& run_dir) {
        const auto cfg = config::to_train_config(
            with_overrides(config::train_schema(), config_path, overrides));
        const auto src = data::load_dataset(source);
        const auto tgt = data::load_dataset(target);
        uda::TrainHooks hooks;
        if (run_dir) hooks.run_dir = *run_dir;
        uda::AdaptationResult r;
        {
          py::gil_scoped_release release;
          r = cfg.aug_mode ? uda::augmentation_mode_train(src, tgt, cfg, hooks).phase2
              : cfg.ssl_task == uda::SslTask::none
                  ? uda::run_no_adapt_baseline(src, tgt, cfg, hooks)
                  : uda::run_adaptation(src, tgt, cfg, hooks);
        }
        py::list metrics;
        for (const auto& e : r.train.metrics) metrics.append(uda::to_json_line(e));
        py::dict d;
        d["model"] = std::move(r.train.best);
        d["best_epoch"] = r.train.best_epoch;
        d["source_val"] = report_dict(r.source_val);
        d["target_test"] = report_dict(r.target_test);
        d["metrics"] = metrics;
        return d;
      },
      py::arg("source"), py::arg("target"), py::arg("config") = py::none(),
      py::arg("overrides") = std::map<std::string, std::string>{},
      py::arg("run_dir") = py::none(),
      "Trains on a labeled source and the unlabeled target train split. Metrics are JSON lines.");

  m.def(
      "selfcheck",
      [] {
        py::list out;
        for (const auto& r : check::run_selfcheck()) {
          out.append(py::make_tuple(r.name, r.passed, r.detail));
        }
        return out;
      },
      "Gradient, oracle and invariance checks as (name, passed, detail) tuples.");
}
