#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <memory>
#include <sstream>

#include "ikd/binary_io.hpp"
#include "ikd/knn.hpp"
#include "ikd/pipeline.hpp"

namespace py = pybind11;
using namespace ikd;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;
using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

KeyValues to_kv(const std::map<std::string, std::string>& d) {
  KeyValues kv;
  for (const auto& [k, v] : d) kv.set(k, v);
  return kv;
}

std::vector<std::uint8_t> to_u8(const U8Array& a) {
  return std::vector<std::uint8_t>(a.data(), a.data() + a.size());
}

template <typename T>
py::array_t<T> to_numpy(std::vector<T> v, std::vector<py::ssize_t> shape) {
  auto* owner = new std::vector<T>(std::move(v));
  py::capsule free(owner, [](void* p) { delete static_cast<std::vector<T>*>(p); });
  return py::array_t<T>(shape, owner->data(), free);
}

py::array_t<float> tensor_to_numpy(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  return to_numpy(std::vector<float>(t.data().begin(), t.data().end()), shape);
}

// Points as an (N, 5) float array: x, y, z, intensity, return number.
py::array_t<float> points_array(const PointCloud& cloud) {
  std::vector<float> v;
  v.reserve(cloud.size() * 5);
  for (const auto& p : cloud.points) v.insert(v.end(), {p.x, p.y, p.z, p.intensity, p.return_number});
  return to_numpy(std::move(v), {static_cast<py::ssize_t>(cloud.size()), 5});
}

PointCloud cloud_from(const F32Array& points, const U8Array& labels) {
  if (points.ndim() != 2 || points.shape(1) != 5)
    throw ContractError("points must have shape (N, 5)");
  PointCloud cloud;
  const auto n = static_cast<std::size_t>(points.shape(0));
  const float* d = points.data();
  for (std::size_t i = 0; i < n; ++i)
    cloud.points.push_back({d[5 * i], d[5 * i + 1], d[5 * i + 2], d[5 * i + 3], d[5 * i + 4]});
  if (labels.size() > 0) {
    if (static_cast<std::size_t>(labels.size()) != n) throw ContractError("one label per point expected");
    cloud.labels = to_u8(labels);
  }
  return cloud;
}

py::dict metrics_dict(const ConfusionMatrix& cm) {
  const auto r = make_report(cm);
  auto opt_list = [](const std::vector<std::optional<double>>& v) {
    py::list out;
    for (const auto& x : v) out.append(x ? py::cast(*x) : py::none());
    return out;
  };
  py::dict d;
  d["oa"] = r.summary.oa;
  d["mean_acc"] = r.summary.mean_acc;
  d["kappa"] = r.summary.kappa;
  d["miou"] = r.summary.miou;
  d["mean_f1"] = r.f1.mean;
  d["acc"] = opt_list(r.summary.acc);
  d["iou"] = opt_list(r.summary.iou);
  d["f1"] = opt_list(r.f1.per_class);
  return d;
}

ConfusionMatrix cm_from(const py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2 || a.shape(0) != a.shape(1)) throw ContractError("confusion matrix must be K x K");
  ConfusionMatrix cm(static_cast<std::size_t>(a.shape(0)));
  for (std::size_t g = 0; g < cm.classes(); ++g)
    for (std::size_t p = 0; p < cm.classes(); ++p) cm.at(g, p) = a.at(g, p);
  return cm;
}

py::array_t<std::uint64_t> cm_array(const ConfusionMatrix& cm) {
  const auto k = cm.classes();
  std::vector<std::uint64_t> v(k * k);
  for (std::size_t g = 0; g < k; ++g)
    for (std::size_t p = 0; p < k; ++p) v[g * k + p] = cm.at(g, p);
  return to_numpy(std::move(v), {static_cast<py::ssize_t>(k), static_cast<py::ssize_t>(k)});
}

class PyScene {
 public:
  explicit PyScene(Scene s) : s_(std::move(s)) {}
  PyScene(const F32Array& image, const U8Array& labels, const F32Array& points,
          const U8Array& point_labels, double origin_x, double origin_y, double cell_size) {
    if (image.ndim() != 3 || image.shape(0) != 3) throw ContractError("image must have shape (3, H, W)");
    s_.grid = {origin_x, origin_y, cell_size, static_cast<std::size_t>(image.shape(1)),
               static_cast<std::size_t>(image.shape(2))};
    s_.image.assign(image.data(), image.data() + image.size());
    s_.labels = to_u8(labels);
    s_.cloud = cloud_from(points, point_labels);
    s_.validate();
  }

  const Scene& scene() const { return s_; }
  py::ssize_t h() const { return static_cast<py::ssize_t>(s_.height()); }
  py::ssize_t w() const { return static_cast<py::ssize_t>(s_.width()); }

  py::array_t<float> image() const { return to_numpy(s_.image, {3, h(), w()}); }
  py::array_t<std::uint8_t> labels() const { return to_numpy(s_.labels, {h(), w()}); }
  py::array_t<float> points() const { return points_array(s_.cloud); }
  py::array_t<std::uint8_t> point_labels() const {
    return to_numpy(s_.cloud.labels, {static_cast<py::ssize_t>(s_.cloud.labels.size())});
  }
  py::dict grid() const {
    py::dict d;
    d["origin_x"] = s_.grid.origin_x;
    d["origin_y"] = s_.grid.origin_y;
    d["cell_size"] = s_.grid.cell_size;
    d["height"] = s_.grid.height;
    d["width"] = s_.grid.width;
    return d;
  }

 private:
  Scene s_;
};

class PyModel {
 public:
  PyModel(const std::map<std::string, std::string>& settings) {
    const auto kv = to_kv(settings);
    std::set<std::string> known = NetworkConfig::keys();
    known.insert(OptimizerConfig::keys().begin(), OptimizerConfig::keys().end());
    kv.require_known(known);
    net_ = std::make_unique<IkdNet<float>>(NetworkConfig::from_key_values(kv));
    opt_ = Optimizer(OptimizerConfig::from_key_values(kv));
  }
  explicit PyModel(const LoadedCheckpoint& ck) {
    net_ = std::make_unique<IkdNet<float>>(ck.config);
    restore(ck, *net_, opt_);
  }

  static PyModel load(const std::string& path) { return PyModel(load_checkpoint(path)); }
  void save(const std::string& path) const { save_checkpoint(path, *net_, opt_); }

  std::map<std::string, std::string> config() const {
    auto kv = net_->config().to_key_values();
    kv.merge(opt_.config().to_key_values());
    return kv.values();
  }
  std::size_t parameter_count() const { return net_->store().parameter_count(); }
  std::uint64_t steps() const { return opt_.steps(); }

  NetInput<float> input(const PyScene& s, std::uint64_t seed) const {
    return scene_input(net_->config(), s.scene(), seed);
  }
  std::vector<NetInput<float>> inputs(const std::vector<PyScene>& scenes, std::uint64_t seed) const {
    std::vector<NetInput<float>> out;
    for (std::size_t i = 0; i < scenes.size(); ++i)
      out.push_back(input(scenes[i], mix_seed(seed, "tile" + std::to_string(i))));
    return out;
  }

  // Trains until `steps` optimizer steps in total; returns one dict per step.
  py::list train(const std::vector<PyScene>& scenes, std::uint64_t steps, std::size_t batch_size,
                 const std::string& out_dir, std::uint64_t checkpoint_every) {
    const auto tiles = inputs(scenes, net_->config().seed);
    TrainOptions o;
    o.steps = steps;
    o.batch_size = batch_size;
    o.checkpoint_every = checkpoint_every;
    std::vector<TrainLogRow> rows;
    {
      py::gil_scoped_release release;
      rows = ikd::train(*net_, opt_, tiles, o, out_dir);
    }
    py::list out;
    for (const auto& r : rows) {
      py::dict d;
      d["step"] = r.step;
      d["l_ce_img"] = r.loss.l_ce_img;
      d["l_ce_pc"] = r.loss.l_ce_pc;
      d["l_pi_sc"] = r.loss.l_pi_sc;
      d["l_total"] = r.loss.l_total;
      out.append(d);
    }
    return out;
  }

  py::dict evaluate(const std::vector<PyScene>& scenes) {
    const auto tiles = inputs(scenes, net_->config().seed);
    Evaluation e;
    {
      py::gil_scoped_release release;
      e = ikd::evaluate(*net_, tiles);
    }
    py::dict d;
    d["image"] = metrics_dict(e.image);
    d["image_confusion"] = cm_array(e.image);
    if (!net_->config().image_only) {
      d["points"] = metrics_dict(e.points);
      d["points_confusion"] = cm_array(e.points);
    }
    return d;
  }

  py::dict forward(const PyScene& s, std::uint64_t seed) {
    const auto in = input(s, seed);
    ForwardResult<float> r;
    {
      py::gil_scoped_release release;
      NoGradScope<float> ng;
      r = net_->forward(in, Mode::Eval);
    }
    py::dict d;
    d["p_img"] = tensor_to_numpy(r.p_img);
    d["labels"] = to_numpy(argmax_labels(r.p_img), {static_cast<py::ssize_t>(in.grid.height),
                                                    static_cast<py::ssize_t>(in.grid.width)});
    if (!net_->config().image_only) {
      d["p_pc_points"] = tensor_to_numpy(r.p_pc_points);
      d["p_pc_projected"] = tensor_to_numpy(r.p_pc_projected);
    }
    py::dict maps;
    for (const auto& [name, t] : r.maps) maps[py::str(name)] = tensor_to_numpy(t);
    d["maps"] = maps;
    return d;
  }

 private:
  std::unique_ptr<IkdNet<float>> net_;
  Optimizer opt_;
};

SynthOptions synth_options(const std::map<std::string, std::string>& d) {
  const auto kv = to_kv(d);
  kv.require_known(SynthOptions::keys());
  return SynthOptions::from_key_values(kv);
}

}  // namespace

PYBIND11_MODULE(_ikd, m) {
  m.doc() = "Image/point-cloud knowledge-distillation network for land-cover segmentation";

  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);
  py::register_exception<NumericFault>(m, "NumericFault", PyExc_ArithmeticError);

  m.attr("CLASS_NAMES") = scene_class_names();

  py::class_<PyScene>(m, "Scene")
      .def(py::init<const F32Array&, const U8Array&, const F32Array&, const U8Array&, double, double,
                    double>(),
           py::arg("image"), py::arg("labels"), py::arg("points"), py::arg("point_labels"),
           py::arg("origin_x") = 0.0, py::arg("origin_y") = 0.0, py::arg("cell_size") = 1.0)
      .def_property_readonly("image", &PyScene::image)
      .def_property_readonly("labels", &PyScene::labels)
      .def_property_readonly("points", &PyScene::points)
      .def_property_readonly("point_labels", &PyScene::point_labels)
      .def_property_readonly("grid", &PyScene::grid)
      .def_property_readonly("height", &PyScene::h)
      .def_property_readonly("width", &PyScene::w)
      .def("save", [](const PyScene& s, const std::string& dir) { save_scene(s.scene(), dir); })
      .def("dsm", [](const PyScene& s) {
        const auto img = dsm_image(s.scene());
        return to_numpy(img.data, {s.h(), s.w()});
      });

  m.def("load_scene", [](const std::string& dir) { return PyScene(load_scene(dir)); });
  m.def("synth_scene",
        [](std::uint64_t seed, const std::map<std::string, std::string>& options) {
          return PyScene(synth_scene(seed, synth_options(options)));
        },
        py::arg("seed"), py::arg("options") = std::map<std::string, std::string>{});

  m.def("tile_offsets", &tile_offsets, py::arg("extent"), py::arg("tile"), py::arg("overlap"));
  m.def("tile_scene",
        [](const PyScene& s, std::size_t tile, double overlap) {
          const auto set = tile_dataset(s.scene(), tile, overlap);
          std::vector<PyScene> out;
          for (std::size_t i = 0; i < set.windows.size(); ++i)
            out.emplace_back(extract_tile(s.scene(), set.windows[i], set.point_indices[i]));
          return out;
        },
        py::arg("scene"), py::arg("tile"), py::arg("overlap") = 0.2);
  m.def("split_811", [](std::size_t n, std::uint64_t seed) {
    const auto s = split_811(n, seed);
    return py::make_tuple(s.train, s.val, s.test);
  });

  m.def("knn",
        [](const F64Array& pts, std::size_t k) {
          if (pts.ndim() != 2 || pts.shape(1) != 3) throw ContractError("points must have shape (N, 3)");
          std::vector<Vec3> v(static_cast<std::size_t>(pts.shape(0)));
          for (std::size_t i = 0; i < v.size(); ++i) v[i] = {pts.at(i, 0), pts.at(i, 1), pts.at(i, 2)};
          auto idx = knn_search(v, k);
          return to_numpy(std::move(idx.index), {static_cast<py::ssize_t>(idx.count),
                                                 static_cast<py::ssize_t>(idx.k)});
        },
        py::arg("points"), py::arg("k"));

  m.def("confusion_matrix",
        [](const U8Array& pred, const U8Array& truth, std::size_t k) {
          if (pred.size() != truth.size()) throw ContractError("pred and truth differ in size");
          const auto p = to_u8(pred), t = to_u8(truth);
          return cm_array(confusion_matrix(p, t, k));
        },
        py::arg("pred"), py::arg("truth"), py::arg("num_classes"));
  m.def("metrics", [](const py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>& cm) {
    return metrics_dict(cm_from(cm));
  });

  m.def("colorize_labels", [](const U8Array& labels) {
    if (labels.ndim() != 2) throw ContractError("labels must be (H, W)");
    const auto h = labels.shape(0), w = labels.shape(1);
    auto img = colorize_labels(to_u8(labels), h, w);
    return to_numpy(std::move(img.data), {h, w, 3});
  });
  m.def("visualize_feature_map", [](const F32Array& map) {
    if (map.ndim() != 3) throw ContractError("feature map must be (C, H, W)");
    Tensor<float> t({static_cast<std::size_t>(map.shape(0)), static_cast<std::size_t>(map.shape(1)),
                     static_cast<std::size_t>(map.shape(2))},
                    std::vector<float>(map.data(), map.data() + map.size()));
    auto img = visualize_feature_map(t);
    return to_numpy(std::move(img.data), {map.shape(1), map.shape(2), 3});
  });

  m.def("micro_config", [] { return micro_network_config().to_key_values().values(); });
  m.def("default_config", [] {
    auto kv = NetworkConfig{}.to_key_values();
    kv.merge(OptimizerConfig{}.to_key_values());
    return kv.values();
  });

  m.def("network_grad_check",
        [](const std::map<std::string, std::string>& settings, std::uint64_t seed, std::size_t entries,
           double tol) {
          auto kv = micro_network_config().to_key_values();
          kv.set("detach_target", "false");
          kv.merge(to_kv(settings));
          kv.require_known(NetworkConfig::keys());
          const auto cfg = NetworkConfig::from_key_values(kv);
          GradCheckOptions o;
          o.tol = tol;
          o.step = 1e-7;
          o.max_entries_per_leaf = entries;
          o.seed = seed;
          GradCheckReport r;
          {
            py::gil_scoped_release release;
            r = network_grad_check(cfg, seed, o);
          }
          py::dict leaves;
          for (const auto& l : r.leaves) leaves[py::str(l.name)] = l.max_rel_error;
          py::dict d;
          d["passed"] = r.pass();
          d["max_rel_error"] = r.max_rel_error();
          d["leaves"] = leaves;
          return d;
        },
        py::arg("settings") = std::map<std::string, std::string>{}, py::arg("seed") = 0,
        py::arg("entries") = 3, py::arg("tol") = 1e-3);

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::map<std::string, std::string>&>(),
           py::arg("settings") = std::map<std::string, std::string>{})
      .def_static("load", &PyModel::load)
      .def("save", &PyModel::save)
      .def_property_readonly("config", &PyModel::config)
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def_property_readonly("steps", &PyModel::steps)
      .def("train", &PyModel::train, py::arg("tiles"), py::arg("steps"), py::arg("batch_size") = 1,
           py::arg("out_dir") = "", py::arg("checkpoint_every") = 0)
      .def("evaluate", &PyModel::evaluate, py::arg("tiles"))
      .def("forward", &PyModel::forward, py::arg("tile"), py::arg("seed") = 0);
}
