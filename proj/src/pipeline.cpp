#include "ikd/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace ikd {

namespace fs = std::filesystem;

const std::vector<std::string>& scene_class_names() {
  static const std::vector<std::string> names{"others", "ground", "tree", "building"};
  return names;
}

void Scene::validate(std::size_t num_classes) const {
  grid.validate();
  const auto px = grid.pixels();
  if (image.size() != 3 * px)
    throw ContractError("scene: image has " + std::to_string(image.size()) +
                        " values but the grid is " + std::to_string(grid.height) + "x" +
                        std::to_string(grid.width));
  if (labels.size() != px)
    throw ContractError("scene: " + std::to_string(labels.size()) + " labels for " +
                        std::to_string(px) + " pixels");
  for (auto y : labels)
    if (y >= num_classes)
      throw ContractError("scene: label " + std::to_string(y) + " >= " +
                          std::to_string(num_classes) + " classes");
  cloud.validate(num_classes);
  if (!cloud.has_labels()) throw ContractError("scene: the point cloud carries no labels");
  for (std::size_t i = 0; i < cloud.size(); ++i)
    if (!grid.cell_of(cloud.points[i].x, cloud.points[i].y))
      throw ContractError("scene: point " + std::to_string(i) + " lies outside the grid extent");
}

// ----- synthetic scenes --------------------------------------------------------

const std::set<std::string>& SynthOptions::keys() {
  static const std::set<std::string> k{"synth_size",      "synth_cell_size", "synth_density",
                                       "synth_buildings", "synth_trees",     "synth_others",
                                       "synth_noise"};
  return k;
}

KeyValues SynthOptions::to_key_values() const {
  KeyValues kv;
  kv.set("synth_size", std::to_string(size));
  kv.set("synth_cell_size", format_double(cell_size));
  kv.set("synth_density", format_double(point_density));
  kv.set("synth_buildings", format_double(buildings));
  kv.set("synth_trees", format_double(trees));
  kv.set("synth_others", format_double(others));
  kv.set("synth_noise", format_double(image_noise));
  return kv;
}

SynthOptions SynthOptions::from_key_values(const KeyValues& kv) {
  SynthOptions o;
  o.size = kv.get_u64("synth_size", o.size);
  o.cell_size = kv.get_double("synth_cell_size", o.cell_size);
  o.point_density = kv.get_double("synth_density", o.point_density);
  o.buildings = kv.get_double("synth_buildings", o.buildings);
  o.trees = kv.get_double("synth_trees", o.trees);
  o.others = kv.get_double("synth_others", o.others);
  o.image_noise = kv.get_double("synth_noise", o.image_noise);
  return o;
}

namespace {

using Rgb = std::array<double, 3>;

struct Surface {
  std::vector<double> above;  // height above ground
  std::vector<std::uint8_t> label;
  std::vector<Rgb> color;
};

}  // namespace

Scene synth_scene(std::uint64_t seed, const SynthOptions& o) {
  if (o.size < 32) throw ContractError("synth_scene: size must be >= 32, got " + std::to_string(o.size));
  if (!(o.cell_size > 0) || !(o.point_density > 0) || o.image_noise < 0 || o.buildings < 0 ||
      o.trees < 0 || o.others < 0)
    throw ContractError("synth_scene: cell size and density must be positive, counts non-negative");
  const std::size_t n = o.size;
  const double cs = o.cell_size;
  std::mt19937_64 rng(mix_seed(seed, "synth"));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto u = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  auto pick = [&](const std::vector<Rgb>& options) { return options[rng() % options.size()]; };

  const double base = u(5.0, 15.0), sx = u(-0.02, 0.02), sy = u(-0.02, 0.02);
  auto ground_z = [&](std::size_t r, std::size_t c) {
    return base + sx * static_cast<double>(c) * cs + sy * static_cast<double>(n - 1 - r) * cs;
  };

  // Ground colors: bare soil, plus lawn patches that look like vegetation.
  const Rgb soil{0.55, 0.47, 0.35}, lawn{0.32, 0.50, 0.25};
  Surface s{std::vector<double>(n * n, 0.0), std::vector<std::uint8_t>(n * n, kGround),
            std::vector<Rgb>(n * n, soil)};
  const double area = static_cast<double>(n * n) / 4096.0;
  auto count = [&](double per_tile) {
    return static_cast<std::size_t>(std::llround(per_tile * area * u(0.75, 1.25)));
  };
  auto paint_rect = [&](std::size_t h_lo, std::size_t h_hi, auto&& fn) {
    const auto h = h_lo + rng() % (h_hi - h_lo + 1), w = h_lo + rng() % (h_hi - h_lo + 1);
    const auto r0 = rng() % (n - h + 1), c0 = rng() % (n - w + 1);
    for (std::size_t r = r0; r < r0 + h; ++r)
      for (std::size_t c = c0; c < c0 + w; ++c) fn(r * n + c);
  };

  for (std::size_t i = 0, k = count(2.0); i < k; ++i)
    paint_rect(6, 14, [&](std::size_t p) { s.color[p] = lawn; });

  const std::vector<Rgb> other_colors{{0.30, 0.30, 0.32}, {0.25, 0.35, 0.55}, {0.66, 0.62, 0.55}};
  for (std::size_t i = 0, k = count(o.others); i < k; ++i) {
    const double h = u(0.3, 1.5);
    const Rgb col = pick(other_colors);
    paint_rect(3, 8, [&](std::size_t p) {
      if (h > s.above[p]) s.above[p] = h, s.label[p] = kOthers, s.color[p] = col;
    });
  }

  const std::vector<Rgb> roof_colors{{0.62, 0.62, 0.64}, {0.60, 0.30, 0.25}, {0.52, 0.45, 0.34}};
  const std::size_t bmax = std::min<std::size_t>(16, n / 3);
  for (std::size_t i = 0, k = count(o.buildings); i < k; ++i) {
    const double h = u(4.0, 12.0);
    const Rgb col = pick(roof_colors);
    paint_rect(6, bmax, [&](std::size_t p) {
      if (h > s.above[p]) s.above[p] = h, s.label[p] = kBuilding, s.color[p] = col;
    });
  }

  const std::vector<Rgb> canopy_colors{{0.20, 0.42, 0.18}, {0.28, 0.48, 0.22}, {0.16, 0.32, 0.15}};
  for (std::size_t i = 0, k = count(o.trees); i < k; ++i) {
    const double rx = u(2.5, 6.0), ry = u(2.5, 6.0);
    const double cx = u(0.0, double(n)), cy = u(0.0, double(n));
    const double trunk = u(2.0, 4.0), crown = u(3.0, 8.0);
    const Rgb col = pick(canopy_colors);
    const auto r_lo = static_cast<std::size_t>(std::max(0.0, std::floor(cy - ry)));
    const auto r_hi = std::min(n, static_cast<std::size_t>(std::ceil(cy + ry)) + 1);
    const auto c_lo = static_cast<std::size_t>(std::max(0.0, std::floor(cx - rx)));
    const auto c_hi = std::min(n, static_cast<std::size_t>(std::ceil(cx + rx)) + 1);
    for (std::size_t r = r_lo; r < r_hi; ++r)
      for (std::size_t c = c_lo; c < c_hi; ++c) {
        const double dx = (static_cast<double>(c) + 0.5 - cx) / rx;
        const double dy = (static_cast<double>(r) + 0.5 - cy) / ry;
        const double d2 = dx * dx + dy * dy;
        if (d2 >= 1.0) continue;
        const double h = trunk + crown * std::sqrt(1.0 - d2);
        const auto p = r * n + c;
        if (h > s.above[p]) s.above[p] = h, s.label[p] = kTree, s.color[p] = col;
      }
  }

  Scene scene;
  scene.grid = RasterGrid{0.0, 0.0, cs, n, n};
  scene.labels = s.label;
  scene.image.resize(3 * n * n);
  for (std::size_t p = 0; p < n * n; ++p) {
    const double shade = 0.08 * gauss(rng);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double v = std::clamp(s.color[p][ch] * (1.0 + shade) + o.image_noise * gauss(rng), 0.0, 1.0);
      scene.image[ch * n * n + p] = static_cast<float>(std::lround(v * 255.0)) / 255.0f;
    }
  }

  const double intensity_mean[kSceneClasses] = {18000, 26000, 9000, 38000};
  const auto n_points = static_cast<std::size_t>(std::llround(o.point_density * double(n * n)));
  scene.cloud.points.reserve(n_points);
  scene.cloud.labels.reserve(n_points);
  while (scene.cloud.size() < n_points) {
    const auto p0 = rng() % (n * n);
    const auto r0 = p0 / n, c0 = p0 % n;
    const auto x = static_cast<float>((double(c0) + u(0.02, 0.98)) * cs);
    const auto y = static_cast<float>((double(n - r0) - u(0.02, 0.98)) * cs);
    const auto cell = scene.grid.cell_of(x, y);
    if (!cell) continue;
    const auto p = cell->first * n + cell->second;
    const auto cls = s.label[p];
    double z = ground_z(cell->first, cell->second) + s.above[p];
    float ret = 1.0f;
    if (cls == kTree && u01(rng) < 0.25) {
      z = ground_z(cell->first, cell->second);  // return from beneath the canopy
      ret = 2.0f;
    }
    z += 0.03 * gauss(rng);
    const double inten = std::clamp(intensity_mean[cls] + 5000.0 * gauss(rng), 0.0, 65535.0);
    scene.cloud.points.push_back(
        PointRecord{x, y, static_cast<float>(z), static_cast<float>(std::round(inten)), ret});
    scene.cloud.labels.push_back(cls);
  }
  return scene;
}

// ----- tiling ------------------------------------------------------------------

std::vector<std::size_t> tile_offsets(std::size_t extent, std::size_t tile, double overlap) {
  if (tile == 0 || tile > extent)
    throw ContractError("tile size " + std::to_string(tile) + " does not fit extent " +
                        std::to_string(extent));
  if (!(overlap >= 0.0 && overlap < 1.0))
    throw ContractError("overlap fraction must lie in [0, 1)");
  const auto stride = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(double(tile) * (1.0 - overlap))));
  std::vector<std::size_t> out;
  for (std::size_t o = 0;; o += stride) {
    if (o + tile >= extent) {
      out.push_back(extent - tile);
      break;
    }
    out.push_back(o);
  }
  return out;
}

namespace {

RasterGrid window_grid(const RasterGrid& g, const TileWindow& w) {
  return RasterGrid{g.origin_x + double(w.col) * g.cell_size,
                    g.origin_y + double(g.height - w.row - w.size) * g.cell_size, g.cell_size,
                    w.size, w.size};
}

}  // namespace

TileSet tile_dataset(const Scene& scene, std::size_t tile, double overlap) {
  const auto rows = tile_offsets(scene.height(), tile, overlap);
  const auto cols = tile_offsets(scene.width(), tile, overlap);
  TileSet set;
  for (auto r : rows)
    for (auto c : cols) {
      const TileWindow w{r, c, tile};
      const auto g = window_grid(scene.grid, w);
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < scene.cloud.size(); ++i)
        if (g.cell_of(scene.cloud.points[i].x, scene.cloud.points[i].y)) idx.push_back(i);
      set.windows.push_back(w);
      set.point_indices.push_back(std::move(idx));
    }
  return set;
}

Scene extract_tile(const Scene& scene, const TileWindow& w,
                   const std::vector<std::size_t>& point_indices) {
  if (w.size == 0 || w.row + w.size > scene.height() || w.col + w.size > scene.width())
    throw ContractError("tile window does not fit inside the scene");
  Scene t;
  t.grid = window_grid(scene.grid, w);
  const auto H = scene.height(), W = scene.width(), s = w.size;
  t.image.resize(3 * s * s);
  t.labels.resize(s * s);
  for (std::size_t r = 0; r < s; ++r)
    for (std::size_t c = 0; c < s; ++c) {
      const auto src = (w.row + r) * W + (w.col + c);
      t.labels[r * s + c] = scene.labels[src];
      for (std::size_t ch = 0; ch < 3; ++ch) t.image[ch * s * s + r * s + c] = scene.image[ch * H * W + src];
    }
  for (auto i : point_indices) {
    t.cloud.points.push_back(scene.cloud.points.at(i));
    t.cloud.labels.push_back(scene.cloud.labels.at(i));
  }
  return t;
}

Split split_811(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, "split"));
  std::shuffle(order.begin(), order.end(), rng);
  const auto tenth = static_cast<std::size_t>(std::llround(double(n) / 10.0));
  Split s;
  s.test.assign(order.begin(), order.begin() + tenth);
  s.val.assign(order.begin() + tenth, order.begin() + 2 * tenth);
  s.train.assign(order.begin() + 2 * tenth, order.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

// ----- scene files -------------------------------------------------------------

Image8 rgb_image(const std::vector<float>& chw, std::size_t h, std::size_t w) {
  if (chw.size() != 3 * h * w) throw ContractError("rgb_image: buffer does not match 3xHxW");
  Image8 img{h, w, 3, std::vector<std::uint8_t>(3 * h * w)};
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch)
      img.data[p * 3 + ch] = static_cast<std::uint8_t>(
          std::lround(std::clamp(double(chw[ch * h * w + p]), 0.0, 1.0) * 255.0));
  return img;
}

std::vector<float> image_from_rgb(const Image8& rgb) {
  if (rgb.channels != 3) throw ContractError("image_from_rgb: expected 3 channels");
  const auto px = rgb.height * rgb.width;
  std::vector<float> out(3 * px);
  for (std::size_t p = 0; p < px; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch)
      out[ch * px + p] = static_cast<float>(rgb.data[p * 3 + ch]) / 255.0f;
  return out;
}

Image8 label_image(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w) throw ContractError("label_image: buffer does not match HxW");
  return Image8{h, w, 1, labels};
}

Image16 dsm_image(const Scene& scene, std::size_t passes) {
  const auto pos = scene.cloud.positions();
  auto [z, hole] = surface_model(pos, scene.grid, passes);
  Image16 img{scene.height(), scene.width(), std::vector<std::uint16_t>(z.size(), 0)};
  for (std::size_t p = 0; p < z.size(); ++p)
    if (!hole[p])
      img.data[p] = static_cast<std::uint16_t>(std::clamp<long long>(std::llround(z[p] / kDsmScale), 0, 65535));
  return img;
}

void save_scene(const Scene& scene, const std::string& dir) {
  scene.validate(256);
  fs::create_directories(dir);
  const fs::path d(dir);
  save_ppm((d / "image.ppm").string(), rgb_image(scene.image, scene.height(), scene.width()));
  save_pgm((d / "labels.pgm").string(), label_image(scene.labels, scene.height(), scene.width()));
  save_xyzp((d / "cloud.xyzp").string(), scene.cloud, true);
  save_pgm16((d / "dsm.pgm").string(), dsm_image(scene));
  KeyValues kv;
  kv.set("origin_x", format_double(scene.grid.origin_x));
  kv.set("origin_y", format_double(scene.grid.origin_y));
  kv.set("cell_size", format_double(scene.grid.cell_size));
  kv.set("height", std::to_string(scene.grid.height));
  kv.set("width", std::to_string(scene.grid.width));
  kv.set("dsm_scale", format_double(kDsmScale));
  std::ofstream os(d / "grid.txt");
  kv.write(os);
  if (!os) throw FormatError("cannot write '" + (d / "grid.txt").string() + "'");
}

Scene load_scene(const std::string& dir) {
  const fs::path d(dir);
  auto kv = KeyValues::load((d / "grid.txt").string());
  kv.require_known({"origin_x", "origin_y", "cell_size", "height", "width", "dsm_scale"});
  for (const char* key : {"cell_size", "height", "width"})
    if (!kv.has(key)) throw FormatError((d / "grid.txt").string() + ": missing '" + key + "'");
  Scene s;
  s.grid = RasterGrid{kv.get_double("origin_x", 0.0), kv.get_double("origin_y", 0.0),
                      kv.get_double("cell_size", 1.0), kv.get_u64("height", 0),
                      kv.get_u64("width", 0)};
  s.grid.validate();
  const auto rgb = load_ppm((d / "image.ppm").string());
  const auto lab = load_pgm((d / "labels.pgm").string());
  auto check = [&](const Image8& img, const char* name) {
    if (img.height != s.grid.height || img.width != s.grid.width)
      throw ContractError(std::string("scene ") + dir + ": " + name + " is " +
                          std::to_string(img.height) + "x" + std::to_string(img.width) +
                          " but grid.txt says " + std::to_string(s.grid.height) + "x" +
                          std::to_string(s.grid.width));
  };
  check(rgb, "image.ppm");
  check(lab, "labels.pgm");
  s.image = image_from_rgb(rgb);
  s.labels = lab.data;
  s.cloud = load_xyzp((d / "cloud.xyzp").string());
  s.validate(256);
  return s;
}

NetInput<float> scene_input(const NetworkConfig& config, const Scene& tile, std::uint64_t seed) {
  return prepare_input<float>(config, tile.image, tile.cloud, tile.grid, tile.labels, seed);
}

// ----- training ----------------------------------------------------------------

const std::set<std::string>& TrainOptions::keys() {
  static const std::set<std::string> k{"steps", "batch_size", "checkpoint_every"};
  return k;
}

KeyValues TrainOptions::to_key_values() const {
  KeyValues kv;
  kv.set("steps", std::to_string(steps));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("checkpoint_every", std::to_string(checkpoint_every));
  return kv;
}

TrainOptions TrainOptions::from_key_values(const KeyValues& kv) {
  TrainOptions o;
  o.steps = kv.get_u64("steps", o.steps);
  o.batch_size = kv.get_u64("batch_size", o.batch_size);
  o.checkpoint_every = kv.get_u64("checkpoint_every", o.checkpoint_every);
  if (o.batch_size == 0) throw ContractError("config: batch_size must be positive");
  return o;
}

std::vector<std::size_t> batch_indices(std::size_t tiles, std::size_t batch_size,
                                       std::uint64_t step, std::uint64_t seed) {
  if (tiles == 0 || batch_size == 0) throw ContractError("batch_indices: empty tile set or batch");
  std::vector<std::size_t> out;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  std::vector<std::size_t> perm(tiles);
  for (std::size_t j = 0; j < batch_size; ++j) {
    const std::uint64_t g = step * batch_size + j;
    const std::uint64_t epoch = g / tiles;
    if (epoch != cached_epoch) {
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix_seed(seed, "epoch" + std::to_string(epoch)));
      std::shuffle(perm.begin(), perm.end(), rng);
      cached_epoch = epoch;
    }
    out.push_back(perm[g % tiles]);
  }
  return out;
}

namespace {

// Keeps the header and the rows up to `step` so a resumed run continues the
// log without duplicates.
void prepare_log(const fs::path& path, std::uint64_t step) {
  std::vector<std::string> keep;
  if (step > 0 && fs::exists(path)) {
    std::ifstream is(path);
    std::string line;
    while (std::getline(is, line)) {
      if (keep.empty()) {
        keep.push_back(line);
        continue;
      }
      const auto comma = line.find(',');
      std::uint64_t s = 0;
      try {
        s = std::stoull(line.substr(0, comma));
      } catch (const std::logic_error&) {
        continue;
      }
      if (s <= step) keep.push_back(line);
    }
  }
  std::ofstream os(path, std::ios::trunc);
  if (keep.empty())
    write_loss_header(os);
  else
    for (const auto& l : keep) os << l << '\n';
  if (!os) throw FormatError("cannot write '" + path.string() + "'");
}

void write_checkpoint_atomic(const fs::path& path, const IkdNet<float>& net, const Optimizer& opt) {
  auto tmp = path;
  tmp += ".tmp";
  save_checkpoint(tmp.string(), net, opt);
  fs::rename(tmp, path);
}

}  // namespace

std::vector<TrainLogRow> train(IkdNet<float>& net, Optimizer& optimizer,
                               const std::vector<NetInput<float>>& tiles,
                               const TrainOptions& options, const std::string& out_dir,
                               const std::function<void(const TrainLogRow&)>& on_step) {
  if (tiles.empty()) throw ContractError("train: no tiles");
  fs::path log_path, ckpt_path;
  std::ofstream log;
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    log_path = fs::path(out_dir) / "train_log.csv";
    ckpt_path = fs::path(out_dir) / "checkpoint.ikdnet";
    prepare_log(log_path, optimizer.steps());
    log.open(log_path, std::ios::app);
  }
  std::vector<TrainLogRow> rows;
  bool saved = false;
  while (optimizer.steps() < options.steps) {
    const auto idx =
        batch_indices(tiles.size(), options.batch_size, optimizer.steps(), net.config().seed);
    std::vector<const NetInput<float>*> batch;
    for (auto i : idx) batch.push_back(&tiles[i]);
    TrainLogRow row;
    row.loss = train_step(net, batch, optimizer);
    row.step = optimizer.steps();
    rows.push_back(row);
    saved = false;
    if (log.is_open()) {
      write_loss_row(log, row.step, row.loss, optimizer.config().learning_rate);
      log.flush();
    }
    if (on_step) on_step(row);
    if (!out_dir.empty() && options.checkpoint_every && row.step % options.checkpoint_every == 0) {
      write_checkpoint_atomic(ckpt_path, net, optimizer);
      saved = true;
    }
  }
  if (!out_dir.empty() && !saved) write_checkpoint_atomic(ckpt_path, net, optimizer);
  return rows;
}

// ----- evaluation and prediction -----------------------------------------------

std::vector<std::uint8_t> argmax_labels(const Tensor<float>& probs) {
  if (probs.rank() != 3) throw ContractError("argmax_labels: expects [C, H, W], got " + shape_str(probs.shape()));
  const auto c = probs.dim(0), px = probs.dim(1) * probs.dim(2);
  const auto v = probs.data();
  std::vector<std::uint8_t> out(px, 0);
  for (std::size_t p = 0; p < px; ++p) {
    float best = v[p];
    for (std::size_t k = 1; k < c; ++k)
      if (v[k * px + p] > best) best = v[k * px + p], out[p] = static_cast<std::uint8_t>(k);
  }
  return out;
}

std::vector<std::uint8_t> argmax_rows(const Tensor<float>& probs) {
  if (probs.rank() != 2) throw ContractError("argmax_rows: expects [N, C], got " + shape_str(probs.shape()));
  const auto n = probs.dim(0), c = probs.dim(1);
  const auto v = probs.data();
  std::vector<std::uint8_t> out(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    float best = v[i * c];
    for (std::size_t k = 1; k < c; ++k)
      if (v[i * c + k] > best) best = v[i * c + k], out[i] = static_cast<std::uint8_t>(k);
  }
  return out;
}

Evaluation evaluate(IkdNet<float>& net, const std::vector<NetInput<float>>& tiles) {
  const auto k = net.config().num_classes;
  Evaluation ev{ConfusionMatrix(k), ConfusionMatrix(k)};
  NoGradScope<float> off;
  for (const auto& in : tiles) {
    if (in.pixel_labels.empty()) throw ContractError("evaluate: tile without pixel labels");
    auto out = net.forward(in, Mode::Eval);
    ev.image.merge(confusion_matrix(argmax_labels(out.p_img), in.pixel_labels, k));
    if (!net.config().image_only && !in.point_labels.empty())
      ev.points.merge(confusion_matrix(argmax_rows(out.p_pc_points), in.point_labels, k));
  }
  return ev;
}

const std::vector<std::array<std::uint8_t, 3>>& class_palette() {
  static const std::vector<std::array<std::uint8_t, 3>> p{
      {128, 128, 128}, {150, 100, 50}, {30, 150, 30},  {220, 30, 30},
      {30, 60, 200},   {230, 210, 40}, {200, 40, 200}, {40, 200, 200}};
  return p;
}

Image8 colorize_labels(const std::vector<std::uint8_t>& labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w) throw ContractError("colorize_labels: buffer does not match HxW");
  const auto& pal = class_palette();
  Image8 img{h, w, 3, std::vector<std::uint8_t>(3 * h * w)};
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (labels[p] >= pal.size())
      throw ContractError("colorize_labels: class " + std::to_string(labels[p]) + " has no palette color");
    std::copy(pal[labels[p]].begin(), pal[labels[p]].end(), img.data.begin() + 3 * p);
  }
  return img;
}

std::vector<std::uint8_t> decode_palette(const Image8& img) {
  if (img.channels != 3) throw FormatError("decode_palette: expected an RGB image");
  const auto& pal = class_palette();
  std::vector<std::uint8_t> out(img.height * img.width);
  for (std::size_t p = 0; p < out.size(); ++p) {
    const std::array<std::uint8_t, 3> px{img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]};
    auto it = std::find(pal.begin(), pal.end(), px);
    if (it == pal.end())
      throw FormatError("decode_palette: pixel " + std::to_string(p) + " has a color outside the palette");
    out[p] = static_cast<std::uint8_t>(it - pal.begin());
  }
  return out;
}

// ----- feature maps --------------------------------------------------------------

const std::array<std::array<std::uint8_t, 3>, 256>& pseudo_color_lut() {
  static const auto lut = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    const double blue[3] = {20, 40, 230}, gray[3] = {128, 128, 128}, red[3] = {230, 30, 20};
    for (int i = 0; i < 256; ++i) {
      const bool low = i <= 128;
      const double f = low ? i / 128.0 : (i - 128) / 127.0;
      const double* a = low ? blue : gray;
      const double* b = low ? gray : red;
      for (int ch = 0; ch < 3; ++ch)
        t[i][ch] = static_cast<std::uint8_t>(std::lround(a[ch] + (b[ch] - a[ch]) * f));
    }
    return t;
  }();
  return lut;
}

std::vector<std::uint8_t> stretch_feature_map(const Tensor<float>& map) {
  if (map.rank() != 3) throw ContractError("feature map must be [C, H, W], got " + shape_str(map.shape()));
  const auto c = map.dim(0), px = map.dim(1) * map.dim(2);
  const auto v = map.data();
  std::vector<double> mean(px, 0.0);
  for (std::size_t k = 0; k < c; ++k)
    for (std::size_t p = 0; p < px; ++p) mean[p] += v[k * px + p];
  for (auto& m : mean) m /= static_cast<double>(c);
  const auto [lo, hi] = std::minmax_element(mean.begin(), mean.end());
  const double a = *lo, b = *hi;
  std::vector<std::uint8_t> out(px, 128);
  if (b > a)
    for (std::size_t p = 0; p < px; ++p)
      out[p] = static_cast<std::uint8_t>(std::lround((mean[p] - a) / (b - a) * 255.0));
  return out;
}

Image8 visualize_feature_map(const Tensor<float>& map) {
  const auto g = stretch_feature_map(map);
  const auto& lut = pseudo_color_lut();
  Image8 img{map.dim(1), map.dim(2), 3, std::vector<std::uint8_t>(3 * g.size())};
  for (std::size_t p = 0; p < g.size(); ++p)
    std::copy(lut[g[p]].begin(), lut[g[p]].end(), img.data.begin() + 3 * p);
  return img;
}

// ----- gradient check ----------------------------------------------------------

NetworkConfig micro_network_config() {
  NetworkConfig c;
  c.height = c.width = 16;
  c.points = 64;
  c.neighbors = 8;
  c.depth = 3;
  c.image_base_width = 4;
  c.point_base_width = 4;
  c.gkg_count = 3;
  return c;
}

GradCheckReport network_grad_check(const NetworkConfig& config, std::uint64_t seed,
                                   const GradCheckOptions& options) {
  if (config.height != config.width) throw ContractError("network_grad_check: square tiles only");
  auto c = config;
  c.seed = seed;
  SynthOptions so;
  so.size = std::max<std::size_t>(32, c.height);
  const auto scene = synth_scene(seed, so);
  const auto set = tile_dataset(scene, c.height, 0.0);
  const auto tile = extract_tile(scene, set.windows[0], set.point_indices[0]);
  const auto in = prepare_input<double>(c, tile.image, tile.cloud, tile.grid, tile.labels, seed);
  IkdNet<double> net(c);
  std::vector<std::pair<std::string, Tensor<double>>> leaves(net.store().params().begin(),
                                                             net.store().params().end());
  auto f = [&]() { return net.loss(net.forward(in, Mode::Train), in).l_total; };
  return grad_check(f, leaves, options);
}

}  // namespace ikd
