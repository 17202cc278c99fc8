// ikd: command-line front end for synthetic data, tiling, training,
// evaluation, prediction, feature-map rendering and gradient checks.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ikd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ikd;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = ".";
  std::vector<std::string> overrides;  // key=value
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "key = value settings file")->check(CLI::ExistingFile);
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "master seed");
  cmd->add_option("--out", c.out, "output directory");
  cmd->add_option("--set", c.overrides, "override a setting, KEY=VALUE (repeatable)");
}

std::set<std::string> known_keys() {
  std::set<std::string> k = NetworkConfig::keys();
  for (const auto* s : {&OptimizerConfig::keys(), &TrainOptions::keys(), &SynthOptions::keys()})
    k.insert(s->begin(), s->end());
  k.insert({"tile", "overlap"});
  return k;
}

KeyValues settings(const Common& c) {
  KeyValues kv;
  if (!c.config.empty()) kv = KeyValues::load(c.config);
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ContractError("--set expects KEY=VALUE, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (c.seed_set) kv.set("seed", std::to_string(c.seed));
  kv.require_known(known_keys());
  return kv;
}

std::uint64_t tile_seed(std::uint64_t seed, const std::string& name) {
  return mix_seed(seed, "tile:" + name);
}

struct TileEntry {
  std::string name, split;
};

// Tile directories listed in <data>/tiles.csv, or every scene directory
// below <data> when there is no index.
std::vector<TileEntry> list_tiles(const std::string& data) {
  std::vector<TileEntry> out;
  const fs::path index = fs::path(data) / "tiles.csv";
  if (fs::exists(index)) {
    std::ifstream is(index);
    std::string line;
    std::getline(is, line);
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::vector<std::string> f;
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (f.size() != 7) throw FormatError(index.string() + ": expected 7 columns in '" + line + "'");
      out.push_back({f[0], f[6]});
    }
  } else {
    for (const auto& e : fs::directory_iterator(data))
      if (e.is_directory() && fs::exists(e.path() / "grid.txt"))
        out.push_back({e.path().filename().string(), "train"});
    std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.name < b.name; });
  }
  if (out.empty()) throw ContractError("no tiles found under '" + data + "'");
  return out;
}

std::vector<NetInput<float>> load_inputs(const NetworkConfig& cfg, const std::string& data,
                                         const std::string& split) {
  std::vector<NetInput<float>> out;
  for (const auto& t : list_tiles(data)) {
    if (split != "all" && t.split != split) continue;
    auto scene = load_scene((fs::path(data) / t.name).string());
    out.push_back(scene_input(cfg, scene, tile_seed(cfg.seed, t.name)));
  }
  if (out.empty()) throw ContractError("no tiles in split '" + split + "' under '" + data + "'");
  return out;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  os << s;
  if (!os) throw FormatError("cannot write '" + p.string() + "'");
}

// ----- subcommands -------------------------------------------------------------

int run_synth(const Common& c, std::size_t scenes) {
  const auto kv = settings(c);
  const auto opts = SynthOptions::from_key_values(kv);
  const auto seed = kv.get_u64("seed", 0);
  for (std::size_t i = 0; i < scenes; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%03zu", i);
    const auto dir = fs::path(c.out) / name;
    auto scene = synth_scene(mix_seed(seed, "scene" + std::to_string(i)), opts);
    save_scene(scene, dir.string());
    std::cout << dir.string() << ": " << scene.height() << "x" << scene.width() << ", "
              << scene.cloud.size() << " points\n";
  }
  return 0;
}

int run_tile(const Common& c, const std::vector<std::string>& scene_dirs) {
  const auto kv = settings(c);
  const auto tile = kv.get_u64("tile", 64);
  const auto overlap = kv.get_double("overlap", 0.2);
  const auto seed = kv.get_u64("seed", 0);
  fs::create_directories(c.out);
  struct Row {
    std::string name, scene;
    TileWindow w;
    std::size_t points;
  };
  std::vector<Row> rows;
  for (const auto& dir : scene_dirs) {
    const auto scene = load_scene(dir);
    const auto set = tile_dataset(scene, tile, overlap);
    for (std::size_t i = 0; i < set.windows.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "tile_%05zu", rows.size());
      save_scene(extract_tile(scene, set.windows[i], set.point_indices[i]),
                 (fs::path(c.out) / name).string());
      rows.push_back({name, fs::path(dir).filename().string(), set.windows[i], set.point_indices[i].size()});
    }
  }
  const auto split = split_811(rows.size(), seed);
  std::vector<std::string> tag(rows.size(), "train");
  for (auto i : split.val) tag[i] = "val";
  for (auto i : split.test) tag[i] = "test";
  std::ostringstream csv;
  csv << "tile,scene,row,col,size,points,split\n";
  for (std::size_t i = 0; i < rows.size(); ++i)
    csv << rows[i].name << ',' << rows[i].scene << ',' << rows[i].w.row << ',' << rows[i].w.col
        << ',' << rows[i].w.size << ',' << rows[i].points << ',' << tag[i] << '\n';
  write_text(fs::path(c.out) / "tiles.csv", csv.str());
  std::cout << rows.size() << " tiles (" << split.train.size() << " train, " << split.val.size()
            << " val, " << split.test.size() << " test) in " << c.out << "\n";
  return 0;
}

int run_train(const Common& c, const std::string& data, std::size_t synth_tiles, bool resume) {
  auto kv = settings(c);
  const fs::path out(c.out);
  fs::create_directories(out);
  const auto ckpt_path = out / "checkpoint.ikdnet";

  NetworkConfig cfg;
  Optimizer opt;
  std::unique_ptr<IkdNet<float>> net;
  if (resume) {
    if (!fs::exists(ckpt_path)) throw ContractError("--resume: no checkpoint at " + ckpt_path.string());
    auto ck = load_checkpoint(ckpt_path.string());
    cfg = ck.config;
    net = std::make_unique<IkdNet<float>>(cfg);
    restore(ck, *net, opt);
    std::cout << "resuming at step " << opt.steps() << "\n";
  } else {
    cfg = NetworkConfig::from_key_values(kv);
    net = std::make_unique<IkdNet<float>>(cfg);
    opt = Optimizer(OptimizerConfig::from_key_values(kv));
  }
  const auto topts = TrainOptions::from_key_values(kv);

  std::vector<NetInput<float>> tiles;
  if (!data.empty()) {
    tiles = load_inputs(cfg, data, "train");
  } else {
    if (synth_tiles == 0) throw ContractError("train needs --data DIR or --synth N");
    auto so = SynthOptions::from_key_values(kv);
    so.size = std::max<std::size_t>(32, cfg.height);
    for (std::size_t i = 0; i < synth_tiles; ++i) {
      const auto name = "synth" + std::to_string(i);
      const auto scene = synth_scene(mix_seed(cfg.seed, name), so);
      const auto set = tile_dataset(scene, cfg.height, 0.0);
      tiles.push_back(scene_input(cfg, extract_tile(scene, set.windows[0], set.point_indices[0]),
                                  tile_seed(cfg.seed, name)));
    }
  }

  auto effective = cfg.to_key_values();
  effective.merge(opt.config().to_key_values());
  effective.merge(topts.to_key_values());
  std::ostringstream eff;
  effective.write(eff);
  write_text(out / "config.txt", eff.str());

  std::cout << tiles.size() << " tiles, " << net->store().parameter_count() << " parameters\n";
  const auto t0 = std::chrono::steady_clock::now();
  train(*net, opt, tiles, topts, out.string(), [&](const TrainLogRow& r) {
    if (r.step == 1 || r.step % 10 == 0 || r.step == topts.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::printf("step %5llu  l_total %.5f  l_ce_img %.5f  l_ce_pc %.5f  l_pi_sc %.5f  (%.1fs)\n",
                  static_cast<unsigned long long>(r.step), r.loss.l_total, r.loss.l_ce_img,
                  r.loss.l_ce_pc, r.loss.l_pi_sc, secs);
      std::fflush(stdout);
    }
  });
  std::cout << "checkpoint: " << ckpt_path.string() << "\n";
  return 0;
}

int run_eval(const Common& c, const std::string& checkpoint, const std::string& data,
             const std::string& split) {
  auto ck = load_checkpoint(checkpoint);
  IkdNet<float> net(ck.config);
  Optimizer opt;
  restore(ck, net, opt);
  const auto tiles = load_inputs(ck.config, data, split);
  const auto ev = evaluate(net, tiles);
  auto names = scene_class_names();
  if (names.size() != ck.config.num_classes) names.clear();
  const fs::path out(c.out);
  fs::create_directories(out);
  const auto report = make_report(ev.image, names);
  std::ostringstream csv, text;
  write_metrics_csv(csv, report);
  write_metrics_text(text, report);
  write_text(out / "metrics.csv", csv.str());
  write_text(out / "metrics.txt", text.str());
  std::cout << "image head, " << tiles.size() << " tiles (" << split << ")\n" << text.str();
  if (ev.points.total() > 0) {
    const auto pr = make_report(ev.points, names);
    std::ostringstream pcsv, ptext;
    write_metrics_csv(pcsv, pr);
    write_metrics_text(ptext, pr);
    write_text(out / "point_metrics.csv", pcsv.str());
    write_text(out / "point_metrics.txt", ptext.str());
    std::cout << "point head\n" << ptext.str();
  }
  return 0;
}

struct Loaded {
  LoadedCheckpoint ck;
  std::unique_ptr<IkdNet<float>> net;
};

Loaded load_net(const std::string& checkpoint) {
  Loaded l{load_checkpoint(checkpoint), nullptr};
  l.net = std::make_unique<IkdNet<float>>(l.ck.config);
  Optimizer opt;
  restore(l.ck, *l.net, opt);
  return l;
}

int run_predict(const Common& c, const std::string& checkpoint, const std::string& scene_dir) {
  auto l = load_net(checkpoint);
  const auto scene = load_scene(scene_dir);
  const auto& cfg = l.ck.config;
  if (scene.height() != cfg.height || scene.width() != cfg.width)
    throw ContractError("predict: scene is " + std::to_string(scene.height()) + "x" +
                        std::to_string(scene.width()) + " but the model expects " +
                        std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  const auto in = scene_input(cfg, scene, tile_seed(cfg.seed, fs::path(scene_dir).filename().string()));
  NoGradScope<float> off;
  const auto out = l.net->forward(in, Mode::Eval);
  const auto labels = argmax_labels(out.p_img);
  const fs::path dir(c.out);
  fs::create_directories(dir);
  save_pgm((dir / "prediction.pgm").string(), label_image(labels, cfg.height, cfg.width));
  save_ppm((dir / "prediction.ppm").string(), colorize_labels(labels, cfg.height, cfg.width));
  const auto s = summary_metrics(confusion_matrix(labels, scene.labels, cfg.num_classes));
  std::printf("wrote %s/prediction.{pgm,ppm}; OA against scene labels %.4f, mIoU %.4f\n",
              dir.string().c_str(), s.oa, s.miou);
  return 0;
}

int run_viz(const Common& c, const std::string& checkpoint, const std::string& scene_dir,
            const std::vector<std::string>& maps) {
  auto l = load_net(checkpoint);
  const auto scene = load_scene(scene_dir);
  const auto in = scene_input(l.ck.config, scene, tile_seed(l.ck.config.seed, fs::path(scene_dir).filename().string()));
  NoGradScope<float> off;
  const auto out = l.net->forward(in, Mode::Eval);
  const fs::path dir(c.out);
  fs::create_directories(dir);
  std::vector<std::string> names = maps;
  if (names.empty())
    for (const auto& [name, t] : out.maps) names.push_back(name);
  for (const auto& name : names) {
    auto it = out.maps.find(name);
    if (it == out.maps.end()) {
      std::string avail;
      for (const auto& [n, t] : out.maps) avail += " " + n;
      throw ContractError("viz: no map named '" + name + "'; available:" + avail);
    }
    const auto path = dir / (name + ".ppm");
    save_ppm(path.string(), visualize_feature_map(it->second));
    std::cout << path.string() << "  " << shape_str(it->second.shape()) << "\n";
  }
  return 0;
}

int run_gradcheck(const Common& c, std::size_t seeds, std::size_t entries, double tol,
                  double step) {
  auto kv = settings(c);
  // true gradient of l_total unless overridden
  auto layered = micro_network_config().to_key_values();
  layered.set("detach_target", "false");
  layered.merge(kv);
  const auto cfg = NetworkConfig::from_key_values(layered);
  const auto base = kv.get_u64("seed", 0);
  GradCheckOptions opts;
  opts.tol = tol;
  opts.step = step;
  opts.max_entries_per_leaf = entries;
  std::ostringstream log;
  bool ok = true;
  for (std::size_t i = 0; i < seeds; ++i) {
    opts.seed = base + i;
    const auto r = network_grad_check(cfg, base + i, opts);
    ok = ok && r.pass();
    log << "seed " << base + i << ": " << (r.pass() ? "PASS" : "FAIL")
        << " max_rel_err=" << r.max_rel_error() << "\n";
    if (!r.pass()) log << r.summary();
  }
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "gradcheck.txt", log.str());
  std::cout << log.str();
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"IKD-Net desk-scale toolkit"};
  app.require_subcommand(1);

  Common common;
  auto* synth = app.add_subcommand("synth", "generate synthetic scenes");
  add_common(synth, common);
  std::size_t scenes = 1;
  synth->add_option("--scenes", scenes, "number of scenes")->check(CLI::PositiveNumber);

  auto* tile = app.add_subcommand("tile", "cut scenes into overlapping tiles with an 8:1:1 split");
  add_common(tile, common);
  std::vector<std::string> scene_dirs;
  tile->add_option("--scene", scene_dirs, "scene directory (repeatable)")->required();

  auto* trn = app.add_subcommand("train", "train a network");
  add_common(trn, common);
  std::string data;
  std::size_t synth_tiles = 0;
  bool resume = false;
  trn->add_option("--data", data, "tile directory from `ikd tile`");
  trn->add_option("--synth", synth_tiles, "train on N generated tiles instead of --data");
  trn->add_flag("--resume", resume, "continue from <out>/checkpoint.ikdnet");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev, common);
  std::string checkpoint, split = "test";
  ev->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data)->required();
  ev->add_option("--split", split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  auto* pred = app.add_subcommand("predict", "label raster and colored map for one tile");
  add_common(pred, common);
  std::string scene_dir;
  pred->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  pred->add_option("--scene", scene_dir)->required();

  auto* viz = app.add_subcommand("viz", "render intermediate feature maps");
  add_common(viz, common);
  std::vector<std::string> maps;
  viz->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  viz->add_option("--scene", scene_dir)->required();
  viz->add_option("--map", maps, "map name (repeatable; default all)");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the micro network");
  add_common(gc, common);
  std::size_t gc_seeds = 3, gc_entries = 3;
  double gc_tol = 1e-3, gc_step = 1e-7;
  gc->add_option("--seeds", gc_seeds)->check(CLI::PositiveNumber);
  gc->add_option("--entries", gc_entries, "entries checked per parameter tensor");
  gc->add_option("--tol", gc_tol);
  gc->add_option("--step", gc_step, "central-difference step");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return run_synth(common, scenes);
    if (*tile) return run_tile(common, scene_dirs);
    if (*trn) return run_train(common, data, synth_tiles, resume);
    if (*ev) return run_eval(common, checkpoint, data, split);
    if (*pred) return run_predict(common, checkpoint, scene_dir);
    if (*viz) return run_viz(common, checkpoint, scene_dir, maps);
    if (*gc) return run_gradcheck(common, gc_seeds, gc_entries, gc_tol, gc_step);
  } catch (const NumericFault& e) {
    std::cerr << "error: numeric fault in " << e.primitive() << ": " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
