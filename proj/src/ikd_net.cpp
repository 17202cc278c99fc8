#include "ikd/ikd_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace ikd {

namespace {

std::string bool_str(bool b) { return b ? "true" : "false"; }

std::size_t pow4(std::size_t e) {
  std::size_t r = 1;
  for (std::size_t i = 0; i < e; ++i) r *= 4;
  return r;
}

}  // namespace

void NetworkConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("network config: " + what); };
  if (num_classes < 1 || num_classes > 255) fail("num_classes must be in [1, 255]");
  if (depth < 1 || depth > 8) fail("depth must be in [1, 8]");
  if (height == 0 || width == 0 || height % (std::size_t{1} << depth) ||
      width % (std::size_t{1} << depth))
    fail("image " + std::to_string(height) + "x" + std::to_string(width) +
         " is not divisible by 2^" + std::to_string(depth));
  if (image_base_width == 0 || point_base_width == 0) fail("widths must be positive");
  if (neighbors == 0) fail("neighbors must be positive");
  if (gkg_count + cat_count > depth)
    fail("gkg_count + cat_count = " + std::to_string(gkg_count + cat_count) + " exceeds depth " +
         std::to_string(depth));
  if (image_only) {
    if (gkg_count || cat_count || ckg) fail("an image-only model cannot use GKG, CAT or CKG");
  } else if (points < pow4(depth)) {
    fail("points = " + std::to_string(points) + " is below 4^depth = " +
         std::to_string(pow4(depth)));
  }
}

const std::set<std::string>& NetworkConfig::keys() {
  static const std::set<std::string> k{
      "num_classes",    "height",        "width",          "points",          "neighbors",
      "depth",          "image_base_width", "point_base_width", "gkg_count",   "cat_count",
      "ckg",            "image_only",    "passes_full",    "passes_coarse",   "ds_gradient",
      "gkg_force_open", "loss_point_ce", "loss_similarity", "detach_target",  "seed"};
  return k;
}

KeyValues NetworkConfig::to_key_values() const {
  KeyValues kv;
  kv.set("num_classes", std::to_string(num_classes));
  kv.set("height", std::to_string(height));
  kv.set("width", std::to_string(width));
  kv.set("points", std::to_string(points));
  kv.set("neighbors", std::to_string(neighbors));
  kv.set("depth", std::to_string(depth));
  kv.set("image_base_width", std::to_string(image_base_width));
  kv.set("point_base_width", std::to_string(point_base_width));
  kv.set("gkg_count", std::to_string(gkg_count));
  kv.set("cat_count", std::to_string(cat_count));
  kv.set("ckg", bool_str(ckg));
  kv.set("image_only", bool_str(image_only));
  kv.set("passes_full", std::to_string(passes_full));
  kv.set("passes_coarse", std::to_string(passes_coarse));
  kv.set("ds_gradient", bool_str(ds_gradient));
  kv.set("gkg_force_open", bool_str(gkg_force_open));
  kv.set("loss_point_ce", bool_str(loss.point_ce));
  kv.set("loss_similarity", bool_str(loss.similarity));
  kv.set("detach_target", bool_str(loss.detach_target));
  kv.set("seed", std::to_string(seed));
  return kv;
}

NetworkConfig NetworkConfig::from_key_values(const KeyValues& kv) {
  NetworkConfig c;
  c.num_classes = kv.get_u64("num_classes", c.num_classes);
  c.height = kv.get_u64("height", c.height);
  c.width = kv.get_u64("width", c.width);
  c.points = kv.get_u64("points", c.points);
  c.neighbors = kv.get_u64("neighbors", c.neighbors);
  c.depth = kv.get_u64("depth", c.depth);
  c.image_base_width = kv.get_u64("image_base_width", c.image_base_width);
  c.point_base_width = kv.get_u64("point_base_width", c.point_base_width);
  c.gkg_count = kv.get_u64("gkg_count", c.gkg_count);
  c.cat_count = kv.get_u64("cat_count", c.cat_count);
  c.ckg = kv.get_bool("ckg", c.ckg);
  c.image_only = kv.get_bool("image_only", c.image_only);
  c.passes_full = kv.get_u64("passes_full", c.passes_full);
  c.passes_coarse = kv.get_u64("passes_coarse", c.passes_coarse);
  c.ds_gradient = kv.get_bool("ds_gradient", c.ds_gradient);
  c.gkg_force_open = kv.get_bool("gkg_force_open", c.gkg_force_open);
  c.loss.point_ce = kv.get_bool("loss_point_ce", c.loss.point_ce);
  c.loss.similarity = kv.get_bool("loss_similarity", c.loss.similarity);
  c.loss.detach_target = kv.get_bool("detach_target", c.loss.detach_target);
  c.seed = kv.get_u64("seed", c.seed);
  return c;
}

std::size_t NetworkConfig::point_width_at(std::size_t level) const {
  return point_stage_width(PointBranchConfig{5, point_base_width, depth, num_classes}, level);
}

NetworkConfig::Fusion NetworkConfig::fusion_at(std::size_t level) const {
  const auto rank = depth - 1 - level;  // 0 = deepest decoder level
  if (rank < gkg_count) return Fusion::Gkg;
  if (rank < gkg_count + cat_count) return Fusion::Cat;
  return Fusion::None;
}

std::size_t NetworkConfig::fused_width_at(std::size_t level) const {
  return image_width_at(level) + (fusion_at(level) == Fusion::None ? 0 : point_width_at(level));
}

template <typename T>
NetInput<T> prepare_input(const NetworkConfig& config, const std::vector<float>& image_chw,
                          const PointCloud& cloud, const RasterGrid& grid,
                          const std::vector<std::uint8_t>& pixel_labels, std::uint64_t seed) {
  config.validate();
  grid.validate();
  const auto h = config.height, w = config.width;
  if (grid.height != h || grid.width != w)
    throw ContractError("prepare_input: grid " + std::to_string(grid.height) + "x" +
                        std::to_string(grid.width) + " does not match the configured " +
                        std::to_string(h) + "x" + std::to_string(w));
  if (image_chw.size() != 3 * h * w)
    throw ContractError("prepare_input: image has " + std::to_string(image_chw.size()) +
                        " values, expected 3x" + std::to_string(h) + "x" + std::to_string(w));
  if (!pixel_labels.empty()) {
    if (pixel_labels.size() != h * w)
      throw ContractError("prepare_input: " + std::to_string(pixel_labels.size()) +
                          " pixel labels for " + std::to_string(h * w) + " pixels");
    for (auto y : pixel_labels)
      if (y >= config.num_classes)
        throw ContractError("prepare_input: pixel label " + std::to_string(y) + " >= " +
                            std::to_string(config.num_classes) + " classes");
  }

  NetInput<T> in;
  in.image = Tensor<T>({3, h, w}, std::vector<T>(image_chw.begin(), image_chw.end()));
  in.grid = RasterGrid{0, 0, grid.cell_size, h, w};
  in.pixel_labels = pixel_labels;
  if (config.image_only) return in;

  cloud.validate(config.num_classes);
  std::vector<std::size_t> cells(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const auto& p = cloud.points[i];
    auto cell = grid.cell_of(p.x, p.y);
    if (!cell)
      throw ContractError("prepare_input: point " + std::to_string(i) + " at (" +
                          std::to_string(p.x) + ", " + std::to_string(p.y) +
                          ") lies outside the tile grid");
    cells[i] = cell->first * w + cell->second;
  }

  std::vector<std::size_t> chosen(cloud.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  if (cloud.size() > config.points) {
    std::mt19937_64 rng(mix_seed(seed, "subsample"));
    for (std::size_t i = 0; i < config.points; ++i)
      std::swap(chosen[i], chosen[i + static_cast<std::size_t>(rng() % (chosen.size() - i))]);
    chosen.resize(config.points);
    std::sort(chosen.begin(), chosen.end());
  }
  const auto n = chosen.size();
  if (n < pow4(config.depth))
    throw ContractError("prepare_input: " + std::to_string(n) + " points, need at least " +
                        std::to_string(pow4(config.depth)));

  double zmin = std::numeric_limits<double>::infinity();
  for (auto i : chosen) zmin = std::min(zmin, static_cast<double>(cloud.points[i].z));
  const double ex = static_cast<double>(w) * grid.cell_size;
  const double ey = static_cast<double>(h) * grid.cell_size;
  std::vector<Vec3> local;
  std::vector<T> feat;
  local.reserve(n);
  feat.reserve(n * 5);
  for (auto i : chosen) {
    const auto& p = cloud.points[i];
    const Vec3 q{p.x - grid.origin_x, p.y - grid.origin_y, p.z - zmin};
    local.push_back(q);
    for (double v : {q.x / ex, q.y / ey, q.z / kElevationScale,
                     double(normalized_intensity(p.intensity)),
                     double(normalized_return_number(p.return_number))})
      feat.push_back(static_cast<T>(v));
    if (cloud.has_labels())
      in.point_labels.push_back(cloud.labels[i]);
    else if (!pixel_labels.empty())
      in.point_labels.push_back(pixel_labels[cells[i]]);
  }
  in.point_features = Tensor<T>({n, 5}, std::move(feat));
  in.hierarchy = build_hierarchy(local, config.neighbors, config.depth, kDownsampleRatio,
                                 mix_seed(seed, "hierarchy"));
  return in;
}

template <typename T>
IkdNet<T>::IkdNet(const NetworkConfig& config) : config_(config), store_(config.seed) {
  config_.validate();
  const auto& c = config_;
  const auto depth = c.depth;
  auto block = [&](const std::string& name, std::size_t in, std::size_t out) {
    return Block{ConvBnRelu<T>(store_, name + ".a", in, out, 3),
                 ConvBnRelu<T>(store_, name + ".b", out, out, 3)};
  };
  std::size_t in = 3;
  for (std::size_t l = 0; l < depth; ++l) {
    encoder_.push_back(block("img.enc" + std::to_string(l), in, c.image_width_at(l)));
    in = c.image_width_at(l);
  }
  bottleneck_ = block("img.mid", in, c.image_width_at(depth));
  decoder_.resize(depth);
  for (std::size_t d = depth; d-- > 0;) {
    const auto coarse = d + 1 == depth ? c.image_width_at(depth) : c.fused_width_at(d + 1);
    decoder_[d] = block("img.dec" + std::to_string(d), coarse + c.image_width_at(d),
                        c.image_width_at(d));
  }
  if (!c.image_only)
    point_ = PointBranch<T>(store_,
                            PointBranchConfig{5, c.point_base_width, depth, c.num_classes});
  gkg_.resize(depth);
  for (std::size_t d = 0; d < depth; ++d)
    if (c.fusion_at(d) == NetworkConfig::Fusion::Gkg)
      gkg_[d] = GkgGate<T>(store_, "gkg" + std::to_string(d));
  if (c.ckg)
    ckg_ = CkgGate<T>(store_, "ckg", c.fused_width_at(0), c.num_classes);
  else
    head_ = Conv2d<T>(store_, "img.head", c.fused_width_at(0), c.num_classes, 1, true);
}

template <typename T>
ForwardResult<T> IkdNet<T>::forward(const NetInput<T>& in, Mode mode) {
  const auto& c = config_;
  const auto depth = c.depth;
  if (in.image.shape() != Shape{3, c.height, c.width})
    throw ContractError("forward: image " + shape_str(in.image.shape()) + " does not match 3x" +
                        std::to_string(c.height) + "x" + std::to_string(c.width));
  if (!c.image_only && in.hierarchy.depth() != depth)
    throw ContractError("forward: input was prepared for a different point hierarchy");

  ForwardResult<T> out;
  std::vector<Tensor<T>> skips;
  auto x = in.image;
  for (std::size_t l = 0; l < depth; ++l) {
    x = encoder_[l](x, mode);
    skips.push_back(x);
    out.maps["img.enc" + std::to_string(l)] = x;
    x = ops::max_pool2(x);
  }
  x = bottleneck_(x, mode);

  PointBranchOutput<T> pc;
  if (!c.image_only) pc = point_(in.point_features, in.hierarchy, mode);

  for (std::size_t d = depth; d-- > 0;) {
    x = decoder_[d](ops::concat<T>({ops::upsample2x(x), skips[d]}, 0), mode);
    const auto tag = std::to_string(d);
    out.maps["img.dec" + tag] = x;
    const auto fusion = c.fusion_at(d);
    if (fusion == NetworkConfig::Fusion::None) continue;
    const auto grid = in.grid.coarsen(std::size_t{1} << d);
    auto x_pc = sense(in.hierarchy.positions[d], pc.decoder[d], grid, c.passes_at(d),
                      c.ds_gradient)
                    .map;
    out.maps["pc.ds" + tag] = x_pc;
    if (fusion == NetworkConfig::Fusion::Gkg) {
      Tensor<T> gate =
          c.gkg_force_open
              ? Tensor<T>({1, grid.height, grid.width}, std::vector<T>(grid.pixels(), T(1)))
              : gkg_[d].attention(x_pc, mode);
      out.maps["gkg" + tag] = gate;
      x = gkg_apply(gate, x, x_pc);
    } else {
      x = ops::concat<T>({x, x_pc}, 0);
    }
    out.maps["fused" + tag] = x;
  }

  if (!c.image_only) {
    out.p_pc_points = ops::softmax(pc.logits, 1);
    auto projected = sense(in.hierarchy.positions[0], pc.logits, in.grid, c.passes_full,
                           c.ds_gradient);
    out.p_pc_projected = ops::softmax(projected.map, 0);
    out.hole_mask = std::move(projected.residual);
    out.maps["pc.coarse"] = out.p_pc_projected;
  }
  if (c.ckg) {
    auto k = ckg_(out.p_pc_projected, x, mode);
    out.maps["ckg.fine"] = k.f_fine;
    out.logits = k.x_fine;
  } else {
    out.logits = head_(x);
  }
  out.p_img = ops::softmax(out.logits, 0);
  return out;
}

template <typename T>
LossBreakdown<T> IkdNet<T>::loss(const ForwardResult<T>& out, const NetInput<T>& in) const {
  if (in.pixel_labels.empty()) throw ContractError("loss: the input carries no pixel labels");
  if (config_.image_only) {
    LossBreakdown<T> lb;
    lb.l_ce_img = cross_entropy_map(out.p_img, in.pixel_labels);
    lb.l_ce_pc = Tensor<T>::scalar(T(0));
    lb.l_pi_sc = Tensor<T>::scalar(T(0));
    lb.l_total = ops::add(ops::add(lb.l_ce_img, lb.l_ce_pc), lb.l_pi_sc);
    return lb;
  }
  if (config_.loss.point_ce && in.point_labels.empty())
    throw ContractError("loss: the input carries no point labels");
  return holistic_loss(out.p_img, in.pixel_labels, out.p_pc_points, in.point_labels,
                       out.p_pc_projected, out.hole_mask, config_.loss);
}

OptimizerConfig OptimizerConfig::defaults(Kind kind) {
  OptimizerConfig c;
  c.kind = kind;
  if (kind == Kind::Sgd) {
    c.learning_rate = 0.01;
    c.momentum = 0.9;
    c.weight_decay = 1e-4;
  }
  return c;
}

const std::set<std::string>& OptimizerConfig::keys() {
  static const std::set<std::string> k{"optimizer", "learning_rate", "beta1",       "beta2",
                                       "epsilon",   "momentum",      "weight_decay"};
  return k;
}

KeyValues OptimizerConfig::to_key_values() const {
  KeyValues kv;
  kv.set("optimizer", kind == Kind::Adam ? "adam" : "sgd");
  kv.set("learning_rate", format_double(learning_rate));
  kv.set("beta1", format_double(beta1));
  kv.set("beta2", format_double(beta2));
  kv.set("epsilon", format_double(epsilon));
  kv.set("momentum", format_double(momentum));
  kv.set("weight_decay", format_double(weight_decay));
  return kv;
}

OptimizerConfig OptimizerConfig::from_key_values(const KeyValues& kv) {
  const auto name = kv.get_string("optimizer", "adam");
  if (name != "adam" && name != "sgd")
    throw ContractError("config: optimizer must be 'adam' or 'sgd', got '" + name + "'");
  auto c = defaults(name == "adam" ? Kind::Adam : Kind::Sgd);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.beta1 = kv.get_double("beta1", c.beta1);
  c.beta2 = kv.get_double("beta2", c.beta2);
  c.epsilon = kv.get_double("epsilon", c.epsilon);
  c.momentum = kv.get_double("momentum", c.momentum);
  c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
  if (c.learning_rate < 0) throw ContractError("config: learning_rate must be >= 0");
  return c;
}

void Optimizer::step(ParameterStore<float>& store) {
  ++steps_;
  const auto& c = config_;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(steps_));
  const auto lr = static_cast<float>(c.learning_rate);
  const auto wd = static_cast<float>(c.weight_decay);
  for (const auto& [name, param] : store.params()) {
    if (!param.has_grad()) continue;
    auto p = param;
    auto w = p.mutable_data();
    const auto g = p.grad();
    auto& m = first_[name];
    if (m.empty()) m.assign(w.size(), 0.0f);
    if (c.kind == OptimizerConfig::Kind::Sgd) {
      const auto mu = static_cast<float>(c.momentum);
      for (std::size_t i = 0; i < w.size(); ++i) {
        const float gi = g[i] + wd * w[i];
        m[i] = mu * m[i] + gi;
        w[i] -= lr * m[i];
      }
      continue;
    }
    auto& v = second_[name];
    if (v.empty()) v.assign(w.size(), 0.0f);
    const auto b1 = static_cast<float>(c.beta1), b2 = static_cast<float>(c.beta2);
    const auto eps = static_cast<float>(c.epsilon);
    const auto s1 = static_cast<float>(1.0 / bc1), s2 = static_cast<float>(1.0 / bc2);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] + wd * w[i];
      m[i] = b1 * m[i] + (1.0f - b1) * gi;
      v[i] = b2 * v[i] + (1.0f - b2) * gi * gi;
      w[i] -= lr * (m[i] * s1) / (std::sqrt(v[i] * s2) + eps);
    }
  }
}

NamedTensors Optimizer::export_state() const {
  NamedTensors out;
  for (const auto& [name, m] : first_) out.emplace_back("opt.m:" + name, Tensor<float>({m.size()}, m));
  for (const auto& [name, v] : second_) out.emplace_back("opt.v:" + name, Tensor<float>({v.size()}, v));
  return out;
}

void Optimizer::import_state(const NamedTensors& tensors, std::uint64_t steps) {
  first_.clear();
  second_.clear();
  for (const auto& [name, t] : tensors) {
    const auto d = t.data();
    if (name.rfind("opt.m:", 0) == 0) first_[name.substr(6)].assign(d.begin(), d.end());
    if (name.rfind("opt.v:", 0) == 0) second_[name.substr(6)].assign(d.begin(), d.end());
  }
  steps_ = steps;
}

LossBreakdown<float>::Values train_step(IkdNet<float>& net,
                                        const std::vector<const NetInput<float>*>& batch,
                                        Optimizer& optimizer) {
  if (batch.empty()) throw ContractError("train_step: empty batch");
  net.store().zero_grad();
  LossBreakdown<float>::Values mean;
  const auto inv = 1.0f / static_cast<float>(batch.size());
  for (const auto* in : batch) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    auto out = net.forward(*in, Mode::Train);
    auto lb = net.loss(out, *in);
    const auto v = lb.values();
    const std::pair<const char*, double> terms[] = {
        {"l_ce_img", v.l_ce_img}, {"l_ce_pc", v.l_ce_pc}, {"l_pi_sc", v.l_pi_sc}, {"l_total", v.l_total}};
    for (const auto& [name, value] : terms)
      if (!std::isfinite(value)) throw NumericFault("loss", std::string(name) + " is non-finite");
    mean.l_ce_img += v.l_ce_img / static_cast<double>(batch.size());
    mean.l_ce_pc += v.l_ce_pc / static_cast<double>(batch.size());
    mean.l_pi_sc += v.l_pi_sc / static_cast<double>(batch.size());
    mean.l_total += v.l_total / static_cast<double>(batch.size());
    backward(tape, ops::scale(lb.l_total, inv));
  }
  optimizer.step(net.store());
  return mean;
}

void save_checkpoint(const std::string& path, const IkdNet<float>& net, const Optimizer& optimizer) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  auto kv = net.config().to_key_values();
  kv.merge(optimizer.config().to_key_values());
  kv.set("step", std::to_string(optimizer.steps()));
  os << "IKDNET 1\n";
  kv.write(os);
  os << "---\n";
  auto tensors = net.store().export_tensors();
  for (auto& t : optimizer.export_state()) tensors.push_back(std::move(t));
  write_tensors(os, tensors);
  if (!os) throw FormatError("checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != "IKDNET 1")
    throw FormatError("checkpoint: '" + path + "' does not start with an IKDNET 1 header");
  std::stringstream header;
  bool terminated = false;
  while (std::getline(is, line)) {
    if (line == "---") {
      terminated = true;
      break;
    }
    header << line << '\n';
  }
  if (!terminated) throw FormatError("checkpoint: header of '" + path + "' is not terminated");
  auto kv = KeyValues::parse(header, path);
  auto known = NetworkConfig::keys();
  known.insert(OptimizerConfig::keys().begin(), OptimizerConfig::keys().end());
  known.insert("step");
  kv.require_known(known);
  LoadedCheckpoint ck;
  ck.config = NetworkConfig::from_key_values(kv);
  ck.optimizer_config = OptimizerConfig::from_key_values(kv);
  ck.step = kv.get_u64("step", 0);
  ck.tensors = read_tensors(is);
  return ck;
}

void restore(const LoadedCheckpoint& ckpt, IkdNet<float>& net, Optimizer& optimizer) {
  net.store().import_tensors(ckpt.tensors);
  optimizer = Optimizer(ckpt.optimizer_config);
  optimizer.import_state(ckpt.tensors, ckpt.step);
}

#define IKD_NET_INSTANTIATE(T)                                                                \
  template NetInput<T> prepare_input<T>(const NetworkConfig&, const std::vector<float>&,      \
                                        const PointCloud&, const RasterGrid&,                 \
                                        const std::vector<std::uint8_t>&, std::uint64_t);     \
  template class IkdNet<T>;

IKD_NET_INSTANTIATE(float)
IKD_NET_INSTANTIATE(double)

#undef IKD_NET_INSTANTIATE

}  // namespace ikd
