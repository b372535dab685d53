#include "lumen/train.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "lumen/checkpoint.hpp"
#include "lumen/pipeline.hpp"

namespace lumen {

namespace fs = std::filesystem;

// ---- config ----

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs", "must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size", "must be >= 1");
  if (image_size < 32 || image_size % 32) throw ConfigError("image_size", "must be a positive multiple of 32");
  if (!(schedule.lr0 > 0.0)) throw ConfigError("lr0", "must be > 0");
  if (!(schedule.final_fraction > 0.0 && schedule.final_fraction <= 1.0))
    throw ConfigError("final_fraction", "must be in (0,1]");
  if (!(schedule.warmup_epochs >= 0.0 && schedule.warmup_epochs <= epochs))
    throw ConfigError("warmup_epochs", "must be in [0, epochs]");
  if (!(weight_decay >= 0.0f)) throw ConfigError("weight_decay", "must be >= 0");
  if (!(weights.box >= 0.0f)) throw ConfigError("loss_box", "must be >= 0");
  if (!(weights.obj >= 0.0f)) throw ConfigError("loss_obj", "must be >= 0");
  if (!(weights.cls >= 0.0f)) throw ConfigError("loss_cls", "must be >= 0");
  if (!(flip_probability >= 0.0f && flip_probability <= 1.0f))
    throw ConfigError("flip_probability", "must be in [0,1]");
  if (!(eval_conf >= 0.0f && eval_conf <= 1.0f)) throw ConfigError("conf", "must be in [0,1]");
  if (!(eval_iou >= 0.0f && eval_iou <= 1.0f)) throw ConfigError("iou", "must be in [0,1]");
}

std::string TrainConfig::to_text() const {
  std::string out;
  put_kv(out, "epochs", epochs);
  put_kv(out, "batch_size", batch_size);
  put_kv(out, "image_size", image_size);
  put_kv(out, "lr0", schedule.lr0);
  put_kv(out, "final_fraction", schedule.final_fraction);
  put_kv(out, "warmup_epochs", schedule.warmup_epochs);
  put_kv(out, "weight_decay", static_cast<double>(weight_decay));
  put_kv(out, "seed", std::to_string(seed));
  put_kv(out, "loss_box", static_cast<double>(weights.box));
  put_kv(out, "loss_obj", static_cast<double>(weights.obj));
  put_kv(out, "loss_cls", static_cast<double>(weights.cls));
  put_kv(out, "flip_probability", static_cast<double>(flip_probability));
  put_kv(out, "conf", static_cast<double>(eval_conf));
  put_kv(out, "iou", static_cast<double>(eval_iou));
  if (!train_manifest.empty()) put_kv(out, "train_manifest", train_manifest.generic_string());
  if (!val_manifest.empty()) put_kv(out, "val_manifest", val_manifest.generic_string());
  return out;
}

TrainConfig TrainConfig::from_keyvalues(KeyValues& kv, const fs::path& base) {
  TrainConfig c;
  c.epochs = kv.take_int("epochs", c.epochs);
  c.batch_size = kv.take_int("batch_size", c.batch_size);
  c.image_size = kv.take_int("image_size", c.image_size);
  c.schedule.lr0 = kv.take_double("lr0", c.schedule.lr0);
  c.schedule.final_fraction = kv.take_double("final_fraction", c.schedule.final_fraction);
  c.schedule.warmup_epochs = kv.take_double("warmup_epochs", c.schedule.warmup_epochs);
  c.weight_decay = static_cast<float>(kv.take_double("weight_decay", c.weight_decay));
  const int seed = kv.take_int("seed", static_cast<int>(c.seed));
  if (seed < 0) throw ConfigError("seed", "must be >= 0");
  c.seed = static_cast<std::uint64_t>(seed);
  c.weights.box = static_cast<float>(kv.take_double("loss_box", c.weights.box));
  c.weights.obj = static_cast<float>(kv.take_double("loss_obj", c.weights.obj));
  c.weights.cls = static_cast<float>(kv.take_double("loss_cls", c.weights.cls));
  c.flip_probability = static_cast<float>(kv.take_double("flip_probability", c.flip_probability));
  c.eval_conf = static_cast<float>(kv.take_double("conf", c.eval_conf));
  c.eval_iou = static_cast<float>(kv.take_double("iou", c.eval_iou));
  const auto resolve = [&](const std::string& p) -> fs::path {
    if (p.empty()) return {};
    const fs::path path(p);
    return path.is_absolute() || base.empty() ? path : base / path;
  };
  c.train_manifest = resolve(kv.take_string("train_manifest", ""));
  c.val_manifest = resolve(kv.take_string("val_manifest", ""));
  c.schedule.total_epochs = c.epochs;
  c.validate();
  return c;
}

// ---- assignment ----

std::size_t AssignedTargets::assigned_cells() const {
  std::size_t n = 0;
  for (const auto& lv : levels)
    n += static_cast<std::size_t>(std::count_if(lv.owner.begin(), lv.owner.end(), [](int o) { return o >= 0; }));
  return n;
}

std::array<float, 4> AssignedTargets::ltrb(std::size_t level, int b, std::size_t row, std::size_t col) const {
  const auto s = static_cast<float>(levels[level].stride);
  const float cx = (static_cast<float>(col) + 0.5f) * s;
  const float cy = (static_cast<float>(row) + 0.5f) * s;
  const auto& box = boxes[static_cast<std::size_t>(b)];
  return {(cx - box.x1) / s, (cy - box.y1) / s, (box.x2 - cx) / s, (box.y2 - cy) / s};
}

AssignedTargets assign_targets(const std::vector<std::vector<Annotation>>& gts, int image_size,
                               const std::vector<int>& strides) {
  if (strides.size() != 3) throw Error("assign_targets: expected three strides");
  AssignedTargets t;
  const std::size_t batch = gts.size();
  for (int s : strides) {
    if (s <= 0 || image_size % s) throw DimensionError("assign_targets", "stride", "input size not divisible by stride");
    const auto side = static_cast<std::size_t>(image_size / s);
    t.levels.push_back({s, side, side, std::vector<int>(batch * side * side, -1)});
  }
  const auto size = static_cast<float>(image_size);
  const double ratio = image_size / 640.0;

  std::vector<std::size_t> nominal;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t k = 0; k < gts[n].size(); ++k) {
      BBox b = gts[n][k].bbox;
      b.x1 = std::clamp(b.x1, 0.0f, size);
      b.y1 = std::clamp(b.y1, 0.0f, size);
      b.x2 = std::clamp(b.x2, 0.0f, size);
      b.y2 = std::clamp(b.y2, 0.0f, size);
      if (!(b.x2 > b.x1 && b.y2 > b.y1)) {
        t.warnings.push_back("image " + std::to_string(n) + " box " + std::to_string(k) +
                             " lies outside the input after clamping; skipped");
        continue;
      }
      const double side = std::max(b.width(), b.height());
      nominal.push_back(side < 64.0 * ratio ? 0 : side <= 160.0 * ratio ? 1 : 2);
      t.boxes.push_back(b);
      t.classes.push_back(gts[n][k].class_id);
      t.images.push_back(n);
    }

  const auto cell_of = [&](std::size_t level, float v) {
    const auto& lv = t.levels[level];
    const auto c = static_cast<long>(std::floor(v / static_cast<float>(lv.stride)));
    return static_cast<std::size_t>(std::clamp<long>(c, 0, static_cast<long>(lv.width) - 1));
  };
  const auto claim = [&](std::size_t level, std::size_t n, std::size_t row, std::size_t col, int b) {
    auto& lv = t.levels[level];
    int& owner = lv.owner[(n * lv.height + row) * lv.width + col];
    if (owner < 0 || t.boxes[static_cast<std::size_t>(b)].area() < t.boxes[static_cast<std::size_t>(owner)].area())
      owner = b;
  };

  for (std::size_t b = 0; b < t.boxes.size(); ++b) {
    const auto& box = t.boxes[b];
    const std::size_t level = nominal[b];
    const auto& lv = t.levels[level];
    const auto s = static_cast<float>(lv.stride);
    const std::size_t row = cell_of(level, (box.y1 + box.y2) / 2);
    const std::size_t col = cell_of(level, (box.x1 + box.x2) / 2);
    claim(level, t.images[b], row, col, static_cast<int>(b));
    const long dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
    for (int k = 0; k < 4; ++k) {
      const long r = static_cast<long>(row) + dr[k], c = static_cast<long>(col) + dc[k];
      if (r < 0 || c < 0 || r >= static_cast<long>(lv.height) || c >= static_cast<long>(lv.width)) continue;
      const float cx = (static_cast<float>(c) + 0.5f) * s, cy = (static_cast<float>(r) + 0.5f) * s;
      if (cx > box.x1 && cx < box.x2 && cy > box.y1 && cy < box.y2)
        claim(level, t.images[b], static_cast<std::size_t>(r), static_cast<std::size_t>(c), static_cast<int>(b));
    }
  }

  // A box that lost every cell falls back to a free center cell elsewhere.
  std::vector<std::size_t> cells(t.boxes.size(), 0);
  for (const auto& lv : t.levels)
    for (int o : lv.owner)
      if (o >= 0) ++cells[static_cast<std::size_t>(o)];
  for (std::size_t b = 0; b < t.boxes.size(); ++b) {
    if (cells[b]) continue;
    std::array<std::size_t, 3> order = {0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      const auto dx = x > nominal[b] ? x - nominal[b] : nominal[b] - x;
      const auto dy = y > nominal[b] ? y - nominal[b] : nominal[b] - y;
      return dx < dy;
    });
    bool placed = false;
    for (std::size_t level : order) {
      auto& lv = t.levels[level];
      const auto& box = t.boxes[b];
      const std::size_t row = cell_of(level, (box.y1 + box.y2) / 2);
      const std::size_t col = cell_of(level, (box.x1 + box.x2) / 2);
      int& owner = lv.owner[(t.images[b] * lv.height + row) * lv.width + col];
      if (owner < 0) {
        owner = static_cast<int>(b);
        placed = true;
        break;
      }
    }
    if (!placed)
      t.warnings.push_back("image " + std::to_string(t.images[b]) + ": a box found no free cell at any scale");
  }
  return t;
}

// ---- loss ----

namespace {

// Forward-mode dual number carrying derivatives w.r.t. the four predicted
// distances.
struct Dual {
  double v = 0.0;
  std::array<double, 4> d{};
};

Dual operator+(const Dual& a, const Dual& b) {
  Dual r{a.v + b.v, {}};
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] + b.d[i];
  return r;
}
Dual operator-(const Dual& a, const Dual& b) {
  Dual r{a.v - b.v, {}};
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] - b.d[i];
  return r;
}
Dual operator*(const Dual& a, const Dual& b) {
  Dual r{a.v * b.v, {}};
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
  return r;
}
Dual operator/(const Dual& a, const Dual& b) {
  Dual r{a.v / b.v, {}};
  for (int i = 0; i < 4; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
  return r;
}
Dual operator+(const Dual& a, double k) {
  Dual r = a;
  r.v += k;
  return r;
}
Dual operator*(const Dual& a, double k) {
  Dual r{a.v * k, {}};
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * k;
  return r;
}
bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
Dual atan(const Dual& a) {
  Dual r{std::atan(a.v), {}};
  const double k = 1.0 / (1.0 + a.v * a.v);
  for (int i = 0; i < 4; ++i) r.d[i] = a.d[i] * k;
  return r;
}

inline double softplus(double x) { return x > 20.0 ? x : std::log1p(std::exp(x)); }
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
// Binary cross-entropy on a logit; stable for large |x|.
inline double bce(double x, double y) { return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

LossOutput compute_loss(const RawPrediction& raw, const AssignedTargets& targets, const LossWeights& weights) {
  if (raw.levels.size() != targets.levels.size())
    throw DimensionError("compute_loss", "levels", targets.levels.size(), raw.levels.size());
  std::size_t obj_cells = 0, assigned = 0, nc = 0;
  for (std::size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& lv = raw.levels[l];
    const auto& tl = targets.levels[l];
    const auto& os = lv.obj.shape();
    if (os.size() != 4 || os[2] != tl.height || os[3] != tl.width || os[0] * os[2] * os[3] != tl.owner.size())
      throw DimensionError("compute_loss", "H/W", "prediction grid does not match targets at level " + std::to_string(l));
    if (lv.box.shape() != Shape{os[0], 4, os[2], os[3]})
      throw DimensionError("compute_loss", "C", "box map must have 4 channels");
    if (lv.stride != tl.stride) throw DimensionError("compute_loss", "stride", static_cast<std::size_t>(tl.stride),
                                                     static_cast<std::size_t>(lv.stride));
    nc = lv.cls.dim(1);
    obj_cells += lv.obj.numel();
    for (int o : tl.owner) assigned += o >= 0 ? 1 : 0;
  }

  LossBreakdown terms;
  std::vector<std::vector<float>> grads;  // dTotal/dInput per input, same order as `inputs`
  std::vector<Tensor> inputs;
  double box_sum = 0.0, obj_sum = 0.0, cls_sum = 0.0;
  const double obj_scale = weights.obj / static_cast<double>(obj_cells);
  const double box_scale = assigned ? weights.box / static_cast<double>(assigned) : 0.0;
  const double cls_scale = assigned ? weights.cls / static_cast<double>(assigned * nc) : 0.0;

  for (std::size_t l = 0; l < raw.levels.size(); ++l) {
    const auto& lv = raw.levels[l];
    const auto& tl = targets.levels[l];
    const std::size_t plane = tl.height * tl.width;
    const std::size_t batch = lv.obj.dim(0);
    const auto box = lv.box.data(), obj = lv.obj.data(), cls = lv.cls.data();
    std::vector<float> gbox(box.size(), 0.0f), gobj(obj.size(), 0.0f), gcls(cls.size(), 0.0f);
    const double s = tl.stride;
    for (std::size_t n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < plane; ++i) {
        const int owner = tl.owner[n * plane + i];
        const double x = obj[n * plane + i];
        const double y = owner >= 0 ? 1.0 : 0.0;
        obj_sum += bce(x, y);
        gobj[n * plane + i] = static_cast<float>((sigmoid(x) - y) * obj_scale);
        if (owner < 0) continue;

        const auto& g = targets.boxes[static_cast<std::size_t>(owner)];
        const double cx = (static_cast<double>(i % tl.width) + 0.5) * s;
        const double cy = (static_cast<double>(i / tl.width) + 0.5) * s;
        // Work in stride units relative to the cell center; CIoU is scale-free.
        Dual p[4], gt[4];
        double raw4[4];
        for (int k = 0; k < 4; ++k) {
          raw4[k] = box[(n * 4 + k) * plane + i];
          const double d = softplus(raw4[k]);
          p[k].v = k < 2 ? -d : d;
          p[k].d[k] = k < 2 ? -1.0 : 1.0;
        }
        gt[0].v = (g.x1 - cx) / s;
        gt[1].v = (g.y1 - cy) / s;
        gt[2].v = (g.x2 - cx) / s;
        gt[3].v = (g.y2 - cy) / s;
        const Dual c = ciou(p, gt);
        box_sum += 1.0 - c.v;
        for (int k = 0; k < 4; ++k)
          gbox[(n * 4 + k) * plane + i] = static_cast<float>(-c.d[k] * sigmoid(raw4[k]) * box_scale);

        const int target_class = targets.classes[static_cast<std::size_t>(owner)];
        for (std::size_t k = 0; k < nc; ++k) {
          const std::size_t idx = (n * nc + k) * plane + i;
          const double yk = static_cast<int>(k) == target_class ? 1.0 : 0.0;
          cls_sum += bce(cls[idx], yk);
          gcls[idx] = static_cast<float>((sigmoid(cls[idx]) - yk) * cls_scale);
        }
      }
    inputs.insert(inputs.end(), {lv.box, lv.obj, lv.cls});
    grads.push_back(std::move(gbox));
    grads.push_back(std::move(gobj));
    grads.push_back(std::move(gcls));
  }

  terms.obj = obj_sum / static_cast<double>(obj_cells);
  terms.box = assigned ? box_sum / static_cast<double>(assigned) : 0.0;
  terms.cls = assigned ? cls_sum / static_cast<double>(assigned * nc) : 0.0;
  terms.total = weights.box * terms.box + weights.obj * terms.obj + weights.cls * terms.cls;

  auto shared = std::make_shared<std::vector<std::vector<float>>>(std::move(grads));
  Tensor total = detail::make_result({}, {static_cast<float>(terms.total)}, inputs,
                                     [shared](detail::TensorImpl& node) {
                                       const float up = node.grad[0];
                                       for (std::size_t j = 0; j < shared->size(); ++j)
                                         if (float* g = detail::input_grad(node, j)) {
                                           const auto& src = (*shared)[j];
                                           for (std::size_t i = 0; i < src.size(); ++i) g[i] += up * src[i];
                                         }
                                     });
  return {total, terms};
}

// ---- training loop ----

std::vector<LoadedSample> load_training_samples(const Manifest& manifest, int size) {
  std::vector<LoadedSample> out(manifest.entries.size());
  std::vector<std::string> failures(out.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < out.size(); ++i) {
    try {
      auto s = load_sample(manifest.entries[i], i);
      LetterboxMap map;
      out[i].image = letterbox(s.image, size, map);
      for (auto a : s.labels) {
        a.bbox = map.to_network(a.bbox);
        out[i].labels.push_back(a);
      }
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);
  return out;
}

std::string train_log_header() { return "epoch,lr,loss_box,loss_obj,loss_cls,val_map50,val_map5095"; }

std::string train_log_row(const EpochLog& r) {
  return std::to_string(r.epoch) + "," + format_number(r.lr) + "," + format_number(r.loss.box) + "," +
         format_number(r.loss.obj) + "," + format_number(r.loss.cls) + "," + format_number(r.val_map50) + "," +
         format_number(r.val_map5095);
}

namespace {

void hflip_into(const Image& img, float* dst) {
  const auto w = static_cast<std::size_t>(img.width), h = static_cast<std::size_t>(img.height);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y) {
      const float* src = img.pixels.data() + (c * h + y) * w;
      float* out = dst + (c * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) out[x] = src[w - 1 - x];
    }
}

}  // namespace

FitResult fit(Detector& model, const Manifest& train, const Manifest& val, const TrainConfig& config,
              const fs::path& out_dir, const EpochCallback& on_epoch) {
  config.validate();
  if (train.entries.empty()) throw Error("fit: training split is empty");
  const int size = config.image_size;
  if (size % model.config().min_input_multiple())
    throw ConfigError("image_size", "must be divisible by " + std::to_string(model.config().min_input_multiple()));
  fs::create_directories(out_dir);

  const auto samples = load_training_samples(train, size);
  const auto val_samples = load_samples(val);
  const auto strides = model.config().strides();
  LrSchedule schedule = config.schedule;
  schedule.total_epochs = config.epochs;
  AdamW optimizer({0.9f, 0.999f, 1e-8f, config.weight_decay});
  auto& params = model.parameters();
  InferenceOptions eval_opt;
  eval_opt.canvas = size;
  eval_opt.conf = config.eval_conf;
  eval_opt.iou = config.eval_iou;

  FitResult result;
  result.best_checkpoint = out_dir / "best.lmdt";
  result.last_checkpoint = out_dir / "last.lmdt";
  result.log_path = out_dir / "train_log.csv";
  std::ofstream log(result.log_path, std::ios::trunc);
  if (!log) throw Error("cannot write '" + result.log_path.string() + "'");
  log << train_log_header() << '\n';

  const std::size_t n = samples.size();
  const auto bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t batches = (n + bs - 1) / bs;
  const std::size_t image_floats = static_cast<std::size_t>(3) * size * size;
  const auto fsize = static_cast<float>(size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::mt19937_64 rng(config.seed + static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    std::vector<char> flip(n);
    for (auto& f : flip) f = static_cast<double>(rng() >> 11) * 0x1.0p-53 < config.flip_probability;

    EpochLog row;
    row.epoch = epoch + 1;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t begin = b * bs, end = std::min(n, begin + bs);
      std::vector<float> pixels((end - begin) * image_floats);
      std::vector<std::vector<Annotation>> gts;
      for (std::size_t j = begin; j < end; ++j) {
        const auto& s = samples[order[j]];
        float* dst = pixels.data() + (j - begin) * image_floats;
        auto labels = s.labels;
        if (flip[j]) {
          hflip_into(s.image, dst);
          for (auto& a : labels) a.bbox = {fsize - a.bbox.x2, a.bbox.y1, fsize - a.bbox.x1, a.bbox.y2};
        } else {
          std::copy(s.image.pixels.begin(), s.image.pixels.end(), dst);
        }
        gts.push_back(std::move(labels));
      }
      const Tensor x({end - begin, 3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)},
                     std::move(pixels));
      const auto targets = assign_targets(gts, size, strides);
      for (auto& p : params) p.tensor.zero_grad();
      const auto raw = model.forward(x, Mode::Train);
      const auto loss = compute_loss(raw, targets, config.weights);
      if (!std::isfinite(loss.terms.total))
        throw Error("fit: non-finite loss at epoch " + std::to_string(epoch + 1) + " batch " + std::to_string(b + 1) +
                    " (box " + format_number(loss.terms.box) + ", obj " + format_number(loss.terms.obj) + ", cls " +
                    format_number(loss.terms.cls) + ")");
      loss.total.backward();
      row.lr = lr_at(schedule, epoch + static_cast<double>(b + 1) / static_cast<double>(batches));
      optimizer.step(params, static_cast<float>(row.lr));
      row.loss.box += loss.terms.box;
      row.loss.obj += loss.terms.obj;
      row.loss.cls += loss.terms.cls;
      row.loss.total += loss.terms.total;
    }
    row.loss.box /= static_cast<double>(batches);
    row.loss.obj /= static_cast<double>(batches);
    row.loss.cls /= static_cast<double>(batches);
    row.loss.total /= static_cast<double>(batches);

    if (!val_samples.empty()) {
      const auto report = evaluate(model, val_samples, eval_opt);
      row.val_map50 = report.map50;
      row.val_map5095 = report.map5095;
    }
    const auto entries = checkpoint_entries(model, config);
    write_checkpoint(result.last_checkpoint, entries);
    if (epoch == 0 || row.val_map50 > result.best_map50) {
      result.best_map50 = row.val_map50;
      result.best_epoch = row.epoch;
      write_checkpoint(result.best_checkpoint, entries);
    }
    log << train_log_row(row) << '\n' << std::flush;
    result.log.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return result;
}

}  // namespace lumen
