#include "lumen/arch.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

namespace lumen {

std::string variant_name(Variant v) { return v == Variant::V8 ? "v8" : "v12"; }

Variant parse_variant(const std::string& text) {
  if (text == "v8") return Variant::V8;
  if (text == "v12") return Variant::V12;
  throw ConfigError("variant", "expected v8 or v12, got '" + text + "'");
}

int ModelConfig::stage_channels(int stage) const {
  return std::min(base_channels << (stage + 1), max_channels);
}

std::vector<int> ModelConfig::strides() const {
  std::vector<int> s;
  for (int i = num_stages - 3; i < num_stages; ++i) s.push_back(4 << i);
  return s;
}

void ModelConfig::validate() const {
  if (num_stages < 3) throw ConfigError("num_stages", "need at least 3 stages for the pyramid");
  if (base_channels < 2 || base_channels % 2) throw ConfigError("base_channels", "must be even and >= 2");
  if (max_channels < base_channels || max_channels % 2)
    throw ConfigError("max_channels", "must be even and >= base_channels");
  if (static_cast<int>(depth_per_stage.size()) != num_stages)
    throw ConfigError("depth_per_stage", "needs one entry per stage");
  for (int d : depth_per_stage)
    if (d < 0) throw ConfigError("depth_per_stage", "depths must be >= 0");
  if (neck_depth < 0) throw ConfigError("neck_depth", "must be >= 0");
  if (heads < 1) throw ConfigError("heads", "must be >= 1");
  if (base_channels < heads) throw ConfigError("heads", "base_channels must be >= heads");
  if (num_classes < 1) throw ConfigError("num_classes", "must be >= 1");
  if (attention_areas < 1) throw ConfigError("attention_areas", "must be >= 1");
  if (reg_branch_channels < 1) throw ConfigError("reg_branch_channels", "must be >= 1");
  if (cls_branch_channels < 1) throw ConfigError("cls_branch_channels", "must be >= 1");
  for (int s : attention_stages) {
    if (s < 0 || s >= num_stages)
      throw ConfigError("attention_stages", "stage " + std::to_string(s) + " does not exist");
    if (stage_channels(s) % heads)
      throw ConfigError("heads", "stage " + std::to_string(s) + " channels not divisible by heads");
  }
}

std::string ModelConfig::to_text() const {
  std::string out;
  put_kv(out, "base_channels", base_channels);
  put_kv(out, "num_stages", num_stages);
  put_kv(out, "depth_per_stage", depth_per_stage);
  put_kv(out, "max_channels", max_channels);
  put_kv(out, "neck_depth", neck_depth);
  put_kv(out, "attention_stages", std::vector<int>(attention_stages.begin(), attention_stages.end()));
  put_kv(out, "attention_areas", attention_areas);
  put_kv(out, "heads", heads);
  put_kv(out, "num_classes", num_classes);
  put_kv(out, "reg_branch_channels", reg_branch_channels);
  put_kv(out, "cls_branch_channels", cls_branch_channels);
  return out;
}

ModelConfig ModelConfig::from_keyvalues(KeyValues& kv) {
  ModelConfig c = desk();
  c.base_channels = kv.take_int("base_channels", c.base_channels);
  c.num_stages = kv.take_int("num_stages", c.num_stages);
  c.depth_per_stage = kv.take_int_list("depth_per_stage", c.depth_per_stage);
  c.max_channels = kv.take_int("max_channels", c.max_channels);
  c.neck_depth = kv.take_int("neck_depth", c.neck_depth);
  const auto att = kv.take_int_list(
      "attention_stages", std::vector<int>(c.attention_stages.begin(), c.attention_stages.end()));
  c.attention_stages = std::set<int>(att.begin(), att.end());
  c.attention_areas = kv.take_int("attention_areas", c.attention_areas);
  c.heads = kv.take_int("heads", c.heads);
  c.num_classes = kv.take_int("num_classes", c.num_classes);
  c.reg_branch_channels = kv.take_int("reg_branch_channels", c.reg_branch_channels);
  c.cls_branch_channels = kv.take_int("cls_branch_channels", c.cls_branch_channels);
  c.validate();
  return c;
}

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.base_channels = 8;
  c.num_stages = 4;
  c.depth_per_stage = {1, 1, 1, 1};
  c.max_channels = 96;
  c.neck_depth = 1;
  // Deep stages are 10x10 and 5x5 at a 160 input; a single area keeps every
  // desk input size (64..320) valid.
  c.attention_areas = 1;
  c.heads = 2;
  c.num_classes = 1;
  c.reg_branch_channels = 16;
  c.cls_branch_channels = 16;
  return c;
}

ModelConfig with_variant(ModelConfig config, Variant variant) {
  config.attention_stages.clear();
  if (variant == Variant::V12) {
    config.attention_stages.insert(config.num_stages - 2);
    config.attention_stages.insert(config.num_stages - 1);
  }
  return config;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

Tensor param_tensor(Shape shape, float fill) {
  Tensor t(std::move(shape), fill);
  t.set_requires_grad(true);
  return t;
}

}  // namespace

Tensor Initializer::uniform(const std::string& name, Shape shape, float bound) const {
  std::mt19937_64 rng(splitmix(seed_ ^ fnv1a(name)));
  Tensor t(std::move(shape));
  // Raw 24-bit draws keep the values identical across standard libraries.
  for (auto& v : t.data())
    v = bound * (2.0f * static_cast<float>(rng() >> 40) / 16777216.0f - 1.0f);
  t.set_requires_grad(true);
  return t;
}

ConvBnAct::ConvBnAct(const std::string& name, int in_c, int out_c, int kernel, int stride,
                     const Initializer& init)
    : name_(name), out_c_(out_c), stride_(stride), padding_(kernel / 2) {
  const auto fan_in = static_cast<float>(in_c * kernel * kernel);
  weight_ = init.uniform(name + ".conv.weight",
                         {static_cast<std::size_t>(out_c), static_cast<std::size_t>(in_c),
                          static_cast<std::size_t>(kernel), static_cast<std::size_t>(kernel)},
                         1.0f / std::sqrt(fan_in));
  gamma_ = param_tensor({static_cast<std::size_t>(out_c)}, 1.0f);
  beta_ = param_tensor({static_cast<std::size_t>(out_c)}, 0.0f);
  stats_.mean = Tensor({static_cast<std::size_t>(out_c)}, 0.0f);
  stats_.var = Tensor({static_cast<std::size_t>(out_c)}, 1.0f);
}

Tensor ConvBnAct::forward(const Tensor& x, Mode mode) const {
  // Copy of the handles; train-mode updates land in the shared storage.
  RunningStats stats = stats_;
  auto y = conv2d(x, weight_, Tensor(), static_cast<std::size_t>(stride_),
                  static_cast<std::size_t>(padding_));
  return silu(batchnorm2d(y, gamma_, beta_, stats, mode, kMomentum, kEps));
}

void ConvBnAct::collect(ParamSink sink) const {
  sink.params->push_back({name_ + ".conv.weight", weight_, true});
  sink.params->push_back({name_ + ".bn.weight", gamma_, false});
  sink.params->push_back({name_ + ".bn.bias", beta_, false});
  sink.buffers->push_back({name_ + ".bn.running_mean", stats_.mean});
  sink.buffers->push_back({name_ + ".bn.running_var", stats_.var});
}

Bottleneck::Bottleneck(const std::string& name, int in_c, int out_c, const Initializer& init)
    : cv1_(name + ".cv1", in_c, out_c, 3, 1, init),
      cv2_(name + ".cv2", out_c, out_c, 3, 1, init),
      residual_(in_c == out_c) {}

Tensor Bottleneck::forward(const Tensor& x, Mode mode) const {
  auto y = cv2_.forward(cv1_.forward(x, mode), mode);
  return residual_ ? add(x, y) : y;
}

void Bottleneck::collect(ParamSink sink) const {
  cv1_.collect(sink);
  cv2_.collect(sink);
}

C2f::C2f(const std::string& name, int in_c, int out_c, int n, const Initializer& init) {
  if (out_c % 2)
    throw DimensionError("c2f", "channels", "output channels " + std::to_string(out_c) + " are odd");
  hidden_ = out_c / 2;
  cv1_ = ConvBnAct(name + ".cv1", in_c, 2 * hidden_, 1, 1, init);
  for (int i = 0; i < n; ++i)
    blocks_.emplace_back(name + ".m" + std::to_string(i), hidden_, hidden_, init);
  cv2_ = ConvBnAct(name + ".cv2", (2 + n) * hidden_, out_c, 1, 1, init);
}

Tensor C2f::forward(const Tensor& x, Mode mode) const {
  auto y = cv1_.forward(x, mode);
  std::vector<Tensor> kept{slice_channels(y, 0, hidden_), slice_channels(y, hidden_, hidden_)};
  for (const auto& b : blocks_) kept.push_back(b.forward(kept.back(), mode));
  return cv2_.forward(concat_channels(kept), mode);
}

void C2f::collect(ParamSink sink) const {
  cv1_.collect(sink);
  for (const auto& b : blocks_) b.collect(sink);
  cv2_.collect(sink);
}

A2Attention::A2Attention(const std::string& name, int channels, int areas, int heads,
                         const Initializer& init)
    : name_(name), areas_(areas), heads_(heads) {
  if (channels % heads)
    throw DimensionError("a2_attention", "C", "channels " + std::to_string(channels) +
                                                  " not divisible by " + std::to_string(heads) +
                                                  " heads");
  const auto c = static_cast<std::size_t>(channels);
  const float bound = 1.0f / std::sqrt(static_cast<float>(channels));
  wq_ = init.uniform(name + ".q.weight", {c, c, 1, 1}, bound);
  wk_ = init.uniform(name + ".k.weight", {c, c, 1, 1}, bound);
  wv_ = init.uniform(name + ".v.weight", {c, c, 1, 1}, bound);
  bq_ = param_tensor({c}, 0.0f);
  bk_ = param_tensor({c}, 0.0f);
  bv_ = param_tensor({c}, 0.0f);
}

Tensor A2Attention::forward(const Tensor& x) const {
  if (x.rank() == 4 && x.dim(2) % static_cast<std::size_t>(areas_))
    throw DimensionError("a2_attention", "H", "height " + std::to_string(x.dim(2)) +
                                                  " not divisible by " + std::to_string(areas_) +
                                                  " areas");
  const auto areas = static_cast<std::size_t>(areas_);
  auto q = to_band_tokens(conv2d(x, wq_, bq_, 1, 0), areas);
  auto k = to_band_tokens(conv2d(x, wk_, bk_, 1, 0), areas);
  auto v = to_band_tokens(conv2d(x, wv_, bv_, 1, 0), areas);
  auto mixed = attention(q, k, v, static_cast<std::size_t>(heads_));
  return add(x, from_band_tokens(mixed, x.shape(), areas));
}

void A2Attention::collect(ParamSink sink) const {
  sink.params->push_back({name_ + ".q.weight", wq_, true});
  sink.params->push_back({name_ + ".q.bias", bq_, false});
  sink.params->push_back({name_ + ".k.weight", wk_, true});
  sink.params->push_back({name_ + ".k.bias", bk_, false});
  sink.params->push_back({name_ + ".v.weight", wv_, true});
  sink.params->push_back({name_ + ".v.bias", bv_, false});
}

Focus::Focus(const std::string& name, int out_c, const Initializer& init)
    : conv_(name + ".conv", 12, out_c, 3, 1, init) {}

Tensor Focus::forward(const Tensor& image, Mode mode) const {
  return conv_.forward(space_to_depth2x(image), mode);
}

void Focus::collect(ParamSink sink) const { conv_.collect(sink); }

Backbone::Backbone(const ModelConfig& config, const Initializer& init)
    : stem_("backbone.stem", config.base_channels, init) {
  int in_c = config.base_channels;
  for (int i = 0; i < config.num_stages; ++i) {
    const std::string name = "backbone.stage" + std::to_string(i);
    const int out_c = config.stage_channels(i);
    Stage s;
    s.down = ConvBnAct(name + ".down", in_c, out_c, 3, 2, init);
    s.c2f = C2f(name + ".c2f", out_c, out_c, config.depth_per_stage[i], init);
    if (config.attention_stages.count(i)) {
      s.has_attention = true;
      s.attention = A2Attention(name + ".attn", out_c, config.attention_areas, config.heads, init);
    }
    stages_.push_back(std::move(s));
    in_c = out_c;
  }
}

FeaturePyramid Backbone::forward(const Tensor& image, Mode mode) const {
  auto x = stem_.forward(image, mode);
  std::vector<Tensor> taps;
  for (const auto& s : stages_) {
    x = s.c2f.forward(s.down.forward(x, mode), mode);
    if (s.has_attention) x = s.attention.forward(x);
    taps.push_back(x);
  }
  const auto n = taps.size();
  return {taps[n - 3], taps[n - 2], taps[n - 1]};
}

void Backbone::collect(ParamSink sink) const {
  stem_.collect(sink);
  for (const auto& s : stages_) {
    s.down.collect(sink);
    s.c2f.collect(sink);
    if (s.has_attention) s.attention.collect(sink);
  }
}

Neck::Neck(const ModelConfig& config, const Initializer& init) {
  const int n = config.num_stages;
  const int c3 = config.stage_channels(n - 3), c4 = config.stage_channels(n - 2),
            c5 = config.stage_channels(n - 1);
  const int d = config.neck_depth;
  top4_ = C2f("neck.top4", c5 + c4, c4, d, init);
  top3_ = C2f("neck.top3", c4 + c3, c3, d, init);
  down3_ = ConvBnAct("neck.down3", c3, c3, 3, 2, init);
  bottom4_ = C2f("neck.bottom4", c3 + c4, c4, d, init);
  down4_ = ConvBnAct("neck.down4", c4, c4, 3, 2, init);
  bottom5_ = C2f("neck.bottom5", c4 + c5, c5, d, init);
}

FeaturePyramid Neck::forward(const FeaturePyramid& p, Mode mode) const {
  const auto check = [](const Tensor& fine, const Tensor& coarse, const char* axis) {
    if (fine.rank() != 4 || coarse.rank() != 4 || fine.dim(2) != 2 * coarse.dim(2) ||
        fine.dim(3) != 2 * coarse.dim(3))
      throw DimensionError("neck", axis, "pyramid levels must halve spatially");
  };
  check(p.p3, p.p4, "p3/p4");
  check(p.p4, p.p5, "p4/p5");
  auto t4 = top4_.forward(concat_channels(upsample_nearest2x(p.p5), p.p4), mode);
  auto n3 = top3_.forward(concat_channels(upsample_nearest2x(t4), p.p3), mode);
  auto n4 = bottom4_.forward(concat_channels(down3_.forward(n3, mode), t4), mode);
  auto n5 = bottom5_.forward(concat_channels(down4_.forward(n4, mode), p.p5), mode);
  return {n3, n4, n5};
}

void Neck::collect(ParamSink sink) const {
  top4_.collect(sink);
  top3_.collect(sink);
  down3_.collect(sink);
  bottom4_.collect(sink);
  down4_.collect(sink);
  bottom5_.collect(sink);
}

DetectHead::DetectHead(const ModelConfig& config, const Initializer& init)
    : num_classes_(config.num_classes) {
  const int n = config.num_stages;
  const auto strides = config.strides();
  const auto make_branch = [&](const std::string& name, int in_c, int mid, int out,
                               float bias_fill) {
    Branch b;
    b.a = ConvBnAct(name + ".0", in_c, mid, 3, 1, init);
    b.b = ConvBnAct(name + ".1", mid, mid, 3, 1, init);
    b.weight = init.uniform(name + ".pred.weight",
                            {static_cast<std::size_t>(out), static_cast<std::size_t>(mid), 1, 1},
                            1.0f / std::sqrt(static_cast<float>(mid)));
    b.bias = param_tensor({static_cast<std::size_t>(out)}, 0.0f);
    b.bias.data()[0] = bias_fill;
    return b;
  };
  for (int i = 0; i < 3; ++i) {
    const int c = config.stage_channels(n - 3 + i);
    const std::string name = "head.level" + std::to_string(i);
    Level lv;
    lv.reg = make_branch(name + ".reg", c, config.reg_branch_channels, 4, 0.0f);
    // Objectness starts near "background" so early training is not swamped
    // by false positives on every cell.
    lv.cls = make_branch(name + ".cls", c, config.cls_branch_channels, 1 + config.num_classes, -4.0f);
    lv.stride = strides[i];
    levels_.push_back(std::move(lv));
  }
}

Tensor DetectHead::branch_forward(const Branch& br, const Tensor& x, Mode mode) const {
  return conv2d(br.b.forward(br.a.forward(x, mode), mode), br.weight, br.bias, 1, 0);
}

RawPrediction DetectHead::forward(const FeaturePyramid& p, Mode mode) const {
  RawPrediction out;
  const Tensor* maps[3] = {&p.p3, &p.p4, &p.p5};
  const auto nc = static_cast<std::size_t>(num_classes_);
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& lv = levels_[i];
    auto cls = branch_forward(lv.cls, *maps[i], mode);
    out.levels.push_back({branch_forward(lv.reg, *maps[i], mode), slice_channels(cls, 0, 1),
                          slice_channels(cls, 1, nc), lv.stride});
  }
  return out;
}

void DetectHead::collect(ParamSink sink) const {
  const auto collect_branch = [&](const Branch& b, const std::string& name) {
    b.a.collect(sink);
    b.b.collect(sink);
    sink.params->push_back({name + ".pred.weight", b.weight, true});
    sink.params->push_back({name + ".pred.bias", b.bias, false});
  };
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    const std::string name = "head.level" + std::to_string(i);
    collect_branch(levels_[i].reg, name + ".reg");
    collect_branch(levels_[i].cls, name + ".cls");
  }
}

Detector::Detector(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  const Initializer init(seed);
  backbone_ = Backbone(config_, init);
  neck_ = Neck(config_, init);
  head_ = DetectHead(config_, init);
  const ParamSink sink{&params_, &buffers_};
  backbone_.collect(sink);
  neck_.collect(sink);
  head_.collect(sink);
}

void Detector::check_input(const Tensor& images) const {
  if (images.rank() != 4) throw DimensionError("detector", "rank", 4, images.rank());
  if (images.dim(1) != 3) throw DimensionError("detector", "C", 3, images.dim(1));
  if (images.dim(2) != images.dim(3)) throw DimensionError("detector", "W", images.dim(2), images.dim(3));
  const auto multiple = static_cast<std::size_t>(config_.min_input_multiple());
  if (images.dim(2) % multiple)
    throw DimensionError("detector", "H", "input size " + std::to_string(images.dim(2)) +
                                              " not divisible by " + std::to_string(multiple));
}

FeaturePyramid Detector::backbone_forward(const Tensor& images, Mode mode) const {
  check_input(images);
  return backbone_.forward(images, mode);
}

FeaturePyramid Detector::neck_forward(const FeaturePyramid& p, Mode mode) const {
  return neck_.forward(p, mode);
}

RawPrediction Detector::head_forward(const FeaturePyramid& p, Mode mode) const {
  return head_.forward(p, mode);
}

RawPrediction Detector::forward(const Tensor& images, Mode mode) const {
  auto raw = head_forward(neck_forward(backbone_forward(images, mode), mode), mode);
  raw.input_size = static_cast<int>(images.dim(2));
  return raw;
}

std::size_t Detector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::vector<NamedTensor> Detector::state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) out.push_back({p.name, p.tensor});
  for (const auto& b : buffers_) out.push_back(b);
  return out;
}

void Detector::load_state(const std::vector<NamedTensor>& entries) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e.tensor;
  for (auto& [name, tensor] : state()) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw Error("load_state: missing entry '" + name + "'");
    if (it->second->shape() != tensor.shape())
      throw DimensionError("load_state", name, shape_string(tensor.shape()) + " vs " +
                                                   shape_string(it->second->shape()));
    auto dst = tensor.data();
    const auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace lumen
