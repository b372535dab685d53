#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "lumen/keyvalue.hpp"
#include "lumen/ops.hpp"
#include "lumen/optim.hpp"
#include "lumen/tensor.hpp"

namespace lumen {

// v8: C2f backbone without attention. v12: the same network with A2 area
// attention after the C2f blocks of the two deepest stages.
enum class Variant { V8, V12 };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& text);

struct ModelConfig {
  int base_channels = 16;
  int num_stages = 4;
  std::vector<int> depth_per_stage = {1, 2, 2, 1};
  int max_channels = 256;
  int neck_depth = 1;
  std::set<int> attention_stages;
  int attention_areas = 4;
  int heads = 2;
  int num_classes = 1;
  int reg_branch_channels = 32;
  int cls_branch_channels = 32;

  // Output channels of backbone stage i (stride 4 * 2^i).
  int stage_channels(int stage) const;
  // Strides of the three pyramid taps, coarsest last.
  std::vector<int> strides() const;
  int min_input_multiple() const { return strides().back(); }

  void validate() const;
  std::string to_text() const;
  // Consumes the model keys of `kv`; other keys are left for the caller.
  static ModelConfig from_keyvalues(KeyValues& kv);

  // Desk-scale preset used by the tests and the default CLI config.
  static ModelConfig desk();
};

ModelConfig with_variant(ModelConfig config, Variant variant);

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : seed_(seed) {}
  // Values depend only on (seed, name), so adding or removing other
  // parameters never changes this one.
  Tensor uniform(const std::string& name, Shape shape, float bound) const;

 private:
  std::uint64_t seed_;
};

struct ParamSink {
  std::vector<Parameter>* params;
  std::vector<NamedTensor>* buffers;
};

class ConvBnAct {
 public:
  ConvBnAct() = default;
  ConvBnAct(const std::string& name, int in_c, int out_c, int kernel, int stride,
            const Initializer& init);

  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(ParamSink sink) const;
  int out_channels() const { return out_c_; }

  static constexpr float kMomentum = 0.03f;
  static constexpr float kEps = 1e-3f;

 private:
  std::string name_;
  int out_c_ = 0, stride_ = 1, padding_ = 0;
  Tensor weight_, gamma_, beta_;
  RunningStats stats_;
};

class Bottleneck {
 public:
  Bottleneck() = default;
  Bottleneck(const std::string& name, int in_c, int out_c, const Initializer& init);
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  ConvBnAct cv1_, cv2_;
  bool residual_ = false;
};

/// Cross-stage partial fusion block.
///
/// A 1x1 conv splits features into two halves; the second half runs through
/// `n` bottlenecks and every intermediate map is kept. All kept maps are
/// concatenated and fused by a second 1x1 conv.
class C2f {
 public:
  C2f() = default;
  C2f(const std::string& name, int in_c, int out_c, int n, const Initializer& init);
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  int hidden_ = 0;
  ConvBnAct cv1_, cv2_;
  std::vector<Bottleneck> blocks_;
};

/// Area attention: the map is cut into `areas` horizontal bands and each band
/// runs multi-head self-attention over its pixels, added back residually.
class A2Attention {
 public:
  A2Attention() = default;
  A2Attention(const std::string& name, int channels, int areas, int heads, const Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(ParamSink sink) const;

 private:
  std::string name_;
  int areas_ = 1, heads_ = 1;
  Tensor wq_, bq_, wk_, bk_, wv_, bv_;
};

class Focus {
 public:
  Focus() = default;
  Focus(const std::string& name, int out_c, const Initializer& init);
  Tensor forward(const Tensor& image, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  ConvBnAct conv_;
};

struct FeaturePyramid {
  Tensor p3, p4, p5;
};

struct LevelPrediction {
  Tensor box;  // [N,4,H,W] raw l,t,r,b distances (pre-softplus, stride units)
  Tensor obj;  // [N,1,H,W] logits
  Tensor cls;  // [N,num_classes,H,W] logits
  int stride = 0;
};

struct RawPrediction {
  std::vector<LevelPrediction> levels;
  int input_size = 0;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const ModelConfig& config, const Initializer& init);
  FeaturePyramid forward(const Tensor& image, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  struct Stage {
    ConvBnAct down;
    C2f c2f;
    bool has_attention = false;
    A2Attention attention;
  };
  Focus stem_;
  std::vector<Stage> stages_;
};

class Neck {
 public:
  Neck() = default;
  Neck(const ModelConfig& config, const Initializer& init);
  FeaturePyramid forward(const FeaturePyramid& p, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  C2f top4_, top3_, bottom4_, bottom5_;
  ConvBnAct down3_, down4_;
};

class DetectHead {
 public:
  DetectHead() = default;
  DetectHead(const ModelConfig& config, const Initializer& init);
  RawPrediction forward(const FeaturePyramid& p, Mode mode) const;
  void collect(ParamSink sink) const;

 private:
  struct Branch {
    ConvBnAct a, b;
    Tensor weight, bias;
  };
  struct Level {
    Branch reg, cls;
    int stride = 0;
  };
  Tensor branch_forward(const Branch& br, const Tensor& x, Mode mode) const;

  int num_classes_ = 1;
  std::vector<Level> levels_;
};

/// Backbone, PANet-style neck and decoupled anchor-free head.
///
/// Forward passes are const: in eval mode nothing is mutated, so a frozen
/// model can serve concurrent callers. Train mode updates BatchNorm running
/// statistics through shared tensor storage.
class Detector {
 public:
  Detector(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  RawPrediction forward(const Tensor& images, Mode mode) const;
  FeaturePyramid backbone_forward(const Tensor& images, Mode mode) const;
  FeaturePyramid neck_forward(const FeaturePyramid& p, Mode mode) const;
  RawPrediction head_forward(const FeaturePyramid& p, Mode mode) const;

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  // Parameters followed by BatchNorm running statistics.
  std::vector<NamedTensor> state() const;
  // Copies values by name; every state entry must be present with its shape.
  void load_state(const std::vector<NamedTensor>& entries);

 private:
  void check_input(const Tensor& images) const;

  ModelConfig config_;
  Backbone backbone_;
  Neck neck_;
  DetectHead head_;
  std::vector<Parameter> params_;
  std::vector<NamedTensor> buffers_;
};

}  // namespace lumen
