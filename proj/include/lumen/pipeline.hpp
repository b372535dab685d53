#pragma once

#include <filesystem>
#include <memory>
#include <vector>

#include "lumen/arch.hpp"
#include "lumen/data.hpp"
#include "lumen/metrics.hpp"
#include "lumen/postprocess.hpp"
#include "lumen/train.hpp"

namespace lumen {

// Model parameters plus the embedded config blocks.
std::vector<NamedTensor> checkpoint_entries(const Detector& model, const TrainConfig& config);

struct LoadedModel {
  std::unique_ptr<Detector> model;
  TrainConfig train;
};

LoadedModel load_model(const std::filesystem::path& checkpoint);

struct StageTimes {
  double preprocess_s = 0.0, forward_s = 0.0, postprocess_s = 0.0;
};

struct InferenceOptions {
  int canvas = 160;  // network input side
  int target = 0;    // letterbox content side; 0 = canvas
  float conf = kDefaultConfThreshold;
  float iou = kDefaultIouThreshold;
};

// letterbox -> forward -> decode -> NMS -> unletterbox, for one frame.
std::vector<Detection> detect(const Detector& model, const Image& frame, const InferenceOptions& opt,
                              StageTimes* times = nullptr);

// Batched eval-mode inference over `samples`; boxes in each image's own frame.
std::vector<std::vector<Detection>> detect_batch(const Detector& model,
                                                 const std::vector<LoadedSample>& samples,
                                                 const InferenceOptions& opt);

std::vector<ImageEval> eval_inputs(const std::vector<LoadedSample>& samples,
                                   const std::vector<std::vector<Detection>>& predictions);

EvalReport evaluate(const Detector& model, const std::vector<LoadedSample>& samples,
                    const InferenceOptions& opt);

std::vector<LoadedSample> load_samples(const Manifest& manifest);

}  // namespace lumen
