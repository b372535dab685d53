#include "lumen/pipeline.hpp"

#include <algorithm>
#include <chrono>

#include "lumen/checkpoint.hpp"

namespace lumen {

namespace {

constexpr const char* kModelConfigEntry = "meta/model_config";
constexpr const char* kTrainConfigEntry = "meta/train_config";
constexpr std::size_t kEvalBatch = 16;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<NamedTensor> checkpoint_entries(const Detector& model, const TrainConfig& config) {
  auto entries = model.state();
  entries.push_back(text_entry(kModelConfigEntry, model.config().to_text()));
  entries.push_back(text_entry(kTrainConfigEntry, config.to_text()));
  return entries;
}

LoadedModel load_model(const std::filesystem::path& checkpoint) {
  const auto entries = read_checkpoint(checkpoint);
  std::string model_text, train_text;
  bool have_model = false;
  for (const auto& e : entries) {
    if (e.name == kModelConfigEntry) {
      model_text = entry_text(e);
      have_model = true;
    } else if (e.name == kTrainConfigEntry) {
      train_text = entry_text(e);
    }
  }
  if (!have_model) throw Error("checkpoint '" + checkpoint.string() + "' has no embedded model config");
  auto mkv = KeyValues::parse(model_text);
  const auto config = ModelConfig::from_keyvalues(mkv);
  mkv.expect_consumed();
  auto tkv = KeyValues::parse(train_text);
  LoadedModel out;
  out.train = TrainConfig::from_keyvalues(tkv);
  out.model = std::make_unique<Detector>(config, 0);
  out.model->load_state(entries);
  return out;
}

std::vector<Detection> detect(const Detector& model, const Image& frame, const InferenceOptions& opt,
                              StageTimes* times) {
  auto t0 = std::chrono::steady_clock::now();
  LetterboxMap map;
  const Image input = letterbox(frame, opt.target ? opt.target : opt.canvas, map, opt.canvas);
  const Tensor x = images_to_tensor({&input});
  const double pre = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  RawPrediction raw;
  {
    NoGradGuard guard;
    raw = model.forward(x, Mode::Eval);
  }
  const double fwd = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  auto dets = nms(decode(raw, opt.conf), opt.iou);
  for (auto& d : dets) d = unletterbox(d, map);
  const double post = seconds_since(t0);
  if (times) *times = {pre, fwd, post};
  return dets;
}

std::vector<std::vector<Detection>> detect_batch(const Detector& model, const std::vector<LoadedSample>& samples,
                                                 const InferenceOptions& opt) {
  std::vector<std::vector<Detection>> out(samples.size());
  NoGradGuard guard;
  for (std::size_t begin = 0; begin < samples.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(samples.size(), begin + kEvalBatch);
    std::vector<Image> inputs(end - begin);
    std::vector<LetterboxMap> maps(end - begin);
    std::vector<const Image*> ptrs;
    for (std::size_t i = begin; i < end; ++i) {
      inputs[i - begin] = letterbox(samples[i].image, opt.target ? opt.target : opt.canvas, maps[i - begin], opt.canvas);
      ptrs.push_back(&inputs[i - begin]);
    }
    const auto raw = model.forward(images_to_tensor(ptrs), Mode::Eval);
    for (std::size_t i = begin; i < end; ++i) {
      auto dets = nms(decode(raw, opt.conf, i - begin), opt.iou);
      for (auto& d : dets) d = unletterbox(d, maps[i - begin]);
      out[i] = std::move(dets);
    }
  }
  return out;
}

std::vector<ImageEval> eval_inputs(const std::vector<LoadedSample>& samples,
                                   const std::vector<std::vector<Detection>>& predictions) {
  if (samples.size() != predictions.size()) throw Error("eval_inputs: prediction count does not match samples");
  std::vector<ImageEval> out(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    auto& e = out[i];
    e.image_id = i;
    e.pred_width = e.gt_width = samples[i].image.width;
    e.pred_height = e.gt_height = samples[i].image.height;
    e.predictions = predictions[i];
    e.ground_truth = samples[i].labels;
    for (auto& a : e.ground_truth) a.image_id = i;
  }
  return out;
}

EvalReport evaluate(const Detector& model, const std::vector<LoadedSample>& samples, const InferenceOptions& opt) {
  if (samples.empty()) throw Error("evaluate: split is empty");
  return map_range(eval_inputs(samples, detect_batch(model, samples, opt)));
}

std::vector<LoadedSample> load_samples(const Manifest& manifest) {
  std::vector<LoadedSample> out(manifest.entries.size());
  std::vector<std::string> failures(out.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < out.size(); ++i) {
    try {
      out[i] = load_sample(manifest.entries[i], i);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  }
  for (const auto& f : failures)
    if (!f.empty()) throw Error(f);
  return out;
}

}  // namespace lumen
