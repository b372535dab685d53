#include "lumen/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "lumen/data.hpp"
#include "lumen/overlay.hpp"
#include "lumen/pipeline.hpp"
#include "lumen/train.hpp"

namespace lumen {

namespace fs = std::filesystem;

namespace {

// Bad invocation or unusable inputs: exit code 2.
struct UsageError : Error {
  using Error::Error;
};

constexpr std::size_t kStableFrames = 30;

void require_file(const fs::path& p, const std::string& what) {
  if (p.empty()) throw UsageError(what + " not given");
  if (!fs::is_regular_file(p)) throw UsageError(what + " '" + p.string() + "' not found");
}

void require_dir(const fs::path& p, const std::string& what) {
  if (!fs::is_directory(p)) throw UsageError(what + " '" + p.string() + "' is not a directory");
}

KeyValues load_config(const fs::path& p, const std::string& what) {
  require_file(p, what);
  try {
    return KeyValues::load(p);
  } catch (const ParseError& e) {
    throw UsageError(what + " '" + p.string() + "': " + e.what());
  }
}

int round_up32(int v) { return (v + 31) / 32 * 32; }

InferenceOptions inference_options(int size, float conf, float iou, std::ostream& out) {
  if (size <= 0) throw UsageError("--size must be positive");
  if (!(conf >= 0.0f && conf <= 1.0f)) throw UsageError("--conf must be in [0,1]");
  if (!(iou >= 0.0f && iou <= 1.0f)) throw UsageError("--iou must be in [0,1]");
  InferenceOptions opt;
  opt.conf = conf;
  opt.iou = iou;
  opt.canvas = round_up32(size);
  opt.target = size;
  if (opt.canvas != size)
    out << "note: size " << size << " is not a multiple of 32; content letterboxed to " << size << " inside a "
        << opt.canvas << " canvas\n";
  return opt;
}

std::string model_label(const ModelConfig& c) { return c.attention_stages.empty() ? "v8" : "v12"; }

std::vector<fs::path> list_frames(const fs::path& dir) {
  std::vector<fs::path> frames;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename().string().front() != '.') frames.push_back(e.path());
  std::sort(frames.begin(), frames.end());
  return frames;
}

// ---- generate ----

struct GenerateArgs {
  std::string spec;
  std::size_t count = 409;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_generate(const GenerateArgs& a, std::ostream& out) {
  SynthSpec spec;
  if (!a.spec.empty()) {
    auto kv = load_config(a.spec, "spec file");
    spec = SynthSpec::from_keyvalues(kv);
    kv.expect_consumed();
  }
  if (a.seed) spec.seed = *a.seed;
  spec.validate();
  const auto ds = generate_dataset(spec, a.count, a.out);
  for (std::size_t s = 0; s < 4; ++s) out << kSplitNames[s] << ": " << ds.split_manifests[s].string() << '\n';
  out << ds.all_manifest.string() << '\n';
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string config;
  std::string variant = "v8";
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> size;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  const Variant variant = parse_variant(a.variant);
  auto kv = load_config(a.config, "config file");
  const ModelConfig model_config = with_variant(ModelConfig::from_keyvalues(kv), variant);
  TrainConfig tc = TrainConfig::from_keyvalues(kv, fs::path(a.config).parent_path());
  kv.expect_consumed();
  if (a.seed) tc.seed = *a.seed;
  if (a.size) tc.image_size = *a.size;
  tc.validate();
  model_config.validate();
  require_file(tc.train_manifest, "train_manifest");
  require_file(tc.val_manifest, "val_manifest");

  Detector model(model_config, tc.seed);
  out << "variant " << variant_name(variant) << ", " << model.parameter_count() << " parameters\n";
  const auto result = fit(model, read_manifest(tc.train_manifest), read_manifest(tc.val_manifest), tc, a.out,
                          [&](const EpochLog& e) {
                            char line[200];
                            std::snprintf(line, sizeof(line),
                                          "epoch %d/%d lr %.6f box %.4f obj %.4f cls %.4f val mAP@0.5 %.3f "
                                          "mAP@0.5:0.95 %.3f\n",
                                          e.epoch, tc.epochs, e.lr, e.loss.box, e.loss.obj, e.loss.cls, e.val_map50,
                                          e.val_map5095);
                            out << line << std::flush;
                          });
  out << "best epoch " << result.best_epoch << " (val mAP@0.5 " << format_number(result.best_map50) << ")\n"
      << "checkpoint " << result.best_checkpoint.string() << '\n'
      << "log " << result.log_path.string() << '\n';
  return kExitOk;
}

// ---- eval ----

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out = ".";
  std::optional<int> size;
  float conf = kDefaultConfThreshold;
  float iou = kDefaultIouThreshold;
  bool oracle = false;
  std::string name;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_file(a.manifest, "manifest");
  const auto manifest = read_manifest(a.manifest);
  if (manifest.entries.empty()) throw UsageError("manifest '" + a.manifest + "' has no samples");
  std::optional<LoadedModel> loaded;
  if (!a.oracle) {
    require_file(a.checkpoint, "checkpoint");
    loaded = load_model(a.checkpoint);
  }
  const auto samples = load_samples(manifest);
  std::vector<std::vector<Detection>> preds(samples.size());
  std::string model_name = a.name;
  if (a.oracle) {
    for (std::size_t i = 0; i < samples.size(); ++i)
      for (const auto& g : samples[i].labels) preds[i].push_back({g.bbox, 1.0f, g.class_id});
    if (model_name.empty()) model_name = "oracle";
  } else {
    const auto opt = inference_options(a.size.value_or(loaded->train.image_size), a.conf, a.iou, out);
    preds = detect_batch(*loaded->model, samples, opt);
    if (model_name.empty()) model_name = model_label(loaded->model->config());
  }
  const auto report = map_range(eval_inputs(samples, preds));
  const std::string dataset = fs::path(a.manifest).stem().string();

  fs::create_directories(a.out);
  const std::string row = table_row(model_name, dataset, report);
  auto j = nlohmann::ordered_json::parse(report_json(report));
  j["model"] = model_name;
  j["dataset"] = dataset;
  j["table_row"] = row;
  std::ofstream(fs::path(a.out) / "report.json", std::ios::trunc) << j.dump(2) << '\n';
  export_pr_curve(report, fs::path(a.out) / "pr_curve.csv");
  if (report.pr_curve_degenerate) out << "warning: no predictions; PR curve is degenerate\n";
  out << table_header() << '\n' << row << '\n';
  return kExitOk;
}

// ---- detect ----

struct DetectArgs {
  std::string checkpoint;
  std::string frames;
  std::string out;
  std::optional<int> size;
  float conf = kDefaultConfThreshold;
  float iou = kDefaultIouThreshold;
};

int cmd_detect(const DetectArgs& a, std::ostream& out, std::ostream& err) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.frames, "frames directory");
  const auto loaded = load_model(a.checkpoint);
  const auto opt = inference_options(a.size.value_or(loaded.train.image_size), a.conf, a.iou, out);
  fs::create_directories(a.out);
  std::ofstream jsonl(fs::path(a.out) / "detections.jsonl", std::ios::trunc);
  if (!jsonl) throw Error("cannot write detections to '" + a.out + "'");

  nlohmann::ordered_json skipped = nlohmann::ordered_json::array();
  std::size_t processed = 0, total = 0;
  const auto frames = list_frames(a.frames);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    Image frame;
    try {
      frame = load_image(frames[i]);
    } catch (const std::exception& e) {
      err << "warning: skipping " << frames[i].filename().string() << ": " << e.what() << '\n';
      skipped.push_back({{"frame", frames[i].filename().string()}, {"reason", e.what()}});
      continue;
    }
    const auto dets = detect(*loaded.model, frame, opt);
    const std::string name = frames[i].filename().string();
    for (const auto& d : dets) jsonl << detection_json(name, d) << '\n';
    Image annotated = frame;
    annotate_frame(annotated, dets, "FRAME " + std::to_string(i) + " DET " + std::to_string(dets.size()));
    save_image(annotated, fs::path(a.out) / (frames[i].stem().string() + ".ppm"));
    ++processed;
    total += dets.size();
  }
  nlohmann::ordered_json summary;
  summary["frames"] = frames.size();
  summary["processed"] = processed;
  summary["detections"] = total;
  summary["skipped"] = skipped;
  std::ofstream(fs::path(a.out) / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  out << processed << " frames processed, " << skipped.size() << " skipped, " << total << " detections\n";
  return kExitOk;
}

// ---- bench ----

struct BenchArgs {
  std::string checkpoint;
  std::string frames;
  std::string out = ".";
  std::optional<int> size;
  float conf = kDefaultConfThreshold;
  float iou = kDefaultIouThreshold;
  int warmup = 1;
};

int cmd_bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.frames, "frames directory");
  const auto loaded = load_model(a.checkpoint);
  const auto opt = inference_options(a.size.value_or(loaded.train.image_size), a.conf, a.iou, out);

  BenchReport r;
  r.input_size = opt.canvas;
  std::vector<Image> frames;
  for (const auto& p : list_frames(a.frames)) {
    try {
      frames.push_back(load_image(p));
    } catch (const std::exception& e) {
      r.warnings.push_back("skipped " + p.filename().string() + ": " + e.what());
    }
  }
  if (frames.empty()) throw UsageError("no readable frames in '" + a.frames + "'");
  if (frames.size() < kStableFrames) {
    r.unstable = true;
    r.warnings.push_back("only " + std::to_string(frames.size()) + " frames; at least " +
                         std::to_string(kStableFrames) + " are needed for stable timing");
  }
  for (int i = 0; i < a.warmup; ++i) detect(*loaded.model, frames[static_cast<std::size_t>(i) % frames.size()], opt);

  StageTimes sum, t;
  const auto t0 = std::chrono::steady_clock::now();
  for (const auto& f : frames) {
    detect(*loaded.model, f, opt, &t);
    sum.preprocess_s += t.preprocess_s;
    sum.forward_s += t.forward_s;
    sum.postprocess_s += t.postprocess_s;
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.frames_processed = frames.size();
  const auto n = static_cast<double>(r.frames_processed);
  r.fps = n / r.wall_time_s;
  r.preprocess_ms = sum.preprocess_s * 1e3 / n;
  r.forward_ms = sum.forward_s * 1e3 / n;
  r.postprocess_ms = sum.postprocess_s * 1e3 / n;
  r.total_ms = r.wall_time_s * 1e3 / n;

  fs::create_directories(a.out);
  std::ofstream(fs::path(a.out) / "bench.json", std::ios::trunc) << bench_json(r) << '\n';
  for (const auto& w : r.warnings) err << "warning: " << w << '\n';
  char line[200];
  std::snprintf(line, sizeof(line),
                "%zu frames in %.3f s: %.2f FPS (preprocess %.2f ms, forward %.2f ms, postprocess %.2f ms)\n",
                r.frames_processed, r.wall_time_s, r.fps, r.preprocess_ms, r.forward_ms, r.postprocess_ms);
  out << line;
  return kExitOk;
}

// ---- ablate ----

struct AblateArgs {
  std::string checkpoint;
  std::string manifest;
  std::string out = ".";
  std::vector<int> sizes = {160, 96, 64};
  float conf = kDefaultConfThreshold;
  float iou = kDefaultIouThreshold;
};

int cmd_ablate(const AblateArgs& a, std::ostream& out) {
  require_file(a.checkpoint, "checkpoint");
  require_file(a.manifest, "manifest");
  if (a.sizes.empty()) throw UsageError("--sizes is empty");
  const auto loaded = load_model(a.checkpoint);
  const auto manifest = read_manifest(a.manifest);
  if (manifest.entries.empty()) throw UsageError("manifest '" + a.manifest + "' has no samples");
  const auto samples = load_samples(manifest);

  fs::create_directories(a.out);
  std::ofstream csv(fs::path(a.out) / "ablation.csv", std::ios::trunc);
  if (!csv) throw Error("cannot write ablation table to '" + a.out + "'");
  csv << "size,map50,map5095,fps\n";
  out << "size  mAP@0.5  mAP@0.5:0.95  FPS\n";
  for (int size : a.sizes) {
    const auto opt = inference_options(size, a.conf, a.iou, out);
    const auto report = evaluate(*loaded.model, samples, opt);
    // Sequential batch-1 pass for throughput, as in bench.
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& s : samples) detect(*loaded.model, s.image, opt);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double fps = static_cast<double>(samples.size()) / wall;
    csv << size << ',' << format_number(report.map50) << ',' << format_number(report.map5095) << ','
        << format_number(fps) << '\n';
    char line[128];
    std::snprintf(line, sizeof(line), "%-4d  %.3f    %.3f         %.1f\n", size, report.map50, report.map5095, fps);
    out << line;
  }
  return kExitOk;
}

std::uint64_t parse_seed(long long v) {
  if (v < 0) throw UsageError("--seed must be >= 0");
  return static_cast<std::uint64_t>(v);
}

}  // namespace

std::string bench_json(const BenchReport& r) {
  nlohmann::ordered_json j;
  j["frames_processed"] = r.frames_processed;
  j["wall_time_s"] = r.wall_time_s;
  j["fps"] = r.fps;
  j["input_size"] = r.input_size;
  j["latency_ms"] = {{"preprocess", r.preprocess_ms},
                     {"forward", r.forward_ms},
                     {"postprocess", r.postprocess_ms},
                     {"total_per_frame", r.total_ms}};
  j["unstable"] = r.unstable;
  j["warnings"] = r.warnings;
  return j.dump(2);
}

std::string table_header() {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%-8s %-10s %-9s %-8s %-12s", "Model", "Dataset", "Precision", "mAP@0.5",
                "mAP@0.5:0.95");
  return buf;
}

std::string table_row(const std::string& model, const std::string& dataset, const EvalReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-8s %-10s %-9.3f %-8.3f %-12.3f", model.c_str(), dataset.c_str(),
                report.precision_best_f1, report.map50, report.map5095);
  std::string s = buf;
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lumen: bronchial-orifice detection toolkit", "lumen"};
  app.require_subcommand(1);

  GenerateArgs gen;
  long long gen_seed = -1;
  auto* g = app.add_subcommand("generate", "Render a synthetic dataset with train/val/test1/test2 splits");
  g->add_option("--spec", gen.spec, "SynthSpec key=value file (defaults when omitted)");
  g->add_option("--count", gen.count, "Number of images")->capture_default_str();
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--seed", gen_seed, "Override the spec seed");

  TrainArgs tr;
  long long tr_seed = -1;
  int tr_size = 0;
  auto* t = app.add_subcommand("train", "Train a detector from a config file");
  t->add_option("--config", tr.config, "Model and training key=value file")->required();
  t->add_option("--variant", tr.variant, "v8 or v12")->capture_default_str();
  t->add_option("--out", tr.out, "Run directory")->required();
  t->add_option("--seed", tr_seed, "Override the config seed");
  t->add_option("--size", tr_size, "Override the input size");

  EvalArgs ev;
  int ev_size = 0;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file");
  e->add_option("--manifest", ev.manifest, "Split manifest")->required();
  e->add_option("--out", ev.out, "Report directory")->capture_default_str();
  e->add_option("--size", ev_size, "Input size (default: training size)");
  e->add_option("--conf", ev.conf, "Confidence threshold")->capture_default_str();
  e->add_option("--iou", ev.iou, "NMS IoU threshold")->capture_default_str();
  e->add_flag("--oracle", ev.oracle, "Score the labels themselves as predictions");
  e->add_option("--name", ev.name, "Model name for the table row");
  e->add_option("--seed", gen_seed, "Unused; accepted for a uniform interface");

  DetectArgs de;
  int de_size = 0;
  auto* d = app.add_subcommand("detect", "Annotate a directory of frames");
  d->add_option("--checkpoint", de.checkpoint, "Checkpoint file")->required();
  d->add_option("--frames", de.frames, "Frame directory (lexicographic order)")->required();
  d->add_option("--out", de.out, "Output directory")->required();
  d->add_option("--size", de_size, "Input size (default: training size)");
  d->add_option("--conf", de.conf, "Confidence threshold")->capture_default_str();
  d->add_option("--iou", de.iou, "NMS IoU threshold")->capture_default_str();

  BenchArgs be;
  int be_size = 0;
  auto* b = app.add_subcommand("bench", "Sequential batch-1 throughput benchmark");
  b->add_option("--checkpoint", be.checkpoint, "Checkpoint file")->required();
  b->add_option("--frames", be.frames, "Frame directory")->required();
  b->add_option("--out", be.out, "Directory for bench.json")->capture_default_str();
  b->add_option("--size", be_size, "Input size (default: training size)");
  b->add_option("--conf", be.conf, "Confidence threshold")->capture_default_str();
  b->add_option("--iou", be.iou, "NMS IoU threshold")->capture_default_str();
  b->add_option("--warmup", be.warmup, "Untimed warmup frames")->capture_default_str();

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Evaluate one checkpoint at several input sizes");
  a->add_option("--checkpoint", ab.checkpoint, "Checkpoint file")->required();
  a->add_option("--manifest", ab.manifest, "Split manifest")->required();
  a->add_option("--out", ab.out, "Directory for ablation.csv")->capture_default_str();
  a->add_option("--sizes", ab.sizes, "Input sizes")->delimiter(',')->capture_default_str();
  a->add_option("--conf", ab.conf, "Confidence threshold")->capture_default_str();
  a->add_option("--iou", ab.iou, "NMS IoU threshold")->capture_default_str();

  std::vector<const char*> argv = {"lumen"};
  for (const auto& s : args) argv.push_back(s.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g->parsed()) {
      if (gen_seed >= 0) gen.seed = parse_seed(gen_seed);
      return cmd_generate(gen, out);
    }
    if (t->parsed()) {
      if (tr_seed >= 0) tr.seed = parse_seed(tr_seed);
      if (tr_size > 0) tr.size = tr_size;
      return cmd_train(tr, out);
    }
    if (e->parsed()) {
      if (ev_size > 0) ev.size = ev_size;
      return cmd_eval(ev, out);
    }
    if (d->parsed()) {
      if (de_size > 0) de.size = de_size;
      return cmd_detect(de, out, err);
    }
    if (b->parsed()) {
      if (be_size > 0) be.size = be_size;
      return cmd_bench(be, out, err);
    }
    if (a->parsed()) return cmd_ablate(ab, out);
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const ConfigError& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace lumen
