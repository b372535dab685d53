// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
//   lumen_acceptance --work <dir> [--only 1,2,...]
//
// The training criteria (5-9) share one dataset and the seed-1 runs, so they
// are evaluated in order and reuse what earlier ones produced.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gradient_suite.hpp"
#include "lumen/arch.hpp"
#include "lumen/checkpoint.hpp"
#include "lumen/commands.hpp"
#include "lumen/data.hpp"
#include "lumen/metrics.hpp"
#include "lumen/postprocess.hpp"
#include "support.hpp"

using namespace lumen;
using namespace lumen::testing;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), format, args...);
  return buf;
}

struct Verdict {
  bool pass = false;
  std::string detail;
  std::vector<std::string> notes;
};

// Thrown when a CLI step fails; the criterion is reported as FAIL.
struct StepFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != kExitOk) {
    std::string line = "lumen";
    for (const auto& a : args) line += " " + a;
    throw StepFailed(line + " exited " + std::to_string(code) + ": " + err.str());
  }
  return out.str();
}

nlohmann::json read_json(const fs::path& p) { return nlohmann::json::parse(read_file(p)); }

// ---- the shared training workspace ----

constexpr int kEpochs = 30;
constexpr std::size_t kImages = 409;  // 300 train images at the default split fractions

class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) {}

  const fs::path& root() const { return root_; }

  fs::path dataset(int seed) {
    const auto dir = root_ / ("data_s" + std::to_string(seed));
    if (!fs::exists(dir / "train.tsv"))
      cli({"generate", "--count", std::to_string(kImages), "--out", dir.string(), "--seed", std::to_string(seed)});
    return dir;
  }

  // Desk config pointing at the dataset of `data_seed`.
  fs::path config(int data_seed) {
    const auto data = dataset(data_seed);
    const auto path = root_ / ("desk_s" + std::to_string(data_seed) + ".cfg");
    if (!fs::exists(path)) {
      std::string text = ModelConfig::desk().to_text();
      put_kv(text, "epochs", kEpochs);
      put_kv(text, "image_size", 160);
      put_kv(text, "train_manifest", (data / "train.tsv").string());
      put_kv(text, "val_manifest", (data / "val.tsv").string());
      write_file(path, text);
    }
    return path;
  }

  fs::path run(const std::string& variant, int seed, const std::string& tag = "") {
    const auto dir = root_ / (variant + "_s" + std::to_string(seed) + tag);
    if (!fs::exists(dir / "best.lmdt")) {
      const auto t0 = Clock::now();
      cli({"train", "--config", config(seed).string(), "--variant", variant, "--out", dir.string(), "--seed",
           std::to_string(seed)});
      train_seconds_[dir.string()] = seconds_since(t0);
    }
    return dir;
  }

  double train_seconds(const fs::path& run) const {
    const auto it = train_seconds_.find(run.string());
    return it == train_seconds_.end() ? 0.0 : it->second;
  }

  // Evaluates `run`'s best checkpoint on split `split` of dataset `seed`.
  nlohmann::json eval(const fs::path& run, const std::string& name, int seed, const std::string& split) {
    const auto out = root_ / "eval" / (run.filename().string() + "_" + split);
    cli({"eval", "--checkpoint", (run / "best.lmdt").string(), "--manifest",
         (dataset(seed) / (split + ".tsv")).string(), "--out", out.string(), "--name", name});
    return read_json(out / "report.json");
  }

 private:
  fs::path root_;
  std::map<std::string, double> train_seconds_;
};

// ---- criteria ----

Verdict criterion_nms() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1001);
  std::size_t compared = 0, mismatches = 0;
  for (int instance = 0; instance < 1000; ++instance) {
    const auto dets = random_detections(rng, 20);
    for (float thr : {0.3f, 0.45f, 0.7f}) {
      auto kept = nms_indices(dets, thr);
      std::sort(kept.begin(), kept.end());
      mismatches += kept != oracle_nms(dets, thr);
      ++compared;
    }
  }
  const double s = seconds_since(t0);
  return {mismatches == 0 && s < 10.0,
          fmt("NMS equals the brute-force reference on %zu/%zu (instance, threshold) pairs in %.2f s (limit 10 s)",
              compared - mismatches, compared, s)};
}

Verdict criterion_map() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1002);
  double worst = 0.0;
  for (int scene = 0; scene < 200; ++scene) {
    const auto sc = random_scene(rng, 4, 5, 8);
    worst = std::max(worst, std::abs(map_range(sc.images).map50 - oracle_ap(sc.images, 0.5)));
  }
  std::vector<Match> fixture = {{0.9f, true, 0, 0}, {0.8f, false, 0, 1}, {0.7f, true, 0, 2}};
  const double ap = average_precision(fixture, 2).ap;
  const double expected = (51.0 + 50.0 * 2.0 / 3.0) / 101.0;
  const double s = seconds_since(t0);
  return {worst <= 1e-9 && std::abs(ap - expected) < 1e-12 && s < 10.0,
          fmt("max |map50 - oracle| over 200 scenes = %.1e (limit 1e-9); TP,FP,TP fixture AP = %.4f "
              "(hand trace %.4f); %.2f s (limit 10 s)",
              worst, ap, expected, s)};
}

Verdict criterion_gradients() {
  const auto t0 = Clock::now();
  const auto cases = run_gradient_suite();
  const double s = seconds_since(t0);
  struct Family {
    std::size_t total = 0, failed = 0;
    double worst = 0.0, tolerance = 0.0;
  };
  std::map<std::string, Family> families;
  std::size_t failed = 0;
  for (const auto& c : cases) {
    auto& f = families[c.family];
    ++f.total;
    f.tolerance = c.tolerance;
    f.worst = std::max(f.worst, c.result.max_rel_error);
    if (!c.passed()) {
      ++f.failed;
      ++failed;
    }
  }
  Verdict v;
  v.pass = failed == 0 && cases.size() >= 100 && s < 300.0;
  std::string failing;
  for (const auto& [name, f] : families)
    if (f.failed) failing += fmt(" %s %zu/%zu (worst rel err %.2e, limit %.0e);", name.c_str(), f.failed, f.total, f.worst, f.tolerance);
  v.detail = fmt("%zu cases in %.1f s (limit 300 s), %zu failing", cases.size(), s, failed);
  if (!failing.empty()) v.detail += ":" + failing.substr(0, failing.size() - 1);
  for (const auto& [name, f] : families)
    v.notes.push_back(fmt("%-18s %4zu cases, worst rel err %.2e (limit %.0e)", name.c_str(), f.total, f.worst, f.tolerance));
  if (families["neck"].failed) {
    // Evidence that the neck's backward pass is right and the central
    // difference is what runs out of float32 precision.
    double worst = 0.0;
    std::size_t pass = 0;
    for (std::size_t seed = 0; seed < 10; ++seed) {
      const auto c = run_block_case("neck", seed, {1e-2, true});
      worst = std::max(worst, c.result.max_rel_error);
      pass += c.passed();
    }
    v.notes.push_back(fmt("neck with a five-point stencil at h=1e-2: %zu/10 pass, worst rel err %.2e", pass, worst));
  }
  return v;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin(),
                                              [](float x, float y) { return std::memcmp(&x, &y, sizeof x) == 0; });
}

Verdict criterion_variants() {
  auto cleared = with_variant(ModelConfig::desk(), Variant::V12);
  cleared.attention_stages.clear();
  const auto v8_config = with_variant(ModelConfig::desk(), Variant::V8);
  std::size_t compared = 0, equal = 0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Detector a(cleared, seed), b(v8_config, seed);
    std::mt19937_64 rng(seed);
    const auto x = random_tensor({2, 3, 160, 160}, rng, 0.0f, 1.0f);
    for (Mode mode : {Mode::Eval, Mode::Train}) {
      const auto ra = a.forward(x, mode), rb = b.forward(x, mode);
      for (std::size_t l = 0; l < 3; ++l) {
        compared += 3;
        equal += bitwise_equal(ra.levels[l].box, rb.levels[l].box) + bitwise_equal(ra.levels[l].obj, rb.levels[l].obj) +
                 bitwise_equal(ra.levels[l].cls, rb.levels[l].cls);
      }
    }
  }
  const Detector full(with_variant(ModelConfig::desk(), Variant::V12), 1), base(v8_config, 1);
  return {compared == equal,
          fmt("v12 with attention removed vs v8: %zu/%zu head maps bitwise equal (3 seeds, eval and train mode); "
              "parameters %zu vs %zu, v12 with attention %zu",
              equal, compared, Detector(cleared, 1).parameter_count(), base.parameter_count(), full.parameter_count())};
}

Verdict criterion_training(Workspace& ws) {
  const auto t0 = Clock::now();
  const auto data = ws.dataset(1);
  const std::size_t train_images = read_manifest(data / "train.tsv").entries.size();
  const auto v8 = ws.run("v8", 1), v12 = ws.run("v12", 1);
  std::vector<std::string> rows;
  double v8_test1 = 0.0, v12_test1 = 0.0;
  for (const auto& [run, name] : {std::pair{v8, "v8"}, std::pair{v12, "v12"}})
    for (const char* split : {"test1", "test2"}) {
      const auto report = ws.eval(run, name, 1, split);
      rows.push_back(report["table_row"]);
      if (std::string(split) == "test1") (std::string(name) == "v8" ? v8_test1 : v12_test1) = report["map50"];
    }
  const double s = seconds_since(t0);
  const std::size_t params = Detector(with_variant(ModelConfig::desk(), Variant::V8), 1).parameter_count();
  Verdict v;
  v.pass = v8_test1 >= 0.60 && params <= 500000 && s < 1800.0;
  v.detail = fmt("v8 (%zu params, limit 500000) trained on %zu images at 160 for %d epochs: test1 mAP@0.5 %.3f "
                 "(limit >= 0.60); v12 completed the same run, test1 mAP@0.5 %.3f; %.0f s (limit 1800 s)",
                 params, train_images, kEpochs, v8_test1, v12_test1, s);
  v.notes.push_back(table_header());
  for (const auto& r : rows) v.notes.push_back(r);
  v.notes.push_back(fmt("training time: v8 %.0f s, v12 %.0f s", ws.train_seconds(v8), ws.train_seconds(v12)));
  return v;
}

Verdict criterion_domain_gap(Workspace& ws) {
  Verdict v;
  v.pass = true;
  std::string parts;
  for (int seed : {1, 2, 3}) {
    const auto run = ws.run("v8", seed);
    const double t1 = ws.eval(run, "v8", seed, "test1")["map50"];
    const double t2 = ws.eval(run, "v8", seed, "test2")["map50"];
    const bool ok = t2 <= t1 - 0.05;
    v.pass = v.pass && ok;
    parts += fmt(" seed %d: test1 %.3f, test2 %.3f, gap %.3f%s;", seed, t1, t2, t1 - t2, ok ? "" : " (too small)");
  }
  v.detail = "mAP@0.5 drop on the shifted split (limit >= 0.05, data and training seed varied):" +
             parts.substr(0, parts.size() - 1);
  return v;
}

Verdict criterion_ablation(Workspace& ws) {
  const auto run = ws.run("v8", 1);
  const auto out = ws.root() / "ablation";
  cli({"ablate", "--checkpoint", (run / "best.lmdt").string(), "--manifest", (ws.dataset(1) / "test1.tsv").string(),
       "--out", out.string(), "--sizes", "160,96,64"});
  std::ifstream csv(out / "ablation.csv");
  std::string line;
  std::getline(csv, line);
  std::vector<std::pair<int, double>> rows;
  while (std::getline(csv, line)) {
    std::istringstream ls(line);
    std::string size, map50;
    std::getline(ls, size, ',');
    std::getline(ls, map50, ',');
    rows.emplace_back(std::stoi(size), std::stod(map50));
  }
  if (rows.size() != 3) return {false, "ablation.csv does not have three rows"};
  const bool decreasing = rows[0].second > rows[1].second && rows[1].second > rows[2].second;
  const bool sharp = rows[2].second < 0.6 * rows[0].second;
  return {decreasing && sharp,
          fmt("mAP@0.5 at 160/96/64 = %.3f/%.3f/%.3f: %s; 64 is %.0f%% of 160 (limit < 60%%)", rows[0].second,
              rows[1].second, rows[2].second, decreasing ? "strictly decreasing" : "NOT strictly decreasing",
              100.0 * rows[2].second / rows[0].second)};
}

Verdict criterion_determinism(Workspace& ws) {
  const auto a = ws.run("v8", 1), b = ws.run("v8", 1, "_repeat");
  std::vector<std::string> differing;
  for (const char* f : {"train_log.csv", "best.lmdt", "last.lmdt"})
    if (read_file(a / f) != read_file(b / f)) differing.push_back(f);
  std::string detail = fmt("two %d-epoch v8 runs with seed 1: train_log.csv, best.lmdt and last.lmdt ", kEpochs);
  if (differing.empty()) return {true, detail + "byte-identical"};
  for (const auto& f : differing) detail += f + " ";
  return {false, detail + "differ"};
}

Verdict criterion_bench(Workspace& ws) {
  const auto frames = ws.root() / "frames";
  fs::remove_all(frames);
  fs::create_directories(frames);
  std::size_t n = 0;
  for (const char* split : {"test1", "test2"})
    for (const auto& e : read_manifest(ws.dataset(1) / (std::string(split) + ".tsv")).entries)
      fs::copy_file(e.image, frames / fmt("frame%04zu.ppm", n++));
  const auto out = ws.root() / "bench";
  cli({"bench", "--checkpoint", (ws.run("v8", 1) / "best.lmdt").string(), "--frames", frames.string(), "--out",
       out.string()});
  const auto j = read_json(out / "bench.json");

  const std::set<std::string> expected = {"frames_processed", "wall_time_s", "fps", "input_size", "latency_ms",
                                          "unstable", "warnings"};
  const std::set<std::string> expected_latency = {"preprocess", "forward", "postprocess", "total_per_frame"};
  std::set<std::string> keys, latency_keys;
  for (const auto& [k, _] : j.items()) keys.insert(k);
  for (const auto& [k, _] : j["latency_ms"].items()) latency_keys.insert(k);
  const bool schema = keys == expected && latency_keys == expected_latency;

  const double frames_done = j["frames_processed"], wall = j["wall_time_s"], fps = j["fps"];
  const double fps_error = std::abs(fps - frames_done / wall);
  const auto& lat = j["latency_ms"];
  const double stages = lat["preprocess"].get<double>() + lat["forward"].get<double>() + lat["postprocess"].get<double>();
  const double total = lat["total_per_frame"];
  const bool ok = schema && frames_done >= 30 && fps_error <= 1e-9 && stages <= total && !j["unstable"].get<bool>();
  return {ok, fmt("%.0f frames in %.3f s, fps %.3f (|fps - frames/wall| = %.1e, limit 1e-9); stage sum %.3f ms <= "
                  "total %.3f ms: %s; schema %s",
                  frames_done, wall, fps, fps_error, stages, total, stages <= total ? "yes" : "NO",
                  schema ? "as expected" : "CHANGED")};
}

Verdict criterion_roundtrips(const fs::path& root) {
  std::mt19937_64 rng(1010);
  const auto dir = root / "roundtrip";
  fs::create_directories(dir);

  // Labels: random boxes, normalized error; generated labels, pixel error.
  double label_norm = 0.0, label_px = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int w = 32 + static_cast<int>(rng() % 1000), h = 32 + static_cast<int>(rng() % 1000);
    std::vector<Annotation> anns;
    std::uniform_real_distribution<float> ux(0.0f, static_cast<float>(w)), uy(0.0f, static_cast<float>(h));
    for (int k = 0; k < 8; ++k) {
      const float a = ux(rng), b = ux(rng), c = uy(rng), d = uy(rng);
      anns.push_back({0, {std::min(a, b), std::min(c, d), std::max(a, b), std::max(c, d)}, 0});
    }
    write_file(dir / "l.txt", write_label_file(anns, w, h));
    const auto back = load_label_file(dir / "l.txt", w, h).annotations;
    for (std::size_t k = 0; k < anns.size(); ++k) {
      const auto& p = anns[k].bbox;
      const auto& q = back[k].bbox;
      label_norm = std::max({label_norm, std::abs(p.x1 - q.x1) / double(w), std::abs(p.x2 - q.x2) / double(w),
                             std::abs(p.y1 - q.y1) / double(h), std::abs(p.y2 - q.y2) / double(h)});
    }
  }
  SynthSpec spec;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto s = synth_sample(spec, i);
    const auto back = parse_label_file(write_label_file(s.labels, spec.image_size, spec.image_size), spec.image_size,
                                       spec.image_size);
    for (std::size_t k = 0; k < s.labels.size(); ++k) {
      const auto& p = s.labels[k].bbox;
      const auto& q = back.annotations[k].bbox;
      label_px = std::max({label_px, double(std::abs(p.x1 - q.x1)), double(std::abs(p.y1 - q.y1)),
                           double(std::abs(p.x2 - q.x2)), double(std::abs(p.y2 - q.y2))});
    }
  }

  // PPM: random images, quantization bound.
  double ppm = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    Image im(1 + static_cast<int>(rng() % 200), 1 + static_cast<int>(rng() % 200));
    for (auto& v : im.pixels) v = std::uniform_real_distribution<float>(0.0f, 1.0f)(rng);
    save_image(im, dir / "i.ppm");
    const auto back = load_image(dir / "i.ppm");
    for (std::size_t k = 0; k < im.pixels.size(); ++k) ppm = std::max(ppm, double(std::abs(back.pixels[k] - im.pixels[k])));
  }

  // Checkpoints: random tensors and a full model state, bitwise.
  bool ckpt = true;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<NamedTensor> entries;
    const int count = 1 + static_cast<int>(rng() % 6);
    for (int k = 0; k < count; ++k) {
      Shape shape;
      for (std::size_t r = 0, rank = 1 + rng() % 4; r < rank; ++r) shape.push_back(1 + rng() % 5);
      entries.push_back({"t" + std::to_string(trial) + "." + std::to_string(k), random_tensor(shape, rng, -1e3f, 1e3f)});
    }
    entries.push_back(text_entry("note", "key=value\n"));
    write_checkpoint(dir / "c.lmdt", entries);
    const auto back = read_checkpoint(dir / "c.lmdt");
    ckpt = ckpt && back.size() == entries.size();
    for (std::size_t k = 0; ckpt && k < entries.size(); ++k)
      ckpt = back[k].name == entries[k].name && bitwise_equal(back[k].tensor, entries[k].tensor);
    ckpt = ckpt && entry_text(back.back()) == "key=value\n";
  }
  const Detector model(with_variant(ModelConfig::desk(), Variant::V12), 5);
  const auto state = model.state();
  const auto back = decode_checkpoint(encode_checkpoint(state));
  ckpt = ckpt && back.size() == state.size();
  for (std::size_t k = 0; ckpt && k < state.size(); ++k) ckpt = bitwise_equal(back[k].tensor, state[k].tensor);

  const bool ok = label_norm <= 1e-6 && label_px <= 1e-4 && ppm <= 1.0 / 255.0 + 1e-9 && ckpt;
  return {ok, fmt("labels: max normalized error %.1e (limit 1e-6), generated labels max pixel error %.1e (limit 1e-4); "
                  "PPM max error %.5f (limit 1/255 = %.5f); checkpoints %s",
                  label_norm, label_px, ppm, 1.0 / 255.0, ckpt ? "bitwise identical" : "DIFFER")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the lumen toolkit"};
  std::string work;
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory (cleared first)")->required();
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  const fs::path root(work);
  fs::remove_all(root);
  fs::create_directories(root);
  Workspace ws(root);

  const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
      {1, criterion_nms},
      {2, criterion_map},
      {3, criterion_gradients},
      {4, criterion_variants},
      {5, [&] { return criterion_training(ws); }},
      {6, [&] { return criterion_domain_gap(ws); }},
      {7, [&] { return criterion_ablation(ws); }},
      {8, [&] { return criterion_determinism(ws); }},
      {9, [&] { return criterion_bench(ws); }},
      {10, [&] { return criterion_roundtrips(root); }},
  };

  int failed = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("aborted: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << ": " << v.detail << '\n';
    for (const auto& note : v.notes) std::cout << "    " << note << '\n';
    std::cout << std::flush;
  }
  return failed ? 1 : 0;
}
