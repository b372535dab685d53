#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lumen/arch.hpp"
#include "lumen/data.hpp"
#include "lumen/metrics.hpp"
#include "lumen/optim.hpp"

namespace lumen {

struct LossWeights {
  float box = 7.5f;
  float obj = 1.0f;
  float cls = 0.5f;
};

struct TrainConfig {
  int epochs = 50;
  int batch_size = 16;
  int image_size = 160;
  LrSchedule schedule;  // total_epochs follows `epochs`
  float weight_decay = 0.01f;
  std::uint64_t seed = 0;
  LossWeights weights;
  float flip_probability = 0.5f;
  float eval_conf = 0.25f;
  float eval_iou = 0.45f;
  std::filesystem::path train_manifest;
  std::filesystem::path val_manifest;

  void validate() const;
  std::string to_text() const;
  // Consumes the training keys of `kv`; manifest paths resolve against `base`.
  static TrainConfig from_keyvalues(KeyValues& kv, const std::filesystem::path& base = {});
};

// ---- target assignment ----

struct LevelTargets {
  int stride = 0;
  std::size_t height = 0, width = 0;
  // Per (image, cell): index into AssignedTargets::boxes, or -1 for background.
  std::vector<int> owner;
};

struct AssignedTargets {
  std::vector<LevelTargets> levels;
  std::vector<BBox> boxes;  // network-input pixels
  std::vector<int> classes;
  std::vector<std::size_t> images;  // batch position of each box
  std::vector<std::string> warnings;

  std::size_t assigned_cells() const;
  // ltrb distances of box `b` from the center of cell (row, col), stride units.
  std::array<float, 4> ltrb(std::size_t level, int b, std::size_t row, std::size_t col) const;
};

// Scale routing by longest side at 640-equivalent scale: <64 -> stride 8,
// 64..160 -> stride 16, larger -> stride 32. Each box takes its center cell
// plus the 4-neighbours whose centers lie strictly inside it; on conflicts
// the smaller box keeps the cell.
AssignedTargets assign_targets(const std::vector<std::vector<Annotation>>& gts, int image_size,
                               const std::vector<int>& strides);

// ---- loss ----

struct LossBreakdown {
  double box = 0.0, obj = 0.0, cls = 0.0, total = 0.0;
};

struct LossOutput {
  Tensor total;  // scalar, differentiable w.r.t. every head map
  LossBreakdown terms;
};

// Complete IoU of two (x1, y1, x2, y2) boxes. T may be a forward-mode dual.
template <class T>
T ciou(const T p[4], const T g[4]) {
  using std::atan;
  using std::sqrt;
  constexpr double kEps = 1e-7;
  constexpr double kPi = 3.14159265358979323846;
  const T zero = p[0] * 0.0;
  const T iw_raw = (p[2] < g[2] ? p[2] : g[2]) - (p[0] > g[0] ? p[0] : g[0]);
  const T ih_raw = (p[3] < g[3] ? p[3] : g[3]) - (p[1] > g[1] ? p[1] : g[1]);
  const T iw = iw_raw > zero ? iw_raw : zero;
  const T ih = ih_raw > zero ? ih_raw : zero;
  const T inter = iw * ih;
  const T pw = p[2] - p[0], ph = p[3] - p[1];
  const T gw = g[2] - g[0], gh = g[3] - g[1];
  const T uni = pw * ph + gw * gh - inter + kEps;
  const T iou = inter / uni;
  const T cw = (p[2] > g[2] ? p[2] : g[2]) - (p[0] < g[0] ? p[0] : g[0]);
  const T ch = (p[3] > g[3] ? p[3] : g[3]) - (p[1] < g[1] ? p[1] : g[1]);
  const T c2 = cw * cw + ch * ch + kEps;
  const T dx = (p[0] + p[2]) - (g[0] + g[2]);
  const T dy = (p[1] + p[3]) - (g[1] + g[3]);
  const T rho2 = (dx * dx + dy * dy) * 0.25;
  const T dv = atan(gw / (gh + kEps)) - atan(pw / (ph + kEps));
  const T v = dv * dv * (4.0 / (kPi * kPi));
  const T alpha = v / (v - iou + (1.0 + kEps));
  return iou - rho2 / c2 - alpha * v;
}

LossOutput compute_loss(const RawPrediction& raw, const AssignedTargets& targets,
                        const LossWeights& weights = {});

// ---- training loop ----

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  double val_map50 = 0.0, val_map5095 = 0.0;
};

struct FitResult {
  std::vector<EpochLog> log;
  int best_epoch = 0;
  double best_map50 = 0.0;
  std::filesystem::path best_checkpoint, last_checkpoint, log_path;
};

using EpochCallback = std::function<void(const EpochLog&)>;

// Loads every image letterboxed to `size` with labels in network pixels.
std::vector<LoadedSample> load_training_samples(const Manifest& manifest, int size);

// Trains `model` in place. Writes best.lmdt, last.lmdt and train_log.csv
// under `out_dir`.
FitResult fit(Detector& model, const Manifest& train, const Manifest& val, const TrainConfig& config,
              const std::filesystem::path& out_dir, const EpochCallback& on_epoch = {});

std::string train_log_header();
std::string train_log_row(const EpochLog& row);

}  // namespace lumen
