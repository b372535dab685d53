#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "lumen/postprocess.hpp"

namespace lumen {

struct Annotation {
  std::size_t image_id = 0;
  BBox bbox;
  int class_id = 0;
};

// Predictions and ground truth for one image, in the same pixel frame.
// The frame sizes are metadata used to catch mixed coordinate frames.
struct ImageEval {
  std::size_t image_id = 0;
  int pred_width = 0, pred_height = 0;
  int gt_width = 0, gt_height = 0;
  std::vector<Detection> predictions;
  std::vector<Annotation> ground_truth;
};

struct Match {
  float confidence = 0.0f;
  bool tp = false;
  std::size_t image_id = 0;
  std::size_t index = 0;  // prediction index within its image
};

struct MatchResult {
  std::vector<Match> matches;  // global descending confidence
  std::size_t total_gt = 0;
};

// Greedy matching: predictions in global confidence order (ties by image id,
// then prediction index) each take the unmatched same-image, same-class GT of
// highest IoU when that IoU >= iou_threshold.
MatchResult match(const std::vector<ImageEval>& images, double iou_threshold);

struct ApResult {
  double ap = 0.0;
  bool undefined = false;  // no GT and no predictions
};

// 101-point interpolated AP over a confidence-sorted match list.
ApResult average_precision(const std::vector<Match>& matches, std::size_t total_gt);

struct PrPoint {
  double confidence = 0.0, recall = 0.0, precision = 0.0;
};

struct OperatingPoint {
  double precision = 0.0, recall = 0.0, confidence = 0.0;
};

// Sweeps every distinct confidence cutoff; ties in F1 go to the higher cutoff.
OperatingPoint precision_recall_at_best_f1(const std::vector<Match>& matches, std::size_t total_gt);

// Cumulative precision/recall after each prediction, descending confidence.
std::vector<PrPoint> pr_curve(const std::vector<Match>& matches, std::size_t total_gt);

inline constexpr std::size_t kNumIouThresholds = 10;
double iou_threshold_at(std::size_t i);  // 0.50, 0.55, ..., 0.95

struct ThresholdStats {
  double threshold = 0.0;
  double ap = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct EvalReport {
  std::array<ThresholdStats, kNumIouThresholds> per_threshold{};
  std::vector<PrPoint> pr_curve;  // at IoU 0.5
  bool pr_curve_degenerate = false;
  double map50 = 0.0;
  double map5095 = 0.0;
  double precision_best_f1 = 0.0;
  double recall_best_f1 = 0.0;
  double confidence_best_f1 = 0.0;
  bool ap_undefined = false;
  std::size_t images = 0, ground_truth = 0, predictions = 0;
};

EvalReport map_range(const std::vector<ImageEval>& images);

std::string report_json(const EvalReport& report);

// Writes the CSV at `csv_path` and an SVG polyline next to it (.svg).
void export_pr_curve(const EvalReport& report, const std::filesystem::path& csv_path);

}  // namespace lumen
