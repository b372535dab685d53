#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lumen/metrics.hpp"
#include "lumen/postprocess.hpp"
#include "lumen/tensor.hpp"

namespace lumen::testing {

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f);
std::vector<float> random_values(std::size_t n, std::mt19937_64& rng, float lo = -1.0f, float hi = 1.0f);

// Fresh directory under the system temp dir; removed when the object dies.
class ScratchDir {
 public:
  explicit ScratchDir(const std::string& name);
  ~ScratchDir();
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::string& text);

// ---- independent oracles ----

// IoU written from the definition, separate from the library's.
double oracle_iou(const BBox& a, const BBox& b);

// Repeatedly takes the best surviving box (confidence, then area, then
// index) and kills everything overlapping it by more than the threshold.
// Returns kept indices in ascending order.
std::vector<std::size_t> oracle_nms(const std::vector<Detection>& dets, float iou_threshold);

// AP by explicit enumeration: greedy matching in global confidence order,
// cumulative P/R, then for each of 101 recall levels the best precision
// among points at or beyond that recall.
double oracle_ap(const std::vector<ImageEval>& images, double iou_threshold);

struct RandomScene {
  std::vector<ImageEval> images;
};

// Up to `max_gt` ground-truth boxes and `max_pred` predictions per image,
// predictions mostly jittered copies of GT so every IoU regime shows up.
// Confidences come from a coarse grid so ties are common.
RandomScene random_scene(std::mt19937_64& rng, std::size_t max_images, std::size_t max_gt,
                         std::size_t max_pred);

std::vector<Detection> random_detections(std::mt19937_64& rng, std::size_t max_boxes);

}  // namespace lumen::testing
