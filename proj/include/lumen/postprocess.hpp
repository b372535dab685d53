#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lumen/arch.hpp"
#include "lumen/image.hpp"

namespace lumen {

inline constexpr float kDefaultConfThreshold = 0.25f;
inline constexpr float kDefaultIouThreshold = 0.45f;

struct BBox {
  float x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  float width() const { return x2 - x1; }
  float height() const { return y2 - y1; }
  double area() const {
    return static_cast<double>(x2 - x1) * static_cast<double>(y2 - y1);
  }
  bool valid() const { return x1 <= x2 && y1 <= y2; }
  bool operator==(const BBox&) const = default;
};

struct Detection {
  BBox bbox;
  float confidence = 0.0f;
  int class_id = 0;
};

// Intersection over union; 0 when the union is empty.
double iou(const BBox& a, const BBox& b);

// Grid decode of raw head maps into network-input-frame detections.
// Cell (r, c) at stride s has center ((c+0.5)s, (r+0.5)s); box extents are
// softplus(raw)*s; confidence = sigmoid(obj) * sigmoid(best class logit).
// Only batch element `image` is decoded.
std::vector<Detection> decode(const RawPrediction& raw, float conf_threshold = kDefaultConfThreshold,
                              std::size_t image = 0);

// Greedy class-agnostic NMS. Priority: confidence desc, then larger area,
// then input order. Returns kept indices into `dets`, in priority order.
std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets,
                                     float iou_threshold = kDefaultIouThreshold);
std::vector<Detection> nms(const std::vector<Detection>& dets,
                           float iou_threshold = kDefaultIouThreshold);

struct LetterboxMap {
  float scale_x = 1.0f, scale_y = 1.0f;  // content size / original size per axis
  float pad_x = 0.0f, pad_y = 0.0f;
  int original_width = 0, original_height = 0;
  int target = 0;  // side of the scaled content's bounding square
  int canvas = 0;  // network input side (multiple of 32, >= target)

  BBox to_network(const BBox& b) const;
  // Inverse mapping, clamped to the original image.
  BBox to_original(const BBox& b) const;
};

// Aspect-preserving bilinear resize so the image fits a `target` square,
// centered on a `canvas` square filled with gray 114/255. canvas == 0 means
// canvas == target.
Image letterbox(const Image& image, int target, LetterboxMap& map, int canvas = 0);
Detection unletterbox(const Detection& det, const LetterboxMap& map);

// Bilinear resize with half-pixel centers.
Image resize_bilinear(const Image& image, int width, int height);

// {"frame":...,"class_id":...,"confidence":...,"x1":...,...} without trailing newline.
std::string detection_json(const std::string& frame, const Detection& det);

}  // namespace lumen
