#include "lumen/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

#include <json.hpp>

#include "lumen/kernels.hpp"

namespace lumen {

double iou(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, static_cast<double>(std::min(a.x2, b.x2)) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, static_cast<double>(std::min(a.y2, b.y2)) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

inline float softplus(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }
inline float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

std::vector<Detection> decode(const RawPrediction& raw, float conf_threshold, std::size_t image) {
  if (!(conf_threshold >= 0.0f && conf_threshold <= 1.0f))
    throw Error("decode: confidence threshold must be in [0,1]");
  std::vector<Detection> out;
  const auto limit = static_cast<float>(raw.input_size);
  for (const auto& lv : raw.levels) {
    const auto& bs = lv.box.shape();
    const std::size_t h = bs[2], w = bs[3];
    if (lv.obj.dim(2) != h || lv.obj.dim(3) != w || lv.cls.dim(2) != h || lv.cls.dim(3) != w)
      throw DimensionError("decode", "H/W", "box/obj/cls maps disagree");
    if (raw.input_size > 0 && static_cast<std::size_t>(lv.stride) * w != static_cast<std::size_t>(raw.input_size))
      throw DimensionError("decode", "stride", static_cast<std::size_t>(raw.input_size),
                           static_cast<std::size_t>(lv.stride) * w);
    if (image >= bs[0]) throw DimensionError("decode", "N", "image index out of range");
    const std::size_t plane = h * w;
    const std::size_t nc = lv.cls.dim(1);
    const float* box = lv.box.data().data() + image * 4 * plane;
    const float* obj = lv.obj.data().data() + image * plane;
    const float* cls = lv.cls.data().data() + image * nc * plane;
    const auto s = static_cast<float>(lv.stride);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t i = r * w + c;
        int best = 0;
        float best_logit = cls[i];
        for (std::size_t k = 1; k < nc; ++k)
          if (cls[k * plane + i] > best_logit) {
            best_logit = cls[k * plane + i];
            best = static_cast<int>(k);
          }
        const float conf = sigmoid(obj[i]) * sigmoid(best_logit);
        if (!(conf >= conf_threshold)) continue;
        const float cx = (static_cast<float>(c) + 0.5f) * s;
        const float cy = (static_cast<float>(r) + 0.5f) * s;
        BBox b{cx - softplus(box[i]) * s, cy - softplus(box[plane + i]) * s,
               cx + softplus(box[2 * plane + i]) * s, cy + softplus(box[3 * plane + i]) * s};
        if (limit > 0.0f) {
          b.x1 = std::clamp(b.x1, 0.0f, limit);
          b.y1 = std::clamp(b.y1, 0.0f, limit);
          b.x2 = std::clamp(b.x2, 0.0f, limit);
          b.y2 = std::clamp(b.y2, 0.0f, limit);
        }
        out.push_back({b, conf, best});
      }
  }
  return out;
}

std::vector<std::size_t> nms_indices(const std::vector<Detection>& dets, float iou_threshold) {
  if (!(iou_threshold >= 0.0f && iou_threshold <= 1.0f))
    throw Error("nms: IoU threshold must be in [0,1]");
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence) return dets[a].confidence > dets[b].confidence;
    return dets[a].bbox.area() > dets[b].bbox.area();
  });
  std::vector<float> boxes;
  boxes.reserve(order.size() * 4);
  for (auto i : order) {
    const auto& b = dets[i].bbox;
    boxes.insert(boxes.end(), {b.x1, b.y1, b.x2, b.y2});
  }
  std::vector<std::uint8_t> keep(order.size());
  kernels::nms_sorted(boxes, iou_threshold, keep);
  std::vector<std::size_t> kept;
  for (std::size_t k = 0; k < order.size(); ++k)
    if (keep[k]) kept.push_back(order[k]);
  return kept;
}

std::vector<Detection> nms(const std::vector<Detection>& dets, float iou_threshold) {
  std::vector<Detection> out;
  for (auto i : nms_indices(dets, iou_threshold)) out.push_back(dets[i]);
  return out;
}

BBox LetterboxMap::to_network(const BBox& b) const {
  return {b.x1 * scale_x + pad_x, b.y1 * scale_y + pad_y, b.x2 * scale_x + pad_x,
          b.y2 * scale_y + pad_y};
}

BBox LetterboxMap::to_original(const BBox& b) const {
  const auto fx = [&](float v) {
    return std::clamp((v - pad_x) / scale_x, 0.0f, static_cast<float>(original_width));
  };
  const auto fy = [&](float v) {
    return std::clamp((v - pad_y) / scale_y, 0.0f, static_cast<float>(original_height));
  };
  return {fx(b.x1), fy(b.y1), fx(b.x2), fy(b.y2)};
}

Image resize_bilinear(const Image& image, int width, int height) {
  if (image.empty() || width <= 0 || height <= 0) throw Error("resize: zero-sized image");
  if (width == image.width && height == image.height) return image;
  Image out(width, height);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), image.height - 1);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const float wy = static_cast<float>(fy - y0);
    for (int x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), image.width - 1);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const float wx = static_cast<float>(fx - x0);
      for (int c = 0; c < 3; ++c) {
        const float top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const float bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return out;
}

Image letterbox(const Image& image, int target, LetterboxMap& map, int canvas) {
  if (image.empty()) throw Error("letterbox: zero-sized image");
  if (target <= 0) throw Error("letterbox: target must be positive");
  if (canvas == 0) canvas = target;
  if (canvas < target) throw Error("letterbox: canvas smaller than target");
  const double scale = std::min(static_cast<double>(target) / image.width,
                                static_cast<double>(target) / image.height);
  const int new_w = std::max(1, static_cast<int>(std::lround(image.width * scale)));
  const int new_h = std::max(1, static_cast<int>(std::lround(image.height * scale)));
  map.original_width = image.width;
  map.original_height = image.height;
  map.target = target;
  map.canvas = canvas;
  map.scale_x = static_cast<float>(new_w) / image.width;
  map.scale_y = static_cast<float>(new_h) / image.height;
  const int off_x = (canvas - new_w) / 2;
  const int off_y = (canvas - new_h) / 2;
  map.pad_x = static_cast<float>(off_x);
  map.pad_y = static_cast<float>(off_y);

  const Image content = resize_bilinear(image, new_w, new_h);
  Image out(canvas, canvas, 114.0f / 255.0f);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < new_h; ++y)
      for (int x = 0; x < new_w; ++x) out.at(c, y + off_y, x + off_x) = content.at(c, y, x);
  return out;
}

Detection unletterbox(const Detection& det, const LetterboxMap& map) {
  Detection d = det;
  d.bbox = map.to_original(det.bbox);
  return d;
}

std::string detection_json(const std::string& frame, const Detection& det) {
  nlohmann::ordered_json j;
  j["frame"] = frame;
  j["class_id"] = det.class_id;
  j["confidence"] = det.confidence;
  j["x1"] = det.bbox.x1;
  j["y1"] = det.bbox.y1;
  j["x2"] = det.bbox.x2;
  j["y2"] = det.bbox.y2;
  return j.dump();
}

}  // namespace lumen
