#include "support.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <stdexcept>

#include <unistd.h>

namespace lumen::testing {

std::vector<float> random_values(std::size_t n, std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, float lo, float hi) {
  return Tensor(shape, random_values(shape_numel(shape), rng, lo, hi));
}

ScratchDir::ScratchDir(const std::string& name) {
  path_ = std::filesystem::temp_directory_path() /
          ("lumen_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(path_);
  std::filesystem::create_directories(path_);
}

ScratchDir::~ScratchDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
}

double oracle_iou(const BBox& a, const BBox& b) {
  const double ax1 = a.x1, ay1 = a.y1, ax2 = a.x2, ay2 = a.y2;
  const double bx1 = b.x1, by1 = b.y1, bx2 = b.x2, by2 = b.y2;
  const double w = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double h = std::min(ay2, by2) - std::max(ay1, by1);
  const double inter = (w > 0 && h > 0) ? w * h : 0.0;
  const double u = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
  return u > 0 ? inter / u : 0.0;
}

std::vector<std::size_t> oracle_nms(const std::vector<Detection>& dets, float iou_threshold) {
  const auto better = [&](std::size_t i, std::size_t j) {
    if (dets[i].confidence != dets[j].confidence) return dets[i].confidence > dets[j].confidence;
    if (dets[i].bbox.area() != dets[j].bbox.area()) return dets[i].bbox.area() > dets[j].bbox.area();
    return i < j;
  };
  std::vector<bool> alive(dets.size(), true);
  std::vector<std::size_t> kept;
  for (;;) {
    std::size_t best = dets.size();
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (alive[i] && (best == dets.size() || better(i, best))) best = i;
    if (best == dets.size()) break;
    kept.push_back(best);
    alive[best] = false;
    for (std::size_t j = 0; j < dets.size(); ++j)
      if (alive[j] && oracle_iou(dets[best].bbox, dets[j].bbox) > static_cast<double>(iou_threshold))
        alive[j] = false;
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

double oracle_ap(const std::vector<ImageEval>& images, double iou_threshold) {
  struct Pred {
    float conf;
    std::size_t pos, image_id, index;
  };
  std::vector<Pred> remaining;
  std::size_t total_gt = 0;
  for (std::size_t p = 0; p < images.size(); ++p) {
    total_gt += images[p].ground_truth.size();
    for (std::size_t i = 0; i < images[p].predictions.size(); ++i)
      remaining.push_back({images[p].predictions[i].confidence, p, images[p].image_id, i});
  }
  if (total_gt == 0) return 0.0;

  std::vector<std::vector<bool>> taken(images.size());
  for (std::size_t p = 0; p < images.size(); ++p) taken[p].assign(images[p].ground_truth.size(), false);

  std::vector<double> precision, recall;
  std::size_t tp = 0, seen = 0;
  while (!remaining.empty()) {
    // Selection instead of sorting: next prediction is the max under the
    // (confidence desc, image id asc, index asc) order.
    std::size_t pick = 0;
    for (std::size_t i = 1; i < remaining.size(); ++i) {
      const auto& a = remaining[i];
      const auto& b = remaining[pick];
      if (a.conf > b.conf || (a.conf == b.conf && (a.image_id < b.image_id ||
                                                   (a.image_id == b.image_id && a.index < b.index))))
        pick = i;
    }
    const Pred pr = remaining[pick];
    remaining.erase(remaining.begin() + static_cast<std::ptrdiff_t>(pick));

    const auto& im = images[pr.pos];
    const auto& det = im.predictions[pr.index];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (taken[pr.pos][g] || im.ground_truth[g].class_id != det.class_id) continue;
      const double v = oracle_iou(det.bbox, im.ground_truth[g].bbox);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    ++seen;
    if (best >= iou_threshold) {
      taken[pr.pos][best_g] = true;
      ++tp;
    }
    precision.push_back(static_cast<double>(tp) / static_cast<double>(seen));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(total_gt));
  }

  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double level = static_cast<double>(k) / 100.0;
    double best = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i)
      if (recall[i] >= level) best = std::max(best, precision[i]);
    sum += best;
  }
  return sum / 101.0;
}

namespace {

BBox random_box(std::mt19937_64& rng, float extent) {
  std::uniform_real_distribution<float> pos(0.0f, extent * 0.8f), size(extent * 0.03f, extent * 0.4f);
  const float x = pos(rng), y = pos(rng);
  return {x, y, x + size(rng), y + size(rng)};
}

BBox jitter(const BBox& b, std::mt19937_64& rng, float amount) {
  std::uniform_real_distribution<float> d(-amount, amount);
  const float w = b.width(), h = b.height();
  BBox out{b.x1 + d(rng) * w, b.y1 + d(rng) * h, b.x2 + d(rng) * w, b.y2 + d(rng) * h};
  if (out.x2 < out.x1) std::swap(out.x1, out.x2);
  if (out.y2 < out.y1) std::swap(out.y1, out.y2);
  return out;
}

float grid_confidence(std::mt19937_64& rng) {
  return static_cast<float>(std::uniform_int_distribution<int>(1, 20)(rng)) / 20.0f;
}

}  // namespace

RandomScene random_scene(std::mt19937_64& rng, std::size_t max_images, std::size_t max_gt,
                         std::size_t max_pred) {
  RandomScene scene;
  const auto n_images = std::uniform_int_distribution<std::size_t>(1, max_images)(rng);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  for (std::size_t i = 0; i < n_images; ++i) {
    ImageEval im;
    im.image_id = i * 3 + 1;
    im.pred_width = im.gt_width = 200;
    im.pred_height = im.gt_height = 200;
    const auto n_gt = std::uniform_int_distribution<std::size_t>(0, max_gt)(rng);
    for (std::size_t g = 0; g < n_gt; ++g) im.ground_truth.push_back({im.image_id, random_box(rng, 200.0f), 0});
    const auto n_pred = std::uniform_int_distribution<std::size_t>(0, max_pred)(rng);
    for (std::size_t p = 0; p < n_pred; ++p) {
      Detection d;
      if (!im.ground_truth.empty() && unit(rng) < 0.7f) {
        const auto& g = im.ground_truth[std::uniform_int_distribution<std::size_t>(0, n_gt - 1)(rng)];
        d.bbox = jitter(g.bbox, rng, unit(rng) * 0.35f);
      } else {
        d.bbox = random_box(rng, 200.0f);
      }
      d.confidence = grid_confidence(rng);
      im.predictions.push_back(d);
    }
    scene.images.push_back(std::move(im));
  }
  return scene;
}

std::vector<Detection> random_detections(std::mt19937_64& rng, std::size_t max_boxes) {
  const auto n = std::uniform_int_distribution<std::size_t>(1, max_boxes)(rng);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::vector<Detection> dets;
  for (std::size_t i = 0; i < n; ++i) {
    Detection d;
    // Half the boxes cluster around earlier ones so suppression chains form.
    if (!dets.empty() && unit(rng) < 0.5f)
      d.bbox = jitter(dets[std::uniform_int_distribution<std::size_t>(0, dets.size() - 1)(rng)].bbox, rng, 0.3f);
    else
      d.bbox = random_box(rng, 100.0f);
    d.confidence = grid_confidence(rng);
    dets.push_back(d);
  }
  return dets;
}

}  // namespace lumen::testing
