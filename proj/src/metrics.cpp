#include "lumen/metrics.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace lumen {

double iou_threshold_at(std::size_t i) { return static_cast<double>(50 + 5 * i) / 100.0; }

MatchResult match(const std::vector<ImageEval>& images, double iou_threshold) {
  MatchResult result;
  struct Ref {
    float conf;
    std::size_t image_pos, image_id, index;
  };
  std::vector<Ref> order;
  for (std::size_t p = 0; p < images.size(); ++p) {
    const auto& im = images[p];
    if (im.pred_width != im.gt_width || im.pred_height != im.gt_height)
      throw Error("match: image " + std::to_string(im.image_id) + " mixes coordinate frames (" +
                  std::to_string(im.pred_width) + "x" + std::to_string(im.pred_height) + " vs " +
                  std::to_string(im.gt_width) + "x" + std::to_string(im.gt_height) + ")");
    result.total_gt += im.ground_truth.size();
    for (std::size_t i = 0; i < im.predictions.size(); ++i)
      order.push_back({im.predictions[i].confidence, p, im.image_id, i});
  }
  std::sort(order.begin(), order.end(), [](const Ref& a, const Ref& b) {
    if (a.conf != b.conf) return a.conf > b.conf;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.index < b.index;
  });

  std::vector<std::vector<char>> used(images.size());
  for (std::size_t p = 0; p < images.size(); ++p) used[p].assign(images[p].ground_truth.size(), 0);

  result.matches.reserve(order.size());
  for (const auto& r : order) {
    const auto& im = images[r.image_pos];
    const auto& det = im.predictions[r.index];
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < im.ground_truth.size(); ++g) {
      if (used[r.image_pos][g] || im.ground_truth[g].class_id != det.class_id) continue;
      const double v = iou(det.bbox, im.ground_truth[g].bbox);
      if (v > best) {
        best = v;
        best_g = g;
      }
    }
    const bool tp = best >= iou_threshold;
    if (tp) used[r.image_pos][best_g] = 1;
    result.matches.push_back({r.conf, tp, r.image_id, r.index});
  }
  return result;
}

std::vector<PrPoint> pr_curve(const std::vector<Match>& matches, std::size_t total_gt) {
  std::vector<PrPoint> pts;
  pts.reserve(matches.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < matches.size(); ++i) {
    tp += matches[i].tp ? 1 : 0;
    const double recall = total_gt ? static_cast<double>(tp) / static_cast<double>(total_gt) : 0.0;
    pts.push_back({matches[i].confidence, recall, static_cast<double>(tp) / static_cast<double>(i + 1)});
  }
  return pts;
}

ApResult average_precision(const std::vector<Match>& matches, std::size_t total_gt) {
  if (total_gt == 0) return {0.0, matches.empty()};
  const auto pts = pr_curve(matches, total_gt);
  std::vector<double> envelope(pts.size());
  double run = 0.0;
  for (std::size_t i = pts.size(); i-- > 0;) {
    run = std::max(run, pts[i].precision);
    envelope[i] = run;
  }
  double total = 0.0;
  std::size_t i = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = static_cast<double>(k) / 100.0;
    while (i < pts.size() && pts[i].recall < r) ++i;
    if (i == pts.size()) break;
    total += envelope[i];
  }
  return {total / 101.0, false};
}

OperatingPoint precision_recall_at_best_f1(const std::vector<Match>& matches, std::size_t total_gt) {
  if (matches.empty()) throw Error("precision_recall_at_best_f1: empty match list");
  const auto pts = pr_curve(matches, total_gt);
  OperatingPoint best;
  double best_f1 = -1.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    // A cutoff admits every prediction sharing its confidence.
    if (i + 1 < pts.size() && pts[i + 1].confidence == pts[i].confidence) continue;
    const double p = pts[i].precision, r = pts[i].recall;
    const double f1 = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      best = {p, r, pts[i].confidence};
    }
  }
  if (best_f1 <= 0.0) best = {0.0, 0.0, pts.front().confidence};
  return best;
}

EvalReport map_range(const std::vector<ImageEval>& images) {
  EvalReport report;
  report.images = images.size();
  for (const auto& im : images) report.predictions += im.predictions.size();
  double sum = 0.0;
  for (std::size_t t = 0; t < kNumIouThresholds; ++t) {
    const double thr = iou_threshold_at(t);
    const auto m = match(images, thr);
    report.ground_truth = m.total_gt;
    const auto ap = average_precision(m.matches, m.total_gt);
    auto& st = report.per_threshold[t];
    st.threshold = thr;
    st.ap = ap.ap;
    st.tp = static_cast<std::size_t>(
        std::count_if(m.matches.begin(), m.matches.end(), [](const Match& x) { return x.tp; }));
    st.fp = m.matches.size() - st.tp;
    st.fn = m.total_gt - st.tp;
    report.ap_undefined = ap.undefined;
    sum += ap.ap;
    if (t == 0) {
      report.pr_curve = pr_curve(m.matches, m.total_gt);
      if (m.matches.empty()) {
        report.pr_curve_degenerate = true;
        report.pr_curve = {{1.0, 0.0, 1.0}, {0.0, 0.0, 0.0}};
      } else {
        const auto op = precision_recall_at_best_f1(m.matches, m.total_gt);
        report.precision_best_f1 = op.precision;
        report.recall_best_f1 = op.recall;
        report.confidence_best_f1 = op.confidence;
      }
    }
  }
  report.map50 = report.per_threshold[0].ap;
  report.map5095 = sum / static_cast<double>(kNumIouThresholds);
  return report;
}

std::string report_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["images"] = report.images;
  j["ground_truth"] = report.ground_truth;
  j["predictions"] = report.predictions;
  j["precision"] = report.precision_best_f1;
  j["recall"] = report.recall_best_f1;
  j["confidence_best_f1"] = report.confidence_best_f1;
  j["map50"] = report.map50;
  j["map5095"] = report.map5095;
  j["ap_undefined"] = report.ap_undefined;
  auto& per = j["per_threshold"] = nlohmann::ordered_json::array();
  for (const auto& st : report.per_threshold)
    per.push_back({{"iou", st.threshold}, {"ap", st.ap}, {"tp", st.tp}, {"fp", st.fp}, {"fn", st.fn}});
  auto& curve = j["pr_curve"] = nlohmann::ordered_json::array();
  for (const auto& p : report.pr_curve)
    curve.push_back({{"confidence", p.confidence}, {"recall", p.recall}, {"precision", p.precision}});
  j["pr_curve_degenerate"] = report.pr_curve_degenerate;
  return j.dump(2);
}

void export_pr_curve(const EvalReport& report, const std::filesystem::path& csv_path) {
  std::ofstream csv(csv_path, std::ios::trunc);
  if (!csv) throw Error("cannot write PR curve '" + csv_path.string() + "'");
  csv << "confidence,recall,precision\n";
  for (const auto& p : report.pr_curve)
    csv << format_number(p.confidence) << ',' << format_number(p.recall) << ','
        << format_number(p.precision) << '\n';
  if (!csv) throw Error("failed writing PR curve '" + csv_path.string() + "'");

  auto svg_path = csv_path;
  svg_path.replace_extension(".svg");
  std::ofstream svg(svg_path, std::ios::trunc);
  if (!svg) throw Error("cannot write PR plot '" + svg_path.string() + "'");
  constexpr double kSize = 400.0, kMargin = 40.0;
  std::ostringstream pts;
  for (const auto& p : report.pr_curve)
    pts << format_number(kMargin + p.recall * kSize) << ','
        << format_number(kMargin + (1.0 - p.precision) * kSize) << ' ';
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"480\">\n"
      << "<rect x=\"40\" y=\"40\" width=\"400\" height=\"400\" fill=\"none\" stroke=\"#888\"/>\n"
      << "<text x=\"240\" y=\"470\" text-anchor=\"middle\" font-size=\"14\">recall</text>\n"
      << "<text x=\"14\" y=\"240\" text-anchor=\"middle\" font-size=\"14\" "
         "transform=\"rotate(-90 14 240)\">precision</text>\n"
      << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"" << pts.str()
      << "\"/>\n</svg>\n";
}

}  // namespace lumen
