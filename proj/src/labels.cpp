#include <algorithm>
#include <charconv>
#include <fstream>
#include <iterator>
#include <sstream>

#include "lumen/data.hpp"

namespace lumen {

namespace {

std::string float_text(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

bool parse_float(std::string_view tok, double& out) {
  float v = 0.0f;
  auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc{} || res.ptr != tok.data() + tok.size()) return false;
  out = v;
  return true;
}

}  // namespace

LabelParse parse_label_file(const std::string& text, int image_width, int image_height,
                            std::size_t image_id) {
  if (image_width <= 0 || image_height <= 0) throw Error("labels: image dims must be positive");
  LabelParse out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  static constexpr const char* kNames[] = {"cx", "cy", "w", "h"};
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::vector<std::string> toks{std::istream_iterator<std::string>(ls), std::istream_iterator<std::string>()};
    if (toks.empty()) continue;
    if (toks.size() != 5)
      throw ParseError("labels: line " + std::to_string(line_no) + ": expected 5 fields, got " +
                           std::to_string(toks.size()),
                       line_no);
    int cls = 0;
    auto res = std::from_chars(toks[0].data(), toks[0].data() + toks[0].size(), cls);
    if (res.ec != std::errc{} || res.ptr != toks[0].data() + toks[0].size() || cls < 0)
      throw ParseError("labels: line " + std::to_string(line_no) + ": bad class id '" + toks[0] + "'",
                       line_no);
    double v[4];
    for (int i = 0; i < 4; ++i) {
      if (!parse_float(toks[i + 1], v[i]))
        throw ParseError("labels: line " + std::to_string(line_no) + ": bad number '" + toks[i + 1] + "'",
                         line_no);
      if (v[i] < 0.0 || v[i] > 1.0) {
        out.warnings.push_back("line " + std::to_string(line_no) + ": " + kNames[i] + "=" + toks[i + 1] +
                               " clamped to [0,1]");
        v[i] = std::clamp(v[i], 0.0, 1.0);
      }
    }
    const double w = image_width, h = image_height;
    BBox b{static_cast<float>(std::clamp((v[0] - v[2] / 2) * w, 0.0, w)),
           static_cast<float>(std::clamp((v[1] - v[3] / 2) * h, 0.0, h)),
           static_cast<float>(std::clamp((v[0] + v[2] / 2) * w, 0.0, w)),
           static_cast<float>(std::clamp((v[1] + v[3] / 2) * h, 0.0, h))};
    out.annotations.push_back({image_id, b, cls});
  }
  return out;
}

std::string write_label_file(const std::vector<Annotation>& annotations, int image_width,
                             int image_height) {
  if (image_width <= 0 || image_height <= 0) throw Error("labels: image dims must be positive");
  std::string out;
  const double w = image_width, h = image_height;
  for (const auto& a : annotations) {
    const auto& b = a.bbox;
    const double cx = (static_cast<double>(b.x1) + b.x2) / 2 / w;
    const double cy = (static_cast<double>(b.y1) + b.y2) / 2 / h;
    const double bw = (static_cast<double>(b.x2) - b.x1) / w;
    const double bh = (static_cast<double>(b.y2) - b.y1) / h;
    out += std::to_string(a.class_id);
    for (double v : {cx, cy, bw, bh}) {
      out += ' ';
      out += float_text(static_cast<float>(v));
    }
    out += '\n';
  }
  return out;
}

LabelParse load_label_file(const std::filesystem::path& path, int image_width, int image_height,
                           std::size_t image_id) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open label file '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_label_file(text, image_width, image_height, image_id);
}

}  // namespace lumen
