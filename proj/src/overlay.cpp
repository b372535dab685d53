#include "lumen/overlay.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>

namespace lumen {

namespace {

struct Glyph {
  char ch;
  std::array<std::uint8_t, kGlyphHeight> rows;  // 5 bits each, MSB on the left
};

// Classic 5x7 pixel font, uppercase only.
constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
    {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}}, {' ', {0, 0, 0, 0, 0, 0, 0}},
};

const Glyph& glyph(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.ch == u) return g;
  return kFont[std::size(kFont) - 2];  // '?'
}

PixelRect clip(const Image& img, int x0, int y0, int x1, int y1) {
  PixelRect r{std::clamp(x0, 0, img.width), std::clamp(y0, 0, img.height), std::clamp(x1, 0, img.width),
              std::clamp(y1, 0, img.height)};
  if (r.x1 < r.x0) r.x1 = r.x0;
  if (r.y1 < r.y0) r.y1 = r.y0;
  return r;
}

void fill(Image& img, const PixelRect& r, Color c) {
  for (int y = r.y0; y < r.y1; ++y)
    for (int x = r.x0; x < r.x1; ++x) {
      img.at(0, y, x) = c.r;
      img.at(1, y, x) = c.g;
      img.at(2, y, x) = c.b;
    }
}

constexpr Color kBoxColor = {0.1f, 1.0f, 0.2f};
constexpr Color kTextColor = {1.0f, 1.0f, 1.0f};
constexpr Color kTextBackground = {0.0f, 0.0f, 0.0f};

}  // namespace

std::vector<PixelRect> draw_box(Image& image, const BBox& box, Color color, int thickness) {
  const int x0 = static_cast<int>(std::floor(box.x1)), y0 = static_cast<int>(std::floor(box.y1));
  const int x1 = static_cast<int>(std::ceil(box.x2)), y1 = static_cast<int>(std::ceil(box.y2));
  const int t = std::max(1, thickness);
  std::vector<PixelRect> rects = {clip(image, x0, y0, x1 + 1, y0 + t), clip(image, x0, y1 + 1 - t, x1 + 1, y1 + 1),
                                  clip(image, x0, y0, x0 + t, y1 + 1), clip(image, x1 + 1 - t, y0, x1 + 1, y1 + 1)};
  for (const auto& r : rects) fill(image, r, color);
  return rects;
}

std::vector<PixelRect> draw_text(Image& image, int x, int y, const std::string& text, Color color,
                                 Color background) {
  const int w = static_cast<int>(text.size()) * (kGlyphWidth + 1) + 1;
  const PixelRect area = clip(image, x, y, x + w, y + kGlyphHeight + 2);
  fill(image, area, background);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto& g = glyph(text[i]);
    const int gx = x + 1 + static_cast<int>(i) * (kGlyphWidth + 1);
    for (int row = 0; row < kGlyphHeight; ++row)
      for (int col = 0; col < kGlyphWidth; ++col) {
        if (!((g.rows[row] >> (kGlyphWidth - 1 - col)) & 1)) continue;
        const int px = gx + col, py = y + 1 + row;
        if (!area.contains(px, py)) continue;
        image.at(0, py, px) = color.r;
        image.at(1, py, px) = color.g;
        image.at(2, py, px) = color.b;
      }
  }
  return {area};
}

std::vector<PixelRect> draw_banner(Image& image, const std::string& text) {
  const PixelRect strip = clip(image, 0, 0, image.width, kGlyphHeight + 2);
  fill(image, strip, kTextBackground);
  draw_text(image, 0, 0, text, kTextColor, kTextBackground);
  return {strip};
}

std::vector<PixelRect> annotate_frame(Image& image, const std::vector<Detection>& detections,
                                      const std::string& status) {
  std::vector<PixelRect> touched;
  for (const auto& d : detections) {
    auto r = draw_box(image, d.bbox, kBoxColor, 1);
    touched.insert(touched.end(), r.begin(), r.end());
    char label[16];
    std::snprintf(label, sizeof(label), "%.2f", static_cast<double>(d.confidence));
    const int tx = static_cast<int>(std::floor(d.bbox.x1));
    int ty = static_cast<int>(std::floor(d.bbox.y1)) - (kGlyphHeight + 2);
    if (ty < kGlyphHeight + 2) ty = static_cast<int>(std::floor(d.bbox.y1)) + 1;
    r = draw_text(image, tx, ty, label, kTextColor, kTextBackground);
    touched.insert(touched.end(), r.begin(), r.end());
  }
  auto b = draw_banner(image, status);
  touched.insert(touched.end(), b.begin(), b.end());
  return touched;
}

}  // namespace lumen
