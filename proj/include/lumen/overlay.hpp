#pragma once

#include <string>
#include <vector>

#include "lumen/image.hpp"
#include "lumen/postprocess.hpp"

namespace lumen {

// Half-open pixel rectangle [x0, x1) x [y0, y1), clipped to the image.
struct PixelRect {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

struct Color {
  float r = 0, g = 0, b = 0;
};

inline constexpr int kGlyphWidth = 5;
inline constexpr int kGlyphHeight = 7;

// Every drawing call returns the rectangles it may have written to, so a
// caller can verify nothing else changed.
std::vector<PixelRect> draw_box(Image& image, const BBox& box, Color color, int thickness = 1);
std::vector<PixelRect> draw_text(Image& image, int x, int y, const std::string& text, Color color,
                                 Color background);
std::vector<PixelRect> draw_banner(Image& image, const std::string& text);

// Boxes, confidence labels and the status banner.
std::vector<PixelRect> annotate_frame(Image& image, const std::vector<Detection>& detections,
                                      const std::string& status);

}  // namespace lumen
