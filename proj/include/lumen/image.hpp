#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "lumen/tensor.hpp"

namespace lumen {

// RGB image, float pixels in [0,1], channel-major (3 x height x width).
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int w, int h, float fill = 0.0f);

  bool empty() const { return width == 0 || height == 0; }
  float& at(int c, int y, int x) {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return pixels[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
};

// Binary PPM (P6, maxval 255). Parse failures report the byte offset.
Image decode_ppm(const std::string& bytes);
std::string encode_ppm(const Image& image);

// Dispatches on extension; ".ppm" is built in, others go through registered codecs.
Image load_image(const std::filesystem::path& path);
void save_image(const Image& image, const std::filesystem::path& path);

struct ImageCodec {
  std::function<Image(const std::string&)> decode;
  std::function<std::string(const Image&)> encode;
};
// Lowercase extension including the dot, e.g. ".png".
void register_image_codec(const std::string& extension, ImageCodec codec);

// Stacks same-sized images into an [N,3,H,W] tensor.
Tensor images_to_tensor(const std::vector<const Image*>& images);

}  // namespace lumen
