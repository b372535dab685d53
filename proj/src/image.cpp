#include "lumen/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <mutex>

namespace lumen {

Image::Image(int w, int h, float fill)
    : width(w), height(h), pixels(static_cast<std::size_t>(3) * w * h, fill) {}

namespace {

// Reads one whitespace-delimited header integer, skipping '#' comments.
int header_int(const std::string& bytes, std::size_t& pos, const char* what) {
  for (;;) {
    if (pos >= bytes.size()) throw ParseError(std::string("ppm: truncated header before ") + what, pos);
    const char c = bytes[pos];
    if (c == '#') {
      while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      ++pos;
    } else {
      break;
    }
  }
  const std::size_t start = pos;
  long v = 0;
  while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
    v = v * 10 + (bytes[pos] - '0');
    if (v > 1000000) throw ParseError(std::string("ppm: ") + what + " too large", start);
    ++pos;
  }
  if (pos == start) throw ParseError(std::string("ppm: expected ") + what, start);
  return static_cast<int>(v);
}

std::mutex g_codec_mutex;
std::map<std::string, ImageCodec>& codecs() {
  static std::map<std::string, ImageCodec> m;
  return m;
}

std::string lower_ext(const std::filesystem::path& p) {
  std::string e = p.extension().string();
  std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return std::tolower(c); });
  return e;
}

}  // namespace

Image decode_ppm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw ParseError("ppm: bad magic", 0);
  std::size_t pos = 2;
  const int w = header_int(bytes, pos, "width");
  const int h = header_int(bytes, pos, "height");
  const int maxval = header_int(bytes, pos, "maxval");
  if (w <= 0 || h <= 0) throw ParseError("ppm: zero-sized image", pos);
  if (maxval != 255) throw ParseError("ppm: only maxval 255 is supported", pos);
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
    throw ParseError("ppm: missing separator after header", pos);
  ++pos;
  const std::size_t need = static_cast<std::size_t>(3) * w * h;
  if (bytes.size() - pos < need) throw ParseError("ppm: truncated pixel data", bytes.size());
  Image img(w, h);
  const auto* src = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(src[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

std::string encode_ppm(const Image& image) {
  if (image.empty()) throw Error("ppm: cannot encode an empty image");
  std::string out = "P6\n" + std::to_string(image.width) + " " + std::to_string(image.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(3) * image.width * image.height);
  auto* dst = reinterpret_cast<unsigned char*>(out.data() + header);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        dst[(static_cast<std::size_t>(y) * image.width + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0f));
      }
  return out;
}

void register_image_codec(const std::string& extension, ImageCodec codec) {
  std::lock_guard lock(g_codec_mutex);
  codecs()[extension] = std::move(codec);
}

Image load_image(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open image '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto ext = lower_ext(path);
  if (ext == ".ppm") return decode_ppm(bytes);
  std::lock_guard lock(g_codec_mutex);
  auto it = codecs().find(ext);
  if (it == codecs().end() || !it->second.decode)
    throw Error("no image decoder registered for '" + ext + "'");
  return it->second.decode(bytes);
}

void save_image(const Image& image, const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  std::string bytes;
  if (ext == ".ppm") {
    bytes = encode_ppm(image);
  } else {
    std::lock_guard lock(g_codec_mutex);
    auto it = codecs().find(ext);
    if (it == codecs().end() || !it->second.encode)
      throw Error("no image encoder registered for '" + ext + "'");
    bytes = it->second.encode(image);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write image '" + path.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor images_to_tensor(const std::vector<const Image*>& images) {
  if (images.empty()) throw Error("images_to_tensor: empty batch");
  const int w = images[0]->width, h = images[0]->height;
  std::vector<float> data;
  data.reserve(images.size() * 3 * w * h);
  for (const auto* img : images) {
    if (img->width != w || img->height != h)
      throw DimensionError("images_to_tensor", "H/W", "images in a batch must share a size");
    data.insert(data.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor({images.size(), 3, static_cast<std::size_t>(h), static_cast<std::size_t>(w)},
                std::move(data));
}

}  // namespace lumen
