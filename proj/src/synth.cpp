#include <algorithm>
#include <cmath>
#include <numbers>

#include "lumen/data.hpp"

namespace lumen {

namespace {

// splitmix64 finalizer; good enough to decorrelate per-image streams.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Portable stream: same numbers on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next() { return mix(state_++); }
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double uniform(const Range& r) { return uniform(r.lo, r.hi); }
  int integer(int lo, int hi) {
    return lo + static_cast<int>(next() % static_cast<std::uint64_t>(hi - lo + 1));
  }
  double normal() {
    const double u1 = std::max(uniform(), 1e-300);
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

void check_range(const Range& r, const char* key, double lo, double hi) {
  if (!(r.lo <= r.hi)) throw ConfigError(key, "range is empty (lo > hi)");
  if (r.lo < lo || r.hi > hi)
    throw ConfigError(key, "range must lie within [" + format_number(lo) + ", " + format_number(hi) + "]");
}

Range take_range(KeyValues& kv, const std::string& key, Range fallback) {
  const auto v = kv.take_double_list(key, {fallback.lo, fallback.hi});
  if (v.size() != 2) throw ConfigError(key, "expected two comma-separated values lo,hi");
  return {v[0], v[1]};
}

struct Rgb {
  float r, g, b;
};

constexpr Rgb kWall = {0.86f, 0.52f, 0.49f};
constexpr Rgb kLumen = {0.10f, 0.03f, 0.03f};

float smoothstep(float e0, float e1, float x) {
  const float t = std::clamp((x - e0) / (e1 - e0), 0.0f, 1.0f);
  return t * t * (3.0f - 2.0f * t);
}

// Normalized elliptic radius; <= 1 inside the ellipse.
double rho(const Ellipse& e, double x, double y) {
  const double dx = x - e.cx, dy = y - e.cy;
  const double c = std::cos(e.theta), s = std::sin(e.theta);
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  return std::sqrt(u * u + v * v);
}

// Fraction of the ellipse area that lies inside the image.
double visible_fraction(const Ellipse& e, int size) {
  constexpr int kGrid = 48;
  const BBox box = e.aabb();
  int inside = 0, visible = 0;
  for (int j = 0; j < kGrid; ++j)
    for (int i = 0; i < kGrid; ++i) {
      const double x = box.x1 + (i + 0.5) * (box.x2 - box.x1) / kGrid;
      const double y = box.y1 + (j + 0.5) * (box.y2 - box.y1) / kGrid;
      if (rho(e, x, y) > 1.0) continue;
      ++inside;
      if (x >= 0 && x < size && y >= 0 && y < size) ++visible;
    }
  return inside ? static_cast<double>(visible) / inside : 0.0;
}

bool overlaps(const BBox& a, const BBox& b, float margin) {
  return a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2;
}

void paint_ellipse(Image& img, const Ellipse& e) {
  const BBox box = e.aabb();
  const int x0 = std::max(0, static_cast<int>(std::floor(box.x1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(box.y1)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(box.x2)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(box.y2)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const auto r = static_cast<float>(rho(e, x + 0.5, y + 0.5));
      if (r >= 1.0f) continue;
      // Flat dark core, soft falloff toward the rim.
      const float alpha = static_cast<float>(e.darkness) * (1.0f - smoothstep(0.6f, 1.0f, r));
      img.at(0, y, x) = img.at(0, y, x) * (1 - alpha) + kLumen.r * alpha;
      img.at(1, y, x) = img.at(1, y, x) * (1 - alpha) + kLumen.g * alpha;
      img.at(2, y, x) = img.at(2, y, x) * (1 - alpha) + kLumen.b * alpha;
    }
}

void motion_blur(Image& img, double length, double angle) {
  const int taps = static_cast<int>(std::round(length)) + 1;
  if (taps <= 1) return;
  const double dx = std::cos(angle), dy = std::sin(angle);
  const Image src = img;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        float acc = 0.0f;
        for (int t = 0; t < taps; ++t) {
          const double off = t - (taps - 1) / 2.0;
          const int sx = std::clamp(static_cast<int>(std::lround(x + off * dx)), 0, img.width - 1);
          const int sy = std::clamp(static_cast<int>(std::lround(y + off * dy)), 0, img.height - 1);
          acc += src.at(c, sy, sx);
        }
        img.at(c, y, x) = acc / static_cast<float>(taps);
      }
}

}  // namespace

BBox Ellipse::aabb() const {
  const double c = std::cos(theta), s = std::sin(theta);
  const double hw = std::sqrt(a * a * c * c + b * b * s * s);
  const double hh = std::sqrt(a * a * s * s + b * b * c * c);
  return {static_cast<float>(cx - hw), static_cast<float>(cy - hh), static_cast<float>(cx + hw),
          static_cast<float>(cy + hh)};
}

void SynthSpec::validate() const {
  if (image_size < 32 || image_size % 32) throw ConfigError("image_size", "must be a positive multiple of 32");
  if (min_orifices < 0) throw ConfigError("min_orifices", "must be >= 0");
  if (max_orifices < min_orifices) throw ConfigError("max_orifices", "must be >= min_orifices");
  if (!(nesting_probability >= 0.0 && nesting_probability <= 1.0))
    throw ConfigError("nesting_probability", "must be in [0,1]");
  check_range(radius, "radius", 0.0, 0.5);
  if (radius.lo * image_size < 2.0) throw ConfigError("radius", "ellipses would be degenerate (< 2 px)");
  check_range(darkness, "darkness", 0.0, 1.0);
  if (!(texture_amplitude >= 0.0 && texture_amplitude <= 0.5))
    throw ConfigError("texture_amplitude", "must be in [0,0.5]");
  check_range(blur_length, "blur_length", 0.0, 64.0);
  check_range(contrast, "contrast", 0.0, 1.0);
  if (contrast.lo <= 0.0) throw ConfigError("contrast", "must be > 0");
  check_range(exposure, "exposure", 0.0, 1.0);
  if (!(noise >= 0.0 && noise <= 0.5)) throw ConfigError("noise", "must be in [0,0.5]");
}

std::string SynthSpec::to_text() const {
  std::string out;
  put_kv(out, "image_size", image_size);
  put_kv(out, "min_orifices", min_orifices);
  put_kv(out, "max_orifices", max_orifices);
  put_kv(out, "nesting_probability", nesting_probability);
  put_kv(out, "radius", std::vector<double>{radius.lo, radius.hi});
  put_kv(out, "darkness", std::vector<double>{darkness.lo, darkness.hi});
  put_kv(out, "texture_amplitude", texture_amplitude);
  put_kv(out, "blur_length", std::vector<double>{blur_length.lo, blur_length.hi});
  put_kv(out, "contrast", std::vector<double>{contrast.lo, contrast.hi});
  put_kv(out, "exposure", std::vector<double>{exposure.lo, exposure.hi});
  put_kv(out, "noise", noise);
  put_kv(out, "seed", std::to_string(seed));
  return out;
}

SynthSpec SynthSpec::from_keyvalues(KeyValues& kv) {
  SynthSpec s;
  s.image_size = kv.take_int("image_size", s.image_size);
  s.min_orifices = kv.take_int("min_orifices", s.min_orifices);
  s.max_orifices = kv.take_int("max_orifices", s.max_orifices);
  s.nesting_probability = kv.take_double("nesting_probability", s.nesting_probability);
  s.radius = take_range(kv, "radius", s.radius);
  s.darkness = take_range(kv, "darkness", s.darkness);
  s.texture_amplitude = kv.take_double("texture_amplitude", s.texture_amplitude);
  s.blur_length = take_range(kv, "blur_length", s.blur_length);
  s.contrast = take_range(kv, "contrast", s.contrast);
  s.exposure = take_range(kv, "exposure", s.exposure);
  s.noise = kv.take_double("noise", s.noise);
  const int seed = kv.take_int("seed", static_cast<int>(s.seed));
  if (seed < 0) throw ConfigError("seed", "must be >= 0");
  s.seed = static_cast<std::uint64_t>(seed);
  s.validate();
  return s;
}

SynthSpec SynthSpec::from_text(const std::string& text) {
  auto kv = KeyValues::parse(text);
  auto s = from_keyvalues(kv);
  kv.expect_consumed();
  return s;
}

SynthSpec SynthSpec::shifted() const {
  SynthSpec s = *this;
  s.blur_length = {std::max(blur_length.hi, 4.0), std::max(blur_length.hi, 4.0) + 5.0};
  s.contrast = {contrast.lo * 0.45, contrast.lo * 0.7};
  s.exposure = {std::min(1.0, exposure.hi + 0.15), std::min(1.0, exposure.hi + 0.35)};
  s.darkness = {darkness.lo * 0.6, darkness.lo + (darkness.hi - darkness.lo) * 0.4};
  s.noise = noise * 2.0;
  return s;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
  return mix(mix(seed) ^ (index * 0xd1b54a32d192ed03ULL));
}

SynthSample synth_sample(const SynthSpec& spec, std::uint64_t index) {
  spec.validate();
  Rng rng(sample_seed(spec.seed, index));
  const int n = spec.image_size;
  const double size = n;
  SynthSample out;
  out.image = Image(n, n);

  // Airway wall: low-frequency sinusoid texture over a pink base.
  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3];
  for (auto& w : waves) {
    const double freq = rng.uniform(1.0, 4.0) * 2.0 * std::numbers::pi / size;
    const double dir = rng.uniform(0.0, std::numbers::pi);
    w = {freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
         spec.texture_amplitude * rng.uniform(0.5, 1.0)};
  }
  const float tint = static_cast<float>(rng.uniform(-0.05, 0.05));
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double t = 0.0;
      for (const auto& w : waves) t += w.amp * std::sin(w.fx * x + w.fy * y + w.phase);
      const auto m = static_cast<float>(1.0 + t);
      out.image.at(0, y, x) = (kWall.r + tint) * m;
      out.image.at(1, y, x) = (kWall.g + tint * 0.5f) * m;
      out.image.at(2, y, x) = kWall.b * m;
    }

  // Orifices: non-overlapping top-level ellipses, optionally with a child.
  const int count = rng.integer(spec.min_orifices, spec.max_orifices);
  const double child_min_axis = std::max(3.0, 0.035 * size);
  std::vector<BBox> occupied;
  for (int k = 0; k < count; ++k) {
    const bool nested = rng.uniform() < spec.nesting_probability;
    for (int attempt = 0; attempt < 40; ++attempt) {
      Ellipse e;
      const double lo = nested ? (spec.radius.lo + spec.radius.hi) / 2 : spec.radius.lo;
      e.a = rng.uniform(lo, spec.radius.hi) * size;
      e.b = e.a * rng.uniform(0.65, 1.0);
      e.theta = rng.uniform(0.0, std::numbers::pi);
      e.darkness = rng.uniform(spec.darkness);
      if (nested) {
        // A parent with a child stays fully in frame.
        const BBox probe = Ellipse{0, 0, e.a, e.b, e.theta, 0}.aabb();
        if (probe.x2 * 2 >= size || probe.y2 * 2 >= size) continue;
        e.cx = rng.uniform(probe.x2, size - probe.x2);
        e.cy = rng.uniform(probe.y2, size - probe.y2);
      } else {
        e.cx = rng.uniform(0.05, 0.95) * size;
        e.cy = rng.uniform(0.05, 0.95) * size;
      }
      const BBox box = e.aabb();
      if (std::any_of(occupied.begin(), occupied.end(),
                      [&](const BBox& o) { return overlaps(o, box, 2.0f); }))
        continue;
      occupied.push_back(box);
      out.ellipses.push_back(e);
      if (nested) {
        const double kmin = std::min(0.45, child_min_axis / e.b);
        const double kscale = rng.uniform(kmin, std::max(kmin, 0.45));
        Ellipse c;
        c.a = e.a * kscale;
        c.b = e.b * kscale;
        c.theta = e.theta;
        // Offset in the parent's normalized frame keeps the child inside.
        const double reach = (1.0 - kscale) * 0.6;
        const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const double dist = rng.uniform(0.0, reach);
        const double u = dist * std::cos(ang) * e.a, v = dist * std::sin(ang) * e.b;
        const double ct = std::cos(e.theta), st = std::sin(e.theta);
        c.cx = e.cx + u * ct - v * st;
        c.cy = e.cy + u * st + v * ct;
        c.darkness = std::min(0.97, e.darkness + rng.uniform(0.25, 0.45));
        out.ellipses.push_back(c);
      }
      break;
    }
  }
  for (const auto& e : out.ellipses) paint_ellipse(out.image, e);
  for (const auto& e : out.ellipses) {
    if (visible_fraction(e, n) < 0.3) continue;
    BBox b = e.aabb();
    b.x1 = std::clamp(b.x1, 0.0f, static_cast<float>(n));
    b.y1 = std::clamp(b.y1, 0.0f, static_cast<float>(n));
    b.x2 = std::clamp(b.x2, 0.0f, static_cast<float>(n));
    b.y2 = std::clamp(b.y2, 0.0f, static_cast<float>(n));
    out.labels.push_back({0, b, 0});
  }

  // Photometric nuisances: motion blur, contrast loss, vignette/highlight, noise.
  motion_blur(out.image, rng.uniform(spec.blur_length), rng.uniform(0.0, std::numbers::pi));
  const auto contrast = static_cast<float>(rng.uniform(spec.contrast));
  const double exposure = rng.uniform(spec.exposure);
  const double hx = rng.uniform(0.2, 0.8) * size, hy = rng.uniform(0.2, 0.8) * size;
  const double hr = rng.uniform(0.08, 0.2) * size;
  float mean[3] = {0, 0, 0};
  for (int c = 0; c < 3; ++c) {
    double s = 0.0;
    for (int i = 0; i < n * n; ++i) s += out.image.pixels[static_cast<std::size_t>(c) * n * n + i];
    mean[c] = static_cast<float>(s / (n * n));
  }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double rx = (x + 0.5) / size - 0.5, ry = (y + 0.5) / size - 0.5;
      const double vignette = 1.0 - exposure * 1.6 * (rx * rx + ry * ry);
      const double dx = x - hx, dy = y - hy;
      const double highlight = exposure * 0.8 * std::exp(-(dx * dx + dy * dy) / (2 * hr * hr));
      for (int c = 0; c < 3; ++c) {
        float v = mean[c] + (out.image.at(c, y, x) - mean[c]) * contrast;
        v = static_cast<float>(v * vignette + highlight + spec.noise * rng.normal());
        out.image.at(c, y, x) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  out.image = decode_ppm(encode_ppm(out.image));  // quantize to what lands on disk
  return out;
}

}  // namespace lumen
