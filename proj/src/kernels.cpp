#include "lumen/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#include <omp.h>

namespace lumen::kernels {

namespace {

typedef float v8f __attribute__((vector_size(32)));

constexpr std::size_t kMR = 6;
constexpr std::size_t kNR = 16;
constexpr std::size_t kKC = 256;
constexpr std::size_t kNC = 1024;

inline v8f load8(const float* p) {
  v8f v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void store8(float* p, v8f v) { std::memcpy(p, &v, sizeof(v)); }

// 6x16 register tile: tile = sum_p ap[p][0..6) (outer) bp[p][0..16).
inline void micro_kernel(std::size_t kc, const float* ap, const float* bp, float* tile) {
  v8f acc[kMR][2] = {};
  for (std::size_t p = 0; p < kc; ++p) {
    const v8f b0 = load8(bp + p * kNR);
    const v8f b1 = load8(bp + p * kNR + 8);
    const float* a = ap + p * kMR;
#pragma GCC unroll 6
    for (std::size_t r = 0; r < kMR; ++r) {
      acc[r][0] += b0 * a[r];
      acc[r][1] += b1 * a[r];
    }
  }
  for (std::size_t r = 0; r < kMR; ++r) {
    store8(tile + r * kNR, acc[r][0]);
    store8(tile + r * kNR + 8, acc[r][1]);
  }
}

void pack_a(const MatView& a, std::size_t m, std::size_t pc, std::size_t kc, float* out) {
  const std::size_t panels = (m + kMR - 1) / kMR;
#pragma omp parallel for schedule(static)
  for (std::size_t ip = 0; ip < panels; ++ip) {
    float* dst = out + ip * kc * kMR;
    const std::size_t i0 = ip * kMR;
    for (std::size_t p = 0; p < kc; ++p)
      for (std::size_t r = 0; r < kMR; ++r)
        dst[p * kMR + r] = (i0 + r < m) ? a(i0 + r, pc + p) : 0.0f;
  }
}

void pack_b(const MatView& b, std::size_t jc, std::size_t nc, std::size_t pc, std::size_t kc,
            float* out) {
  const std::size_t panels = (nc + kNR - 1) / kNR;
#pragma omp parallel for schedule(static)
  for (std::size_t jp = 0; jp < panels; ++jp) {
    float* dst = out + jp * kc * kNR;
    const std::size_t j0 = jp * kNR;
    const std::size_t width = std::min(kNR, nc - j0);
    if (b.col_stride == 1 && width == kNR) {
      for (std::size_t p = 0; p < kc; ++p)
        std::memcpy(dst + p * kNR, &b.data[static_cast<std::ptrdiff_t>(pc + p) * b.row_stride +
                                           static_cast<std::ptrdiff_t>(jc + j0)],
                    kNR * sizeof(float));
      continue;
    }
    for (std::size_t p = 0; p < kc; ++p)
      for (std::size_t c = 0; c < kNR; ++c)
        dst[p * kNR + c] = c < width ? b(pc + p, jc + j0 + c) : 0.0f;
  }
}

}  // namespace

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, float* c,
          std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, 0.0f);
    return;
  }
  const std::size_t m_panels = (m + kMR - 1) / kMR;
  std::vector<float> apack(m_panels * kMR * std::min(k, kKC));
  std::vector<float> bpack(((std::min(n, kNC) + kNR - 1) / kNR) * kNR * std::min(k, kKC));

  for (std::size_t jc = 0; jc < n; jc += kNC) {
    const std::size_t nc = std::min(kNC, n - jc);
    const std::size_t n_panels = (nc + kNR - 1) / kNR;
    for (std::size_t pc = 0; pc < k; pc += kKC) {
      const std::size_t kc = std::min(kKC, k - pc);
      const bool overwrite = pc == 0 && !accumulate;
      pack_a(a, m, pc, kc, apack.data());
      pack_b(b, jc, nc, pc, kc, bpack.data());
      const std::size_t tiles = m_panels * n_panels;
#pragma omp parallel for schedule(static)
      for (std::size_t t = 0; t < tiles; ++t) {
        const std::size_t ip = t % m_panels;
        const std::size_t jp = t / m_panels;
        alignas(32) float tile[kMR * kNR];
        micro_kernel(kc, apack.data() + ip * kc * kMR, bpack.data() + jp * kc * kNR, tile);
        const std::size_t i0 = ip * kMR;
        const std::size_t j0 = jc + jp * kNR;
        const std::size_t rows = std::min(kMR, m - i0);
        const std::size_t cols = std::min(kNR, n - j0);
        for (std::size_t r = 0; r < rows; ++r) {
          float* dst = c + (i0 + r) * ldc + j0;
          const float* src = tile + r * kNR;
          if (overwrite)
            for (std::size_t q = 0; q < cols; ++q) dst[q] = src[q];
          else
            for (std::size_t q = 0; q < cols; ++q) dst[q] += src[q];
        }
      }
    }
  }
}

void im2col(const ConvGeometry& g, const float* input, float* col) {
  const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
  const std::size_t plane = oh_n * ow_n;
  const std::size_t rows = g.col_rows();
  const std::size_t cols = g.col_cols();
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const auto S = static_cast<std::ptrdiff_t>(g.stride);
  const auto P = static_cast<std::ptrdiff_t>(g.padding);
#pragma omp parallel for schedule(static)
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t c = r / (g.kernel * g.kernel);
    const auto kh = static_cast<std::ptrdiff_t>((r / g.kernel) % g.kernel);
    const auto kw = static_cast<std::ptrdiff_t>(r % g.kernel);
    float* dst_row = col + r * cols;
    for (std::size_t b = 0; b < g.batch; ++b) {
      const float* src = input + (b * g.channels + c) * g.height * g.width;
      float* dst = dst_row + b * plane;
      for (std::size_t oh = 0; oh < oh_n; ++oh) {
        const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * S - P + kh;
        float* out = dst + oh * ow_n;
        if (ih < 0 || ih >= H) {
          std::fill(out, out + ow_n, 0.0f);
          continue;
        }
        const float* in_row = src + ih * W;
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
          const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * S - P + kw;
          out[ow] = (iw >= 0 && iw < W) ? in_row[iw] : 0.0f;
        }
      }
    }
  }
}

void col2im(const ConvGeometry& g, const float* col, float* input_grad) {
  const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
  const std::size_t plane = oh_n * ow_n;
  const std::size_t cols = g.col_cols();
  const std::size_t kk = g.kernel * g.kernel;
  const auto H = static_cast<std::ptrdiff_t>(g.height);
  const auto W = static_cast<std::ptrdiff_t>(g.width);
  const auto S = static_cast<std::ptrdiff_t>(g.stride);
  const auto P = static_cast<std::ptrdiff_t>(g.padding);
  // One thread per input channel: rows of channel c only touch channel c.
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t q = 0; q < kk; ++q) {
      const auto kh = static_cast<std::ptrdiff_t>(q / g.kernel);
      const auto kw = static_cast<std::ptrdiff_t>(q % g.kernel);
      const float* src_row = col + (c * kk + q) * cols;
      for (std::size_t b = 0; b < g.batch; ++b) {
        float* dst = input_grad + (b * g.channels + c) * g.height * g.width;
        const float* src = src_row + b * plane;
        for (std::size_t oh = 0; oh < oh_n; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * S - P + kh;
          if (ih < 0 || ih >= H) continue;
          float* out_row = dst + ih * W;
          const float* in = src + oh * ow_n;
          for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow) * S - P + kw;
            if (iw >= 0 && iw < W) out_row[iw] += in[ow];
          }
        }
      }
    }
  }
}

void unfold_batch(const float* src, float* dst, std::size_t batch, std::size_t channels,
                  std::size_t plane, bool accumulate) {
#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < channels; ++o) {
    for (std::size_t b = 0; b < batch; ++b) {
      const float* s = src + o * batch * plane + b * plane;
      float* d = dst + (b * channels + o) * plane;
      if (accumulate)
        for (std::size_t p = 0; p < plane; ++p) d[p] += s[p];
      else
        std::memcpy(d, s, plane * sizeof(float));
    }
  }
}

void fold_batch(const float* src, float* dst, std::size_t batch, std::size_t channels,
                std::size_t plane) {
#pragma omp parallel for schedule(static)
  for (std::size_t o = 0; o < channels; ++o)
    for (std::size_t b = 0; b < batch; ++b)
      std::memcpy(dst + o * batch * plane + b * plane, src + (b * channels + o) * plane,
                  plane * sizeof(float));
}

void channel_moments(const float* x, std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<double> mean, std::span<double> var) {
  const double count = static_cast<double>(batch * plane);
#pragma omp parallel for schedule(static)
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const float* p = x + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
    }
    const double mu = s / count;
    double ss = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
      const float* p = x + (b * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = p[i] - mu;
        ss += d * d;
      }
    }
    mean[c] = mu;
    var[c] = ss / count;
  }
}

namespace {

inline double box_iou(const float* a, const float* b) {
  const double iw = std::max(0.0, static_cast<double>(std::min(a[2], b[2])) - std::max(a[0], b[0]));
  const double ih = std::max(0.0, static_cast<double>(std::min(a[3], b[3])) - std::max(a[1], b[1]));
  const double inter = iw * ih;
  const double uni = (static_cast<double>(a[2]) - a[0]) * (static_cast<double>(a[3]) - a[1]) +
                     (static_cast<double>(b[2]) - b[0]) * (static_cast<double>(b[3]) - b[1]) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace

void nms_sorted(std::span<const float> boxes, float iou_threshold, std::span<std::uint8_t> keep) {
  const std::size_t n = boxes.size() / 4;
  std::fill(keep.begin(), keep.end(), std::uint8_t{1});
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    const float* bi = boxes.data() + 4 * i;
#pragma omp parallel for schedule(static) if (n - i > 256)
    for (std::size_t j = i + 1; j < n; ++j)
      if (keep[j] && box_iou(bi, boxes.data() + 4 * j) > iou_threshold) keep[j] = 0;
  }
}

}  // namespace lumen::kernels
