#include <algorithm>

#include "lumen/kernels.hpp"

namespace lumen::kernels::reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, float* c,
          std::size_t ldc, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += static_cast<double>(a(i, p)) * b(p, j);
      c[i * ldc + j] = accumulate ? c[i * ldc + j] + static_cast<float>(s) : static_cast<float>(s);
    }
}

void conv2d(const ConvGeometry& g, const float* input, const float* weight, const float* bias,
            std::size_t out_channels, float* output) {
  const std::size_t oh_n = g.out_height(), ow_n = g.out_width();
  for (std::size_t b = 0; b < g.batch; ++b)
    for (std::size_t o = 0; o < out_channels; ++o)
      for (std::size_t oh = 0; oh < oh_n; ++oh)
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
          double s = bias ? bias[o] : 0.0;
          for (std::size_t c = 0; c < g.channels; ++c)
            for (std::size_t kh = 0; kh < g.kernel; ++kh)
              for (std::size_t kw = 0; kw < g.kernel; ++kw) {
                const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.padding);
                const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.padding);
                if (ih < 0 || iw < 0 || ih >= static_cast<long>(g.height) ||
                    iw >= static_cast<long>(g.width))
                  continue;
                s += static_cast<double>(
                         input[((b * g.channels + c) * g.height + ih) * g.width + iw]) *
                     weight[((o * g.channels + c) * g.kernel + kh) * g.kernel + kw];
              }
          output[((b * out_channels + o) * oh_n + oh) * ow_n + ow] = static_cast<float>(s);
        }
}

void channel_moments(const float* x, std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<double> mean, std::span<double> var) {
  for (std::size_t c = 0; c < channels; ++c) {
    double s = 0.0, ss = 0.0;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) s += x[(b * channels + c) * plane + i];
    const double mu = s / static_cast<double>(batch * plane);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = x[(b * channels + c) * plane + i] - mu;
        ss += d * d;
      }
    mean[c] = mu;
    var[c] = ss / static_cast<double>(batch * plane);
  }
}

void nms_sorted(std::span<const float> boxes, float iou_threshold, std::span<std::uint8_t> keep) {
  const std::size_t n = boxes.size() / 4;
  for (std::size_t j = 0; j < n; ++j) {
    keep[j] = 1;
    for (std::size_t i = 0; i < j; ++i) {
      if (!keep[i]) continue;
      const float* a = boxes.data() + 4 * i;
      const float* b = boxes.data() + 4 * j;
      const double iw = std::max(0.0, static_cast<double>(std::min(a[2], b[2])) - std::max(a[0], b[0]));
      const double ih = std::max(0.0, static_cast<double>(std::min(a[3], b[3])) - std::max(a[1], b[1]));
      const double inter = iw * ih;
      const double uni = (static_cast<double>(a[2]) - a[0]) * (static_cast<double>(a[3]) - a[1]) +
                         (static_cast<double>(b[2]) - b[0]) * (static_cast<double>(b[3]) - b[1]) -
                         inter;
      if (uni > 0.0 && inter / uni > iou_threshold) {
        keep[j] = 0;
        break;
      }
    }
  }
}

}  // namespace lumen::kernels::reference
