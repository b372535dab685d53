#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

// Compute kernels behind the tensor ops. The functions in `lumen::kernels` are
// the OpenMP-parallel production paths; `lumen::kernels::reference` holds
// plain serial loops used as test oracles and benchmark baselines.
//
// Every parallel kernel partitions work so that each output element is
// reduced by exactly one thread in a fixed order, so results do not depend on
// the thread count.

namespace lumen::kernels {

// Strided read-only matrix view: element (r, c) lives at data[r*row_stride + c*col_stride].
struct MatView {
  const float* data;
  std::ptrdiff_t row_stride;
  std::ptrdiff_t col_stride;

  float operator()(std::size_t r, std::size_t c) const {
    return data[static_cast<std::ptrdiff_t>(r) * row_stride +
                static_cast<std::ptrdiff_t>(c) * col_stride];
  }
  MatView transposed() const { return {data, col_stride, row_stride}; }
};

inline MatView row_major(const float* data, std::size_t cols) {
  return {data, static_cast<std::ptrdiff_t>(cols), 1};
}

// C[m x n] (row-major, leading dim ldc) = A[m x k] * B[k x n], or += when accumulate.
void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, float* c,
          std::size_t ldc, bool accumulate);

struct ConvGeometry {
  std::size_t batch, channels, height, width;
  std::size_t kernel, stride, padding;

  std::size_t out_height() const { return (height + 2 * padding - kernel) / stride + 1; }
  std::size_t out_width() const { return (width + 2 * padding - kernel) / stride + 1; }
  std::size_t col_rows() const { return channels * kernel * kernel; }
  // Columns are batch-folded: column index = image * out_h*out_w + pixel.
  std::size_t col_cols() const { return batch * out_height() * out_width(); }
};

// NCHW input -> [C*k*k, N*OH*OW] patch matrix.
void im2col(const ConvGeometry& g, const float* input, float* col);
// Scatter-add of a patch matrix back into an NCHW gradient buffer.
void col2im(const ConvGeometry& g, const float* col, float* input_grad);

// out[N][O][P] (+)= src[O][N*P] and its inverse, used to move between the
// batch-folded GEMM layout and NCHW.
void unfold_batch(const float* src, float* dst, std::size_t batch, std::size_t channels,
                  std::size_t plane, bool accumulate);
void fold_batch(const float* src, float* dst, std::size_t batch, std::size_t channels,
                std::size_t plane);

// Per-channel mean and biased variance over N and the spatial plane, in double.
void channel_moments(const float* x, std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<double> mean, std::span<double> var);

// Greedy NMS keep mask over boxes already sorted by priority. boxes = [x1,y1,x2,y2]*n.
void nms_sorted(std::span<const float> boxes, float iou_threshold, std::span<std::uint8_t> keep);

namespace reference {

void gemm(std::size_t m, std::size_t n, std::size_t k, MatView a, MatView b, float* c,
          std::size_t ldc, bool accumulate);

// Direct convolution, one output element at a time. weight is OIHW.
void conv2d(const ConvGeometry& g, const float* input, const float* weight, const float* bias,
            std::size_t out_channels, float* output);

void channel_moments(const float* x, std::size_t batch, std::size_t channels, std::size_t plane,
                     std::span<double> mean, std::span<double> var);

void nms_sorted(std::span<const float> boxes, float iou_threshold, std::span<std::uint8_t> keep);

}  // namespace reference

}  // namespace lumen::kernels
