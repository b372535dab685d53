#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "lumen/tensor.hpp"

// Differentiable tensor operations. Image tensors are NCHW, convolution
// weights OIHW. Every op records its backward closure when gradient mode is on
// and some input requires grad.

namespace lumen {

enum class Mode { Train, Eval };

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float factor);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Scalar sum_i weights[i] * x[i]; convenient probe loss for gradient checks.
Tensor weighted_sum(const Tensor& x, std::span<const float> weights);
Tensor reshape(const Tensor& x, Shape shape);

Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softmax(const Tensor& x, std::size_t axis);

Tensor upsample_nearest2x(const Tensor& x);
Tensor concat_channels(const std::vector<Tensor>& parts);
Tensor concat_channels(const Tensor& a, const Tensor& b);
Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count);

// 2x2 space-to-depth: out[n][c*4 + 2*di + dj][i][j] = in[n][c][2i+di][2j+dj].
Tensor space_to_depth2x(const Tensor& x);

// `bias` may be an undefined Tensor.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding);

struct RunningStats {
  Tensor mean;
  Tensor var;
};

// Train mode normalizes with batch statistics and updates `stats` in place
// (running var uses the unbiased estimate); eval mode uses `stats`.
Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   RunningStats& stats, Mode mode, float momentum, float eps);

// Multi-head scaled dot-product self-attention over [tokens, dim] or
// [batch, tokens, dim] inputs; heads are contiguous slices of dim.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

// [N,C,H,W] -> [N*areas, (H/areas)*W, C]: each horizontal band becomes a token sequence.
Tensor to_band_tokens(const Tensor& x, std::size_t areas);
Tensor from_band_tokens(const Tensor& tokens, const Shape& nchw, std::size_t areas);

}  // namespace lumen
