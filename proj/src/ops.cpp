#include "lumen/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "lumen/kernels.hpp"

namespace lumen {

using detail::input_grad;
using detail::make_result;
using detail::TensorImpl;

namespace {

void require_rank(const char* op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    throw DimensionError(op, "rank", rank, t.rank());
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw DimensionError(op, "shape", shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

struct Nchw {
  std::size_t n, c, h, w;
  std::size_t plane() const { return h * w; }
};

Nchw nchw(const char* op, const Tensor& t) {
  require_rank(op, t, 4);
  const auto& s = t.shape();
  return {s[0], s[1], s[2], s[3]};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& node) {
    for (std::size_t which = 0; which < 2; ++which)
      if (float* g = input_grad(node, which))
        for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<float> out(a.numel());
  const auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](TensorImpl& node) {
    const auto& x = node.inputs[0]->data;
    const auto& y = node.inputs[1]->data;
    if (float* g = input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * y[i];
    if (float* g = input_grad(node, 1))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i] * x[i];
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return make_result(x.shape(), std::move(out), {x}, [factor](TensorImpl& node) {
    if (float* g = input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += factor * node.grad[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return make_result(Shape{1}, {static_cast<float>(s)}, {x}, [](TensorImpl& node) {
    if (float* g = input_grad(node, 0)) {
      const float up = node.grad[0];
      const std::size_t n = node.inputs[0]->data.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += up;
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

Tensor weighted_sum(const Tensor& x, std::span<const float> weights) {
  if (weights.size() != x.numel()) throw DimensionError("weighted_sum", "weights", x.numel(), weights.size());
  double s = 0.0;
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += static_cast<double>(d[i]) * weights[i];
  std::vector<float> w(weights.begin(), weights.end());
  return make_result(Shape{1}, {static_cast<float>(s)}, {x},
                     [w = std::move(w)](TensorImpl& node) {
                       if (float* g = input_grad(node, 0))
                         for (std::size_t i = 0; i < w.size(); ++i) g[i] += node.grad[0] * w[i];
                     });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape", "numel", x.numel(), shape_numel(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return make_result(std::move(shape), std::move(out), {x}, [](TensorImpl& node) {
    if (float* g = input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) g[i] += node.grad[i];
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoidf(d[i]);
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& node) {
    if (float* g = input_grad(node, 0))
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        const float s = node.data[i];
        g[i] += node.grad[i] * s * (1.0f - s);
      }
  });
}

Tensor silu(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto d = x.data();
#pragma omp parallel for schedule(static) if (out.size() > 65536)
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] * sigmoidf(d[i]);
  return make_result(x.shape(), std::move(out), {x}, [](TensorImpl& node) {
    float* g = input_grad(node, 0);
    if (!g) return;
    const auto& in = node.inputs[0]->data;
    const std::size_t n = node.grad.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t i = 0; i < n; ++i) {
      const float s = sigmoidf(in[i]);
      g[i] += node.grad[i] * s * (1.0f + in[i] * (1.0f - s));
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size())
    throw DimensionError("softmax", std::to_string(axis),
                         "axis out of range for rank " + std::to_string(s.size()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<float> out(x.numel());
  const auto d = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      float mx = d[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, d[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(static_cast<double>(d[base + j * inner]) - mx);
      for (std::size_t j = 0; j < n; ++j)
        out[base + j * inner] =
            static_cast<float>(std::exp(static_cast<double>(d[base + j * inner]) - mx) / z);
    }
  return make_result(s, std::move(out), {x}, [outer, inner, n](TensorImpl& node) {
    float* g = input_grad(node, 0);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += static_cast<double>(node.grad[base + j * inner]) * node.data[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += node.data[idx] * static_cast<float>(node.grad[idx] - dot);
        }
      }
  });
}

Tensor upsample_nearest2x(const Tensor& x) {
  const auto g = nchw("upsample_nearest2x", x);
  const std::size_t oh = g.h * 2, ow = g.w * 2;
  std::vector<float> out(g.n * g.c * oh * ow);
  const auto d = x.data();
  for (std::size_t nc = 0; nc < g.n * g.c; ++nc)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        out[(nc * oh + i) * ow + j] = d[(nc * g.h + i / 2) * g.w + j / 2];
  return make_result({g.n, g.c, oh, ow}, std::move(out), {x}, [g](TensorImpl& node) {
    float* gr = input_grad(node, 0);
    if (!gr) return;
    const std::size_t oh = g.h * 2, ow = g.w * 2;
    for (std::size_t nc = 0; nc < g.n * g.c; ++nc)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j)
          gr[(nc * g.h + i / 2) * g.w + j / 2] += node.grad[(nc * oh + i) * ow + j];
  });
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error("concat_channels: no inputs");
  const auto first = nchw("concat_channels", parts[0]);
  std::vector<std::size_t> channels;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const auto g = nchw("concat_channels", p);
    if (g.n != first.n) throw DimensionError("concat_channels", "N", first.n, g.n);
    if (g.h != first.h) throw DimensionError("concat_channels", "H", first.h, g.h);
    if (g.w != first.w) throw DimensionError("concat_channels", "W", first.w, g.w);
    channels.push_back(g.c);
    total += g.c;
  }
  const std::size_t plane = first.plane();
  std::vector<float> out(first.n * total * plane);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto d = parts[k].data();
    for (std::size_t b = 0; b < first.n; ++b)
      std::copy_n(d.data() + b * channels[k] * plane, channels[k] * plane,
                  out.data() + (b * total + offset) * plane);
    offset += channels[k];
  }
  return make_result({first.n, total, first.h, first.w}, std::move(out), parts,
                     [channels, total, plane, batch = first.n](TensorImpl& node) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < channels.size(); ++k) {
                         if (float* g = input_grad(node, k))
                           for (std::size_t b = 0; b < batch; ++b) {
                             const float* src = node.grad.data() + (b * total + offset) * plane;
                             float* dst = g + b * channels[k] * plane;
                             for (std::size_t i = 0; i < channels[k] * plane; ++i) dst[i] += src[i];
                           }
                         offset += channels[k];
                       }
                     });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat_channels(std::vector<Tensor>{a, b}); }

Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  const auto g = nchw("slice_channels", x);
  if (count == 0 || begin + count > g.c)
    throw DimensionError("slice_channels", "C", "range [" + std::to_string(begin) + ", " +
                                                    std::to_string(begin + count) + ") exceeds " +
                                                    std::to_string(g.c) + " channels");
  const std::size_t plane = g.plane();
  std::vector<float> out(g.n * count * plane);
  const auto d = x.data();
  for (std::size_t b = 0; b < g.n; ++b)
    std::copy_n(d.data() + (b * g.c + begin) * plane, count * plane, out.data() + b * count * plane);
  return make_result({g.n, count, g.h, g.w}, std::move(out), {x},
                     [g, begin, count, plane](TensorImpl& node) {
                       float* gr = input_grad(node, 0);
                       if (!gr) return;
                       for (std::size_t b = 0; b < g.n; ++b) {
                         const float* src = node.grad.data() + b * count * plane;
                         float* dst = gr + (b * g.c + begin) * plane;
                         for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                       }
                     });
}

Tensor space_to_depth2x(const Tensor& x) {
  const auto g = nchw("space_to_depth2x", x);
  if (g.h % 2) throw DimensionError("space_to_depth2x", "H", "height " + std::to_string(g.h) + " is odd");
  if (g.w % 2) throw DimensionError("space_to_depth2x", "W", "width " + std::to_string(g.w) + " is odd");
  const std::size_t oh = g.h / 2, ow = g.w / 2, oc = g.c * 4;
  // Forward and backward share one index map: out index -> in index.
  std::vector<std::size_t> src_index(g.n * oc * oh * ow);
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t c = 0; c < g.c; ++c)
      for (std::size_t phase = 0; phase < 4; ++phase) {
        const std::size_t di = phase / 2, dj = phase % 2;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j)
            src_index[((b * oc + c * 4 + phase) * oh + i) * ow + j] =
                ((b * g.c + c) * g.h + 2 * i + di) * g.w + 2 * j + dj;
      }
  std::vector<float> out(src_index.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[src_index[i]];
  return make_result({g.n, oc, oh, ow}, std::move(out), {x},
                     [src_index = std::move(src_index)](TensorImpl& node) {
                       if (float* gr = input_grad(node, 0))
                         for (std::size_t i = 0; i < src_index.size(); ++i)
                           gr[src_index[i]] += node.grad[i];
                     });
}

namespace {

// Patch matrix for a convolution input: pointwise convs reuse the input
// through a batch fold, everything else goes through im2col.
std::vector<float> patch_matrix(const kernels::ConvGeometry& geo, const float* input) {
  std::vector<float> col(geo.col_rows() * geo.col_cols());
  if (geo.kernel == 1 && geo.stride == 1 && geo.padding == 0)
    kernels::fold_batch(input, col.data(), geo.batch, geo.channels, geo.height * geo.width);
  else
    kernels::im2col(geo, input, col.data());
  return col;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding) {
  const auto in = nchw("conv2d", input);
  require_rank("conv2d", weight, 4);
  const auto& ws = weight.shape();
  const std::size_t out_c = ws[0];
  if (ws[1] != in.c) throw DimensionError("conv2d", "channels", ws[1], in.c);
  if (ws[2] != ws[3]) throw DimensionError("conv2d", "kernel", ws[2], ws[3]);
  if (stride == 0) throw DimensionError("conv2d", "stride", "stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_c))
    throw DimensionError("conv2d", "bias", out_c, bias.numel());
  const std::size_t k = ws[2];
  if (in.h + 2 * padding < k) throw DimensionError("conv2d", "H", "kernel larger than padded input");
  if (in.w + 2 * padding < k) throw DimensionError("conv2d", "W", "kernel larger than padded input");

  const kernels::ConvGeometry geo{in.n, in.c, in.h, in.w, k, stride, padding};
  const std::size_t oh = geo.out_height(), ow = geo.out_width(), plane = oh * ow;
  const std::size_t rows = geo.col_rows(), cols = geo.col_cols();

  std::vector<float> result(out_c * cols);
  {
    const auto col = patch_matrix(geo, input.data().data());
    kernels::gemm(out_c, cols, rows, kernels::row_major(weight.data().data(), rows),
                  kernels::row_major(col.data(), cols), result.data(), cols, false);
  }
  std::vector<float> out(in.n * out_c * plane);
  kernels::unfold_batch(result.data(), out.data(), in.n, out_c, plane, false);
  if (bias.defined()) {
    const auto bd = bias.data();
    for (std::size_t b = 0; b < in.n; ++b)
      for (std::size_t o = 0; o < out_c; ++o) {
        float* p = out.data() + (b * out_c + o) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bd[o];
      }
  }

  return make_result(
      {in.n, out_c, oh, ow}, std::move(out), {input, weight, bias},
      [geo, out_c, plane, rows, cols](TensorImpl& node) {
        float* gx = input_grad(node, 0);
        float* gw = input_grad(node, 1);
        float* gb = input_grad(node, 2);
        std::vector<float> dres(out_c * cols);
        kernels::fold_batch(node.grad.data(), dres.data(), geo.batch, out_c, plane);
        if (gb)
          for (std::size_t o = 0; o < out_c; ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < cols; ++i) s += dres[o * cols + i];
            gb[o] += static_cast<float>(s);
          }
        const float* x = node.inputs[0]->data.data();
        const float* w = node.inputs[1]->data.data();
        if (gw) {
          const auto col = patch_matrix(geo, x);
          // dW[O x K] += dRes[O x NP] * col^T
          kernels::gemm(out_c, rows, cols, kernels::row_major(dres.data(), cols),
                        kernels::row_major(col.data(), cols).transposed(), gw, rows, true);
        }
        if (gx) {
          std::vector<float> dcol(rows * cols);
          // dCol[K x NP] = W^T * dRes
          kernels::gemm(rows, cols, out_c, kernels::row_major(w, rows).transposed(),
                        kernels::row_major(dres.data(), cols), dcol.data(), cols, false);
          if (geo.kernel == 1 && geo.stride == 1 && geo.padding == 0)
            kernels::unfold_batch(dcol.data(), gx, geo.batch, geo.channels,
                                  geo.height * geo.width, true);
          else
            kernels::col2im(geo, dcol.data(), gx);
        }
      });
}

Tensor batchnorm2d(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                   RunningStats& stats, Mode mode, float momentum, float eps) {
  if (!(eps > 0.0f)) throw Error("batchnorm2d: eps must be positive, got " + std::to_string(eps));
  const auto g = nchw("batchnorm2d", input);
  if (gamma.numel() != g.c) throw DimensionError("batchnorm2d", "gamma", g.c, gamma.numel());
  if (beta.numel() != g.c) throw DimensionError("batchnorm2d", "beta", g.c, beta.numel());
  if (stats.mean.numel() != g.c || stats.var.numel() != g.c)
    throw DimensionError("batchnorm2d", "running_stats", g.c, stats.mean.numel());

  const std::size_t plane = g.plane();
  const double count = static_cast<double>(g.n * plane);
  std::vector<double> mu(g.c), var(g.c);
  if (mode == Mode::Train) {
    kernels::channel_moments(input.data().data(), g.n, g.c, plane, mu, var);
    auto rm = stats.mean.data();
    auto rv = stats.var.data();
    const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
    for (std::size_t c = 0; c < g.c; ++c) {
      rm[c] = static_cast<float>((1.0 - momentum) * rm[c] + momentum * mu[c]);
      rv[c] = static_cast<float>((1.0 - momentum) * rv[c] + momentum * var[c] * unbias);
    }
  } else {
    const auto rm = stats.mean.data();
    const auto rv = stats.var.data();
    for (std::size_t c = 0; c < g.c; ++c) {
      mu[c] = rm[c];
      var[c] = rv[c];
    }
  }

  std::vector<float> inv(g.c);
  for (std::size_t c = 0; c < g.c; ++c) inv[c] = static_cast<float>(1.0 / std::sqrt(var[c] + eps));
  std::vector<float> xhat(input.numel()), out(input.numel());
  const auto x = input.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
#pragma omp parallel for schedule(static) if (g.n * g.c > 8)
  for (std::size_t nc = 0; nc < g.n * g.c; ++nc) {
    const std::size_t c = nc % g.c;
    const float m = static_cast<float>(mu[c]);
    for (std::size_t i = 0; i < plane; ++i) {
      const std::size_t idx = nc * plane + i;
      xhat[idx] = (x[idx] - m) * inv[c];
      out[idx] = gm[c] * xhat[idx] + bt[c];
    }
  }

  return make_result(
      input.shape(), std::move(out), {input, gamma, beta},
      [g, plane, count, mode, inv = std::move(inv), xhat = std::move(xhat)](TensorImpl& node) {
        float* gx = input_grad(node, 0);
        float* gg = input_grad(node, 1);
        float* gbeta = input_grad(node, 2);
        const auto& gm = node.inputs[1]->data;
        const auto& dy = node.grad;
#pragma omp parallel for schedule(static)
        for (std::size_t c = 0; c < g.c; ++c) {
          double sdy = 0.0, sdyx = 0.0;
          for (std::size_t b = 0; b < g.n; ++b)
            for (std::size_t i = 0; i < plane; ++i) {
              const std::size_t idx = (b * g.c + c) * plane + i;
              sdy += dy[idx];
              sdyx += static_cast<double>(dy[idx]) * xhat[idx];
            }
          if (gg) gg[c] += static_cast<float>(sdyx);
          if (gbeta) gbeta[c] += static_cast<float>(sdy);
          if (!gx) continue;
          const float k = gm[c] * inv[c];
          if (mode == Mode::Train) {
            const float mdy = static_cast<float>(sdy / count);
            const float mdyx = static_cast<float>(sdyx / count);
            for (std::size_t b = 0; b < g.n; ++b)
              for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * g.c + c) * plane + i;
                gx[idx] += k * (dy[idx] - mdy - xhat[idx] * mdyx);
              }
          } else {
            for (std::size_t b = 0; b < g.n; ++b)
              for (std::size_t i = 0; i < plane; ++i) {
                const std::size_t idx = (b * g.c + c) * plane + i;
                gx[idx] += k * dy[idx];
              }
          }
        }
      });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  if (q.rank() != 2 && q.rank() != 3)
    throw DimensionError("attention", "rank", "expected [tokens, dim] or [batch, tokens, dim]");
  require_same_shape("attention", q, k);
  require_same_shape("attention", q, v);
  const auto& s = q.shape();
  const std::size_t batch = s.size() == 3 ? s[0] : 1;
  const std::size_t tokens = s[s.size() - 2];
  const std::size_t dim = s.back();
  if (heads == 0 || dim % heads != 0)
    throw DimensionError("attention", "heads",
                         "embedding dim " + std::to_string(dim) + " not divisible by " +
                             std::to_string(heads) + " heads");
  const std::size_t dh = dim / heads;
  const float scale_f = 1.0f / std::sqrt(static_cast<float>(dh));

  std::vector<float> probs(batch * heads * tokens * tokens);
  std::vector<float> out(q.numel());
  const float* qd = q.data().data();
  const float* kd = k.data().data();
  const float* vd = v.data().data();
#pragma omp parallel for schedule(static)
  for (std::size_t bh = 0; bh < batch * heads; ++bh) {
    const std::size_t b = bh / heads, h = bh % heads;
    const std::size_t base = b * tokens * dim + h * dh;
    float* P = probs.data() + bh * tokens * tokens;
    for (std::size_t i = 0; i < tokens; ++i) {
      float* row = P + i * tokens;
      float mx = -INFINITY;
      for (std::size_t j = 0; j < tokens; ++j) {
        float acc = 0.0f;
        for (std::size_t d = 0; d < dh; ++d) acc += qd[base + i * dim + d] * kd[base + j * dim + d];
        row[j] = acc * scale_f;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < tokens; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      const float inv_z = static_cast<float>(1.0 / z);
      for (std::size_t j = 0; j < tokens; ++j) row[j] *= inv_z;
      float* o = out.data() + base + i * dim;
      for (std::size_t j = 0; j < tokens; ++j) {
        const float p = row[j];
        const float* vr = vd + base + j * dim;
        for (std::size_t d = 0; d < dh; ++d) o[d] += p * vr[d];
      }
    }
  }

  return make_result(
      s, std::move(out), {q, k, v},
      [batch, heads, tokens, dim, dh, scale_f, probs = std::move(probs)](TensorImpl& node) {
        float* gq = input_grad(node, 0);
        float* gk = input_grad(node, 1);
        float* gv = input_grad(node, 2);
        const float* qd = node.inputs[0]->data.data();
        const float* kd = node.inputs[1]->data.data();
        const float* vd = node.inputs[2]->data.data();
        const float* dO = node.grad.data();
#pragma omp parallel for schedule(static)
        for (std::size_t bh = 0; bh < batch * heads; ++bh) {
          const std::size_t b = bh / heads, h = bh % heads;
          const std::size_t base = b * tokens * dim + h * dh;
          const float* P = probs.data() + bh * tokens * tokens;
          std::vector<float> dS(tokens * tokens);
          for (std::size_t i = 0; i < tokens; ++i) {
            const float* go = dO + base + i * dim;
            double rowdot = 0.0;
            for (std::size_t j = 0; j < tokens; ++j) {
              float dp = 0.0f;
              const float* vr = vd + base + j * dim;
              for (std::size_t d = 0; d < dh; ++d) dp += go[d] * vr[d];
              dS[i * tokens + j] = dp;
              rowdot += static_cast<double>(dp) * P[i * tokens + j];
            }
            for (std::size_t j = 0; j < tokens; ++j)
              dS[i * tokens + j] =
                  P[i * tokens + j] * (dS[i * tokens + j] - static_cast<float>(rowdot)) * scale_f;
          }
          if (gv)
            for (std::size_t j = 0; j < tokens; ++j) {
              float* g = gv + base + j * dim;
              for (std::size_t i = 0; i < tokens; ++i) {
                const float p = P[i * tokens + j];
                const float* go = dO + base + i * dim;
                for (std::size_t d = 0; d < dh; ++d) g[d] += p * go[d];
              }
            }
          if (gq)
            for (std::size_t i = 0; i < tokens; ++i) {
              float* g = gq + base + i * dim;
              for (std::size_t j = 0; j < tokens; ++j) {
                const float w = dS[i * tokens + j];
                const float* kr = kd + base + j * dim;
                for (std::size_t d = 0; d < dh; ++d) g[d] += w * kr[d];
              }
            }
          if (gk)
            for (std::size_t j = 0; j < tokens; ++j) {
              float* g = gk + base + j * dim;
              for (std::size_t i = 0; i < tokens; ++i) {
                const float w = dS[i * tokens + j];
                const float* qr = qd + base + i * dim;
                for (std::size_t d = 0; d < dh; ++d) g[d] += w * qr[d];
              }
            }
        }
      });
}

namespace {

// Index of the NCHW element feeding token-tensor element `t`.
std::vector<std::size_t> band_index(const Nchw& g, std::size_t areas) {
  const std::size_t bh = g.h / areas, tokens = bh * g.w;
  std::vector<std::size_t> idx(g.n * g.c * g.h * g.w);
  for (std::size_t n = 0; n < g.n; ++n)
    for (std::size_t a = 0; a < areas; ++a)
      for (std::size_t t = 0; t < tokens; ++t)
        for (std::size_t c = 0; c < g.c; ++c) {
          const std::size_t row = a * bh + t / g.w, col = t % g.w;
          idx[((n * areas + a) * tokens + t) * g.c + c] = ((n * g.c + c) * g.h + row) * g.w + col;
        }
  return idx;
}

void check_areas(const char* op, const Nchw& g, std::size_t areas) {
  if (areas == 0 || g.h % areas != 0)
    throw DimensionError(op, "H", "height " + std::to_string(g.h) + " not divisible by " +
                                      std::to_string(areas) + " areas");
}

}  // namespace

Tensor to_band_tokens(const Tensor& x, std::size_t areas) {
  const auto g = nchw("to_band_tokens", x);
  check_areas("to_band_tokens", g, areas);
  auto idx = band_index(g, areas);
  std::vector<float> out(idx.size());
  const auto d = x.data();
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = d[idx[i]];
  return make_result({g.n * areas, (g.h / areas) * g.w, g.c}, std::move(out), {x},
                     [idx = std::move(idx)](TensorImpl& node) {
                       if (float* gr = input_grad(node, 0))
                         for (std::size_t i = 0; i < idx.size(); ++i) gr[idx[i]] += node.grad[i];
                     });
}

Tensor from_band_tokens(const Tensor& tokens, const Shape& shape, std::size_t areas) {
  if (shape.size() != 4) throw DimensionError("from_band_tokens", "rank", 4, shape.size());
  const Nchw g{shape[0], shape[1], shape[2], shape[3]};
  check_areas("from_band_tokens", g, areas);
  require_rank("from_band_tokens", tokens, 3);
  if (tokens.numel() != shape_numel(shape))
    throw DimensionError("from_band_tokens", "numel", shape_numel(shape), tokens.numel());
  auto idx = band_index(g, areas);
  std::vector<float> out(idx.size());
  const auto d = tokens.data();
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = d[i];
  return make_result(shape, std::move(out), {tokens}, [idx = std::move(idx)](TensorImpl& node) {
    if (float* gr = input_grad(node, 0))
      for (std::size_t i = 0; i < idx.size(); ++i) gr[i] += node.grad[idx[i]];
  });
}

}  // namespace lumen
