#include "cade/kernels.hpp"

#include <atomic>
#include <cstddef>

namespace cade::kernels {

bool ConvGeometry::valid() const {
  if (!batch || !in_channels || !in_h || !in_w || !out_channels || !kernel_h || !kernel_w ||
      !stride)
    return false;
  return in_h + 2 * padding >= kernel_h && in_w + 2 * padding >= kernel_w;
}

namespace {
std::atomic<Backend> g_backend{Backend::openmp};
}

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

namespace serial {

using idx = std::ptrdiff_t;

// Padded positions take part as explicit zeros, so every output sums the same
// number of products in a fixed order. The fast kernels rely on this.

void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out) {
  const idx N = g.batch, C = g.in_channels, H = g.in_h, W = g.in_w, O = g.out_channels;
  const idx KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
  const idx OH = g.out_h(), OW = g.out_w();
  for (idx n = 0; n < N; ++n)
    for (idx o = 0; o < O; ++o)
      for (idx y = 0; y < OH; ++y)
        for (idx x = 0; x < OW; ++x) {
          double acc = bias ? bias[o] : 0.0;
          for (idx c = 0; c < C; ++c)
            for (idx kh = 0; kh < KH; ++kh)
              for (idx kw = 0; kw < KW; ++kw) {
                const idx iy = y * S + kh - P, ix = x * S + kw - P;
                const bool inside = iy >= 0 && iy < H && ix >= 0 && ix < W;
                const double v = inside ? in[((n * C + c) * H + iy) * W + ix] : 0.0;
                acc += weight[((o * C + c) * KH + kh) * KW + kw] * v;
              }
          out[((n * O + o) * OH + y) * OW + x] = acc;
        }
}

// Order: o ascending, then the kernel taps flipped (kh, kw descending), which
// makes the stride-1 case a plain correlation of grad_out with the flipped kernel.
void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in) {
  const idx N = g.batch, C = g.in_channels, H = g.in_h, W = g.in_w, O = g.out_channels;
  const idx KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
  const idx OH = g.out_h(), OW = g.out_w();
  for (idx n = 0; n < N; ++n)
    for (idx c = 0; c < C; ++c)
      for (idx iy = 0; iy < H; ++iy)
        for (idx ix = 0; ix < W; ++ix) {
          double acc = 0.0;
          for (idx o = 0; o < O; ++o)
            for (idx kh = KH - 1; kh >= 0; --kh)
              for (idx kw = KW - 1; kw >= 0; --kw) {
                const idx ys = iy + P - kh, xs = ix + P - kw;
                const bool hit = ys >= 0 && xs >= 0 && ys % S == 0 && xs % S == 0 && ys / S < OH && xs / S < OW;
                const double v = hit ? grad_out[((n * O + o) * OH + ys / S) * OW + xs / S] : 0.0;
                acc += weight[((o * C + c) * KH + kh) * KW + kw] * v;
              }
          grad_in[((n * C + c) * H + iy) * W + ix] = acc;
        }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight) {
  const idx N = g.batch, C = g.in_channels, H = g.in_h, W = g.in_w, O = g.out_channels;
  const idx KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
  const idx OH = g.out_h(), OW = g.out_w();
  for (idx o = 0; o < O; ++o)
    for (idx c = 0; c < C; ++c)
      for (idx kh = 0; kh < KH; ++kh)
        for (idx kw = 0; kw < KW; ++kw) {
          double acc = 0.0;
          for (idx n = 0; n < N; ++n)
            for (idx y = 0; y < OH; ++y)
              for (idx x = 0; x < OW; ++x) {
                const idx iy = y * S + kh - P, ix = x * S + kw - P;
                const bool inside = iy >= 0 && iy < H && ix >= 0 && ix < W;
                const double v = inside ? in[((n * C + c) * H + iy) * W + ix] : 0.0;
                acc += grad_out[((n * O + o) * OH + y) * OW + x] * v;
              }
          grad_weight[((o * C + c) * KH + kh) * KW + kw] = acc;
        }
}

void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
      c[i * n + j] = acc;
    }
}

}  // namespace serial

void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out) {
  if (backend() == Backend::serial)
    serial::conv2d_forward(g, in, weight, bias, out);
  else
    openmp::conv2d_forward(g, in, weight, bias, out);
}

void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in) {
  if (backend() == Backend::serial)
    serial::conv2d_backward_input(g, grad_out, weight, grad_in);
  else
    openmp::conv2d_backward_input(g, grad_out, weight, grad_in);
}

void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight) {
  if (backend() == Backend::serial)
    serial::conv2d_backward_weight(g, grad_out, in, grad_weight);
  else
    openmp::conv2d_backward_weight(g, grad_out, in, grad_weight);
}

void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c) {
  if (backend() == Backend::serial)
    serial::matmul(m, k, n, a, b, c);
  else
    openmp::matmul(m, k, n, a, b, c);
}

}  // namespace cade::kernels
