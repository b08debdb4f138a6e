#pragma once

// Dense numeric kernels behind the autodiff ops.
//
// Every kernel has a straightforward serial reference and an OpenMP variant.
// The OpenMP variants partition work over independent output elements and
// keep each element's accumulation order identical to the reference, so the
// two agree bit for bit at any thread count.

#include <cstddef>

namespace cade::kernels {

struct ConvGeometry {
  std::size_t batch = 1, in_channels = 1, in_h = 1, in_w = 1;
  std::size_t out_channels = 1, kernel_h = 1, kernel_w = 1;
  std::size_t stride = 1, padding = 0;

  std::size_t out_h() const { return (in_h + 2 * padding - kernel_h) / stride + 1; }
  std::size_t out_w() const { return (in_w + 2 * padding - kernel_w) / stride + 1; }
  bool valid() const;
};

enum class Backend { serial, openmp };

void set_backend(Backend b);
Backend backend();

namespace serial {
// out[N,O,OH,OW] = conv(in[N,C,H,W], weight[O,C,KH,KW]) + bias[O]; bias may be null.
void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out);
// grad_in[N,C,H,W] (overwritten) from grad_out[N,O,OH,OW].
void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in);
// grad_weight[O,C,KH,KW] (overwritten).
void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight);
// c[m,n] = a[m,k] * b[k,n] (overwritten).
void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c);
}  // namespace serial

namespace openmp {
void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out);
void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in);
void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight);
void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c);
}  // namespace openmp

// Dispatch on backend().
void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out);
void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in);
void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight);
void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c);

}  // namespace cade::kernels
