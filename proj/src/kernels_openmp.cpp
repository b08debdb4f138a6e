#include "cade/kernels.hpp"

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <type_traits>
#include <vector>

namespace cade::kernels::openmp {

namespace {

using idx = std::ptrdiff_t;

// Below this many multiply-adds a parallel region costs more than it saves.
constexpr idx kParallelWork = 1 << 15;

// Correlation with separate paddings; the stride-1 backward pass reuses it.
struct Corr {
  idx n, c, h, w, o, kh, kw, s, ph, pw;
  idx oh() const { return (h + 2 * ph - kh) / s + 1; }
  idx ow() const { return (w + 2 * pw - kw) / s + 1; }
  idx taps() const { return c * kh * kw; }
};

// Zero-padded copy of the input plus, per tap k = (c, kh, kw), its offset
// inside one padded sample. Padded taps then read explicit zeros.
struct Padded {
  std::vector<double> data;
  std::vector<idx> offset;
  idx hp, wp, sample;
};

Padded pad_input(const Corr& g, const double* in) {
  Padded p;
  p.hp = g.h + 2 * g.ph;
  p.wp = g.w + 2 * g.pw;
  p.sample = g.c * p.hp * p.wp;
  p.data.assign(static_cast<std::size_t>(g.n * p.sample), 0.0);
  for (idx nc = 0; nc < g.n * g.c; ++nc)
    for (idx y = 0; y < g.h; ++y)
      std::memcpy(p.data.data() + (nc * p.hp + y + g.ph) * p.wp + g.pw, in + (nc * g.h + y) * g.w,
                  sizeof(double) * static_cast<std::size_t>(g.w));
  for (idx c = 0; c < g.c; ++c)
    for (idx kh = 0; kh < g.kh; ++kh)
      for (idx kw = 0; kw < g.kw; ++kw) p.offset.push_back((c * p.hp + kh) * p.wp + kw);
  return p;
}

// Four doubles; element-wise arithmetic keeps each lane's operation order.
typedef double v4 __attribute__((vector_size(32)));

inline v4 load4(const double* p) {
  v4 v;
  std::memcpy(&v, p, sizeof v);
  return v;
}
inline void store4(double* p, v4 v) { std::memcpy(p, &v, sizeof v); }
inline v4 splat(double x) { return v4{x, x, x, x}; }

// out[n, o0 + j, p0 + i] for a PB x (4 * OV) tile; wt is [K, O].
// Output positions p0 .. p0 + PB - 1 of sample n lie on one row; `src` points
// at the first one's top-left tap and consecutive positions are `step` apart.
template <int PB, int OV>
void forward_tile(const double* src, idx step, const idx* off, const double* wt, const double* bias, idx K, idx O,
                  idx P, idx n, idx p0, idx o0, double* out) {
  v4 acc[PB][OV];
  for (int j = 0; j < OV; ++j) {
    const v4 b = bias ? load4(bias + o0 + 4 * j) : splat(0.0);
    for (int i = 0; i < PB; ++i) acc[i][j] = b;
  }
  for (idx k = 0; k < K; ++k) {
    v4 w[OV];
    for (int j = 0; j < OV; ++j) w[j] = load4(wt + k * O + o0 + 4 * j);
    for (int i = 0; i < PB; ++i) {
      const v4 a = splat(src[i * step + off[k]]);
      for (int j = 0; j < OV; ++j) acc[i][j] += a * w[j];
    }
  }
  for (int i = 0; i < PB; ++i)
    for (int j = 0; j < OV; ++j)
      for (int l = 0; l < 4; ++l) out[(n * O + o0 + 4 * j + l) * P + p0 + i] = acc[i][j][l];
}

// Scalar tile for output-channel counts that are not a multiple of 4.
template <int PB>
void forward_tile_1(const double* src, idx step, const idx* off, const double* wt, const double* bias, idx K,
                    idx O, idx P, idx n, idx p0, idx o, double* out) {
  double acc[PB];
  for (int i = 0; i < PB; ++i) acc[i] = bias ? bias[o] : 0.0;
  for (idx k = 0; k < K; ++k) {
    const double w = wt[k * O + o];
    for (int i = 0; i < PB; ++i) acc[i] += src[i * step + off[k]] * w;
  }
  for (int i = 0; i < PB; ++i) out[(n * O + o) * P + p0 + i] = acc[i];
}

// One output row (sample n, row y) for every output channel.
void forward_row(const Corr& g, const Padded& pin, const double* wt, const double* bias, idx n, idx y, double* out) {
  const idx K = g.taps(), O = g.o, OW = g.ow(), P = g.oh() * OW;
  const double* base = pin.data.data() + n * pin.sample + y * g.s * pin.wp;
  const idx* off = pin.offset.data();
  // positions in blocks of 4, then singly; channels in blocks of 8, 4, then 1
  auto sweep = [&](idx o0, auto tile) {
    idx x = 0;
    for (; x + 4 <= OW; x += 4) tile(base + x * g.s, y * OW + x, o0, std::integral_constant<int, 4>{});
    for (; x < OW; ++x) tile(base + x * g.s, y * OW + x, o0, std::integral_constant<int, 1>{});
  };
  idx o0 = 0;
  for (; o0 + 8 <= O; o0 += 8)
    sweep(o0, [&](const double* src, idx p, idx o, auto pb) {
      forward_tile<decltype(pb)::value, 2>(src, g.s, off, wt, bias, K, O, P, n, p, o, out);
    });
  for (; o0 + 4 <= O; o0 += 4)
    sweep(o0, [&](const double* src, idx p, idx o, auto pb) {
      forward_tile<decltype(pb)::value, 1>(src, g.s, off, wt, bias, K, O, P, n, p, o, out);
    });
  for (; o0 < O; ++o0)
    sweep(o0, [&](const double* src, idx p, idx o, auto pb) {
      forward_tile_1<decltype(pb)::value>(src, g.s, off, wt, bias, K, O, P, n, p, o, out);
    });
}

void correlate(const Corr& g, const double* in, const double* weight, const double* bias, double* out) {
  const idx O = g.o, K = g.taps(), OH = g.oh();
  const Padded pin = pad_input(g, in);
  std::vector<double> wt(static_cast<std::size_t>(K * O));
  for (idx o = 0; o < O; ++o)
    for (idx k = 0; k < K; ++k) wt[k * O + o] = weight[o * K + k];
#pragma omp parallel for schedule(static) if (g.n * OH * g.ow() * K * O > kParallelWork)
  for (idx t = 0; t < g.n * OH; ++t) forward_row(g, pin, wt.data(), bias, t / OH, t % OH, out);
}

Corr corr_of(const ConvGeometry& g) {
  return {static_cast<idx>(g.batch),       static_cast<idx>(g.in_channels), static_cast<idx>(g.in_h),
          static_cast<idx>(g.in_w),        static_cast<idx>(g.out_channels), static_cast<idx>(g.kernel_h),
          static_cast<idx>(g.kernel_w),    static_cast<idx>(g.stride),       static_cast<idx>(g.padding),
          static_cast<idx>(g.padding)};
}

// grad_weight[o0 .. o0 + 4 * OV - 1, k0 .. k0 + KB - 1], lanes over output
// channels; gt is grad_out as [N, P, O].
template <int OV, int KB>
void weight_tile(const Corr& g, const Padded& pin, const double* gt, idx o0, idx k0, double* grad_weight) {
  const idx O = g.o, K = g.taps(), OW = g.ow(), P = g.oh() * OW;
  v4 acc[KB][OV];
  for (int i = 0; i < KB; ++i)
    for (int j = 0; j < OV; ++j) acc[i][j] = splat(0.0);
  const idx* off = pin.offset.data() + k0;
  for (idx n = 0; n < g.n; ++n)
    for (idx y = 0; y < g.oh(); ++y) {
      const double* row = pin.data.data() + n * pin.sample + y * g.s * pin.wp;
      for (idx x = 0; x < OW; ++x) {
        const double* src = row + x * g.s;
        const double* gv = gt + (n * P + y * OW + x) * O + o0;
        v4 gg[OV];
        for (int j = 0; j < OV; ++j) gg[j] = load4(gv + 4 * j);
        for (int i = 0; i < KB; ++i) {
          const v4 a = splat(src[off[i]]);
          for (int j = 0; j < OV; ++j) acc[i][j] += gg[j] * a;
        }
      }
    }
  for (int i = 0; i < KB; ++i)
    for (int j = 0; j < OV; ++j)
      for (int l = 0; l < 4; ++l) grad_weight[(o0 + 4 * j + l) * K + k0 + i] = acc[i][j][l];
}

void weight_one(const Corr& g, const Padded& pin, const double* grad_out, idx o, idx k, double* grad_weight) {
  const idx OW = g.ow(), P = g.oh() * OW, K = g.taps();
  double acc = 0.0;
  for (idx n = 0; n < g.n; ++n)
    for (idx y = 0; y < g.oh(); ++y) {
      const double* row = pin.data.data() + n * pin.sample + y * g.s * pin.wp + pin.offset[k];
      const double* gr = grad_out + (n * g.o + o) * P + y * OW;
      for (idx x = 0; x < OW; ++x) acc += gr[x] * row[x * g.s];
    }
  grad_weight[o * K + k] = acc;
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, const double* in, const double* weight,
                    const double* bias, double* out) {
  correlate(corr_of(g), in, weight, bias, out);
}

void conv2d_backward_input(const ConvGeometry& g, const double* grad_out, const double* weight,
                           double* grad_in) {
  const idx N = g.batch, C = g.in_channels, H = g.in_h, W = g.in_w, O = g.out_channels;
  const idx KH = g.kernel_h, KW = g.kernel_w, S = g.stride, P = g.padding;
  const idx OH = g.out_h(), OW = g.out_w();
  if (S == 1 && P <= KH - 1 && P <= KW - 1) {
    // Correlate grad_out with the kernel flipped and its channel axes swapped.
    std::vector<double> flipped(static_cast<std::size_t>(C * O * KH * KW));
    for (idx o = 0; o < O; ++o)
      for (idx c = 0; c < C; ++c)
        for (idx kh = 0; kh < KH; ++kh)
          for (idx kw = 0; kw < KW; ++kw)
            flipped[((c * O + o) * KH + (KH - 1 - kh)) * KW + (KW - 1 - kw)] =
                weight[((o * C + c) * KH + kh) * KW + kw];
    correlate({N, O, OH, OW, C, KH, KW, 1, KH - 1 - P, KW - 1 - P}, grad_out, flipped.data(), nullptr, grad_in);
    return;
  }
  const idx work = N * O * OH * OW * C * KH * KW;
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (idx nc = 0; nc < N * C; ++nc) {
    const idx n = nc / C, c = nc % C;
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
        grad_in[nc * H * W + iy * W + ix] = acc;
      }
  }
}

void conv2d_backward_weight(const ConvGeometry& g, const double* grad_out, const double* in,
                            double* grad_weight) {
  const Corr c = corr_of(g);
  const idx O = c.o, K = c.taps(), P = c.oh() * c.ow();
  const Padded pin = pad_input(c, in);
  std::vector<double> gt(static_cast<std::size_t>(c.n * P * O));
  for (idx n = 0; n < c.n; ++n)
    for (idx o = 0; o < O; ++o)
      for (idx p = 0; p < P; ++p) gt[(n * P + p) * O + o] = grad_out[(n * O + o) * P + p];
  // Work items: (channel block, tap block) tiles, then leftover channels one tap at a time.
  const idx ob8 = O / 8, ob4 = (O % 8) / 4, vec_o = ob8 * 8 + ob4 * 4;
  const idx kb = (K + 7) / 8;
  const idx tiles = (ob8 + ob4) * kb, singles = (O - vec_o) * K;
#pragma omp parallel for schedule(static) if (c.n * P * K * O > kParallelWork)
  for (idx t = 0; t < tiles + singles; ++t) {
    if (t >= tiles) {
      const idx u = t - tiles;
      weight_one(c, pin, grad_out, vec_o + u / K, u % K, grad_weight);
      continue;
    }
    const idx ob = t / kb, k0 = (t % kb) * 8;
    const bool wide = ob < ob8;
    const idx o0 = wide ? ob * 8 : ob8 * 8;
    if (k0 + 8 <= K) {
      if (wide) weight_tile<2, 8>(c, pin, gt.data(), o0, k0, grad_weight);
      else weight_tile<1, 8>(c, pin, gt.data(), o0, k0, grad_weight);
    } else {
      for (idx k = k0; k < K; ++k)
        if (wide) weight_tile<2, 1>(c, pin, gt.data(), o0, k, grad_weight);
        else weight_tile<1, 1>(c, pin, gt.data(), o0, k, grad_weight);
    }
  }
}

void matmul(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
            double* c) {
  const idx M = static_cast<idx>(m);
  const idx work = M * static_cast<idx>(k * n);
#pragma omp parallel for schedule(static) if (work > kParallelWork)
  for (idx i = 0; i < M; ++i) {
    double* crow = c + i * n;
    std::fill(crow, crow + n, 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace cade::kernels::openmp
