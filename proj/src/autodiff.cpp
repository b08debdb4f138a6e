#include "cade/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "cade/kernels.hpp"

namespace cade::ag {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::matmul: return "matmul";
    case OpKind::dense: return "dense";
    case OpKind::conv2d: return "conv2d";
    case OpKind::relu: return "relu";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::log: return "log";
    case OpKind::log_sigmoid: return "log_sigmoid";
    case OpKind::abs: return "abs";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::l2_norm: return "l2_norm";
    case OpKind::dot: return "dot";
    case OpKind::cosine_similarity: return "cosine_similarity";
    case OpKind::normalize: return "normalize";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::reshape: return "reshape";
    case OpKind::channel_weighted_sum: return "channel_weighted_sum";
  }
  return "unknown";
}

namespace {

using Operands = std::span<const Tensor* const>;

[[noreturn]] void shape_error(OpKind kind, Operands ops, const std::string& why) {
  std::string msg = std::string(op_name(kind)) + ": " + why + " (operand shapes";
  for (auto* t : ops) msg += " " + shape_str(t->shape());
  throw Error(msg + ")");
}

void expect_arity(OpKind kind, Operands ops, std::size_t lo, std::size_t hi) {
  if (ops.size() < lo || ops.size() > hi)
    throw Error(std::string(op_name(kind)) + ": expected " + std::to_string(lo) +
                (lo == hi ? "" : ".." + std::to_string(hi)) + " operands, got " +
                std::to_string(ops.size()));
}

void expect_same_shape(OpKind kind, Operands ops) {
  if (ops[0]->shape() != ops[1]->shape()) shape_error(kind, ops, "shape mismatch");
}

void expect_rank(OpKind kind, Operands ops, std::size_t i, std::size_t rank) {
  if (ops[i]->rank() != rank)
    shape_error(kind, ops, "operand " + std::to_string(i) + " must have rank " +
                               std::to_string(rank));
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

double log_sigmoid_scalar(double x) { return std::min(x, 0.0) - std::log1p(std::exp(-std::abs(x))); }

// Shape of a last-axis reduction.
Shape reduced_shape(const Shape& s) {
  if (s.size() == 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}

struct Rows {
  std::size_t count;
  std::size_t width;
};

Rows rows_of(const Tensor& t) { return {t.size() / t.shape().back(), t.shape().back()}; }

double row_norm(const double* x, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += x[j] * x[j];
  return std::sqrt(s);
}

double row_dot(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t j = 0; j < d; ++j) s += a[j] * b[j];
  return s;
}

kernels::ConvGeometry conv_geometry(OpKind kind, Operands ops, const OpAttrs& attrs) {
  expect_rank(kind, ops, 0, 4);
  expect_rank(kind, ops, 1, 4);
  const auto& in = ops[0]->shape();
  const auto& k = ops[1]->shape();
  if (in[1] != k[1]) shape_error(kind, ops, "input channels differ from kernel channels");
  if (ops.size() == 3 && (ops[2]->rank() != 1 || ops[2]->dim(0) != k[0]))
    shape_error(kind, ops, "bias must have shape [out_channels]");
  kernels::ConvGeometry g;
  g.batch = in[0];
  g.in_channels = in[1];
  g.in_h = in[2];
  g.in_w = in[3];
  g.out_channels = k[0];
  g.kernel_h = k[2];
  g.kernel_w = k[3];
  g.stride = attrs.stride;
  g.padding = attrs.padding;
  if (!g.valid()) shape_error(kind, ops, "kernel larger than padded input or zero stride");
  return g;
}

struct PoolGeometry {
  std::size_t n, c, h, w, oh, ow, win, stride;
};

PoolGeometry pool_geometry(OpKind kind, Operands ops, const OpAttrs& attrs) {
  expect_rank(kind, ops, 0, 4);
  const auto& s = ops[0]->shape();
  if (attrs.window == 0 || attrs.stride == 0) shape_error(kind, ops, "zero window or stride");
  if (s[2] < attrs.window || s[3] < attrs.window)
    shape_error(kind, ops, "pool window " + std::to_string(attrs.window) + " exceeds input");
  return {s[0], s[1], s[2], s[3], (s[2] - attrs.window) / attrs.stride + 1,
          (s[3] - attrs.window) / attrs.stride + 1, attrs.window, attrs.stride};
}

// Linear index of the first maximum in each pooling window.
std::size_t pool_argmax(const double* plane, const PoolGeometry& g, std::size_t y,
                        std::size_t x) {
  std::size_t best = (y * g.stride) * g.w + x * g.stride;
  double top = plane[best];
  for (std::size_t dy = 0; dy < g.win; ++dy)
    for (std::size_t dx = 0; dx < g.win; ++dx) {
      const std::size_t i = (y * g.stride + dy) * g.w + x * g.stride + dx;
      const bool up = plane[i] > top;  // selects rather than branches on random data
      best = up ? i : best;
      top = up ? plane[i] : top;
    }
  return best;
}

Tensor transpose2d(const Tensor& t) {
  const std::size_t r = t.dim(0), c = t.dim(1);
  Tensor out({c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = t[i * c + j];
  return out;
}

Tensor matmul_tensors(const Tensor& a, const Tensor& b) {
  Tensor out({a.dim(0), b.dim(1)});
  kernels::matmul(a.dim(0), a.dim(1), b.dim(1), a.data(), b.data(), out.data());
  return out;
}

Tensor forward(OpKind kind, Operands ops, const OpAttrs& attrs) {
  switch (kind) {
    case OpKind::leaf:
      throw Error("eval_op: leaf has no forward rule");
    case OpKind::add:
    case OpKind::sub:
    case OpKind::mul: {
      expect_arity(kind, ops, 2, 2);
      expect_same_shape(kind, ops);
      Tensor out(ops[0]->shape());
      const auto& a = *ops[0];
      const auto& b = *ops[1];
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = kind == OpKind::add ? a[i] + b[i] : kind == OpKind::sub ? a[i] - b[i] : a[i] * b[i];
      return out;
    }
    case OpKind::scale: {
      expect_arity(kind, ops, 1, 1);
      Tensor out = *ops[0];
      for (auto& v : out.values()) v *= attrs.factor;
      return out;
    }
    case OpKind::matmul: {
      expect_arity(kind, ops, 2, 2);
      expect_rank(kind, ops, 0, 2);
      expect_rank(kind, ops, 1, 2);
      if (ops[0]->dim(1) != ops[1]->dim(0)) shape_error(kind, ops, "inner dimensions differ");
      return matmul_tensors(*ops[0], *ops[1]);
    }
    case OpKind::dense: {
      expect_arity(kind, ops, 3, 3);
      expect_rank(kind, ops, 0, 2);
      expect_rank(kind, ops, 1, 2);
      expect_rank(kind, ops, 2, 1);
      if (ops[0]->dim(1) != ops[1]->dim(0)) shape_error(kind, ops, "input width differs from weight rows");
      if (ops[2]->dim(0) != ops[1]->dim(1)) shape_error(kind, ops, "bias length differs from weight columns");
      Tensor out = matmul_tensors(*ops[0], *ops[1]);
      const std::size_t g = out.dim(1);
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += (*ops[2])[i % g];
      return out;
    }
    case OpKind::conv2d: {
      expect_arity(kind, ops, 2, 3);
      auto g = conv_geometry(kind, ops, attrs);
      Tensor out({g.batch, g.out_channels, g.out_h(), g.out_w()});
      kernels::conv2d_forward(g, ops[0]->data(), ops[1]->data(),
                              ops.size() == 3 ? ops[2]->data() : nullptr, out.data());
      return out;
    }
    case OpKind::relu:
    case OpKind::leaky_relu:
    case OpKind::sigmoid:
    case OpKind::log:
    case OpKind::log_sigmoid:
    case OpKind::abs: {
      expect_arity(kind, ops, 1, 1);
      Tensor out = *ops[0];
      auto apply = [&](auto f) {
        for (auto& v : out.values()) v = f(v);
      };
      switch (kind) {
        case OpKind::relu: apply([](double v) { return v > 0 ? v : 0.0; }); break;
        case OpKind::leaky_relu: {
          const double slope = attrs.slope;
          apply([slope](double v) { return v > 0 ? v : slope * v; });
          break;
        }
        case OpKind::sigmoid: apply(sigmoid_scalar); break;
        case OpKind::log:
          apply([](double v) {
            if (!(v > 0)) throw Error("log: non-positive operand value " + std::to_string(v));
            return std::log(v);
          });
          break;
        case OpKind::log_sigmoid: apply(log_sigmoid_scalar); break;
        default: apply([](double v) { return std::abs(v); }); break;
      }
      return out;
    }
    case OpKind::maxpool2d: {
      expect_arity(kind, ops, 1, 1);
      auto g = pool_geometry(kind, ops, attrs);
      Tensor out({g.n, g.c, g.oh, g.ow});
      for (std::size_t p = 0; p < g.n * g.c; ++p) {
        const double* plane = ops[0]->data() + p * g.h * g.w;
        for (std::size_t y = 0; y < g.oh; ++y)
          for (std::size_t x = 0; x < g.ow; ++x)
            out[(p * g.oh + y) * g.ow + x] = plane[pool_argmax(plane, g, y, x)];
      }
      return out;
    }
    case OpKind::global_avg_pool: {
      expect_arity(kind, ops, 1, 1);
      expect_rank(kind, ops, 0, 4);
      const auto& s = ops[0]->shape();
      const std::size_t hw = s[2] * s[3];
      Tensor out({s[0], s[1]});
      for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < hw; ++j) acc += (*ops[0])[p * hw + j];
        out[p] = acc / static_cast<double>(hw);
      }
      return out;
    }
    case OpKind::sum:
    case OpKind::mean: {
      expect_arity(kind, ops, 1, 1);
      double acc = 0.0;
      for (double v : ops[0]->values()) acc += v;
      if (kind == OpKind::mean) acc /= static_cast<double>(ops[0]->size());
      return Tensor::scalar(acc);
    }
    case OpKind::l2_norm:
    case OpKind::normalize: {
      expect_arity(kind, ops, 1, 1);
      auto [rows, d] = rows_of(*ops[0]);
      if (kind == OpKind::l2_norm) {
        Tensor out(reduced_shape(ops[0]->shape()));
        for (std::size_t r = 0; r < rows; ++r) out[r] = row_norm(ops[0]->data() + r * d, d);
        return out;
      }
      Tensor out(ops[0]->shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const double* x = ops[0]->data() + r * d;
        double n = row_norm(x, d);
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = n > 0 ? x[j] / n : 0.0;
      }
      return out;
    }
    case OpKind::dot:
    case OpKind::cosine_similarity: {
      expect_arity(kind, ops, 2, 2);
      expect_same_shape(kind, ops);
      auto [rows, d] = rows_of(*ops[0]);
      Tensor out(reduced_shape(ops[0]->shape()));
      for (std::size_t r = 0; r < rows; ++r) {
        const double* a = ops[0]->data() + r * d;
        const double* b = ops[1]->data() + r * d;
        double ab = row_dot(a, b, d);
        if (kind == OpKind::dot) {
          out[r] = ab;
        } else {
          // sqrt(s*s) == s under round-to-nearest, so cos(a, a) is exactly 1.
          const double aa = row_dot(a, a, d), bb = row_dot(b, b, d);
          const double denom = std::sqrt(aa * bb);
          if (!(aa > 0 && bb > 0)) out[r] = 0.0;
          else if (denom > 0 && std::isfinite(denom)) out[r] = ab / denom;
          else out[r] = ab / (std::sqrt(aa) * std::sqrt(bb));
        }
      }
      return out;
    }
    case OpKind::softmax_cross_entropy: {
      expect_arity(kind, ops, 1, 1);
      expect_rank(kind, ops, 0, 2);
      const std::size_t n = ops[0]->dim(0), k = ops[0]->dim(1);
      if (attrs.labels.size() != n) shape_error(kind, ops, "label count differs from batch size");
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (attrs.labels[i] >= k) shape_error(kind, ops, "label out of range");
        const double* z = ops[0]->data() + i * k;
        double mx = *std::max_element(z, z + k);
        double se = 0.0;
        for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - mx);
        acc += mx + std::log(se) - z[attrs.labels[i]];
      }
      return Tensor::scalar(acc / static_cast<double>(n));
    }
    case OpKind::reshape: {
      expect_arity(kind, ops, 1, 1);
      if (attrs.shape.empty() || shape_size(attrs.shape) != ops[0]->size())
        shape_error(kind, ops, "cannot reshape to " + shape_str(attrs.shape));
      return ops[0]->reshaped(attrs.shape);
    }
    case OpKind::channel_weighted_sum: {
      expect_arity(kind, ops, 2, 2);
      expect_rank(kind, ops, 0, 4);
      expect_rank(kind, ops, 1, 2);
      const auto& s = ops[0]->shape();
      if (ops[1]->dim(0) != s[0] || ops[1]->dim(1) != s[1])
        shape_error(kind, ops, "weights must have shape [N,C]");
      const std::size_t hw = s[2] * s[3];
      Tensor out({s[0], hw});
      for (std::size_t n = 0; n < s[0]; ++n)
        for (std::size_t c = 0; c < s[1]; ++c) {
          const double w = (*ops[1])[n * s[1] + c];
          const double* a = ops[0]->data() + (n * s[1] + c) * hw;
          double* o = out.data() + n * hw;
          for (std::size_t j = 0; j < hw; ++j) o[j] += w * a[j];
        }
      return out;
    }
  }
  throw Error("eval_op: unknown op kind");
}

}  // namespace

Tensor eval_op(OpKind kind, std::span<const Tensor* const> operands, const OpAttrs& attrs) {
  for (std::size_t i = 0; i < operands.size(); ++i)
    if (!operands[i]->all_finite())
      throw Error(std::string(op_name(kind)) + ": operand " + std::to_string(i) +
                  " contains non-finite values");
  Tensor out = forward(kind, operands, attrs);
  if (!out.all_finite())
    throw Error(std::string(op_name(kind)) + ": produced non-finite output");
  return out;
}

Tensor eval_op(OpKind kind, const std::vector<Tensor>& operands, const OpAttrs& attrs) {
  std::vector<const Tensor*> ptrs;
  for (const auto& t : operands) ptrs.push_back(&t);
  return eval_op(kind, std::span<const Tensor* const>(ptrs), attrs);
}

std::vector<std::optional<Tensor>> backward_op(OpKind kind, std::span<const Tensor* const> ops,
                                               const OpAttrs& attrs, const Tensor& output,
                                               const Tensor& g, std::span<const bool> needed) {
  std::vector<std::optional<Tensor>> grads(ops.size());
  auto want = [&](std::size_t i) { return i < needed.size() && needed[i]; };

  switch (kind) {
    case OpKind::leaf:
      break;
    case OpKind::add:
      if (want(0)) grads[0] = g;
      if (want(1)) grads[1] = g;
      break;
    case OpKind::sub:
      if (want(0)) grads[0] = g;
      if (want(1)) {
        Tensor t = g;
        for (auto& v : t.values()) v = -v;
        grads[1] = std::move(t);
      }
      break;
    case OpKind::mul:
      for (std::size_t k = 0; k < 2; ++k) {
        if (!want(k)) continue;
        Tensor t(g.shape());
        const Tensor& other = *ops[1 - k];
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = g[i] * other[i];
        grads[k] = std::move(t);
      }
      break;
    case OpKind::scale:
      if (want(0)) {
        Tensor t = g;
        for (auto& v : t.values()) v *= attrs.factor;
        grads[0] = std::move(t);
      }
      break;
    case OpKind::matmul:
    case OpKind::dense:
      if (want(0)) grads[0] = matmul_tensors(g, transpose2d(*ops[1]));
      if (want(1)) grads[1] = matmul_tensors(transpose2d(*ops[0]), g);
      if (kind == OpKind::dense && want(2)) {
        const std::size_t n = g.dim(0), cols = g.dim(1);
        Tensor gb({cols});
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
        grads[2] = std::move(gb);
      }
      break;
    case OpKind::conv2d: {
      auto geo = conv_geometry(kind, ops, attrs);
      if (want(0)) {
        Tensor t(ops[0]->shape());
        kernels::conv2d_backward_input(geo, g.data(), ops[1]->data(), t.data());
        grads[0] = std::move(t);
      }
      if (want(1)) {
        Tensor t(ops[1]->shape());
        kernels::conv2d_backward_weight(geo, g.data(), ops[0]->data(), t.data());
        grads[1] = std::move(t);
      }
      if (ops.size() == 3 && want(2)) {
        const std::size_t hw = geo.out_h() * geo.out_w();
        Tensor t({geo.out_channels});
        for (std::size_t n = 0; n < geo.batch; ++n)
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            const double* src = g.data() + (n * geo.out_channels + o) * hw;
            double acc = 0.0;
            for (std::size_t j = 0; j < hw; ++j) acc += src[j];
            t[o] += acc;
          }
        grads[2] = std::move(t);
      }
      break;
    }
    case OpKind::relu:
    case OpKind::leaky_relu:
    case OpKind::sigmoid:
    case OpKind::log:
    case OpKind::log_sigmoid:
    case OpKind::abs:
      if (want(0)) {
        const Tensor& x = *ops[0];
        Tensor t(g.shape());
        const std::size_t n = t.size();
        const double* gv = g.data();
        const double* xv = x.data();
        const double* yv = output.data();
        double* tv = t.data();
        switch (kind) {
          case OpKind::relu:
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * (xv[i] > 0 ? 1.0 : 0.0);
            break;
          case OpKind::leaky_relu: {
            const double slope = attrs.slope;
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * (xv[i] > 0 ? 1.0 : slope);
            break;
          }
          case OpKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * (yv[i] * (1.0 - yv[i]));
            break;
          case OpKind::log:
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * (1.0 / xv[i]);
            break;
          case OpKind::log_sigmoid:
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * sigmoid_scalar(-xv[i]);
            break;
          default:
            for (std::size_t i = 0; i < n; ++i) tv[i] = gv[i] * (xv[i] > 0 ? 1.0 : (xv[i] < 0 ? -1.0 : 0.0));
            break;
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::maxpool2d:
      if (want(0)) {
        auto geo = pool_geometry(kind, ops, attrs);
        Tensor t(ops[0]->shape());
        for (std::size_t p = 0; p < geo.n * geo.c; ++p) {
          const double* plane = ops[0]->data() + p * geo.h * geo.w;
          double* gp = t.data() + p * geo.h * geo.w;
          for (std::size_t y = 0; y < geo.oh; ++y)
            for (std::size_t x = 0; x < geo.ow; ++x)
              gp[pool_argmax(plane, geo, y, x)] += g[(p * geo.oh + y) * geo.ow + x];
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::global_avg_pool:
      if (want(0)) {
        const auto& s = ops[0]->shape();
        const std::size_t hw = s[2] * s[3];
        Tensor t(s);
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
          double v = g[p] / static_cast<double>(hw);
          for (std::size_t j = 0; j < hw; ++j) t[p * hw + j] = v;
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::sum:
    case OpKind::mean:
      if (want(0)) {
        double v = g[0];
        if (kind == OpKind::mean) v /= static_cast<double>(ops[0]->size());
        grads[0] = Tensor(ops[0]->shape(), v);
      }
      break;
    case OpKind::l2_norm:
      if (want(0)) {
        auto [rows, d] = rows_of(*ops[0]);
        Tensor t(ops[0]->shape());
        for (std::size_t r = 0; r < rows; ++r) {
          if (!(output[r] > 0)) continue;
          for (std::size_t j = 0; j < d; ++j)
            t[r * d + j] = g[r] * (*ops[0])[r * d + j] / output[r];
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::normalize:
      if (want(0)) {
        auto [rows, d] = rows_of(*ops[0]);
        Tensor t(ops[0]->shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* x = ops[0]->data() + r * d;
          double n = row_norm(x, d);
          if (!(n > 0)) continue;
          const double* y = output.data() + r * d;
          const double* gr = g.data() + r * d;
          double yg = row_dot(y, gr, d);
          for (std::size_t j = 0; j < d; ++j) t[r * d + j] = (gr[j] - y[j] * yg) / n;
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::dot:
      for (std::size_t k = 0; k < 2; ++k) {
        if (!want(k)) continue;
        auto [rows, d] = rows_of(*ops[0]);
        Tensor t(ops[0]->shape());
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) t[r * d + j] = g[r] * (*ops[1 - k])[r * d + j];
        grads[k] = std::move(t);
      }
      break;
    case OpKind::cosine_similarity:
      for (std::size_t k = 0; k < 2; ++k) {
        if (!want(k)) continue;
        auto [rows, d] = rows_of(*ops[0]);
        Tensor t(ops[0]->shape());
        for (std::size_t r = 0; r < rows; ++r) {
          const double* self = ops[k]->data() + r * d;
          const double* other = ops[1 - k]->data() + r * d;
          double ns = row_norm(self, d), no = row_norm(other, d);
          if (!(ns > 0 && no > 0)) continue;
          double c = output[r];
          for (std::size_t j = 0; j < d; ++j)
            t[r * d + j] = g[r] * (other[j] / (ns * no) - c * self[j] / (ns * ns));
        }
        grads[k] = std::move(t);
      }
      break;
    case OpKind::softmax_cross_entropy:
      if (want(0)) {
        const std::size_t n = ops[0]->dim(0), k = ops[0]->dim(1);
        Tensor t(ops[0]->shape());
        const double scale = g[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double* z = ops[0]->data() + i * k;
          double mx = *std::max_element(z, z + k);
          double se = 0.0;
          for (std::size_t j = 0; j < k; ++j) se += std::exp(z[j] - mx);
          for (std::size_t j = 0; j < k; ++j) {
            double p = std::exp(z[j] - mx) / se;
            t[i * k + j] = scale * (p - (j == attrs.labels[i] ? 1.0 : 0.0));
          }
        }
        grads[0] = std::move(t);
      }
      break;
    case OpKind::reshape:
      if (want(0)) grads[0] = g.reshaped(ops[0]->shape());
      break;
    case OpKind::channel_weighted_sum: {
      const auto& s = ops[0]->shape();
      const std::size_t hw = s[2] * s[3];
      if (want(0)) {
        Tensor t(s);
        for (std::size_t n = 0; n < s[0]; ++n)
          for (std::size_t c = 0; c < s[1]; ++c) {
            const double w = (*ops[1])[n * s[1] + c];
            for (std::size_t j = 0; j < hw; ++j) t[(n * s[1] + c) * hw + j] = w * g[n * hw + j];
          }
        grads[0] = std::move(t);
      }
      if (want(1)) {
        Tensor t(ops[1]->shape());
        for (std::size_t n = 0; n < s[0]; ++n)
          for (std::size_t c = 0; c < s[1]; ++c) {
            const double* a = ops[0]->data() + (n * s[1] + c) * hw;
            t[n * s[1] + c] = row_dot(g.data() + n * hw, a, hw);
          }
        grads[1] = std::move(t);
      }
      break;
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// ParameterStore

void ParameterStore::add(const std::string& name, Tensor value) {
  if (entries_.count(name)) throw Error("duplicate parameter name '" + name + "'");
  Tensor grad(value.shape());
  entries_.emplace(name, Entry{std::move(value), std::move(grad), false});
}

ParameterStore::Entry& ParameterStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

const ParameterStore::Entry& ParameterStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterStore::accumulate_grad(const std::string& name, const Tensor& g) {
  auto& e = entry(name);
  if (g.shape() != e.value.shape())
    throw Error("gradient for '" + name + "' has shape " + shape_str(g.shape()) +
                ", parameter has " + shape_str(e.value.shape()));
  for (std::size_t i = 0; i < g.size(); ++i) e.grad[i] += g[i];
  e.has_grad = true;
}

void ParameterStore::zero_grads() {
  for (auto& [name, e] : entries_) {
    std::fill(e.grad.values().begin(), e.grad.values().end(), 0.0);
    e.has_grad = false;
  }
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

std::size_t ParameterStore::value_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.size();
  return n;
}

bool ParameterStore::same_values(const ParameterStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [name, e] : entries_) {
    if (name != it->first || !(e.value == it->second.value)) return false;
    ++it;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const { return graph->value(*this); }

Var Graph::push(GraphNode node) {
  nodes_.push_back(std::move(node));
  return Var{this, nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  if (!value.all_finite()) throw Error("graph constant contains non-finite values");
  GraphNode n;
  n.output = std::move(value);
  return push(std::move(n));
}

Var Graph::variable(Tensor value) {
  if (!value.all_finite()) throw Error("graph variable contains non-finite values");
  GraphNode n;
  n.output = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Graph::parameter(const std::string& name, const Tensor& value) {
  Var v = variable(value);
  nodes_[v.id].param_name = name;
  return v;
}

std::map<std::string, Var> Graph::parameters(const ParameterStore& store) {
  std::map<std::string, Var> out;
  for (const auto& [name, e] : store.entries()) out.emplace(name, parameter(name, e.value));
  return out;
}

Var Graph::apply(OpKind kind, std::vector<Var> operands, OpAttrs attrs) {
  std::vector<const Tensor*> ptrs;
  GraphNode n;
  n.kind = kind;
  for (const auto& v : operands) {
    if (v.graph != this) throw Error(std::string(op_name(kind)) + ": operand from another graph");
    ptrs.push_back(&nodes_.at(v.id).output);
    n.operands.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  n.output = eval_op(kind, std::span<const Tensor* const>(ptrs), attrs);
  n.attrs = std::move(attrs);
  return push(std::move(n));
}

void Graph::backward(Var root, std::optional<Var> stop) {
  if (root.graph != this) throw Error("backward: root from another graph");
  const Tensor& r = nodes_.at(root.id).output;
  if (r.size() != 1) throw Error("backward: root must be scalar, got shape " + shape_str(r.shape()));
  const std::size_t lowest = stop ? stop->id : 0;
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[root.id] = Tensor(r.shape(), 1.0);

  for (std::size_t i = root.id + 1; i-- > lowest;) {
    if (!grads_[i] || !nodes_[i].requires_grad) continue;
    const GraphNode& node = nodes_[i];
    if (node.kind == OpKind::leaf) continue;
    std::vector<const Tensor*> ptrs;
    auto need = std::make_unique<bool[]>(node.operands.size());
    bool any = false;
    for (std::size_t k = 0; k < node.operands.size(); ++k) {
      const auto id = node.operands[k];
      ptrs.push_back(&nodes_[id].output);
      need[k] = nodes_[id].requires_grad && id >= lowest;
      any = any || need[k];
    }
    if (!any) continue;
    auto contributions =
        backward_op(node.kind, std::span<const Tensor* const>(ptrs), node.attrs, node.output,
                    *grads_[i], std::span<const bool>(need.get(), node.operands.size()));
    for (std::size_t k = 0; k < node.operands.size(); ++k) {
      if (!contributions[k]) continue;
      auto& slot = grads_[node.operands[k]];
      if (!slot) {
        slot = std::move(*contributions[k]);
      } else {
        for (std::size_t j = 0; j < slot->size(); ++j) (*slot)[j] += (*contributions[k])[j];
      }
    }
  }
}

Tensor Graph::grad(Var v) const {
  if (has_grad(v)) return *grads_[v.id];
  return Tensor(nodes_.at(v.id).output.shape());
}

void Graph::accumulate_parameter_grads(ParameterStore& store) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.param_name.empty() || !store.contains(n.param_name)) continue;
    store.accumulate_grad(n.param_name, grad(Var{const_cast<Graph*>(this), i}));
  }
}

// ---------------------------------------------------------------------------
// Op builders

namespace {
Var unary(OpKind k, Var a, OpAttrs attrs = {}) { return a.graph->apply(k, {a}, std::move(attrs)); }
Var binary(OpKind k, Var a, Var b) { return a.graph->apply(k, {a, b}); }
}  // namespace

Var add(Var a, Var b) { return binary(OpKind::add, a, b); }
Var sub(Var a, Var b) { return binary(OpKind::sub, a, b); }
Var mul(Var a, Var b) { return binary(OpKind::mul, a, b); }
Var scale(Var a, double factor) {
  OpAttrs at;
  at.factor = factor;
  return unary(OpKind::scale, a, at);
}
Var matmul(Var a, Var b) { return binary(OpKind::matmul, a, b); }
Var dense(Var input, Var weight, Var bias) {
  return input.graph->apply(OpKind::dense, {input, weight, bias});
}
Var conv2d(Var input, Var kernel, std::optional<Var> bias, std::size_t stride,
           std::size_t padding) {
  OpAttrs at;
  at.stride = stride;
  at.padding = padding;
  std::vector<Var> ops{input, kernel};
  if (bias) ops.push_back(*bias);
  return input.graph->apply(OpKind::conv2d, std::move(ops), at);
}
Var relu(Var a) { return unary(OpKind::relu, a); }
Var leaky_relu(Var a, double slope) {
  OpAttrs at;
  at.slope = slope;
  return unary(OpKind::leaky_relu, a, at);
}
Var sigmoid(Var a) { return unary(OpKind::sigmoid, a); }
Var log(Var a) { return unary(OpKind::log, a); }
Var log_sigmoid(Var a) { return unary(OpKind::log_sigmoid, a); }
Var abs(Var a) { return unary(OpKind::abs, a); }
Var maxpool2d(Var a, std::size_t window, std::size_t stride) {
  OpAttrs at;
  at.window = window;
  at.stride = stride;
  return unary(OpKind::maxpool2d, a, at);
}
Var global_avg_pool(Var a) { return unary(OpKind::global_avg_pool, a); }
Var sum(Var a) { return unary(OpKind::sum, a); }
Var mean(Var a) { return unary(OpKind::mean, a); }
Var l2_norm(Var a) { return unary(OpKind::l2_norm, a); }
Var dot(Var a, Var b) { return binary(OpKind::dot, a, b); }
Var cosine_similarity(Var a, Var b) { return binary(OpKind::cosine_similarity, a, b); }
Var normalize(Var a) { return unary(OpKind::normalize, a); }
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
  OpAttrs at;
  at.labels = std::move(labels);
  return unary(OpKind::softmax_cross_entropy, logits, at);
}
Var reshape(Var a, Shape shape) {
  OpAttrs at;
  at.shape = std::move(shape);
  return unary(OpKind::reshape, a, at);
}
Var channel_weighted_sum(Var maps, Var weights) {
  return binary(OpKind::channel_weighted_sum, maps, weights);
}

Tensor numeric_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double eps) {
  if (!(eps > 0)) throw Error("numeric_gradient: eps must be positive");
  Tensor g(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    double hi = f(probe);
    probe[i] = x[i] - eps;
    double lo = f(probe);
    probe[i] = x[i];
    if (!std::isfinite(hi) || !std::isfinite(lo))
      throw Error("numeric_gradient: non-finite function value at component " + std::to_string(i));
    g[i] = (hi - lo) / (2.0 * eps);
  }
  return g;
}

}  // namespace cade::ag
