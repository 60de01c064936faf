#include <cmath>
#include <limits>

#include "mta/autodiff.hpp"
#include "mta/errors.hpp"
#include "mta/kernels.hpp"

namespace mta::ad {
namespace {

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename Pred>
ConstTensor mask_of(const Tensor& a, Pred pred) {
  auto m = std::make_shared<Tensor>(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) (*m)[i] = pred(a[i]) ? 1.0 : 0.0;
  return m;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  kernels::active().add(out.size(), a.value().ptr(), b.value().ptr(), out.ptr());
  return make_result(std::move(out), {a, b}, [](const Var& g, const Needed&) { return std::vector<Var>{g, g}; }, "add");
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  kernels::active().sub(out.size(), a.value().ptr(), b.value().ptr(), out.ptr());
  return make_result(std::move(out), {a, b}, [](const Var& g, const Needed& need) { return std::vector<Var>{g, need[1] ? neg(g) : Var()}; },
      "sub");
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  kernels::active().mul(out.size(), a.value().ptr(), b.value().ptr(), out.ptr());
  return make_result(
      std::move(out), {a, b}, [a, b](const Var& g, const Needed& need) {
        return std::vector<Var>{need[0] ? mul(g, b) : Var(), need[1] ? mul(g, a) : Var()};
      },
      "mul");
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a, b, "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_result(
      std::move(out), {a, b},
      [a, b](const Var& g, const Needed& need) {
        return std::vector<Var>{need[0] ? div(g, b) : Var(), need[1] ? neg(div(mul(g, a), mul(b, b))) : Var()};
      },
      "div");
}

Var scale(const Var& a, double factor) {
  Tensor out(a.shape());
  kernels::active().scale(out.size(), factor, a.value().ptr(), out.ptr());
  return make_result(
      std::move(out), {a}, [factor](const Var& g, const Needed&) { return std::vector<Var>{scale(g, factor)}; }, "scale");
}

Var add_scalar(const Var& a, double offset) {
  Tensor out = map_unary(a.value(), [offset](double v) { return v + offset; });
  return make_result(std::move(out), {a}, [](const Var& g, const Needed&) { return std::vector<Var>{g}; }, "add_scalar");
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var abs(const Var& a) {
  Tensor out = map_unary(a.value(), [](double v) { return std::abs(v); });
  return make_result(
      std::move(out), {a},
      [a](const Var& g, const Needed&) {
        auto s = std::make_shared<Tensor>(map_unary(a.value(), [](double v) { return double((v > 0) - (v < 0)); }));
        return std::vector<Var>{mul_const(g, std::move(s))};
      },
      "abs");
}

Var sign(const Var& a) {
  return Var(map_unary(a.value(), [](double v) { return double((v > 0) - (v < 0)); }));
}

Var atan(const Var& a) {
  Tensor out = map_unary(a.value(), [](double v) { return std::atan(v); });
  return make_result(
      std::move(out), {a},
      [a](const Var& g, const Needed&) { return std::vector<Var>{div(g, add_scalar(mul(a, a), 1.0))}; }, "atan");
}

Var mul_const(const Var& a, ConstTensor m) {
  if (m->shape() != a.shape()) throw ShapeError("mul_const: shape mismatch");
  Tensor out(a.shape());
  kernels::active().mul(out.size(), a.value().ptr(), m->ptr(), out.ptr());
  return make_result(
      std::move(out), {a}, [m](const Var& g, const Needed&) { return std::vector<Var>{mul_const(g, m)}; }, "mul_const");
}

Var relu(const Var& a) {
  // NaN passes through so divergence stays visible downstream.
  Tensor out = map_unary(a.value(), [](double v) { return v < 0 ? 0.0 : v; });
  return make_result(
      std::move(out), {a},
      [a](const Var& g, const Needed&) { return std::vector<Var>{mul_const(g, mask_of(a.value(), [](double v) { return v > 0; }))}; },
      "relu");
}

Var clip(const Var& a, double lo, double hi) {
  Tensor out = map_unary(a.value(), [lo, hi](double v) { return std::isnan(v) ? v : std::min(hi, std::max(lo, v)); });
  return make_result(
      std::move(out), {a},
      [a, lo, hi](const Var& g, const Needed&) {
        return std::vector<Var>{mul_const(g, mask_of(a.value(), [lo, hi](double v) { return v >= lo && v <= hi; }))};
      },
      "clip");
}

Var replace_zero(const Var& a, double fill) {
  Tensor out = map_unary(a.value(), [fill](double v) { return v == 0.0 ? fill : v; });
  return make_result(
      std::move(out), {a},
      [a](const Var& g, const Needed&) {
        return std::vector<Var>{mul_const(g, mask_of(a.value(), [](double v) { return v != 0.0; }))};
      },
      "replace_zero");
}

Var affine_channels(const Var& a, std::shared_ptr<const std::vector<double>> scale_c,
                    std::shared_ptr<const std::vector<double>> shift_c) {
  const std::size_t c = scale_c->size();
  if (a.value().rank() == 0 || a.shape().back() != c || shift_c->size() != c) {
    throw ShapeError("affine_channels: channel count mismatch for " + shape_string(a.shape()));
  }
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * (*scale_c)[i % c] + (*shift_c)[i % c];
  return make_result(
      std::move(out), {a},
      [scale_c, c](const Var& g, const Needed&) {
        auto zero = std::make_shared<const std::vector<double>>(c, 0.0);
        return std::vector<Var>{affine_channels(g, scale_c, zero)};
      },
      "affine_channels");
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  Shape original = a.shape();
  return make_result(
      std::move(out), {a}, [original](const Var& g, const Needed&) { return std::vector<Var>{reshape(g, original)}; }, "reshape");
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) throw ShapeError("matmul: operands must be 2-D");
  const std::size_t m = trans_a ? a.shape()[1] : a.shape()[0];
  const std::size_t k = trans_a ? a.shape()[0] : a.shape()[1];
  const std::size_t kb = trans_b ? b.shape()[1] : b.shape()[0];
  const std::size_t n = trans_b ? b.shape()[0] : b.shape()[1];
  if (k != kb) {
    throw ShapeError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  Tensor out({m, n});
  kernels::active().gemm(trans_a, trans_b, m, n, k, a.value().ptr(), b.value().ptr(), out.ptr(), false);
  return make_result(
      std::move(out), {a, b},
      [a, b, trans_a, trans_b](const Var& g, const Needed& need) {
        Var ga, gb;
        if (need[0]) ga = trans_a ? matmul(b, g, trans_b, true) : matmul(g, b, false, !trans_b);
        if (need[1]) gb = trans_b ? matmul(g, a, true, trans_a) : matmul(a, g, !trans_a, false);
        return std::vector<Var>{ga, gb};
      },
      "matmul");
}

Var reduce_mid(const Var& a, std::size_t outer, std::size_t mid, std::size_t inner, Shape out_shape) {
  if (outer * mid * inner != a.size() || shape_size(out_shape) != outer * inner) {
    throw ShapeError("reduce_mid: inconsistent view of " + shape_string(a.shape()));
  }
  Tensor out(out_shape, 0.0);
  const double* x = a.value().ptr();
  const auto& k = kernels::active();
  for (std::size_t o = 0; o < outer; ++o) {
    double* dst = out.ptr() + o * inner;
    if (inner == 1) {
      dst[0] = k.sum(mid, x + o * mid);
      continue;
    }
    for (std::size_t m = 0; m < mid; ++m) k.axpy(inner, 1.0, x + (o * mid + m) * inner, dst);
  }
  Shape in_shape = a.shape();
  return make_result(
      std::move(out), {a},
      [outer, mid, inner, in_shape](const Var& g, const Needed&) {
        return std::vector<Var>{expand_mid(g, outer, mid, inner, in_shape)};
      },
      "reduce_mid");
}

Var expand_mid(const Var& a, std::size_t outer, std::size_t mid, std::size_t inner, Shape out_shape) {
  if (outer * inner != a.size() || shape_size(out_shape) != outer * mid * inner) {
    throw ShapeError("expand_mid: inconsistent view of " + shape_string(a.shape()));
  }
  Tensor out(out_shape);
  const double* x = a.value().ptr();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < mid; ++m) {
      std::copy_n(x + o * inner, inner, out.ptr() + (o * mid + m) * inner);
    }
  }
  Shape in_shape = a.shape();
  return make_result(
      std::move(out), {a},
      [outer, mid, inner, in_shape](const Var& g, const Needed&) {
        return std::vector<Var>{reduce_mid(g, outer, mid, inner, in_shape)};
      },
      "expand_mid");
}

Var gather(const Var& a, IndexMap index, Shape out_shape) {
  if (index->size() != shape_size(out_shape)) throw ShapeError("gather: index size mismatch");
  Tensor out(out_shape);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto j = (*index)[i];
    out[i] = j >= 0 ? x[static_cast<std::size_t>(j)] : 0.0;
  }
  Shape in_shape = a.shape();
  return make_result(
      std::move(out), {a},
      [index, in_shape](const Var& g, const Needed&) { return std::vector<Var>{scatter(g, index, in_shape)}; }, "gather");
}

Var scatter(const Var& a, IndexMap index, Shape out_shape) {
  if (index->size() != a.size()) throw ShapeError("scatter: index size mismatch");
  Tensor out(out_shape, 0.0);
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < index->size(); ++i) {
    const auto j = (*index)[i];
    if (j >= 0) out[static_cast<std::size_t>(j)] += x[i];
  }
  Shape in_shape = a.shape();
  return make_result(
      std::move(out), {a},
      [index, in_shape](const Var& g, const Needed&) { return std::vector<Var>{gather(g, index, in_shape)}; }, "scatter");
}

namespace {

void check_geometry(const Shape& s, const ConvGeometry& geom) {
  if (s.size() != 4 || s[0] != geom.batch || s[1] != geom.height || s[2] != geom.width || s[3] != geom.channels) {
    throw ShapeError("convolution input " + shape_string(s) + " does not match its geometry");
  }
  if (geom.height + 2 * geom.pad < geom.kernel_h || geom.width + 2 * geom.pad < geom.kernel_w || geom.stride == 0) {
    throw ShapeError("convolution kernel larger than padded input");
  }
}

// Visits (row, column, source offset or -1) triples of the patch matrix.
template <typename F>
void for_each_patch(const ConvGeometry& g, F f) {
  const std::size_t oh = g.out_h(), ow = g.out_w(), patch = g.patch();
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t row = (b * oh + y) * ow + x;
        for (std::size_t ky = 0; ky < g.kernel_h; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t kx = 0; kx < g.kernel_w; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(x * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const std::size_t col = (ky * g.kernel_w + kx) * g.channels;
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            const std::ptrdiff_t src =
                inside ? ((static_cast<std::ptrdiff_t>(b) * static_cast<std::ptrdiff_t>(g.height) + iy) *
                              static_cast<std::ptrdiff_t>(g.width) +
                          ix) *
                             static_cast<std::ptrdiff_t>(g.channels)
                       : -1;
            f(row * patch + col, src);
          }
        }
      }
    }
  }
}

}  // namespace

Var im2col(const Var& x, const ConvGeometry& geom) {
  check_geometry(x.shape(), geom);
  Tensor out({geom.rows(), geom.patch()}, 0.0);
  const double* src = x.value().ptr();
  double* dst = out.ptr();
  const std::size_t c = geom.channels;
  for_each_patch(geom, [&](std::size_t at, std::ptrdiff_t from) {
    if (from >= 0) std::copy_n(src + from, c, dst + at);
  });
  return make_result(
      std::move(out), {x}, [geom](const Var& g, const Needed&) { return std::vector<Var>{col2im(g, geom)}; }, "im2col");
}

Var col2im(const Var& cols, const ConvGeometry& geom) {
  if (cols.value().rank() != 2 || cols.shape()[0] != geom.rows() || cols.shape()[1] != geom.patch()) {
    throw ShapeError("col2im: patch matrix " + shape_string(cols.shape()) + " does not match its geometry");
  }
  Tensor out({geom.batch, geom.height, geom.width, geom.channels}, 0.0);
  const double* src = cols.value().ptr();
  double* dst = out.ptr();
  const std::size_t c = geom.channels;
  for_each_patch(geom, [&](std::size_t at, std::ptrdiff_t to) {
    if (to >= 0) {
      for (std::size_t i = 0; i < c; ++i) dst[to + static_cast<std::ptrdiff_t>(i)] += src[at + i];
    }
  });
  return make_result(
      std::move(out), {cols}, [geom](const Var& g, const Needed&) { return std::vector<Var>{im2col(g, geom)}; }, "col2im");
}

Var softmax_rows(const Var& logits) {
  if (logits.value().rank() != 2) throw ShapeError("softmax_rows: expected (B, K)");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  Tensor out(logits.shape());
  const Tensor& z = logits.value();
  for (std::size_t i = 0; i < b; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (out[i * k + j] = std::exp(z[i * k + j] - mx));
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= s;
  }
  return make_result(
      std::move(out), {logits},
      [logits, b, k](const Var& g, const Needed&) {
        Var s = softmax_rows(logits);
        Var dot = reduce_mid(mul(s, g), b, k, 1, {b});
        return std::vector<Var>{mul(s, sub(g, expand_mid(dot, b, k, 1, {b, k})))};
      },
      "softmax");
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  if (logits.value().rank() != 2) throw ShapeError("cross_entropy: expected (B, K) logits");
  const std::size_t b = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != b) throw ShapeError("cross_entropy: label count differs from batch size");
  const Tensor& z = logits.value();
  if (!z.all_finite()) throw NumericError("cross_entropy: non-finite logits");
  auto onehot = std::make_shared<Tensor>(Shape{b, k}, 0.0);
  Tensor out({b});
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ConfigError("cross_entropy: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(k) + ")");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, z[i * k + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(z[i * k + j] - mx);
    out[i] = std::log(s) + mx - z[i * k + static_cast<std::size_t>(labels[i])];
    (*onehot)[i * k + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return make_result(
      std::move(out), {logits},
      [logits, onehot, b, k](const Var& g, const Needed&) {
        Var diff = sub(softmax_rows(logits), Var(*onehot));
        return std::vector<Var>{mul(diff, expand_mid(g, b, k, 1, {b, k}))};
      },
      "cross_entropy");
}

Var sum_all(const Var& a) { return reduce_mid(a, 1, a.size(), 1, {1}); }

Var mean_all(const Var& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

Var sum_per_row(const Var& a) {
  const std::size_t b = a.shape().at(0);
  return reduce_mid(a, b, a.size() / b, 1, {b});
}

Var expand_per_row(const Var& v, const Shape& shape) {
  const std::size_t b = shape.at(0);
  if (v.size() != b) throw ShapeError("expand_per_row: vector length differs from leading axis");
  return expand_mid(v, b, shape_size(shape) / b, 1, shape);
}

}  // namespace mta::ad
