#include "gues/ops.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <unordered_map>

namespace gues {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const char* op, const Tensor& x, int rank) {
  if (x.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

int normalize_axis(const char* op, int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return axis;
}

// Splits a shape around `axis` into (outer, length, inner).
struct AxisSplit {
  Index outer = 1, length = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.length = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape(), x.data().unaryExpr(fwd));
  auto xi = x.impl();
  auto oi = out.impl();
  maybe_record(op, {x}, out, [xi, oi, deriv](const Buffer& g) {
    if (!xi->requires_grad) return;
    Buffer local(xi->data.size());
    for (Index i = 0; i < local.size(); ++i) local[i] = deriv(xi->data[i], oi->data[i]);
    accumulate_grad(*xi, g * local);
  });
  return out;
}

struct ConvGeom {
  Index channels, height, width;  // image side
  Index kh, kw, stride, pad;
  Index out_h, out_w;             // column side
  Index rows() const { return channels * kh * kw; }
  Index cols() const { return out_h * out_w; }
};

void im2col(const double* img, const ConvGeom& g, double* cols) {
  const Index ncols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            const bool inside = ih >= 0 && ih < g.height && iw >= 0 && iw < g.width;
            row[oh * g.out_w + ow] = inside ? img[(c * g.height + ih) * g.width + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const double* cols, const ConvGeom& g, double* img) {
  const Index ncols = g.cols();
  for (Index c = 0; c < g.channels; ++c) {
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index oh = 0; oh < g.out_h; ++oh) {
          const Index ih = oh * g.stride - g.pad + ki;
          if (ih < 0 || ih >= g.height) continue;
          for (Index ow = 0; ow < g.out_w; ++ow) {
            const Index iw = ow * g.stride - g.pad + kj;
            if (iw < 0 || iw >= g.width) continue;
            img[(c * g.height + ih) * g.width + iw] += row[oh * g.out_w + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Index conv_output_size(Index in, Index kernel, Index stride, Index padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

Index conv_transpose_output_size(Index in, Index kernel, Index stride, Index padding,
                                 Index output_padding) {
  return (in - 1) * stride - 2 * padding + kernel + output_padding;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out(a.shape(), a.data() + b.data());
  auto ai = a.impl(), bi = b.impl();
  maybe_record("add", {a, b}, out, [ai, bi](const Buffer& g) {
    if (ai->requires_grad) accumulate_grad(*ai, g);
    if (bi->requires_grad) accumulate_grad(*bi, g);
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  Tensor out(a.shape(), a.data() - b.data());
  auto ai = a.impl(), bi = b.impl();
  maybe_record("sub", {a, b}, out, [ai, bi](const Buffer& g) {
    if (ai->requires_grad) accumulate_grad(*ai, g);
    if (bi->requires_grad) accumulate_grad(*bi, -g);
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out(a.shape(), a.data() * b.data());
  auto ai = a.impl(), bi = b.impl();
  maybe_record("mul", {a, b}, out, [ai, bi](const Buffer& g) {
    if (ai->requires_grad) accumulate_grad(*ai, g * bi->data);
    if (bi->requires_grad) accumulate_grad(*bi, g * ai->data);
  });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out(x.shape(), x.data() * factor);
  auto xi = x.impl();
  maybe_record("scale", {x}, out, [xi, factor](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, g * factor);
  });
  return out;
}

Tensor shift(const Tensor& x, double offset) {
  Tensor out(x.shape(), x.data() + offset);
  auto xi = x.impl();
  maybe_record("shift", {x}, out, [xi](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, g);
  });
  return out;
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.rank() < 2 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("bias_add: cannot broadcast bias " + shape_str(bias.shape()) + " over " +
                     shape_str(x.shape()));
  }
  const AxisSplit s = split_axis(x.shape(), 1);
  Buffer data = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index c = 0; c < s.length; ++c) {
      data.segment((o * s.length + c) * s.inner, s.inner) += bias[c];
    }
  }
  Tensor out(x.shape(), std::move(data));
  auto xi = x.impl(), bi = bias.impl();
  maybe_record("bias_add", {x, bias}, out, [xi, bi, s](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, g);
    if (bi->requires_grad) {
      Buffer gb = Buffer::Zero(s.length);
      for (Index o = 0; o < s.outer; ++o) {
        for (Index c = 0; c < s.length; ++c) {
          gb[c] += g.segment((o * s.length + c) * s.inner, s.inner).sum();
        }
      }
      accumulate_grad(*bi, gb);
    }
  });
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Buffer data(m * n);
  {
    ConstRowMap am(a.data().data(), m, k);
    ConstRowMap bm(b.data().data(), k, n);
    RowMap om(data.data(), m, n);
    for (Index i = 0; i < m; ++i) om.row(i).noalias() = am.row(i) * bm;
  }
  Tensor out({m, n}, std::move(data));
  auto ai = a.impl(), bi = b.impl();
  maybe_record("matmul", {a, b}, out, [ai, bi, m, k, n](const Buffer& g) {
    ConstRowMap gm(g.data(), m, n);
    ConstRowMap am(ai->data.data(), m, k);
    ConstRowMap bm(bi->data.data(), k, n);
    if (ai->requires_grad) {
      Buffer ga(m * k);
      RowMap(ga.data(), m, k).noalias() = gm * bm.transpose();
      accumulate_grad(*ai, ga);
    }
    if (bi->requires_grad) {
      Buffer gb(k * n);
      RowMap(gb.data(), k, n).noalias() = am.transpose() * gm;
      accumulate_grad(*bi, gb);
    }
  });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, Conv2dOptions opts) {
  require_rank("conv2d", x, 4);
  require_rank("conv2d", kernel, 4);
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index k = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but kernel " +
                     shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  if (opts.stride < 1 || opts.padding < 0 || h + 2 * opts.padding < kh ||
      w + 2 * opts.padding < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                     shape_str(x.shape()) + " with padding " + std::to_string(opts.padding));
  }
  const ConvGeom geom{c, h, w, kh, kw, opts.stride, opts.padding,
                      conv_output_size(h, kh, opts.stride, opts.padding),
                      conv_output_size(w, kw, opts.stride, opts.padding)};
  const Index in_size = c * h * w, out_size = k * geom.cols();
  Buffer data(n * out_size);
  auto cols = std::make_shared<std::vector<RowMat>>(static_cast<std::size_t>(n));
  ConstRowMap wm(kernel.data().data(), k, geom.rows());
  for (Index i = 0; i < n; ++i) {
    RowMat& col = (*cols)[static_cast<std::size_t>(i)];
    col.resize(geom.rows(), geom.cols());
    im2col(x.data().data() + i * in_size, geom, col.data());
    RowMap(data.data() + i * out_size, k, geom.cols()).noalias() = wm * col;
  }
  Tensor out({n, k, geom.out_h, geom.out_w}, std::move(data));
  auto xi = x.impl(), ki = kernel.impl();
  maybe_record("conv2d", {x, kernel}, out, [xi, ki, cols, geom, n, k, in_size, out_size](const Buffer& g) {
    ConstRowMap wm(ki->data.data(), k, geom.rows());
    Buffer gw;
    Buffer gx;
    if (ki->requires_grad) gw = Buffer::Zero(ki->data.size());
    if (xi->requires_grad) gx = Buffer::Zero(xi->data.size());
    RowMat dcol(geom.rows(), geom.cols());
    for (Index i = 0; i < n; ++i) {
      ConstRowMap gm(g.data() + i * out_size, k, geom.cols());
      const RowMat& col = (*cols)[static_cast<std::size_t>(i)];
      if (ki->requires_grad) RowMap(gw.data(), k, geom.rows()).noalias() += gm * col.transpose();
      if (xi->requires_grad) {
        dcol.noalias() = wm.transpose() * gm;
        col2im(dcol.data(), geom, gx.data() + i * in_size);
      }
    }
    if (ki->requires_grad) accumulate_grad(*ki, gw);
    if (xi->requires_grad) accumulate_grad(*xi, gx);
  });
  return out;
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& kernel, ConvTranspose2dOptions opts) {
  require_rank("conv2d_transpose", x, 4);
  require_rank("conv2d_transpose", kernel, 4);
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index cout = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(0) != cin) {
    throw ShapeError("conv2d_transpose: input has " + std::to_string(cin) + " channels but kernel " +
                     shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(0)));
  }
  if (opts.stride < 1 || opts.padding < 0 || opts.output_padding < 0 ||
      opts.output_padding >= opts.stride) {
    throw ShapeError("conv2d_transpose: invalid stride/padding/output_padding");
  }
  const Index oh = conv_transpose_output_size(h, kh, opts.stride, opts.padding, opts.output_padding);
  const Index ow = conv_transpose_output_size(w, kw, opts.stride, opts.padding, opts.output_padding);
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d_transpose: empty output for input " + shape_str(x.shape()));
  }
  // The geometry of the forward convolution this operator transposes.
  const ConvGeom geom{cout, oh, ow, kh, kw, opts.stride, opts.padding, h, w};
  const Index in_size = cin * h * w, out_size = cout * oh * ow;
  Buffer data = Buffer::Zero(n * out_size);
  ConstRowMap wm(kernel.data().data(), cin, geom.rows());
  RowMat col(geom.rows(), geom.cols());
  for (Index i = 0; i < n; ++i) {
    ConstRowMap xm(x.data().data() + i * in_size, cin, h * w);
    col.noalias() = wm.transpose() * xm;
    col2im(col.data(), geom, data.data() + i * out_size);
  }
  Tensor out({n, cout, oh, ow}, std::move(data));
  auto xi = x.impl(), ki = kernel.impl();
  maybe_record("conv2d_transpose", {x, kernel}, out,
               [xi, ki, geom, n, cin, in_size, out_size](const Buffer& g) {
                 ConstRowMap wm(ki->data.data(), cin, geom.rows());
                 Buffer gw;
                 Buffer gx;
                 if (ki->requires_grad) gw = Buffer::Zero(ki->data.size());
                 if (xi->requires_grad) gx = Buffer::Zero(xi->data.size());
                 RowMat gcol(geom.rows(), geom.cols());
                 for (Index i = 0; i < n; ++i) {
                   im2col(g.data() + i * out_size, geom, gcol.data());
                   if (xi->requires_grad) {
                     RowMap(gx.data() + i * in_size, cin, geom.cols()).noalias() = wm * gcol;
                   }
                   if (ki->requires_grad) {
                     ConstRowMap xm(xi->data.data() + i * in_size, cin, geom.cols());
                     RowMap(gw.data(), cin, geom.rows()).noalias() += xm * gcol.transpose();
                   }
                 }
                 if (ki->requires_grad) accumulate_grad(*ki, gw);
                 if (xi->requires_grad) accumulate_grad(*xi, gx);
               });
  return out;
}

Tensor relu(const Tensor& x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
  return unary(
      "leaky_relu", x, [negative_slope](double v) { return v > 0.0 ? v : negative_slope * v; },
      [negative_slope](double v, double) { return v > 0.0 ? 1.0 : negative_slope; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
  return unary(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
  if ((x.data() <= 0.0).any()) throw NumericError("log: non-positive input");
  return unary(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sum(const Tensor& x) {
  Tensor out({1}, Buffer::Constant(1, x.data().sum()));
  auto xi = x.impl();
  maybe_record("sum", {x}, out, [xi](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, Buffer::Constant(xi->data.size(), g[0]));
  });
  return out;
}

Tensor mean(const Tensor& x) {
  const double count = static_cast<double>(x.numel());
  Tensor out({1}, Buffer::Constant(1, x.data().sum() / count));
  auto xi = x.impl();
  maybe_record("mean", {x}, out, [xi, count](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, Buffer::Constant(xi->data.size(), g[0] / count));
  });
  return out;
}

namespace {

Tensor reduce_axis(const char* op, const Tensor& x, int axis, double factor) {
  axis = normalize_axis(op, axis, x.rank());
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + axis);
  if (shape.empty()) shape = {1};
  Buffer data = Buffer::Zero(s.outer * s.inner);
  const Buffer& in = x.data();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index l = 0; l < s.length; ++l) {
      data.segment(o * s.inner, s.inner) += in.segment((o * s.length + l) * s.inner, s.inner);
    }
  }
  data *= factor;
  Tensor out(std::move(shape), std::move(data));
  auto xi = x.impl();
  maybe_record(op, {x}, out, [xi, s, factor](const Buffer& g) {
    if (!xi->requires_grad) return;
    Buffer gx(xi->data.size());
    for (Index o = 0; o < s.outer; ++o) {
      for (Index l = 0; l < s.length; ++l) {
        gx.segment((o * s.length + l) * s.inner, s.inner) = g.segment(o * s.inner, s.inner) * factor;
      }
    }
    accumulate_grad(*xi, gx);
  });
  return out;
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return reduce_axis("sum", x, axis, 1.0); }

Tensor mean(const Tensor& x, int axis) {
  const int a = normalize_axis("mean", axis, x.rank());
  return reduce_axis("mean", x, a, 1.0 / static_cast<double>(x.dim(a)));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out(std::move(shape), x.data());
  auto xi = x.impl();
  maybe_record("reshape", {x}, out, [xi](const Buffer& g) {
    if (xi->requires_grad) accumulate_grad(*xi, g);
  });
  return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  axis = normalize_axis("concat", axis, xs.front().rank());
  Shape shape = xs.front().shape();
  Index total = 0;
  for (const auto& t : xs) {
    if (t.rank() != xs.front().rank()) throw ShapeError("concat: rank mismatch " + shape_str(t.shape()));
    for (int d = 0; d < t.rank(); ++d) {
      if (d != axis && t.dim(d) != shape[static_cast<std::size_t>(d)]) {
        throw ShapeError("concat: dimension " + std::to_string(d) + " differs, " +
                         shape_str(t.shape()) + " vs " + shape_str(shape));
      }
    }
    total += t.dim(axis);
  }
  shape[static_cast<std::size_t>(axis)] = total;
  const AxisSplit out_split = split_axis(shape, axis);
  Buffer data(numel_of(shape));
  std::vector<Index> offsets;
  Index offset = 0;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const Index len = t.dim(axis);
    for (Index o = 0; o < out_split.outer; ++o) {
      data.segment((o * total + offset) * out_split.inner, len * out_split.inner) =
          t.data().segment(o * len * out_split.inner, len * out_split.inner);
    }
    offset += len;
  }
  Tensor out(std::move(shape), std::move(data));
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<Index> lengths;
  for (const auto& t : xs) {
    impls.push_back(t.impl());
    lengths.push_back(t.dim(axis));
  }
  maybe_record("concat", xs, out, [impls, lengths, offsets, out_split, total](const Buffer& g) {
    for (std::size_t j = 0; j < impls.size(); ++j) {
      if (!impls[j]->requires_grad) continue;
      const Index len = lengths[j];
      Buffer gx(impls[j]->data.size());
      for (Index o = 0; o < out_split.outer; ++o) {
        gx.segment(o * len * out_split.inner, len * out_split.inner) =
            g.segment((o * total + offsets[j]) * out_split.inner, len * out_split.inner);
      }
      accumulate_grad(*impls[j], gx);
    }
  });
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      "clamp", x, [lo, hi](double v) { return v < lo ? lo : (v > hi ? hi : v); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

namespace {

Buffer softmax_rows(const Buffer& in, Index rows, Index cols) {
  Buffer out(in.size());
  for (Index r = 0; r < rows; ++r) {
    auto src = in.segment(r * cols, cols);
    const double m = src.maxCoeff();
    auto dst = out.segment(r * cols, cols);
    dst = (src - m).exp();
    dst /= dst.sum();
  }
  return out;
}

}  // namespace

Tensor softmax(const Tensor& x) {
  const Index cols = x.dim(-1);
  const Index rows = x.numel() / cols;
  Tensor out(x.shape(), softmax_rows(x.data(), rows, cols));
  auto xi = x.impl(), oi = out.impl();
  maybe_record("softmax", {x}, out, [xi, oi, rows, cols](const Buffer& g) {
    if (!xi->requires_grad) return;
    Buffer gx(xi->data.size());
    for (Index r = 0; r < rows; ++r) {
      auto y = oi->data.segment(r * cols, cols);
      auto gy = g.segment(r * cols, cols);
      const double dot = (gy * y).sum();
      gx.segment(r * cols, cols) = y * (gy - dot);
    }
    accumulate_grad(*xi, gx);
  });
  return out;
}

Tensor log_softmax(const Tensor& x) {
  const Index cols = x.dim(-1);
  const Index rows = x.numel() / cols;
  Buffer data(x.numel());
  for (Index r = 0; r < rows; ++r) {
    auto src = x.data().segment(r * cols, cols);
    const double m = src.maxCoeff();
    const double lse = m + std::log((src - m).exp().sum());
    data.segment(r * cols, cols) = src - lse;
  }
  Tensor out(x.shape(), std::move(data));
  auto xi = x.impl(), oi = out.impl();
  maybe_record("log_softmax", {x}, out, [xi, oi, rows, cols](const Buffer& g) {
    if (!xi->requires_grad) return;
    Buffer gx(xi->data.size());
    for (Index r = 0; r < rows; ++r) {
      auto gy = g.segment(r * cols, cols);
      gx.segment(r * cols, cols) = gy - oi->data.segment(r * cols, cols).exp() * gy.sum();
    }
    accumulate_grad(*xi, gx);
  });
  return out;
}

Tensor gaussian_noise_like(const Tensor& like, Rng& rng) {
  Buffer data(like.numel());
  for (Index i = 0; i < data.size(); ++i) data[i] = rng.normal();
  return Tensor(like.shape(), std::move(data));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, BatchNormOptions opts) {
  if (x.rank() < 2) throw ShapeError("batch_norm: expected (N, C, ...), got " + shape_str(x.shape()));
  const Index channels = x.dim(1);
  for (const Tensor* t : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->rank() != 1 || t->dim(0) != channels) {
      throw ShapeError("batch_norm: per-channel tensor " + shape_str(t->shape()) +
                       " does not match " + std::to_string(channels) + " channels");
    }
  }
  const AxisSplit s = split_axis(x.shape(), 1);
  const Index per_channel = s.outer * s.inner;
  const Buffer& in = x.data();
  const bool use_batch = opts.mode != BatchNormMode::kRunning;
  if (use_batch && per_channel < 2) {
    throw ShapeError("batch_norm: batch statistics need more than one value per channel");
  }

  Buffer mu(channels), inv_std(channels);
  for (Index c = 0; c < channels; ++c) {
    if (use_batch) {
      double acc = 0.0;
      for (Index o = 0; o < s.outer; ++o) acc += in.segment((o * channels + c) * s.inner, s.inner).sum();
      mu[c] = acc / static_cast<double>(per_channel);
      double sq = 0.0;
      for (Index o = 0; o < s.outer; ++o) {
        sq += (in.segment((o * channels + c) * s.inner, s.inner) - mu[c]).square().sum();
      }
      const double var = sq / static_cast<double>(per_channel);
      inv_std[c] = 1.0 / std::sqrt(var + opts.eps);
      if (opts.mode == BatchNormMode::kBatchUpdate) {
        const double unbiased = sq / static_cast<double>(per_channel - 1);
        running_mean.mutable_data()[c] = (1.0 - opts.momentum) * running_mean[c] + opts.momentum * mu[c];
        running_var.mutable_data()[c] = (1.0 - opts.momentum) * running_var[c] + opts.momentum * unbiased;
      }
    } else {
      mu[c] = running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(running_var[c] + opts.eps);
    }
  }

  auto xhat = std::make_shared<Buffer>(in.size());
  Buffer data(in.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (o * channels + c) * s.inner;
      xhat->segment(off, s.inner) = (in.segment(off, s.inner) - mu[c]) * inv_std[c];
      data.segment(off, s.inner) = xhat->segment(off, s.inner) * gamma[c] + beta[c];
    }
  }
  Tensor out(x.shape(), std::move(data));
  auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  maybe_record("batch_norm", {x, gamma, beta}, out,
               [xi, gi, bi, xhat, inv_std, s, channels, per_channel, use_batch](const Buffer& g) {
                 Buffer sum_g = Buffer::Zero(channels), sum_gx = Buffer::Zero(channels);
                 for (Index o = 0; o < s.outer; ++o) {
                   for (Index c = 0; c < channels; ++c) {
                     const Index off = (o * channels + c) * s.inner;
                     sum_g[c] += g.segment(off, s.inner).sum();
                     sum_gx[c] += (g.segment(off, s.inner) * xhat->segment(off, s.inner)).sum();
                   }
                 }
                 if (gi->requires_grad) accumulate_grad(*gi, sum_gx);
                 if (bi->requires_grad) accumulate_grad(*bi, sum_g);
                 if (!xi->requires_grad) return;
                 Buffer gx(xi->data.size());
                 const double m = static_cast<double>(per_channel);
                 for (Index o = 0; o < s.outer; ++o) {
                   for (Index c = 0; c < channels; ++c) {
                     const Index off = (o * channels + c) * s.inner;
                     const double k = gi->data[c] * inv_std[c];
                     if (use_batch) {
                       gx.segment(off, s.inner) =
                           k * (g.segment(off, s.inner) - sum_g[c] / m -
                                xhat->segment(off, s.inner) * (sum_gx[c] / m));
                     } else {
                       gx.segment(off, s.inner) = k * g.segment(off, s.inner);
                     }
                   }
                 }
                 accumulate_grad(*xi, gx);
               });
  return out;
}

namespace {

using Dispatch = std::function<Tensor(const std::vector<Tensor>&, const Attrs&)>;

void require_arity(const std::string& op, const std::vector<Tensor>& in, std::size_t n) {
  if (in.size() != n) {
    throw ShapeError(op + ": expected " + std::to_string(n) + " inputs, got " +
                     std::to_string(in.size()));
  }
}

const std::unordered_map<std::string, Dispatch>& dispatch_table() {
  static const std::unordered_map<std::string, Dispatch> table = [] {
    std::unordered_map<std::string, Dispatch> t;
    auto binary = [&t](const std::string& name, Tensor (*fn)(const Tensor&, const Tensor&)) {
      t[name] = [name, fn](const std::vector<Tensor>& in, const Attrs&) {
        require_arity(name, in, 2);
        return fn(in[0], in[1]);
      };
    };
    auto single = [&t](const std::string& name, Tensor (*fn)(const Tensor&)) {
      t[name] = [name, fn](const std::vector<Tensor>& in, const Attrs&) {
        require_arity(name, in, 1);
        return fn(in[0]);
      };
    };
    binary("add", &add);
    binary("sub", &sub);
    binary("mul", &mul);
    binary("matmul", &matmul);
    binary("bias_add", &bias_add);
    single("relu", &relu);
    single("tanh", &tanh);
    single("sigmoid", &sigmoid);
    single("exp", &exp);
    single("log", &log);
    single("softmax", &softmax);
    single("log_softmax", &log_softmax);
    t["conv2d"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("conv2d", in, 2);
      return conv2d(in[0], in[1],
                    {static_cast<Index>(a.get("stride", 1)), static_cast<Index>(a.get("padding", 0))});
    };
    t["conv2d_transpose"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("conv2d_transpose", in, 2);
      return conv2d_transpose(in[0], in[1],
                              {static_cast<Index>(a.get("stride", 1)),
                               static_cast<Index>(a.get("padding", 0)),
                               static_cast<Index>(a.get("output_padding", 0))});
    };
    t["leaky_relu"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("leaky_relu", in, 1);
      return leaky_relu(in[0], a.get("negative_slope", 0.2));
    };
    t["scale"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("scale", in, 1);
      return scale(in[0], a.get("factor", 1.0));
    };
    t["shift"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("shift", in, 1);
      return shift(in[0], a.get("offset", 0.0));
    };
    t["sum"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("sum", in, 1);
      return a.scalars.count("axis") ? sum(in[0], static_cast<int>(a.get("axis", 0))) : sum(in[0]);
    };
    t["mean"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("mean", in, 1);
      return a.scalars.count("axis") ? mean(in[0], static_cast<int>(a.get("axis", 0))) : mean(in[0]);
    };
    t["reshape"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("reshape", in, 1);
      return reshape(in[0], a.shape);
    };
    t["concat"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      return concat(in, static_cast<int>(a.get("axis", 0)));
    };
    t["clamp"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("clamp", in, 1);
      return clamp(in[0], a.get("min", 0.0), a.get("max", 1.0));
    };
    t["gaussian_noise_like"] = [](const std::vector<Tensor>& in, const Attrs& a) {
      require_arity("gaussian_noise_like", in, 1);
      Rng rng(a.seed);
      return gaussian_noise_like(in[0], rng);
    };
    return t;
  }();
  return table;
}

}  // namespace

Tensor apply_primitive(const std::string& op, const std::vector<Tensor>& inputs, const Attrs& attrs) {
  const auto& table = dispatch_table();
  auto it = table.find(op);
  if (it == table.end()) throw UnknownPrimitive("unknown primitive: " + op);
  return it->second(inputs, attrs);
}

const std::vector<std::string>& primitive_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [name, fn] : dispatch_table()) v.push_back(name);
    std::sort(v.begin(), v.end());
    return v;
  }();
  return names;
}

}  // namespace gues
