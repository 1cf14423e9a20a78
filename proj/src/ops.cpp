#include "rdevos/ops.hpp"

#include <algorithm>
#include <limits>

namespace rdevos {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions differ: " + to_string(a.shape()) + " x " +
                         to_string(b.shape()));
  }
  Tensor out({a.dim(0), b.dim(1)});
  out.matrix().noalias() = a.matrix() * b.matrix();
  return out;
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose expects rank 2, got " + to_string(a.shape()));
  Tensor out({a.dim(1), a.dim(0)});
  out.matrix() = a.matrix().transpose();
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  const int ax = x.normalize_axis(axis);
  const AxisSplit s = split_axis(x.shape(), ax);
  Tensor y(x.shape());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < s.extent; ++k) m = std::max(m, x[base + k * s.inner]);
      double total = 0.0;
      for (Index k = 0; k < s.extent; ++k) {
        const double e = std::exp(x[base + k * s.inner] - m);
        y[base + k * s.inner] = e;
        total += e;
      }
      for (Index k = 0; k < s.extent; ++k) y[base + k * s.inner] /= total;
    }
  }
  return y;
}

double kl_divergence(const Tensor& p, const Tensor& q, int axis) {
  if (p.shape() != q.shape()) {
    throw DimensionError("kl_divergence shape mismatch " + to_string(p.shape()) + " vs " +
                         to_string(q.shape()));
  }
  const int ax = p.normalize_axis(axis);
  if ((p.array() < 0.0).any() || (q.array() < 0.0).any()) {
    throw DomainError("kl_divergence operands must be non-negative");
  }
  const AxisSplit s = split_axis(p.shape(), ax);
  double total = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double pi = p[i];
    if (pi > 0.0) total += pi * (std::log(pi) - std::log(std::max(q[i], kKlEpsilon)));
  }
  return total / static_cast<double>(s.outer * s.inner);
}

namespace detail {

ConvGeometry conv_geometry(const Shape& x, const Shape& w, ConvOptions opts) {
  ConvGeometry g;
  g.stride = opts.stride;
  g.dilation = opts.dilation;
  if (opts.stride < 1 || opts.dilation < 1) throw DimensionError("conv stride and dilation must be >= 1");
  if (x.size() == 3 && w.size() == 4) {
    g.cin = x[0];
    g.h = x[1];
    g.w = x[2];
    g.cout = w[0];
    g.kh = w[2];
    g.kw = w[3];
  } else if (x.size() == 4 && w.size() == 5) {
    g.temporal = true;
    g.cin = x[0];
    g.t = x[1];
    g.h = x[2];
    g.w = x[3];
    g.cout = w[0];
    g.kt = w[2];
    g.kh = w[3];
    g.kw = w[4];
  } else {
    throw DimensionError("conv layout mismatch: input " + to_string(x) + ", weight " + to_string(w));
  }
  if (w[1] != g.cin) {
    throw DimensionError("conv channel mismatch: input " + to_string(x) + ", weight " + to_string(w));
  }
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw DimensionError("conv needs odd spatial kernel, got " + to_string(w));
  if (g.kt > g.t) throw DimensionError("temporal kernel longer than input: " + to_string(x) + " vs " + to_string(w));
  g.pad_h = g.dilation * (g.kh - 1) / 2;
  g.pad_w = g.dilation * (g.kw - 1) / 2;
  g.t_out = g.t - g.kt + 1;
  g.h_out = (g.h + 2 * g.pad_h - g.dilation * (g.kh - 1) - 1) / g.stride + 1;
  g.w_out = (g.w + 2 * g.pad_w - g.dilation * (g.kw - 1) - 1) / g.stride + 1;
  if (g.h_out < 1 || g.w_out < 1) throw DimensionError("conv output would be empty for input " + to_string(x));
  return g;
}

Eigen::MatrixXd im2col(const Tensor& x, const ConvGeometry& g) {
  Eigen::MatrixXd cols = Eigen::MatrixXd::Zero(g.patch(), g.positions());
  const double* src = x.data();
  for (Index to = 0; to < g.t_out; ++to) {
    for (Index yo = 0; yo < g.h_out; ++yo) {
      for (Index xo = 0; xo < g.w_out; ++xo) {
        const Index pos = (to * g.h_out + yo) * g.w_out + xo;
        double* col = cols.col(pos).data();
        Index r = 0;
        for (Index ci = 0; ci < g.cin; ++ci) {
          for (Index dt = 0; dt < g.kt; ++dt) {
            const Index plane = (ci * g.t + to + dt) * g.h;
            for (Index dy = 0; dy < g.kh; ++dy) {
              const Index yi = yo * g.stride - g.pad_h + dy * g.dilation;
              for (Index dx = 0; dx < g.kw; ++dx, ++r) {
                const Index xi = xo * g.stride - g.pad_w + dx * g.dilation;
                if (yi >= 0 && yi < g.h && xi >= 0 && xi < g.w) col[r] = src[(plane + yi) * g.w + xi];
              }
            }
          }
        }
      }
    }
  }
  return cols;
}

Tensor col2im(const Eigen::MatrixXd& cols, const ConvGeometry& g, const Shape& x_shape) {
  Tensor dx(x_shape);
  double* dst = dx.data();
  for (Index to = 0; to < g.t_out; ++to) {
    for (Index yo = 0; yo < g.h_out; ++yo) {
      for (Index xo = 0; xo < g.w_out; ++xo) {
        const Index pos = (to * g.h_out + yo) * g.w_out + xo;
        const double* col = cols.col(pos).data();
        Index r = 0;
        for (Index ci = 0; ci < g.cin; ++ci) {
          for (Index dt = 0; dt < g.kt; ++dt) {
            const Index plane = (ci * g.t + to + dt) * g.h;
            for (Index dy = 0; dy < g.kh; ++dy) {
              const Index yi = yo * g.stride - g.pad_h + dy * g.dilation;
              for (Index dxk = 0; dxk < g.kw; ++dxk, ++r) {
                const Index xi = xo * g.stride - g.pad_w + dxk * g.dilation;
                if (yi >= 0 && yi < g.h && xi >= 0 && xi < g.w) dst[(plane + yi) * g.w + xi] += col[r];
              }
            }
          }
        }
      }
    }
  }
  return dx;
}

PoolResult maxpool2d_with_indices(const Tensor& x, int kernel, int stride) {
  if (x.rank() != 3 && x.rank() != 4) throw DimensionError("maxpool2d expects rank 3 or 4, got " + to_string(x.shape()));
  if (kernel < 1 || stride < 1) throw DimensionError("maxpool2d kernel and stride must be >= 1");
  const Index h = x.dim(-2);
  const Index w = x.dim(-1);
  if (h % stride != 0 || w % stride != 0) {
    throw DimensionError("maxpool2d: spatial dims " + to_string(x.shape()) + " not divisible by stride " +
                         std::to_string(stride));
  }
  const Index ho = h / stride;
  const Index wo = w / stride;
  const Index planes = x.size() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = ho;
  out_shape[out_shape.size() - 1] = wo;
  PoolResult r{Tensor(out_shape), std::vector<Index>(static_cast<std::size_t>(numel(out_shape)))};
  for (Index p = 0; p < planes; ++p) {
    for (Index yo = 0; yo < ho; ++yo) {
      for (Index xo = 0; xo < wo; ++xo) {
        Index best = -1;
        double best_v = -std::numeric_limits<double>::infinity();
        for (Index dy = 0; dy < kernel; ++dy) {
          const Index yi = yo * stride + dy;
          if (yi >= h) break;
          for (Index dx = 0; dx < kernel; ++dx) {
            const Index xi = xo * stride + dx;
            if (xi >= w) break;
            const Index src = (p * h + yi) * w + xi;
            if (best < 0 || x[src] > best_v) {
              best = src;
              best_v = x[src];
            }
          }
        }
        const Index dst = (p * ho + yo) * wo + xo;
        r.out[dst] = best_v;
        r.argmax[static_cast<std::size_t>(dst)] = best;
      }
    }
  }
  return r;
}

}  // namespace detail

Tensor conv(const Tensor& x, const Tensor& w, ConvOptions opts) {
  const detail::ConvGeometry g = detail::conv_geometry(x.shape(), w.shape(), opts);
  const Eigen::MatrixXd cols = detail::im2col(x, g);
  Tensor out(g.out_shape());
  Eigen::Map<Tensor::RowMajorMatrix> out_m(out.data(), g.cout, g.positions());
  Eigen::Map<const Tensor::RowMajorMatrix> w_m(w.data(), g.cout, g.patch());
  out_m.noalias() = w_m * cols;
  return out;
}

Tensor maxpool2d(const Tensor& x, int kernel, int stride) {
  return detail::maxpool2d_with_indices(x, kernel, stride).out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank()) throw DimensionError("concat rank mismatch");
  const int ax = a.normalize_axis(axis);
  for (int i = 0; i < a.rank(); ++i) {
    if (i != ax && a.dim(i) != b.dim(i)) {
      throw DimensionError("concat shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
  }
  Shape out_shape = a.shape();
  out_shape[static_cast<std::size_t>(ax)] += b.dim(ax);
  Tensor out(out_shape);
  const AxisSplit sa = split_axis(a.shape(), ax);
  const AxisSplit sb = split_axis(b.shape(), ax);
  const Index block_a = sa.extent * sa.inner;
  const Index block_b = sb.extent * sb.inner;
  for (Index o = 0; o < sa.outer; ++o) {
    double* dst = out.data() + o * (block_a + block_b);
    std::copy_n(a.data() + o * block_a, block_a, dst);
    std::copy_n(b.data() + o * block_b, block_b, dst + block_a);
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, Index start, Index length) {
  const int ax = x.normalize_axis(axis);
  if (start < 0 || length < 1 || start + length > x.dim(ax)) {
    throw DimensionError("slice [" + std::to_string(start) + ", +" + std::to_string(length) +
                         ") out of range for " + to_string(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  Tensor out(out_shape);
  const AxisSplit s = split_axis(x.shape(), ax);
  for (Index o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.extent + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  }
  return out;
}

Tensor upsample_nearest(const Tensor& x, int factor) {
  if (x.rank() < 2) throw DimensionError("upsample_nearest expects rank >= 2");
  if (factor < 1) throw DimensionError("upsample factor must be >= 1");
  const Index h = x.dim(-2);
  const Index w = x.dim(-1);
  const Index planes = x.size() / (h * w);
  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = h * factor;
  out_shape[out_shape.size() - 1] = w * factor;
  Tensor out(out_shape);
  const Index ho = h * factor;
  const Index wo = w * factor;
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < ho; ++y) {
      for (Index xx = 0; xx < wo; ++xx) out[(p * ho + y) * wo + xx] = x[(p * h + y / factor) * w + xx / factor];
    }
  }
  return out;
}

}  // namespace rdevos
