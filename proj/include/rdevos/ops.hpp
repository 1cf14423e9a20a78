#pragma once

#include <vector>

#include "rdevos/tensor.hpp"

// Plain (non-differentiable) tensor kernels. The autodiff layer in
// autodiff.hpp wraps these and adds the matching backward passes.
namespace rdevos {

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, int axis);

/// Floor applied to q before the log in kl_divergence.
inline constexpr double kKlEpsilon = 1e-12;

/// sum_axis p * log(p / max(q, eps)), averaged over every non-axis position.
/// Negative entries in p or q raise DomainError.
double kl_divergence(const Tensor& p, const Tensor& q, int axis);

/// Zero "same" spatial padding, no temporal padding. Accepted layouts:
///   x [Cin x H x W]      with w [Cout x Cin x kh x kw]
///   x [Cin x T x H x W]  with w [Cout x Cin x kt x kh x kw]
/// Kernel extents must be odd spatially. Stride applies to H and W only.
struct ConvOptions {
  int stride = 1;
  int dilation = 1;
};

Tensor conv(const Tensor& x, const Tensor& w, ConvOptions opts = {});

/// Spatial max pooling over the last two axes of [C x H x W] or
/// [C x T x H x W]; T is untouched. H and W must be divisible by stride.
Tensor maxpool2d(const Tensor& x, int kernel, int stride);

Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& x, int axis, Index start, Index length);

/// Nearest-neighbour upsampling of the last two axes by an integer factor.
Tensor upsample_nearest(const Tensor& x, int factor);

namespace detail {

// Geometry shared by conv forward and backward.
struct ConvGeometry {
  Index cin = 0, cout = 0;
  Index t = 1, h = 0, w = 0;
  Index kt = 1, kh = 0, kw = 0;
  Index t_out = 1, h_out = 0, w_out = 0;
  Index pad_h = 0, pad_w = 0;
  int stride = 1, dilation = 1;
  bool temporal = false;

  Index patch() const { return cin * kt * kh * kw; }
  Index positions() const { return t_out * h_out * w_out; }
  Shape out_shape() const {
    return temporal ? Shape{cout, t_out, h_out, w_out} : Shape{cout, h_out, w_out};
  }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, ConvOptions opts);

/// [patch x positions] column matrix.
Eigen::MatrixXd im2col(const Tensor& x, const ConvGeometry& g);

/// Scatter-add of a column matrix back to input layout.
Tensor col2im(const Eigen::MatrixXd& cols, const ConvGeometry& g, const Shape& x_shape);

struct PoolResult {
  Tensor out;
  std::vector<Index> argmax;  // flat source index per output element
};

PoolResult maxpool2d_with_indices(const Tensor& x, int kernel, int stride);

}  // namespace detail
}  // namespace rdevos
