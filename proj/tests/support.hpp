#pragma once

// Shared test helpers: seeded inputs, a finite-difference gradient checker
// and naive loop oracles that share no code with the library kernels.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "rdevos/autodiff.hpp"
#include "rdevos/rng.hpp"

namespace rdevos::test {

inline constexpr double kGradTolerance = 1e-5;
inline constexpr int kGradCases = 20;

inline Tensor random_tensor(const Shape& shape, std::uint64_t seed, double lo = -2.0, double hi = 2.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
  return t;
}

/// Seeded random weights turning a tensor output into a scalar loss.
inline Var project(const Var& out, std::uint64_t seed) {
  return sum(mul(out, out.tape().constant(random_tensor(out.shape(), seed ^ 0x9e3779b97f4a7c15ULL, -1.0, 1.0))));
}

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheck {
  double max_rel = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares the tape gradient of `build` against central differences for
/// every input listed in `wrt` (all inputs when empty). `coords_per_input`
/// limits the finite-difference probes to a seeded subset of entries.
inline GradCheck grad_check(const Builder& build, const std::vector<Tensor>& inputs, std::vector<std::size_t> wrt = {},
                            Index coords_per_input = 0, std::uint64_t coord_seed = 1) {
  if (wrt.empty()) {
    for (std::size_t i = 0; i < inputs.size(); ++i) wrt.push_back(i);
  }
  Tape tape;
  std::vector<Var> vars;
  for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
  const Var loss = build(tape, vars);
  tape.backward(loss);

  GradCheck result;
  for (std::size_t i : wrt) {
    const Tensor analytic = tape.grad(vars[i]);
    auto f = [&](const Tensor& x) {
      Tape t2;
      std::vector<Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j) vs.push_back(t2.constant(j == i ? x : inputs[j]));
      return build(t2, vs).value().item();
    };
    std::vector<Index> coords;
    if (coords_per_input > 0 && coords_per_input < inputs[i].size()) {
      std::mt19937_64 rng(coord_seed + i);
      std::uniform_int_distribution<Index> pick(0, inputs[i].size() - 1);
      for (Index c = 0; c < coords_per_input; ++c) coords.push_back(pick(rng));
    } else {
      for (Index c = 0; c < inputs[i].size(); ++c) coords.push_back(c);
    }
    const std::vector<double> numeric = finite_diff_grad_at(f, inputs[i], coords);
    for (std::size_t c = 0; c < coords.size(); ++c) {
      const double a = analytic[coords[c]];
      const double rel = relative_error(a, numeric[c]);
      if (rel > result.max_rel) {
        result.max_rel = rel;
        result.worst_analytic = a;
        result.worst_numeric = numeric[c];
      }
    }
  }
  return result;
}

/// Worst case of grad_check over kGradCases seeds; `make_inputs(seed)`.
inline GradCheck grad_suite(const Builder& build, const std::function<std::vector<Tensor>(std::uint64_t)>& make_inputs,
                            std::vector<std::size_t> wrt = {}, Index coords_per_input = 0) {
  GradCheck worst;
  for (int s = 0; s < kGradCases; ++s) {
    const auto seed = static_cast<std::uint64_t>(1000 + 17 * s);
    const GradCheck g = grad_check(build, make_inputs(seed), wrt, coords_per_input, seed);
    if (g.max_rel >= worst.max_rel) worst = g;
  }
  return worst;
}

// ---------------------------------------------------------------- oracles

inline Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  const Index n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out({n, m});
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      double acc = 0.0;
      for (Index t = 0; t < k; ++t) acc += a[i * k + t] * b[t * m + j];
      out[i * m + j] = acc;
    }
  }
  return out;
}

/// Direct 2D convolution, [Cin x H x W] * [Cout x Cin x kh x kw], zero "same"
/// padding d(k-1)/2, output H/stride.
inline Tensor naive_conv2d(const Tensor& x, const Tensor& w, int stride = 1, int dilation = 1) {
  const Index cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const Index cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const Index ph = dilation * (kh - 1) / 2, pw = dilation * (kw - 1) / 2;
  const Index ho = (h + 2 * ph - dilation * (kh - 1) - 1) / stride + 1;
  const Index wo = (wd + 2 * pw - dilation * (kw - 1) - 1) / stride + 1;
  Tensor out({cout, ho, wo});
  for (Index co = 0; co < cout; ++co) {
    for (Index y = 0; y < ho; ++y) {
      for (Index xx = 0; xx < wo; ++xx) {
        double acc = 0.0;
        for (Index ci = 0; ci < cin; ++ci) {
          for (Index dy = 0; dy < kh; ++dy) {
            for (Index dx = 0; dx < kw; ++dx) {
              const Index iy = y * stride - ph + dy * dilation;
              const Index ix = xx * stride - pw + dx * dilation;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += x[(ci * h + iy) * wd + ix] * w[((co * cin + ci) * kh + dy) * kw + dx];
            }
          }
        }
        out[(co * ho + y) * wo + xx] = acc;
      }
    }
  }
  return out;
}

/// Direct 3D convolution over [Cin x T x H x W]: valid in time, "same" in space.
inline Tensor naive_conv3d(const Tensor& x, const Tensor& w, int dilation = 1) {
  const Index cin = x.dim(0), t = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), kt = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  const Index ph = dilation * (kh - 1) / 2, pw = dilation * (kw - 1) / 2;
  const Index to = t - kt + 1;
  Tensor out({cout, to, h, wd});
  for (Index co = 0; co < cout; ++co) {
    for (Index tt = 0; tt < to; ++tt) {
      for (Index y = 0; y < h; ++y) {
        for (Index xx = 0; xx < wd; ++xx) {
          double acc = 0.0;
          for (Index ci = 0; ci < cin; ++ci) {
            for (Index dt = 0; dt < kt; ++dt) {
              for (Index dy = 0; dy < kh; ++dy) {
                for (Index dx = 0; dx < kw; ++dx) {
                  const Index iy = y - ph + dy * dilation;
                  const Index ix = xx - pw + dx * dilation;
                  if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                  acc += x[((ci * t + tt + dt) * h + iy) * wd + ix] *
                         w[(((co * cin + ci) * kt + dt) * kh + dy) * kw + dx];
                }
              }
            }
          }
          out[((co * to + tt) * h + y) * wd + xx] = acc;
        }
      }
    }
  }
  return out;
}

/// S(p, q) = -sum_c (km[c, p] - kq[c, q])^2, written out directly.
inline Tensor naive_similarity(const Tensor& km, const Tensor& kq) {
  const Index c = km.dim(0), nm = km.dim(1), nq = kq.dim(1);
  Tensor s({nm, nq});
  for (Index p = 0; p < nm; ++p) {
    for (Index q = 0; q < nq; ++q) {
      double acc = 0.0;
      for (Index ch = 0; ch < c; ++ch) {
        const double d = km[ch * nm + p] - kq[ch * nq + q];
        acc += d * d;
      }
      s[p * nq + q] = -acc;
    }
  }
  return s;
}

inline double naive_softmax_ce(const std::vector<double>& logits, int label) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return -(logits[static_cast<std::size_t>(label)] - m - std::log(z));
}

/// KL(p || q) over axis 0 of [C x N] distributions, averaged over N.
inline double naive_kl(const Tensor& p, const Tensor& q) {
  const Index c = p.dim(0), n = p.size() / c;
  double total = 0.0;
  for (Index j = 0; j < n; ++j) {
    for (Index i = 0; i < c; ++i) {
      const double pi = p[i * n + j];
      if (pi > 0) total += pi * (std::log(pi) - std::log(std::max(q[i * n + j], 1e-12)));
    }
  }
  return total / static_cast<double>(n);
}

/// Softmax over axis 0 of a [C x ...] tensor with explicit loops.
inline Tensor naive_channel_softmax(const Tensor& x) {
  const Index c = x.dim(0), n = x.size() / c;
  Tensor out(x.shape());
  for (Index j = 0; j < n; ++j) {
    double m = -std::numeric_limits<double>::infinity();
    for (Index i = 0; i < c; ++i) m = std::max(m, x[i * n + j]);
    double z = 0.0;
    for (Index i = 0; i < c; ++i) z += std::exp(x[i * n + j] - m);
    for (Index i = 0; i < c; ++i) out[i * n + j] = std::exp(x[i * n + j] - m) / z;
  }
  return out;
}

}  // namespace rdevos::test
