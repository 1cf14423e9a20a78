#include "rdevos/autodiff.hpp"

#include <algorithm>
#include <memory>
#include <numeric>

namespace rdevos {

// ---------------------------------------------------------------- tape

Var Tape::push(std::shared_ptr<const Tensor> value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::check_owner(const Var& v) const {
  if (v.tape_ != this || v.id_ >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool any = false;
  for (const Var& v : inputs) {
    check_owner(v);
    any = any || nodes_[v.id_].requires_grad;
  }
  return push(std::make_shared<const Tensor>(std::move(value)), any, any ? std::move(backward) : nullptr);
}

void Tape::accumulate(const Var& v, Tensor&& g) {
  Node& n = nodes_.at(v.id_);
  if (!n.requires_grad) return;
  if (g.shape() != n.value->shape()) {
    throw DimensionError("gradient shape " + to_string(g.shape()) + " does not match value " +
                         to_string(n.value->shape()));
  }
  if (!n.has_grad) {
    n.grad = std::move(g);
    n.has_grad = true;
  } else {
    n.grad.array() += g.array();
  }
}

void Tape::accumulate(const Var& v, const Tensor& g) { accumulate(v, Tensor(g)); }

void Tape::zero_grad() {
  for (Node& n : nodes_) {
    n.grad = Tensor();
    n.has_grad = false;
  }
}

void Tape::backward(const Var& loss) {
  check_owner(loss);
  if (nodes_[loss.id_].value->size() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(nodes_[loss.id_].value->shape()));
  }
  zero_grad();
  Node& root = nodes_[loss.id_];
  if (!root.requires_grad) return;
  root.grad = Tensor::constant(root.value->shape(), 1.0);
  root.has_grad = true;
  for (std::size_t i = loss.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(n.grad, *this);
  }
}

Tensor Tape::grad(const Var& v) const {
  const Node& n = nodes_.at(v.id_);
  return n.has_grad ? n.grad : Tensor::zeros(n.value->shape());
}

// ---------------------------------------------------------------- ops

Var detach(const Var& v) { return v.tape().constant(v.value()); }

Var matmul(const Var& a, const Var& b) {
  return a.tape().record(matmul(a.value(), b.value()), {a, b}, [a, b](const Tensor& g, Tape& t) {
    if (a.requires_grad()) {
      Tensor ga(a.shape());
      ga.matrix().noalias() = g.matrix() * b.value().matrix().transpose();
      t.accumulate(a, std::move(ga));
    }
    if (b.requires_grad()) {
      Tensor gb(b.shape());
      gb.matrix().noalias() = a.value().matrix().transpose() * g.matrix();
      t.accumulate(b, std::move(gb));
    }
  });
}

Var transpose(const Var& a) {
  return a.tape().record(transpose(a.value()), {a},
                         [a](const Tensor& g, Tape& t) { t.accumulate(a, transpose(g)); });
}

Var softmax(const Var& x, int axis) {
  const int ax = x.value().normalize_axis(axis);
  auto y = std::make_shared<Tensor>(softmax(x.value(), ax));
  return x.tape().record(*y, {x}, [x, y, ax](const Tensor& g, Tape& t) {
    const AxisSplit s = split_axis(y->shape(), ax);
    Tensor gx(y->shape());
    for (Index o = 0; o < s.outer; ++o) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (Index k = 0; k < s.extent; ++k) dot += (*y)[base + k * s.inner] * g[base + k * s.inner];
        for (Index k = 0; k < s.extent; ++k) {
          const Index j = base + k * s.inner;
          gx[j] = (*y)[j] * (g[j] - dot);
        }
      }
    }
    t.accumulate(x, std::move(gx));
  });
}

Var kl_divergence(const Var& p, const Var& q, int axis) {
  const double value = kl_divergence(p.value(), q.value(), axis);
  const int ax = p.value().normalize_axis(axis);
  return p.tape().record(Tensor::scalar(value), {p, q}, [p, q, ax](const Tensor& g, Tape& t) {
    const AxisSplit s = split_axis(p.shape(), ax);
    const double w = g.item() / static_cast<double>(s.outer * s.inner);
    const auto& pa = p.value().array();
    const auto& qa = q.value().array();
    const auto qc = qa.max(kKlEpsilon);
    if (p.requires_grad()) {
      Tensor gp(p.shape());
      gp.array() = w * (pa.max(kKlEpsilon).log() - qc.log() + 1.0);
      t.accumulate(p, std::move(gp));
    }
    if (q.requires_grad()) {
      Tensor gq(q.shape());
      gq.array() = (qa >= kKlEpsilon).select(-w * pa / qc, 0.0);
      t.accumulate(q, std::move(gq));
    }
  });
}

Var conv(const Var& x, const Var& w, ConvOptions opts) {
  const detail::ConvGeometry geo = detail::conv_geometry(x.shape(), w.shape(), opts);
  auto cols = std::make_shared<Eigen::MatrixXd>(detail::im2col(x.value(), geo));
  Tensor out(geo.out_shape());
  {
    Eigen::Map<Tensor::RowMajorMatrix> out_m(out.data(), geo.cout, geo.positions());
    Eigen::Map<const Tensor::RowMajorMatrix> w_m(w.value().data(), geo.cout, geo.patch());
    out_m.noalias() = w_m * *cols;
  }
  return x.tape().record(std::move(out), {x, w}, [x, w, geo, cols](const Tensor& g, Tape& t) {
    Eigen::Map<const Tensor::RowMajorMatrix> g_m(g.data(), geo.cout, geo.positions());
    if (w.requires_grad()) {
      Tensor gw(w.shape());
      Eigen::Map<Tensor::RowMajorMatrix>(gw.data(), geo.cout, geo.patch()).noalias() = g_m * cols->transpose();
      t.accumulate(w, std::move(gw));
    }
    if (x.requires_grad()) {
      Eigen::Map<const Tensor::RowMajorMatrix> w_m(w.value().data(), geo.cout, geo.patch());
      const Eigen::MatrixXd dcols = w_m.transpose() * g_m;
      t.accumulate(x, detail::col2im(dcols, geo, x.shape()));
    }
  });
}

Var maxpool2d(const Var& x, int kernel, int stride) {
  auto pooled = detail::maxpool2d_with_indices(x.value(), kernel, stride);
  auto argmax = std::make_shared<std::vector<Index>>(std::move(pooled.argmax));
  return x.tape().record(std::move(pooled.out), {x}, [x, argmax](const Tensor& g, Tape& t) {
    Tensor gx(x.shape());
    for (std::size_t i = 0; i < argmax->size(); ++i) gx[(*argmax)[i]] += g[static_cast<Index>(i)];
    t.accumulate(x, std::move(gx));
  });
}

Var concat(const Var& a, const Var& b, int axis) {
  const Var parts[] = {a, b};
  return concat(std::span<const Var>(parts), axis);
}

Var concat(std::span<const Var> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tensor out = parts[0].value();
  for (std::size_t i = 1; i < parts.size(); ++i) out = concat(out, parts[i].value(), axis);
  const int ax = out.normalize_axis(axis);
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts[0].tape().record(std::move(out), parts, [inputs, ax](const Tensor& g, Tape& t) {
    Index start = 0;
    for (const Var& v : inputs) {
      const Index len = v.value().dim(ax);
      if (v.requires_grad()) t.accumulate(v, slice(g, ax, start, len));
      start += len;
    }
  });
}

Var slice(const Var& x, int axis, Index start, Index length) {
  const int ax = x.value().normalize_axis(axis);
  return x.tape().record(slice(x.value(), ax, start, length), {x}, [x, ax, start, length](const Tensor& g, Tape& t) {
    Tensor gx(x.shape());
    const AxisSplit s = split_axis(x.shape(), ax);
    for (Index o = 0; o < s.outer; ++o) {
      std::copy_n(g.data() + o * length * s.inner, length * s.inner, gx.data() + (o * s.extent + start) * s.inner);
    }
    t.accumulate(x, std::move(gx));
  });
}

Var reshape(const Var& x, Shape shape) {
  return x.tape().record(x.value().reshaped(std::move(shape)), {x},
                         [x](const Tensor& g, Tape& t) { t.accumulate(x, g.reshaped(x.shape())); });
}

Var upsample_nearest(const Var& x, int factor) {
  return x.tape().record(upsample_nearest(x.value(), factor), {x}, [x, factor](const Tensor& g, Tape& t) {
    const Index h = x.value().dim(-2);
    const Index w = x.value().dim(-1);
    const Index planes = x.value().size() / (h * w);
    const Index ho = h * factor;
    const Index wo = w * factor;
    Tensor gx(x.shape());
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < ho; ++y) {
        for (Index xx = 0; xx < wo; ++xx) gx[(p * h + y / factor) * w + xx / factor] += g[(p * ho + y) * wo + xx];
      }
    }
    t.accumulate(x, std::move(gx));
  });
}

namespace {

enum class Side { Equal, LeftScalar, RightScalar };

Side broadcast_side(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Side::Equal;
  if (a.size() == 1) return Side::LeftScalar;
  if (b.size() == 1) return Side::RightScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

// Reduces a full-shape gradient to the operand's shape (sum for a scalar side).
Tensor reduce_to(const Tensor& g, const Tensor& operand) {
  if (g.shape() == operand.shape()) return g;
  return Tensor::constant(operand.shape(), g.array().sum());
}

Tensor binary_value(const Tensor& a, const Tensor& b, Side side, int kind) {
  const auto op = [kind](const auto& x, const auto& y) -> Tensor::Storage {
    switch (kind) {
      case 0: return x + y;
      case 1: return x - y;
      default: return x * y;
    }
  };
  switch (side) {
    case Side::Equal: return Tensor(a.shape(), op(a.array(), b.array()));
    case Side::LeftScalar: return Tensor(b.shape(), op(Tensor::Storage::Constant(b.size(), a[0]), b.array()));
    default: return Tensor(a.shape(), op(a.array(), Tensor::Storage::Constant(a.size(), b[0])));
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  const Side side = broadcast_side(a.value(), b.value(), "add");
  return a.tape().record(binary_value(a.value(), b.value(), side, 0), {a, b}, [a, b](const Tensor& g, Tape& t) {
    if (a.requires_grad()) t.accumulate(a, reduce_to(g, a.value()));
    if (b.requires_grad()) t.accumulate(b, reduce_to(g, b.value()));
  });
}

Var sub(const Var& a, const Var& b) {
  const Side side = broadcast_side(a.value(), b.value(), "sub");
  return a.tape().record(binary_value(a.value(), b.value(), side, 1), {a, b}, [a, b](const Tensor& g, Tape& t) {
    if (a.requires_grad()) t.accumulate(a, reduce_to(g, a.value()));
    if (b.requires_grad()) {
      Tensor gb = reduce_to(g, b.value());
      gb.array() = -gb.array();
      t.accumulate(b, std::move(gb));
    }
  });
}

Var mul(const Var& a, const Var& b) {
  const Side side = broadcast_side(a.value(), b.value(), "mul");
  return a.tape().record(binary_value(a.value(), b.value(), side, 2), {a, b}, [a, b, side](const Tensor& g, Tape& t) {
    if (a.requires_grad()) {
      const Tensor full = binary_value(g, b.value(), side == Side::LeftScalar ? Side::Equal : side, 2);
      t.accumulate(a, reduce_to(full, a.value()));
    }
    if (b.requires_grad()) {
      const Tensor full = binary_value(a.value(), g, side == Side::RightScalar ? Side::Equal : side, 2);
      t.accumulate(b, reduce_to(full, b.value()));
    }
  });
}

Var scale(const Var& x, double s) {
  return x.tape().record(Tensor(x.shape(), x.value().array() * s), {x}, [x, s](const Tensor& g, Tape& t) {
    t.accumulate(x, Tensor(x.shape(), g.array() * s));
  });
}

Var relu(const Var& x) {
  return x.tape().record(Tensor(x.shape(), x.value().array().max(0.0)), {x}, [x](const Tensor& g, Tape& t) {
    t.accumulate(x, Tensor(x.shape(), (x.value().array() > 0.0).select(g.array(), 0.0)));
  });
}

Var log(const Var& x) {
  if ((x.value().array() <= 0.0).any()) throw DomainError("log of non-positive value");
  return x.tape().record(Tensor(x.shape(), x.value().array().log()), {x}, [x](const Tensor& g, Tape& t) {
    t.accumulate(x, Tensor(x.shape(), g.array() / x.value().array()));
  });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var sum(const Var& x) {
  return x.tape().record(Tensor::scalar(x.value().array().sum()), {x}, [x](const Tensor& g, Tape& t) {
    t.accumulate(x, Tensor::constant(x.shape(), g.item()));
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var softmax_cross_entropy(const Var& logits, const std::vector<int>& labels) {
  const Tensor& z = logits.value();
  if (z.rank() < 2) throw DimensionError("softmax_cross_entropy expects [K x ...] logits");
  const Index classes = z.dim(0);
  const Index positions = z.size() / classes;
  if (static_cast<Index>(labels.size()) != positions) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(positions) + " positions");
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) throw DomainError("class label " + std::to_string(l) + " out of range");
  }
  auto probs = std::make_shared<Tensor>(softmax(z, 0));
  Shape out_shape(z.shape().begin() + 1, z.shape().end());
  Tensor out(out_shape);
  for (Index p = 0; p < positions; ++p) {
    double m = z[p];
    for (Index k = 1; k < classes; ++k) m = std::max(m, z[k * positions + p]);
    double total = 0.0;
    for (Index k = 0; k < classes; ++k) total += std::exp(z[k * positions + p] - m);
    out[p] = m + std::log(total) - z[labels[static_cast<std::size_t>(p)] * positions + p];
  }
  return logits.tape().record(std::move(out), {logits}, [logits, probs, labels, positions](const Tensor& g, Tape& t) {
    Tensor gz(logits.shape());
    const Index classes = logits.value().dim(0);
    for (Index k = 0; k < classes; ++k) {
      for (Index p = 0; p < positions; ++p) {
        const double onehot = labels[static_cast<std::size_t>(p)] == k ? 1.0 : 0.0;
        gz[k * positions + p] = g[p] * ((*probs)[k * positions + p] - onehot);
      }
    }
    t.accumulate(logits, std::move(gz));
  });
}

Var topk_mean(const Var& x, Index count) {
  const Tensor& v = x.value();
  if (count < 1 || count > v.size()) {
    throw DomainError("topk_mean count " + std::to_string(count) + " outside [1, " + std::to_string(v.size()) + "]");
  }
  auto order = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(v.size()));
  std::iota(order->begin(), order->end(), Index{0});
  std::stable_sort(order->begin(), order->end(), [&v](Index a, Index b) { return v[a] > v[b]; });
  order->resize(static_cast<std::size_t>(count));
  double total = 0.0;
  for (Index i : *order) total += v[i];
  return x.tape().record(Tensor::scalar(total / static_cast<double>(count)), {x},
                         [x, order, count](const Tensor& g, Tape& t) {
                           Tensor gx(x.shape());
                           const double w = g.item() / static_cast<double>(count);
                           for (Index i : *order) gx[i] = w;
                           t.accumulate(x, std::move(gx));
                         });
}

// ---------------------------------------------------------------- oracle

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
  std::vector<Index> coords(static_cast<std::size_t>(x.size()));
  std::iota(coords.begin(), coords.end(), Index{0});
  const std::vector<double> g = finite_diff_grad_at(f, x, coords, h);
  return Tensor(x.shape(), g);
}

std::vector<double> finite_diff_grad_at(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                        std::span<const Index> coords, double h) {
  std::vector<double> out;
  out.reserve(coords.size());
  Tensor probe = x;
  for (Index i : coords) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    out.push_back((up - down) / (2.0 * h));
  }
  return out;
}

}  // namespace rdevos
