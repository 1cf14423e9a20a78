#include "rdevos/readout.hpp"

#include <algorithm>
#include <limits>
#include <memory>
#include <numeric>

#include "rdevos/rng.hpp"

namespace rdevos {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_keys(const Tensor& mem, const Tensor& query) {
  if (mem.rank() != 2 || query.rank() != 2 || mem.dim(0) != query.dim(0)) {
    throw DimensionError("similarity expects [Ck x N] keys with equal Ck, got " + to_string(mem.shape()) + " and " +
                         to_string(query.shape()));
  }
}

// Rows kept per column by topk_filter.
std::vector<std::uint8_t> topk_keep(const Tensor& s, Index k) {
  const Index n_mem = s.dim(0);
  const Index n_q = s.dim(1);
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(s.size()), 0);
  std::vector<Index> order(static_cast<std::size_t>(n_mem));
  for (Index q = 0; q < n_q; ++q) {
    std::iota(order.begin(), order.end(), Index{0});
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](Index a, Index b) {
      const double va = s[a * n_q + q];
      const double vb = s[b * n_q + q];
      return va > vb || (va == vb && a < b);
    });
    for (Index i = 0; i < k; ++i) keep[static_cast<std::size_t>(order[static_cast<std::size_t>(i)] * n_q + q)] = 1;
  }
  return keep;
}

void check_topk(const Tensor& s, Index k) {
  if (s.rank() != 2) throw DimensionError("topk_filter expects [N_mem x N_query]");
  if (k < 1 || k > s.dim(0)) {
    throw DomainError("top-k " + std::to_string(k) + " outside [1, " + std::to_string(s.dim(0)) + "]");
  }
}

void check_columns(const Tensor& s) {
  if (s.rank() != 2) throw DimensionError("affinity expects [N_mem x N_query]");
  for (Index q = 0; q < s.dim(1); ++q) {
    bool finite = false;
    for (Index p = 0; p < s.dim(0) && !finite; ++p) finite = std::isfinite(s[p * s.dim(1) + q]);
    if (!finite) throw ContractError("affinity column " + std::to_string(q) + " has no finite entry");
  }
}

}  // namespace

Tensor similarity(const Tensor& mem_keys, const Tensor& query_keys) {
  check_keys(mem_keys, query_keys);
  const auto km = mem_keys.matrix();
  const auto kq = query_keys.matrix();
  Tensor s({mem_keys.dim(1), query_keys.dim(1)});
  const Eigen::VectorXd mem_sq = km.colwise().squaredNorm().transpose();
  const Eigen::RowVectorXd query_sq = kq.colwise().squaredNorm();
  auto out = s.matrix();
  out.noalias() = 2.0 * km.transpose() * kq;
  out.colwise() -= mem_sq;
  out.rowwise() -= query_sq;
  return s;
}

Var similarity(const Var& mem_keys, const Var& query_keys) {
  return mem_keys.tape().record(
      similarity(mem_keys.value(), query_keys.value()), {mem_keys, query_keys},
      [mem_keys, query_keys](const Tensor& g, Tape& t) {
        const auto km = mem_keys.value().matrix();
        const auto kq = query_keys.value().matrix();
        const auto gm = g.matrix();
        if (mem_keys.requires_grad()) {
          Tensor d(mem_keys.shape());
          const Eigen::RowVectorXd row_sums = gm.rowwise().sum().transpose();
          d.matrix().noalias() = 2.0 * kq * gm.transpose();
          d.matrix() -= 2.0 * (km.array().rowwise() * row_sums.array()).matrix();
          t.accumulate(mem_keys, std::move(d));
        }
        if (query_keys.requires_grad()) {
          Tensor d(query_keys.shape());
          const Eigen::RowVectorXd col_sums = gm.colwise().sum();
          d.matrix().noalias() = 2.0 * km * gm;
          d.matrix() -= 2.0 * (kq.array().rowwise() * col_sums.array()).matrix();
          t.accumulate(query_keys, std::move(d));
        }
      });
}

Tensor topk_filter(const Tensor& s, Index k) {
  check_topk(s, k);
  if (k == s.dim(0)) return s;
  const auto keep = topk_keep(s, k);
  Tensor out = s;
  for (Index i = 0; i < out.size(); ++i) {
    if (!keep[static_cast<std::size_t>(i)]) out[i] = kNegInf;
  }
  return out;
}

Var topk_filter(const Var& s, Index k) {
  check_topk(s.value(), k);
  if (k == s.value().dim(0)) return s;
  auto keep = std::make_shared<std::vector<std::uint8_t>>(topk_keep(s.value(), k));
  Tensor out = s.value();
  for (Index i = 0; i < out.size(); ++i) {
    if (!(*keep)[static_cast<std::size_t>(i)]) out[i] = kNegInf;
  }
  return s.tape().record(std::move(out), {s}, [s, keep](const Tensor& g, Tape& t) {
    Tensor gs(s.shape());
    for (Index i = 0; i < gs.size(); ++i) gs[i] = (*keep)[static_cast<std::size_t>(i)] ? g[i] : 0.0;
    t.accumulate(s, std::move(gs));
  });
}

Tensor affinity(const Tensor& s) {
  check_columns(s);
  return softmax(s, 0);
}

Var affinity(const Var& s) {
  check_columns(s.value());
  return softmax(s, 0);
}

Tensor readout(const Tensor& w, const Tensor& mem_values) { return matmul(mem_values, w); }
Var readout(const Var& w, const Var& mem_values) { return matmul(mem_values, w); }

DecoderConfig DecoderConfig::from(const Config& cfg) {
  DecoderConfig c;
  c.seed = static_cast<std::uint64_t>(cfg.get_int("decoder.seed", static_cast<long long>(c.seed)));
  c.hidden = cfg.get_int("decoder.hidden", c.hidden);
  if (c.hidden < 1) throw ConfigError("decoder.hidden must be >= 1");
  return c;
}

DecoderParams DecoderParams::init(Index cv, const DecoderConfig& config) {
  DecoderParams params;
  params.config = config;
  auto rng1 = named_rng(config.seed, "decoder.conv1");
  params.weights["decoder.conv1"] = fan_in_normal({config.hidden, 2 * cv, 3, 3}, rng1);
  auto rng2 = named_rng(config.seed, "decoder.conv2");
  params.weights["decoder.conv2"] = fan_in_normal({1, config.hidden, 1, 1}, rng2);
  return params;
}

DecoderParams DecoderParams::from_archive(TensorArchive archive) {
  DecoderParams params;
  params.config.hidden = archive_get(archive, "decoder.conv1").dim(0);
  params.weights = std::move(archive);
  return params;
}

Var decode(const Var& readout_features, const Var& query_value, const VarMap& decoder) {
  if (readout_features.shape() != query_value.shape() || readout_features.value().rank() != 3) {
    throw DimensionError("decode expects matching [Cv x h x w] inputs, got " + to_string(readout_features.shape()) +
                         " and " + to_string(query_value.shape()));
  }
  const Var x = concat(readout_features, query_value, 0);
  const Var hidden = relu(conv(x, param(decoder, "decoder.conv1")));
  const Var logit = conv(hidden, param(decoder, "decoder.conv2"));  // [1 x h x w]
  const Var up = upsample_nearest(logit, kFeatureStride);
  return reshape(up, {up.value().dim(1), up.value().dim(2)});
}

Tensor decode(const Tensor& readout_features, const Tensor& query_value, const DecoderParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  return decode(tape.constant_ref(readout_features), tape.constant_ref(query_value), p).value();
}

ReadoutConfig ReadoutConfig::from(const Config& cfg) {
  ReadoutConfig c;
  c.topk = cfg.get_int("readout.topk", c.topk);
  if (c.topk < 1) throw ConfigError("readout.topk must be >= 1");
  return c;
}

BankVars lift_bank(Tape& tape, const FlatBank& flat) {
  BankVars out{tape.constant_ref(flat.keys), {}};
  for (const Tensor& v : flat.values) out.values.push_back(tape.constant_ref(v));
  return out;
}

SegmentationVars segment_frame(const BankVars& bank, const QueryEncoding& query, const VarMap& decoder, Index topk) {
  Tape& tape = bank.keys.tape();
  const Tensor& qk = query.key.value();
  const Index h = qk.dim(1);
  const Index w = qk.dim(2);
  const Var query_keys = reshape(query.key, {qk.dim(0), h * w});
  const Var s = similarity(bank.keys, query_keys);
  const Index k = std::min(topk, s.value().dim(0));
  const Var weights = affinity(topk_filter(s, k));

  SegmentationVars out;
  std::vector<Var> rows{tape.constant(Tensor({1, h * kFeatureStride, w * kFeatureStride}))};
  for (const Var& mem_values : bank.values) {
    const Var r = reshape(readout(weights, mem_values), {mem_values.value().dim(0), h, w});
    out.readouts.push_back(r);
    const Var logit = decode(r, query.value, decoder);
    rows.push_back(reshape(logit, {1, logit.value().dim(0), logit.value().dim(1)}));
  }
  out.logits = concat(std::span<const Var>(rows), 0);
  return out;
}

ObjectMask labels_from_logits(const Tensor& logits) {
  if (logits.rank() != 3) throw DimensionError("labels_from_logits expects [N x H x W]");
  const Index n = logits.dim(0);
  const Index hw = logits.dim(1) * logits.dim(2);
  ObjectMask mask(logits.dim(1), logits.dim(2), static_cast<int>(n));
  for (Index p = 0; p < hw; ++p) {
    double best = 0.0;
    std::uint8_t id = 0;
    for (Index i = 0; i < n; ++i) {
      if (logits[i * hw + p] > best) {
        best = logits[i * hw + p];
        id = static_cast<std::uint8_t>(i + 1);
      }
    }
    mask.labels[static_cast<std::size_t>(p)] = id;
  }
  return mask;
}

Segmentation segment_frame(const MemoryBank& bank, const Frame& frame, const EncoderParams& encoder,
                           const DecoderParams& decoder, const ReadoutConfig& config) {
  const FlatBank flat = flatten_bank(bank);
  Tape tape;
  const VarMap enc = lift(tape, encoder.weights, false);
  const VarMap dec = lift(tape, decoder.weights, false);
  const QueryEncoding query = encode_image(tape.constant_ref(frame.pixels), enc);
  const SegmentationVars seg = segment_frame(lift_bank(tape, flat), query, dec, config.topk);

  Segmentation out;
  const Tensor& all = seg.logits.value();
  out.logits = slice(all, 0, 1, all.dim(0) - 1);
  out.mask = labels_from_logits(out.logits);
  for (const Var& r : seg.readouts) out.readouts.push_back(r.value());
  return out;
}

}  // namespace rdevos
