#include "rdevos/sam.hpp"

#include "rdevos/rng.hpp"

namespace rdevos {

SamConfig SamConfig::from(const Config& cfg) {
  SamConfig c;
  c.seed = static_cast<std::uint64_t>(cfg.get_int("sam.seed", static_cast<long long>(c.seed)));
  c.pool = static_cast<int>(cfg.get_int("sam.pool", c.pool));
  c.aspp_rates = cfg.get_int_list("sam.aspp_rates", c.aspp_rates);
  if (c.pool < 1) throw ConfigError("sam.pool must be >= 1");
  for (int r : c.aspp_rates) {
    if (r < 1) throw ConfigError("sam.aspp_rates entries must be >= 1");
  }
  return c;
}

std::string aspp_weight_name(int rate) { return "aspp.r" + std::to_string(rate); }

SamParams SamParams::init(Index channels, const SamConfig& config, const std::string& role) {
  SamParams params;
  params.config = config;
  params.channels = channels;
  const Index c = channels;
  auto& w = params.weights;
  auto make = [&](const std::string& name, Shape shape, double gain) {
    auto rng = named_rng(config.seed, "sam." + role + "." + name);
    w[name] = fan_in_normal(std::move(shape), rng, gain);
  };
  // omega/phi get a reduced gain: extract is cubic in its input, and a
  // recurrent application must not blow up over long streams.
  make("omega", {c, c, 1, 1, 1}, 0.25);
  make("phi", {c, c, 1, 1, 1}, 0.25);
  make("g", {c, c, 1, 1, 1}, 1.0);
  for (int r : config.aspp_rates) make(aspp_weight_name(r), {c, c, 1, 3, 3}, 0.5);
  make("aspp.merge", {c, static_cast<Index>(config.aspp_rates.size()) * c, 1, 1, 1}, 0.5);
  make("squeeze", {c, c, 2, 3, 3}, 1.0);
  return params;
}

SamParams SamParams::from_archive(TensorArchive archive, SamConfig config) {
  SamParams params;
  params.channels = archive_get(archive, "omega").dim(0);
  params.config = std::move(config);
  params.weights = std::move(archive);
  return params;
}

void SamParams::zero_aspp() {
  for (int r : config.aspp_rates) weights.at(aspp_weight_name(r)).array().setZero();
}

namespace {

void check_pair(const Tensor& prev, const Tensor& latest) {
  if (prev.rank() != 4 || prev.dim(1) != 1) {
    throw DimensionError("SAM input must be [C x 1 x h x w], got " + to_string(prev.shape()));
  }
  if (prev.shape() != latest.shape()) {
    throw DimensionError("SAM inputs differ: " + to_string(prev.shape()) + " vs " + to_string(latest.shape()));
  }
}

}  // namespace

Var extract(const Var& prev, const Var& latest, const VarMap& p, int pool) {
  check_pair(prev.value(), latest.value());
  const Index c = prev.value().dim(0);
  const Var x = concat(prev, latest, 1);  // [C x 2 x h x w]
  const Index n = x.value().size() / c;
  const Var pooled = maxpool2d(x, pool, pool);
  const Index m = pooled.value().size() / c;

  const Var omega = reshape(conv(x, param(p, "omega")), {c, n});
  const Var phi = reshape(conv(pooled, param(p, "phi")), {c, m});
  const Var g = reshape(conv(pooled, param(p, "g")), {c, m});

  // x_agg(p) = 1/M * sum_q <omega(p), phi(q)> g(q), with M the pooled position count.
  const Var affinity = matmul(transpose(phi), omega);  // [M x N]
  const Var agg = scale(matmul(g, affinity), 1.0 / static_cast<double>(m));
  return reshape(agg, x.shape());
}

Var enhance(const Var& x_agg, const VarMap& p, const std::vector<int>& rates) {
  if (x_agg.value().rank() != 4) throw DimensionError("enhance expects [C x T x h x w], got " + to_string(x_agg.shape()));
  std::vector<Var> branches;
  branches.reserve(rates.size());
  for (int r : rates) branches.push_back(conv(x_agg, param(p, aspp_weight_name(r)), {.stride = 1, .dilation = r}));
  const Var merged = conv(concat(std::span<const Var>(branches), 0), param(p, "aspp.merge"));
  return add(x_agg, merged);
}

Var squeeze(const Var& x, const VarMap& p) {
  if (x.value().rank() != 4 || x.value().dim(1) != 2) {
    throw ContractError("squeeze expects a time dimension of 2, got " + to_string(x.shape()));
  }
  return conv(x, param(p, "squeeze"));
}

Var sam_forward(const Var& prev, const Var& latest, const VarMap& p, const SamConfig& config) {
  return squeeze(enhance(extract(prev, latest, p, config.pool), p, config.aspp_rates), p);
}

Tensor extract(const Tensor& prev, const Tensor& latest, const SamParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  return extract(tape.constant_ref(prev), tape.constant_ref(latest), p, params.config.pool).value();
}

Tensor enhance(const Tensor& x_agg, const SamParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  return enhance(tape.constant_ref(x_agg), p, params.config.aspp_rates).value();
}

Tensor squeeze(const Tensor& x, const SamParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  return squeeze(tape.constant_ref(x), p).value();
}

Tensor sam_forward(const Tensor& prev, const Tensor& latest, const SamParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  return sam_forward(tape.constant_ref(prev), tape.constant_ref(latest), p, params.config).value();
}

}  // namespace rdevos
