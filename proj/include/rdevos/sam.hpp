#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/params.hpp"

// Spatio-temporal aggregation: extract -> enhance -> squeeze, mapping a
// previous embedding and the latest one ([C x 1 x h x w] each) to a new
// embedding of the same shape.
namespace rdevos {

struct SamConfig {
  std::uint64_t seed = 11;
  /// Spatial max-pool kernel and stride applied before phi and g.
  int pool = 2;
  std::vector<int> aspp_rates{1, 2, 4};

  static SamConfig from(const Config& cfg);
};

/// Weights of one SAM instance with `channels` feature channels:
///   omega, phi, g  [C x C x 1 x 1 x 1]
///   aspp.r<rate>   [C x C x 1 x 3 x 3]  (dilated by <rate>)
///   aspp.merge     [C x (rates*C) x 1 x 1 x 1]
///   squeeze        [C x C x 2 x 3 x 3]
struct SamParams {
  SamConfig config;
  Index channels = 0;
  TensorArchive weights;

  /// `role` names the instance ("key" or "value") and picks its seed stream.
  static SamParams init(Index channels, const SamConfig& config, const std::string& role);
  static SamParams from_archive(TensorArchive archive, SamConfig config);

  /// Zeroes every ASPP branch weight (enhance becomes the identity).
  void zero_aspp();
};

std::string aspp_weight_name(int rate);

// Differentiable stages; `p` is lift(tape, params.weights, ...).
Var extract(const Var& prev, const Var& latest, const VarMap& p, int pool);
Var enhance(const Var& x_agg, const VarMap& p, const std::vector<int>& rates);
Var squeeze(const Var& x, const VarMap& p);
Var sam_forward(const Var& prev, const Var& latest, const VarMap& p, const SamConfig& config);

Tensor extract(const Tensor& prev, const Tensor& latest, const SamParams& params);
Tensor enhance(const Tensor& x_agg, const SamParams& params);
Tensor squeeze(const Tensor& x, const SamParams& params);
Tensor sam_forward(const Tensor& prev, const Tensor& latest, const SamParams& params);

}  // namespace rdevos
