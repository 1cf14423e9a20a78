#pragma once

#include <map>
#include <string>

#include "rdevos/autodiff.hpp"
#include "rdevos/serialize.hpp"

namespace rdevos {

/// Parameter tensors placed on a tape, keyed like the source archive.
using VarMap = std::map<std::string, Var>;

/// Places every archive entry on `tape` without copying. Trainable entries
/// become gradient leaves; the archive must outlive the tape.
inline VarMap lift(Tape& tape, const TensorArchive& weights, bool trainable) {
  VarMap out;
  for (const auto& [name, t] : weights) out.emplace(name, trainable ? tape.leaf_ref(t) : tape.constant_ref(t));
  return out;
}

inline const Var& param(const VarMap& vars, const std::string& name) {
  auto it = vars.find(name);
  if (it == vars.end()) throw std::runtime_error("missing parameter '" + name + "'");
  return it->second;
}

/// Gaussian N(0, 1/fan_in) weights, fan_in = product of all but the leading dim.
template <typename Rng>
Tensor fan_in_normal(Shape shape, Rng& rng, double gain = 1.0) {
  const Index fan_in = numel(shape) / shape.front();
  return Tensor::normal(std::move(shape), rng, gain / std::sqrt(static_cast<double>(fan_in)));
}

}  // namespace rdevos
