#pragma once

#include <cstdint>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/encoders.hpp"
#include "rdevos/memory.hpp"

namespace rdevos {

/// S(p, q) = -||k_m(p) - k_q(q)||^2 via 2 k_m^T k_q - |k_m|^2 - |k_q|^2.
/// mem_keys [Ck x N_mem], query_keys [Ck x N_query] -> [N_mem x N_query].
Tensor similarity(const Tensor& mem_keys, const Tensor& query_keys);
Var similarity(const Var& mem_keys, const Var& query_keys);

/// Keeps the k largest entries of each column (lower row index wins ties);
/// the rest become -inf. k == N_mem returns S unchanged.
Tensor topk_filter(const Tensor& s, Index k);
Var topk_filter(const Var& s, Index k);

/// Column-wise softmax over memory positions. Every column needs a finite entry.
Tensor affinity(const Tensor& s);
Var affinity(const Var& s);

/// mem_values [Cv x N_mem] times W [N_mem x N_query].
Tensor readout(const Tensor& w, const Tensor& mem_values);
Var readout(const Var& w, const Var& mem_values);

struct DecoderConfig {
  std::uint64_t seed = 13;
  Index hidden = 16;

  static DecoderConfig from(const Config& cfg);
};

/// Two-layer head: 3x3 conv [hidden x 2Cv] + relu, 1x1 conv to one logit,
/// then nearest x16 upsampling.
struct DecoderParams {
  DecoderConfig config;
  TensorArchive weights;

  static DecoderParams init(Index cv, const DecoderConfig& config);
  static DecoderParams from_archive(TensorArchive archive);
};

/// Logit map [H x W] for one object.
Var decode(const Var& readout_features, const Var& query_value, const VarMap& decoder);
Tensor decode(const Tensor& readout_features, const Tensor& query_value, const DecoderParams& params);

struct ReadoutConfig {
  /// Clamped to the bank's position count at run time.
  Index topk = 40;

  static ReadoutConfig from(const Config& cfg);
};

/// Flattened bank on a tape.
struct BankVars {
  Var keys;                 // [Ck x N_mem]
  std::vector<Var> values;  // per object [Cv x N_mem]
};

BankVars lift_bank(Tape& tape, const FlatBank& flat);

struct SegmentationVars {
  Var logits;                 // [(N+1) x H x W]; row 0 is the fixed background logit 0
  std::vector<Var> readouts;  // per object [Cv x h x w]
};

SegmentationVars segment_frame(const BankVars& bank, const QueryEncoding& query, const VarMap& decoder, Index topk);

/// Per-pixel argmax over {background = 0, object logits}; ties go to the lower id.
/// `logits` is [N x H x W] (objects only).
ObjectMask labels_from_logits(const Tensor& logits);

struct Segmentation {
  ObjectMask mask;
  Tensor logits;  // [N x H x W], objects only
  std::vector<Tensor> readouts;
};

Segmentation segment_frame(const MemoryBank& bank, const Frame& frame, const EncoderParams& encoder,
                           const DecoderParams& decoder, const ReadoutConfig& config);

}  // namespace rdevos
