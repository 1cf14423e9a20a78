#pragma once

#include <array>
#include <optional>
#include <random>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/encoders.hpp"
#include "rdevos/memory.hpp"
#include "rdevos/readout.hpp"
#include "rdevos/sam.hpp"

namespace rdevos {

struct LossWeights {
  double mu = 10.0;     // unbiased guidance
  double gamma = 10.0;  // mask consistency
  double bootstrap_ratio = 1.0;

  static LossWeights from(const Config& cfg);
};

/// Bootstrapped cross-entropy: per-pixel softmax CE over {background, objects},
/// averaged over the ceil(ratio * H * W) highest-loss pixels.
/// logits [(N+1) x H x W].
Var bootstrapped_ce(const Var& logits, const ObjectMask& gt, double ratio);
double bootstrapped_ce(const Tensor& logits, const ObjectMask& gt, double ratio);

/// Channel-axis softmax at every location of a [C x ...] feature map.
Var feature_distribution(const Var& features);
Tensor feature_distribution(const Tensor& features);

/// sum_i KL(dist(teacher_i) || dist(student_i)), each KL averaged over
/// locations. Teacher readouts (STM bank) are detached.
Var unbiased_guidance_loss(std::span<const Var> stm_readouts, std::span<const Var> sam_readouts);

/// Disk structuring element membership dx^2 + dy^2 <= r^2.
Tensor dilate(const Tensor& binary, int radius);
Tensor erode(const Tensor& binary, int radius);

struct PerturbOptions {
  int radius_max = 5;
  /// Test hook: use this radius for every object instead of sampling.
  std::optional<int> forced_radius;

  static PerturbOptions from(const Config& cfg);
};

/// Per object: dilate or erode (even odds) with a disk of radius drawn from
/// {1..radius_max}. Overlaps go to the lower object id; vacated pixels
/// become background.
ObjectMask perturb_mask(const ObjectMask& mask, std::mt19937_64& rng, const PerturbOptions& opts = {});

/// Encodings entering the mask-consistency term.
struct ConsistencyTerms {
  MemoryEncoding clean;
  MemoryEncoding perturbed;
};

/// KL(k || k_perturbed) + sum_i KL(v_i || v_i_perturbed) on channel distributions.
Var mask_consistency_loss(const ConsistencyTerms& terms);
Var mask_consistency_loss(const Var& pixels, const ObjectMask& gt, const ObjectMask& perturbed, const VarMap& encoder);

/// Five-frame training clip; frame 1 (index 0) carries the reference mask.
struct TrainClip {
  std::vector<Frame> frames;
  std::vector<ObjectMask> gt_masks;

  void validate() const;
};

/// Everything total_loss reads, indexed by 0-based clip position.
struct ClipOutputs {
  std::array<std::optional<Var>, 5> stm_logits;
  std::array<std::optional<Var>, 5> sam_logits;
  std::array<std::vector<Var>, 5> stm_readouts;
  std::array<std::vector<Var>, 5> sam_readouts;
  std::optional<ConsistencyTerms> consistency;
};

struct LossTerms {
  Var seg;
  Var ug;
  Var mc;
  Var total;
};

/// STM-bank segmentation on clip frames 2 and 4, SAM-bank on 3 and 5
/// (1-based). L_seg = 1/2 sum of the four BCE terms; L_UG at frames 3 and 5;
/// L_MC once from frame 1. Total = L_seg + mu L_UG + gamma L_MC.
LossTerms total_loss(const TrainClip& clip, const ClipOutputs& outputs, const LossWeights& weights);

struct ModelParams {
  EncoderParams encoder;
  SamParams key_sam;
  SamParams value_sam;
  DecoderParams decoder;

  static ModelParams init(const EncoderConfig& enc, const SamConfig& sam, const DecoderConfig& dec);
};

struct TrainConfig {
  double lr = 1e-2;
  int steps = 200;
  std::uint64_t seed = 5;
  Index topk = 40;
  /// Global gradient-norm ceiling; 0 disables clipping.
  double clip_norm = 1.0;

  static TrainConfig from(const Config& cfg);
};

/// Runs both banks over the clip (theta = 1) and collects ClipOutputs.
/// `params` maps are lifted on the same tape.
struct ModelVars {
  VarMap encoder, key_sam, value_sam, decoder;
};

ClipOutputs forward_clip(Tape& tape, const TrainClip& clip, const ModelVars& vars, const ModelParams& params,
                         const ObjectMask& perturbed_first, Index topk);

struct StepResult {
  double seg = 0.0, ug = 0.0, mc = 0.0, total = 0.0;
  /// Norm of the full gradient before clipping (0 when lr == 0).
  double grad_norm = 0.0;
};

/// One gradient-descent step over every parameter group, with the update
/// rescaled when the global gradient norm exceeds clip_norm.
/// Throws std::runtime_error on a non-finite loss.
StepResult train_step(const TrainClip& clip, ModelParams& params, const LossWeights& weights,
                      const TrainConfig& config, const ObjectMask& perturbed_first);

}  // namespace rdevos
