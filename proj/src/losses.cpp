#include "rdevos/losses.hpp"

#include <cmath>

namespace rdevos {

LossWeights LossWeights::from(const Config& cfg) {
  LossWeights w;
  w.mu = cfg.get_double("loss.mu", w.mu);
  w.gamma = cfg.get_double("loss.gamma", w.gamma);
  w.bootstrap_ratio = cfg.get_double("loss.bootstrap_ratio", w.bootstrap_ratio);
  if (w.mu < 0 || w.gamma < 0) throw ConfigError("loss.mu and loss.gamma must be >= 0");
  if (!(w.bootstrap_ratio > 0 && w.bootstrap_ratio <= 1)) throw ConfigError("loss.bootstrap_ratio must lie in (0, 1]");
  return w;
}

// ---------------------------------------------------------------- BCE

Var bootstrapped_ce(const Var& logits, const ObjectMask& gt, double ratio) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw DomainError("bootstrap ratio must lie in (0, 1]");
  const Tensor& z = logits.value();
  if (z.rank() != 3 || z.dim(1) != gt.height || z.dim(2) != gt.width || z.dim(0) != gt.num_objects + 1) {
    throw DimensionError("bootstrapped_ce: logits " + to_string(z.shape()) + " do not match mask");
  }
  gt.validate();
  const std::vector<int> labels(gt.labels.begin(), gt.labels.end());
  const Var per_pixel = softmax_cross_entropy(logits, labels);
  const Index pixels = gt.height * gt.width;
  const auto keep = static_cast<Index>(std::ceil(ratio * static_cast<double>(pixels) - 1e-9));
  return topk_mean(per_pixel, std::clamp<Index>(keep, 1, pixels));
}

double bootstrapped_ce(const Tensor& logits, const ObjectMask& gt, double ratio) {
  Tape tape;
  return bootstrapped_ce(tape.constant_ref(logits), gt, ratio).value().item();
}

// ---------------------------------------------------------------- KL terms

Var feature_distribution(const Var& features) { return softmax(features, 0); }
Tensor feature_distribution(const Tensor& features) { return softmax(features, 0); }

Var unbiased_guidance_loss(std::span<const Var> stm_readouts, std::span<const Var> sam_readouts) {
  if (stm_readouts.size() != sam_readouts.size() || stm_readouts.empty()) {
    throw DimensionError("unbiased_guidance_loss needs matching non-empty readout lists");
  }
  std::optional<Var> total;
  for (std::size_t i = 0; i < stm_readouts.size(); ++i) {
    if (stm_readouts[i].shape() != sam_readouts[i].shape()) {
      throw DimensionError("unbiased_guidance_loss: readout shapes differ");
    }
    const Var teacher = feature_distribution(detach(stm_readouts[i]));
    const Var student = feature_distribution(sam_readouts[i]);
    const Var term = kl_divergence(teacher, student, 0);
    total = total ? add(*total, term) : term;
  }
  return *total;
}

Var mask_consistency_loss(const ConsistencyTerms& terms) {
  const auto& c = terms.clean;
  const auto& p = terms.perturbed;
  if (c.values.size() != p.values.size()) throw DimensionError("mask_consistency_loss: object counts differ");
  Var total = kl_divergence(feature_distribution(c.key), feature_distribution(p.key), 0);
  for (std::size_t i = 0; i < c.values.size(); ++i) {
    total = add(total, kl_divergence(feature_distribution(c.values[i]), feature_distribution(p.values[i]), 0));
  }
  return total;
}

Var mask_consistency_loss(const Var& pixels, const ObjectMask& gt, const ObjectMask& perturbed, const VarMap& encoder) {
  if (gt.height != perturbed.height || gt.width != perturbed.width || gt.num_objects != perturbed.num_objects) {
    throw DimensionError("mask_consistency_loss: masks differ in geometry");
  }
  return mask_consistency_loss(
      ConsistencyTerms{encode_mask(pixels, gt, encoder), encode_mask(pixels, perturbed, encoder)});
}

// ---------------------------------------------------------------- morphology

namespace {

Tensor morph(const Tensor& binary, int radius, bool dilation) {
  if (binary.rank() < 2) throw DimensionError("morphology expects [.. x H x W]");
  if (radius < 0) throw DomainError("structuring element radius must be >= 0");
  const Index h = binary.dim(-2);
  const Index w = binary.dim(-1);
  Tensor out(binary.shape());
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      bool hit = !dilation;
      for (int dy = -radius; dy <= radius; ++dy) {
        for (int dx = -radius; dx <= radius; ++dx) {
          if (dx * dx + dy * dy > radius * radius) continue;
          const Index yy = y + dy;
          const Index xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          const bool on = binary[yy * w + xx] > 0.5;
          if (dilation && on) hit = true;
          if (!dilation && !on) hit = false;
        }
      }
      out[y * w + x] = hit ? 1.0 : 0.0;
    }
  }
  return out;
}

}  // namespace

Tensor dilate(const Tensor& binary, int radius) { return morph(binary, radius, true); }
Tensor erode(const Tensor& binary, int radius) { return morph(binary, radius, false); }

PerturbOptions PerturbOptions::from(const Config& cfg) {
  PerturbOptions o;
  o.radius_max = static_cast<int>(cfg.get_int("perturb.radius_max", o.radius_max));
  if (o.radius_max < 0) throw ConfigError("perturb.radius_max must be >= 0");
  return o;
}

ObjectMask perturb_mask(const ObjectMask& mask, std::mt19937_64& rng, const PerturbOptions& opts) {
  mask.validate();
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> radius_dist(std::min(1, opts.radius_max), opts.radius_max);
  std::vector<Tensor> shapes;
  for (int id = 1; id <= mask.num_objects; ++id) {
    const bool grow = coin(rng);
    const int sampled = radius_dist(rng);
    const int radius = opts.forced_radius.value_or(sampled);
    const Tensor b = mask.binary(id);
    shapes.push_back(grow ? dilate(b, radius) : erode(b, radius));
  }
  ObjectMask out(mask.height, mask.width, mask.num_objects);
  for (std::size_t p = 0; p < out.labels.size(); ++p) {
    for (int id = 1; id <= mask.num_objects; ++id) {
      if (shapes[static_cast<std::size_t>(id - 1)][static_cast<Index>(p)] > 0.5) {
        out.labels[p] = static_cast<std::uint8_t>(id);
        break;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- objective

void TrainClip::validate() const {
  if (frames.size() != 5 || gt_masks.size() != 5) throw ContractError("a training clip holds exactly 5 frames");
  for (std::size_t i = 0; i < 5; ++i) {
    check_frame(frames[i].pixels);
    if (gt_masks[i].height != frames[i].height() || gt_masks[i].width != frames[i].width() ||
        gt_masks[i].num_objects != gt_masks[0].num_objects) {
      throw DimensionError("training clip masks inconsistent with frames");
    }
  }
}

LossTerms total_loss(const TrainClip& clip, const ClipOutputs& outputs, const LossWeights& weights) {
  clip.validate();
  auto require = [](const std::optional<Var>& v, const char* what, int frame) -> const Var& {
    if (!v) throw ContractError(std::string("missing ") + what + " output for clip frame " + std::to_string(frame + 1));
    return *v;
  };
  if (!outputs.consistency) throw ContractError("missing mask-consistency encodings");

  LossTerms terms;
  std::optional<Var> seg;
  for (int t : {1, 3}) {
    const Var l = bootstrapped_ce(require(outputs.stm_logits[t], "STM logits", t), clip.gt_masks[t], weights.bootstrap_ratio);
    seg = seg ? add(*seg, l) : l;
  }
  for (int t : {2, 4}) {
    const Var l = bootstrapped_ce(require(outputs.sam_logits[t], "SAM logits", t), clip.gt_masks[t], weights.bootstrap_ratio);
    seg = add(*seg, l);
  }
  terms.seg = scale(*seg, 0.5);

  std::optional<Var> ug;
  for (int t : {2, 4}) {
    if (outputs.stm_readouts[t].empty() || outputs.sam_readouts[t].empty()) {
      throw ContractError("missing readouts for clip frame " + std::to_string(t + 1));
    }
    const Var l = unbiased_guidance_loss(outputs.stm_readouts[t], outputs.sam_readouts[t]);
    ug = ug ? add(*ug, l) : l;
  }
  terms.ug = *ug;
  terms.mc = mask_consistency_loss(*outputs.consistency);
  terms.total = add(add(terms.seg, scale(terms.ug, weights.mu)), scale(terms.mc, weights.gamma));
  return terms;
}

ModelParams ModelParams::init(const EncoderConfig& enc, const SamConfig& sam, const DecoderConfig& dec) {
  return ModelParams{EncoderParams::init(enc), SamParams::init(enc.ck, sam, "key"), SamParams::init(enc.cv, sam, "value"),
                     DecoderParams::init(enc.cv, dec)};
}

TrainConfig TrainConfig::from(const Config& cfg) {
  TrainConfig c;
  c.lr = cfg.get_double("train.lr", c.lr);
  c.steps = static_cast<int>(cfg.get_int("train.steps", c.steps));
  c.seed = static_cast<std::uint64_t>(cfg.get_int("train.seed", static_cast<long long>(c.seed)));
  c.topk = cfg.get_int("readout.topk", c.topk);
  c.clip_norm = cfg.get_double("train.clip_norm", c.clip_norm);
  if (c.lr < 0 || c.steps < 0) throw ConfigError("train.lr and train.steps must be >= 0");
  return c;
}

namespace {

struct SlotVars {
  Var key;                  // [Ck x h x w]
  std::vector<Var> values;  // [Cv x h x w]
};

BankVars flatten_slots(const std::vector<SlotVars>& slots) {
  auto columns = [](const Var& v) {
    const Shape& s = v.shape();
    return reshape(v, {s[0], s[1] * s[2]});
  };
  std::vector<Var> keys;
  for (const auto& s : slots) keys.push_back(columns(s.key));
  BankVars out{concat(std::span<const Var>(keys), 1), {}};
  for (std::size_t i = 0; i < slots.front().values.size(); ++i) {
    std::vector<Var> vals;
    for (const auto& s : slots) vals.push_back(columns(s.values[i]));
    out.values.push_back(concat(std::span<const Var>(vals), 1));
  }
  return out;
}

Var sam_step(const Var& prev, const Var& latest, const VarMap& p, const SamConfig& cfg) {
  const Shape& s = prev.shape();
  const Shape timed{s[0], 1, s[1], s[2]};
  return reshape(sam_forward(reshape(prev, timed), reshape(latest, timed), p, cfg), s);
}

}  // namespace

ClipOutputs forward_clip(Tape& tape, const TrainClip& clip, const ModelVars& vars, const ModelParams& params,
                         const ObjectMask& perturbed_first, Index topk) {
  clip.validate();
  ClipOutputs out;
  const Var first = tape.constant_ref(clip.frames[0].pixels);
  const MemoryEncoding ref = encode_mask(first, clip.gt_masks[0], vars.encoder);
  out.consistency = ConsistencyTerms{ref, encode_mask(first, perturbed_first, vars.encoder)};

  const SlotVars gt{ref.key, ref.values};
  std::vector<SlotVars> stm_slots{gt};
  SlotVars latest = gt;
  SlotVars rde = gt;

  for (int t = 1; t < 5; ++t) {
    const Var pixels = tape.constant_ref(clip.frames[static_cast<std::size_t>(t)].pixels);
    const QueryEncoding query = encode_image(pixels, vars.encoder);
    const bool sam_frame = t % 2 == 0;  // clip frames 3 and 5

    const SegmentationVars stm = segment_frame(flatten_slots(stm_slots), query, vars.decoder, topk);
    out.stm_readouts[static_cast<std::size_t>(t)] = stm.readouts;
    Var chosen = stm.logits;
    if (sam_frame) {
      const SegmentationVars sam = segment_frame(flatten_slots({gt, gt, latest, rde}), query, vars.decoder, topk);
      out.sam_logits[static_cast<std::size_t>(t)] = sam.logits;
      out.sam_readouts[static_cast<std::size_t>(t)] = sam.readouts;
      chosen = sam.logits;
    } else {
      out.stm_logits[static_cast<std::size_t>(t)] = stm.logits;
    }
    if (t == 4) break;

    const Tensor& all = chosen.value();
    const ObjectMask predicted = labels_from_logits(slice(all, 0, 1, all.dim(0) - 1));
    const MemoryEncoding enc = encode_mask(pixels, predicted, vars.encoder);
    latest = SlotVars{enc.key, enc.values};
    stm_slots.push_back(latest);
    SlotVars next{sam_step(rde.key, latest.key, vars.key_sam, params.key_sam.config), {}};
    for (std::size_t i = 0; i < rde.values.size(); ++i) {
      next.values.push_back(sam_step(rde.values[i], latest.values[i], vars.value_sam, params.value_sam.config));
    }
    rde = std::move(next);
  }
  return out;
}

StepResult train_step(const TrainClip& clip, ModelParams& params, const LossWeights& weights,
                      const TrainConfig& config, const ObjectMask& perturbed_first) {
  StepResult result;
  Tape tape;
  const ModelVars vars{lift(tape, params.encoder.weights, true), lift(tape, params.key_sam.weights, true),
                       lift(tape, params.value_sam.weights, true), lift(tape, params.decoder.weights, true)};
  const ClipOutputs outputs = forward_clip(tape, clip, vars, params, perturbed_first, config.topk);
  const LossTerms terms = total_loss(clip, outputs, weights);
  result.seg = terms.seg.value().item();
  result.ug = terms.ug.value().item();
  result.mc = terms.mc.value().item();
  result.total = terms.total.value().item();
  if (!std::isfinite(result.total)) {
    throw std::runtime_error("non-finite training loss (seg " + std::to_string(result.seg) + ", ug " +
                             std::to_string(result.ug) + ", mc " + std::to_string(result.mc) + ")");
  }
  if (config.lr == 0.0) return result;
  tape.backward(terms.total);
  double sq_norm = 0.0;
  for (const VarMap* map : {&vars.encoder, &vars.key_sam, &vars.value_sam, &vars.decoder}) {
    for (const auto& entry : *map) sq_norm += tape.grad(entry.second).array().square().sum();
  }
  result.grad_norm = std::sqrt(sq_norm);
  const double step = config.clip_norm > 0.0 && result.grad_norm > config.clip_norm
                          ? config.lr * config.clip_norm / result.grad_norm
                          : config.lr;
  auto descend = [&](const VarMap& map, TensorArchive& weights_out) {
    for (const auto& [name, var] : map) {
      weights_out.at(name).array() -= step * tape.grad(var).array();
    }
  };
  descend(vars.encoder, params.encoder.weights);
  descend(vars.key_sam, params.key_sam.weights);
  descend(vars.value_sam, params.value_sam.weights);
  descend(vars.decoder, params.decoder.weights);
  return result;
}

}  // namespace rdevos
