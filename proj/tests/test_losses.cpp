#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rdevos/harness.hpp"
#include "rdevos/losses.hpp"
#include "support.hpp"

using namespace rdevos;
using test::random_tensor;

namespace {

using Inputs = std::vector<Tensor>;

void expect_grad(const char* name, const test::Builder& build, const std::function<Inputs(std::uint64_t)>& make,
                 std::vector<std::size_t> wrt = {}, Index coords = 0) {
  const test::GradCheck g = test::grad_suite(build, make, std::move(wrt), coords);
  INFO(std::string(name) << ": max rel " << g.max_rel << " (analytic " << g.worst_analytic << ", numeric "
                         << g.worst_numeric << ")");
  CHECK(g.max_rel < test::kGradTolerance);
}

ObjectMask random_mask(Index h, Index w, int objects, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, objects);
  ObjectMask m(h, w, objects);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(pick(rng));
  return m;
}

ObjectMask box(Index h, Index w, Index y0, Index x0, Index size) {
  ObjectMask m(h, w, 1);
  for (Index y = y0; y < y0 + size; ++y) {
    for (Index x = x0; x < x0 + size; ++x) m.at(y, x) = 1;
  }
  return m;
}

double naive_bce(const Tensor& logits, const ObjectMask& gt, double ratio) {
  const Index c = logits.dim(0), hw = gt.height * gt.width;
  std::vector<double> losses;
  for (Index p = 0; p < hw; ++p) {
    std::vector<double> l;
    for (Index i = 0; i < c; ++i) l.push_back(logits[i * hw + p]);
    losses.push_back(test::naive_softmax_ce(l, gt.labels[static_cast<std::size_t>(p)]));
  }
  std::sort(losses.begin(), losses.end(), std::greater<>());
  const auto keep = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(hw)));
  double total = 0.0;
  for (std::size_t i = 0; i < keep; ++i) total += losses[i];
  return total / static_cast<double>(keep);
}

// Tiny model: 16x16 frames, 1x1 features, a handful of channels.
ModelParams tiny_model() {
  EncoderConfig enc{7, 4, 4, {4, 4, 4, 4}};
  SamConfig sam;
  sam.pool = 1;
  return ModelParams::init(enc, sam, DecoderConfig{13, 4});
}

TrainClip tiny_clip(std::uint64_t seed) { return make_train_clip(seed, 16, 2, kTrainShapeScale); }

/// Every weight of `params` in a fixed group order, with names.
struct FlatParams {
  std::vector<std::pair<int, std::string>> names;  // group, weight
  Inputs tensors;
};

FlatParams flatten(const ModelParams& params) {
  FlatParams f;
  int group = 0;
  for (const TensorArchive* a :
       {&params.encoder.weights, &params.key_sam.weights, &params.value_sam.weights, &params.decoder.weights}) {
    for (const auto& [name, w] : *a) {
      f.names.emplace_back(group, name);
      f.tensors.push_back(w);
    }
    ++group;
  }
  return f;
}

ModelVars to_vars(const FlatParams& f, const std::vector<Var>& v) {
  ModelVars m;
  VarMap* maps[] = {&m.encoder, &m.key_sam, &m.value_sam, &m.decoder};
  for (std::size_t i = 0; i < f.names.size(); ++i) (*maps[f.names[i].first])[f.names[i].second] = v[i];
  return m;
}

}  // namespace

// ---------------------------------------------------------------- BCE

TEST_CASE("bootstrapped cross-entropy") {
  const ObjectMask gt = random_mask(4, 6, 2, 1);
  CHECK(std::abs(bootstrapped_ce(Tensor({3, 4, 6}), gt, 1.0) - std::log(3.0)) < 1e-10);

  Tensor perfect({3, 4, 6});
  for (Index p = 0; p < 24; ++p) perfect[gt.labels[static_cast<std::size_t>(p)] * 24 + p] = 200.0;
  CHECK(bootstrapped_ce(perfect, gt, 1.0) < 1e-80);

  for (std::uint64_t s = 0; s < 10; ++s) {
    const Tensor z = random_tensor({3, 4, 6}, 10 + s, -4, 4);
    const ObjectMask m = random_mask(4, 6, 2, 20 + s);
    for (double r : {1.0, 0.5, 0.25, 0.1}) {
      CHECK(std::abs(bootstrapped_ce(z, m, r) - naive_bce(z, m, r)) < 1e-12);
    }
    CHECK(bootstrapped_ce(z, m, 0.5) >= bootstrapped_ce(z, m, 1.0));
  }
  CHECK_THROWS_AS(bootstrapped_ce(Tensor({3, 4, 6}), gt, 0.0), DomainError);
  CHECK_THROWS_AS(bootstrapped_ce(Tensor({3, 4, 6}), gt, 1.5), DomainError);
  CHECK_THROWS_AS(bootstrapped_ce(Tensor({2, 4, 6}), gt, 1.0), DimensionError);
}

// ---------------------------------------------------------------- KL terms

TEST_CASE("feature distribution") {
  const Tensor x = random_tensor({5, 2, 3}, 2);
  const Tensor d = feature_distribution(x);
  CHECK(max_abs_diff(d, test::naive_channel_softmax(x)) < 1e-15);
  Tensor shifted = x;
  shifted.array() += 7.0;
  CHECK(max_abs_diff(feature_distribution(shifted), d) < 1e-15);
  CHECK(max_abs_diff(feature_distribution(Tensor({4, 1, 1})), Tensor::constant({4, 1, 1}, 0.25)) == 0.0);
}

TEST_CASE("unbiased guidance") {
  Tape tape;
  const Var a = tape.leaf(random_tensor({6, 2, 2}, 3));
  const Var b = tape.leaf(random_tensor({6, 2, 2}, 4));
  const std::vector<Var> same{a};
  CHECK(unbiased_guidance_loss(same, same).value().item() == 0.0);

  const std::vector<Var> stm{a}, sam{b};
  const Var ab = unbiased_guidance_loss(stm, sam);
  const Var ba = unbiased_guidance_loss(sam, stm);
  CHECK(ab.value().item() > 0.0);
  CHECK(ab.value().item() != doctest::Approx(ba.value().item()));
  const double want = test::naive_kl(feature_distribution(a.value()).reshaped({6, 4}),
                                     feature_distribution(b.value()).reshaped({6, 4}));
  CHECK(std::abs(ab.value().item() - want) < 1e-14);

  // Teacher side is detached.
  tape.backward(ab);
  CHECK(a.grad() == Tensor::zeros({6, 2, 2}));
  CHECK(b.grad().array().abs().maxCoeff() > 0.0);

  CHECK_THROWS_AS(unbiased_guidance_loss(std::vector<Var>{}, std::vector<Var>{}), DimensionError);
  const std::vector<Var> two{a, b};
  CHECK_THROWS_AS(unbiased_guidance_loss(two, sam), DimensionError);
}

TEST_CASE("unbiased guidance gradients, student side") {
  expect_grad(
      "ug",
      [](Tape&, const std::vector<Var>& v) {
        const std::vector<Var> stm{v[0], v[2]}, sam{v[1], v[3]};
        return unbiased_guidance_loss(stm, sam);
      },
      [](std::uint64_t s) {
        return Inputs{random_tensor({5, 2, 2}, s), random_tensor({5, 2, 2}, s + 1), random_tensor({5, 2, 2}, s + 2),
                      random_tensor({5, 2, 2}, s + 3)};
      },
      {1, 3});
}

// ---------------------------------------------------------------- perturbation

TEST_CASE("morphology with a disk element") {
  const Tensor dot = box(9, 9, 4, 4, 1).binary(1);
  CHECK(dilate(dot, 1).array().sum() == 5.0);
  CHECK(dilate(dot, 2).array().sum() == 13.0);
  CHECK(dilate(dot, 0) == dot);
  const Tensor sq = box(9, 9, 1, 1, 7).binary(1);
  CHECK(erode(sq, 1).array().sum() == 25.0);
  CHECK(erode(sq, 0) == sq);
  // Out-of-frame neighbours are ignored, so a full frame survives erosion.
  const Tensor full = Tensor::constant({1, 5, 5}, 1.0);
  CHECK(erode(full, 2) == full);
  for (int r = 1; r <= 5; ++r) {
    const Tensor d = dilate(sq, r), e = erode(sq, r);
    CHECK(((d.array() - sq.array()).minCoeff()) >= 0.0);
    CHECK(((sq.array() - e.array()).minCoeff()) >= 0.0);
  }
  CHECK_THROWS_AS(dilate(dot, -1), DomainError);
}

TEST_CASE("perturb_mask") {
  const ObjectMask m = box(32, 32, 8, 8, 12);
  PerturbOptions zero;
  zero.forced_radius = 0;
  std::mt19937_64 r0(1);
  CHECK(perturb_mask(m, r0, zero) == m);

  bool grew = false, shrank = false;
  for (std::uint64_t s = 0; s < 40; ++s) {
    std::mt19937_64 rng(s);
    const ObjectMask p = perturb_mask(m, rng);
    const Index before = m.pixel_count(1), after = p.pixel_count(1);
    CHECK(after != before);
    const Tensor pb = p.binary(1), mb = m.binary(1);
    if (after > before) {
      grew = true;
      CHECK((pb.array() - mb.array()).minCoeff() >= 0.0);
    } else {
      shrank = true;
      CHECK((mb.array() - pb.array()).minCoeff() >= 0.0);
    }
    std::mt19937_64 again(s);
    CHECK(perturb_mask(m, again) == p);
  }
  CHECK(grew);
  CHECK(shrank);

  // Two objects: overlaps go to the lower id.
  ObjectMask two(16, 16, 2);
  for (Index x = 0; x < 8; ++x) two.at(8, x) = 1;
  for (Index x = 8; x < 16; ++x) two.at(8, x) = 2;
  PerturbOptions big;
  big.forced_radius = 3;
  for (std::uint64_t s = 0; s < 10; ++s) {
    std::mt19937_64 rng(s);
    const ObjectMask p = perturb_mask(two, rng, big);
    p.validate();
    if (p.pixel_count(1) > 8 && p.pixel_count(2) > 8) CHECK(p.at(8, 8) == 1);
  }
}

// ---------------------------------------------------------------- mask consistency

TEST_CASE("mask consistency") {
  const ModelParams model = tiny_model();
  const TrainClip clip = tiny_clip(3);
  Tape tape;
  const VarMap enc = lift(tape, model.encoder.weights, false);
  const Var px = tape.constant(clip.frames[0].pixels);
  CHECK(mask_consistency_loss(px, clip.gt_masks[0], clip.gt_masks[0], enc).value().item() == 0.0);
  for (std::uint64_t s = 0; s < 5; ++s) {
    std::mt19937_64 rng(s);
    const ObjectMask p = perturb_mask(clip.gt_masks[0], rng);
    CHECK(mask_consistency_loss(px, clip.gt_masks[0], p, enc).value().item() >= 0.0);
  }
  CHECK_THROWS_AS(mask_consistency_loss(px, clip.gt_masks[0], ObjectMask(16, 16, 1), enc), DimensionError);
}

// ---------------------------------------------------------------- total loss

namespace {

/// ClipOutputs built straight from leaf tensors: logits [3 x 16 x 16] for
/// frames 2..5, readouts [4 x 1 x 1] for two objects at frames 3 and 5, and
/// consistency encodings.
struct SyntheticOutputs {
  static Inputs make(std::uint64_t s) {
    Inputs in;
    // Logits in [-0.5, 0.5]: no pixel is confidently right, so every BCE
    // gradient stays well above the finite-difference noise floor.
    for (int i = 0; i < 4; ++i) in.push_back(random_tensor({3, 16, 16}, s + i, -0.5, 0.5));
    for (int i = 0; i < 8; ++i) in.push_back(random_tensor({4, 1, 1}, s + 10 + i));
    for (int i = 0; i < 6; ++i) in.push_back(random_tensor({4, 1, 1}, s + 20 + i));
    return in;
  }
  static ClipOutputs build(const std::vector<Var>& v) {
    ClipOutputs o;
    o.stm_logits[1] = v[0];
    o.stm_logits[3] = v[1];
    o.sam_logits[2] = v[2];
    o.sam_logits[4] = v[3];
    o.stm_readouts[2] = {v[4], v[5]};
    o.sam_readouts[2] = {v[6], v[7]};
    o.stm_readouts[4] = {v[8], v[9]};
    o.sam_readouts[4] = {v[10], v[11]};
    o.consistency = ConsistencyTerms{MemoryEncoding{v[12], {v[13], v[14]}}, MemoryEncoding{v[15], {v[16], v[17]}}};
    return o;
  }
};

}  // namespace

TEST_CASE("total loss composition") {
  const TrainClip clip = tiny_clip(2);
  const Inputs in = SyntheticOutputs::make(100);
  Tape tape;
  std::vector<Var> v;
  for (const Tensor& t : in) v.push_back(tape.leaf(t));
  const ClipOutputs out = SyntheticOutputs::build(v);

  const LossTerms def = total_loss(clip, out, LossWeights{});
  CHECK(LossWeights{}.mu == 10.0);
  CHECK(LossWeights{}.gamma == 10.0);
  double seg = 0.0;
  seg += bootstrapped_ce(in[0], clip.gt_masks[1], 1.0) + bootstrapped_ce(in[1], clip.gt_masks[3], 1.0);
  seg += bootstrapped_ce(in[2], clip.gt_masks[2], 1.0) + bootstrapped_ce(in[3], clip.gt_masks[4], 1.0);
  CHECK(std::abs(def.seg.value().item() - 0.5 * seg) < 1e-12);
  CHECK(std::abs(def.total.value().item() -
                 (def.seg.value().item() + 10.0 * def.ug.value().item() + 10.0 * def.mc.value().item())) < 1e-12);

  const LossTerms seg_only = total_loss(clip, out, LossWeights{0.0, 0.0, 1.0});
  CHECK(seg_only.total.value().item() == seg_only.seg.value().item());

  // All terms vanish for perfect logits and matching distributions.
  std::vector<Var> p;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (i < 4) {
      const ObjectMask& gt = clip.gt_masks[i < 2 ? 1 + 2 * i : 2 + 2 * (i - 2)];
      Tensor z({3, 16, 16});
      for (Index q = 0; q < 256; ++q) z[gt.labels[static_cast<std::size_t>(q)] * 256 + q] = 200.0;
      p.push_back(tape.constant(z));
    } else {
      p.push_back(tape.constant(Tensor::constant({4, 1, 1}, 0.3)));
    }
  }
  CHECK(total_loss(clip, SyntheticOutputs::build(p), LossWeights{}).total.value().item() < 1e-80);

  ClipOutputs missing = out;
  missing.sam_logits[4].reset();
  CHECK_THROWS_AS(total_loss(clip, missing, LossWeights{}), ContractError);
  missing = out;
  missing.consistency.reset();
  CHECK_THROWS_AS(total_loss(clip, missing, LossWeights{}), ContractError);
  missing = out;
  missing.sam_readouts[2].clear();
  CHECK_THROWS_AS(total_loss(clip, missing, LossWeights{}), ContractError);
}

TEST_CASE("loss gradients") {
  const ObjectMask gt = random_mask(4, 4, 2, 9);
  for (double ratio : {1.0, 0.5}) {
    expect_grad(
        "bce", [&](Tape&, const std::vector<Var>& v) { return bootstrapped_ce(v[0], gt, ratio); },
        [](std::uint64_t s) { return Inputs{random_tensor({3, 4, 4}, s)}; });
  }
  // Eight feature locations, key and one object value on each side.
  expect_grad(
      "mc terms",
      [](Tape&, const std::vector<Var>& v) {
        return mask_consistency_loss(ConsistencyTerms{MemoryEncoding{v[0], {v[1]}}, MemoryEncoding{v[2], {v[3]}}});
      },
      [](std::uint64_t s) {
        return Inputs{random_tensor({4, 2, 4}, s), random_tensor({5, 2, 4}, s + 1), random_tensor({4, 2, 4}, s + 2),
                      random_tensor({5, 2, 4}, s + 3)};
      });
  const TrainClip clip = tiny_clip(2);
  expect_grad(
      "total",
      [&](Tape&, const std::vector<Var>& v) { return total_loss(clip, SyntheticOutputs::build(v), LossWeights{}).total; },
      SyntheticOutputs::make, {0, 1, 2, 3, 6, 7, 10, 11, 12, 13, 14, 15, 16, 17});  // STM readouts are detached
}

// Wiring check through forward_clip. The STM readouts enter L_UG detached,
// so finite differences only agree with the tape when mu = 0. Many weights
// here carry gradients of 1e-8 or less (the attention over a 1x1-feature
// bank is saturated), and central differences at h = 1e-5 on a loss of ~2
// have ~1e-10 of roundoff; below |g| = 1e-4 the gap is bounded absolutely.
TEST_CASE("end-to-end gradients over every parameter group") {
  const ModelParams model = tiny_model();
  const FlatParams flat = flatten(model);
  for (std::uint64_t seed : {1, 2}) {
    const TrainClip clip = tiny_clip(seed);
    std::mt19937_64 rng(seed);
    const ObjectMask perturbed = perturb_mask(clip.gt_masks[0], rng);
    auto build = [&](Tape& tape, const std::vector<Var>& v) {
      const ClipOutputs out = forward_clip(tape, clip, to_vars(flat, v), model, perturbed, 40);
      return total_loss(clip, out, LossWeights{0.0, 10.0, 1.0}).total;
    };
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : flat.tensors) vars.push_back(tape.leaf(t));
    tape.backward(build(tape, vars));

    int above_floor = 0;
    for (std::size_t i = 0; i < flat.tensors.size(); ++i) {
      const Tensor g = tape.grad(vars[i]);
      Index largest = 0;
      g.array().abs().maxCoeff(&largest);
      std::mt19937_64 pick(seed * 100 + i);
      std::uniform_int_distribution<Index> any(0, g.size() - 1);
      const std::vector<Index> coords{largest, any(pick), any(pick)};
      auto f = [&](const Tensor& x) {
        Tape t2;
        std::vector<Var> vs;
        for (std::size_t j = 0; j < flat.tensors.size(); ++j) vs.push_back(t2.constant(j == i ? x : flat.tensors[j]));
        return build(t2, vs).value().item();
      };
      const std::vector<double> numeric = finite_diff_grad_at(f, flat.tensors[i], coords);
      for (std::size_t c = 0; c < coords.size(); ++c) {
        const double a = g[coords[c]], n = numeric[c];
        INFO(flat.names[i].second << " [" << coords[c] << "] analytic " << a << " numeric " << n);
        if (std::max(std::abs(a), std::abs(n)) >= 1e-4) {
          ++above_floor;
          CHECK(relative_error(a, n) < test::kGradTolerance);
        } else {
          CHECK(std::abs(a - n) < 1e-9);
        }
      }
    }
    CHECK(above_floor >= 12);  // decoder, value heads and mask encoder at least
  }
}

// ---------------------------------------------------------------- training step

TEST_CASE("train_step") {
  const TrainClip clip = tiny_clip(5);
  const ObjectMask perturbed = clip.gt_masks[0];
  const ModelParams start = tiny_model();

  ModelParams frozen = start;
  TrainConfig eval;
  eval.lr = 0.0;
  const StepResult r0 = train_step(clip, frozen, LossWeights{}, eval, perturbed);
  CHECK(frozen.encoder.weights == start.encoder.weights);
  CHECK(frozen.decoder.weights == start.decoder.weights);
  CHECK(r0.grad_norm == 0.0);
  CHECK(r0.mc == 0.0);
  CHECK(std::isfinite(r0.total));

  TrainConfig cfg;
  cfg.clip_norm = 0.0;
  ModelParams a = start, b = start;
  const StepResult ra = train_step(clip, a, LossWeights{}, cfg, perturbed);
  const StepResult rb = train_step(clip, b, LossWeights{}, cfg, perturbed);
  CHECK(ra.total == rb.total);
  CHECK(a.value_sam.weights == b.value_sam.weights);
  CHECK(ra.grad_norm > 0.0);
  CHECK(ra.total == r0.total);

  // Plain step moves by lr * grad; a clipped step moves by lr * clip_norm.
  auto moved = [&](const ModelParams& m) {
    double sq = 0.0;
    const TensorArchive* now[] = {&m.encoder.weights, &m.key_sam.weights, &m.value_sam.weights, &m.decoder.weights};
    const TensorArchive* was[] = {&start.encoder.weights, &start.key_sam.weights, &start.value_sam.weights,
                                  &start.decoder.weights};
    for (int g = 0; g < 4; ++g) {
      for (const auto& [name, w] : *now[g]) sq += (w.array() - was[g]->at(name).array()).square().sum();
    }
    return std::sqrt(sq);
  };
  CHECK(moved(a) == doctest::Approx(cfg.lr * ra.grad_norm).epsilon(1e-9));
  ModelParams c = start;
  TrainConfig clipped;
  clipped.clip_norm = ra.grad_norm / 4.0;
  train_step(clip, c, LossWeights{}, clipped, perturbed);
  CHECK(moved(c) == doctest::Approx(clipped.lr * clipped.clip_norm).epsilon(1e-9));
}
