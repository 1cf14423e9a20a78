#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "rdevos/encoders.hpp"
#include "rdevos/memory.hpp"
#include "rdevos/sam.hpp"
#include "rdevos/serialize.hpp"
#include "support.hpp"

using namespace rdevos;
using test::random_tensor;

namespace {

Frame random_frame(Index h, Index w, std::uint64_t seed) { return Frame{random_tensor({3, h, w}, seed, 0.0, 1.0), 0}; }

ObjectMask two_boxes(Index h, Index w) {
  ObjectMask m(h, w, 2);
  for (Index y = 2; y < h / 2; ++y) {
    for (Index x = 2; x < w / 2; ++x) m.at(y, x) = 1;
  }
  for (Index y = h / 2; y < h - 2; ++y) {
    for (Index x = w / 2; x < w - 2; ++x) m.at(y, x) = 2;
  }
  return m;
}

EncoderConfig small_encoder() {
  EncoderConfig c;
  c.ck = 8;
  c.cv = 12;
  c.widths = {4, 4, 6, 6};
  return c;
}

// Identity 1x1x1 weights for a C-channel SAM.
Tensor eye5(Index c) {
  Tensor w({c, c, 1, 1, 1});
  for (Index i = 0; i < c; ++i) w[i * c + i] = 1.0;
  return w;
}

/// x_agg(p) = 1/M sum_q <omega(p), phi(q)> g(q) with no pooling, as loops.
Tensor naive_extract(const Tensor& prev, const Tensor& latest, const SamParams& params) {
  const Index c = prev.dim(0), hw = prev.dim(2) * prev.dim(3), n = 2 * hw;
  auto at = [&](Index ch, Index p) { return p < hw ? prev[ch * hw + p] : latest[ch * hw + p - hw]; };
  auto proj = [&](const char* name) {
    const Tensor& w = params.weights.at(name);
    Tensor out({c, n});
    for (Index o = 0; o < c; ++o) {
      for (Index p = 0; p < n; ++p) {
        double acc = 0.0;
        for (Index i = 0; i < c; ++i) acc += w[o * c + i] * at(i, p);
        out[o * n + p] = acc;
      }
    }
    return out;
  };
  const Tensor om = proj("omega"), ph = proj("phi"), g = proj("g");
  Tensor out({c, 2, prev.dim(2), prev.dim(3)});
  for (Index p = 0; p < n; ++p) {
    for (Index ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (Index q = 0; q < n; ++q) {
        double dot = 0.0;
        for (Index i = 0; i < c; ++i) dot += om[i * n + p] * ph[i * n + q];
        acc += dot * g[ch * n + q];
      }
      out[ch * n + p] = acc / static_cast<double>(n);
    }
  }
  return out;
}

SamConfig no_pool() {
  SamConfig c;
  c.pool = 1;
  return c;
}

MemorySlot random_slot(Index ck, Index cv, int objects, Index h, Index w, std::uint64_t seed, Origin origin) {
  MemorySlot s;
  s.key.k = random_tensor({ck, h, w}, seed);
  for (int i = 0; i < objects; ++i) s.values.v.push_back(random_tensor({cv, h, w}, seed + 100 + i));
  s.origin = origin;
  return s;
}

}  // namespace

// ---------------------------------------------------------------- encoders

TEST_CASE("encoders: shapes and determinism") {
  const EncoderParams p = EncoderParams::init(EncoderConfig{});
  const Frame f = random_frame(32, 32, 1);
  const ImageEncoding a = encode_image(f, p);
  const ImageEncoding b = encode_image(f, p);
  CHECK(a.key.k.shape() == Shape{64, 2, 2});
  CHECK(a.query_value.shape() == Shape{512, 2, 2});
  CHECK(a.key.k == b.key.k);
  CHECK(a.query_value == b.query_value);
  CHECK(EncoderParams::init(EncoderConfig{}).weights == p.weights);

  Frame g = f;
  g.pixels[5 * 32 + 7] += 0.25;
  CHECK_FALSE(encode_image(g, p).key.k == a.key.k);

  CHECK_THROWS_AS(encode_image(random_frame(24, 32, 2), p), DimensionError);
}

TEST_CASE("encoders: mask encoding is target-specific, the key is not") {
  const EncoderParams p = EncoderParams::init(EncoderConfig{});
  const Frame f = random_frame(32, 32, 3);
  const ObjectMask m = two_boxes(32, 32);
  const MaskEncoding e = encode_mask(f, m, p);
  CHECK(e.values.num_objects() == 2);
  CHECK(e.key.k == encode_image(f, p).key.k);
  CHECK(encode_mask(f, m, p).values.v[1] == e.values.v[1]);

  ObjectMask swapped = m;
  for (auto& l : swapped.labels) l = l == 1 ? 2 : l == 2 ? 1 : 0;
  const MaskEncoding s = encode_mask(f, swapped, p);
  CHECK(s.key.k == e.key.k);
  CHECK(s.values.v[0] == e.values.v[1]);
  CHECK(s.values.v[1] == e.values.v[0]);

  ObjectMask bad = m;
  bad.labels[0] = 3;
  CHECK_THROWS_AS(encode_mask(f, bad, p), DomainError);
}

TEST_CASE("encoders: bounded outputs on [0,1] inputs") {
  const EncoderParams p = EncoderParams::init(EncoderConfig{});
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Frame f = random_frame(64, 64, 10 + s);
    const MaskEncoding e = encode_mask(f, two_boxes(64, 64), p);
    CHECK(e.key.k.array().abs().maxCoeff() < 50.0);
    for (const Tensor& v : e.values.v) CHECK(v.array().abs().maxCoeff() < 50.0);
  }
}

TEST_CASE("encoders: archive round trip") {
  const EncoderParams p = EncoderParams::init(small_encoder());
  std::stringstream ss;
  write_archive(ss, p.to_archive());
  const EncoderParams q = EncoderParams::from_archive(read_archive(ss));
  CHECK(q.weights == p.weights);
  CHECK(q.config.ck == 8);
  CHECK(q.config.cv == 12);
}

TEST_CASE("encoders: gradients reach every weight") {
  const EncoderParams p = EncoderParams::init(small_encoder());
  const Frame f = random_frame(16, 32, 4);
  const ObjectMask m = two_boxes(16, 32);
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, w] : p.weights) {
    names.push_back(name);
    inputs.push_back(w);
  }
  auto build = [&](Tape& tape, const std::vector<Var>& v) {
    VarMap vars;
    for (std::size_t i = 0; i < names.size(); ++i) vars[names[i]] = v[i];
    const Var px = tape.constant(f.pixels);
    const QueryEncoding q = encode_image(px, vars);
    const MemoryEncoding e = encode_mask(px, m, vars);
    Var loss = add(test::project(q.key, 1), test::project(q.value, 2));
    for (std::size_t i = 0; i < e.values.size(); ++i) loss = add(loss, test::project(e.values[i], 3 + i));
    return loss;
  };
  const test::GradCheck g = test::grad_check(build, inputs, {}, 12, 5);
  INFO("max rel " << g.max_rel);
  CHECK(g.max_rel < test::kGradTolerance);
}

// ---------------------------------------------------------------- SAM

TEST_CASE("sam: extract equals the all-pairs oracle without pooling") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Index c = 3 + static_cast<Index>(s % 3);
    const Index h = 2 + static_cast<Index>(s % 5), w = 6 - static_cast<Index>(s % 4);
    const SamParams p = SamParams::init(c, no_pool(), "key");
    const Tensor prev = random_tensor({c, 1, h, w}, 20 + s);
    const Tensor latest = random_tensor({c, 1, h, w}, 40 + s);
    const Tensor got = extract(prev, latest, p);
    REQUIRE(got.shape() == Shape{c, 2, h, w});
    CHECK(max_abs_diff(got, naive_extract(prev, latest, p)) < 1e-10);
  }
}

TEST_CASE("sam: extract closed form on a constant field") {
  const Index c = 4;
  SamConfig cfg;  // pool 2
  SamParams p = SamParams::init(c, cfg, "key");
  for (const char* n : {"omega", "phi", "g"}) p.weights[n] = eye5(c);
  const double v = 0.7;
  const Tensor x = Tensor::constant({c, 1, 4, 4}, v);
  const Tensor agg = extract(x, x, p);
  for (Index i = 0; i < agg.size(); ++i) CHECK(agg[i] == doctest::Approx(c * v * v * v).epsilon(1e-12));
}

TEST_CASE("sam: enhance is a residual ASPP") {
  const Index c = 3;
  SamParams p = SamParams::init(c, SamConfig{}, "value");
  const Tensor x = random_tensor({c, 2, 6, 6}, 50);
  const Tensor y = enhance(x, p);
  CHECK(y.shape() == x.shape());

  // Hand-composed oracle: dilated branches per time slice, 1x1 merge, residual.
  const auto& rates = p.config.aspp_rates;
  const Tensor& merge = p.weights.at("aspp.merge");
  Tensor want = x;
  for (Index t = 0; t < 2; ++t) {
    Tensor slice2d({c, 6, 6});
    for (Index ch = 0; ch < c; ++ch) {
      for (Index i = 0; i < 36; ++i) slice2d[ch * 36 + i] = x[(ch * 2 + t) * 36 + i];
    }
    std::vector<Tensor> branches;
    for (int r : rates) {
      branches.push_back(test::naive_conv2d(slice2d, p.weights.at(aspp_weight_name(r)).reshaped({c, c, 3, 3}), 1, r));
    }
    for (Index o = 0; o < c; ++o) {
      for (Index i = 0; i < 36; ++i) {
        double acc = 0.0;
        for (std::size_t b = 0; b < branches.size(); ++b) {
          for (Index ci = 0; ci < c; ++ci) {
            acc += merge[o * static_cast<Index>(rates.size()) * c + static_cast<Index>(b) * c + ci] *
                   branches[b][ci * 36 + i];
          }
        }
        want[(o * 2 + t) * 36 + i] += acc;
      }
    }
  }
  CHECK(max_abs_diff(y, want) < 1e-12);

  p.zero_aspp();
  CHECK(enhance(x, p) == x);
}

TEST_CASE("sam: squeeze maps T=2 to T=1") {
  for (const Shape& s : {Shape{3, 2, 4, 4}, Shape{5, 2, 1, 1}, Shape{2, 2, 3, 5}, Shape{4, 2, 6, 2}}) {
    const SamParams p = SamParams::init(s[0], SamConfig{}, "key");
    const Tensor x = random_tensor(s, 60 + s[2]);
    const Tensor y = squeeze(x, p);
    CHECK(y.shape() == Shape{s[0], 1, s[2], s[3]});
    CHECK(max_abs_diff(y, test::naive_conv3d(x, p.weights.at("squeeze"))) < 1e-12);
  }
  const SamParams p = SamParams::init(3, SamConfig{}, "key");
  CHECK_THROWS_AS(squeeze(random_tensor({3, 3, 4, 4}, 1), p), ContractError);
  CHECK_THROWS_AS(squeeze(random_tensor({3, 1, 4, 4}, 1), p), ContractError);
}

TEST_CASE("sam: averaging squeeze of equal slices is a spatial conv") {
  const Index c = 3;
  SamParams p = SamParams::init(c, SamConfig{}, "key");
  const Tensor k2 = random_tensor({c, c, 3, 3}, 70);
  Tensor w({c, c, 2, 3, 3});
  for (Index o = 0; o < c; ++o) {
    for (Index i = 0; i < c; ++i) {
      for (Index t = 0; t < 2; ++t) {
        for (Index j = 0; j < 9; ++j) w[((o * c + i) * 2 + t) * 9 + j] = 0.5 * k2[(o * c + i) * 9 + j];
      }
    }
  }
  p.weights["squeeze"] = w;
  const Tensor s = random_tensor({c, 4, 4}, 71);
  const Tensor x = concat(s.reshaped({c, 1, 4, 4}), s.reshaped({c, 1, 4, 4}), 1);
  CHECK(max_abs_diff(squeeze(x, p).reshaped({c, 4, 4}), test::naive_conv2d(s, k2)) < 1e-12);
}

TEST_CASE("sam: forward shape, determinism, bounded inputs stay finite") {
  const SamParams p = SamParams::init(8, SamConfig{}, "value");
  const Tensor prev = random_tensor({8, 1, 4, 4}, 80, -10, 10);
  const Tensor latest = random_tensor({8, 1, 4, 4}, 81, -10, 10);
  const Tensor y = sam_forward(prev, latest, p);
  CHECK(y.shape() == prev.shape());
  CHECK(y.all_finite());
  CHECK(sam_forward(prev, latest, p) == y);
  CHECK(SamParams::init(8, SamConfig{}, "value").weights == p.weights);
  CHECK_FALSE(SamParams::init(8, SamConfig{}, "key").weights == p.weights);
}

TEST_CASE("sam: gradients w.r.t. inputs on 4x4 maps") {
  const SamParams p = SamParams::init(3, SamConfig{}, "key");
  auto build = [&](Tape& tape, const std::vector<Var>& v) {
    const VarMap vars = lift(tape, p.weights, false);
    return test::project(sam_forward(v[0], v[1], vars, p.config), 7);
  };
  const test::GradCheck g = test::grad_suite(
      build, [](std::uint64_t s) { return std::vector<Tensor>{random_tensor({3, 1, 4, 4}, s), random_tensor({3, 1, 4, 4}, s + 1)}; });
  INFO("max rel " << g.max_rel);
  CHECK(g.max_rel < test::kGradTolerance);
}

TEST_CASE("sam: gradients w.r.t. every parameter group") {
  SamConfig cfg;
  const SamParams base = SamParams::init(2, cfg, "value");
  std::vector<std::string> names;
  for (const auto& entry : base.weights) names.push_back(entry.first);
  auto build = [&](Tape&, const std::vector<Var>& v) {
    VarMap vars;
    for (std::size_t i = 0; i < names.size(); ++i) vars[names[i]] = v[i + 2];
    return test::project(sam_forward(v[0], v[1], vars, cfg), 8);
  };
  const test::GradCheck g = test::grad_suite(build, [&](std::uint64_t s) {
    std::vector<Tensor> in{random_tensor({2, 1, 4, 4}, s), random_tensor({2, 1, 4, 4}, s + 1)};
    for (std::size_t i = 0; i < names.size(); ++i) in.push_back(random_tensor(base.weights.at(names[i]).shape(), s + 10 + i, -0.5, 0.5));
    return in;
  });
  INFO("max rel " << g.max_rel);
  CHECK(g.max_rel < test::kGradTolerance);
}

// ---------------------------------------------------------------- memory

TEST_CASE("memory: STM cadence") {
  auto run = [](int theta, int frames) {
    MemoryBank bank{Pattern::Stm, {}, theta};
    for (int t = 0; t < frames; ++t) bank = stm_append(bank, random_slot(2, 2, 1, 1, 1, t, Origin::Historical), t);
    std::vector<int> idx;
    for (const auto& s : bank.slots) idx.push_back(s.frame_index);
    return idx;
  };
  CHECK(run(5, 20) == std::vector<int>{0, 5, 10, 15});
  CHECK(run(3, 10) == std::vector<int>{0, 3, 6, 9});
  CHECK(run(1, 7).size() == 7);
  for (int theta : {1, 2, 3, 5}) {
    for (int t = 1; t <= 25; ++t) CHECK(static_cast<int>(run(theta, t).size()) == (t - 1) / theta + 1);
  }
  MemoryBank sam{Pattern::Sam, {}, 3};
  CHECK_THROWS_AS(stm_append(sam, MemorySlot{}, 0), ContractError);
}

TEST_CASE("memory: EMA blend") {
  const Tensor old_e = random_tensor({3, 2, 2}, 1);
  const Tensor query = random_tensor({3, 2, 2}, 2);
  CHECK(ema_update(old_e, query, 1.0) == old_e);
  CHECK(ema_update(old_e, query, 0.0) == query);
  CHECK(ema_update(Tensor::constant({1}, 2.0), Tensor::constant({1}, 4.0), 0.5)[0] == 3.0);
  CHECK_THROWS_AS(ema_update(old_e, query, 1.5), DomainError);
  CHECK_THROWS_AS(ema_update(old_e, query, -0.1), DomainError);
  const double alpha = 1.75;
  Tensor a = old_e, b = query;
  a.array() *= alpha;
  b.array() *= alpha;
  Tensor scaled = ema_update(old_e, query, 0.3);
  scaled.array() *= alpha;
  CHECK(max_abs_diff(ema_update(a, b, 0.3), scaled) < 1e-12);
}

TEST_CASE("memory: EMA pairing picks the most cosine-similar query position") {
  // Memory positions point along x and y; query positions along y and 2x.
  const Tensor mem({2, 1, 2}, std::vector<double>{1, 0, 0, 1});
  const Tensor q({2, 1, 2}, std::vector<double>{0, 2, 1, 0});
  CHECK(ema_pairing(mem, q) == std::vector<Index>{1, 0});
  CHECK_THROWS_AS(ema_pairing(mem, Tensor({2, 1, 3})), DimensionError);

  const MemorySlot ie = random_slot(2, 3, 2, 1, 2, 5, Origin::Historical);
  MemorySlot qs = random_slot(2, 3, 2, 1, 2, 6, Origin::Historical);
  const MemorySlot same = ema_blend(ie, qs, 1.0, 3);
  CHECK(same.key.k == ie.key.k);
  CHECK(same.values.v[1] == ie.values.v[1]);
  CHECK(same.frame_index == 3);
}

TEST_CASE("memory: SAM update") {
  const SamParams ks = SamParams::init(4, SamConfig{}, "key");
  const SamParams vs = SamParams::init(6, SamConfig{}, "value");
  const MemorySlot gt = random_slot(4, 6, 3, 2, 2, 1, Origin::GT);
  MemorySlot latest = random_slot(4, 6, 3, 2, 2, 2, Origin::Latest);
  latest.frame_index = 3;
  const RdeState rde = rde_init(gt);
  CHECK(rde.key.k == gt.key.k);
  const RdeState before = rde;
  const RdeState next = sam_update(rde, latest, ks, vs);
  CHECK(next.key.k.shape() == gt.key.k.shape());
  CHECK(next.values.num_objects() == 3);
  CHECK(next.values.v[2].shape() == gt.values.v[2].shape());
  CHECK(next.last_update_frame == 3);
  CHECK(rde.key.k == before.key.k);  // pure
  const RdeState again = sam_update(rde, latest, ks, vs);
  CHECK(again.key.k == next.key.k);
  CHECK(again.values.v[0] == next.values.v[0]);
  // Objects go through the value SAM independently.
  CHECK(next.values.v[1].reshaped({6, 1, 2, 2}) ==
        sam_forward(gt.values.v[1].reshaped({6, 1, 2, 2}), latest.values.v[1].reshaped({6, 1, 2, 2}), vs));

  MemorySlot wrong = latest;
  wrong.origin = Origin::GT;
  CHECK_THROWS_AS(sam_update(rde, wrong, ks, vs), ContractError);
  CHECK_THROWS_AS(sam_update(rde, random_slot(4, 6, 3, 2, 3, 9, Origin::Latest), ks, vs), DimensionError);
}

TEST_CASE("memory: bank strategies") {
  const MemorySlot gt = random_slot(2, 2, 1, 1, 1, 1, Origin::GT);
  const MemorySlot latest = random_slot(2, 2, 1, 1, 1, 2, Origin::Latest);
  const RdeState rde = rde_init(random_slot(2, 2, 1, 1, 1, 3, Origin::RDE));

  const MemoryBank best = assemble_bank(gt, latest, rde, BankStrategy::parse("2F & L & RDE"));
  REQUIRE(best.slot_count() == 4);
  CHECK(best.slots[0].origin == Origin::GT);
  CHECK(best.slots[1].origin == Origin::GT);
  CHECK(best.slots[2].origin == Origin::Latest);
  CHECK(best.slots[3].origin == Origin::RDE);
  CHECK(BankStrategy{} == BankStrategy::parse("2F & L & RDE"));

  CHECK(assemble_bank(gt, latest, rde, BankStrategy::parse("First frame")).slot_count() == 1);
  CHECK(BankStrategy::parse("Latest frame x2").latest_copies == 2);
  CHECK(BankStrategy::parse("f&2l") == BankStrategy{1, 2, false});
  CHECK_THROWS_AS(BankStrategy::parse("3Q"), ConfigError);
  CHECK_THROWS_AS(BankStrategy::parse("RDE & RDE"), ConfigError);

  const auto all = ablation_strategies();
  REQUIRE(all.size() == 10);
  const std::vector<std::string> names{"RDE", "F", "F & RDE", "L", "L & RDE", "F & L", "F & L & RDE", "2F & L", "F & 2L",
                                       "2F & L & RDE"};
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(all[i].name() == names[i]);
    CHECK(BankStrategy::parse(names[i]) == all[i]);
    CHECK(assemble_bank(gt, latest, rde, all[i]).slot_count() == all[i].slot_count());
  }
}

TEST_CASE("memory: flatten layout and round trip") {
  MemoryBank bank;
  for (int s = 0; s < 4; ++s) bank.slots.push_back(random_slot(3, 5, 2, 2, 2, 10 + s, Origin::Historical));
  const FlatBank flat = flatten_bank(bank);
  CHECK(flat.positions() == 16);
  CHECK(flat.keys.shape() == Shape{3, 16});
  CHECK(flat.values[1].shape() == Shape{5, 16});
  // column = slot * hw + y * w + x
  CHECK(flat.keys.at({2, 2 * 4 + 1 * 2 + 1}) == bank.slots[2].key.k.at({2, 1, 1}));
  CHECK(flat.values[1].at({4, 3 * 4 + 2}) == bank.slots[3].values.v[1].at({4, 1, 0}));
  CHECK(flatten_bank(bank).keys == flat.keys);

  const auto back = unflatten_bank(flat);
  REQUIRE(back.size() == 4);
  for (std::size_t s = 0; s < 4; ++s) {
    CHECK(back[s].first.k == bank.slots[s].key.k);
    CHECK(back[s].second.v[0] == bank.slots[s].values.v[0]);
  }
  CHECK_THROWS_AS(flatten_bank(MemoryBank{}), ContractError);

  const MemoryBank restored = bank_from_archive(bank_to_archive(bank));
  CHECK(restored.slot_count() == 4);
  CHECK(restored.slots[3].values.v[1] == bank.slots[3].values.v[1]);
  CHECK(restored.float_count() == bank.float_count());
}
