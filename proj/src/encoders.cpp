#include "rdevos/encoders.hpp"

#include "rdevos/rng.hpp"

namespace rdevos {

ObjectMask::ObjectMask(Index h, Index w, int objects)
    : height(h), width(w), num_objects(objects), labels(static_cast<std::size_t>(h * w), 0) {}

Tensor ObjectMask::binary(int id) const {
  Tensor out({1, height, width});
  for (std::size_t i = 0; i < labels.size(); ++i) out[static_cast<Index>(i)] = labels[i] == id ? 1.0 : 0.0;
  return out;
}

Index ObjectMask::pixel_count(int id) const {
  return static_cast<Index>(std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(id)));
}

void ObjectMask::validate() const {
  if (static_cast<Index>(labels.size()) != height * width) throw DimensionError("mask label count mismatch");
  for (auto l : labels) {
    if (l > num_objects) {
      throw DomainError("mask id " + std::to_string(l) + " exceeds object count " + std::to_string(num_objects));
    }
  }
}

EncoderConfig EncoderConfig::from(const Config& cfg) {
  EncoderConfig c;
  c.seed = static_cast<std::uint64_t>(cfg.get_int("encoder.seed", static_cast<long long>(c.seed)));
  c.ck = cfg.get_int("encoder.ck", c.ck);
  c.cv = cfg.get_int("encoder.cv", c.cv);
  if (c.ck < 1 || c.cv < 1) throw ConfigError("encoder.ck and encoder.cv must be positive");
  return c;
}

namespace {

std::string stage_name(const char* stack, int i) { return std::string("encoder.") + stack + ".conv" + std::to_string(i); }

Var run_stack(Var x, const VarMap& p, const char* stack) {
  for (int i = 0; i < 4; ++i) x = relu(conv(x, param(p, stage_name(stack, i)), {.stride = 2}));
  return x;
}

}  // namespace

EncoderParams EncoderParams::init(const EncoderConfig& config) {
  EncoderParams params;
  params.config = config;
  auto& w = params.weights;
  for (const char* stack : {"image", "mask"}) {
    Index cin = std::string(stack) == "image" ? 3 : 4;
    for (int i = 0; i < 4; ++i) {
      const std::string name = stage_name(stack, i);
      auto rng = named_rng(config.seed, name);
      const Index cout = config.widths[static_cast<std::size_t>(i)];
      w[name] = fan_in_normal({cout, cin, 3, 3}, rng);
      cin = cout;
    }
  }
  const Index feat = config.widths.back();
  auto head = [&](const std::string& name, Index cout) {
    auto rng = named_rng(config.seed, name);
    w[name] = fan_in_normal({cout, feat, 1, 1}, rng);
  };
  head("encoder.image.key_head", config.ck);
  head("encoder.image.value_head", config.cv);
  head("encoder.mask.value_head", config.cv);
  return params;
}

EncoderParams EncoderParams::from_archive(TensorArchive archive) {
  EncoderParams params;
  const Tensor& key_head = archive_get(archive, "encoder.image.key_head");
  const Tensor& value_head = archive_get(archive, "encoder.mask.value_head");
  params.config.ck = key_head.dim(0);
  params.config.cv = value_head.dim(0);
  for (int i = 0; i < 4; ++i) params.config.widths[static_cast<std::size_t>(i)] = archive_get(archive, stage_name("image", i)).dim(0);
  params.weights = std::move(archive);
  return params;
}

TensorArchive EncoderParams::to_archive() const { return weights; }

void check_frame(const Tensor& pixels) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    throw DimensionError("frame must be [3 x H x W], got " + to_string(pixels.shape()));
  }
  if (pixels.dim(1) % kFeatureStride != 0 || pixels.dim(2) % kFeatureStride != 0) {
    throw DimensionError("frame dims must be divisible by 16, got " + to_string(pixels.shape()));
  }
}

QueryEncoding encode_image(const Var& pixels, const VarMap& p) {
  check_frame(pixels.value());
  const Var feat = run_stack(pixels, p, "image");
  return {conv(feat, param(p, "encoder.image.key_head")), conv(feat, param(p, "encoder.image.value_head"))};
}

MemoryEncoding encode_mask(const Var& pixels, const ObjectMask& mask, const VarMap& p) {
  check_frame(pixels.value());
  if (mask.height != pixels.value().dim(1) || mask.width != pixels.value().dim(2)) {
    throw DimensionError("mask dims do not match frame");
  }
  mask.validate();
  Tape& tape = pixels.tape();
  MemoryEncoding out;
  out.key = conv(run_stack(pixels, p, "image"), param(p, "encoder.image.key_head"));
  for (int id = 1; id <= mask.num_objects; ++id) {
    const Var input = concat(pixels, tape.constant(mask.binary(id)), 0);
    out.values.push_back(conv(run_stack(input, p, "mask"), param(p, "encoder.mask.value_head")));
  }
  return out;
}

ImageEncoding encode_image(const Frame& frame, const EncoderParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  const QueryEncoding enc = encode_image(tape.constant_ref(frame.pixels), p);
  return {KeyMap{enc.key.value()}, enc.value.value()};
}

MaskEncoding encode_mask(const Frame& frame, const ObjectMask& mask, const EncoderParams& params) {
  Tape tape;
  const VarMap p = lift(tape, params.weights, false);
  const MemoryEncoding enc = encode_mask(tape.constant_ref(frame.pixels), mask, p);
  MaskEncoding out{KeyMap{enc.key.value()}, {}};
  for (const Var& v : enc.values) out.values.v.push_back(v.value());
  return out;
}

}  // namespace rdevos
