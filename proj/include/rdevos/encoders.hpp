#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/params.hpp"
#include "rdevos/tensor.hpp"

namespace rdevos {

/// Output stride of both encoders.
inline constexpr int kFeatureStride = 16;

/// RGB frame, pixels [3 x H x W] in [0, 1].
struct Frame {
  Tensor pixels;
  int index = 0;

  Index height() const { return pixels.dim(1); }
  Index width() const { return pixels.dim(2); }
};

/// Per-pixel object ids in {0..num_objects}; 0 is background.
struct ObjectMask {
  Index height = 0;
  Index width = 0;
  int num_objects = 0;
  std::vector<std::uint8_t> labels;

  ObjectMask() = default;
  ObjectMask(Index h, Index w, int objects);

  std::uint8_t& at(Index y, Index x) { return labels[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(Index y, Index x) const { return labels[static_cast<std::size_t>(y * width + x)]; }

  /// [1 x H x W] indicator of object `id` (1-based).
  Tensor binary(int id) const;
  Index pixel_count(int id) const;
  /// Throws DomainError if any label exceeds num_objects.
  void validate() const;

  friend bool operator==(const ObjectMask&, const ObjectMask&) = default;
};

/// Target-agnostic key, [Ck x h x w].
struct KeyMap {
  Tensor k;
};

/// Target-specific values, one [Cv x h x w] map per object.
struct ValueMap {
  std::vector<Tensor> v;

  std::size_t num_objects() const { return v.size(); }
};

struct EncoderConfig {
  std::uint64_t seed = 7;
  Index ck = 64;
  Index cv = 512;
  std::array<Index, 4> widths{16, 32, 64, 128};

  static EncoderConfig from(const Config& cfg);
};

/// Two seeded stride-2 conv stacks (image: 3 input channels, mask: frame plus
/// one binary mask channel) with 1x1 projection heads. The key head hangs off
/// the image stack, so keys never depend on a mask.
struct EncoderParams {
  EncoderConfig config;
  TensorArchive weights;

  static EncoderParams init(const EncoderConfig& config);
  static EncoderParams from_archive(TensorArchive archive);
  TensorArchive to_archive() const;
};

// Differentiable forms; `p` comes from lift(tape, params.weights, ...).
struct QueryEncoding {
  Var key;    // [Ck x h x w]
  Var value;  // [Cv x h x w]
};

struct MemoryEncoding {
  Var key;
  std::vector<Var> values;
};

QueryEncoding encode_image(const Var& pixels, const VarMap& p);
MemoryEncoding encode_mask(const Var& pixels, const ObjectMask& mask, const VarMap& p);

struct ImageEncoding {
  KeyMap key;
  Tensor query_value;
};

struct MaskEncoding {
  KeyMap key;
  ValueMap values;
};

ImageEncoding encode_image(const Frame& frame, const EncoderParams& params);
MaskEncoding encode_mask(const Frame& frame, const ObjectMask& mask, const EncoderParams& params);

/// Throws DimensionError unless the frame is [3 x H x W] with H, W divisible by 16.
void check_frame(const Tensor& pixels);

}  // namespace rdevos
