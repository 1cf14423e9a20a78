#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/encoders.hpp"
#include "rdevos/sam.hpp"

namespace rdevos {

enum class Pattern { Stm, Ema, Sam };
enum class Origin { GT, Latest, RDE, Historical };

std::string_view to_string(Pattern p);
std::string_view to_string(Origin o);
Pattern parse_pattern(std::string_view text);

struct MemorySlot {
  KeyMap key;
  ValueMap values;
  Origin origin = Origin::Historical;
  int frame_index = 0;

  Index float_count() const;
};

/// Which embeddings a SAM-pattern bank holds: `gt_copies` GT slots,
/// `latest_copies` latest-frame slots, then optionally the RDE slot.
struct BankStrategy {
  int gt_copies = 2;
  int latest_copies = 1;
  bool rde = true;

  int slot_count() const { return gt_copies + latest_copies + (rde ? 1 : 0); }
  /// Canonical "2F & L & RDE" style name.
  std::string name() const;
  /// Accepts "2F & L & RDE", "F&RDE", "First frame", "Latest frame x2", ...
  static BankStrategy parse(std::string_view text);

  friend bool operator==(const BankStrategy&, const BankStrategy&) = default;
};

/// The ten compositions of the inference-strategy ablation, in table order.
std::vector<BankStrategy> ablation_strategies();

struct MemoryBank {
  Pattern pattern = Pattern::Sam;
  std::vector<MemorySlot> slots;
  int theta = 3;

  Index slot_count() const { return static_cast<Index>(slots.size()); }
  Index float_count() const;
};

/// Recurrent dynamic embedding carried across frames.
struct RdeState {
  KeyMap key;
  ValueMap values;
  int last_update_frame = 0;
};

/// Appends `slot` when frame_index is a multiple of theta.
MemoryBank stm_append(MemoryBank bank, MemorySlot slot, int frame_index);

/// (1 - lambda) * query + lambda * old, pointwise.
Tensor ema_update(const Tensor& old_entry, const Tensor& query_entry, double lambda);

/// For every memory position p ([C x h x w] keys), the query position with
/// the highest cosine similarity (lowest index on ties).
std::vector<Index> ema_pairing(const Tensor& memory_key, const Tensor& query_key);

/// Blends `query` into the independent-embedding slot `ie` using ema_pairing
/// on the keys; values follow the same pairing.
MemorySlot ema_blend(const MemorySlot& ie, const MemorySlot& query, double lambda, int frame_index);

/// RDE at frame 0: a copy of the GT embedding.
RdeState rde_init(const MemorySlot& gt);

/// One SAM transition: key through key_sam, each object value through value_sam.
RdeState sam_update(const RdeState& rde, const MemorySlot& latest, const SamParams& key_sam,
                    const SamParams& value_sam);

MemoryBank assemble_bank(const MemorySlot& gt, const MemorySlot& latest, const RdeState& rde,
                         const BankStrategy& strategy, int theta = 3);

/// Bank laid out for readout: column index = slot * (h*w) + y*w + x.
struct FlatBank {
  Tensor keys;                 // [Ck x N_mem]
  std::vector<Tensor> values;  // per object [Cv x N_mem]
  Index slots = 0, height = 0, width = 0;

  Index positions() const { return keys.dim(1); }
};

FlatBank flatten_bank(const MemoryBank& bank);

/// Inverse of flatten_bank for the key/value payload (origins are not kept).
std::vector<std::pair<KeyMap, ValueMap>> unflatten_bank(const FlatBank& flat);

/// Bank snapshot as a tensor archive (slot payloads plus origin/frame tags).
TensorArchive bank_to_archive(const MemoryBank& bank);
MemoryBank bank_from_archive(const TensorArchive& archive);

}  // namespace rdevos
