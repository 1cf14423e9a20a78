#include "rdevos/memory.hpp"

#include <algorithm>
#include <cctype>
#include <limits>
#include <regex>

namespace rdevos {

std::string_view to_string(Pattern p) {
  switch (p) {
    case Pattern::Stm: return "stm";
    case Pattern::Ema: return "ema";
    case Pattern::Sam: return "sam";
  }
  return "?";
}

std::string_view to_string(Origin o) {
  switch (o) {
    case Origin::GT: return "GT";
    case Origin::Latest: return "Latest";
    case Origin::RDE: return "RDE";
    case Origin::Historical: return "Historical";
  }
  return "?";
}

Pattern parse_pattern(std::string_view text) {
  std::string s(text);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  if (s == "stm") return Pattern::Stm;
  if (s == "ema") return Pattern::Ema;
  if (s == "sam") return Pattern::Sam;
  throw ConfigError("unknown memory pattern '" + std::string(text) + "' (expected stm, ema or sam)");
}

Index MemorySlot::float_count() const {
  Index n = key.k.size();
  for (const Tensor& v : values.v) n += v.size();
  return n;
}

Index MemoryBank::float_count() const {
  Index n = 0;
  for (const auto& s : slots) n += s.float_count();
  return n;
}

// ---------------------------------------------------------------- strategy

std::string BankStrategy::name() const {
  std::vector<std::string> terms;
  auto counted = [](int n, const char* tag) { return (n > 1 ? std::to_string(n) : std::string()) + tag; };
  if (gt_copies > 0) terms.push_back(counted(gt_copies, "F"));
  if (latest_copies > 0) terms.push_back(counted(latest_copies, "L"));
  if (rde) terms.emplace_back("RDE");
  std::string out;
  for (std::size_t i = 0; i < terms.size(); ++i) out += (i ? " & " : "") + terms[i];
  return out;
}

BankStrategy BankStrategy::parse(std::string_view text) {
  std::string s;
  for (unsigned char c : text) {
    if (!std::isspace(c)) s += static_cast<char>(std::tolower(c));
  }
  for (const auto& [from, to] : {std::pair<std::string, std::string>{"firstframe", "f"},
                                 {"latestframe", "l"},
                                 {"\xc3\x97", "x"}}) {  // U+00D7 multiplication sign
    for (auto pos = s.find(from); pos != std::string::npos; pos = s.find(from)) s.replace(pos, from.size(), to);
  }
  static const std::regex term(R"(^(\d*)(f|l|rde)(?:x(\d+))?$)");
  BankStrategy out{0, 0, false};
  std::size_t start = 0;
  bool any = false;
  while (start <= s.size()) {
    const auto amp = s.find('&', start);
    const std::string part = s.substr(start, amp == std::string::npos ? std::string::npos : amp - start);
    std::smatch m;
    if (!std::regex_match(part, m, term)) throw ConfigError("unknown bank strategy '" + std::string(text) + "'");
    int n = m[1].length() ? std::stoi(m[1].str()) : 1;
    if (m[3].matched) n *= std::stoi(m[3].str());
    if (n < 1) throw ConfigError("bank strategy term with zero count in '" + std::string(text) + "'");
    if (m[2] == "f") out.gt_copies += n;
    else if (m[2] == "l") out.latest_copies += n;
    else {
      if (out.rde || n != 1) throw ConfigError("bank strategy may hold at most one RDE: '" + std::string(text) + "'");
      out.rde = true;
    }
    any = true;
    if (amp == std::string::npos) break;
    start = amp + 1;
  }
  if (!any) throw ConfigError("empty bank strategy");
  return out;
}

std::vector<BankStrategy> ablation_strategies() {
  return {
      {0, 0, true},   // RDE
      {1, 0, false},  // F
      {1, 0, true},   // F & RDE
      {0, 1, false},  // L
      {0, 1, true},   // L & RDE
      {1, 1, false},  // F & L
      {1, 1, true},   // F & L & RDE
      {2, 1, false},  // 2F & L
      {1, 2, false},  // F & 2L
      {2, 1, true},   // 2F & L & RDE
  };
}

// ---------------------------------------------------------------- STM / EMA

MemoryBank stm_append(MemoryBank bank, MemorySlot slot, int frame_index) {
  if (bank.pattern != Pattern::Stm) throw ContractError("stm_append on a non-STM bank");
  if (bank.theta < 1) throw ContractError("sampling interval theta must be >= 1");
  if (frame_index % bank.theta == 0) {
    slot.frame_index = frame_index;
    bank.slots.push_back(std::move(slot));
  }
  return bank;
}

Tensor ema_update(const Tensor& old_entry, const Tensor& query_entry, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DomainError("EMA lambda must lie in [0, 1]");
  if (old_entry.shape() != query_entry.shape()) {
    throw DimensionError("ema_update shape mismatch " + to_string(old_entry.shape()) + " vs " +
                         to_string(query_entry.shape()));
  }
  return Tensor(old_entry.shape(), (1.0 - lambda) * query_entry.array() + lambda * old_entry.array());
}

std::vector<Index> ema_pairing(const Tensor& memory_key, const Tensor& query_key) {
  if (memory_key.shape() != query_key.shape() || memory_key.rank() < 2) {
    throw DimensionError("ema_pairing expects matching [C x ...] keys");
  }
  const Index c = memory_key.dim(0);
  const Index n = memory_key.size() / c;
  Eigen::Map<const Tensor::RowMajorMatrix> km(memory_key.data(), c, n);
  Eigen::Map<const Tensor::RowMajorMatrix> kq(query_key.data(), c, n);
  const Eigen::ArrayXd mnorm = km.colwise().norm().transpose().array().max(1e-12);
  const Eigen::ArrayXd qnorm = kq.colwise().norm().transpose().array().max(1e-12);
  const Eigen::MatrixXd dots = km.transpose() * kq;  // [N_mem x N_query]
  std::vector<Index> pairing(static_cast<std::size_t>(n));
  for (Index p = 0; p < n; ++p) {
    Index best = 0;
    double best_v = -std::numeric_limits<double>::infinity();
    for (Index q = 0; q < n; ++q) {
      const double cos = dots(p, q) / (mnorm[p] * qnorm[q]);
      if (cos > best_v) {
        best_v = cos;
        best = q;
      }
    }
    pairing[static_cast<std::size_t>(p)] = best;
  }
  return pairing;
}

namespace {

// Column gather: out[:, p] = src[:, pairing[p]] for a [C x ...] map.
Tensor gather_positions(const Tensor& src, const std::vector<Index>& pairing) {
  const Index c = src.dim(0);
  const Index n = src.size() / c;
  Tensor out(src.shape());
  for (Index ch = 0; ch < c; ++ch) {
    for (Index p = 0; p < n; ++p) out[ch * n + p] = src[ch * n + pairing[static_cast<std::size_t>(p)]];
  }
  return out;
}

}  // namespace

MemorySlot ema_blend(const MemorySlot& ie, const MemorySlot& query, double lambda, int frame_index) {
  if (ie.values.num_objects() != query.values.num_objects()) throw DimensionError("ema_blend object count mismatch");
  const std::vector<Index> pairing = ema_pairing(ie.key.k, query.key.k);
  MemorySlot out;
  out.origin = Origin::Historical;
  out.frame_index = frame_index;
  out.key.k = ema_update(ie.key.k, gather_positions(query.key.k, pairing), lambda);
  for (std::size_t i = 0; i < ie.values.v.size(); ++i) {
    out.values.v.push_back(ema_update(ie.values.v[i], gather_positions(query.values.v[i], pairing), lambda));
  }
  return out;
}

// ---------------------------------------------------------------- SAM

RdeState rde_init(const MemorySlot& gt) { return RdeState{gt.key, gt.values, gt.frame_index}; }

namespace {

Tensor with_time_axis(const Tensor& t) { return t.reshaped({t.dim(0), 1, t.dim(1), t.dim(2)}); }
Tensor without_time_axis(Tensor t) { return std::move(t).reshaped({t.dim(0), t.dim(2), t.dim(3)}); }

}  // namespace

RdeState sam_update(const RdeState& rde, const MemorySlot& latest, const SamParams& key_sam,
                    const SamParams& value_sam) {
  if (latest.origin != Origin::Latest) throw ContractError("sam_update needs a Latest slot");
  if (rde.key.k.shape() != latest.key.k.shape() || rde.values.num_objects() != latest.values.num_objects()) {
    throw DimensionError("sam_update: RDE and latest embeddings differ in shape");
  }
  RdeState out;
  out.last_update_frame = latest.frame_index;
  out.key.k = without_time_axis(sam_forward(with_time_axis(rde.key.k), with_time_axis(latest.key.k), key_sam));
  for (std::size_t i = 0; i < rde.values.v.size(); ++i) {
    if (rde.values.v[i].shape() != latest.values.v[i].shape()) {
      throw DimensionError("sam_update: value shapes differ");
    }
    out.values.v.push_back(without_time_axis(
        sam_forward(with_time_axis(rde.values.v[i]), with_time_axis(latest.values.v[i]), value_sam)));
  }
  return out;
}

MemoryBank assemble_bank(const MemorySlot& gt, const MemorySlot& latest, const RdeState& rde,
                         const BankStrategy& strategy, int theta) {
  if (strategy.slot_count() < 1) throw ConfigError("bank strategy selects no slots");
  if (gt.key.k.shape() != latest.key.k.shape() || gt.key.k.shape() != rde.key.k.shape()) {
    throw DimensionError("assemble_bank: inconsistent key shapes");
  }
  MemoryBank bank;
  bank.pattern = Pattern::Sam;
  bank.theta = theta;
  auto push = [&bank](const MemorySlot& s, Origin origin) {
    bank.slots.push_back(s);
    bank.slots.back().origin = origin;
  };
  for (int i = 0; i < strategy.gt_copies; ++i) push(gt, Origin::GT);
  for (int i = 0; i < strategy.latest_copies; ++i) push(latest, Origin::Latest);
  if (strategy.rde) bank.slots.push_back(MemorySlot{rde.key, rde.values, Origin::RDE, rde.last_update_frame});
  return bank;
}

// ---------------------------------------------------------------- flatten

FlatBank flatten_bank(const MemoryBank& bank) {
  if (bank.slots.empty()) throw ContractError("flatten_bank on an empty bank");
  const Tensor& k0 = bank.slots.front().key.k;
  if (k0.rank() != 3) throw DimensionError("slot keys must be [Ck x h x w]");
  const Index ck = k0.dim(0);
  const Index hw = k0.dim(1) * k0.dim(2);
  const Index s = bank.slot_count();
  const std::size_t objects = bank.slots.front().values.num_objects();

  FlatBank flat;
  flat.slots = s;
  flat.height = k0.dim(1);
  flat.width = k0.dim(2);
  flat.keys = Tensor({ck, s * hw});
  for (std::size_t i = 0; i < objects; ++i) {
    flat.values.emplace_back(Shape{bank.slots.front().values.v[i].dim(0), s * hw});
  }
  for (Index si = 0; si < s; ++si) {
    const MemorySlot& slot = bank.slots[static_cast<std::size_t>(si)];
    if (slot.key.k.shape() != k0.shape() || slot.values.num_objects() != objects) {
      throw DimensionError("flatten_bank: slots differ in shape");
    }
    flat.keys.matrix().middleCols(si * hw, hw) = slot.key.k.reshaped({ck, hw}).matrix();
    for (std::size_t i = 0; i < objects; ++i) {
      const Tensor& v = slot.values.v[i];
      flat.values[i].matrix().middleCols(si * hw, hw) = v.reshaped({v.dim(0), hw}).matrix();
    }
  }
  return flat;
}

std::vector<std::pair<KeyMap, ValueMap>> unflatten_bank(const FlatBank& flat) {
  const Index hw = flat.height * flat.width;
  std::vector<std::pair<KeyMap, ValueMap>> out;
  for (Index si = 0; si < flat.slots; ++si) {
    KeyMap k{Tensor({flat.keys.dim(0), hw})};
    k.k.matrix() = flat.keys.matrix().middleCols(si * hw, hw);
    k.k.reshape({flat.keys.dim(0), flat.height, flat.width});
    ValueMap v;
    for (const Tensor& fv : flat.values) {
      Tensor t({fv.dim(0), hw});
      t.matrix() = fv.matrix().middleCols(si * hw, hw);
      t.reshape({fv.dim(0), flat.height, flat.width});
      v.v.push_back(std::move(t));
    }
    out.emplace_back(std::move(k), std::move(v));
  }
  return out;
}

// ---------------------------------------------------------------- snapshots

TensorArchive bank_to_archive(const MemoryBank& bank) {
  TensorArchive a;
  a["bank.meta"] = Tensor({3}, std::vector<double>{static_cast<double>(bank.pattern), static_cast<double>(bank.theta),
                                                    static_cast<double>(bank.slots.size())});
  for (std::size_t i = 0; i < bank.slots.size(); ++i) {
    const auto& s = bank.slots[i];
    const std::string prefix = "slot" + std::to_string(i) + ".";
    a[prefix + "meta"] = Tensor({3}, std::vector<double>{static_cast<double>(s.origin), static_cast<double>(s.frame_index),
                                                          static_cast<double>(s.values.num_objects())});
    a[prefix + "key"] = s.key.k;
    for (std::size_t j = 0; j < s.values.v.size(); ++j) a[prefix + "value" + std::to_string(j)] = s.values.v[j];
  }
  return a;
}

MemoryBank bank_from_archive(const TensorArchive& archive) {
  const Tensor& meta = archive_get(archive, "bank.meta");
  MemoryBank bank;
  bank.pattern = static_cast<Pattern>(static_cast<int>(meta[0]));
  bank.theta = static_cast<int>(meta[1]);
  const auto count = static_cast<std::size_t>(meta[2]);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string prefix = "slot" + std::to_string(i) + ".";
    const Tensor& sm = archive_get(archive, prefix + "meta");
    MemorySlot s;
    s.origin = static_cast<Origin>(static_cast<int>(sm[0]));
    s.frame_index = static_cast<int>(sm[1]);
    s.key.k = archive_get(archive, prefix + "key");
    for (int j = 0; j < static_cast<int>(sm[2]); ++j) s.values.v.push_back(archive_get(archive, prefix + "value" + std::to_string(j)));
    bank.slots.push_back(std::move(s));
  }
  return bank;
}

}  // namespace rdevos
