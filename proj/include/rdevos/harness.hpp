#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rdevos/config.hpp"
#include "rdevos/encoders.hpp"
#include "rdevos/losses.hpp"
#include "rdevos/memory.hpp"
#include "rdevos/readout.hpp"

namespace rdevos {

// ---------------------------------------------------------------- synthetic video

struct SyntheticVideo {
  std::vector<Frame> frames;
  std::vector<ObjectMask> gt_masks;
  int repeat_factor = 1;
  int base_length = 0;
  /// Seed that actually produced the unit (after any regeneration).
  std::uint64_t seed = 0;

  Index length() const { return static_cast<Index>(frames.size()); }
  int num_objects() const { return gt_masks.empty() ? 0 : gt_masks.front().num_objects; }
};

struct SynthConfig {
  std::uint64_t seed = 1;
  int base_length = 8;
  int repeat = 1;
  Index size = 64;
  int objects = 2;

  static SynthConfig from(const Config& cfg);
};

/// Shape half-extents as fractions of the frame side.
struct ShapeScale {
  double min_radius = 0.12;
  double max_radius = 0.22;
};

/// B frames of N flat-colored shapes (alternating ellipse / rectangle)
/// drifting at <= 2 px/frame and bouncing off the borders over a static
/// textured background. Later objects are painted on top. If any object is
/// hidden in some frame, generation restarts with seed + 1.
SyntheticVideo synth_base_clip(std::uint64_t seed, int base_length, Index height, Index width, int num_objects,
                               ShapeScale scale = {});

/// (unit forward, unit reversed) repeated R times; frame indices renumbered.
SyntheticVideo synth_long_video(const SyntheticVideo& unit, int repeat);
/// The first base_length frames, i.e. the unit a long video was built from.
SyntheticVideo base_clip_of(const SyntheticVideo& video);

SyntheticVideo synth_video(const SynthConfig& cfg);

void save_video(const SyntheticVideo& video, const std::filesystem::path& path);
SyntheticVideo load_video(const std::filesystem::path& path);

// ---------------------------------------------------------------- streaming

struct PipelineConfig {
  EncoderConfig encoder;
  SamConfig sam;
  DecoderConfig decoder;
  ReadoutConfig readout;
  Pattern pattern = Pattern::Sam;
  int theta = 3;
  BankStrategy strategy;
  double lambda = 0.5;
  int timing_repetitions = 3;
  std::string mask_format = "pgm";

  /// Rejects unknown keys.
  static PipelineConfig from(const Config& cfg);
};

/// Every key PipelineConfig, SynthConfig, LossWeights, PerturbOptions and
/// TrainConfig read.
const std::vector<std::string>& known_config_keys();

/// Online segmenter: init() on frame 0 with its GT, then step() per frame.
/// step() never looks past the frame it is given.
class StreamSegmenter {
 public:
  StreamSegmenter(const ModelParams& params, PipelineConfig config);

  void init(const Frame& frame, const ObjectMask& gt);
  /// Segments `frame` with the current bank, then updates the bank.
  Segmentation step(const Frame& frame);

  const MemoryBank& bank() const { return bank_; }
  const PipelineConfig& config() const { return config_; }

 private:
  MemorySlot encode_slot(const Frame& frame, const ObjectMask& mask, Origin origin) const;
  void rebuild();

  const ModelParams& params_;
  PipelineConfig config_;
  MemoryBank bank_;
  MemorySlot gt_;
  MemorySlot latest_;  // SAM: latest frame; EMA: the independent embedding
  RdeState rde_;
};

struct FrameRecord {
  int frame_index = 0;
  double latency_s = 0.0;
  Index slots = 0;
  Index floats = 0;
  std::vector<double> iou;  // per object, region similarity J
  double iou_mean = 0.0;

  friend bool operator==(const FrameRecord&, const FrameRecord&) = default;
};

struct RunReport {
  std::string pattern;
  std::string strategy;
  int theta = 0;
  int repeat_factor = 1;
  std::vector<FrameRecord> records;
  // Aggregates; recompute() derives them from records.
  double mean_latency_s = 0.0;  // frames 1.., frame 0 is initialization
  Index peak_slots = 0;
  Index peak_floats = 0;
  double mean_iou = 0.0;  // frames 1..

  void recompute();
  friend bool operator==(const RunReport&, const RunReport&) = default;
};

/// |a & b| / |a | b| for object `id`; 1 when both are empty.
double iou(const ObjectMask& prediction, const ObjectMask& gt, int id);

/// Latency is the median over timing_repetitions of segment + update.
/// When `masks_dir` is non-empty, predicted masks are written there.
RunReport run_stream(const SyntheticVideo& video, const ModelParams& params, const PipelineConfig& config,
                     const std::filesystem::path& masks_dir = {});

struct ComparisonRow {
  std::string pattern;
  int repeat_factor = 1;
  Index frames = 0;
  double mean_latency_s = 0.0;
  Index peak_slots = 0;
  Index peak_floats = 0;
  double mean_iou = 0.0;
};

/// run_stream per pattern on synth_long_video(unit, R) for every R.
std::vector<ComparisonRow> compare_patterns(const SyntheticVideo& unit, const std::vector<Pattern>& patterns,
                                            const std::vector<int>& repeats, const ModelParams& params,
                                            const PipelineConfig& config);

struct AblationRow {
  std::string strategy;
  Index slot_count = 0;  // what the strategy prescribes
  Index peak_slots = 0;  // what the run observed
  double mean_iou = 0.0;
};

std::vector<AblationRow> ablate_strategies(const SyntheticVideo& video, const std::vector<BankStrategy>& strategies,
                                           const ModelParams& params, const PipelineConfig& config);

// ---------------------------------------------------------------- reports

enum class ReportFormat { Csv, Json };
ReportFormat parse_report_format(const std::string& text);
/// Picks the format from the extension (.json, otherwise CSV).
ReportFormat report_format_for(const std::filesystem::path& path);

std::string to_csv(const RunReport& report);
std::string to_json(const RunReport& report);
RunReport run_report_from_json(const std::string& text);
std::string to_csv(const std::vector<ComparisonRow>& rows);
std::string to_json(const std::vector<ComparisonRow>& rows);
std::string to_csv(const std::vector<AblationRow>& rows);
std::string to_json(const std::vector<AblationRow>& rows);

/// Zeroes every latency field; what remains is a pure function of seeds and config.
RunReport without_latency(RunReport report);

/// Writes `content` to `path`; std::runtime_error names the path on failure.
void write_text(const std::filesystem::path& path, const std::string& content);
void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path);

/// "pgm" (binary 8-bit, ids as gray levels) or "txt" (one row of ids per line).
void write_mask(const ObjectMask& mask, const std::string& format, const std::filesystem::path& path);
ObjectMask read_text_mask(const std::filesystem::path& path, int num_objects);

/// Shortest round-trip decimal form.
std::string format_double(double v);

// ---------------------------------------------------------------- toy training

/// Smaller shapes for the 16x16 training clip. Its features are 1x1, so the
/// decoder paints one label per frame and the segmentation loss cannot fall
/// below the per-frame label entropy; small objects keep that floor low.
inline constexpr ShapeScale kTrainShapeScale{0.08, 0.14};

/// The first five frames of a seeded synthetic clip.
TrainClip make_train_clip(std::uint64_t seed, Index size, int num_objects, ShapeScale scale = {});

struct TrainRecord {
  int step = 0;
  StepResult loss;
};

/// `steps` train_step calls; the first-frame perturbation is redrawn every
/// step from a stream seeded by config.seed.
std::vector<TrainRecord> train(const TrainClip& clip, ModelParams& params, const LossWeights& weights,
                               const TrainConfig& config, const PerturbOptions& perturb);

std::string to_csv(const std::vector<TrainRecord>& records);

}  // namespace rdevos
