#include "rdevos/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "rdevos/rng.hpp"
#include "rdevos/serialize.hpp"

namespace rdevos {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------- synthesis

SynthConfig SynthConfig::from(const Config& cfg) {
  SynthConfig c;
  c.seed = static_cast<std::uint64_t>(cfg.get_int("synth.seed", static_cast<long long>(c.seed)));
  c.base_length = static_cast<int>(cfg.get_int("synth.base_len", c.base_length));
  c.repeat = static_cast<int>(cfg.get_int("synth.repeat", c.repeat));
  c.size = cfg.get_int("synth.size", c.size);
  c.objects = static_cast<int>(cfg.get_int("synth.objects", c.objects));
  return c;
}

namespace {

struct Shape2d {
  bool ellipse = true;
  double cy = 0, cx = 0, ry = 0, rx = 0;
  double vy = 0, vx = 0;
  double color[3] = {0, 0, 0};

  bool covers(double y, double x) const {
    const double dy = (y - cy) / ry;
    const double dx = (x - cx) / rx;
    return ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }

  // Advance one frame, reflecting off the borders.
  void advance(Index h, Index w) {
    auto bounce = [](double& p, double& v, double lo, double hi) {
      p += v;
      if (p < lo) {
        p = 2 * lo - p;
        v = -v;
      } else if (p > hi) {
        p = 2 * hi - p;
        v = -v;
      }
    };
    bounce(cy, vy, ry, static_cast<double>(h - 1) - ry);
    bounce(cx, vx, rx, static_cast<double>(w - 1) - rx);
  }
};

constexpr int kMinVisiblePixels = 4;
constexpr int kMaxRegenerations = 1000;

std::optional<SyntheticVideo> try_synth(std::uint64_t seed, int base_length, Index h, Index w, int n, ShapeScale scale) {
  auto rng = named_rng(seed, "synth");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto between = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };

  // Static background: per-channel base level, two sinusoids and fine grain.
  Tensor background({3, h, w});
  for (Index c = 0; c < 3; ++c) {
    const double base = between(0.25, 0.55);
    const double fy = between(1.0, 3.0), fx = between(1.0, 3.0);
    const double py = between(0.0, 2 * std::numbers::pi), px = between(0.0, 2 * std::numbers::pi);
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        const double wave = 0.06 * std::sin(2 * std::numbers::pi * fy * static_cast<double>(y) / static_cast<double>(h) + py) +
                            0.06 * std::sin(2 * std::numbers::pi * fx * static_cast<double>(x) / static_cast<double>(w) + px);
        background[(c * h + y) * w + x] = base + wave + between(-0.03, 0.03);
      }
    }
  }

  std::vector<Shape2d> shapes(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Shape2d& s = shapes[static_cast<std::size_t>(i)];
    s.ellipse = i % 2 == 0;
    s.ry = between(scale.min_radius, scale.max_radius) * static_cast<double>(h);
    s.rx = between(scale.min_radius, scale.max_radius) * static_cast<double>(w);
    s.cy = between(s.ry, static_cast<double>(h - 1) - s.ry);
    s.cx = between(s.rx, static_cast<double>(w - 1) - s.rx);
    const double speed = between(0.5, 2.0);
    const double angle = between(0.0, 2 * std::numbers::pi);
    s.vy = speed * std::sin(angle);
    s.vx = speed * std::cos(angle);
    for (double& c : s.color) c = between(0.0, 1.0);
    s.color[i % 3] = 0.95;
  }

  SyntheticVideo video;
  video.base_length = base_length;
  video.seed = seed;
  for (int t = 0; t < base_length; ++t) {
    Frame frame{background, t};
    ObjectMask mask(h, w, n);
    for (int i = 0; i < n; ++i) {  // later objects on top
      const Shape2d& s = shapes[static_cast<std::size_t>(i)];
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          if (!s.covers(static_cast<double>(y), static_cast<double>(x))) continue;
          mask.at(y, x) = static_cast<std::uint8_t>(i + 1);
          for (Index c = 0; c < 3; ++c) frame.pixels[(c * h + y) * w + x] = s.color[c];
        }
      }
    }
    for (int i = 1; i <= n; ++i) {
      if (mask.pixel_count(i) < kMinVisiblePixels) return std::nullopt;
    }
    video.frames.push_back(std::move(frame));
    video.gt_masks.push_back(std::move(mask));
    for (Shape2d& s : shapes) s.advance(h, w);
  }
  return video;
}

}  // namespace

SyntheticVideo synth_base_clip(std::uint64_t seed, int base_length, Index height, Index width, int num_objects,
                               ShapeScale scale) {
  if (height <= 0 || width <= 0 || height % kFeatureStride != 0 || width % kFeatureStride != 0) {
    throw DimensionError("synthetic frames must be positive multiples of 16, got " + std::to_string(height) + "x" +
                         std::to_string(width));
  }
  if (base_length < 1) throw DomainError("base length must be >= 1");
  if (num_objects < 1 || num_objects > 255) throw DomainError("object count must lie in [1, 255]");
  if (!(scale.min_radius > 0 && scale.min_radius <= scale.max_radius && scale.max_radius < 0.5)) {
    throw DomainError("shape radius fractions must satisfy 0 < min <= max < 0.5");
  }
  for (int attempt = 0; attempt < kMaxRegenerations; ++attempt) {
    if (auto v = try_synth(seed + static_cast<std::uint64_t>(attempt), base_length, height, width, num_objects, scale)) return *v;
  }
  throw DomainError("could not place " + std::to_string(num_objects) + " visible objects");
}

SyntheticVideo synth_long_video(const SyntheticVideo& unit, int repeat) {
  if (repeat < 1) throw DomainError("repeat factor must be >= 1");
  SyntheticVideo out;
  out.repeat_factor = repeat;
  out.base_length = unit.base_length;
  out.seed = unit.seed;
  const auto b = unit.frames.size();
  for (int r = 0; r < repeat; ++r) {
    for (std::size_t i = 0; i < 2 * b; ++i) {
      const std::size_t src = i < b ? i : 2 * b - 1 - i;
      Frame f = unit.frames[src];
      f.index = static_cast<int>(out.frames.size());
      out.frames.push_back(std::move(f));
      out.gt_masks.push_back(unit.gt_masks[src]);
    }
  }
  return out;
}

SyntheticVideo base_clip_of(const SyntheticVideo& video) {
  const auto b = static_cast<std::size_t>(video.base_length);
  if (b < 1 || b > video.frames.size()) throw ContractError("video has no usable base length");
  SyntheticVideo out;
  out.base_length = video.base_length;
  out.seed = video.seed;
  out.frames.assign(video.frames.begin(), video.frames.begin() + static_cast<std::ptrdiff_t>(b));
  out.gt_masks.assign(video.gt_masks.begin(), video.gt_masks.begin() + static_cast<std::ptrdiff_t>(b));
  return out;
}

SyntheticVideo synth_video(const SynthConfig& cfg) {
  return synth_long_video(synth_base_clip(cfg.seed, cfg.base_length, cfg.size, cfg.size, cfg.objects), cfg.repeat);
}

void save_video(const SyntheticVideo& video, const std::filesystem::path& path) {
  if (video.frames.empty()) throw ContractError("cannot save an empty video");
  const Index t = video.length();
  const Index h = video.frames[0].height();
  const Index w = video.frames[0].width();
  Tensor frames({t, 3, h, w});
  Tensor masks({t, h, w});
  for (Index i = 0; i < t; ++i) {
    const auto& f = video.frames[static_cast<std::size_t>(i)].pixels;
    frames.array().segment(i * f.size(), f.size()) = f.array();
    const auto& m = video.gt_masks[static_cast<std::size_t>(i)].labels;
    for (std::size_t p = 0; p < m.size(); ++p) masks[i * h * w + static_cast<Index>(p)] = m[p];
  }
  TensorArchive a;
  a["video.frames"] = std::move(frames);
  a["video.masks"] = std::move(masks);
  a["video.meta"] = Tensor({4}, std::vector<double>{static_cast<double>(video.repeat_factor),
                                                    static_cast<double>(video.base_length),
                                                    static_cast<double>(video.num_objects()),
                                                    static_cast<double>(video.seed)});
  save_archive(path, a);
}

SyntheticVideo load_video(const std::filesystem::path& path) {
  const TensorArchive a = load_archive(path);
  const Tensor& frames = archive_get(a, "video.frames");
  const Tensor& masks = archive_get(a, "video.masks");
  const Tensor& meta = archive_get(a, "video.meta");
  if (frames.rank() != 4 || masks.rank() != 3 || frames.dim(0) != masks.dim(0) || meta.size() != 4) {
    throw DimensionError("malformed video archive " + path.string());
  }
  SyntheticVideo v;
  v.repeat_factor = static_cast<int>(meta[0]);
  v.base_length = static_cast<int>(meta[1]);
  v.seed = static_cast<std::uint64_t>(meta[3]);
  const Index h = frames.dim(2), w = frames.dim(3);
  const Index fsize = 3 * h * w;
  for (Index i = 0; i < frames.dim(0); ++i) {
    Frame f{Tensor({3, h, w}), static_cast<int>(i)};
    f.pixels.array() = frames.array().segment(i * fsize, fsize);
    ObjectMask m(h, w, static_cast<int>(meta[2]));
    for (Index p = 0; p < h * w; ++p) m.labels[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(masks[i * h * w + p]);
    m.validate();
    v.frames.push_back(std::move(f));
    v.gt_masks.push_back(std::move(m));
  }
  return v;
}

// ---------------------------------------------------------------- configuration

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys{
      "encoder.seed",   "encoder.ck",         "encoder.cv",       "sam.seed",        "sam.pool",
      "sam.aspp_rates", "decoder.seed",       "decoder.hidden",   "readout.topk",    "memory.pattern",
      "memory.theta",   "memory.strategy",    "memory.lambda",    "loss.mu",         "loss.gamma",
      "loss.bootstrap_ratio", "perturb.radius_max", "train.lr",   "train.steps",     "train.seed", "train.clip_norm",
      "output.mask_format", "synth.seed",     "synth.base_len",   "synth.repeat",    "synth.size",
      "synth.objects",  "timing.repetitions"};
  return keys;
}

PipelineConfig PipelineConfig::from(const Config& cfg) {
  cfg.require_known(known_config_keys());
  PipelineConfig c;
  c.encoder = EncoderConfig::from(cfg);
  c.sam = SamConfig::from(cfg);
  c.decoder = DecoderConfig::from(cfg);
  c.readout = ReadoutConfig::from(cfg);
  c.pattern = parse_pattern(cfg.get_string("memory.pattern", "sam"));
  c.theta = static_cast<int>(cfg.get_int("memory.theta", c.theta));
  if (cfg.has("memory.strategy")) {
    if (c.pattern != Pattern::Sam) throw ConfigError("memory.strategy applies to the sam pattern only");
    c.strategy = BankStrategy::parse(cfg.get_string("memory.strategy", ""));
  }
  c.lambda = cfg.get_double("memory.lambda", c.lambda);
  c.timing_repetitions = static_cast<int>(cfg.get_int("timing.repetitions", c.timing_repetitions));
  c.mask_format = cfg.get_string("output.mask_format", c.mask_format);
  if (c.theta < 1) throw ConfigError("memory.theta must be >= 1");
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("memory.lambda must lie in [0, 1]");
  if (c.timing_repetitions < 1) throw ConfigError("timing.repetitions must be >= 1");
  if (c.mask_format != "pgm" && c.mask_format != "txt") throw ConfigError("output.mask_format must be pgm or txt");
  return c;
}

// ---------------------------------------------------------------- streaming

StreamSegmenter::StreamSegmenter(const ModelParams& params, PipelineConfig config)
    : params_(params), config_(std::move(config)) {
  if (config_.theta < 1) throw ConfigError("theta must be >= 1");
  if (config_.pattern == Pattern::Sam && config_.strategy.slot_count() < 1) {
    throw ConfigError("bank strategy selects no slots");
  }
}

MemorySlot StreamSegmenter::encode_slot(const Frame& frame, const ObjectMask& mask, Origin origin) const {
  MaskEncoding enc = encode_mask(frame, mask, params_.encoder);
  return MemorySlot{std::move(enc.key), std::move(enc.values), origin, frame.index};
}

void StreamSegmenter::rebuild() {
  bank_ = assemble_bank(gt_, latest_, rde_, config_.strategy, config_.theta);
}

void StreamSegmenter::init(const Frame& frame, const ObjectMask& gt) {
  gt_ = encode_slot(frame, gt, Origin::GT);
  bank_ = MemoryBank{config_.pattern, {gt_}, config_.theta};
  switch (config_.pattern) {
    case Pattern::Stm:
      break;
    case Pattern::Ema:
      latest_ = gt_;
      latest_.origin = Origin::Historical;
      bank_.slots.push_back(latest_);
      break;
    case Pattern::Sam:
      latest_ = gt_;
      latest_.origin = Origin::Latest;
      rde_ = rde_init(gt_);
      rebuild();
      break;
  }
}

Segmentation StreamSegmenter::step(const Frame& frame) {
  if (bank_.slots.empty()) throw ContractError("StreamSegmenter::step before init");
  Segmentation seg = segment_frame(bank_, frame, params_.encoder, params_.decoder, config_.readout);
  const int t = frame.index;
  const bool due = t % config_.theta == 0;
  switch (config_.pattern) {
    case Pattern::Stm:
      if (due) bank_ = stm_append(std::move(bank_), encode_slot(frame, seg.mask, Origin::Historical), t);
      break;
    case Pattern::Ema:
      if (due) {
        latest_ = ema_blend(latest_, encode_slot(frame, seg.mask, Origin::Historical), config_.lambda, t);
        bank_.slots[1] = latest_;
      }
      break;
    case Pattern::Sam:
      if (config_.strategy.latest_copies > 0 || config_.strategy.rde) {
        latest_ = encode_slot(frame, seg.mask, Origin::Latest);
        if (config_.strategy.rde && due) rde_ = sam_update(rde_, latest_, params_.key_sam, params_.value_sam);
        rebuild();
      }
      break;
  }
  return seg;
}

double iou(const ObjectMask& prediction, const ObjectMask& gt, int id) {
  if (prediction.labels.size() != gt.labels.size()) throw DimensionError("iou: mask sizes differ");
  Index inter = 0, uni = 0;
  for (std::size_t p = 0; p < gt.labels.size(); ++p) {
    const bool a = prediction.labels[p] == id;
    const bool b = gt.labels[p] == id;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

void RunReport::recompute() {
  mean_latency_s = 0.0;
  mean_iou = 0.0;
  peak_slots = 0;
  peak_floats = 0;
  for (const auto& r : records) {
    peak_slots = std::max(peak_slots, r.slots);
    peak_floats = std::max(peak_floats, r.floats);
  }
  if (records.size() > 1) {
    for (std::size_t i = 1; i < records.size(); ++i) {
      mean_latency_s += records[i].latency_s;
      mean_iou += records[i].iou_mean;
    }
    mean_latency_s /= static_cast<double>(records.size() - 1);
    mean_iou /= static_cast<double>(records.size() - 1);
  } else if (!records.empty()) {
    mean_iou = records[0].iou_mean;
  }
}

namespace {

FrameRecord make_record(const Frame& frame, const ObjectMask& prediction, const ObjectMask& gt, const MemoryBank& bank) {
  FrameRecord r;
  r.frame_index = frame.index;
  r.slots = bank.slot_count();
  r.floats = bank.float_count();
  for (int id = 1; id <= gt.num_objects; ++id) r.iou.push_back(iou(prediction, gt, id));
  for (double v : r.iou) r.iou_mean += v;
  if (!r.iou.empty()) r.iou_mean /= static_cast<double>(r.iou.size());
  return r;
}

std::string mask_file_name(int index, const std::string& format) {
  std::string digits = std::to_string(index);
  digits.insert(0, digits.size() < 5 ? 5 - digits.size() : 0, '0');
  return "mask_" + digits + "." + format;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace

RunReport run_stream(const SyntheticVideo& video, const ModelParams& params, const PipelineConfig& config,
                     const std::filesystem::path& masks_dir) {
  if (video.frames.empty()) throw ContractError("run_stream on an empty video");
  using clock = std::chrono::steady_clock;
  const auto n = video.frames.size();
  if (!masks_dir.empty()) std::filesystem::create_directories(masks_dir);

  RunReport report;
  report.pattern = std::string(to_string(config.pattern));
  report.strategy = config.pattern == Pattern::Sam ? config.strategy.name() : "";
  report.theta = config.theta;
  report.repeat_factor = video.repeat_factor;

  // Whole-stream repetitions; every repetition is deterministic, so records
  // come from the first and each frame keeps its median latency.
  std::vector<std::vector<double>> latencies(n);
  for (int rep = 0; rep < config.timing_repetitions; ++rep) {
    StreamSegmenter seg(params, config);
    for (std::size_t i = 0; i < n; ++i) {
      const Frame& frame = video.frames[i];
      const ObjectMask& gt = video.gt_masks[i];
      const auto start = clock::now();
      ObjectMask prediction = gt;
      if (i == 0) {
        seg.init(frame, gt);
      } else {
        prediction = seg.step(frame).mask;
      }
      latencies[i].push_back(std::chrono::duration<double>(clock::now() - start).count());
      if (rep == 0) {
        report.records.push_back(make_record(frame, prediction, gt, seg.bank()));
        if (!masks_dir.empty()) write_mask(prediction, config.mask_format, masks_dir / mask_file_name(frame.index, config.mask_format));
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) report.records[i].latency_s = median(latencies[i]);
  report.recompute();
  return report;
}

std::vector<ComparisonRow> compare_patterns(const SyntheticVideo& unit, const std::vector<Pattern>& patterns,
                                            const std::vector<int>& repeats, const ModelParams& params,
                                            const PipelineConfig& config) {
  if (patterns.size() < 2) throw ConfigError("compare needs at least two patterns");
  if (repeats.empty()) throw ConfigError("compare needs at least one repeat factor");
  // One untimed pass per pattern so the first measured run is not the cold one.
  const SyntheticVideo warmup = synth_long_video(unit, 1);
  for (Pattern p : patterns) {
    PipelineConfig c = config;
    c.pattern = p;
    c.timing_repetitions = 1;
    run_stream(warmup, params, c);
  }
  // Repetitions go round-robin over every (R, pattern) run, so slow drift in
  // machine speed lands on all repeat factors alike. Per-frame medians as in
  // run_stream.
  std::vector<SyntheticVideo> videos;
  for (int r : repeats) videos.push_back(synth_long_video(unit, r));
  std::vector<std::vector<RunReport>> reports(videos.size() * patterns.size());
  for (int rep = 0; rep < std::max(1, config.timing_repetitions); ++rep) {
    for (std::size_t v = 0; v < videos.size(); ++v) {
      for (std::size_t k = 0; k < patterns.size(); ++k) {
        PipelineConfig c = config;
        c.pattern = patterns[k];
        c.timing_repetitions = 1;
        reports[v * patterns.size() + k].push_back(run_stream(videos[v], params, c));
      }
    }
  }
  std::vector<ComparisonRow> rows;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    for (std::size_t k = 0; k < patterns.size(); ++k) {
      const auto& runs = reports[v * patterns.size() + k];
      RunReport rep = runs.front();
      for (std::size_t i = 0; i < rep.records.size(); ++i) {
        std::vector<double> lat;
        for (const auto& run : runs) lat.push_back(run.records[i].latency_s);
        rep.records[i].latency_s = median(lat);
      }
      rep.recompute();
      rows.push_back(ComparisonRow{rep.pattern, repeats[v], videos[v].length(), rep.mean_latency_s, rep.peak_slots,
                                   rep.peak_floats, rep.mean_iou});
    }
  }
  return rows;
}

std::vector<AblationRow> ablate_strategies(const SyntheticVideo& video, const std::vector<BankStrategy>& strategies,
                                           const ModelParams& params, const PipelineConfig& config) {
  std::vector<AblationRow> rows;
  for (const BankStrategy& s : strategies) {
    PipelineConfig c = config;
    c.pattern = Pattern::Sam;
    c.strategy = s;
    c.timing_repetitions = 1;
    const RunReport rep = run_stream(video, params, c);
    rows.push_back(AblationRow{s.name(), s.slot_count(), rep.peak_slots, rep.mean_iou});
  }
  return rows;
}

// ---------------------------------------------------------------- reports

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

ReportFormat parse_report_format(const std::string& text) {
  if (text == "csv") return ReportFormat::Csv;
  if (text == "json") return ReportFormat::Json;
  throw ConfigError("unknown report format '" + text + "'");
}

ReportFormat report_format_for(const std::filesystem::path& path) {
  return path.extension() == ".json" ? ReportFormat::Json : ReportFormat::Csv;
}

std::string to_csv(const RunReport& report) {
  std::string out = "frame_index,latency_s,slots,floats,iou_mean\n";
  for (const auto& r : report.records) {
    out += std::to_string(r.frame_index) + "," + format_double(r.latency_s) + "," + std::to_string(r.slots) + "," +
           std::to_string(r.floats) + "," + format_double(r.iou_mean) + "\n";
  }
  return out;
}

std::string to_json(const RunReport& report) {
  json j;
  j["pattern"] = report.pattern;
  j["strategy"] = report.strategy;
  j["theta"] = report.theta;
  j["repeat_factor"] = report.repeat_factor;
  j["metric"] = "region similarity J (IoU)";
  json records = json::array();
  for (const auto& r : report.records) {
    records.push_back(json{{"frame_index", r.frame_index},
                           {"latency_s", r.latency_s},
                           {"slots", r.slots},
                           {"floats", r.floats},
                           {"iou_mean", r.iou_mean},
                           {"iou", r.iou}});
  }
  j["records"] = std::move(records);
  j["aggregates"] = json{{"mean_latency_s", report.mean_latency_s},
                         {"peak_slots", report.peak_slots},
                         {"peak_floats", report.peak_floats},
                         {"mean_iou", report.mean_iou}};
  return j.dump(2) + "\n";
}

RunReport run_report_from_json(const std::string& text) {
  const json j = json::parse(text);
  RunReport r;
  r.pattern = j.at("pattern").get<std::string>();
  r.strategy = j.at("strategy").get<std::string>();
  r.theta = j.at("theta").get<int>();
  r.repeat_factor = j.at("repeat_factor").get<int>();
  for (const auto& jr : j.at("records")) {
    FrameRecord fr;
    fr.frame_index = jr.at("frame_index").get<int>();
    fr.latency_s = jr.at("latency_s").get<double>();
    fr.slots = jr.at("slots").get<Index>();
    fr.floats = jr.at("floats").get<Index>();
    fr.iou_mean = jr.at("iou_mean").get<double>();
    fr.iou = jr.at("iou").get<std::vector<double>>();
    r.records.push_back(std::move(fr));
  }
  const json& a = j.at("aggregates");
  r.mean_latency_s = a.at("mean_latency_s").get<double>();
  r.peak_slots = a.at("peak_slots").get<Index>();
  r.peak_floats = a.at("peak_floats").get<Index>();
  r.mean_iou = a.at("mean_iou").get<double>();
  return r;
}

std::string to_csv(const std::vector<ComparisonRow>& rows) {
  std::string out = "pattern,repeat_factor,frames,mean_latency_s,peak_slots,peak_floats,mean_iou\n";
  for (const auto& r : rows) {
    out += r.pattern + "," + std::to_string(r.repeat_factor) + "," + std::to_string(r.frames) + "," +
           format_double(r.mean_latency_s) + "," + std::to_string(r.peak_slots) + "," + std::to_string(r.peak_floats) +
           "," + format_double(r.mean_iou) + "\n";
  }
  return out;
}

std::string to_json(const std::vector<ComparisonRow>& rows) {
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back(json{{"pattern", r.pattern},
                     {"repeat_factor", r.repeat_factor},
                     {"frames", r.frames},
                     {"mean_latency_s", r.mean_latency_s},
                     {"peak_slots", r.peak_slots},
                     {"peak_floats", r.peak_floats},
                     {"mean_iou", r.mean_iou}});
  }
  return j.dump(2) + "\n";
}

std::string to_csv(const std::vector<AblationRow>& rows) {
  std::string out = "strategy,slot_count,peak_slots,mean_iou\n";
  for (const auto& r : rows) {
    out += "\"" + r.strategy + "\"," + std::to_string(r.slot_count) + "," + std::to_string(r.peak_slots) + "," +
           format_double(r.mean_iou) + "\n";
  }
  return out;
}

std::string to_json(const std::vector<AblationRow>& rows) {
  json j = json::array();
  for (const auto& r : rows) {
    j.push_back(json{{"strategy", r.strategy},
                     {"slot_count", r.slot_count},
                     {"peak_slots", r.peak_slots},
                     {"mean_iou", r.mean_iou}});
  }
  return j.dump(2) + "\n";
}

RunReport without_latency(RunReport report) {
  for (auto& r : report.records) r.latency_s = 0.0;
  report.mean_latency_s = 0.0;
  return report;
}

void write_text(const std::filesystem::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << content;
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

void emit_report(const RunReport& report, ReportFormat format, const std::filesystem::path& path) {
  write_text(path, format == ReportFormat::Json ? to_json(report) : to_csv(report));
}

void write_mask(const ObjectMask& mask, const std::string& format, const std::filesystem::path& path) {
  std::string out;
  if (format == "pgm") {
    out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n255\n";
    out.append(mask.labels.begin(), mask.labels.end());
  } else if (format == "txt") {
    for (Index y = 0; y < mask.height; ++y) {
      for (Index x = 0; x < mask.width; ++x) {
        if (x) out += ' ';
        out += std::to_string(mask.at(y, x));
      }
      out += '\n';
    }
  } else {
    throw ConfigError("unknown mask format '" + format + "'");
  }
  write_text(path, out);
}

ObjectMask read_text_mask(const std::filesystem::path& path, int num_objects) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::vector<int>> rows;
  for (std::string line; std::getline(is, line);) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    rows.emplace_back();
    for (int v; ls >> v;) rows.back().push_back(v);
  }
  if (rows.empty()) throw DimensionError("empty mask file " + path.string());
  ObjectMask m(static_cast<Index>(rows.size()), static_cast<Index>(rows[0].size()), num_objects);
  for (std::size_t y = 0; y < rows.size(); ++y) {
    if (rows[y].size() != rows[0].size()) throw DimensionError("ragged mask file " + path.string());
    for (std::size_t x = 0; x < rows[y].size(); ++x) {
      m.at(static_cast<Index>(y), static_cast<Index>(x)) = static_cast<std::uint8_t>(rows[y][x]);
    }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------- toy training

TrainClip make_train_clip(std::uint64_t seed, Index size, int num_objects, ShapeScale scale) {
  SyntheticVideo v = synth_base_clip(seed, 5, size, size, num_objects, scale);
  return TrainClip{std::move(v.frames), std::move(v.gt_masks)};
}

std::vector<TrainRecord> train(const TrainClip& clip, ModelParams& params, const LossWeights& weights,
                               const TrainConfig& config, const PerturbOptions& perturb) {
  auto rng = named_rng(config.seed, "perturb");
  std::vector<TrainRecord> records;
  for (int step = 0; step < config.steps; ++step) {
    const ObjectMask perturbed = perturb_mask(clip.gt_masks[0], rng, perturb);
    records.push_back(TrainRecord{step, train_step(clip, params, weights, config, perturbed)});
  }
  // Loss after the final update.
  TrainConfig eval = config;
  eval.lr = 0.0;
  const ObjectMask perturbed = perturb_mask(clip.gt_masks[0], rng, perturb);
  records.push_back(TrainRecord{config.steps, train_step(clip, params, weights, eval, perturbed)});
  return records;
}

std::string to_csv(const std::vector<TrainRecord>& records) {
  std::string out = "step,L_Seg,L_UG,L_MC,total\n";
  for (const auto& r : records) {
    out += std::to_string(r.step) + "," + format_double(r.loss.seg) + "," + format_double(r.loss.ug) + "," +
           format_double(r.loss.mc) + "," + format_double(r.loss.total) + "\n";
  }
  return out;
}

}  // namespace rdevos
