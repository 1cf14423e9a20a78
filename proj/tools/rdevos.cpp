// Command-line front end: synthesize videos, stream them through a memory
// pattern, compare patterns over repeat factors, ablate bank strategies and
// run the toy training loop.
#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "rdevos/harness.hpp"

namespace {

using namespace rdevos;

struct Common {
  std::string config_path;
  std::string video_path;
  std::string report_path;
  std::vector<std::string> overrides;  // key=value
};

Config load_config(const Common& c) {
  Config cfg = c.config_path.empty() ? Config{} : Config::load(c.config_path);
  for (const std::string& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.require_known(known_config_keys());
  return cfg;
}

SyntheticVideo video_for(const Common& c, const Config& cfg) {
  return c.video_path.empty() ? synth_video(SynthConfig::from(cfg)) : load_video(c.video_path);
}

void deliver(const std::string& path, const std::string& csv, const std::string& json) {
  if (path.empty()) {
    std::cout << csv;
    return;
  }
  write_text(path, report_format_for(path) == ReportFormat::Json ? json : csv);
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "flat key = value config file");
  cmd->add_option("--set", c.overrides, "config override key=value (repeatable)");
  cmd->add_option("--report", c.report_path, "report path (.json or .csv); CSV on stdout when absent");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Recurrent dynamic embedding memory banks for video object segmentation"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic long video");
  SynthConfig sc;
  std::string synth_out;
  synth->add_option("--seed", sc.seed);
  synth->add_option("--base-len", sc.base_length)->check(CLI::PositiveNumber);
  synth->add_option("--repeat", sc.repeat)->check(CLI::PositiveNumber);
  synth->add_option("--size", sc.size)->check(CLI::PositiveNumber);
  synth->add_option("--objects", sc.objects)->check(CLI::Range(1, 255));
  synth->add_option("--out", synth_out, "video archive path")->required();

  // run
  auto* run = app.add_subcommand("run", "stream a video through one memory pattern");
  Common run_c;
  add_common(run, run_c);
  std::optional<std::string> pattern, strategy;
  std::optional<int> theta;
  std::optional<long long> topk;
  std::string masks_dir;
  bool no_latency = false;
  run->add_option("--video", run_c.video_path, "video archive from `synth`; synthesized from config when absent");
  run->add_option("--pattern", pattern, "stm | ema | sam");
  run->add_option("--theta", theta);
  run->add_option("--topk", topk);
  run->add_option("--strategy", strategy, "bank strategy for sam, e.g. \"2F & L & RDE\"");
  run->add_option("--masks-dir", masks_dir, "write predicted masks here");
  run->add_flag("--no-latency", no_latency, "zero latency fields (byte-stable reports)");

  // compare
  auto* compare = app.add_subcommand("compare", "compare patterns across repeat factors");
  Common cmp_c;
  add_common(compare, cmp_c);
  std::string patterns_arg = "stm,sam";
  std::string repeats_arg = "1,10,15,20";
  compare->add_option("--video", cmp_c.video_path, "video archive from `synth`; its base clip is the R = 1 unit");
  compare->add_option("--patterns", patterns_arg);
  compare->add_option("--repeats", repeats_arg);

  // ablate
  auto* ablate = app.add_subcommand("ablate", "mean IoU per bank strategy");
  Common abl_c;
  add_common(ablate, abl_c);
  std::vector<std::string> strategies;
  ablate->add_option("--video", abl_c.video_path);
  ablate->add_option("--strategies", strategies, "strategy names, comma separated; all ten when absent")
      ->delimiter(',');

  // train
  auto* train_cmd = app.add_subcommand("train", "toy optimization on a five-frame clip");
  Common tr_c;
  add_common(train_cmd, tr_c);
  Index train_size = 16;
  int train_objects = 2;
  train_cmd->add_option("--size", train_size);
  train_cmd->add_option("--objects", train_objects);

  try {
    app.parse(argc, argv);

    if (*synth) {
      const SyntheticVideo v = synth_video(sc);
      save_video(v, synth_out);
      std::cout << "wrote " << v.length() << " frames (seed " << v.seed << ") to " << synth_out << "\n";
      return 0;
    }

    if (*run) {
      if (pattern) run_c.overrides.push_back("memory.pattern=" + *pattern);
      if (theta) run_c.overrides.push_back("memory.theta=" + std::to_string(*theta));
      if (topk) run_c.overrides.push_back("readout.topk=" + std::to_string(*topk));
      if (strategy) run_c.overrides.push_back("memory.strategy=" + *strategy);
      const Config cfg = load_config(run_c);
      const PipelineConfig pc = PipelineConfig::from(cfg);
      const ModelParams params = ModelParams::init(pc.encoder, pc.sam, pc.decoder);
      RunReport report = run_stream(video_for(run_c, cfg), params, pc, masks_dir);
      if (no_latency) report = without_latency(std::move(report));
      deliver(run_c.report_path, to_csv(report), to_json(report));
      return 0;
    }

    if (*compare) {
      const Config cfg = load_config(cmp_c);
      const PipelineConfig pc = PipelineConfig::from(cfg);
      std::vector<Pattern> patterns;
      for (const std::string& p : split_list(patterns_arg)) patterns.push_back(parse_pattern(p));
      SyntheticVideo unit;
      if (cmp_c.video_path.empty()) {
        SynthConfig s = SynthConfig::from(cfg);
        unit = synth_base_clip(s.seed, s.base_length, s.size, s.size, s.objects);
      } else {
        unit = base_clip_of(load_video(cmp_c.video_path));
      }
      const ModelParams params = ModelParams::init(pc.encoder, pc.sam, pc.decoder);
      const auto rows = compare_patterns(unit, patterns, parse_int_list(repeats_arg), params, pc);
      deliver(cmp_c.report_path, to_csv(rows), to_json(rows));
      return 0;
    }

    if (*ablate) {
      const Config cfg = load_config(abl_c);
      const PipelineConfig pc = PipelineConfig::from(cfg);
      std::vector<BankStrategy> list;
      for (const std::string& s : strategies) list.push_back(BankStrategy::parse(s));
      if (list.empty()) list = ablation_strategies();
      const ModelParams params = ModelParams::init(pc.encoder, pc.sam, pc.decoder);
      const auto rows = ablate_strategies(video_for(abl_c, cfg), list, params, pc);
      deliver(abl_c.report_path, to_csv(rows), to_json(rows));
      return 0;
    }

    if (*train_cmd) {
      // Toy-scale defaults; any of them can be overridden through --config/--set.
      Config cfg;
      cfg.set("encoder.cv", "64");
      cfg.set("sam.pool", "1");
      const Config user = load_config(tr_c);
      for (const auto& [k, v] : user.entries()) cfg.set(k, v);
      const PipelineConfig pc = PipelineConfig::from(cfg);
      const TrainConfig tc = TrainConfig::from(cfg);
      ModelParams params = ModelParams::init(pc.encoder, pc.sam, pc.decoder);
      const TrainClip clip = make_train_clip(tc.seed, train_size, train_objects, kTrainShapeScale);
      const auto records = train(clip, params, LossWeights::from(cfg), tc, PerturbOptions::from(cfg));
      if (tr_c.report_path.empty()) {
        std::cout << to_csv(records);
      } else {
        write_text(tr_c.report_path, to_csv(records));
      }
      std::cerr << "loss " << records.front().loss.total << " -> " << records.back().loss.total << "\n";
      return 0;
    }
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
