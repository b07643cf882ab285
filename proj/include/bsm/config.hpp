#pragma once

// Run configuration: one flat dotted-key config file (`model.d = 16`,
// `#` comments) plus command-line `--set key=value` overrides. Every key is
// validated against the known set; unknown keys are errors, never ignored.

#include <map>
#include <string>
#include <vector>

#include "bsm/data.hpp"
#include "bsm/loss.hpp"
#include "bsm/model.hpp"
#include "bsm/trainer.hpp"

namespace bsm::config {

struct RunConfig {
  model::ModelConfig model;
  trainer::TrainConfig train;
  loss::LossConfig loss;

  std::string data_dir;        // stem directory; empty = synthetic pool
  int64_t synth_tracks = 2;    // pool size when synthesizing
  data::SynthSpec synth;       // per-track spec (seed offset per track)
  bool synth_auto_pattern = true;
  double eval_segment_seconds = 8.0;

  // Fully validated (throws on any bad value or unknown key).
  static RunConfig load(const std::string& path,
                        const std::vector<std::string>& overrides = {});
  static RunConfig from_map(std::map<std::string, std::string> kv);

  // Builds the training pool: loads data_dir when set, otherwise
  // synthesizes synth_tracks tracks with per-track seeds.
  std::vector<data::TrackStems> make_pool() const;
};

// `key=value` pairs from a config file; throws on unreadable files or
// malformed lines.
std::map<std::string, std::string> parse_config_file(const std::string& path);

}  // namespace bsm::config
