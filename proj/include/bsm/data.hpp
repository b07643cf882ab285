#pragma once

// Synthetic stem generation, stem-directory loading and the random-mix
// training augmentation.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bsm/dsp.hpp"

namespace bsm::data {

struct TrackStems {
  std::string name;
  dsp::Waveform vocals, drums, bass, other;
  dsp::Waveform mixture;  // sum of the four stems

  int sample_rate() const { return vocals.sample_rate; }
  int64_t num_samples() const { return vocals.num_samples(); }
};

struct VocalEvent {
  double onset_s = 0.0;
  double length_s = 0.0;
  double f0_hz = 220.0;
  double vib_depth_hz = 4.0;  // peak frequency deviation
  double vib_rate_hz = 5.0;
};

struct SynthSpec {
  int sample_rate = 8000;
  double duration_s = 16.0;
  std::vector<VocalEvent> pattern;  // empty = silent vocal stem
  double drum_rate_hz = 1.5;
  double bass_f0_hz = 70.0;
  uint64_t seed = 1;

  void validate() const;  // onsets non-overlapping, inside the duration

  // Intermittent vocal pattern with one segment per duration bin
  // (~1.5 s, ~3 s, ~6 s) plus short extras while room remains;
  // deterministic in (seed, duration).
  static std::vector<VocalEvent> auto_pattern(double duration_s,
                                              uint64_t seed);
};

// Deterministic per spec/seed. vocals: f0 + 3 partials with vibrato, gated
// by the onset pattern with 10 ms cosine ramps; drums: periodic decaying
// noise bursts; bass: low sine; other: low-passed noise bed. All stems are
// scaled together so the mixture peak is <= 0.9 and the mixture is the
// exact elementwise stem sum.
TrackStems synth_stems(const SynthSpec& spec);

struct RandomMixOptions {
  double clip_seconds = 8.0;
  double gain_db_range = 3.0;   // uniform in [-range, +range]
  double polarity_prob = 0.5;   // per-stem sign flip
  bool independent_sources = true;  // false: one track/offset for all stems
};

struct MixedClip {
  dsp::Waveform mixture;
  dsp::Waveform vocal_target;
};

// Samples one clip per source type (track and offset chosen independently
// unless disabled), applies random gain and polarity per stem, and sums.
// Throws when the clip is longer than every track in the pool.
MixedClip random_mix(const std::vector<TrackStems>& pool,
                     const RandomMixOptions& opt, std::mt19937_64& g);

struct StemDirResult {
  std::vector<TrackStems> tracks;
  std::vector<std::string> errors;  // one message per failed track
};

// Layout: <root>/<track>/{vocals,drums,bass,other}.wav. Tracks that fail to
// load are reported in errors; the others still load.
StemDirResult load_stem_dir(const std::string& root);

// Writes the four stem WAVs of a track into <root>/<name>/.
void write_track_stems(const std::string& root, const TrackStems& stems);

}  // namespace bsm::data
