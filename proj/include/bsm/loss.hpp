#pragma once

// Training loss (time-domain L1 + multi-resolution STFT L1) and evaluation
// metrics (SDR, chunked/utterance aggregates, vocal-onset-duration table).

#include <cstdint>
#include <string>
#include <vector>

#include "bsm/dsp.hpp"
#include "bsm/tensor.hpp"

namespace bsm::loss {

struct LossConfig {
  double lambda_time = 10.0;
  std::vector<int> stft_windows = {4096, 2048, 1024, 512, 256};
  int stft_hop = 147;

  void validate() const;  // windows descending, all > hop
};

// lambda_time * ||est - ref||_1  +  sum_f ( ||re diff||_1 + ||im diff||_1 ).
// One tensor per channel; channel terms add. Throws on length mismatch.
Tensor separation_loss(const std::vector<Tensor>& est,
                       const dsp::Waveform& ref, const LossConfig& cfg);
double separation_loss(const dsp::Waveform& est, const dsp::Waveform& ref,
                       const LossConfig& cfg);

// Energy-ratio SDR in dB: 10 log10((sum s^2 + eps)/(sum (s-s_hat)^2 + eps)),
// eps = 1e-12. Stereo is computed over concatenated channels.
double sdr(const std::vector<double>& ref, const std::vector<double>& est);
double sdr(const dsp::Waveform& ref, const dsp::Waveform& est);

// Even-count median = mean of the two central values.
double median(std::vector<double> values);

struct TrackEval {
  std::string name;
  double track_sdr = 0.0;
  std::vector<double> chunk_sdrs;      // 1-second chunks, partial dropped
  double median_chunk_sdr = 0.0;
  bool in_csdr = true;                 // false for sub-second tracks
};

struct OnsetBinRow {
  double lo_seconds = 0.0;
  double hi_seconds = 0.0;
  int64_t segments = 0;
  double mean_sdr = 0.0;           // mean of per-segment SDRs
  double mean_baseline_sdr = 0.0;  // same, with the mixture as estimate
};

struct EvalReport {
  std::vector<TrackEval> tracks;
  double usdr = 0.0;
  double csdr = 0.0;
  int64_t csdr_track_count = 0;
  std::vector<OnsetBinRow> onset;
  std::vector<std::string> notes;

  // Line-oriented "name value count" records (full double precision) plus
  // '#'-prefixed notes; chunk values are included so every aggregate can be
  // recomputed from the file.
  std::string to_text() const;
};

// Per-track SDRs, 1-second chunk SDRs and the cSDR/uSDR aggregates.
EvalReport evaluate_tracks(const std::vector<std::string>& names,
                           const std::vector<dsp::Waveform>& refs,
                           const std::vector<dsp::Waveform>& ests,
                           int sample_rate);

double csdr(const std::vector<dsp::Waveform>& refs,
            const std::vector<dsp::Waveform>& ests, int sample_rate);
double usdr(const std::vector<dsp::Waveform>& refs,
            const std::vector<dsp::Waveform>& ests);

// Vocal-activity detector: non-overlapping 50 ms frames, a frame is active
// when its RMS is above peak-frame RMS - 40 dB. Returns [start, end) sample
// ranges of contiguous active runs.
struct ActivitySegment {
  int64_t start = 0;
  int64_t end = 0;
};
std::vector<ActivitySegment> detect_vocal_activity(
    const std::vector<double>& stem, int sample_rate,
    double frame_seconds = 0.05, double threshold_db = -40.0);

// Groups ground-truth vocal activity segments by duration bin and reports
// the mean per-segment SDR of the estimate (and of the mixture as a
// baseline) over each bin's segments.
std::vector<OnsetBinRow> onset_duration_report(
    const dsp::Waveform& vocal_ref, const dsp::Waveform& est,
    const dsp::Waveform& mixture, int sample_rate,
    const std::vector<std::pair<double, double>>& bins = {{1.0, 2.0},
                                                          {2.0, 4.0},
                                                          {4.0, 8.0}});

}  // namespace bsm::loss
