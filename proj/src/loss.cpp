#include "bsm/loss.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

namespace bsm::loss {

using dsp::Waveform;

void LossConfig::validate() const {
  if (lambda_time < 0.0)
    throw std::invalid_argument("loss: lambda_time must be >= 0");
  if (stft_windows.empty())
    throw std::invalid_argument("loss: need at least one STFT window");
  for (size_t i = 0; i < stft_windows.size(); ++i) {
    if (stft_windows[i] <= stft_hop)
      throw std::invalid_argument("loss: window " +
                                  std::to_string(stft_windows[i]) +
                                  " must exceed hop " +
                                  std::to_string(stft_hop));
    if (i > 0 && stft_windows[i] >= stft_windows[i - 1])
      throw std::invalid_argument("loss: windows must descend");
  }
}

Tensor separation_loss(const std::vector<Tensor>& est, const Waveform& ref,
                       const LossConfig& cfg) {
  cfg.validate();
  if (est.size() != ref.channels.size())
    throw std::invalid_argument("loss: channel count mismatch");
  Tensor total;
  for (size_t c = 0; c < est.size(); ++c) {
    const auto& e = est[c];
    const auto& r = ref.channels[c];
    if (e.rank() != 1 ||
        e.numel() != static_cast<int64_t>(r.size()))
      throw std::invalid_argument(
          "loss: length mismatch (est " + std::to_string(e.numel()) +
          ", ref " + std::to_string(r.size()) + ")");
    Tensor ref_t = Tensor::from_data({e.numel()}, r);
    Tensor diff = sub(e, ref_t);
    Tensor term = scale(l1(diff), cfg.lambda_time);
    for (int w : cfg.stft_windows) {
      auto se = dsp::stft(e, w, cfg.stft_hop, ref.sample_rate);
      auto sr = dsp::stft(ref_t, w, cfg.stft_hop, ref.sample_rate);
      // L1 over both planes of the complex difference.
      term = add(term, l1(sub(se.coeffs, sr.coeffs)));
    }
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

double separation_loss(const Waveform& est, const Waveform& ref,
                       const LossConfig& cfg) {
  std::vector<Tensor> est_t;
  for (const auto& c : est.channels)
    est_t.push_back(Tensor::from_data({static_cast<int64_t>(c.size())}, c));
  return separation_loss(est_t, ref, cfg).item();
}

// ---------------------------------------------------------------------------
// SDR and aggregates

namespace {
constexpr double kSdrEps = 1e-12;
}

double sdr(const std::vector<double>& ref, const std::vector<double>& est) {
  if (ref.size() != est.size())
    throw std::invalid_argument("sdr: length mismatch (" +
                                std::to_string(ref.size()) + " vs " +
                                std::to_string(est.size()) + ")");
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < ref.size(); ++i) {
    num += ref[i] * ref[i];
    const double d = ref[i] - est[i];
    den += d * d;
  }
  return 10.0 * std::log10((num + kSdrEps) / (den + kSdrEps));
}

double sdr(const Waveform& ref, const Waveform& est) {
  if (ref.channels.size() != est.channels.size())
    throw std::invalid_argument("sdr: channel count mismatch");
  double num = 0.0, den = 0.0;
  for (size_t c = 0; c < ref.channels.size(); ++c) {
    if (ref.channels[c].size() != est.channels[c].size())
      throw std::invalid_argument("sdr: length mismatch");
    for (size_t i = 0; i < ref.channels[c].size(); ++i) {
      num += ref.channels[c][i] * ref.channels[c][i];
      const double d = ref.channels[c][i] - est.channels[c][i];
      den += d * d;
    }
  }
  return 10.0 * std::log10((num + kSdrEps) / (den + kSdrEps));
}

double median(std::vector<double> values) {
  if (values.empty())
    throw std::invalid_argument("median: empty input");
  std::sort(values.begin(), values.end());
  const size_t n = values.size();
  return n % 2 == 1 ? values[n / 2]
                    : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

EvalReport evaluate_tracks(const std::vector<std::string>& names,
                           const std::vector<Waveform>& refs,
                           const std::vector<Waveform>& ests,
                           int sample_rate) {
  if (names.size() != refs.size() || refs.size() != ests.size())
    throw std::invalid_argument("evaluate_tracks: list sizes differ");
  if (refs.empty())
    throw std::invalid_argument("evaluate_tracks: no tracks");
  EvalReport report;
  std::vector<double> track_sdrs, track_medians;
  for (size_t i = 0; i < refs.size(); ++i) {
    TrackEval te;
    te.name = names[i];
    te.track_sdr = sdr(refs[i], ests[i]);
    track_sdrs.push_back(te.track_sdr);

    const int64_t chunk = sample_rate;  // exactly one second of samples
    const int64_t nchunks = refs[i].num_samples() / chunk;
    for (int64_t k = 0; k < nchunks; ++k) {
      double num = 0.0, den = 0.0;
      for (size_t c = 0; c < refs[i].channels.size(); ++c)
        for (int64_t j = k * chunk; j < (k + 1) * chunk; ++j) {
          const double rv = refs[i].channels[c][size_t(j)];
          const double dv = rv - ests[i].channels[c][size_t(j)];
          num += rv * rv;
          den += dv * dv;
        }
      te.chunk_sdrs.push_back(
          10.0 * std::log10((num + kSdrEps) / (den + kSdrEps)));
    }
    if (te.chunk_sdrs.empty()) {
      te.in_csdr = false;
      report.notes.push_back("track " + te.name +
                             " shorter than 1 s, excluded from csdr");
    } else {
      te.median_chunk_sdr = median(te.chunk_sdrs);
      track_medians.push_back(te.median_chunk_sdr);
    }
    report.tracks.push_back(std::move(te));
  }
  double mean = 0.0;
  for (double v : track_sdrs) mean += v;
  report.usdr = mean / double(track_sdrs.size());
  if (!track_medians.empty()) {
    report.csdr = median(track_medians);
    report.csdr_track_count = static_cast<int64_t>(track_medians.size());
  }
  return report;
}

double csdr(const std::vector<Waveform>& refs,
            const std::vector<Waveform>& ests, int sample_rate) {
  std::vector<std::string> names(refs.size());
  for (size_t i = 0; i < names.size(); ++i)
    names[i] = "t" + std::to_string(i);
  return evaluate_tracks(names, refs, ests, sample_rate).csdr;
}

double usdr(const std::vector<Waveform>& refs,
            const std::vector<Waveform>& ests) {
  std::vector<std::string> names(refs.size());
  for (size_t i = 0; i < names.size(); ++i)
    names[i] = "t" + std::to_string(i);
  const int sr = refs.empty() ? 1 : refs[0].sample_rate;
  return evaluate_tracks(names, refs, ests, sr).usdr;
}

// ---------------------------------------------------------------------------
// Onset analysis

std::vector<ActivitySegment> detect_vocal_activity(
    const std::vector<double>& stem, int sample_rate, double frame_seconds,
    double threshold_db) {
  const int64_t frame =
      std::max<int64_t>(1, std::llround(frame_seconds * sample_rate));
  const int64_t nframes = static_cast<int64_t>(stem.size()) / frame;
  if (nframes == 0) return {};
  std::vector<double> rms(size_t(nframes), 0.0);
  double peak = 0.0;
  for (int64_t f = 0; f < nframes; ++f) {
    double acc = 0.0;
    for (int64_t j = f * frame; j < (f + 1) * frame; ++j)
      acc += stem[size_t(j)] * stem[size_t(j)];
    rms[size_t(f)] = std::sqrt(acc / double(frame));
    peak = std::max(peak, rms[size_t(f)]);
  }
  if (peak <= 0.0) return {};
  const double threshold = peak * std::pow(10.0, threshold_db / 20.0);
  std::vector<ActivitySegment> segments;
  int64_t start = -1;
  for (int64_t f = 0; f <= nframes; ++f) {
    const bool active = f < nframes && rms[size_t(f)] > threshold;
    if (active && start < 0) start = f;
    if (!active && start >= 0) {
      segments.push_back({start * frame, f * frame});
      start = -1;
    }
  }
  return segments;
}

std::vector<OnsetBinRow> onset_duration_report(
    const Waveform& vocal_ref, const Waveform& est, const Waveform& mixture,
    int sample_rate, const std::vector<std::pair<double, double>>& bins) {
  if (vocal_ref.num_samples() != est.num_samples() ||
      vocal_ref.num_samples() != mixture.num_samples())
    throw std::invalid_argument("onset report: signals must be aligned");
  // Detection runs on the first channel of the ground-truth stem.
  auto segments =
      detect_vocal_activity(vocal_ref.channels[0], sample_rate);

  std::vector<OnsetBinRow> rows;
  for (auto [lo, hi] : bins) {
    OnsetBinRow row;
    row.lo_seconds = lo;
    row.hi_seconds = hi;
    double acc = 0.0, acc_base = 0.0;
    for (const auto& seg : segments) {
      const double dur = double(seg.end - seg.start) / sample_rate;
      if (dur < lo || dur >= hi) continue;
      double num = 0.0, den = 0.0, den_base = 0.0;
      for (size_t c = 0; c < vocal_ref.channels.size(); ++c)
        for (int64_t j = seg.start; j < seg.end; ++j) {
          const double rv = vocal_ref.channels[c][size_t(j)];
          const double dv = rv - est.channels[c][size_t(j)];
          const double bv = rv - mixture.channels[c][size_t(j)];
          num += rv * rv;
          den += dv * dv;
          den_base += bv * bv;
        }
      acc += 10.0 * std::log10((num + kSdrEps) / (den + kSdrEps));
      acc_base += 10.0 * std::log10((num + kSdrEps) / (den_base + kSdrEps));
      ++row.segments;
    }
    if (row.segments > 0) {
      row.mean_sdr = acc / double(row.segments);
      row.mean_baseline_sdr = acc_base / double(row.segments);
    }
    rows.push_back(row);
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report serialization

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt_seconds(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

}  // namespace

std::string EvalReport::to_text() const {
  std::ostringstream os;
  os << "# eval report: name value count\n";
  for (const auto& n : notes) os << "# note: " << n << "\n";
  os << "usdr " << fmt_double(usdr) << " " << tracks.size() << "\n";
  if (csdr_track_count > 0)
    os << "csdr " << fmt_double(csdr) << " " << csdr_track_count << "\n";
  for (const auto& t : tracks) {
    os << "track_sdr." << t.name << " " << fmt_double(t.track_sdr) << " 1\n";
    if (t.in_csdr)
      os << "track_median_chunk_sdr." << t.name << " "
         << fmt_double(t.median_chunk_sdr) << " " << t.chunk_sdrs.size()
         << "\n";
    for (size_t k = 0; k < t.chunk_sdrs.size(); ++k)
      os << "chunk_sdr." << t.name << "." << k << " "
         << fmt_double(t.chunk_sdrs[k]) << " 1\n";
  }
  for (const auto& row : onset) {
    const std::string tag =
        fmt_seconds(row.lo_seconds) + "-" + fmt_seconds(row.hi_seconds) + "s";
    os << "onset_sdr." << tag << " " << fmt_double(row.mean_sdr) << " "
       << row.segments << "\n";
    os << "onset_baseline_sdr." << tag << " "
       << fmt_double(row.mean_baseline_sdr) << " " << row.segments << "\n";
  }
  return os.str();
}

}  // namespace bsm::loss
