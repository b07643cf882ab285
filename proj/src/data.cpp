#include "bsm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <stdexcept>

#include "bsm/rng.hpp"

namespace bsm::data {

using dsp::Waveform;
namespace fs = std::filesystem;

void SynthSpec::validate() const {
  if (sample_rate <= 0 || duration_s <= 0.0)
    throw std::invalid_argument("synth: rate and duration must be positive");
  std::vector<std::pair<double, double>> spans;
  for (const auto& ev : pattern) {
    if (ev.onset_s < 0.0 || ev.length_s <= 0.0 ||
        ev.onset_s + ev.length_s > duration_s)
      throw std::invalid_argument("synth: vocal event outside the duration");
    if (ev.f0_hz <= 0.0 || ev.f0_hz * 4.0 >= sample_rate / 2.0)
      throw std::invalid_argument("synth: f0 too high for the sample rate");
    spans.emplace_back(ev.onset_s, ev.onset_s + ev.length_s);
  }
  std::sort(spans.begin(), spans.end());
  for (size_t i = 1; i < spans.size(); ++i)
    if (spans[i].first < spans[i - 1].second)
      throw std::invalid_argument("synth: vocal events overlap");
}

std::vector<VocalEvent> SynthSpec::auto_pattern(double duration_s,
                                                uint64_t seed) {
  std::mt19937_64 g(rng::derive_seed(seed, 0xA7));
  std::vector<VocalEvent> events;
  double cursor = rng::uniform(g, 0.2, 0.6);
  // One segment per onset-duration bin, then short extras while room lasts.
  const double base_lengths[] = {1.5, 3.0, 6.0};
  for (double base : base_lengths) {
    const double len = base * rng::uniform(g, 0.9, 1.05);
    if (cursor + len > duration_s) break;
    VocalEvent ev;
    ev.onset_s = cursor;
    ev.length_s = len;
    ev.f0_hz = rng::uniform(g, 200.0, 380.0);
    ev.vib_depth_hz = rng::uniform(g, 2.0, 6.0);
    ev.vib_rate_hz = rng::uniform(g, 4.0, 6.5);
    events.push_back(ev);
    cursor += len + rng::uniform(g, 0.4, 0.9);
  }
  while (cursor + 1.2 < duration_s) {
    VocalEvent ev;
    ev.onset_s = cursor;
    ev.length_s = rng::uniform(g, 1.0, 1.8);
    if (ev.onset_s + ev.length_s > duration_s) break;
    ev.f0_hz = rng::uniform(g, 200.0, 380.0);
    ev.vib_depth_hz = rng::uniform(g, 2.0, 6.0);
    ev.vib_rate_hz = rng::uniform(g, 4.0, 6.5);
    events.push_back(ev);
    cursor += ev.length_s + rng::uniform(g, 0.4, 0.9);
  }
  return events;
}

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<double> render_vocals(const SynthSpec& spec) {
  const int64_t n = std::llround(spec.duration_s * spec.sample_rate);
  std::vector<double> v(static_cast<size_t>(n), 0.0);
  const double sr = spec.sample_rate;
  const double ramp_s = 0.010;
  static constexpr double kPartialAmp[4] = {1.0, 0.5, 0.33, 0.25};
  for (const auto& ev : spec.pattern) {
    const int64_t start = std::llround(ev.onset_s * sr);
    const int64_t len = std::llround(ev.length_s * sr);
    const int64_t ramp = std::max<int64_t>(1, std::llround(ramp_s * sr));
    for (int64_t j = 0; j < len && start + j < n; ++j) {
      const double t = double(j) / sr;
      // phase of the vibrato-modulated fundamental:
      // integral of f0 + depth*sin(2 pi rate t)
      const double phase =
          kTwoPi * (ev.f0_hz * t +
                    ev.vib_depth_hz *
                        (1.0 - std::cos(kTwoPi * ev.vib_rate_hz * t)) /
                        (kTwoPi * ev.vib_rate_hz));
      double s = 0.0;
      for (int kpar = 1; kpar <= 4; ++kpar)
        s += kPartialAmp[kpar - 1] * std::sin(double(kpar) * phase);
      double env = 1.0;
      if (j < ramp)
        env = 0.5 - 0.5 * std::cos(std::numbers::pi * double(j) / double(ramp));
      else if (j >= len - ramp)
        env = 0.5 -
              0.5 * std::cos(std::numbers::pi * double(len - 1 - j) /
                             double(ramp));
      v[static_cast<size_t>(start + j)] = 0.30 * env * s;
    }
  }
  return v;
}

std::vector<double> render_drums(const SynthSpec& spec, std::mt19937_64& g) {
  const int64_t n = std::llround(spec.duration_s * spec.sample_rate);
  std::vector<double> d(static_cast<size_t>(n), 0.0);
  if (spec.drum_rate_hz <= 0.0) return d;
  const double sr = spec.sample_rate;
  const int64_t period = std::llround(sr / spec.drum_rate_hz);
  const int64_t burst = std::llround(0.09 * sr);
  const double tau = 0.030 * sr;
  for (int64_t at = 0; at < n; at += period)
    for (int64_t j = 0; j < burst && at + j < n; ++j)
      d[static_cast<size_t>(at + j)] +=
          0.5 * std::exp(-double(j) / tau) * rng::uniform(g, -1.0, 1.0);
  return d;
}

std::vector<double> render_bass(const SynthSpec& spec) {
  const int64_t n = std::llround(spec.duration_s * spec.sample_rate);
  std::vector<double> b(static_cast<size_t>(n));
  for (int64_t j = 0; j < n; ++j)
    b[static_cast<size_t>(j)] =
        0.40 * std::sin(kTwoPi * spec.bass_f0_hz * double(j) /
                        spec.sample_rate);
  return b;
}

std::vector<double> render_other(const SynthSpec& spec, std::mt19937_64& g) {
  const int64_t n = std::llround(spec.duration_s * spec.sample_rate);
  std::vector<double> o(static_cast<size_t>(n));
  // one-pole low-pass noise bed, cutoff ~500 Hz
  const double alpha =
      1.0 - std::exp(-kTwoPi * 500.0 / double(spec.sample_rate));
  double state = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    state += alpha * (rng::uniform(g, -1.0, 1.0) - state);
    o[static_cast<size_t>(j)] = 1.2 * state;
  }
  return o;
}

}  // namespace

TrackStems synth_stems(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 g(rng::derive_seed(spec.seed, 0x51E));
  TrackStems t;
  t.name = "synth" + std::to_string(spec.seed);
  const int sr = spec.sample_rate;

  std::vector<double> vocals = render_vocals(spec);
  std::vector<double> drums = render_drums(spec, g);
  std::vector<double> bass = render_bass(spec);
  std::vector<double> other = render_other(spec, g);

  const size_t n = vocals.size();
  std::vector<double> mix(n);
  double peak = 0.0;
  for (size_t i = 0; i < n; ++i) {
    mix[i] = vocals[i] + drums[i] + bass[i] + other[i];
    peak = std::max(peak, std::abs(mix[i]));
  }
  // one common factor keeps additivity exact
  const double scale = peak > 0.9 ? 0.9 / peak : 1.0;
  for (size_t i = 0; i < n; ++i) {
    vocals[i] *= scale;
    drums[i] *= scale;
    bass[i] *= scale;
    other[i] *= scale;
    mix[i] = vocals[i] + drums[i] + bass[i] + other[i];
  }

  t.vocals = Waveform::mono(std::move(vocals), sr);
  t.drums = Waveform::mono(std::move(drums), sr);
  t.bass = Waveform::mono(std::move(bass), sr);
  t.other = Waveform::mono(std::move(other), sr);
  t.mixture = Waveform::mono(std::move(mix), sr);
  return t;
}

// ---------------------------------------------------------------------------
// Random mixing

namespace {

std::vector<double> clip_of(const std::vector<double>& src, int64_t offset,
                            int64_t len) {
  return {src.begin() + offset, src.begin() + offset + len};
}

}  // namespace

MixedClip random_mix(const std::vector<TrackStems>& pool,
                     const RandomMixOptions& opt, std::mt19937_64& g) {
  if (pool.empty()) throw std::invalid_argument("random_mix: empty pool");
  const int sr = pool[0].sample_rate();
  const int64_t clip = std::llround(opt.clip_seconds * sr);
  bool any_fits = false;
  for (const auto& t : pool) any_fits |= t.num_samples() >= clip;
  if (!any_fits)
    throw std::invalid_argument(
        "random_mix: clip of " + std::to_string(clip) +
        " samples is longer than every track in the pool");

  auto pick = [&](auto stem_of) {
    // track and offset; tracks shorter than the clip are skipped
    for (;;) {
      const auto& t = pool[static_cast<size_t>(
          rng::uniform_int(g, 0, static_cast<int64_t>(pool.size())))];
      if (t.num_samples() < clip) continue;
      const int64_t max_off = t.num_samples() - clip;
      const int64_t off =
          max_off > 0 ? rng::uniform_int(g, 0, max_off + 1) : 0;
      return clip_of(stem_of(t).channels[0], off, clip);
    }
  };

  std::vector<std::vector<double>> stems;
  if (opt.independent_sources) {
    stems.push_back(pick([](const TrackStems& t) -> const Waveform& {
      return t.vocals;
    }));
    stems.push_back(pick([](const TrackStems& t) -> const Waveform& {
      return t.drums;
    }));
    stems.push_back(pick([](const TrackStems& t) -> const Waveform& {
      return t.bass;
    }));
    stems.push_back(pick([](const TrackStems& t) -> const Waveform& {
      return t.other;
    }));
  } else {
    // aligned: one (track, offset) serves all four stems
    for (;;) {
      const auto& t = pool[static_cast<size_t>(
          rng::uniform_int(g, 0, static_cast<int64_t>(pool.size())))];
      if (t.num_samples() < clip) continue;
      const int64_t max_off = t.num_samples() - clip;
      const int64_t off =
          max_off > 0 ? rng::uniform_int(g, 0, max_off + 1) : 0;
      stems.push_back(clip_of(t.vocals.channels[0], off, clip));
      stems.push_back(clip_of(t.drums.channels[0], off, clip));
      stems.push_back(clip_of(t.bass.channels[0], off, clip));
      stems.push_back(clip_of(t.other.channels[0], off, clip));
      break;
    }
  }

  for (auto& stem : stems) {
    const double gain_db = rng::uniform(g, -opt.gain_db_range,
                                        opt.gain_db_range);
    double factor = std::pow(10.0, gain_db / 20.0);
    if (rng::uniform01(g) < opt.polarity_prob) factor = -factor;
    for (auto& v : stem) v *= factor;
  }

  MixedClip out;
  std::vector<double> mix(static_cast<size_t>(clip), 0.0);
  for (const auto& stem : stems)
    for (size_t i = 0; i < mix.size(); ++i) mix[i] += stem[i];
  out.mixture = Waveform::mono(std::move(mix), sr);
  out.vocal_target = Waveform::mono(std::move(stems[0]), sr);
  return out;
}

// ---------------------------------------------------------------------------
// Stem directories

StemDirResult load_stem_dir(const std::string& root) {
  if (!fs::is_directory(root))
    throw std::runtime_error("stem dir: " + root + " is not a directory");
  std::vector<std::string> track_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) track_dirs.push_back(entry.path().string());
  std::sort(track_dirs.begin(), track_dirs.end());

  StemDirResult result;
  for (const auto& dir : track_dirs) {
    const std::string name = fs::path(dir).filename().string();
    try {
      TrackStems t;
      t.name = name;
      auto read_stem = [&](const char* stem) {
        const fs::path p = fs::path(dir) / (std::string(stem) + ".wav");
        if (!fs::exists(p))
          throw std::runtime_error("missing " + std::string(stem) + ".wav");
        return dsp::read_wav(p.string());
      };
      t.vocals = read_stem("vocals");
      t.drums = read_stem("drums");
      t.bass = read_stem("bass");
      t.other = read_stem("other");
      for (const Waveform* w : {&t.drums, &t.bass, &t.other}) {
        if (w->sample_rate != t.vocals.sample_rate)
          throw std::runtime_error("sample rate mismatch across stems");
        if (w->num_samples() != t.vocals.num_samples())
          throw std::runtime_error("stem lengths differ");
        if (w->num_channels() != t.vocals.num_channels())
          throw std::runtime_error("stem channel counts differ");
      }
      Waveform mix;
      mix.sample_rate = t.vocals.sample_rate;
      mix.channels.resize(size_t(t.vocals.num_channels()));
      for (size_t c = 0; c < mix.channels.size(); ++c) {
        mix.channels[c].assign(size_t(t.vocals.num_samples()), 0.0);
        for (const Waveform* w : {&t.vocals, &t.drums, &t.bass, &t.other})
          for (size_t i = 0; i < mix.channels[c].size(); ++i)
            mix.channels[c][i] += w->channels[c][i];
      }
      t.mixture = std::move(mix);
      result.tracks.push_back(std::move(t));
    } catch (const std::exception& e) {
      result.errors.push_back("track " + name + ": " + e.what());
    }
  }
  return result;
}

void write_track_stems(const std::string& root, const TrackStems& stems) {
  const fs::path dir = fs::path(root) / stems.name;
  fs::create_directories(dir);
  dsp::write_wav((dir / "vocals.wav").string(), stems.vocals);
  dsp::write_wav((dir / "drums.wav").string(), stems.drums);
  dsp::write_wav((dir / "bass.wav").string(), stems.bass);
  dsp::write_wav((dir / "other.wav").string(), stems.other);
}

}  // namespace bsm::data
