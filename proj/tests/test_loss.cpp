#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "bsm/loss.hpp"
#include "test_util.hpp"

using namespace bsm;
using namespace bsm::loss;
using dsp::Waveform;

namespace {

Waveform wave_of(std::vector<double> samples, int sr = 8000) {
  return Waveform::mono(std::move(samples), sr);
}

Waveform random_wave(uint64_t seed, size_t n, int sr = 8000) {
  auto g = testutil::rng(seed);
  return wave_of(testutil::random_vec(g, n, -0.5, 0.5), sr);
}

}  // namespace

TEST_CASE("loss config validation") {
  LossConfig ok;
  ok.validate();
  LossConfig bad = ok;
  bad.stft_windows = {256, 512};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.stft_windows = {256, 128};
  bad.stft_hop = 147;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("loss of identical signals is exactly zero") {
  LossConfig cfg;
  Waveform w = random_wave(1, 9000);
  CHECK(separation_loss(w, w, cfg) == 0.0);
}

TEST_CASE("single unit impulse matches the direct STFT evaluation") {
  LossConfig cfg;  // paper windows, hop 147, lambda 10
  const int64_t n = 8000, p = 4000;
  Waveform ref = wave_of(std::vector<double>(size_t(n), 0.0));
  std::vector<double> est_s(size_t(n), 0.0);
  est_s[size_t(p)] = 1.0;
  Waveform est = wave_of(est_s);

  // Direct evaluation: every frame of window W covering the impulse sees
  // w_hann(j) * e^{-2 pi i f j / W} at offset j = p + W/2 - t*hop.
  double expected = cfg.lambda_time * 1.0;
  for (int w : cfg.stft_windows) {
    const auto win = dsp::hann_window(w);
    const int64_t frames = dsp::stft_frames(n, cfg.stft_hop);
    const int64_t m = p + w / 2;  // impulse position in padded coordinates
    for (int64_t t = 0; t < frames; ++t) {
      const int64_t j = m - t * cfg.stft_hop;
      if (j < 0 || j >= w) continue;
      for (int64_t f = 0; f <= w / 2; ++f) {
        const double ang =
            -2.0 * std::numbers::pi * double(f) * double(j) / double(w);
        expected += win[size_t(j)] *
                    (std::abs(std::cos(ang)) + std::abs(std::sin(ang)));
      }
    }
  }
  const double got = separation_loss(est, ref, cfg);
  CHECK(got == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("loss dominates the weighted time-domain term") {
  LossConfig cfg;
  auto g = testutil::rng(2);
  for (int rep = 0; rep < 3; ++rep) {
    Waveform a = random_wave(10 + uint64_t(rep), 6000);
    Waveform b = random_wave(20 + uint64_t(rep), 6000);
    double l1_term = 0.0;
    for (size_t i = 0; i < a.channels[0].size(); ++i)
      l1_term += std::abs(a.channels[0][i] - b.channels[0][i]);
    CHECK(separation_loss(a, b, cfg) >=
          cfg.lambda_time * l1_term * (1.0 - 1e-12));
  }
  (void)g;
}

TEST_CASE("loss length mismatch raises") {
  LossConfig cfg;
  CHECK_THROWS_AS(
      separation_loss(random_wave(3, 1000), random_wave(4, 1001), cfg),
      std::invalid_argument);
}

TEST_CASE("loss gradient passes grad_check") {
  LossConfig cfg;
  cfg.stft_windows = {64, 32};
  cfg.stft_hop = 13;
  Waveform ref = random_wave(5, 300);
  auto g = testutil::rng(6);
  Tensor est = Tensor::from_data({300},
                                 testutil::random_vec(g, 300, -0.5, 0.5),
                                 true);
  auto make_loss = [&](const std::vector<Tensor>& p) {
    return separation_loss({p[0]}, ref, cfg);
  };
  auto report = grad_check(make_loss, {{"est", est}}, 1e-6, 1e-5);
  INFO(report.summary());
  CHECK(report.pass);
}

TEST_CASE("sdr closed forms") {
  Waveform s = random_wave(7, 8000);
  Waveform zero = wave_of(std::vector<double>(8000, 0.0));
  CHECK(sdr(s, zero) == doctest::Approx(0.0).epsilon(1e-9));

  Waveform half = s;
  for (auto& v : half.channels[0]) v *= 0.5;
  CHECK(sdr(s, half) == doctest::Approx(10.0 * std::log10(4.0)).epsilon(1e-6));
  CHECK(sdr(s, half) == doctest::Approx(6.0206).epsilon(1e-4));

  const double perfect = sdr(s, s);
  CHECK(std::isfinite(perfect));
  CHECK(perfect > 100.0);
}

TEST_CASE("sdr scale law at several factors") {
  Waveform s = random_wave(8, 8000);
  for (double alpha : {0.5, 0.9, 2.0}) {
    Waveform scaled = s;
    for (auto& v : scaled.channels[0]) v *= alpha;
    const double expect = -10.0 * std::log10((1.0 - alpha) * (1.0 - alpha));
    CHECK(sdr(s, scaled) == doctest::Approx(expect).epsilon(1e-9));
  }
}

TEST_CASE("median conventions") {
  CHECK(median({1.0, 2.0, 100.0}) == 2.0);
  CHECK(median({3.0, 5.0}) == 4.0);
  CHECK(median({7.0}) == 7.0);
  CHECK_THROWS_AS(median({}), std::invalid_argument);
}

namespace {

// Builds a 1-per-chunk scaled estimate whose chunk SDRs are the recomputable
// values -10 log10((1-alpha)^2).
Waveform chunk_scaled(const Waveform& ref, const std::vector<double>& alphas,
                      int sr) {
  Waveform est = ref;
  for (size_t k = 0; k < alphas.size(); ++k)
    for (int64_t j = int64_t(k) * sr; j < int64_t(k + 1) * sr; ++j)
      est.channels[0][size_t(j)] *= alphas[k];
  return est;
}

double alpha_for_sdr(double db) { return 1.0 - std::pow(10.0, -db / 20.0); }

}  // namespace

TEST_CASE("csdr takes the median over chunks and then tracks") {
  const int sr = 8000;
  Waveform ref = random_wave(9, size_t(3 * sr), sr);
  // chunk SDRs approximately {1, 2, 100} dB
  Waveform est = chunk_scaled(
      ref, {alpha_for_sdr(1.0), alpha_for_sdr(2.0), alpha_for_sdr(100.0)}, sr);
  auto report = evaluate_tracks({"one"}, {ref}, {est}, sr);
  REQUIRE(report.tracks[0].chunk_sdrs.size() == 3);
  // median chunk is the middle one, and csdr equals it exactly
  std::vector<double> sorted = report.tracks[0].chunk_sdrs;
  std::sort(sorted.begin(), sorted.end());
  CHECK(report.csdr == sorted[1]);
  CHECK(sorted[1] == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("csdr across two tracks uses the even-count convention") {
  const int sr = 8000;
  Waveform ref1 = random_wave(10, size_t(sr), sr);
  Waveform ref2 = random_wave(11, size_t(sr), sr);
  Waveform est1 = chunk_scaled(ref1, {alpha_for_sdr(3.0)}, sr);
  Waveform est2 = chunk_scaled(ref2, {alpha_for_sdr(5.0)}, sr);
  const double v = csdr({ref1, ref2}, {est1, est2}, sr);
  CHECK(v == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("csdr is robust to improving a chunk above the median") {
  const int sr = 8000;
  Waveform ref = random_wave(12, size_t(5 * sr), sr);
  std::vector<double> alphas = {alpha_for_sdr(1.0), alpha_for_sdr(2.0),
                                alpha_for_sdr(3.0), alpha_for_sdr(4.0),
                                alpha_for_sdr(5.0)};
  Waveform est = chunk_scaled(ref, alphas, sr);
  const double before = csdr({ref}, {est}, sr);
  // make the best chunk perfect: still above the median
  Waveform est2 = est;
  for (int64_t j = 4 * sr; j < 5 * sr; ++j)
    est2.channels[0][size_t(j)] = ref.channels[0][size_t(j)];
  CHECK(csdr({ref}, {est2}, sr) == before);
}

TEST_CASE("chunking is exactly one second, partial chunk dropped") {
  const int sr = 8000;
  Waveform ref = random_wave(13, size_t(2 * sr + sr / 2), sr);
  Waveform est = ref;
  auto report = evaluate_tracks({"t"}, {ref}, {est}, sr);
  CHECK(report.tracks[0].chunk_sdrs.size() == 2);  // floor(2.5)
}

TEST_CASE("tracks shorter than one second are excluded with a warning") {
  const int sr = 8000;
  Waveform ref_long = random_wave(14, size_t(2 * sr), sr);
  Waveform ref_short = random_wave(15, size_t(sr / 2), sr);
  auto report = evaluate_tracks({"long", "short"}, {ref_long, ref_short},
                                {ref_long, ref_short}, sr);
  CHECK(report.csdr_track_count == 1);
  CHECK(!report.tracks[1].in_csdr);
  REQUIRE(report.notes.size() == 1);
  CHECK(report.notes[0].find("short") != std::string::npos);
  // uSDR still covers both tracks
  CHECK(report.tracks.size() == 2);
}

TEST_CASE("usdr closed forms and permutation invariance") {
  const int sr = 8000;
  Waveform r1 = random_wave(16, size_t(sr), sr);
  Waveform r2 = random_wave(17, size_t(sr), sr);
  Waveform zero = wave_of(std::vector<double>(size_t(sr), 0.0), sr);
  Waveform half = r2;
  for (auto& v : half.channels[0]) v *= 0.5;

  CHECK(usdr({r1}, {zero}) == doctest::Approx(0.0).epsilon(1e-9));
  const double two = usdr({r1, r2}, {zero, half});
  CHECK(two == doctest::Approx(0.5 * (0.0 + 6.0206)).epsilon(1e-4));
  CHECK(usdr({r2, r1}, {half, zero}) == doctest::Approx(two).epsilon(1e-12));
}

TEST_CASE("onset detector finds constructed bursts in the right bins") {
  const int sr = 8000;
  const double dur = 12.0;
  std::vector<double> stem(size_t(dur * sr), 0.0);
  auto put_burst = [&](double at, double len) {
    for (int64_t j = int64_t(at * sr); j < int64_t((at + len) * sr); ++j)
      stem[size_t(j)] =
          0.5 * std::sin(2.0 * std::numbers::pi * 220.0 * double(j) / sr);
  };
  put_burst(1.0, 1.5);
  put_burst(5.0, 5.0);
  auto segments = detect_vocal_activity(stem, sr);
  REQUIRE(segments.size() == 2);
  CHECK(std::abs(double(segments[0].start) / sr - 1.0) < 0.06);
  CHECK(std::abs(double(segments[0].end - segments[0].start) / sr - 1.5) <
        0.11);

  Waveform ref = wave_of(stem, sr);
  Waveform mixture = random_wave(18, stem.size(), sr);
  for (size_t i = 0; i < stem.size(); ++i)
    mixture.channels[0][i] = stem[i] + 0.3 * mixture.channels[0][i];
  auto rows = onset_duration_report(ref, ref, mixture, sr);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].segments == 1);  // 1.5 s burst in [1,2)
  CHECK(rows[1].segments == 0);
  CHECK(rows[2].segments == 1);  // 5 s burst in [4,8)
  // est == ref on active segments -> eps-capped maximum
  CHECK(rows[0].mean_sdr > 100.0);
  CHECK(rows[2].mean_sdr > 100.0);
  // the mixture baseline is far worse
  CHECK(rows[0].mean_baseline_sdr < 30.0);
}

TEST_CASE("silent stem yields no segments") {
  std::vector<double> silent(16000, 0.0);
  CHECK(detect_vocal_activity(silent, 8000).empty());
}

TEST_CASE("report text re-aggregates exactly") {
  const int sr = 8000;
  Waveform r1 = random_wave(19, size_t(3 * sr), sr);
  Waveform r2 = random_wave(20, size_t(2 * sr), sr);
  Waveform e1 = chunk_scaled(
      r1, {alpha_for_sdr(1.0), alpha_for_sdr(7.0), alpha_for_sdr(3.0)}, sr);
  Waveform e2 = chunk_scaled(r2, {alpha_for_sdr(2.0), alpha_for_sdr(6.0)}, sr);
  auto report = evaluate_tracks({"a", "b"}, {r1, r2}, {e1, e2}, sr);
  const std::string text = report.to_text();

  // parse chunk values back and recompute the aggregates
  std::istringstream is(text);
  std::string line;
  std::map<std::string, std::vector<double>> chunks;
  double file_csdr = -1e9, file_usdr = -1e9;
  std::vector<double> file_track_sdrs;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string name;
    double value;
    int64_t count;
    ls >> name >> value >> count;
    if (name.rfind("chunk_sdr.", 0) == 0) {
      const auto track = name.substr(10, name.rfind('.') - 10);
      chunks[track].push_back(value);
    } else if (name == "csdr") {
      file_csdr = value;
    } else if (name == "usdr") {
      file_usdr = value;
    } else if (name.rfind("track_sdr.", 0) == 0) {
      file_track_sdrs.push_back(value);
    }
  }
  std::vector<double> medians;
  for (auto& [track, vals] : chunks) medians.push_back(median(vals));
  CHECK(median(medians) == file_csdr);
  double mean = 0.0;
  for (double v : file_track_sdrs) mean += v;
  CHECK(mean / double(file_track_sdrs.size()) == file_usdr);
}
