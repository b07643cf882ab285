#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bsm/model.hpp"
#include "test_util.hpp"

using namespace bsm;
using namespace bsm::model;
using dsp::ComplexSpectrogram;
using dsp::Waveform;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.repeats = 1;
  cfg.window = 64;
  cfg.hop = 16;
  cfg.sample_rate = 8000;
  cfg.channels = 1;
  cfg.ssm = {2, 4, 8};
  cfg.seed = 7;
  cfg.band_edges = default_band_edges(cfg.bins(), 3);
  return cfg;
}

Waveform random_wave(uint64_t seed, int64_t n, int sr, int channels = 1) {
  auto g = testutil::rng(seed);
  Waveform w;
  w.sample_rate = sr;
  for (int c = 0; c < channels; ++c)
    w.channels.push_back(testutil::random_vec(g, size_t(n), -0.5, 0.5));
  return w;
}

// Straight-line transcription of the band-split encoder for one channel:
// interleaved (re, im) per bin, RMSNorm, linear to D.
std::vector<double> transcribe_band_split(const ComplexSpectrogram& spec,
                                          const ModelParams& p,
                                          const ModelConfig& cfg) {
  const int64_t t_len = spec.frames, kb = cfg.bands(), d = cfg.d;
  std::vector<double> z(size_t(t_len * kb * d));
  for (int64_t k = 0; k < kb; ++k) {
    const int64_t fk = cfg.band_width(k);
    const int64_t in = 2 * fk;
    const auto gain = p.band_mlps[size_t(k)].gain.data();
    const auto w = p.band_mlps[size_t(k)].w.data();
    const auto b = p.band_mlps[size_t(k)].b.data();
    for (int64_t t = 0; t < t_len; ++t) {
      std::vector<double> feat(static_cast<size_t>(in));
      for (int64_t f = 0; f < fk; ++f) {
        feat[size_t(2 * f)] = spec.re(t, cfg.band_edges[size_t(k)] + f);
        feat[size_t(2 * f + 1)] = spec.im(t, cfg.band_edges[size_t(k)] + f);
      }
      double ms = 0.0;
      for (double v : feat) ms += v * v;
      const double r = 1.0 / std::sqrt(ms / double(in) + 1e-8);
      for (int64_t i = 0; i < in; ++i)
        feat[size_t(i)] *= r * gain[size_t(i)];
      for (int64_t j = 0; j < d; ++j) {
        double acc = b[size_t(j)];
        for (int64_t i = 0; i < in; ++i)
          acc += feat[size_t(i)] * w[size_t(i * d + j)];
        z[size_t((t * kb + k) * d + j)] = acc;
      }
    }
  }
  return z;
}

}  // namespace

TEST_CASE("default band edges tile the spectrum exactly") {
  for (auto [bins, bands] : {std::pair<int64_t, int64_t>{257, 6},
                             {1025, 62},
                             {33, 4},
                             {129, 1},
                             {16, 16}}) {
    auto edges = default_band_edges(bins, bands);
    REQUIRE(static_cast<int64_t>(edges.size()) == bands + 1);
    CHECK(edges.front() == 0);
    CHECK(edges.back() == bins);
    int64_t widest = 0;
    for (size_t i = 1; i < edges.size(); ++i) {
      CHECK(edges[i] > edges[i - 1]);
      widest = std::max(widest, edges[i] - edges[i - 1]);
    }
    if (bands > 2 && bins >= 2 * bands)
      CHECK(widest > (bins / bands));  // low bands narrower than high ones
  }
}

TEST_CASE("config validation rejects broken band layouts") {
  ModelConfig cfg = tiny_config();
  cfg.validate();
  ModelConfig bad = cfg;
  bad.band_edges.back() = cfg.bins() - 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.band_edges[1] = bad.band_edges[2];
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.d = 7;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("model initialization is deterministic per seed") {
  ModelConfig cfg = tiny_config();
  auto p1 = ModelParams::init(cfg);
  auto p2 = ModelParams::init(cfg);
  auto n1 = p1.named(), n2 = p2.named();
  REQUIRE(n1.size() == n2.size());
  for (size_t i = 0; i < n1.size(); ++i) {
    CHECK(n1[i].first == n2[i].first);
    CHECK(testutil::max_abs_diff(
              {n1[i].second.data().begin(), n1[i].second.data().end()},
              {n2[i].second.data().begin(), n2[i].second.data().end()}) ==
          0.0);
  }
  cfg.seed = 8;
  auto p3 = ModelParams::init(cfg);
  CHECK(p3.named()[1].second.data()[0] != n1[1].second.data()[0]);
}

TEST_CASE("band_split of a zero spectrogram is zero") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  std::vector<double> silence(1600, 0.0);
  auto spec = dsp::stft(silence, cfg.window, cfg.hop, cfg.sample_rate);
  Tensor z = band_split({spec}, params, cfg);
  CHECK(z.shape() == std::vector<int64_t>{spec.frames, cfg.bands(), cfg.d});
  for (double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("band_split with a single full-spectrum band") {
  ModelConfig cfg = tiny_config();
  cfg.band_edges = {0, cfg.bins()};
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(1, 1600, cfg.sample_rate);
  auto spec = dsp::stft(w.channels[0], cfg.window, cfg.hop, cfg.sample_rate);
  Tensor z = band_split({spec}, params, cfg);
  CHECK(z.shape() == std::vector<int64_t>{spec.frames, 1, cfg.d});
}

TEST_CASE("band_split matches the transcription oracle") {
  ModelConfig cfg = tiny_config();
  cfg.band_edges = default_band_edges(cfg.bins(), 2);
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(2, 1600, cfg.sample_rate);
  auto spec = dsp::stft(w.channels[0], cfg.window, cfg.hop, cfg.sample_rate);
  Tensor z = band_split({spec}, params, cfg);
  auto ref = transcribe_band_split(spec, params, cfg);
  double err = 0.0;
  for (size_t i = 0; i < ref.size(); ++i)
    err = std::max(err, std::abs(z.data()[i] - ref[i]));
  CHECK(err < 1e-12);
}

TEST_CASE("band_split rejects bin mismatches") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  std::vector<double> x(1600, 0.1);
  auto spec = dsp::stft(x, 32, 16, cfg.sample_rate);  // wrong bins
  CHECK_THROWS_AS(band_split({spec}, params, cfg), std::invalid_argument);
}

TEST_CASE("dual_path with zero repeats is the identity") {
  ModelConfig cfg = tiny_config();
  cfg.repeats = 0;  // test-only configuration
  auto params = ModelParams::init(cfg);
  auto g = testutil::rng(3);
  Tensor z = Tensor::from_data({5, cfg.bands(), cfg.d},
                               testutil::random_vec(
                                   g, size_t(5 * cfg.bands() * cfg.d)));
  Tensor q = dual_path(z, params, cfg);
  for (size_t i = 0; i < q.data().size(); ++i)
    CHECK(q.data()[i] == z.data()[i]);
}

TEST_CASE("dual_path handles a single frame") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  auto g = testutil::rng(4);
  Tensor z = Tensor::from_data({1, cfg.bands(), cfg.d},
                               testutil::random_vec(
                                   g, size_t(cfg.bands() * cfg.d)));
  Tensor q = dual_path(z, params, cfg);
  CHECK(q.shape() == z.shape());
  for (double v : q.data()) CHECK(std::isfinite(v));
}

TEST_CASE("dual_path matches a per-sequence application of the blocks") {
  // The rearrangement contract: repeat r applies the (shared) time block to
  // each band's [T,D] slice, then the (shared) band block to each frame's
  // [K,D] slice.
  ModelConfig cfg = tiny_config();
  cfg.d = 4;
  cfg.repeats = 1;
  cfg.ssm = {1, 3, 4};
  cfg.band_edges = {0, 10, 20, 33};
  auto params = ModelParams::init(cfg);
  const int64_t t_len = 4, kb = cfg.bands();
  auto g = testutil::rng(5);
  Tensor z = Tensor::from_data({t_len, kb, cfg.d},
                               testutil::random_vec(
                                   g, size_t(t_len * kb * cfg.d)));
  Tensor got = dual_path(z, params, cfg);

  // Time pass, one band at a time through the [T,D] entry point.
  std::vector<Tensor> after_time_bands;
  for (int64_t k = 0; k < kb; ++k) {
    Tensor zk = reshape(slice(z, 1, k, 1), {t_len, cfg.d});
    after_time_bands.push_back(reshape(
        ssm::bidirectional_block(zk, params.time_blocks[0]),
        {t_len, 1, cfg.d}));
  }
  Tensor mid = concat(after_time_bands, 1);
  // Band pass, one frame at a time.
  std::vector<Tensor> after_band_frames;
  for (int64_t t = 0; t < t_len; ++t) {
    Tensor qt = reshape(slice(mid, 0, t, 1), {kb, cfg.d});
    after_band_frames.push_back(reshape(
        ssm::bidirectional_block(qt, params.band_blocks[0]),
        {1, kb, cfg.d}));
  }
  Tensor ref = concat(after_band_frames, 0);
  double err = 0.0;
  for (size_t i = 0; i < ref.data().size(); ++i)
    err = std::max(err, std::abs(got.data()[i] - ref.data()[i]));
  CHECK(err < 1e-12);
}

TEST_CASE("estimate_mask zero input with zero biases gives a zero mask") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  Tensor q = Tensor::zeros({6, cfg.bands(), cfg.d});
  auto masks = estimate_mask(q, params, cfg);
  REQUIRE(masks.size() == 1);
  CHECK(masks[0].shape() == std::vector<int64_t>{6, cfg.bins(), 2});
  for (double v : masks[0].data()) CHECK(v == 0.0);
}

TEST_CASE("estimate_mask matches the transcription oracle") {
  ModelConfig cfg = tiny_config();
  cfg.band_edges = default_band_edges(cfg.bins(), 2);
  auto params = ModelParams::init(cfg);
  const int64_t t_len = 5;
  auto g = testutil::rng(6);
  Tensor q = Tensor::from_data({t_len, cfg.bands(), cfg.d},
                               testutil::random_vec(
                                   g, size_t(t_len * cfg.bands() * cfg.d)));
  auto masks = estimate_mask(q, params, cfg);

  for (int64_t k = 0; k < cfg.bands(); ++k) {
    const int64_t fk = cfg.band_width(k);
    const int64_t hidden = 4 * fk;
    const auto& mlp = params.mask_mlps[size_t(k)];
    const auto gain = mlp.gain.data();
    const auto w1 = mlp.w1.data(), b1 = mlp.b1.data();
    const auto w2 = mlp.w2.data(), b2 = mlp.b2.data();
    for (int64_t t = 0; t < t_len; ++t) {
      std::vector<double> qk(static_cast<size_t>(cfg.d));
      double ms = 0.0;
      for (int64_t j = 0; j < cfg.d; ++j) {
        qk[size_t(j)] = q.at({t, k, j});
        ms += qk[size_t(j)] * qk[size_t(j)];
      }
      const double r = 1.0 / std::sqrt(ms / double(cfg.d) + 1e-8);
      for (int64_t j = 0; j < cfg.d; ++j) qk[size_t(j)] *= r * gain[size_t(j)];
      std::vector<double> h(static_cast<size_t>(hidden));
      for (int64_t j = 0; j < hidden; ++j) {
        double acc = b1[size_t(j)];
        for (int64_t i = 0; i < cfg.d; ++i)
          acc += qk[size_t(i)] * w1[size_t(i * hidden + j)];
        h[size_t(j)] = std::tanh(acc);
      }
      std::vector<double> o(static_cast<size_t>(hidden));
      for (int64_t j = 0; j < hidden; ++j) {
        double acc = b2[size_t(j)];
        for (int64_t i = 0; i < hidden; ++i)
          acc += h[size_t(i)] * w2[size_t(i * hidden + j)];
        o[size_t(j)] = acc;
      }
      for (int64_t j = 0; j < 2 * fk; ++j) {
        const double val =
            o[size_t(j)] / (1.0 + std::exp(-o[size_t(2 * fk + j)]));
        const int64_t f = cfg.band_edges[size_t(k)] + j / 2;
        const double got = j % 2 == 0 ? masks[0].at({t, f, 0})
                                      : masks[0].at({t, f, 1});
        CHECK(std::abs(got - val) < 1e-12);
      }
    }
  }
}

TEST_CASE("mask frequency coverage equals the sum of band widths") {
  ModelConfig cfg = tiny_config();
  for (int64_t kb : {1, 2, 3}) {
    cfg.band_edges = default_band_edges(cfg.bins(), kb);
    auto params = ModelParams::init(cfg);
    Tensor q = Tensor::zeros({3, kb, cfg.d});
    auto masks = estimate_mask(q, params, cfg);
    CHECK(masks[0].dim(1) == cfg.bins());
  }
}

TEST_CASE("apply_mask closed forms") {
  ModelConfig cfg = tiny_config();
  Waveform w = random_wave(7, 1600, cfg.sample_rate);
  auto spec = dsp::stft(w.channels[0], cfg.window, cfg.hop, cfg.sample_rate);

  // identity mask
  std::vector<double> ones(size_t(spec.frames * spec.bins * 2), 0.0);
  for (size_t i = 0; i < ones.size(); i += 2) ones[i] = 1.0;
  auto s1 = apply_mask(spec,
                       Tensor::from_data({spec.frames, spec.bins, 2}, ones));
  for (size_t i = 0; i < s1.coeffs.data().size(); ++i)
    CHECK(s1.coeffs.data()[i] == spec.coeffs.data()[i]);

  // zero mask
  auto s0 = apply_mask(spec, Tensor::zeros({spec.frames, spec.bins, 2}));
  for (double v : s0.coeffs.data()) CHECK(v == 0.0);

  // i mask rotates (re, im) -> (-im, re)
  std::vector<double> imask(size_t(spec.frames * spec.bins * 2), 0.0);
  for (size_t i = 1; i < imask.size(); i += 2) imask[i] = 1.0;
  auto si = apply_mask(spec,
                       Tensor::from_data({spec.frames, spec.bins, 2}, imask));
  for (int64_t t = 0; t < spec.frames; ++t)
    for (int64_t f = 0; f < spec.bins; ++f) {
      CHECK(si.re(t, f) == -spec.im(t, f));
      CHECK(si.im(t, f) == spec.re(t, f));
    }

  CHECK_THROWS_AS(apply_mask(spec, Tensor::zeros({1, 2, 2})),
                  std::invalid_argument);
}

TEST_CASE("forward output length always equals input length") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  for (int64_t n : {100, 1601, 4096}) {
    Waveform w = random_wave(8, n, cfg.sample_rate);
    Waveform est = forward(w, params, cfg);
    CHECK(est.num_samples() == n);
    CHECK(est.sample_rate == w.sample_rate);
  }
}

TEST_CASE("identity mask reproduces the input through the whole pipeline") {
  ModelConfig cfg = tiny_config();
  cfg.window = 512;
  cfg.hop = 110;
  cfg.band_edges = default_band_edges(cfg.bins(), 6);
  auto params = ModelParams::init(cfg);
  force_identity_mask(params, cfg);
  Waveform w = random_wave(9, 16000, cfg.sample_rate);
  Waveform est = forward(w, params, cfg);
  double num = 0.0, den = 0.0;
  for (int64_t i = 0; i < 16000; ++i) {
    const double d = est.channels[0][size_t(i)] - w.channels[0][size_t(i)];
    num += d * d;
    den += w.channels[0][size_t(i)] * w.channels[0][size_t(i)];
  }
  CHECK(std::sqrt(num / den) < 1e-9);
}

TEST_CASE("separate_long: shorter input than segment is one forward call") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(10, 2000, cfg.sample_rate);
  Waveform a = forward(w, params, cfg);
  Waveform b = separate_long(w, params, cfg, 8.0);
  REQUIRE(a.num_samples() == b.num_samples());
  for (size_t i = 0; i < a.channels[0].size(); ++i)
    CHECK(a.channels[0][i] == b.channels[0][i]);
}

TEST_CASE("separate_long preserves total length for odd segmentations") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(11, 10013, cfg.sample_rate);
  for (double seg : {0.3, 0.5, 1.0, 1.25}) {
    Waveform out = separate_long(w, params, cfg, seg);
    CHECK(out.num_samples() == w.num_samples());
  }
}

TEST_CASE("identity-mask model: segmented equals unsegmented") {
  ModelConfig cfg = tiny_config();
  cfg.window = 512;
  cfg.hop = 110;
  cfg.band_edges = default_band_edges(cfg.bins(), 6);
  auto params = ModelParams::init(cfg);
  force_identity_mask(params, cfg);
  Waveform w = random_wave(12, 24000, cfg.sample_rate);  // 3 s
  Waveform whole = forward(w, params, cfg);
  for (double seg : {1.0, 2.0}) {
    Waveform parts = separate_long(w, params, cfg, seg);
    double num = 0.0, den = 0.0;
    for (size_t i = 0; i < parts.channels[0].size(); ++i) {
      const double d = parts.channels[0][i] - whole.channels[0][i];
      num += d * d;
      den += whole.channels[0][i] * whole.channels[0][i];
    }
    CHECK(std::sqrt(num / den) < 1e-9);
  }
}

TEST_CASE("stereo forward keeps channels and lengths intact") {
  ModelConfig cfg = tiny_config();
  cfg.channels = 2;
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(13, 1600, cfg.sample_rate, 2);
  Waveform est = forward(w, params, cfg);
  CHECK(est.num_channels() == 2);
  CHECK(est.num_samples() == 1600);

  force_identity_mask(params, cfg);
  Waveform id = forward(w, params, cfg);
  for (int c = 0; c < 2; ++c) {
    double num = 0.0, den = 0.0;
    for (int64_t i = 32; i < 1600 - 32; ++i) {
      const double d = id.channels[size_t(c)][size_t(i)] -
                       w.channels[size_t(c)][size_t(i)];
      num += d * d;
      den += w.channels[size_t(c)][size_t(i)] *
             w.channels[size_t(c)][size_t(i)];
    }
    CHECK(std::sqrt(num / den) < 1e-9);
  }
}

TEST_CASE("every parameter receives gradient on a random batch") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(14, 1600, cfg.sample_rate);
  auto est = forward_tensors(w, params, cfg);
  Waveform target = random_wave(15, 1600, cfg.sample_rate);
  Tensor ref = Tensor::from_data({1600}, target.channels[0]);
  backward(l1(sub(est[0], ref)));
  for (auto& [name, t] : params.named()) {
    double norm = 0.0;
    for (double gv : t.grad()) norm += gv * gv;
    INFO(name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("full forward gradient passes grad_check on a miniature model") {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.repeats = 1;
  cfg.window = 32;
  cfg.hop = 8;
  cfg.sample_rate = 8000;
  cfg.channels = 1;
  cfg.ssm = {1, 2, 4};
  cfg.seed = 21;
  cfg.band_edges = {0, 9, 17};
  auto params = ModelParams::init(cfg);
  Waveform w = random_wave(16, 200, cfg.sample_rate);
  Waveform tgt = random_wave(17, 200, cfg.sample_rate);
  Tensor ref = Tensor::from_data({200}, tgt.channels[0]);

  auto named = params.named();
  // Rewire a copy of the params from the flat var list, mirroring the
  // exact order produced by ModelParams::named().
  auto make_loss = [&](const std::vector<Tensor>& vars) {
    ModelParams q = params;
    size_t i = 0;
    for (auto& m : q.band_mlps) {
      m.gain = vars[i++];
      m.w = vars[i++];
      m.b = vars[i++];
    }
    for (auto* blocks : {&q.time_blocks, &q.band_blocks})
      for (auto& blk : *blocks) {
        for (auto* dir : {&blk.fwd, &blk.bwd}) {
          dir->in_proj_w = vars[i++];
          dir->in_proj_b = vars[i++];
          dir->a_log = vars[i++];
          dir->out_proj_w = vars[i++];
          dir->out_proj_b = vars[i++];
        }
        blk.merge_w = vars[i++];
        blk.merge_b = vars[i++];
      }
    for (auto& m : q.mask_mlps) {
      m.gain = vars[i++];
      m.w1 = vars[i++];
      m.b1 = vars[i++];
      m.w2 = vars[i++];
      m.b2 = vars[i++];
    }
    if (i != vars.size())
      throw std::logic_error("test wiring does not cover all parameters");
    auto est = forward_tensors(w, q, cfg);
    return l1(sub(est[0], ref));
  };
  auto report = grad_check(make_loss, named, 1e-6, 1e-4);
  INFO(report.summary());
  CHECK(report.pass);
}

TEST_CASE("checkpoint round trip is bit-identical") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  const auto path =
      (std::filesystem::temp_directory_path() / "bsm_ckpt_test.bsm2").string();
  save_checkpoint(params, cfg, path);
  auto loaded = load_checkpoint(path);
  CHECK(loaded.config.d == cfg.d);
  CHECK(loaded.config.band_edges == cfg.band_edges);
  auto a = params.named(), b = loaded.params.named();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].first == b[i].first);
    REQUIRE(a[i].second.numel() == b[i].second.numel());
    for (int64_t j = 0; j < a[i].second.numel(); ++j)
      CHECK(a[i].second.data()[size_t(j)] == b[i].second.data()[size_t(j)]);
  }
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint with corrupted magic bytes is rejected") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams::init(cfg);
  const auto path =
      (std::filesystem::temp_directory_path() / "bsm_ckpt_bad.bsm2").string();
  save_checkpoint(params, cfg, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("magic"),
                       std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("checkpoint from config A against config B names the tensor") {
  ModelConfig a = tiny_config();
  auto pa = ModelParams::init(a);
  const auto path =
      (std::filesystem::temp_directory_path() / "bsm_ckpt_ab.bsm2").string();
  save_checkpoint(pa, a, path);

  ModelConfig b = a;
  b.d = 12;  // different hidden dim -> every tensor shape changes
  auto pb = ModelParams::init(b);
  auto blob = read_checkpoint_file(path);
  CHECK_THROWS_WITH_AS(load_into(blob, pb),
                       doctest::Contains("shape mismatch"),
                       std::runtime_error);
  std::filesystem::remove(path);
}
