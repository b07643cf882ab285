#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "bsm/trainer.hpp"
#include "test_util.hpp"

using namespace bsm;
using namespace bsm::trainer;
using data::MixedClip;
using data::SynthSpec;
using data::TrackStems;
using model::ModelConfig;
using model::ModelParams;

namespace {

ModelConfig toy_model() {
  ModelConfig cfg;
  cfg.d = 8;
  cfg.repeats = 1;
  cfg.window = 128;
  cfg.hop = 64;
  cfg.sample_rate = 8000;
  cfg.channels = 1;
  cfg.ssm = {2, 4, 8};
  cfg.seed = 3;
  cfg.band_edges = model::default_band_edges(cfg.bins(), 4);
  return cfg;
}

loss::LossConfig small_loss() {
  loss::LossConfig cfg;
  cfg.stft_windows = {256, 128};
  cfg.stft_hop = 64;
  return cfg;
}

std::vector<TrackStems> tiny_pool() {
  SynthSpec spec;
  spec.sample_rate = 8000;
  spec.duration_s = 3.0;
  spec.seed = 11;
  spec.pattern = {{0.3, 1.2, 250.0, 3.0, 5.0}, {1.8, 1.0, 300.0, 3.0, 5.0}};
  std::vector<TrackStems> pool;
  pool.push_back(data::synth_stems(spec));
  spec.seed = 12;
  pool.push_back(data::synth_stems(spec));
  return pool;
}

TrainConfig quick_train(int64_t steps) {
  TrainConfig cfg;
  cfg.steps = steps;
  cfg.clip_seconds = 0.5;
  cfg.seed = 5;
  return cfg;
}

std::vector<double> flat_params(const ModelParams& p) {
  std::vector<double> out;
  for (auto& [name, t] : p.named())
    out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

}  // namespace

TEST_CASE("zero learning rate leaves parameters bit-identical") {
  auto pool = tiny_pool();
  TrainConfig cfg = quick_train(3);
  cfg.learning_rate = 0.0;
  auto result = train(toy_model(), cfg, small_loss(),
                      make_mix_provider(pool, cfg));
  auto fresh = ModelParams::init(toy_model());
  CHECK(flat_params(result.params) == flat_params(fresh));
}

TEST_CASE("fresh optimizer step with zero gradients changes nothing") {
  auto params = ModelParams::init(toy_model());
  auto before = flat_params(params);
  TrainConfig cfg = quick_train(1);
  Adam opt(params.named(), cfg);
  opt.zero_grad();
  opt.step();
  CHECK(flat_params(params) == before);
}

TEST_CASE("one accumulated step equals one double-batch step") {
  auto pool = tiny_pool();
  // Fixed clips so both paths consume identical data.
  TrainConfig base = quick_train(1);
  auto g = testutil::rng(9);
  data::RandomMixOptions opt;
  opt.clip_seconds = 0.5;
  const MixedClip c0 = data::random_mix(pool, opt, g);
  const MixedClip c1 = data::random_mix(pool, opt, g);
  auto fixed = [&](int64_t, int64_t micro, int64_t item) {
    return (micro + item) == 0 ? c0 : c1;
  };

  TrainConfig accum = base;
  accum.batch_size = 1;
  accum.grad_accum = 2;
  auto r1 = train(toy_model(), accum, small_loss(), fixed);

  TrainConfig batch = base;
  batch.batch_size = 2;
  batch.grad_accum = 1;
  auto r2 = train(toy_model(), batch, small_loss(), fixed);

  auto p1 = flat_params(r1.params), p2 = flat_params(r2.params);
  REQUIRE(p1.size() == p2.size());
  double err = 0.0;
  for (size_t i = 0; i < p1.size(); ++i)
    err = std::max(err, std::abs(p1[i] - p2[i]));
  CHECK(err < 1e-12);
  CHECK(r1.log[0].loss == doctest::Approx(r2.log[0].loss).epsilon(1e-12));
}

TEST_CASE("training is deterministic across runs") {
  auto pool = tiny_pool();
  TrainConfig cfg = quick_train(3);
  auto r1 = train(toy_model(), cfg, small_loss(),
                  make_mix_provider(pool, cfg));
  auto r2 = train(toy_model(), cfg, small_loss(),
                  make_mix_provider(pool, cfg));
  CHECK(flat_params(r1.params) == flat_params(r2.params));
  REQUIRE(r1.log.size() == r2.log.size());
  for (size_t i = 0; i < r1.log.size(); ++i)
    CHECK(r1.log[i].loss == r2.log[i].loss);
}

TEST_CASE("checkpoint resume reproduces an uninterrupted run bit-exactly") {
  auto pool = tiny_pool();
  const auto dir =
      std::filesystem::temp_directory_path() / "bsm_resume_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);

  TrainConfig cfg6 = quick_train(6);
  auto full = train(toy_model(), cfg6, small_loss(),
                    make_mix_provider(pool, cfg6));

  TrainConfig cfg3 = quick_train(3);
  cfg3.checkpoint_dir = dir.string();
  cfg3.checkpoint_every = 3;
  auto part = train(toy_model(), cfg3, small_loss(),
                    make_mix_provider(pool, cfg3));

  auto blob = model::read_checkpoint_file((dir / "step3.bsm2").string());
  TrainConfig cfg_resume = quick_train(6);
  auto resumed = train(toy_model(), cfg_resume, small_loss(),
                       make_mix_provider(pool, cfg_resume), &blob);
  CHECK(resumed.steps_run == 3);
  CHECK(flat_params(full.params) == flat_params(resumed.params));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts naming the step") {
  auto pool = tiny_pool();
  TrainConfig cfg = quick_train(2);
  cfg.grad_clip_norm = 0.0;
  auto bomb = [&](int64_t step, int64_t, int64_t) {
    data::RandomMixOptions opt;
    opt.clip_seconds = 0.5;
    auto g = testutil::rng(1);
    MixedClip clip = data::random_mix(pool, opt, g);
    if (step == 1) clip.vocal_target.channels[0][0] = std::nan("");
    return clip;
  };
  CHECK_THROWS_WITH_AS(train(toy_model(), cfg, small_loss(), bomb),
                       doctest::Contains("step 1"), std::runtime_error);
}

TEST_CASE("training reduces the loss on a fixed tiny clip") {
  auto pool = tiny_pool();
  TrainConfig cfg = quick_train(25);
  cfg.learning_rate = 2e-3;
  auto g = testutil::rng(10);
  data::RandomMixOptions opt;
  opt.clip_seconds = 0.5;
  const MixedClip clip = data::random_mix(pool, opt, g);
  auto fixed = [&](int64_t, int64_t, int64_t) { return clip; };
  auto result = train(toy_model(), cfg, small_loss(), fixed);
  CHECK(result.final_loss < result.initial_loss);
  for (const auto& e : result.log) CHECK(std::isfinite(e.loss));
}

TEST_CASE("evaluate produces per-track metrics and pooled onset rows") {
  auto pool = tiny_pool();
  auto params = ModelParams::init(toy_model());
  auto report = evaluate(params, toy_model(), pool, 1.0, true);
  CHECK(report.tracks.size() == 2);
  REQUIRE(report.onset.size() == 3);
  // the tiny pool has 1.0-1.2 s events only
  CHECK(report.onset[0].segments >= 2);
  const std::string text = report.to_text();
  CHECK(text.find("usdr ") != std::string::npos);
  CHECK(text.find("onset_sdr.1-2s") != std::string::npos);
}

TEST_CASE("evaluate is deterministic") {
  auto pool = tiny_pool();
  auto params = ModelParams::init(toy_model());
  auto r1 = evaluate(params, toy_model(), pool, 1.0, true);
  auto r2 = evaluate(params, toy_model(), pool, 1.0, true);
  CHECK(r1.to_text() == r2.to_text());
}
