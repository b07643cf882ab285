// Command-line driver: train / separate / evaluate / synth-data / selfcheck.
// Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "bsm/config.hpp"
#include "bsm/data.hpp"
#include "bsm/loss.hpp"
#include "bsm/model.hpp"
#include "bsm/rng.hpp"
#include "bsm/ssm.hpp"
#include "bsm/trainer.hpp"

namespace fs = std::filesystem;
using namespace bsm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& overrides,
              const std::string& resume_path) {
  auto rc = config::RunConfig::load(config_path, overrides);
  if (rc.train.checkpoint_dir.empty()) rc.train.checkpoint_dir = "run";
  fs::create_directories(rc.train.checkpoint_dir);
  if (rc.train.log_path.empty())
    rc.train.log_path = rc.train.checkpoint_dir + "/train.log";
  std::remove(rc.train.log_path.c_str());

  auto pool = rc.make_pool();
  std::printf("training: %lld steps, %zu track(s), %lld parameters\n",
              static_cast<long long>(rc.train.steps), pool.size(),
              static_cast<long long>(
                  model::ModelParams::init(rc.model).param_count()));

  model::CheckpointBlob resume_blob;
  const model::CheckpointBlob* resume = nullptr;
  if (!resume_path.empty()) {
    resume_blob = model::read_checkpoint_file(resume_path);
    resume = &resume_blob;
  }

  const std::string log_path = rc.train.log_path;
  trainer::EvalHook hook = [&](int64_t step,
                               const model::ModelParams& params) {
    auto report =
        trainer::evaluate(params, rc.model, pool, rc.eval_segment_seconds);
    std::ofstream log(log_path, std::ios::app);
    log << "eval step=" << step << " usdr=" << report.usdr
        << " csdr=" << report.csdr << "\n";
    std::printf("  eval @%lld: usdr %.3f dB, csdr %.3f dB\n",
                static_cast<long long>(step), report.usdr, report.csdr);
  };

  auto result =
      trainer::train(rc.model, rc.train, rc.loss,
                     trainer::make_mix_provider(pool, rc.train), resume, hook);

  const std::string final_path = rc.train.checkpoint_dir + "/final.bsm2";
  {
    model::CheckpointBlob blob;
    blob.config_kv = rc.model.to_kv();
    blob.config_kv["train.step"] = std::to_string(rc.train.steps);
    blob.tensors = result.params.named();
    model::write_checkpoint_file(final_path, blob);
  }
  std::printf("loss: first %.6f, last %.6f\ncheckpoint: %s\n",
              result.initial_loss, result.final_loss, final_path.c_str());
  return kExitOk;
}

int cmd_separate(const std::string& checkpoint, const std::string& input,
                 const std::string& output, double segment_seconds) {
  auto loaded = model::load_checkpoint(checkpoint);
  dsp::Waveform in = dsp::read_wav(input);
  if (in.sample_rate != loaded.config.sample_rate)
    throw UsageError("sample rate mismatch: input " +
                     std::to_string(in.sample_rate) + " Hz, model " +
                     std::to_string(loaded.config.sample_rate) + " Hz");
  if (in.num_channels() != loaded.config.channels)
    throw UsageError("channel mismatch: input has " +
                     std::to_string(in.num_channels()) + ", model expects " +
                     std::to_string(loaded.config.channels));
  dsp::Waveform est = model::separate_long(in, loaded.params, loaded.config,
                                           segment_seconds);
  dsp::write_wav(output, est);
  std::printf("wrote %s (%lld samples @ %d Hz)\n", output.c_str(),
              static_cast<long long>(est.num_samples()), est.sample_rate);
  return kExitOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& stems,
                 double segment_seconds, const std::vector<double>& sweep,
                 const std::string& out_dir) {
  auto loaded = model::load_checkpoint(checkpoint);
  auto result = data::load_stem_dir(stems);
  for (const auto& e : result.errors)
    std::fprintf(stderr, "warning: %s\n", e.c_str());
  if (result.tracks.empty())
    throw UsageError("no loadable tracks in " + stems);

  std::vector<double> lengths = sweep;
  if (lengths.empty()) lengths.push_back(segment_seconds);
  fs::create_directories(out_dir);
  for (double seg : lengths) {
    auto report = trainer::evaluate(loaded.params, loaded.config,
                                    result.tracks, seg, true);
    std::ostringstream name;
    name << out_dir << "/report_seg" << seg << "s.txt";
    std::ofstream f(name.str());
    f << "# segment_seconds " << seg << "\n" << report.to_text();
    std::printf("segment %5.2f s: usdr %8.3f dB, csdr %8.3f dB -> %s\n", seg,
                report.usdr, report.csdr, name.str().c_str());
  }
  return kExitOk;
}

int cmd_synth_data(const std::string& config_path,
                   const std::vector<std::string>& overrides,
                   const std::string& out_dir, int64_t count) {
  auto rc = config::RunConfig::load(config_path, overrides);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    throw std::runtime_error("cannot create output directory " + out_dir);
  for (int64_t i = 0; i < count; ++i) {
    data::SynthSpec spec = rc.synth;
    spec.seed = rc.synth.seed + static_cast<uint64_t>(i);
    if (rc.synth_auto_pattern)
      spec.pattern = data::SynthSpec::auto_pattern(spec.duration_s, spec.seed);
    auto track = data::synth_stems(spec);
    track.name = "synth" + std::to_string(i);
    data::write_track_stems(out_dir, track);
    std::printf("wrote %s/%s (%.1f s @ %d Hz)\n", out_dir.c_str(),
                track.name.c_str(), spec.duration_s, spec.sample_rate);
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// selfcheck

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void check_scan_oracle() {
  std::mt19937_64 g(2024);
  for (int rep = 0; rep < 20; ++rep) {
    const int64_t t_len = 1 + int64_t(g() % 48);
    const int64_t n = 1 + int64_t(g() % 8);
    const int64_t inner = 1 + int64_t(g() % 6);
    auto vec = [&](size_t m, double lo, double hi) {
      std::vector<double> v(m);
      for (auto& x : v) x = rng::uniform(g, lo, hi);
      return v;
    };
    auto x = vec(size_t(t_len * inner), -1, 1);
    auto delta = vec(size_t(t_len), 0.02, 1.5);
    auto b = vec(size_t(t_len * n), -1, 1);
    auto c = vec(size_t(t_len * n), -1, 1);
    const double a = rng::uniform(g, -2.0, -0.05);
    Tensor y = ssm::selective_scan(Tensor::from_data({t_len, inner}, x),
                                   Tensor::from_data({t_len}, delta),
                                   Tensor::from_data({t_len, n}, b),
                                   Tensor::from_data({t_len, n}, c), a);
    auto ref = ssm::dense_recurrence_oracle(t_len, inner, n, x, delta, b, c, a);
    for (size_t i = 0; i < ref.size(); ++i)
      if (std::abs(y.data()[i] - ref[i]) > 1e-10)
        throw CheckFailure("scan deviates from the dense recurrence oracle");
  }
}

void check_stft_roundtrip() {
  std::mt19937_64 g(2025);
  for (auto [window, hop, sr, n] :
       {std::tuple{2048, 441, 44100, int64_t(22050)},
        std::tuple{512, 110, 8000, int64_t(8000)}}) {
    std::vector<double> x(size_t(n));
    for (auto& v : x) v = rng::uniform(g, -0.8, 0.8);
    auto spec = dsp::stft(x, window, hop, sr);
    Tensor y = dsp::istft(spec, n);
    double num = 0.0, den = 0.0;
    for (int64_t i = window / 2; i < n - window / 2; ++i) {
      const double d = y.data()[size_t(i)] - x[size_t(i)];
      num += d * d;
      den += x[size_t(i)] * x[size_t(i)];
    }
    if (std::sqrt(num / den) > 1e-10)
      throw CheckFailure("stft/istft round trip above tolerance");
  }
}

void check_gradients(bool inject_fault) {
  std::mt19937_64 g(2026);
  std::vector<double> p0(12);
  for (auto& v : p0) v = rng::uniform(g, -1.0, 1.0);
  Tensor p = Tensor::from_data({12}, p0, true);
  Tensor loss = sum(tanh(p));
  backward(loss);
  std::vector<double> analytic(p.grad().begin(), p.grad().end());
  if (inject_fault) analytic[0] += 1e-2;  // deliberate perturbation hook
  const double h = 1e-6;
  for (size_t i = 0; i < p0.size(); ++i) {
    auto up = p0, dn = p0;
    up[i] += h;
    dn[i] -= h;
    double up_v = 0.0, dn_v = 0.0;
    for (double v : up) up_v += std::tanh(v);
    for (double v : dn) dn_v += std::tanh(v);
    const double fd = (up_v - dn_v) / (2 * h);
    if (std::abs(fd - analytic[i]) >
        1e-6 * std::max(1.0, std::abs(fd) + std::abs(analytic[i])))
      throw CheckFailure("grad-check: analytic and finite-difference "
                         "gradients disagree");
  }

  // miniature end-to-end model gradient
  model::ModelConfig cfg;
  cfg.d = 4;
  cfg.repeats = 1;
  cfg.window = 32;
  cfg.hop = 8;
  cfg.sample_rate = 8000;
  cfg.ssm = {1, 2, 4};
  cfg.seed = 3;
  cfg.band_edges = {0, 9, 17};
  auto params = model::ModelParams::init(cfg);
  std::vector<double> xs(200), rs(200);
  for (auto& v : xs) v = rng::uniform(g, -0.5, 0.5);
  for (auto& v : rs) v = rng::uniform(g, -0.5, 0.5);
  dsp::Waveform mix = dsp::Waveform::mono(xs, cfg.sample_rate);
  Tensor ref = Tensor::from_data({200}, rs);
  auto est = model::forward_tensors(mix, params, cfg);
  Tensor mloss = l1(sub(est[0], ref));
  backward(mloss);
  auto named = params.named();
  // spot-check two parameters against finite differences
  for (size_t pick : {size_t(1), named.size() - 1}) {
    Tensor t = named[pick].second;
    const double analytic0 = t.grad().empty() ? 0.0 : t.grad()[0];
    const double saved = t.data()[0];
    auto eval = [&](double v) {
      t.mutable_data()[0] = v;
      auto e2 = model::forward_tensors(mix, params, cfg);
      // no-grad path: params still require grad, so detach via item only
      return l1(sub(e2[0], ref)).item();
    };
    const double fd = (eval(saved + h) - eval(saved - h)) / (2 * h);
    t.mutable_data()[0] = saved;
    if (std::abs(fd - analytic0) >
        1e-4 * std::max(1.0, std::abs(fd) + std::abs(analytic0)))
      throw CheckFailure("grad-check: model gradient mismatch on " +
                         named[pick].first);
  }
}

void check_metric_closed_forms() {
  std::mt19937_64 g(2027);
  std::vector<double> s(8000);
  for (auto& v : s) v = rng::uniform(g, -0.5, 0.5);
  dsp::Waveform ref = dsp::Waveform::mono(s, 8000);
  dsp::Waveform half = ref;
  for (auto& v : half.channels[0]) v *= 0.5;
  if (std::abs(loss::sdr(ref, half) - 6.0206) > 1e-3)
    throw CheckFailure("sdr(s, s/2) != 6.0206 dB");
  dsp::Waveform zero = dsp::Waveform::mono(std::vector<double>(8000, 0.0),
                                           8000);
  if (std::abs(loss::sdr(ref, zero)) > 1e-9)
    throw CheckFailure("sdr(s, 0) != 0 dB");
  loss::LossConfig lc;
  if (loss::separation_loss(ref, ref, lc) != 0.0)
    throw CheckFailure("loss of identical signals != 0");
  if (loss::median({3.0, 5.0}) != 4.0)
    throw CheckFailure("even-count median convention broken");
}

void check_wav_roundtrip() {
  const auto path = fs::temp_directory_path() / "bsm_selfcheck.wav";
  std::mt19937_64 g(2028);
  dsp::Waveform w;
  w.sample_rate = 8000;
  w.channels.resize(1);
  for (int i = 0; i < 4000; ++i)
    w.channels[0].push_back(double(float(rng::uniform(g, -1.0, 1.0))));
  dsp::write_wav(path.string(), w);
  auto r = dsp::read_wav(path.string());
  fs::remove(path);
  if (r.channels[0] != w.channels[0])
    throw CheckFailure("wav float32 round trip is not exact");
}

int cmd_selfcheck(bool inject_grad_fault) {
  struct Check {
    const char* name;
    std::function<void()> run;
  };
  const std::vector<Check> checks = {
      {"scan-vs-oracle", [] { check_scan_oracle(); }},
      {"stft-round-trip", [] { check_stft_roundtrip(); }},
      {"grad-check", [=] { check_gradients(inject_grad_fault); }},
      {"metric-closed-forms", [] { check_metric_closed_forms(); }},
      {"wav-round-trip", [] { check_wav_roundtrip(); }},
  };
  bool all_ok = true;
  for (const auto& c : checks) {
    try {
      c.run();
      std::printf("[ PASS ] %s\n", c.name);
    } catch (const std::exception& e) {
      std::printf("[ FAIL ] %s: %s\n", c.name, e.what());
      all_ok = false;
    }
  }
  return all_ok ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"band-split dual-path selective-SSM vocal separator"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads,
                 "worker threads for the parallel kernels (0 = default)");

  std::string config_path, resume_path;
  std::vector<std::string> overrides;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config");
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--set", overrides, "override: key=value");
  train_cmd->add_option("--resume", resume_path, "resume from a checkpoint");

  std::string ckpt, in_wav, out_wav;
  double segment_seconds = 8.0;
  auto* sep_cmd = app.add_subcommand("separate", "extract vocals from a WAV");
  sep_cmd->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  sep_cmd->add_option("--input", in_wav, "mixture WAV")->required();
  sep_cmd->add_option("--output", out_wav, "estimated vocal WAV")->required();
  sep_cmd->add_option("--segment-seconds", segment_seconds,
                      "non-overlapping segment length (default 8)");

  std::string eval_ckpt, stems_dir, out_dir = "reports";
  double eval_seg = 8.0;
  std::vector<double> sweep;
  auto* eval_cmd = app.add_subcommand("evaluate", "metrics over a stem dir");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "model checkpoint")
      ->required();
  eval_cmd->add_option("--stems", stems_dir, "stem directory")->required();
  eval_cmd->add_option("--segment-seconds", eval_seg, "segment length");
  eval_cmd
      ->add_option("--sweep", sweep,
                   "segment length sweep (default 1,2,4,8,12,16)")
      ->expected(0, -1);
  eval_cmd->add_option("--out-dir", out_dir, "report directory");

  std::string synth_cfg, synth_out;
  int64_t synth_count = 2;
  std::vector<std::string> synth_overrides;
  auto* synth_cmd =
      app.add_subcommand("synth-data", "write synthetic stem folders");
  synth_cmd->add_option("--config", synth_cfg, "config file")->required();
  synth_cmd->add_option("--set", synth_overrides, "override: key=value");
  synth_cmd->add_option("--out", synth_out, "output directory")->required();
  synth_cmd->add_option("--count", synth_count, "number of tracks");

  bool inject_grad_fault = false;
  auto* self_cmd = app.add_subcommand("selfcheck", "fast invariant suite");
  self_cmd->add_flag("--inject-grad-fault", inject_grad_fault,
                     "perturb one analytic gradient (fault-injection hook)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return kExitUsage;
  }

#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif

  try {
    if (*train_cmd) return cmd_train(config_path, overrides, resume_path);
    if (*sep_cmd) return cmd_separate(ckpt, in_wav, out_wav, segment_seconds);
    if (*eval_cmd) {
      if (eval_cmd->count("--sweep") && sweep.empty())
        sweep = {1, 2, 4, 8, 12, 16};
      return cmd_evaluate(eval_ckpt, stems_dir, eval_seg, sweep, out_dir);
    }
    if (*synth_cmd)
      return cmd_synth_data(synth_cfg, synth_overrides, synth_out,
                            synth_count);
    if (*self_cmd) return cmd_selfcheck(inject_grad_fault);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitUsage;
}
