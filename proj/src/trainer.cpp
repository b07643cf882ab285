#include "bsm/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "bsm/rng.hpp"

namespace bsm::trainer {

using data::MixedClip;
using data::TrackStems;
using model::CheckpointBlob;
using model::ModelConfig;
using model::ModelParams;

void TrainConfig::validate() const {
  if (learning_rate < 0.0)
    throw std::invalid_argument("train: learning rate must be >= 0");
  if (steps < 1 || batch_size < 1 || grad_accum < 1)
    throw std::invalid_argument("train: counts must be >= 1");
  if (clip_seconds <= 0.0)
    throw std::invalid_argument("train: clip_seconds must be positive");
  if (grad_clip_norm < 0.0)
    throw std::invalid_argument("train: grad clip must be >= 0 (0 = off)");
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params,
           const TrainConfig& cfg)
    : params_(std::move(params)),
      lr_(cfg.learning_rate),
      beta1_(cfg.adam_beta1),
      beta2_(cfg.adam_beta2),
      eps_(cfg.adam_eps),
      clip_norm_(cfg.grad_clip_norm) {
  for (auto& [name, t] : params_) {
    m_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(t.numel()), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto& [name, t] : params_) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

void Adam::step() {
  // Optional global-norm clip, accumulated per tensor in canonical order.
  double scale = 1.0;
  if (clip_norm_ > 0.0) {
    double sq = 0.0;
    for (auto& [name, t] : params_) {
      auto g = t.grad();
      for (double v : g) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm_) scale = clip_norm_ / norm;
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p].second;
    auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[p];
    auto& v = v_[p];
    for (size_t i = 0; i < w.size(); ++i) {
      const double gi = (i < g.size() ? g[i] : 0.0) * scale;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
  zero_grad();
}

void Adam::save_state(CheckpointBlob& blob) const {
  for (size_t p = 0; p < params_.size(); ++p) {
    const auto& shape = params_[p].second.shape();
    blob.tensors.emplace_back("opt.m." + params_[p].first,
                              Tensor::from_data(shape, m_[p]));
    blob.tensors.emplace_back("opt.v." + params_[p].first,
                              Tensor::from_data(shape, v_[p]));
  }
  blob.config_kv["train.adam_t"] = std::to_string(t_);
}

void Adam::load_state(const CheckpointBlob& blob) {
  std::map<std::string, const Tensor*> index;
  for (const auto& [name, t] : blob.tensors) index[name] = &t;
  for (size_t p = 0; p < params_.size(); ++p) {
    for (auto [prefix, slot] :
         {std::pair{"opt.m.", &m_[p]}, std::pair{"opt.v.", &v_[p]}}) {
      const std::string key = prefix + params_[p].first;
      auto it = index.find(key);
      if (it == index.end())
        throw std::runtime_error("checkpoint: missing optimizer tensor '" +
                                 key + "'");
      if (it->second->numel() != static_cast<int64_t>(slot->size()))
        throw std::runtime_error("checkpoint: optimizer tensor '" + key +
                                 "' has wrong size");
      slot->assign(it->second->data().begin(), it->second->data().end());
    }
  }
  auto it = blob.config_kv.find("train.adam_t");
  if (it == blob.config_kv.end())
    throw std::runtime_error("checkpoint: missing train.adam_t");
  t_ = std::stoll(it->second);
}

// ---------------------------------------------------------------------------
// Training loop

BatchProvider make_mix_provider(const std::vector<TrackStems>& pool,
                                const TrainConfig& cfg) {
  data::RandomMixOptions opt;
  opt.clip_seconds = cfg.clip_seconds;
  opt.gain_db_range = cfg.mix_gain_db;
  opt.polarity_prob = cfg.mix_polarity_prob;
  opt.independent_sources = cfg.mix_independent;
  const uint64_t seed = cfg.seed;
  // Pool is copied so the provider owns its data.
  auto shared = std::make_shared<std::vector<TrackStems>>(pool);
  return [shared, opt, seed](int64_t step, int64_t micro, int64_t item) {
    std::mt19937_64 g(rng::derive_seed(
        seed, uint64_t(step) * 1000003ull + uint64_t(micro),
        uint64_t(item) + 1));
    return data::random_mix(*shared, opt, g);
  };
}

namespace {

void append_log_line(const std::string& path, const TrainLogEntry& e) {
  if (path.empty()) return;
  std::ofstream f(path, std::ios::app);
  f << "step=" << e.step << " loss=" << e.loss << " lr=" << e.lr
    << " wall_ms=" << e.wall_ms << "\n";
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg,
                  const loss::LossConfig& loss_cfg,
                  const BatchProvider& provider,
                  const CheckpointBlob* resume, const EvalHook& eval_hook) {
  cfg.validate();
  loss_cfg.validate();

  ModelParams params = ModelParams::init(model_cfg);
  int64_t start_step = 0;
  Adam opt(params.named(), cfg);
  if (resume) {
    model::load_into(*resume, params);
    opt.load_state(*resume);
    auto it = resume->config_kv.find("train.step");
    if (it == resume->config_kv.end())
      throw std::runtime_error("checkpoint: missing train.step for resume");
    start_step = std::stoll(it->second);
  }

  TrainResult result;
  const double inv_scale = 1.0 / double(cfg.batch_size * cfg.grad_accum);
  const auto t0 = std::chrono::steady_clock::now();

  opt.zero_grad();
  for (int64_t step = start_step; step < cfg.steps; ++step) {
    double step_loss = 0.0;
    for (int64_t micro = 0; micro < cfg.grad_accum; ++micro) {
      for (int64_t item = 0; item < cfg.batch_size; ++item) {
        MixedClip clip = provider(step, micro, item);
        auto est = model::forward_tensors(clip.mixture, params, model_cfg);
        Tensor clip_loss =
            loss::separation_loss(est, clip.vocal_target, loss_cfg);
        const double lv = clip_loss.item();
        if (!std::isfinite(lv))
          throw std::runtime_error(
              "train: non-finite loss at step " + std::to_string(step) +
              " (batch seed " +
              std::to_string(rng::derive_seed(
                  cfg.seed, uint64_t(step) * 1000003ull + uint64_t(micro),
                  uint64_t(item) + 1)) +
              ")");
        step_loss += lv;
        backward(scale(clip_loss, inv_scale));
      }
    }
    step_loss *= inv_scale;
    opt.step();

    TrainLogEntry entry;
    entry.step = step + 1;
    entry.loss = step_loss;
    entry.lr = cfg.learning_rate;
    entry.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                        std::chrono::steady_clock::now() - t0)
                        .count();
    append_log_line(cfg.log_path, entry);
    result.log.push_back(entry);
    if (result.steps_run == 0) result.initial_loss = step_loss;
    result.final_loss = step_loss;
    ++result.steps_run;

    if (eval_hook && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)
      eval_hook(step + 1, params);
    if (cfg.checkpoint_every > 0 && !cfg.checkpoint_dir.empty() &&
        (step + 1) % cfg.checkpoint_every == 0) {
      std::filesystem::create_directories(cfg.checkpoint_dir);
      save_train_checkpoint(cfg.checkpoint_dir + "/step" +
                                std::to_string(step + 1) + ".bsm2",
                            params, model_cfg, opt, step + 1);
    }
  }
  result.params = std::move(params);
  return result;
}

void save_train_checkpoint(const std::string& path, const ModelParams& params,
                           const ModelConfig& model_cfg, const Adam& opt,
                           int64_t step) {
  CheckpointBlob blob;
  blob.config_kv = model_cfg.to_kv();
  blob.config_kv["train.step"] = std::to_string(step);
  blob.tensors = params.named();
  opt.save_state(blob);
  model::write_checkpoint_file(path, blob);
}

// ---------------------------------------------------------------------------
// Evaluation

loss::EvalReport evaluate(const ModelParams& params, const ModelConfig& cfg,
                          const std::vector<TrackStems>& tracks,
                          double segment_seconds, bool with_onset) {
  if (tracks.empty())
    throw std::invalid_argument("evaluate: no tracks");
  std::vector<std::string> names;
  std::vector<dsp::Waveform> refs, ests, mixes;
  for (const auto& t : tracks) {
    names.push_back(t.name);
    refs.push_back(t.vocals);
    mixes.push_back(t.mixture);
    ests.push_back(model::separate_long(t.mixture, params, cfg,
                                        segment_seconds));
  }
  loss::EvalReport report =
      loss::evaluate_tracks(names, refs, ests, cfg.sample_rate);

  if (with_onset) {
    // Pool per-bin segment means across tracks (weighted by segment count).
    std::vector<loss::OnsetBinRow> pooled;
    for (size_t i = 0; i < tracks.size(); ++i) {
      auto rows = loss::onset_duration_report(refs[i], ests[i], mixes[i],
                                              cfg.sample_rate);
      if (pooled.empty()) {
        pooled = rows;
        for (auto& r : pooled) {
          r.mean_sdr *= double(r.segments);
          r.mean_baseline_sdr *= double(r.segments);
        }
      } else {
        for (size_t b = 0; b < rows.size(); ++b) {
          pooled[b].segments += rows[b].segments;
          pooled[b].mean_sdr += rows[b].mean_sdr * double(rows[b].segments);
          pooled[b].mean_baseline_sdr +=
              rows[b].mean_baseline_sdr * double(rows[b].segments);
        }
      }
    }
    for (auto& r : pooled) {
      if (r.segments > 0) {
        r.mean_sdr /= double(r.segments);
        r.mean_baseline_sdr /= double(r.segments);
      }
    }
    report.onset = std::move(pooled);
    bool any = false;
    for (const auto& r : report.onset) any |= r.segments > 0;
    if (!any)
      report.notes.push_back("no vocal activity segments detected");
  }
  return report;
}

}  // namespace bsm::trainer
