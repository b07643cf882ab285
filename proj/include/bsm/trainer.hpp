#pragma once

// Optimization loop wiring the model, loss and data modules: Adam with
// gradient accumulation, deterministic per-step batch draws, periodic
// checkpoint/eval, and the segmented evaluation protocol.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "bsm/data.hpp"
#include "bsm/loss.hpp"
#include "bsm/model.hpp"

namespace bsm::trainer {

struct TrainConfig {
  double learning_rate = 5e-4;
  int64_t steps = 500;
  int64_t batch_size = 1;
  int64_t grad_accum = 1;
  double clip_seconds = 8.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_norm = 5.0;  // 0 disables clipping
  uint64_t seed = 1;
  int64_t eval_every = 0;        // 0 = no periodic eval
  int64_t checkpoint_every = 0;  // 0 = only the final checkpoint
  std::string checkpoint_dir;
  std::string log_path;  // empty = keep the log in memory only
  // random_mix augmentation knobs
  double mix_gain_db = 3.0;
  double mix_polarity_prob = 0.5;
  bool mix_independent = true;

  void validate() const;
};

// Adam over a fixed set of named parameter tensors. Bias-corrected moments;
// the state serializes into checkpoint blobs as opt.m.<name> / opt.v.<name>.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params,
       const TrainConfig& cfg);

  // Applies one update from the accumulated gradients (after optional
  // global-norm clipping) and clears them.
  void step();
  void zero_grad();
  int64_t update_count() const { return t_; }

  void save_state(model::CheckpointBlob& blob) const;
  void load_state(const model::CheckpointBlob& blob);

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_, clip_norm_;
  int64_t t_ = 0;
};

struct TrainLogEntry {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  int64_t wall_ms = 0;
};

struct TrainResult {
  model::ModelParams params;
  std::vector<TrainLogEntry> log;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int64_t steps_run = 0;
};

// Supplies the clip for (step, micro, item); the default draws random_mix
// clips from a seeded stream derived from (seed, step, micro, item), so a
// resumed run replays the identical data order.
using BatchProvider =
    std::function<data::MixedClip(int64_t step, int64_t micro, int64_t item)>;

BatchProvider make_mix_provider(const std::vector<data::TrackStems>& pool,
                                const TrainConfig& cfg);

// Runs `cfg.steps` optimizer steps (or the remaining ones when resuming
// from a checkpoint blob). Throws std::runtime_error naming the step and
// batch seed if the loss goes non-finite. eval_hook, when set, fires every
// cfg.eval_every steps with the current parameters.
using EvalHook =
    std::function<void(int64_t step, const model::ModelParams& params)>;

TrainResult train(const model::ModelConfig& model_cfg, const TrainConfig& cfg,
                  const loss::LossConfig& loss_cfg,
                  const BatchProvider& provider,
                  const model::CheckpointBlob* resume = nullptr,
                  const EvalHook& eval_hook = nullptr);

// Writes params + optimizer + progress into one checkpoint container.
void save_train_checkpoint(const std::string& path,
                           const model::ModelParams& params,
                           const model::ModelConfig& model_cfg,
                           const Adam& opt, int64_t step);

// separate_long per track, metrics vs the vocal stems; when with_onset is
// set the onset-duration rows are pooled over all tracks.
loss::EvalReport evaluate(const model::ModelParams& params,
                          const model::ModelConfig& cfg,
                          const std::vector<data::TrackStems>& tracks,
                          double segment_seconds, bool with_onset = false);

}  // namespace bsm::trainer
