#pragma once

// The full separation network: band-split encoder, dual-path stack of
// bidirectional selective-SSM blocks (time axis and band axis alternating),
// per-band mask estimation head, complex mask application, and the
// waveform-to-waveform forward pass.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "bsm/dsp.hpp"
#include "bsm/ssm.hpp"
#include "bsm/tensor.hpp"

namespace bsm::model {

struct SsmDims {
  int64_t heads = 4;
  int64_t state = 16;
  int64_t inner = 0;  // 0 -> 2*d
};

struct ModelConfig {
  int64_t d = 16;        // hidden dim (even; GLU halving downstream)
  int64_t repeats = 2;   // dual-path repeats L
  std::vector<int64_t> band_edges;  // K+1 ascending bin indices, 0..F
  int window = 512;
  int hop = 110;
  int sample_rate = 8000;
  int channels = 1;
  SsmDims ssm;
  uint64_t seed = 1;

  int64_t bins() const { return window / 2 + 1; }
  int64_t bands() const {
    return static_cast<int64_t>(band_edges.size()) - 1;
  }
  int64_t band_width(int64_t k) const {
    return band_edges[size_t(k + 1)] - band_edges[size_t(k)];
  }
  int64_t inner_dim() const { return ssm.inner > 0 ? ssm.inner : 2 * d; }

  // Full strictness: throws on any violated invariant (band coverage,
  // even D, L >= 1, valid STFT geometry, 1 or 2 channels).
  void validate() const;

  std::map<std::string, std::string> to_kv() const;
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
};

// Contiguous band partition of [0, F): widths start near min_width bins and
// grow geometrically, tiled exactly (every band at least 1 bin wide).
std::vector<int64_t> default_band_edges(int64_t bins, int64_t bands,
                                        int64_t min_width = 2);

struct BandMlp {
  Tensor gain;  // [2*Fk*C]
  Tensor w;     // [2*Fk*C, D]
  Tensor b;     // [D]
};

struct MaskMlp {
  Tensor gain;  // [D]
  Tensor w1;    // [D, 4*Fk*C]
  Tensor b1;    // [4*Fk*C]
  Tensor w2;    // [4*Fk*C, 4*Fk*C]  (GLU halves the output to 2*Fk*C)
  Tensor b2;    // [4*Fk*C]
};

struct ModelParams {
  std::vector<BandMlp> band_mlps;                       // K entries
  std::vector<ssm::BidirectionalBlockParams> time_blocks;  // L entries
  std::vector<ssm::BidirectionalBlockParams> band_blocks;  // L entries
  std::vector<MaskMlp> mask_mlps;                       // K entries

  static ModelParams init(const ModelConfig& cfg);
  std::vector<std::pair<std::string, Tensor>> named() const;
  int64_t param_count() const;
  void zero_grad() const;
};

// Encodes per-channel spectrograms into the [T,K,D] feature tensor:
// per band, (re, im) interleaved per bin (channel blocks concatenated),
// RMSNorm, then a linear map to D.
Tensor band_split(const std::vector<dsp::ComplexSpectrogram>& spectra,
                  const ModelParams& params, const ModelConfig& cfg);

// L repeats of: time-axis bidirectional block (shared across bands) then
// band-axis bidirectional block (shared across frames).
Tensor dual_path(const Tensor& z, const ModelParams& params,
                 const ModelConfig& cfg);

// Per band: RMSNorm -> linear -> tanh -> linear -> GLU -> complex mask
// bins; bands concatenate along frequency. One [T,F,2] mask per channel.
std::vector<Tensor> estimate_mask(const Tensor& q, const ModelParams& params,
                                  const ModelConfig& cfg);

// Elementwise complex product S_hat = X (*) M.
dsp::ComplexSpectrogram apply_mask(const dsp::ComplexSpectrogram& x,
                                   const Tensor& mask);

// Differentiable end-to-end pass; one estimated-sample tensor per channel,
// each of the input length.
std::vector<Tensor> forward_tensors(const dsp::Waveform& mixture,
                                    const ModelParams& params,
                                    const ModelConfig& cfg);

dsp::Waveform forward(const dsp::Waveform& mixture, const ModelParams& params,
                      const ModelConfig& cfg);

// Splits the mixture into consecutive non-overlapping segments of
// segment_seconds (a final remainder shorter than one hop is folded into
// the previous segment), runs forward on each and concatenates.
dsp::Waveform separate_long(const dsp::Waveform& mixture,
                            const ModelParams& params, const ModelConfig& cfg,
                            double segment_seconds = 8.0);

// Forces the mask head to emit an identity mask (1 + 0i for every bin, up
// to sigmoid saturation ~4e-18): all mask weights zero, bias patterns set.
void force_identity_mask(ModelParams& params, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoint container: magic "BSM2", format version, canonical key=value
// config text, then named float64 tensors (little-endian payloads).

struct CheckpointBlob {
  std::map<std::string, std::string> config_kv;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void write_checkpoint_file(const std::string& path,
                           const CheckpointBlob& blob);
CheckpointBlob read_checkpoint_file(const std::string& path);

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     const std::string& path);

struct LoadedCheckpoint {
  ModelConfig config;
  ModelParams params;
  CheckpointBlob blob;  // full container, for optimizer state etc.
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Copies tensor values from the blob into an existing parameter set;
// throws naming the first tensor whose name or shape does not match.
void load_into(const CheckpointBlob& blob, ModelParams& params);

}  // namespace bsm::model
