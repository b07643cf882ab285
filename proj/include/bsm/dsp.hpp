#pragma once

// STFT/ISTFT analysis-synthesis and WAV file I/O.
//
// Conventions (fixed across the repository):
//  * periodic Hann analysis window;
//  * center padding by window/2 on both sides with reflection, so frame t is
//    centered at sample t*hop and frames = ceil(num_samples / hop);
//  * one-sided spectra, bins = window/2 + 1, stored as a [frames, bins, 2]
//    tensor holding (re, im) pairs;
//  * synthesis by overlap-add normalized by the summed squared window
//    (guarded at 1e-10), trimmed back to the requested length.
//
// Both stft and istft are linear operators recorded on the autodiff tape;
// their backward passes are the exact adjoints of the forward definitions.

#include <cstdint>
#include <string>
#include <vector>

#include "bsm/tensor.hpp"

namespace bsm::dsp {

struct Waveform {
  std::vector<std::vector<double>> channels;  // equal lengths
  int sample_rate = 0;

  int num_channels() const { return static_cast<int>(channels.size()); }
  int64_t num_samples() const {
    return channels.empty() ? 0 : static_cast<int64_t>(channels[0].size());
  }
  double duration_seconds() const {
    return sample_rate > 0 ? double(num_samples()) / sample_rate : 0.0;
  }
  static Waveform mono(std::vector<double> samples, int sample_rate) {
    Waveform w;
    w.channels.push_back(std::move(samples));
    w.sample_rate = sample_rate;
    return w;
  }
  // Throws unless channels are 1 or 2, equal length, and the rate is
  // positive.
  void validate() const;
};

struct ComplexSpectrogram {
  Tensor coeffs;  // [frames, bins, 2]
  int64_t frames = 0;
  int64_t bins = 0;
  int window_size = 0;
  int hop = 0;
  int sample_rate = 0;

  double re(int64_t t, int64_t f) const { return coeffs.at({t, f, 0}); }
  double im(int64_t t, int64_t f) const { return coeffs.at({t, f, 1}); }
};

// Periodic Hann window: w[j] = 0.5 - 0.5 cos(2 pi j / n).
std::vector<double> hann_window(int n);

int64_t stft_frames(int64_t num_samples, int hop);

ComplexSpectrogram stft(const Tensor& samples, int window_size, int hop,
                        int sample_rate);
ComplexSpectrogram stft(const std::vector<double>& samples, int window_size,
                        int hop, int sample_rate);

Tensor istft(const ComplexSpectrogram& spec, int64_t target_length);

// WAV (RIFF little-endian). Read accepts PCM16 (scaled by 1/32768) and
// IEEE float32, mono or stereo; write emits float32. Parse failures throw
// std::runtime_error naming the byte offset.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace bsm::dsp
