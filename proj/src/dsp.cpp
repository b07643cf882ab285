#include "bsm/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>
#include <stdexcept>

namespace bsm::dsp {

using kernels::Fft;

void Waveform::validate() const {
  if (channels.empty() || channels.size() > 2)
    throw std::invalid_argument("waveform: expected 1 or 2 channels, got " +
                                std::to_string(channels.size()));
  if (sample_rate <= 0)
    throw std::invalid_argument("waveform: sample rate must be positive");
  for (const auto& c : channels)
    if (c.size() != channels[0].size())
      throw std::invalid_argument("waveform: channel lengths differ");
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j)
    w[static_cast<size_t>(j)] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * double(j) / double(n));
  return w;
}

int64_t stft_frames(int64_t num_samples, int hop) {
  return (num_samples + hop - 1) / hop;
}

namespace {

// Reflection index without edge repetition, bouncing for short signals.
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct StftLayout {
  int64_t n = 0;       // signal length
  int64_t frames = 0;  // T
  int64_t bins = 0;    // F = window/2 + 1
  int window = 0;
  int hop = 0;
  int64_t padded_len = 0;  // (T-1)*hop + window, in padded coordinates
  // padded position m corresponds to signal index m - window/2 (reflected)
};

StftLayout make_layout(int64_t n, int window, int hop) {
  if (n <= 0) throw std::invalid_argument("stft: empty signal");
  if (window <= 0 || window % 2 != 0)
    throw std::invalid_argument("stft: window size must be positive and even");
  if (hop <= 0 || hop > window)
    throw std::invalid_argument("stft: hop must satisfy 0 < hop <= window (" +
                                std::to_string(hop) + " vs " +
                                std::to_string(window) + ")");
  StftLayout lay;
  lay.n = n;
  lay.window = window;
  lay.hop = hop;
  lay.frames = stft_frames(n, hop);
  lay.bins = window / 2 + 1;
  lay.padded_len = (lay.frames - 1) * hop + window;
  return lay;
}

// Frames whose window covers padded position m: t*hop <= m < t*hop + window.
inline void covering_frames(const StftLayout& lay, int64_t m, int64_t& t0,
                            int64_t& t1) {
  t0 = std::max<int64_t>(0, (m - lay.window + lay.hop) / lay.hop);
  // integer ceil of (m - window + 1)/hop
  if (t0 * lay.hop + lay.window <= m) ++t0;
  t1 = std::min(lay.frames - 1, m / lay.hop);
}

std::shared_ptr<std::vector<double>> ola_norm(
    const StftLayout& lay, const std::vector<double>& win) {
  auto norm = std::make_shared<std::vector<double>>(
      static_cast<size_t>(lay.padded_len), 0.0);
  for (int64_t t = 0; t < lay.frames; ++t)
    for (int j = 0; j < lay.window; ++j)
      (*norm)[static_cast<size_t>(t * lay.hop + j)] +=
          win[static_cast<size_t>(j)] * win[static_cast<size_t>(j)];
  return norm;
}

constexpr double kOlaEps = 1e-10;

}  // namespace

ComplexSpectrogram stft(const Tensor& samples, int window_size, int hop,
                        int sample_rate) {
  if (samples.rank() != 1)
    throw std::invalid_argument("stft: samples must be a 1-D tensor");
  const StftLayout lay = make_layout(samples.numel(), window_size, hop);
  auto win = std::make_shared<std::vector<double>>(hann_window(window_size));
  auto plan = std::make_shared<Fft>(window_size);

  const double* x = samples.data().data();
  std::vector<double> out(static_cast<size_t>(lay.frames * lay.bins * 2));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t t = 0; t < lay.frames; ++t) {
    std::vector<std::complex<double>> buf(static_cast<size_t>(lay.window));
    for (int j = 0; j < lay.window; ++j) {
      const int64_t src = reflect_index(t * lay.hop + j - lay.window / 2,
                                        lay.n);
      buf[static_cast<size_t>(j)] = {
          x[src] * (*win)[static_cast<size_t>(j)], 0.0};
    }
    plan->transform(buf.data(), false);
    double* row = out.data() + t * lay.bins * 2;
    for (int64_t f = 0; f < lay.bins; ++f) {
      row[f * 2 + 0] = buf[static_cast<size_t>(f)].real();
      row[f * 2 + 1] = buf[static_cast<size_t>(f)].imag();
    }
  }

  ComplexSpectrogram spec;
  spec.frames = lay.frames;
  spec.bins = lay.bins;
  spec.window_size = window_size;
  spec.hop = hop;
  spec.sample_rate = sample_rate;

  auto xi = samples.impl();
  if (!xi->needs_grad) {
    spec.coeffs =
        Tensor::from_data({lay.frames, lay.bins, 2}, std::move(out));
    return spec;
  }

  // Adjoint of the analysis operator: per frame an unscaled inverse
  // transform of the one-sided gradient (no hermitian extension), then
  // window multiply, overlap-add, and reflection fold-back.
  auto backward_fn = [xi, lay, win, plan](TensorImpl& self) {
    if (!xi->needs_grad) return;
    xi->ensure_grad();
    const double* g = self.grad.data();
    std::vector<double> adj(static_cast<size_t>(lay.frames * lay.window));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t t = 0; t < lay.frames; ++t) {
      std::vector<std::complex<double>> buf(
          static_cast<size_t>(lay.window), {0.0, 0.0});
      const double* row = g + t * lay.bins * 2;
      for (int64_t f = 0; f < lay.bins; ++f)
        buf[static_cast<size_t>(f)] = {row[f * 2 + 0], row[f * 2 + 1]};
      plan->transform(buf.data(), true);
      double* arow = adj.data() + t * lay.window;
      for (int j = 0; j < lay.window; ++j)
        arow[j] = buf[static_cast<size_t>(j)].real() *
                  (*win)[static_cast<size_t>(j)];
    }
    // Gather overlapping frame contributions per padded position.
    std::vector<double> gpad(static_cast<size_t>(lay.padded_len));
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t m = 0; m < lay.padded_len; ++m) {
      int64_t t0, t1;
      covering_frames(lay, m, t0, t1);
      double acc = 0.0;
      for (int64_t t = t0; t <= t1; ++t)
        acc += adj[static_cast<size_t>(t * lay.window + (m - t * lay.hop))];
      gpad[static_cast<size_t>(m)] = acc;
    }
    // Fold the padded gradient back through the reflection.
    double* gx = xi->grad.data();
    const int64_t half = lay.window / 2;
    const int64_t interior_end = std::min(lay.padded_len, lay.n + half);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t m = half; m < interior_end; ++m)
      gx[m - half] += gpad[static_cast<size_t>(m)];
    for (int64_t m = 0; m < half; ++m)
      gx[reflect_index(m - half, lay.n)] += gpad[static_cast<size_t>(m)];
    for (int64_t m = interior_end; m < lay.padded_len; ++m)
      gx[reflect_index(m - half, lay.n)] += gpad[static_cast<size_t>(m)];
  };

  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {lay.frames, lay.bins, 2};
  impl->data = std::move(out);
  impl->needs_grad = true;
  impl->op = "stft";
  impl->parents.push_back(xi);
  impl->backward_fn = std::move(backward_fn);
  spec.coeffs = Tensor(impl);
  return spec;
}

ComplexSpectrogram stft(const std::vector<double>& samples, int window_size,
                        int hop, int sample_rate) {
  return stft(Tensor::from_data({static_cast<int64_t>(samples.size())},
                                samples),
              window_size, hop, sample_rate);
}

Tensor istft(const ComplexSpectrogram& spec, int64_t target_length) {
  if (target_length <= 0)
    throw std::invalid_argument("istft: target length must be positive");
  const Tensor& coeffs = spec.coeffs;
  if (coeffs.rank() != 3 || coeffs.dim(2) != 2 ||
      coeffs.dim(0) != spec.frames || coeffs.dim(1) != spec.bins)
    throw std::invalid_argument("istft: malformed spectrogram tensor");
  if (spec.bins != spec.window_size / 2 + 1)
    throw std::invalid_argument("istft: bins do not match window size");

  // Layout in padded coordinates; target samples live at [half, half+len).
  StftLayout lay;
  lay.n = target_length;
  lay.window = spec.window_size;
  lay.hop = spec.hop;
  lay.frames = spec.frames;
  lay.bins = spec.bins;
  lay.padded_len = (lay.frames - 1) * lay.hop + lay.window;

  auto win = std::make_shared<std::vector<double>>(
      hann_window(spec.window_size));
  auto plan = std::make_shared<Fft>(spec.window_size);
  auto norm = ola_norm(lay, *win);

  const int64_t half = lay.window / 2;
  const int64_t w = lay.window;

  // Per-frame time samples via hermitian extension; the imaginary parts of
  // the DC and Nyquist bins do not enter the real synthesis.
  std::vector<double> frames_time(static_cast<size_t>(lay.frames * w));
  const double* cd = coeffs.data().data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t t = 0; t < lay.frames; ++t) {
    std::vector<std::complex<double>> buf(static_cast<size_t>(w));
    const double* row = cd + t * lay.bins * 2;
    buf[0] = {row[0], 0.0};
    buf[static_cast<size_t>(w / 2)] = {row[(lay.bins - 1) * 2], 0.0};
    for (int64_t f = 1; f < w / 2; ++f) {
      const std::complex<double> v{row[f * 2 + 0], row[f * 2 + 1]};
      buf[static_cast<size_t>(f)] = v;
      buf[static_cast<size_t>(w - f)] = std::conj(v);
    }
    plan->transform(buf.data(), true);
    double* dst = frames_time.data() + t * w;
    for (int64_t j = 0; j < w; ++j)
      dst[j] = buf[static_cast<size_t>(j)].real() / double(w);
  }

  std::vector<double> out(static_cast<size_t>(target_length), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t i = 0; i < target_length; ++i) {
    const int64_t m = i + half;
    if (m >= lay.padded_len) continue;  // beyond synthesis range: zero
    int64_t t0, t1;
    covering_frames(lay, m, t0, t1);
    double acc = 0.0;
    for (int64_t t = t0; t <= t1; ++t) {
      const int64_t j = m - t * lay.hop;
      acc += (*win)[static_cast<size_t>(j)] *
             frames_time[static_cast<size_t>(t * w + j)];
    }
    out[static_cast<size_t>(i)] =
        acc / std::max((*norm)[static_cast<size_t>(m)], kOlaEps);
  }

  auto ci = coeffs.impl();
  if (!ci->needs_grad)
    return Tensor::from_data({target_length}, std::move(out));

  auto backward_fn = [ci, lay, win, plan, norm, target_length,
                      half, w](TensorImpl& self) {
    if (!ci->needs_grad) return;
    ci->ensure_grad();
    const double* gy = self.grad.data();
    std::vector<double> gpad(static_cast<size_t>(lay.padded_len), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t i = 0; i < target_length; ++i) {
      const int64_t m = i + half;
      if (m >= lay.padded_len) continue;
      gpad[static_cast<size_t>(m)] =
          gy[i] / std::max((*norm)[static_cast<size_t>(m)], kOlaEps);
    }
    double* gc = ci->grad.data();
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t t = 0; t < lay.frames; ++t) {
      std::vector<std::complex<double>> buf(static_cast<size_t>(w));
      for (int64_t j = 0; j < w; ++j) {
        const int64_t m = t * lay.hop + j;
        const double v = m < lay.padded_len
                             ? (*win)[static_cast<size_t>(j)] *
                                   gpad[static_cast<size_t>(m)]
                             : 0.0;
        buf[static_cast<size_t>(j)] = {v, 0.0};
      }
      plan->transform(buf.data(), false);
      double* row = gc + t * lay.bins * 2;
      const double two_over_w = 2.0 / double(w);
      row[0] += buf[0].real() / double(w);
      row[(lay.bins - 1) * 2] +=
          buf[static_cast<size_t>(w / 2)].real() / double(w);
      for (int64_t f = 1; f < w / 2; ++f) {
        row[f * 2 + 0] += two_over_w * buf[static_cast<size_t>(f)].real();
        row[f * 2 + 1] += two_over_w * buf[static_cast<size_t>(f)].imag();
      }
    }
  };

  auto impl = std::make_shared<TensorImpl>();
  impl->shape = {target_length};
  impl->data = std::move(out);
  impl->needs_grad = true;
  impl->op = "istft";
  impl->parents.push_back(ci);
  impl->backward_fn = std::move(backward_fn);
  return Tensor(impl);
}

// ---------------------------------------------------------------------------
// WAV I/O

namespace {

[[noreturn]] void wav_error(const std::string& path, size_t offset,
                            const std::string& what) {
  throw std::runtime_error("wav: " + path + ": " + what + " (byte " +
                           std::to_string(offset) + ")");
}

uint32_t rd_u32(const std::vector<uint8_t>& b, size_t off) {
  return uint32_t(b[off]) | uint32_t(b[off + 1]) << 8 |
         uint32_t(b[off + 2]) << 16 | uint32_t(b[off + 3]) << 24;
}

uint16_t rd_u16(const std::vector<uint8_t>& b, size_t off) {
  return uint16_t(b[off]) | uint16_t(uint32_t(b[off + 1]) << 8);
}

void wr_u32(std::vector<uint8_t>& b, uint32_t v) {
  b.push_back(uint8_t(v & 0xff));
  b.push_back(uint8_t((v >> 8) & 0xff));
  b.push_back(uint8_t((v >> 16) & 0xff));
  b.push_back(uint8_t((v >> 24) & 0xff));
}

void wr_u16(std::vector<uint8_t>& b, uint16_t v) {
  b.push_back(uint8_t(v & 0xff));
  b.push_back(uint8_t((v >> 8) & 0xff));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("wav: cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
  if (bytes.size() < 12) wav_error(path, bytes.size(), "truncated RIFF header");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0)
    wav_error(path, 0, "missing RIFF magic");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    wav_error(path, 8, "missing WAVE tag");

  uint16_t format = 0, num_channels = 0, bits = 0;
  uint32_t rate = 0;
  bool have_fmt = false;
  size_t data_off = 0, data_len = 0;

  size_t off = 12;
  while (off + 8 <= bytes.size()) {
    char id[5] = {};
    std::memcpy(id, bytes.data() + off, 4);
    const uint32_t len = rd_u32(bytes, off + 4);
    const size_t body = off + 8;
    if (body + len > bytes.size())
      wav_error(path, off, std::string("chunk '") + id +
                               "' extends past end of file");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (len < 16) wav_error(path, off, "fmt chunk too short");
      format = rd_u16(bytes, body);
      num_channels = rd_u16(bytes, body + 2);
      rate = rd_u32(bytes, body + 4);
      bits = rd_u16(bytes, body + 14);
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      data_off = body;
      data_len = len;
    }
    off = body + len + (len % 2);  // chunks are word-aligned
  }
  if (!have_fmt) wav_error(path, bytes.size(), "no fmt chunk");
  if (data_off == 0) wav_error(path, bytes.size(), "no data chunk");
  if (num_channels == 0 || num_channels > 2)
    wav_error(path, data_off, "unsupported channel count " +
                                  std::to_string(num_channels));
  if (rate == 0) wav_error(path, data_off, "zero sample rate");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.channels.resize(num_channels);

  if (format == 1 && bits == 16) {
    const size_t frame_bytes = size_t(num_channels) * 2;
    const size_t nframes = data_len / frame_bytes;
    for (auto& c : w.channels) c.resize(nframes);
    for (size_t i = 0; i < nframes; ++i)
      for (int c = 0; c < num_channels; ++c) {
        const size_t p = data_off + i * frame_bytes + size_t(c) * 2;
        const int16_t s = static_cast<int16_t>(rd_u16(bytes, p));
        w.channels[size_t(c)][i] = double(s) / 32768.0;
      }
  } else if (format == 3 && bits == 32) {
    const size_t frame_bytes = size_t(num_channels) * 4;
    const size_t nframes = data_len / frame_bytes;
    for (auto& c : w.channels) c.resize(nframes);
    for (size_t i = 0; i < nframes; ++i)
      for (int c = 0; c < num_channels; ++c) {
        const size_t p = data_off + i * frame_bytes + size_t(c) * 4;
        uint32_t u = rd_u32(bytes, p);
        float f;
        std::memcpy(&f, &u, 4);
        w.channels[size_t(c)][i] = double(f);
      }
  } else {
    wav_error(path, data_off,
              "unsupported codec: format " + std::to_string(format) + ", " +
                  std::to_string(bits) + " bits");
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& w) {
  w.validate();
  for (const auto& c : w.channels)
    for (double v : c)
      if (!std::isfinite(v))
        throw std::invalid_argument("wav: non-finite sample in " + path);

  const int nch = w.num_channels();
  const int64_t nframes = w.num_samples();
  std::vector<uint8_t> bytes;
  bytes.reserve(size_t(nframes) * size_t(nch) * 4 + 64);
  const uint32_t data_len = uint32_t(nframes) * uint32_t(nch) * 4;

  bytes.insert(bytes.end(), {'R', 'I', 'F', 'F'});
  wr_u32(bytes, 4 + (8 + 16) + (8 + 4) + (8 + data_len));
  bytes.insert(bytes.end(), {'W', 'A', 'V', 'E'});
  bytes.insert(bytes.end(), {'f', 'm', 't', ' '});
  wr_u32(bytes, 16);
  wr_u16(bytes, 3);  // IEEE float
  wr_u16(bytes, uint16_t(nch));
  wr_u32(bytes, uint32_t(w.sample_rate));
  wr_u32(bytes, uint32_t(w.sample_rate) * uint32_t(nch) * 4);
  wr_u16(bytes, uint16_t(nch * 4));
  wr_u16(bytes, 32);
  bytes.insert(bytes.end(), {'f', 'a', 'c', 't'});
  wr_u32(bytes, 4);
  wr_u32(bytes, uint32_t(nframes));
  bytes.insert(bytes.end(), {'d', 'a', 't', 'a'});
  wr_u32(bytes, data_len);
  for (int64_t i = 0; i < nframes; ++i)
    for (int c = 0; c < nch; ++c) {
      const float f = static_cast<float>(w.channels[size_t(c)][size_t(i)]);
      uint32_t u;
      std::memcpy(&u, &f, 4);
      wr_u32(bytes, u);
    }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("wav: cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("wav: short write to " + path);
}

}  // namespace bsm::dsp
