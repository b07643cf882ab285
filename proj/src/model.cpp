#include "bsm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "bsm/rng.hpp"

namespace bsm::model {

using dsp::ComplexSpectrogram;
using dsp::Waveform;
using ssm::BidirectionalBlockParams;

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
  if (d <= 0 || d % 2 != 0)
    throw std::invalid_argument("model: D must be positive and even, got " +
                                std::to_string(d));
  if (repeats < 1)
    throw std::invalid_argument("model: L must be >= 1");
  if (window <= 0 || window % 2 != 0 || hop <= 0 || hop > window)
    throw std::invalid_argument("model: invalid STFT geometry (window " +
                                std::to_string(window) + ", hop " +
                                std::to_string(hop) + ")");
  if (sample_rate <= 0)
    throw std::invalid_argument("model: sample rate must be positive");
  if (channels != 1 && channels != 2)
    throw std::invalid_argument("model: channels must be 1 or 2");
  if (band_edges.size() < 2 || band_edges.front() != 0 ||
      band_edges.back() != bins())
    throw std::invalid_argument(
        "model: band_edges must start at 0 and end at " +
        std::to_string(bins()));
  for (size_t i = 1; i < band_edges.size(); ++i)
    if (band_edges[i] <= band_edges[i - 1])
      throw std::invalid_argument("model: band_edges must increase strictly");
  if (ssm.heads <= 0 || ssm.state <= 0 || inner_dim() % ssm.heads != 0)
    throw std::invalid_argument(
        "model: ssm dims invalid (inner must divide into heads)");
}

std::vector<int64_t> default_band_edges(int64_t bins, int64_t bands,
                                        int64_t min_width) {
  if (bands < 1 || bins < bands)
    throw std::invalid_argument("band edges: need bins >= bands >= 1");
  if (bands == 1) return {0, bins};
  min_width = std::max<int64_t>(1, std::min(min_width, bins / bands));
  // Solve w0 * (r^K - 1)/(r - 1) = bins for the growth ratio by bisection,
  // then tile cumulative rounded widths.
  const double w0 = double(min_width);
  const double kk = double(bands);
  auto total = [&](double r) {
    if (std::abs(r - 1.0) < 1e-12) return w0 * kk;
    return w0 * (std::pow(r, kk) - 1.0) / (r - 1.0);
  };
  double lo = 1.0, hi = 16.0;
  if (total(hi) < double(bins)) hi = std::pow(double(bins), 1.0);
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) < double(bins) ? lo : hi) = mid;
  }
  const double r = 0.5 * (lo + hi);
  std::vector<int64_t> edges(size_t(bands + 1), 0);
  double cum = 0.0;
  const double denom = total(r);
  for (int64_t k = 0; k < bands; ++k) {
    cum += w0 * std::pow(r, double(k));
    edges[size_t(k + 1)] =
        std::llround(cum / denom * double(bins));
  }
  edges[size_t(bands)] = bins;
  for (int64_t k = 1; k <= bands; ++k)  // widths >= 1
    edges[size_t(k)] = std::max(edges[size_t(k)], edges[size_t(k - 1)] + 1);
  for (int64_t k = bands - 1; k >= 1; --k)  // re-fit the tail if clamped
    edges[size_t(k)] = std::min(edges[size_t(k)],
                                edges[size_t(k + 1)] - 1);
  return edges;
}

namespace {

int64_t kv_int(const std::map<std::string, std::string>& kv,
               const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end())
    throw std::runtime_error("config: missing key '" + key + "'");
  return std::stoll(it->second);
}

}  // namespace

std::map<std::string, std::string> ModelConfig::to_kv() const {
  std::map<std::string, std::string> kv;
  kv["model.d"] = std::to_string(d);
  kv["model.l"] = std::to_string(repeats);
  kv["model.window"] = std::to_string(window);
  kv["model.hop"] = std::to_string(hop);
  kv["model.sample_rate"] = std::to_string(sample_rate);
  kv["model.channels"] = std::to_string(channels);
  kv["model.heads"] = std::to_string(ssm.heads);
  kv["model.state"] = std::to_string(ssm.state);
  kv["model.inner"] = std::to_string(ssm.inner);
  kv["model.seed"] = std::to_string(seed);
  std::ostringstream os;
  for (size_t i = 0; i < band_edges.size(); ++i)
    os << (i ? "," : "") << band_edges[i];
  kv["model.band_edges"] = os.str();
  return kv;
}

ModelConfig ModelConfig::from_kv(
    const std::map<std::string, std::string>& kv) {
  ModelConfig cfg;
  cfg.d = kv_int(kv, "model.d");
  cfg.repeats = kv_int(kv, "model.l");
  cfg.window = static_cast<int>(kv_int(kv, "model.window"));
  cfg.hop = static_cast<int>(kv_int(kv, "model.hop"));
  cfg.sample_rate = static_cast<int>(kv_int(kv, "model.sample_rate"));
  cfg.channels = static_cast<int>(kv_int(kv, "model.channels"));
  cfg.ssm.heads = kv_int(kv, "model.heads");
  cfg.ssm.state = kv_int(kv, "model.state");
  cfg.ssm.inner = kv_int(kv, "model.inner");
  cfg.seed = static_cast<uint64_t>(kv_int(kv, "model.seed"));
  auto it = kv.find("model.band_edges");
  if (it == kv.end()) throw std::runtime_error("config: missing band_edges");
  std::stringstream ss(it->second);
  std::string tok;
  while (std::getline(ss, tok, ','))
    cfg.band_edges.push_back(std::stoll(tok));
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

Tensor uniform_weight(int64_t rows, int64_t cols, std::mt19937_64& g) {
  const double bound = std::sqrt(1.0 / double(rows));
  std::vector<double> w(static_cast<size_t>(rows * cols));
  for (auto& v : w) v = rng::uniform(g, -bound, bound);
  return Tensor::from_data({rows, cols}, std::move(w), true);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& cfg) {
  std::mt19937_64 g(cfg.seed);
  ModelParams p;
  const int64_t k_bands = cfg.bands();
  const int64_t c = cfg.channels;
  for (int64_t k = 0; k < k_bands; ++k) {
    const int64_t in = 2 * cfg.band_width(k) * c;
    BandMlp m;
    m.gain = Tensor::full({in}, 1.0, true);
    m.w = uniform_weight(in, cfg.d, g);
    m.b = Tensor::zeros({cfg.d}, true);
    p.band_mlps.push_back(std::move(m));
  }
  for (int64_t r = 0; r < cfg.repeats; ++r) {
    p.time_blocks.push_back(BidirectionalBlockParams::init(
        cfg.d, cfg.ssm.heads, cfg.ssm.state, cfg.inner_dim(), g));
    p.band_blocks.push_back(BidirectionalBlockParams::init(
        cfg.d, cfg.ssm.heads, cfg.ssm.state, cfg.inner_dim(), g));
  }
  for (int64_t k = 0; k < k_bands; ++k) {
    const int64_t hidden = 4 * cfg.band_width(k) * c;
    MaskMlp m;
    m.gain = Tensor::full({cfg.d}, 1.0, true);
    m.w1 = uniform_weight(cfg.d, hidden, g);
    m.b1 = Tensor::zeros({hidden}, true);
    m.w2 = uniform_weight(hidden, hidden, g);
    m.b2 = Tensor::zeros({hidden}, true);
    p.mask_mlps.push_back(std::move(m));
  }
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (size_t k = 0; k < band_mlps.size(); ++k) {
    const std::string pre = "band_split.k" + std::to_string(k);
    out.emplace_back(pre + ".gain", band_mlps[k].gain);
    out.emplace_back(pre + ".w", band_mlps[k].w);
    out.emplace_back(pre + ".b", band_mlps[k].b);
  }
  for (size_t r = 0; r < time_blocks.size(); ++r)
    time_blocks[r].named("dual.r" + std::to_string(r) + ".time", out);
  for (size_t r = 0; r < band_blocks.size(); ++r)
    band_blocks[r].named("dual.r" + std::to_string(r) + ".band", out);
  for (size_t k = 0; k < mask_mlps.size(); ++k) {
    const std::string pre = "mask.k" + std::to_string(k);
    out.emplace_back(pre + ".gain", mask_mlps[k].gain);
    out.emplace_back(pre + ".w1", mask_mlps[k].w1);
    out.emplace_back(pre + ".b1", mask_mlps[k].b1);
    out.emplace_back(pre + ".w2", mask_mlps[k].w2);
    out.emplace_back(pre + ".b2", mask_mlps[k].b2);
  }
  return out;
}

int64_t ModelParams::param_count() const {
  int64_t total = 0;
  for (auto& [name, t] : named()) total += t.numel();
  return total;
}

void ModelParams::zero_grad() const {
  for (auto& [name, t] : named()) {
    Tensor tt = t;
    tt.zero_grad();
  }
}

// ---------------------------------------------------------------------------
// Network pieces

Tensor band_split(const std::vector<ComplexSpectrogram>& spectra,
                  const ModelParams& params, const ModelConfig& cfg) {
  if (static_cast<int>(spectra.size()) != cfg.channels)
    throw std::invalid_argument("band_split: channel count mismatch");
  for (const auto& s : spectra)
    if (s.bins != cfg.bins())
      throw std::invalid_argument(
          "band_split: spectrogram bins " + std::to_string(s.bins) +
          " do not match band layout end " + std::to_string(cfg.bins()));
  const int64_t t_len = spectra[0].frames;
  const int64_t k_bands = cfg.bands();

  std::vector<Tensor> bands;
  bands.reserve(size_t(k_bands));
  for (int64_t k = 0; k < k_bands; ++k) {
    const int64_t fk = cfg.band_width(k);
    std::vector<Tensor> feats;
    for (const auto& s : spectra)
      feats.push_back(reshape(slice(s.coeffs, 1, cfg.band_edges[size_t(k)],
                                    fk),
                              {t_len, 2 * fk}));
    Tensor f = feats.size() == 1 ? feats[0] : concat(feats, 1);
    const auto& mlp = params.band_mlps[size_t(k)];
    Tensor z = linear(rmsnorm(f, mlp.gain), mlp.w, mlp.b);
    bands.push_back(reshape(z, {t_len, 1, cfg.d}));
  }
  return k_bands == 1 ? bands[0] : concat(bands, 1);
}

Tensor dual_path(const Tensor& z, const ModelParams& params,
                 const ModelConfig& cfg) {
  if (z.rank() != 3 || z.dim(1) != cfg.bands() || z.dim(2) != cfg.d)
    throw std::invalid_argument("dual_path: expected [T,K,D] matching config");
  Tensor cur = z;
  for (size_t r = 0; r < params.time_blocks.size(); ++r) {
    // Time axis: each band is an independent sequence over frames.
    Tensor kt = transpose01(cur);  // [K,T,D]
    kt = ssm::bidirectional_block(kt, params.time_blocks[r]);
    cur = transpose01(kt);
    // Band axis: each frame is an independent sequence over bands.
    cur = ssm::bidirectional_block(cur, params.band_blocks[r]);
  }
  return cur;
}

std::vector<Tensor> estimate_mask(const Tensor& q, const ModelParams& params,
                                  const ModelConfig& cfg) {
  if (q.rank() != 3 || q.dim(1) != cfg.bands() || q.dim(2) != cfg.d)
    throw std::invalid_argument(
        "estimate_mask: expected [T,K,D] matching config");
  const int64_t t_len = q.dim(0);
  const int64_t k_bands = cfg.bands();
  const int64_t c = cfg.channels;

  // per channel, list of [T,Fk,2] band masks
  std::vector<std::vector<Tensor>> per_channel(static_cast<size_t>(c));
  for (int64_t k = 0; k < k_bands; ++k) {
    const int64_t fk = cfg.band_width(k);
    const auto& mlp = params.mask_mlps[size_t(k)];
    Tensor qk = reshape(slice(q, 1, k, 1), {t_len, cfg.d});
    Tensor hidden = tanh(linear(rmsnorm(qk, mlp.gain), mlp.w1, mlp.b1));
    Tensor out = glu(linear(hidden, mlp.w2, mlp.b2));  // [T, 2*Fk*C]
    for (int64_t ch = 0; ch < c; ++ch)
      per_channel[size_t(ch)].push_back(
          reshape(slice(out, 1, ch * 2 * fk, 2 * fk), {t_len, fk, 2}));
  }
  std::vector<Tensor> masks;
  for (int64_t ch = 0; ch < c; ++ch)
    masks.push_back(k_bands == 1 ? per_channel[size_t(ch)][0]
                                 : concat(per_channel[size_t(ch)], 1));
  return masks;
}

ComplexSpectrogram apply_mask(const ComplexSpectrogram& x,
                              const Tensor& mask) {
  if (mask.shape() != x.coeffs.shape())
    throw std::invalid_argument("apply_mask: mask shape does not match "
                                "spectrogram");
  Tensor xre = slice(x.coeffs, 2, 0, 1);
  Tensor xim = slice(x.coeffs, 2, 1, 1);
  Tensor mre = slice(mask, 2, 0, 1);
  Tensor mim = slice(mask, 2, 1, 1);
  Tensor sre = sub(mul(xre, mre), mul(xim, mim));
  Tensor sim = add(mul(xre, mim), mul(xim, mre));
  ComplexSpectrogram out = x;
  out.coeffs = concat({sre, sim}, 2);
  return out;
}

std::vector<Tensor> forward_tensors(const Waveform& mixture,
                                    const ModelParams& params,
                                    const ModelConfig& cfg) {
  mixture.validate();
  if (mixture.num_channels() != cfg.channels)
    throw std::invalid_argument("forward: mixture has " +
                                std::to_string(mixture.num_channels()) +
                                " channels, model expects " +
                                std::to_string(cfg.channels));
  const int64_t n = mixture.num_samples();
  if (n < cfg.hop)
    throw std::invalid_argument("forward: input shorter than one hop");

  std::vector<ComplexSpectrogram> spectra;
  for (const auto& chan : mixture.channels)
    spectra.push_back(dsp::stft(chan, cfg.window, cfg.hop, cfg.sample_rate));

  Tensor z = band_split(spectra, params, cfg);
  Tensor q = dual_path(z, params, cfg);
  std::vector<Tensor> masks = estimate_mask(q, params, cfg);

  std::vector<Tensor> est;
  for (int c = 0; c < cfg.channels; ++c)
    est.push_back(dsp::istft(apply_mask(spectra[size_t(c)], masks[size_t(c)]),
                             n));
  return est;
}

Waveform forward(const Waveform& mixture, const ModelParams& params,
                 const ModelConfig& cfg) {
  auto est = forward_tensors(mixture, params, cfg);
  Waveform out;
  out.sample_rate = mixture.sample_rate;
  for (auto& t : est)
    out.channels.emplace_back(t.data().begin(), t.data().end());
  return out;
}

Waveform separate_long(const Waveform& mixture, const ModelParams& params,
                       const ModelConfig& cfg, double segment_seconds) {
  if (segment_seconds <= 0.0)
    throw std::invalid_argument("separate_long: segment length must be "
                                "positive");
  const int64_t n = mixture.num_samples();
  const int64_t seg = std::max<int64_t>(
      1, std::llround(segment_seconds * cfg.sample_rate));

  Waveform out;
  out.sample_rate = mixture.sample_rate;
  out.channels.resize(size_t(mixture.num_channels()));

  int64_t pos = 0;
  while (pos < n) {
    int64_t len = std::min<int64_t>(seg, n - pos);
    // A tail shorter than one hop cannot form a frame; fold it in.
    if (n - (pos + len) > 0 && n - (pos + len) < cfg.hop) len = n - pos;
    Waveform piece;
    piece.sample_rate = mixture.sample_rate;
    for (const auto& chan : mixture.channels)
      piece.channels.emplace_back(chan.begin() + pos, chan.begin() + pos + len);
    Waveform est = forward(piece, params, cfg);
    for (size_t c = 0; c < out.channels.size(); ++c)
      out.channels[c].insert(out.channels[c].end(), est.channels[c].begin(),
                             est.channels[c].end());
    pos += len;
  }
  return out;
}

void force_identity_mask(ModelParams& params, const ModelConfig& cfg) {
  for (int64_t k = 0; k < cfg.bands(); ++k) {
    auto& mlp = params.mask_mlps[size_t(k)];
    for (Tensor* t : {&mlp.w1, &mlp.b1, &mlp.w2}) {
      auto d = t->mutable_data();
      std::fill(d.begin(), d.end(), 0.0);
    }
    // b2 = [value | gate]: value interleaves (1, 0) per bin so the complex
    // mask is 1 + 0i; the gate saturates sigmoid to 1 - 4e-18.
    auto b2 = mlp.b2.mutable_data();
    const int64_t half = mlp.b2.numel() / 2;
    for (int64_t i = 0; i < half; ++i) b2[size_t(i)] = (i % 2 == 0) ? 1.0 : 0.0;
    for (int64_t i = half; i < mlp.b2.numel(); ++i) b2[size_t(i)] = 40.0;
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'B', 'S', 'M', '2'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}
void put_f64(std::string& out, double d) {
  uint64_t u;
  std::memcpy(&u, &d, 8);
  put_u64(out, u);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  std::string path;
  void need(size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: " + path +
                               " truncated at byte " + std::to_string(pos));
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos++])) << (8 * i);
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos++])) << (8 * i);
    return v;
  }
  double f64() {
    const uint64_t u = u64();
    double d;
    std::memcpy(&d, &u, 8);
    return d;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void write_checkpoint_file(const std::string& path,
                           const CheckpointBlob& blob) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);

  std::string cfg_text;
  for (const auto& [k, v] : blob.config_kv) cfg_text += k + "=" + v + "\n";
  put_u64(out, cfg_text.size());
  out += cfg_text;

  put_u32(out, static_cast<uint32_t>(blob.tensors.size()));
  for (const auto& [name, t] : blob.tensors) {
    put_u32(out, static_cast<uint32_t>(name.size()));
    out += name;
    out.push_back(0);  // dtype tag: float64
    put_u32(out, static_cast<uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i)
      put_u64(out, static_cast<uint64_t>(t.dim(i)));
    for (double v : t.data()) put_f64(out, v);
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("checkpoint: short write to " + path);
}

CheckpointBlob read_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};
  if (r.bytes(4) != std::string(kMagic, 4))
    throw std::runtime_error("checkpoint: " + path + ": bad magic bytes");
  const uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("checkpoint: " + path + ": version " +
                             std::to_string(version) + " unsupported (want " +
                             std::to_string(kVersion) + ")");
  CheckpointBlob blob;
  const uint64_t cfg_len = r.u64();
  std::istringstream cfg(r.bytes(cfg_len));
  std::string line;
  while (std::getline(cfg, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos)
      blob.config_kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    const std::string dtype = r.bytes(1);
    if (dtype[0] != 0)
      throw std::runtime_error("checkpoint: " + path + ": tensor '" + name +
                               "' has unsupported dtype tag");
    const uint32_t rank = r.u32();
    std::vector<int64_t> dims;
    int64_t numel = 1;
    for (uint32_t k = 0; k < rank; ++k) {
      dims.push_back(static_cast<int64_t>(r.u64()));
      numel *= dims.back();
    }
    std::vector<double> data(static_cast<size_t>(numel));
    for (auto& v : data) v = r.f64();
    blob.tensors.emplace_back(std::move(name),
                              Tensor::from_data(dims, std::move(data)));
  }
  return blob;
}

void save_checkpoint(const ModelParams& params, const ModelConfig& cfg,
                     const std::string& path) {
  CheckpointBlob blob;
  blob.config_kv = cfg.to_kv();
  blob.tensors = params.named();
  write_checkpoint_file(path, blob);
}

void load_into(const CheckpointBlob& blob, ModelParams& params) {
  auto dst = params.named();
  std::map<std::string, Tensor> src;
  for (const auto& [name, t] : blob.tensors) src.emplace(name, t);
  for (auto& [name, t] : dst) {
    auto it = src.find(name);
    if (it == src.end())
      throw std::runtime_error("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      std::ostringstream os;
      os << "checkpoint: tensor '" << name << "' shape mismatch: file has [";
      for (int i = 0; i < it->second.rank(); ++i)
        os << (i ? "," : "") << it->second.dim(i);
      os << "], model expects [";
      for (int i = 0; i < t.rank(); ++i) os << (i ? "," : "") << t.dim(i);
      os << "]";
      throw std::runtime_error(os.str());
    }
    Tensor tt = t;
    std::copy(it->second.data().begin(), it->second.data().end(),
              tt.mutable_data().begin());
  }
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  LoadedCheckpoint out{ModelConfig{}, ModelParams{},
                       read_checkpoint_file(path)};
  out.config = ModelConfig::from_kv(out.blob.config_kv);
  out.params = ModelParams::init(out.config);
  load_into(out.blob, out.params);
  return out;
}

}  // namespace bsm::model
