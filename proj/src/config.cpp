#include "bsm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bsm::config {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects an integer, got '" + v + "'");
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing characters");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key +
                                "' expects a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key +
                              "' expects true/false, got '" + v + "'");
}

std::vector<int64_t> to_int_list(const std::string& key,
                                 const std::string& v) {
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(to_int(key, trim(tok)));
  return out;
}

// "onset:len:f0:vibdepth:vibrate;..." -> vocal events
std::vector<data::VocalEvent> to_pattern(const std::string& key,
                                         const std::string& v) {
  std::vector<data::VocalEvent> events;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ';')) {
    item = trim(item);
    if (item.empty()) continue;
    std::stringstream es(item);
    std::string tok;
    std::vector<double> fields;
    while (std::getline(es, tok, ':'))
      fields.push_back(to_double(key, trim(tok)));
    if (fields.size() != 5)
      throw std::invalid_argument(
          "config: key '" + key +
          "' expects onset:len:f0:vibdepth:vibrate entries");
    events.push_back({fields[0], fields[1], fields[2], fields[3], fields[4]});
  }
  return events;
}

}  // namespace

std::map<std::string, std::string> parse_config_file(
    const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("config: cannot read " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: " + path + ":" +
                                  std::to_string(lineno) +
                                  ": expected key = value");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

RunConfig RunConfig::from_map(std::map<std::string, std::string> kv) {
  RunConfig rc;
  int64_t bands = 6;
  bool explicit_edges = false;

  auto take = [&](const char* key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) return "";
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_int = [&](const char* key, int64_t& dst) {
    if (auto v = take(key); !v.empty()) dst = to_int(key, v);
  };
  auto take_int32 = [&](const char* key, int& dst) {
    if (auto v = take(key); !v.empty())
      dst = static_cast<int>(to_int(key, v));
  };
  auto take_double = [&](const char* key, double& dst) {
    if (auto v = take(key); !v.empty()) dst = to_double(key, v);
  };
  auto take_u64 = [&](const char* key, uint64_t& dst) {
    if (auto v = take(key); !v.empty())
      dst = static_cast<uint64_t>(to_int(key, v));
  };
  auto take_bool = [&](const char* key, bool& dst) {
    if (auto v = take(key); !v.empty()) dst = to_bool(key, v);
  };
  auto take_string = [&](const char* key, std::string& dst) {
    if (auto v = take(key); !v.empty()) dst = v;
  };

  take_int("model.d", rc.model.d);
  take_int("model.l", rc.model.repeats);
  take_int32("model.window", rc.model.window);
  take_int32("model.hop", rc.model.hop);
  take_int32("model.sample_rate", rc.model.sample_rate);
  take_int32("model.channels", rc.model.channels);
  take_int("model.heads", rc.model.ssm.heads);
  take_int("model.state", rc.model.ssm.state);
  take_int("model.inner", rc.model.ssm.inner);
  take_u64("model.seed", rc.model.seed);
  take_int("model.bands", bands);
  if (auto v = take("model.band_edges"); !v.empty()) {
    rc.model.band_edges = to_int_list("model.band_edges", v);
    explicit_edges = true;
  }

  take_double("loss.lambda_time", rc.loss.lambda_time);
  if (auto v = take("loss.windows"); !v.empty()) {
    rc.loss.stft_windows.clear();
    for (int64_t w : to_int_list("loss.windows", v))
      rc.loss.stft_windows.push_back(static_cast<int>(w));
  }
  if (auto v = take("loss.hop"); !v.empty())
    rc.loss.stft_hop = static_cast<int>(to_int("loss.hop", v));

  take_double("train.learning_rate", rc.train.learning_rate);
  take_int("train.steps", rc.train.steps);
  take_int("train.batch_size", rc.train.batch_size);
  take_int("train.grad_accum", rc.train.grad_accum);
  take_double("train.clip_seconds", rc.train.clip_seconds);
  take_double("train.adam_beta1", rc.train.adam_beta1);
  take_double("train.adam_beta2", rc.train.adam_beta2);
  take_double("train.adam_eps", rc.train.adam_eps);
  take_double("train.grad_clip", rc.train.grad_clip_norm);
  take_u64("train.seed", rc.train.seed);
  take_int("train.eval_every", rc.train.eval_every);
  take_int("train.checkpoint_every", rc.train.checkpoint_every);
  take_string("train.checkpoint_dir", rc.train.checkpoint_dir);
  take_string("train.log_path", rc.train.log_path);
  take_double("train.mix_gain_db", rc.train.mix_gain_db);
  take_double("train.mix_polarity_prob", rc.train.mix_polarity_prob);
  take_bool("train.mix_independent", rc.train.mix_independent);

  take_string("data.dir", rc.data_dir);
  take_int("data.synth_tracks", rc.synth_tracks);

  take_int32("synth.sample_rate", rc.synth.sample_rate);
  take_double("synth.duration", rc.synth.duration_s);
  take_double("synth.drum_rate", rc.synth.drum_rate_hz);
  take_double("synth.bass_f0", rc.synth.bass_f0_hz);
  take_u64("synth.seed", rc.synth.seed);
  take_bool("synth.auto_pattern", rc.synth_auto_pattern);
  if (auto v = take("synth.pattern"); !v.empty()) {
    rc.synth.pattern = to_pattern("synth.pattern", v);
    rc.synth_auto_pattern = false;
  }

  take_double("eval.segment_seconds", rc.eval_segment_seconds);

  if (!kv.empty()) {
    std::ostringstream os;
    os << "config: unknown key";
    if (kv.size() > 1) os << "s";
    for (const auto& [k, v] : kv) os << " '" << k << "'";
    throw std::invalid_argument(os.str());
  }

  if (!explicit_edges)
    rc.model.band_edges = model::default_band_edges(rc.model.bins(), bands);
  rc.model.validate();
  rc.train.validate();
  rc.loss.validate();
  if (rc.synth.sample_rate != rc.model.sample_rate && rc.data_dir.empty())
    rc.synth.sample_rate = rc.model.sample_rate;
  if (rc.eval_segment_seconds <= 0.0)
    throw std::invalid_argument("config: eval.segment_seconds must be > 0");
  if (rc.synth_tracks < 1)
    throw std::invalid_argument("config: data.synth_tracks must be >= 1");
  return rc;
}

RunConfig RunConfig::load(const std::string& path,
                          const std::vector<std::string>& overrides) {
  auto kv = parse_config_file(path);
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: --set expects key=value, got '" +
                                  o + "'");
    kv[trim(o.substr(0, eq))] = trim(o.substr(eq + 1));
  }
  return from_map(std::move(kv));
}

std::vector<data::TrackStems> RunConfig::make_pool() const {
  if (!data_dir.empty()) {
    auto result = data::load_stem_dir(data_dir);
    if (result.tracks.empty()) {
      std::string msg = "config: no loadable tracks in " + data_dir;
      for (const auto& e : result.errors) msg += "\n  " + e;
      throw std::runtime_error(msg);
    }
    return result.tracks;
  }
  std::vector<data::TrackStems> pool;
  for (int64_t i = 0; i < synth_tracks; ++i) {
    data::SynthSpec spec = synth;
    spec.seed = synth.seed + static_cast<uint64_t>(i);
    if (synth_auto_pattern)
      spec.pattern = data::SynthSpec::auto_pattern(spec.duration_s, spec.seed);
    pool.push_back(data::synth_stems(spec));
    pool.back().name = "synth" + std::to_string(i);
  }
  return pool;
}

}  // namespace bsm::config
