// Copyright 2026 The kdcap Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Procedural paired audio/caption data.
//
// A clip is a T x F log-energy-like matrix: the sum of 1-3 sound events, each
// a spectral profile (Gaussian bumps over frequency) times a temporal
// envelope (Gaussian bump over the event interval), plus i.i.d. Gaussian
// noise. Events never overlap and are listed by onset, so captions can name
// them in temporal order. Event names are vocabulary words, which gives an
// exact semantic check (event-set accuracy) next to the n-gram metrics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/common.hpp"
#include "kdcap/tensor.hpp"

namespace kdcap {

using TokenSequence = std::vector<int>;

inline constexpr int kBos = 0;
inline constexpr int kEos = 1;
inline constexpr int kPad = 2;
inline constexpr int kUnk = 3;

// ---------------------------------------------------------------------------
// Vocabulary.

inline const std::vector<std::string>& event_name_pool() {
  static const std::vector<std::string> names = {
      "dog",   "siren",  "bell",    "car",   "bird",    "rain",    "door",  "baby",
      "engine", "horn",  "wind",    "water", "clock",   "cat",     "drum",  "phone",
      "train", "thunder", "music",  "cough", "laughter", "whistle", "steps", "applause"};
  return names;
}

class VocabTokenizer {
 public:
  VocabTokenizer() {
    words_ = {"<bos>", "<eos>", "<pad>", "<unk>", "a", "followed", "by", "then", "the", "and"};
    for (const auto& n : event_name_pool()) words_.push_back(n);
    for (std::size_t i = 0; i < words_.size(); ++i) ids_[words_[i]] = static_cast<int>(i);
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }
  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw VocabularyError("token id " + std::to_string(id) + " out of range");
    return words_[id];
  }

  // Whitespace split; unknown words map to <unk>. Always BOS...EOS framed.
  TokenSequence tokenize(const std::string& text) const {
    TokenSequence out{kBos};
    std::istringstream in(text);
    std::string w;
    while (in >> w) out.push_back(id(w));
    out.push_back(kEos);
    return out;
  }

  // Drops BOS/PAD, stops at EOS.
  std::string detokenize(const TokenSequence& tokens) const {
    std::string out;
    for (int t : tokens) {
      if (t == kBos || t == kPad) continue;
      if (t == kEos) break;
      if (!out.empty()) out += ' ';
      out += word(t);
    }
    return out;
  }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

inline const VocabTokenizer& vocab() {
  static const VocabTokenizer v;
  return v;
}

// ---------------------------------------------------------------------------
// World configuration and data types.

struct WorldConfig {
  std::uint64_t seed = 1234;
  int frames = 100;
  int freq_bins = 16;
  int event_types = 8;
  double noise_sigma = 0.1;
  int templates = 2;
  int n_train = 2000;
  int n_val = 200;
  int n_test = 200;
  int n_audio_only = 2000;
  int min_events = 1;
  int max_events = 3;
  int min_duration = 12;
  int max_duration = 30;
  double min_gain = 0.5;
  double max_gain = 1.0;
  // Frequency bumps per event profile.
  int profile_peaks = 2;
  // Maximum allowed cosine similarity between two event profiles.
  double max_profile_cosine = 0.9;

  void validate() const {
    auto bad = [](const std::string& m) { throw ConfigError("world: " + m); };
    if (frames <= 0 || freq_bins <= 0) bad("frames and freq_bins must be positive");
    if (event_types < 4) bad("event_types must be >= 4");
    if (event_types > static_cast<int>(event_name_pool().size())) bad("event_types exceeds name pool");
    if (n_train <= 0 || n_val <= 0 || n_test <= 0 || n_audio_only < 0) bad("split sizes must be positive");
    if (min_events < 1 || max_events > 3 || min_events > max_events) bad("events per clip must lie in [1,3]");
    if (max_events > event_types) bad("max_events exceeds event_types");
    if (templates < 1 || templates > 3) bad("templates must be 1..3");
    if (min_duration < 1 || max_duration < min_duration) bad("bad duration range");
    if (max_events * max_duration > frames) bad("events cannot fit into the clip");
    if (noise_sigma < 0) bad("noise_sigma must be >= 0");
    if (min_gain <= 0 || max_gain < min_gain) bad("bad gain range");
    if (profile_peaks < 1) bad("profile_peaks must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(WorldConfig, seed, frames, freq_bins, event_types, noise_sigma,
                                   templates, n_train, n_val, n_test, n_audio_only, min_events,
                                   max_events, min_duration, max_duration, min_gain, max_gain,
                                   profile_peaks, max_profile_cosine)

struct EventType {
  int id = 0;
  std::string name;
  std::vector<double> profile;  // F values, peak-normalized
};

struct EventInstance {
  int type = 0;
  int onset = 0;
  int duration = 0;
  double gain = 1.0;
  bool operator==(const EventInstance&) const = default;
};

struct SynthClip {
  std::uint64_t seed = 0;
  Tensor<float> features;  // T x F
  std::vector<EventInstance> events;  // sorted by onset, non-overlapping
};

struct CaptionSet {
  std::vector<TokenSequence> references;
};

struct PairedClip {
  SynthClip clip;
  CaptionSet captions;
};

struct DatasetSplit {
  WorldConfig world;
  std::vector<EventType> event_types;
  std::vector<PairedClip> train, val, test;
  std::vector<SynthClip> audio_only;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Generation.

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return d / std::max(std::sqrt(na) * std::sqrt(nb), 1e-8);
}

inline std::vector<EventType> make_event_types(const WorldConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "event-types"));
  std::uniform_real_distribution<double> center(0.0, cfg.freq_bins - 1.0);
  std::uniform_real_distribution<double> width(0.6, 1.6);
  std::vector<EventType> types;
  int attempts = 0;
  while (static_cast<int>(types.size()) < cfg.event_types) {
    if (++attempts > 100000)
      throw ConfigError("world: cannot find distinguishable event profiles; raise freq_bins");
    std::vector<double> prof(cfg.freq_bins, 0.0);
    for (int p = 0; p < cfg.profile_peaks; ++p) {
      double c = center(rng), w = width(rng);
      double amp = p == 0 ? 1.0 : 0.6;
      for (int f = 0; f < cfg.freq_bins; ++f)
        prof[f] += amp * std::exp(-0.5 * (f - c) * (f - c) / (w * w));
    }
    double mx = *std::max_element(prof.begin(), prof.end());
    for (auto& v : prof) v /= mx;
    bool distinct = std::all_of(types.begin(), types.end(), [&](const EventType& t) {
      return cosine(t.profile, prof) < cfg.max_profile_cosine;
    });
    if (!distinct) continue;
    EventType t;
    t.id = static_cast<int>(types.size());
    t.name = event_name_pool()[t.id];
    t.profile = std::move(prof);
    types.push_back(std::move(t));
  }
  return types;
}

// Temporal envelope of one event: a Gaussian bump centred in its interval,
// zero outside [onset, onset + duration).
inline double event_envelope(const EventInstance& e, int t) {
  if (t < e.onset || t >= e.onset + e.duration) return 0.0;
  double centre = e.onset + 0.5 * (e.duration - 1);
  double sd = std::max(1.0, e.duration / 4.0);
  return std::exp(-0.5 * (t - centre) * (t - centre) / (sd * sd));
}

// Noise-free T x F contribution of a single event.
inline Tensor<float> render_event(const WorldConfig& cfg, const std::vector<EventType>& types,
                                  const EventInstance& e) {
  Tensor<float> out({static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.freq_bins)});
  const auto& prof = types.at(e.type).profile;
  for (int t = e.onset; t < e.onset + e.duration && t < cfg.frames; ++t) {
    double env = e.gain * event_envelope(e, t);
    for (int f = 0; f < cfg.freq_bins; ++f) out(t, f) = static_cast<float>(env * prof[f]);
  }
  return out;
}

inline SynthClip generate_clip(const WorldConfig& cfg, const std::vector<EventType>& types,
                               std::uint64_t clip_seed) {
  Rng rng(clip_seed);
  SynthClip clip;
  clip.seed = clip_seed;
  int n = std::uniform_int_distribution<int>(cfg.min_events, cfg.max_events)(rng);
  std::vector<int> ids(cfg.event_types);
  for (int i = 0; i < cfg.event_types; ++i) ids[i] = i;
  for (int i = 0; i < n; ++i) {
    int j = std::uniform_int_distribution<int>(i, cfg.event_types - 1)(rng);
    std::swap(ids[i], ids[j]);
  }
  std::vector<int> durs(n);
  int total = 0;
  for (int i = 0; i < n; ++i) {
    durs[i] = std::uniform_int_distribution<int>(cfg.min_duration, cfg.max_duration)(rng);
    total += durs[i];
  }
  // Distribute the free frames over n+1 gaps.
  int free = cfg.frames - total;
  std::vector<double> w(n + 1);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  double ws = 0;
  for (auto& x : w) ws += (x = u01(rng) + 1e-6);
  int pos = 0;
  std::uniform_real_distribution<double> gain(cfg.min_gain, cfg.max_gain);
  for (int i = 0; i < n; ++i) {
    pos += static_cast<int>(std::floor(free * w[i] / ws));
    EventInstance e{ids[i], pos, durs[i], gain(rng)};
    clip.events.push_back(e);
    pos += durs[i];
  }
  clip.features = Tensor<float>({static_cast<std::size_t>(cfg.frames), static_cast<std::size_t>(cfg.freq_bins)});
  for (const auto& e : clip.events) {
    auto r = render_event(cfg, types, e);
    for (std::size_t i = 0; i < r.size(); ++i) clip.features.data[i] += r.data[i];
  }
  if (cfg.noise_sigma > 0) {
    std::normal_distribution<double> noise(0.0, cfg.noise_sigma);
    for (auto& v : clip.features.data) v = static_cast<float>(v + noise(rng));
  }
  return clip;
}

// Deterministic caption grammar. Templates:
//   0: "a e1 followed by a e2 followed by a e3"
//   1: "e1 then e2 then e3"
//   2: "the e1 and the e2 and the e3"
inline TokenSequence caption_for(const std::vector<int>& event_ids, int template_id,
                                 int num_templates = 3) {
  if (event_ids.empty() || event_ids.size() > 3)
    throw VocabularyError("caption_for: 1-3 events required");
  if (template_id < 0 || template_id >= num_templates || template_id > 2)
    throw VocabularyError("caption_for: unknown template " + std::to_string(template_id));
  const auto& v = vocab();
  const auto& pool = event_name_pool();
  TokenSequence out{kBos};
  for (std::size_t i = 0; i < event_ids.size(); ++i) {
    int e = event_ids[i];
    if (e < 0 || e >= static_cast<int>(pool.size()))
      throw VocabularyError("caption_for: unknown event id " + std::to_string(e));
    switch (template_id) {
      case 0:
        if (i) {
          out.push_back(v.id("followed"));
          out.push_back(v.id("by"));
        }
        out.push_back(v.id("a"));
        break;
      case 1:
        if (i) out.push_back(v.id("then"));
        break;
      case 2:
        if (i) out.push_back(v.id("and"));
        out.push_back(v.id("the"));
        break;
    }
    out.push_back(v.id(pool[e]));
  }
  out.push_back(kEos);
  return out;
}

inline std::vector<int> event_ids(const SynthClip& clip) {
  std::vector<int> ids;
  for (const auto& e : clip.events) ids.push_back(e.type);
  return ids;
}

inline CaptionSet captions_for(const WorldConfig& cfg, const SynthClip& clip) {
  CaptionSet cs;
  for (int t = 0; t < cfg.templates; ++t) cs.references.push_back(caption_for(event_ids(clip), t));
  return cs;
}

// Event names mentioned by a caption (semantic oracle).
inline std::set<int> caption_event_set(const TokenSequence& tokens) {
  static const int first = vocab().id(event_name_pool().front());
  std::set<int> s;
  for (int t : tokens)
    if (t >= first && t < first + static_cast<int>(event_name_pool().size())) s.insert(t - first);
  return s;
}

inline std::set<int> clip_event_set(const SynthClip& clip) {
  std::set<int> s;
  for (const auto& e : clip.events) s.insert(e.type);
  return s;
}

// Number of distinct ordered event lists times onset placements; a loose
// upper bound on how many genuinely different clips the world can produce.
inline double combinatorial_diversity(const WorldConfig& cfg) {
  double seqs = 0;
  for (int n = cfg.min_events; n <= cfg.max_events; ++n) {
    double p = 1;
    for (int i = 0; i < n; ++i) p *= (cfg.event_types - i);
    seqs += p;
  }
  return seqs * cfg.frames;
}

inline DatasetSplit generate_dataset(const WorldConfig& cfg) {
  cfg.validate();
  DatasetSplit ds;
  ds.world = cfg;
  ds.event_types = make_event_types(cfg);
  std::size_t total = static_cast<std::size_t>(cfg.n_train) + cfg.n_val + cfg.n_test + cfg.n_audio_only;
  if (static_cast<double>(total) > combinatorial_diversity(cfg))
    ds.warnings.push_back("requested " + std::to_string(total) +
                          " clips exceeds the world's combinatorial diversity; expect duplicates");
  std::unordered_set<std::uint64_t> seen;
  auto next_seed = [&](const char* split, int i) {
    std::uint64_t s = derive_seed(cfg.seed, split, static_cast<std::uint64_t>(i));
    while (!seen.insert(s).second) s = splitmix64(s);
    return s;
  };
  auto paired = [&](const char* split, int n, std::vector<PairedClip>& out) {
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
      PairedClip pc;
      pc.clip = generate_clip(cfg, ds.event_types, next_seed(split, i));
      pc.captions = captions_for(cfg, pc.clip);
      out.push_back(std::move(pc));
    }
  };
  paired("train", cfg.n_train, ds.train);
  paired("val", cfg.n_val, ds.val);
  paired("test", cfg.n_test, ds.test);
  ds.audio_only.reserve(cfg.n_audio_only);
  for (int i = 0; i < cfg.n_audio_only; ++i)
    ds.audio_only.push_back(generate_clip(cfg, ds.event_types, next_seed("audio_only", i)));
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json + features.bin (little-endian f32, row-major
// T x F per clip, offsets in bytes recorded per clip).

inline void save_dataset(const DatasetSplit& ds, const std::filesystem::path& dir) {
  using nlohmann::json;
  std::string blob;
  json splits = json::object();
  auto clip_json = [&](const SynthClip& c, const CaptionSet* caps) {
    json j;
    j["seed"] = c.seed;
    j["offset"] = blob.size();
    json ev = json::array();
    for (const auto& e : c.events) ev.push_back({e.type, e.onset, e.duration, e.gain});
    j["events"] = ev;
    if (caps) j["captions"] = caps->references;
    for (float v : c.features.data) append_le_f32(blob, v);
    return j;
  };
  for (auto [name, vec] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val},
                           std::pair{"test", &ds.test}}) {
    json arr = json::array();
    for (const auto& pc : *vec) arr.push_back(clip_json(pc.clip, &pc.captions));
    splits[name] = arr;
  }
  json pool = json::array();
  for (const auto& c : ds.audio_only) pool.push_back(clip_json(c, nullptr));
  splits["audio_only"] = pool;

  json m;
  m["format"] = "kdcap-dataset";
  m["version"] = 1;
  m["world"] = ds.world;
  m["vocab"] = vocab().words();
  json types = json::array();
  for (const auto& t : ds.event_types) types.push_back({{"id", t.id}, {"name", t.name}, {"profile", t.profile}});
  m["event_types"] = types;
  m["sizes"] = {{"train", ds.train.size()}, {"val", ds.val.size()}, {"test", ds.test.size()},
                {"audio_only", ds.audio_only.size()}};
  m["features_file"] = "features.bin";
  m["frame_shape"] = {ds.world.frames, ds.world.freq_bins};
  m["splits"] = splits;
  m["warnings"] = ds.warnings;
  write_file_atomic(dir / "features.bin", blob);
  write_file_atomic(dir / "manifest.json", m.dump(1));
}

inline DatasetSplit load_dataset(const std::filesystem::path& dir) {
  using nlohmann::json;
  if (!std::filesystem::exists(dir / "manifest.json"))
    throw MissingArtifact("dataset manifest not found: " + (dir / "manifest.json").string() +
                          " (run gen-data first)");
  json m = json::parse(read_file(dir / "manifest.json"));
  std::string blob = read_file(dir / m.at("features_file").get<std::string>());
  DatasetSplit ds;
  ds.world = m.at("world").get<WorldConfig>();
  ds.event_types = make_event_types(ds.world);
  ds.warnings = m.value("warnings", std::vector<std::string>{});
  const std::size_t t = ds.world.frames, f = ds.world.freq_bins;
  auto read_clip = [&](const json& j) {
    SynthClip c;
    c.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("events"))
      c.events.push_back({e[0].get<int>(), e[1].get<int>(), e[2].get<int>(), e[3].get<double>()});
    std::size_t off = j.at("offset").get<std::size_t>();
    if (off + t * f * 4 > blob.size()) throw MissingArtifact("features.bin truncated");
    c.features = Tensor<float>({t, f});
    for (std::size_t i = 0; i < t * f; ++i) c.features.data[i] = read_le_f32(&blob[off + 4 * i]);
    return c;
  };
  auto read_paired = [&](const json& arr, std::vector<PairedClip>& out) {
    for (const auto& j : arr) {
      PairedClip pc;
      pc.clip = read_clip(j);
      pc.captions.references = j.at("captions").get<std::vector<TokenSequence>>();
      out.push_back(std::move(pc));
    }
  };
  const auto& s = m.at("splits");
  read_paired(s.at("train"), ds.train);
  read_paired(s.at("val"), ds.val);
  read_paired(s.at("test"), ds.test);
  for (const auto& j : s.at("audio_only")) ds.audio_only.push_back(read_clip(j));
  return ds;
}

}  // namespace kdcap
