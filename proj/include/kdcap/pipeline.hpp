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

// Experiment configs and run directories.
//
// A run directory holds everything needed to re-derive its report:
//   config.json             experiment config snapshot plus the run's role
//   log.jsonl               one line per epoch
//   checkpoint_best.bin     selected by validation CIDEr
//   checkpoint_final.bin
//   report.json             RunResult with the test MetricReport
//   state.bin               resumable training state (removed on completion)
// Datasets are regenerated from the world config when no data directory is
// given, so a run directory is self-contained.

#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "kdcap/json.hpp"

#include "kdcap/distill.hpp"
#include "kdcap/profile.hpp"

namespace kdcap {

namespace fs = std::filesystem;

struct ProfileConfig {
  int t_in = 100;
  int l_out = 20;
  int runs = 10;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ProfileConfig, t_in, l_out, runs)

inline constexpr int kSchemaVersion = 1;

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  WorldConfig world;
  ModelConfig teacher_model = teacher_config();
  ModelConfig student_model = student_config();
  TrainConfig teacher_train;
  TrainConfig student_train;
  // Paired clips the students see: the first N of the train split (0 = all).
  // The teacher always trains on the whole split.
  int student_pairs = 0;
  EncKind enc_kind = EncKind::contrastive;
  bool augment = false;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  std::vector<std::string> variants = {"scratch", "kd_contra", "kd_mse", "kd_contra_aug", "kd_mse_aug"};
  std::string compare_a = "kd_contra";
  std::string compare_b = "scratch";
  ProfileConfig profile;
  std::string output_dir;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, schema_version, world, teacher_model, student_model,
                                                teacher_train, student_train, student_pairs, enc_kind, augment, seeds, variants,
                                                compare_a, compare_b, profile, output_dir)

struct Variant {
  std::string name;
  bool scratch = false;
  EncKind enc_kind = EncKind::none;
  bool augment = false;
};

inline Variant parse_variant(const std::string& name) {
  if (name == "scratch") return {name, true, EncKind::none, false};
  if (name == "kd_seq") return {name, false, EncKind::none, false};
  if (name == "kd_seq_aug") return {name, false, EncKind::none, true};
  if (name == "kd_contra") return {name, false, EncKind::contrastive, false};
  if (name == "kd_mse") return {name, false, EncKind::mse, false};
  if (name == "kd_contra_aug") return {name, false, EncKind::contrastive, true};
  if (name == "kd_mse_aug") return {name, false, EncKind::mse, true};
  throw ConfigError("unknown variant '" + name + "'");
}

inline std::string variant_name(EncKind k, bool augment) {
  std::string base = k == EncKind::contrastive ? "kd_contra" : k == EncKind::mse ? "kd_mse" : "kd_seq";
  return augment ? base + "_aug" : base;
}

namespace detail {

// Rejects keys absent from `reference` (the serialized defaults), recursing
// into objects and arrays of objects.
inline void reject_unknown(const nlohmann::json& given, const nlohmann::json& reference, const std::string& path) {
  if (!given.is_object() || !reference.is_object()) return;
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string p = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + p + "'");
    const auto& ref = reference.at(it.key());
    if (it->is_object()) {
      reject_unknown(*it, ref, p);
    } else if (it->is_array() && ref.is_array() && !ref.empty() && ref.front().is_object()) {
      for (const auto& e : *it) reject_unknown(e, ref.front(), p + "[]");
    }
  }
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.schema_version != kSchemaVersion)
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version));
  c.world.validate();
  c.teacher_model.validate(c.world.frames);
  c.student_model.validate(c.world.frames);
  if (c.teacher_model.decoder.vocab_size != vocab().size() || c.student_model.decoder.vocab_size != vocab().size())
    throw ConfigError("decoder vocab_size must equal the tokenizer size " + std::to_string(vocab().size()));
  if (c.teacher_model.encoder.input_dim != c.world.freq_bins || c.student_model.encoder.input_dim != c.world.freq_bins)
    throw ConfigError("encoder input_dim must equal world freq_bins");
  c.teacher_train.validate();
  c.student_train.validate();
  if (c.student_pairs < 0 || c.student_pairs > c.world.n_train)
    throw ConfigError("student_pairs must lie in [0, world.n_train]");
  if (c.seeds.empty()) throw ConfigError("seeds must not be empty");
  for (const auto& v : c.variants) parse_variant(v);
  if (c.profile.t_in < 1 || c.profile.l_out < 1 || c.profile.runs < 1) throw ConfigError("profile fields must be >= 1");
}

inline ExperimentConfig parse_experiment_config(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const nlohmann::json defaults = ExperimentConfig{};
  detail::reject_unknown(j, defaults, "");
  // Missing keys at any depth keep their defaults, so a partial model block
  // is read against the teacher or student defaults, not a bare ModelConfig.
  nlohmann::json merged = defaults;
  merged.merge_patch(j);
  ExperimentConfig c;
  try {
    c = merged.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  if (!fs::exists(path)) throw MissingArtifact("config file " + path.string() + " not found");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_experiment_config(j);
}

inline std::string dump_json(const nlohmann::json& j) { return j.dump(2) + "\n"; }

// Refuses to reuse a non-empty directory unless forced (then clears it).
inline void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw OutputExists("output directory " + dir.string() + " exists and is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

inline DatasetSplit dataset_for(const ExperimentConfig& c, const fs::path& data_dir) {
  if (!data_dir.empty()) {
    if (!fs::exists(data_dir / "manifest.json"))
      throw MissingArtifact("dataset manifest " + (data_dir / "manifest.json").string() + " not found (run gen-data)");
    return load_dataset(data_dir);
  }
  return generate_dataset(c.world);
}

// ---------------------------------------------------------------------------
// Training runs.

// The split with its paired training set cut to the first `pairs` clips.
inline DatasetSplit student_split(const DatasetSplit& ds, int pairs) {
  DatasetSplit out = ds;
  out.train.resize(std::min(out.train.size(), static_cast<std::size_t>(pairs)));
  return out;
}

struct RunSpec {
  std::string role;     // teacher | student
  std::string variant;  // empty for the teacher
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  std::string teacher_hash;
};

inline nlohmann::json run_config_json(const ExperimentConfig& c, const RunSpec& r) {
  ExperimentConfig snap = c;
  snap.output_dir.clear();
  return {{"experiment", snap}, {"role", r.role},   {"variant", r.variant}, {"seed", r.seed},
          {"model", r.model},   {"train", r.train}, {"teacher_hash", r.teacher_hash}};
}

template <class S>
TrainHooks<S> run_dir_hooks(const fs::path& dir, bool allow_resume) {
  TrainHooks<S> h;
  const fs::path state = dir / "state.bin";
  if (allow_resume && fs::exists(state)) h.resume = load_snapshot<S>(read_file(state));
  h.on_snapshot = [dir, state](const TrainSnapshot<S>& s) {
    write_file_atomic(state, save_snapshot(s));
    std::string log;
    for (const auto& e : s.log) log += nlohmann::json(e).dump() + "\n";
    write_file_atomic(dir / "log.jsonl", log);
  };
  return h;
}

// Opens a run directory: fresh, resumed (state.bin present, no report) or
// refused (already complete) unless forced.
inline bool open_run_dir(const fs::path& dir, bool force) {
  if (force) {
    prepare_output_dir(dir, true);
    return false;
  }
  if (fs::exists(dir / "report.json"))
    throw OutputExists("run directory " + dir.string() + " is already complete (use --force to redo)");
  if (fs::exists(dir / "state.bin")) return true;
  prepare_output_dir(dir, false);
  return false;
}

template <class S>
void finish_run_dir(const fs::path& dir, const TrainOutput<S>& out) {
  write_file_atomic(dir / "checkpoint_best.bin", save_checkpoint(out.best));
  write_file_atomic(dir / "checkpoint_final.bin", save_checkpoint(out.final));
  write_file_atomic(dir / "report.json", dump_json(out.result));
  std::string log;
  for (const auto& e : out.result.epochs) log += nlohmann::json(e).dump() + "\n";
  write_file_atomic(dir / "log.jsonl", log);
  fs::remove(dir / "state.bin");
}

template <class S>
TrainOutput<S> run_teacher(const ExperimentConfig& c, const DatasetSplit& ds, const fs::path& dir, bool force) {
  bool resume = open_run_dir(dir, force);
  RunSpec spec{"teacher", "", c.teacher_train.seed, c.teacher_model, c.teacher_train, ""};
  write_file_atomic(dir / "config.json", dump_json(run_config_json(c, spec)));
  auto out = train_teacher<S>(c.teacher_train, ds, c.teacher_model, run_dir_hooks<S>(dir, resume));
  finish_run_dir(dir, out);
  return out;
}

template <class S>
CaptionerModel<S> load_run_model(const fs::path& run_dir, const char* which = "checkpoint_best.bin") {
  const fs::path ck = run_dir / which;
  if (!fs::exists(ck)) throw MissingArtifact("checkpoint " + ck.string() + " not found (train it first)");
  return load_checkpoint<S>(read_file(ck));
}

template <class S>
TrainOutput<S> run_student(const ExperimentConfig& c, const Variant& v, std::uint64_t seed,
                           const CaptionerModel<S>& teacher, const DatasetSplit& ds, const fs::path& dir, bool force,
                           const fs::path& cache) {
  bool resume = open_run_dir(dir, force);
  TrainConfig tc = c.student_train;
  tc.seed = seed;
  tc.enc_kind = v.enc_kind;
  tc.augment = v.augment;
  ModelConfig mc = c.student_model;
  mc.kd_head = v.enc_kind;
  mc.teacher_dim = teacher.config().encoder.d_enc();
  RunSpec spec{"student", v.name, seed, mc, tc, checkpoint_hash(teacher)};
  write_file_atomic(dir / "config.json", dump_json(run_config_json(c, spec)));
  auto hooks = run_dir_hooks<S>(dir, resume);
  auto model = init_model<S>(mc, seed, "student");
  const DatasetSplit& data = c.student_pairs > 0 ? student_split(ds, c.student_pairs) : ds;
  TrainOutput<S> out = v.scratch ? train_supervised(std::move(model), tc, data, std::move(hooks))
                                 : distill_student(std::move(model), tc, teacher, data, DistillOptions{cache}, std::move(hooks));
  finish_run_dir(dir, out);
  return out;
}

// Re-evaluates a run directory on its own test split.
template <class S>
MetricReport evaluate_run(const fs::path& run_dir, int beam, const fs::path& data_dir = {}) {
  if (!fs::exists(run_dir / "config.json")) throw MissingArtifact("run config " + (run_dir / "config.json").string() + " not found");
  auto cj = nlohmann::json::parse(read_file(run_dir / "config.json"));
  ExperimentConfig c = parse_experiment_config(cj.at("experiment"));
  DatasetSplit ds = dataset_for(c, data_dir);
  auto model = load_run_model<S>(run_dir);
  return evaluate_corpus(model, ds.test, DecodeConfig{beam, model.config().decoder.max_len, 0, true});
}

// ---------------------------------------------------------------------------
// Reports over many run directories.

struct ReportRow {
  std::string variant;
  std::size_t runs = 0;
  std::uint64_t params = 0;
  std::map<std::string, MeanStd> metrics;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ReportRow, variant, runs, params, metrics)

struct ComparisonReport {
  std::vector<ReportRow> rows;
  std::map<std::string, SeedAggregate> per_variant;
  std::string compare_a, compare_b;
  std::optional<TTest> cider_t_test;
};

inline void to_json(nlohmann::json& j, const ComparisonReport& r) {
  j = {{"rows", r.rows}, {"per_variant", r.per_variant}, {"compare_a", r.compare_a}, {"compare_b", r.compare_b}};
  if (r.cider_t_test)
    j["cider_t_test"] = {{"t", r.cider_t_test->t}, {"df", r.cider_t_test->df}, {"p", r.cider_t_test->p}};
  else
    j["cider_t_test"] = nullptr;
}

inline ComparisonReport build_report(const std::vector<fs::path>& run_dirs, const std::string& a, const std::string& b) {
  std::map<std::string, std::vector<RunResult>> groups;
  std::map<std::string, std::uint64_t> params;
  for (const auto& d : run_dirs) {
    if (!fs::exists(d / "report.json") || !fs::exists(d / "config.json"))
      throw MissingArtifact("run directory " + d.string() + " has no report.json/config.json");
    auto cj = nlohmann::json::parse(read_file(d / "config.json"));
    std::string name = cj.at("role").get<std::string>() == "teacher" ? "teacher" : cj.at("variant").get<std::string>();
    groups[name].push_back(nlohmann::json::parse(read_file(d / "report.json")).get<RunResult>());
    params[name] = count_params(CaptionerModel<float>(cj.at("model").get<ModelConfig>(), 0)).total;
  }
  ComparisonReport r;
  r.compare_a = a;
  r.compare_b = b;
  for (auto& [name, runs] : groups) {
    std::sort(runs.begin(), runs.end(), [](const RunResult& x, const RunResult& y) { return x.seed < y.seed; });
    auto agg = aggregate_runs(runs);
    r.rows.push_back({name, runs.size(), params[name], agg.summary});
    r.per_variant[name] = std::move(agg);
  }
  if (r.per_variant.count(a) && r.per_variant.count(b) && r.per_variant[a].seeds.size() >= 2 &&
      r.per_variant[b].seeds.size() >= 2)
    r.cider_t_test = welch_t_test(r.per_variant[a].per_seed["cider"], r.per_variant[b].per_seed["cider"]);
  return r;
}

inline std::string format_fixed(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

inline std::string report_csv(const ComparisonReport& r) {
  std::string out = "variant,runs,params,bleu4_mean,bleu4_std,rouge_l_mean,rouge_l_std,cider_mean,cider_std,"
                    "event_accuracy_mean,event_accuracy_std\n";
  for (const auto& row : r.rows) {
    out += row.variant + "," + std::to_string(row.runs) + "," + std::to_string(row.params);
    for (const char* k : {"bleu4", "rouge_l", "cider", "event_accuracy"})
      out += "," + format_fixed(row.metrics.at(k).mean, 6) + "," + format_fixed(row.metrics.at(k).std, 6);
    out += "\n";
  }
  return out;
}

// Size-vs-score points, one per variant.
inline std::string scatter_csv(const ComparisonReport& r) {
  std::string out = "variant,params,cider_mean\n";
  for (const auto& row : r.rows)
    out += row.variant + "," + std::to_string(row.params) + "," + format_fixed(row.metrics.at("cider").mean, 6) + "\n";
  return out;
}

inline void write_report(const ComparisonReport& r, const fs::path& dir) {
  fs::create_directories(dir);
  write_file_atomic(dir / "report.json", dump_json(r));
  write_file_atomic(dir / "table.csv", report_csv(r));
  write_file_atomic(dir / "scatter.csv", scatter_csv(r));
}

// gen-data -> train-teacher -> every variant x seed -> report, under `root`.
template <class S>
ComparisonReport reproduce(const ExperimentConfig& c, const fs::path& root, bool force, std::ostream* progress = nullptr) {
  validate(c);
  prepare_output_dir(root, force);
  DatasetSplit ds = generate_dataset(c.world);
  save_dataset(ds, root / "data");
  write_file_atomic(root / "config.json", dump_json(nlohmann::json(c)));
  if (progress) *progress << "data: " << ds.train.size() << " train / " << ds.val.size() << " val / " << ds.test.size()
                          << " test / " << ds.audio_only.size() << " audio-only\n";
  auto teacher = run_teacher<S>(c, ds, root / "teacher", false);
  if (progress) *progress << "teacher: test cider " << format_fixed(teacher.result.test.cider) << "\n";
  std::vector<fs::path> runs;
  for (const auto& vn : c.variants) {
    Variant v = parse_variant(vn);
    for (auto seed : c.seeds) {
      fs::path dir = root / "runs" / (vn + "-seed" + std::to_string(seed));
      auto out = run_student<S>(c, v, seed, teacher.best, ds, dir, false, root / "cache" / "pseudo_labels.jsonl");
      if (progress) *progress << vn << " seed " << seed << ": test cider " << format_fixed(out.result.test.cider) << "\n";
      runs.push_back(dir);
    }
  }
  auto rep = build_report(runs, c.compare_a, c.compare_b);
  write_report(rep, root / "report");
  return rep;
}

}  // namespace kdcap
