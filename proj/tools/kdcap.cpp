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

// kdcap command-line driver.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config error, 3 missing
// prerequisite, 4 numeric divergence, 5 output directory already in use.

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kdcap/kdcap.hpp"

namespace {

using namespace kdcap;

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kMissing = 3, kDiverged = 4, kExists = 5 };

struct Options {
  std::string config, out, data, teacher, student, run, precision = "f32", enc_kind, augment, compare;
  std::vector<std::string> runs;
  std::string seeds;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
  int beam = 3;
};

// Relative output paths live under $KDCAP_RUN_ROOT when it is set.
fs::path resolve_out(const std::string& p) {
  fs::path path(p);
  if (path.is_absolute()) return path;
  if (const char* root = std::getenv("KDCAP_RUN_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

fs::path resolve_in(const std::string& p) {
  if (p.empty()) return {};
  fs::path path(p);
  if (path.is_absolute() || fs::exists(path)) return path;
  if (const char* root = std::getenv("KDCAP_RUN_ROOT"); root && *root) return fs::path(root) / path;
  return path;
}

ExperimentConfig config_from(const Options& o) {
  return o.config.empty() ? ExperimentConfig{} : load_experiment_config(resolve_in(o.config));
}

std::vector<std::uint64_t> parse_seeds(const std::string& s, const std::vector<std::uint64_t>& fallback) {
  if (s.empty()) return fallback;
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("--seeds expects a comma-separated list of integers");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

void require(const std::string& v, const char* flag) {
  if (v.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

template <class S>
int gen_data(const Options& o) {
  require(o.out, "--out");
  auto c = config_from(o);
  if (o.seed_set) c.world.seed = o.seed;
  fs::path out = resolve_out(o.out);
  prepare_output_dir(out, o.force);
  auto ds = generate_dataset(c.world);
  save_dataset(ds, out);
  std::cout << "train " << ds.train.size() << " val " << ds.val.size() << " test " << ds.test.size() << " audio_only "
            << ds.audio_only.size() << "\n";
  for (const auto& w : ds.warnings) std::cerr << "warning: " << w << "\n";
  return kOk;
}

template <class S>
int train_teacher_cmd(const Options& o) {
  require(o.out, "--out");
  auto c = config_from(o);
  if (o.seed_set) c.teacher_train.seed = o.seed;
  auto ds = dataset_for(c, resolve_in(o.data));
  auto out = run_teacher<S>(c, ds, resolve_out(o.out), o.force);
  std::cout << dump_json(headline_metrics(out.result.test));
  return kOk;
}

template <class S>
int distill_cmd(const Options& o) {
  require(o.out, "--out");
  require(o.teacher, "--teacher");
  auto c = config_from(o);
  EncKind kind = o.enc_kind.empty() ? c.enc_kind : parse_enc_kind(o.enc_kind);
  bool aug = c.augment;
  if (!o.augment.empty()) {
    if (o.augment != "on" && o.augment != "off") throw ConfigError("--augment expects on|off");
    aug = o.augment == "on";
  }
  auto ds = dataset_for(c, resolve_in(o.data));
  auto teacher = load_run_model<S>(resolve_in(o.teacher));
  fs::path out = resolve_out(o.out);
  Variant v{variant_name(kind, aug), false, kind, aug};
  auto res = run_student<S>(c, v, o.seed_set ? o.seed : c.seeds.front(), teacher, ds, out, o.force,
                            out.parent_path() / ".cache" / "pseudo_labels.jsonl");
  std::cout << dump_json(headline_metrics(res.result.test));
  return kOk;
}

template <class S>
int evaluate_cmd(const Options& o) {
  require(o.run, "--run");
  auto rep = evaluate_run<S>(resolve_in(o.run), o.beam, resolve_in(o.data));
  if (o.out.empty()) {
    std::cout << dump_json(rep);
  } else {
    fs::path out = resolve_out(o.out);
    prepare_output_dir(out, o.force);
    write_file_atomic(out / "report.json", dump_json(rep));
    std::cout << dump_json(headline_metrics(rep));
  }
  return kOk;
}

template <class S>
int bottleneck_cmd(const Options& o) {
  require(o.out, "--out");
  require(o.teacher, "--teacher");
  auto c = config_from(o);
  auto ds = dataset_for(c, resolve_in(o.data));
  auto teacher = load_run_model<S>(resolve_in(o.teacher));
  fs::path out = resolve_out(o.out);
  prepare_output_dir(out, o.force);
  nlohmann::json rows = nlohmann::json::array();
  std::vector<double> drop_dec, drop_enc;
  for (auto seed : parse_seeds(o.seeds, c.seeds)) {
    TrainConfig tc = c.student_train;
    tc.seed = seed;
    auto r = run_bottleneck_analysis<S>(tc, teacher, ds, c.student_model, DistillOptions{out / ".cache" / "pseudo_labels.jsonl"});
    rows.push_back(r);
    drop_dec.push_back(r.teacher.cider - r.small_decoder.cider);
    drop_enc.push_back(r.teacher.cider - r.small_encoder.cider);
    std::cout << "seed " << seed << ": a " << format_fixed(r.teacher.cider) << " b " << format_fixed(r.small_decoder.cider)
              << " c " << format_fixed(r.small_encoder.cider) << "\n";
  }
  nlohmann::json summary = {{"runs", rows},
                            {"mean_cider_drop_small_decoder", mean_of(drop_dec)},
                            {"mean_cider_drop_small_encoder", mean_of(drop_enc)}};
  write_file_atomic(out / "bottleneck.json", dump_json(summary));
  return kOk;
}

template <class S>
int profile_cmd(const Options& o) {
  require(o.out, "--out");
  auto c = config_from(o);
  auto load_or_init = [&](const std::string& run, const ModelConfig& mc, const char* role) {
    return run.empty() ? init_model<S>(mc, 0, role) : load_run_model<S>(resolve_in(run));
  };
  auto teacher = load_or_init(o.teacher, c.teacher_model, "teacher");
  auto student = load_or_init(o.student, c.student_model, "student");
  fs::path out = resolve_out(o.out);
  prepare_output_dir(out, o.force);
  const auto& p = c.profile;
  auto rt = bench_latency(teacher, p.t_in, p.l_out, p.runs, o.beam);
  auto rs = bench_latency(student, p.t_in, p.l_out, p.runs, o.beam);
  nlohmann::json j = {{"teacher", rt}, {"student", rs},
                      {"param_ratio", static_cast<double>(rs.params.total) / static_cast<double>(rt.params.total)},
                      {"flop_ratio", static_cast<double>(rs.flops.total) / static_cast<double>(rt.flops.total)}};
  write_file_atomic(out / "efficiency.json", dump_json(j));
  std::string csv = "model,params,flops,latency_mean_s,latency_cv\n";
  csv += "teacher," + std::to_string(rt.params.total) + "," + std::to_string(rt.flops.total) + "," +
         format_fixed(rt.latency_mean, 6) + "," + format_fixed(rt.latency_cv, 4) + "\n";
  csv += "student," + std::to_string(rs.params.total) + "," + std::to_string(rs.flops.total) + "," +
         format_fixed(rs.latency_mean, 6) + "," + format_fixed(rs.latency_cv, 4) + "\n";
  write_file_atomic(out / "efficiency.csv", csv);
  std::cout << csv;
  return kOk;
}

int report_cmd(const Options& o) {
  require(o.out, "--out");
  if (o.runs.empty()) throw ConfigError("report needs --runs DIR...");
  std::string a = "kd_contra", b = "scratch";
  if (!o.compare.empty()) {
    auto comma = o.compare.find(',');
    if (comma == std::string::npos) throw ConfigError("--compare expects A,B");
    a = o.compare.substr(0, comma);
    b = o.compare.substr(comma + 1);
  }
  std::vector<fs::path> dirs;
  for (const auto& r : o.runs) dirs.push_back(resolve_in(r));
  auto rep = build_report(dirs, a, b);
  fs::path out = resolve_out(o.out);
  prepare_output_dir(out, o.force);
  write_report(rep, out);
  std::cout << report_csv(rep);
  if (rep.cider_t_test) std::cout << "cider t-test " << a << " vs " << b << ": p = " << rep.cider_t_test->p << "\n";
  return kOk;
}

template <class S>
int reproduce_cmd(const Options& o) {
  require(o.out, "--out");
  auto c = config_from(o);
  c.seeds = parse_seeds(o.seeds, c.seeds);
  auto rep = reproduce<S>(c, resolve_out(o.out), o.force, &std::cout);
  std::cout << report_csv(rep);
  return kOk;
}

template <class S>
int dispatch(const std::string& cmd, const Options& o) {
  if (cmd == "gen-data") return gen_data<S>(o);
  if (cmd == "train-teacher") return train_teacher_cmd<S>(o);
  if (cmd == "distill") return distill_cmd<S>(o);
  if (cmd == "evaluate") return evaluate_cmd<S>(o);
  if (cmd == "bottleneck") return bottleneck_cmd<S>(o);
  if (cmd == "profile") return profile_cmd<S>(o);
  if (cmd == "report") return report_cmd(o);
  if (cmd == "reproduce") return reproduce_cmd<S>(o);
  throw ConfigError("unknown command " + cmd);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kdcap: knowledge distillation for encoder-decoder audio captioners"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config, "Experiment config JSON (defaults when omitted)");
    c->add_option("--out", o.out, "Output directory (relative paths resolve under $KDCAP_RUN_ROOT)");
    c->add_flag("--force", o.force, "Overwrite a non-empty output directory");
    c->add_option("--precision", o.precision, "Scalar type for training and inference")
        ->check(CLI::IsMember({"f32", "f64"}));
  };
  auto seed_opt = [&](CLI::App* c) {
    c->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { o.seed = s; o.seed_set = true; },
                                          "Seed override");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate and persist the synthetic dataset");
  common(gen);
  seed_opt(gen);

  auto* tt = app.add_subcommand("train-teacher", "Train the teacher captioner with the supervised loss");
  common(tt);
  seed_opt(tt);
  tt->add_option("--data", o.data, "Dataset directory from gen-data (regenerated from the config when omitted)");

  auto* di = app.add_subcommand("distill", "Distill a student from a trained teacher");
  common(di);
  seed_opt(di);
  di->add_option("--data", o.data, "Dataset directory");
  di->add_option("--teacher", o.teacher, "Teacher run directory");
  di->add_option("--enc-kind", o.enc_kind, "Encoder-level KD")->check(CLI::IsMember({"none", "contrastive", "mse"}));
  di->add_option("--augment", o.augment, "Use audio-only pseudo-labelled data")->check(CLI::IsMember({"on", "off"}));

  auto* ev = app.add_subcommand("evaluate", "Re-evaluate a run directory on its test split");
  common(ev);
  ev->add_option("--run", o.run, "Run directory");
  ev->add_option("--data", o.data, "Dataset directory");
  ev->add_option("--beam", o.beam, "Beam size")->check(CLI::PositiveNumber);

  auto* bn = app.add_subcommand("bottleneck", "Encoder/decoder bottleneck analysis over seeds");
  common(bn);
  bn->add_option("--data", o.data, "Dataset directory");
  bn->add_option("--teacher", o.teacher, "Teacher run directory");
  bn->add_option("--seeds", o.seeds, "Comma-separated seeds (default: config seeds)");

  auto* pr = app.add_subcommand("profile", "Parameter counts, FLOPs and latency for teacher and student");
  common(pr);
  pr->add_option("--teacher", o.teacher, "Teacher run directory (random init when omitted)");
  pr->add_option("--student", o.student, "Student run directory (random init when omitted)");
  pr->add_option("--beam", o.beam, "Beam size for the latency benchmark")->check(CLI::PositiveNumber);

  auto* rp = app.add_subcommand("report", "Aggregate run directories into a mean/std comparison table");
  common(rp);
  rp->add_option("--runs", o.runs, "Run directories")->expected(1, -1);
  rp->add_option("--compare", o.compare, "Variants for the CIDEr t-test, as A,B (default kd_contra,scratch)");

  auto* re = app.add_subcommand("reproduce", "gen-data, train-teacher, all variants x seeds, report");
  common(re);
  re->add_option("--seeds", o.seeds, "Comma-separated seeds (default: config seeds)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    return o.precision == "f64" ? dispatch<double>(cmd, o) : dispatch<float>(cmd, o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kMissing;
  } catch (const NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kDiverged;
  } catch (const OutputExists& e) {
    std::cerr << "refusing: " << e.what() << "\n";
    return kExists;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
