// scin_lab: data generation, training, fine-tuning, evaluation, the three
// experiment tables and the gradient self-check.
//
// Exit codes: 0 success, 1 validation or acceptance failure, 2 usage or
// config error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scin/scin.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Common {
  std::string config_path;
  std::string out_root;
  std::string run_dir;
  std::string profile;
  std::optional<std::uint64_t> seed;
  int verbosity = 0;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::vector<std::uint8_t> bytes;
  try {
    bytes = scin::io::read_file(path);
  } catch (const scin::IoError& e) {
    throw scin::ConfigError(std::string("config: ") + e.what());
  }
  try {
    json j = json::parse(bytes.begin(), bytes.end());
    if (!j.is_object()) throw scin::ConfigError("config: top level must be an object");
    return j;
  } catch (const json::parse_error& e) {
    throw scin::ConfigError("config: not valid JSON: " + std::string(e.what()));
  }
}

std::string utc_stamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

// Outputs are staged in "<dir>.partial" and renamed into place on success.
class RunDir {
 public:
  RunDir(const Common& c, const std::string& command, const json& effective) {
    if (!c.run_dir.empty()) {
      final_ = c.run_dir;
    } else {
      std::string root = c.out_root;
      if (root.empty()) {
        const char* env = std::getenv("SCIN_LAB_OUT");
        root = env && *env ? env : "runs";
      }
      const std::string base = command + "-" + scin::hash_text(effective.dump()).substr(0, 12) + "-" + utc_stamp();
      final_ = fs::path(root) / base;
      for (int n = 1; fs::exists(final_); ++n) final_ = fs::path(root) / (base + "-" + std::to_string(n));
    }
    if (fs::exists(final_)) throw scin::UsageError("run directory already exists: " + final_.string());
    staging_ = final_;
    staging_ += ".partial";
    fs::remove_all(staging_);
    std::error_code ec;
    fs::create_directories(staging_, ec);
    if (ec) throw scin::IoError("cannot create run directory '" + staging_.string() + "': " + ec.message());
  }
  const fs::path& path() const { return staging_; }
  const fs::path& final_path() const { return final_; }
  void commit() { fs::rename(staging_, final_); }

 private:
  fs::path final_, staging_;
};

void write_run_record(const RunDir& dir, const std::string& command, const json& effective, const json& extra) {
  json rec = {{"command", command},
              {"timestamp", utc_stamp()},
              {"config", effective},
              {"config_hash", scin::hash_text(effective.dump())}};
  for (auto it = extra.begin(); it != extra.end(); ++it) rec[it.key()] = it.value();
  scin::io::write_text_atomic(dir.path() / "run.json", rec.dump(2) + "\n");
}

template <typename V>
void set_if(json& root, const std::string& section, const char* key, const std::optional<V>& v) {
  if (v) root[section][key] = *v;
}

// Shared preamble: load the file, apply command-line overrides.
json effective_config(const Common& c) {
  json root = load_config(c.config_path);
  if (!c.profile.empty()) root["profile"] = c.profile;
  return root;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

const scin::CohortData& find_cohort(const std::vector<scin::CohortData>& data, const std::string& name) {
  for (const auto& c : data)
    if (c.spec.name == name) return c;
  std::string known;
  for (const auto& c : data) known += (known.empty() ? "" : ", ") + c.spec.name;
  throw scin::UsageError("dataset has no cohort '" + name + "' (has: " + known + ")");
}

std::vector<scin::CohortData> read_dataset_or_usage(const std::string& dir) {
  if (dir.empty()) throw scin::UsageError("no dataset given (--data)");
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw scin::UsageError("no dataset manifest in '" + dir + "'");
  return scin::read_dataset(dir);
}

// Command-line values are merged into `root` first, so this reads the
// effective value and falls back when neither source set it.
std::string section_string(const json& root, const char* section, const char* key, const std::string& fallback) {
  if (root.contains(section) && root[section].contains(key)) {
    if (!root[section][key].is_string()) throw scin::ConfigError(std::string(section) + "." + key + ": wrong type");
    return root[section][key].get<std::string>();
  }
  return fallback;
}

// gen-data -------------------------------------------------------------------

struct GenOpts {
  std::string out;
  std::string cohorts = "a,b,c,orig,msl";
  std::optional<std::size_t> samples;
};

int cmd_gen_data(const Common& c, const GenOpts& o) {
  json root = effective_config(c);
  set_if(root, "data", "samples_per_cohort", o.samples);
  if (!o.out.empty()) root["gen-data"]["out"] = o.out;
  const auto cfg = scin::experiment_config_from_json(root);
  const auto data = scin::make_experiment_data(cfg);
  std::vector<scin::CohortData> chosen;
  for (const auto& key : split_list(o.cohorts)) {
    if (key == "a") chosen.push_back(data.a);
    else if (key == "b") chosen.push_back(data.b);
    else if (key == "c") chosen.push_back(data.c);
    else if (key == "orig") chosen.push_back(data.orig);
    else if (key == "msl") chosen.push_back(data.msl);
    else throw scin::UsageError("--cohorts: unknown cohort key '" + key + "' (a | b | c | orig | msl)");
  }
  if (chosen.empty()) throw scin::UsageError("--cohorts: nothing selected");
  fs::path out = section_string(root, "gen-data", "out", "");
  std::optional<RunDir> run;
  if (out.empty()) {
    run.emplace(c, "gen-data", root);
    out = run->path() / "data";
  }
  scin::write_dataset(out, chosen);
  std::size_t n = 0;
  for (const auto& ch : chosen) n += ch.samples.size();
  const std::string mhash = scin::hash_text(scin::manifest_json(chosen).dump());
  if (run) {
    write_run_record(*run, "gen-data", root, {{"manifest_hash", mhash}, {"samples", n}});
    run->commit();
    out = run->final_path() / "data";
  }
  std::cout << "wrote " << n << " samples in " << chosen.size() << " cohorts to " << out.string() << "\n"
            << "manifest hash " << mhash << "\n";
  return kOk;
}

// train ----------------------------------------------------------------------

struct TrainOpts {
  std::string data, mode, cohorts;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;
};

int cmd_train(const Common& c, const TrainOpts& o) {
  json root = effective_config(c);
  set_if(root, "train", "epochs", o.epochs);
  set_if(root, "train", "batch_size", o.batch_size);
  set_if(root, "train", "lr", o.lr);
  if (c.seed) root["train"]["seed"] = *c.seed;
  if (!o.mode.empty()) root["train"]["mode"] = o.mode;
  if (!o.data.empty()) root["train"]["data"] = o.data;
  if (!o.cohorts.empty()) root["train"]["cohorts"] = split_list(o.cohorts);
  const auto cfg = scin::experiment_config_from_json(root);
  const auto mode = scin::parse_sources_mode(section_string(root, "train", "mode", "scin-pool"), "train.mode");
  std::vector<std::string> names;
  if (root["train"].contains("cohorts")) {
    names = root["train"]["cohorts"].get<std::vector<std::string>>();
  } else if (mode.kind == scin::SourcesMode::Kind::SingleSource) {
    names = {mode.single};
  } else {
    names = {cfg.cohort_a.name, cfg.cohort_b.name};
  }
  const auto data = read_dataset_or_usage(section_string(root, "train", "data", ""));
  std::vector<const scin::LabeledVolume*> tr, va;
  for (const auto& n : names) {
    const auto& ch = find_cohort(data, n);
    for (auto* p : ch.train()) tr.push_back(p);
    for (auto* p : ch.val()) va.push_back(p);
  }
  RunDir run(c, "train", root);
  auto ck = scin::train<scin::Real>(cfg.model, tr, va, mode, cfg.train);
  scin::save_checkpoint(ck, run.path() / "model.ckpt");
  write_run_record(run, "train", root, {{"seed", cfg.train.seed}, {"meta", scin::to_json(ck.meta)}});
  run.commit();
  std::cout << "mode " << ck.meta.mode << ", best epoch " << ck.meta.best_epoch << ", validation Dice "
            << scin::fixed(ck.meta.best_val_dice) << " at threshold " << ck.meta.best_operating_point << "\n"
            << "checkpoint " << (run.final_path() / "model.ckpt").string() << "\n";
  return kOk;
}

// finetune -------------------------------------------------------------------

struct FinetuneOpts {
  std::string data, checkpoint, cohort, source, init;
  std::optional<std::size_t> epochs, samples;
  std::optional<double> lr;
};

int cmd_finetune(const Common& c, const FinetuneOpts& o) {
  json root = effective_config(c);
  set_if(root, "finetune", "epochs", o.epochs);
  set_if(root, "finetune", "samples", o.samples);
  set_if(root, "finetune", "lr", o.lr);
  if (c.seed) root["finetune"]["seed"] = *c.seed;
  if (!o.init.empty()) root["finetune"]["init"] = o.init;
  if (!o.data.empty()) root["finetune"]["data"] = o.data;
  if (!o.checkpoint.empty()) root["finetune"]["checkpoint"] = o.checkpoint;
  if (!o.cohort.empty()) root["finetune"]["cohort"] = o.cohort;
  if (!o.source.empty()) root["finetune"]["source"] = o.source;
  const auto cfg = scin::experiment_config_from_json(root);
  const std::string ckpath = section_string(root, "finetune", "checkpoint", "");
  if (ckpath.empty()) throw scin::UsageError("finetune needs --checkpoint");
  const std::string cohort = section_string(root, "finetune", "cohort", cfg.cohort_c.name);
  const std::string source = section_string(root, "finetune", "source", cohort);
  const auto data = read_dataset_or_usage(section_string(root, "finetune", "data", ""));
  const auto& ch = find_cohort(data, cohort);
  auto tr = ch.train();
  if (tr.size() < cfg.finetune_samples) throw scin::UsageError("cohort '" + cohort + "' has too few training samples");
  tr.resize(cfg.finetune_samples);
  const auto base = scin::load_checkpoint<scin::Real>(ckpath);
  RunDir run(c, "finetune", root);
  auto ck = scin::finetune_norm_only(base, tr, tr, source, cfg.finetune);
  const bool frozen = scin::same_backbone(base.model, ck.model);
  scin::save_checkpoint(ck, run.path() / "model.ckpt");
  std::vector<std::string> ids;
  for (auto* p : tr) ids.push_back(p->sample_id);
  write_run_record(run, "finetune", root,
                   {{"seed", cfg.finetune.seed},
                    {"meta", scin::to_json(ck.meta)},
                    {"samples", ids},
                    {"backbone_bit_identical", frozen}});
  run.commit();
  std::cout << "fine-tuned source '" << source << "' on " << tr.size() << " samples of " << cohort
            << ", fit-set Dice " << scin::fixed(ck.meta.best_val_dice) << ", backbone bit-identical "
            << (frozen ? "yes" : "NO") << "\n"
            << "checkpoint " << (run.final_path() / "model.ckpt").string() << "\n";
  return frozen ? kOk : kFailed;
}

// eval -----------------------------------------------------------------------

struct EvalOpts {
  std::string data, checkpoint, cohort, conditioned_on;
};

json report_json(const scin::MetricsReport& r) {
  auto det = [](const scin::DetectionMetrics& m) {
    json j = {{"tp", m.counts.tp}, {"fp", m.counts.fp}, {"fn", m.counts.fn}, {"precision", m.precision},
              {"recall", m.recall}};
    if (m.f1_defined) j["f1"] = m.f1;
    return j;
  };
  return {{"dice", r.dice},
          {"lesion", det(r.lesion)},
          {"small_lesion", det(r.small_lesion)},
          {"small_lesion_max", r.small_lesion_max},
          {"operating_point", r.operating_point},
          {"n_samples", r.n_samples},
          {"min_size", r.min_size}};
}

int cmd_eval(const Common& c, const EvalOpts& o) {
  json root = effective_config(c);
  if (!o.data.empty()) root["eval"]["data"] = o.data;
  if (!o.checkpoint.empty()) root["eval"]["checkpoint"] = o.checkpoint;
  if (!o.cohort.empty()) root["eval"]["cohort"] = o.cohort;
  if (!o.conditioned_on.empty()) root["eval"]["conditioned_on"] = o.conditioned_on;
  const auto cfg = scin::experiment_config_from_json(root);
  const std::string ckpath = section_string(root, "eval", "checkpoint", "");
  if (ckpath.empty()) throw scin::UsageError("eval needs --checkpoint");
  const std::string cohort = section_string(root, "eval", "cohort", "");
  if (cohort.empty()) throw scin::UsageError("eval needs --cohort");
  const auto data = read_dataset_or_usage(section_string(root, "eval", "data", ""));
  const auto& ch = find_cohort(data, cohort);
  auto ck = scin::load_checkpoint<scin::Real>(ckpath);
  std::string cond = section_string(root, "eval", "conditioned_on", "");
  if (cond.empty()) {
    auto it = ck.meta.cohort_to_source.find(cohort);
    cond = it != ck.meta.cohort_to_source.end() ? it->second : ck.model.registry().names().front();
  }
  if (!ck.model.registry().contains(cond)) {
    throw scin::UsageError("checkpoint has no source '" + cond + "'");
  }
  RunDir run(c, "eval", root);
  scin::AccessLog log;
  const auto rep = scin::evaluate(ck.model, ch.test(), ch.val(), cond, cfg.eval, &log);
  json out = report_json(rep);
  out["cohort"] = cohort;
  out["conditioned_on"] = cond;
  out["checkpoint"] = ckpath;
  out["threshold_selected_on"] = log.threshold_ids;
  scin::io::write_text_atomic(run.path() / "report.json", out.dump(2) + "\n");
  write_run_record(run, "eval", root, {{"seed", ck.meta.seed}});
  run.commit();
  std::cout << cohort << " test, conditioned on " << cond << ": Dice " << scin::fixed(rep.dice) << ", lesion F1 "
            << scin::fixed(rep.lesion.f1) << ", small-lesion F1 "
            << (rep.small_lesion.f1_defined ? scin::fixed(rep.small_lesion.f1) : std::string("n/a"))
            << ", threshold " << rep.operating_point << "\n";
  return kOk;
}

// experiment -----------------------------------------------------------------

struct ExperimentOpts {
  std::string data, compare, seeds;
  bool auto_generate = false;
  std::optional<std::size_t> jobs;
};

int cmd_experiment(const Common& c, const ExperimentOpts& o) {
  json root = effective_config(c);
  set_if(root, "experiment", "jobs", o.jobs);
  if (!o.seeds.empty()) {
    std::vector<std::uint64_t> s;
    for (const auto& t : split_list(o.seeds)) {
      try {
        s.push_back(std::stoull(t));
      } catch (const std::exception&) {
        throw scin::UsageError("--seeds: '" + t + "' is not an integer");
      }
    }
    root["experiment"]["seeds"] = s;
  }
  if (!o.data.empty()) root["experiment"]["data"] = o.data;
  if (o.auto_generate) root["experiment"]["auto_generate"] = true;
  if (!o.compare.empty()) root["experiment"]["compare"] = o.compare;
  auto cfg = scin::experiment_config_from_json(root);
  if (c.seed) {
    // --seed keeps the replicate count and starts the seed run at the value
    const std::size_t n = cfg.seeds.size();
    cfg.seeds.clear();
    for (std::size_t i = 0; i < n; ++i) cfg.seeds.push_back(*c.seed + i);
    root["experiment"]["seeds"] = cfg.seeds;
  }
  bool autogen = false;
  if (root.contains("experiment") && root["experiment"].contains("auto_generate")) {
    if (!root["experiment"]["auto_generate"].is_boolean()) throw scin::ConfigError("experiment.auto_generate: wrong type");
    autogen = root["experiment"]["auto_generate"].get<bool>();
  }
  const std::string data_dir = section_string(root, "experiment", "data", "");
  const std::string compare = section_string(root, "experiment", "compare", "");
  if (data_dir.empty() && !autogen) {
    throw scin::UsageError("experiment needs --data DIR or --auto-generate");
  }
  scin::ExperimentData data =
      data_dir.empty() ? scin::make_experiment_data(cfg) : scin::experiment_data_from(read_dataset_or_usage(data_dir));
  RunDir run(c, "experiment", root);
  if (data_dir.empty()) scin::write_dataset(run.path() / "data", data.all());
  std::optional<fs::path> prev;
  if (!compare.empty()) prev = fs::path(compare);
  const auto t0 = std::chrono::steady_clock::now();
  const auto out = scin::run_experiment_suite(cfg, data, run.path(), prev, c.verbosity > 0 ? &std::cerr : nullptr);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_run_record(run, "experiment", root,
                   {{"seeds", cfg.seeds},
                    {"experiment_config_hash", scin::config_hash(cfg)},
                    {"manifest_hash", data.manifest_hash()},
                    {"seconds", secs}});
  run.commit();
  std::cout << scin::format_table(out.pooling) << '\n'
            << scin::format_table(out.finetune) << '\n'
            << scin::format_table(out.msl, true) << '\n';
  for (const auto& cr : out.criteria) std::cout << cr.line() << '\n';
  std::cout << "results in " << run.final_path().string() << "\n";
  const bool failed = std::any_of(out.criteria.begin(), out.criteria.end(),
                                  [](const auto& cr) { return cr.passed.has_value() && !*cr.passed; });
  return failed ? kFailed : kOk;
}

// gradcheck ------------------------------------------------------------------

struct GradOpts {
  std::string precision = "double";
  bool inject = false;
};

int cmd_gradcheck(const Common& c, const GradOpts& o) {
  json root = effective_config(c);
  scin::experiment_config_from_json(root);  // validates the file
  if (o.precision != "double" && o.precision != "float") {
    throw scin::UsageError("--precision: expected double | float");
  }
  scin::GradcheckSuiteOptions opt;
  opt.double_precision = o.precision == "double";
  if (root.contains("gradcheck")) {
    scin::detail::read_field(root["gradcheck"], "gradcheck", "seed", opt.seed);
    scin::detail::read_field(root["gradcheck"], "gradcheck", "double_precision", opt.double_precision);
  }
  if (c.seed) opt.seed = *c.seed;
  opt.inject_cin_sign_error = o.inject;
  const auto results = scin::run_gradcheck_suite(opt);
  for (const auto& r : results) {
    std::printf("%-26s max rel err %.3e  (tol %.0e, %zu entries, %zu kink skips)  %s\n", r.name.c_str(),
                r.max_rel_error, r.tolerance, r.checked, r.skipped_nonsmooth, r.passed ? "ok" : "FAILED");
  }
  const bool ok = scin::all_passed(results);
  std::cout << (ok ? "gradcheck passed" : "GRADCHECK FAILED") << "\n";
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SCIN laboratory: synthetic cohorts, conditional instance normalisation and the pooling, "
               "fine-tuning and missing-small-lesion experiments"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--out-root", common.out_root, "root for run directories (default $SCIN_LAB_OUT or ./runs)");
    sub->add_option("--run-dir", common.run_dir, "exact run directory (must not exist)");
    sub->add_option("--profile", common.profile, "preset: desk | fast | smoke");
    sub->add_option("--seed", seed_value, "seed override");
    sub->add_flag("-v,--verbose", common.verbosity, "progress on stderr");
  };

  GenOpts gen;
  auto* g = app.add_subcommand("gen-data", "generate the synthetic cohorts and their manifest");
  add_common(g);
  g->add_option("--out", gen.out, "dataset directory (overwritten identically for the same config)");
  g->add_option("--cohorts", gen.cohorts, "comma list of a,b,c,orig,msl");
  g->add_option("--samples", gen.samples, "samples per cohort");

  TrainOpts tr;
  auto* t = app.add_subcommand("train", "train one model");
  add_common(t);
  t->add_option("--data", tr.data, "dataset directory");
  t->add_option("--mode", tr.mode, "single:<cohort> | naive-pool | scin-pool");
  t->add_option("--cohorts", tr.cohorts, "comma list of training cohorts");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr);

  FinetuneOpts ft;
  auto* f = app.add_subcommand("finetune", "norm-only adaptation to a new cohort");
  add_common(f);
  f->add_option("--data", ft.data, "dataset directory");
  f->add_option("--checkpoint", ft.checkpoint, "checkpoint to adapt");
  f->add_option("--cohort", ft.cohort, "cohort providing the labelled samples");
  f->add_option("--source", ft.source, "name of the new source (default: cohort name)");
  f->add_option("--samples", ft.samples, "number of labelled samples");
  f->add_option("--init", ft.init, "mean | ones-zeros | copy:<source>");
  f->add_option("--epochs", ft.epochs);
  f->add_option("--lr", ft.lr);

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint on a cohort's test split");
  add_common(e);
  e->add_option("--data", ev.data, "dataset directory");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint");
  e->add_option("--cohort", ev.cohort, "test cohort");
  e->add_option("--conditioned-on", ev.conditioned_on, "source to condition on");

  ExperimentOpts ex;
  auto* x = app.add_subcommand("experiment", "run the three experiment tables and the acceptance summary");
  add_common(x);
  x->add_option("--data", ex.data, "dataset directory from gen-data");
  x->add_flag("--auto-generate", ex.auto_generate, "generate the dataset when --data is absent");
  x->add_option("--seeds", ex.seeds, "comma list of seeds");
  x->add_option("--jobs", ex.jobs, "parallel seed jobs");
  x->add_option("--compare", ex.compare, "earlier run directory to compare result tables against");

  GradOpts gr;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the end-to-end model");
  add_common(gc);
  gc->add_option("--precision", gr.precision, "double | float (float is refused)");
  gc->add_flag("--inject-cin-sign-error", gr.inject, "mutation fixture: flip the sign of the CIN input gradient")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }
  for (auto* sub : app.get_subcommands())
    if (sub->count("--seed")) common.seed = seed_value;

  try {
    if (g->parsed()) return cmd_gen_data(common, gen);
    if (t->parsed()) return cmd_train(common, tr);
    if (f->parsed()) return cmd_finetune(common, ft);
    if (e->parsed()) return cmd_eval(common, ev);
    if (x->parsed()) return cmd_experiment(common, ex);
    if (gc->parsed()) return cmd_gradcheck(common, gr);
  } catch (const scin::ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kUsage;
  } catch (const scin::UsageError& err) {
    std::cerr << "usage error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
