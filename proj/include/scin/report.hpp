#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scin/checkpoint.hpp"
#include "scin/experiments.hpp"
#include "scin/selfcheck.hpp"

namespace scin {

inline std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline nlohmann::json to_json(const ResultCell& c) {
  return {{"row", c.row},
          {"regime", c.regime},
          {"train_set", c.train_set},
          {"finetuned_on", c.finetuned_on},
          {"conditioned_on", c.conditioned_on},
          {"test_cohort", c.test_cohort},
          {"dice", c.dice},
          {"dice_mean", ResultCell::mean(c.dice)},
          {"dice_sd", ResultCell::sd(c.dice)},
          {"small_lesion_f1", c.small_f1},
          {"small_lesion_f1_mean", ResultCell::mean(c.small_f1)},
          {"lesion_f1", c.lesion_f1},
          {"lesion_f1_mean", ResultCell::mean(c.lesion_f1)},
          {"operating_point", c.operating_point},
          {"small_pred_components", c.small_pred_components},
          {"checkpoints", c.checkpoints}};
}

inline nlohmann::json to_json(const ExperimentResult& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  return {{"name", r.name},
          {"seeds", r.seeds},
          {"config_hash", r.config_hash},
          {"manifest_hash", r.manifest_hash},
          {"checks", r.checks},
          {"notes", r.notes},
          {"cells", cells}};
}

/// Aligned plain-text table: one line per row, one Dice column per test
/// cohort (mean +- sd over seeds). `with_small_f1` adds small-lesion F1.
inline std::string format_table(const ExperimentResult& r, bool with_small_f1 = false) {
  std::vector<std::string> tests;
  for (const auto& c : r.cells)
    if (std::find(tests.begin(), tests.end(), c.test_cohort) == tests.end()) tests.push_back(c.test_cohort);
  std::vector<int> rows;
  for (const auto& c : r.cells)
    if (std::find(rows.begin(), rows.end(), c.row) == rows.end()) rows.push_back(c.row);

  std::vector<std::vector<std::string>> grid;
  std::vector<std::string> head{"#", "Model", "Train Set", "Fine-tuned", "Conditioned On"};
  for (const auto& t : tests) {
    head.push_back("Dice " + t);
    if (with_small_f1) head.push_back("F1<=10 " + t);
  }
  grid.push_back(head);
  for (int row : rows) {
    const auto& first = *std::find_if(r.cells.begin(), r.cells.end(), [&](auto& c) { return c.row == row; });
    std::vector<std::string> line{std::to_string(row), first.regime, first.train_set,
                                  first.finetuned_on.empty() ? "-" : first.finetuned_on, first.conditioned_on};
    for (const auto& t : tests) {
      const auto& c = r.cell(row, t);
      line.push_back(fixed(ResultCell::mean(c.dice)) + " +- " + fixed(ResultCell::sd(c.dice)));
      if (with_small_f1) line.push_back(fixed(ResultCell::mean(c.small_f1)) + " +- " + fixed(ResultCell::sd(c.small_f1)));
    }
    grid.push_back(line);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& line : grid)
    for (std::size_t i = 0; i < line.size(); ++i) width[i] = std::max(width[i], line[i].size());
  std::ostringstream os;
  os << r.name << " (seeds:";
  for (auto s : r.seeds) os << ' ' << s;
  os << "; config " << r.config_hash << "; data " << r.manifest_hash << ")\n";
  for (std::size_t li = 0; li < grid.size(); ++li) {
    for (std::size_t i = 0; i < grid[li].size(); ++i) {
      os << grid[li][i] << std::string(width[i] - grid[li][i].size(), ' ') << (i + 1 < grid[li].size() ? "  " : "");
    }
    os << '\n';
    if (li == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  for (const auto& n : r.notes) os << "note: " << n << '\n';
  return os.str();
}

struct CriterionOutcome {
  int id = 0;
  std::string name;
  std::optional<bool> passed;  // empty: not evaluated in this run
  std::string detail;

  std::string line() const {
    const char* verdict = !passed ? "SKIP" : (*passed ? "PASS" : "FAIL");
    return "criterion " + std::to_string(id) + " " + name + ": " + verdict + (detail.empty() ? "" : "  (" + detail + ")");
  }
};

inline CriterionOutcome criterion_gradients(const std::vector<GradcheckResult>& rs) {
  CriterionOutcome o{1, "gradient-correctness", all_passed(rs), ""};
  double op_worst = 0, e2e = 0;
  for (const auto& r : rs) {
    double& slot = r.name == "end_to_end_unet" ? e2e : op_worst;
    slot = std::max(slot, r.max_rel_error);
  }
  o.detail = "max op rel err " + std::to_string(op_worst) + " < 1e-4, end-to-end " + std::to_string(e2e) + " < 1e-3";
  return o;
}

inline CriterionOutcome criterion_cin(const CinFidelity& f) {
  std::ostringstream d;
  d << "|mean| " << f.max_abs_mean << ", |std-1| " << f.max_std_dev_from_one << ", affine diff " << f.max_affine_diff
    << " (eps=0: " << f.max_affine_diff_eps0 << ")";
  return {2, "cin-equation-fidelity", f.passed, d.str()};
}

inline CriterionOutcome criterion_metrics(const MetricOracleReport& m) {
  std::string d = std::to_string(m.masks_checked) + " masks, " + std::to_string(m.label_mismatches) +
                  " labelling mismatches, " + std::to_string(m.fixture_failures) + " fixture failures";
  for (const auto& f : m.failed) d += "; " + f;
  return {3, "component-metric-oracles", m.passed(), d};
}

/// Pooling-table orderings, compared within each test cohort's column.
inline CriterionOutcome criterion_pooling(const ExperimentResult& r, const std::string& a, const std::string& b) {
  auto m = [&](int row, const std::string& t) { return ResultCell::mean(r.cell(row, t).dice); };
  const bool seeds_ok = r.seeds.size() >= 3;
  const bool pa = m(4, a) >= m(3, a) && m(5, b) >= m(3, b);
  const bool pb = m(1, a) - m(2, a) >= 0.02 && m(2, b) - m(1, b) >= 0.02;
  const bool pc = m(5, a) < m(4, a) && m(4, b) < m(5, b);
  std::ostringstream d;
  d << "seeds " << r.seeds.size() << (seeds_ok ? "" : " (<3)") << "; (a) SCIN " << fixed(m(4, a), 3) << "/"
    << fixed(m(5, b), 3) << " vs naive " << fixed(m(3, a), 3) << "/" << fixed(m(3, b), 3) << (pa ? " ok" : " no")
    << "; (b) in-vs-cross " << fixed(m(1, a) - m(2, a), 3) << "/" << fixed(m(2, b) - m(1, b), 3) << (pb ? " ok" : " no")
    << "; (c) wrong-conditioned " << fixed(m(5, a), 3) << "/" << fixed(m(4, b), 3) << (pc ? " ok" : " no");
  return {4, "pooling-ordering", seeds_ok && pa && pb && pc, d.str()};
}

inline CriterionOutcome criterion_finetune(const ExperimentResult& r, const std::string& c) {
  auto m = [&](int row) { return ResultCell::mean(r.cell(row, c).dice); };
  auto it = r.checks.find("backbone_bit_identical");
  const bool pa = it != r.checks.end() && it->second;
  const double zero_shot = std::max(m(3), m(4));
  const bool pb = m(5) - zero_shot >= 0.01;
  const bool pc = m(5) >= m(2);
  std::ostringstream d;
  d << "(a) backbone bit-identical " << (pa ? "ok" : "no") << "; (b) fine-tuned " << fixed(m(5), 3)
    << " vs best zero-shot " << fixed(zero_shot, 3) << (pb ? " ok" : " no") << "; (c) SCIN-ft " << fixed(m(5), 3)
    << " vs naive-ft " << fixed(m(2), 3) << (pc ? " ok" : " no");
  return {5, "norm-only-finetuning", pa && pb && pc && r.seeds.size() >= 3, d.str()};
}

inline CriterionOutcome criterion_msl(const ExperimentResult& r, const std::string& orig) {
  const auto& o = r.cell(4, orig);
  const auto& s = r.cell(5, orig);
  const double fo = ResultCell::mean(o.small_f1), fs = ResultCell::mean(s.small_f1);
  const double dd = std::abs(ResultCell::mean(o.dice) - ResultCell::mean(s.dice));
  const bool pf = fo > 0 && fs <= 0.7 * fo;
  const bool pd = dd <= 0.05;
  std::ostringstream d;
  d << "small-lesion F1 Orig " << fixed(fo, 3) << " -> MSL " << fixed(fs, 3) << " (relative drop "
    << fixed(fo > 0 ? 1 - fs / fo : 0, 3) << ", need >= 0.30)" << (pf ? " ok" : " no") << "; |dDice| " << fixed(dd, 3)
    << " <= 0.05" << (pd ? " ok" : " no");
  return {6, "missing-small-lesion-bias", pf && pd, d.str()};
}

/// Names of the files compared for reproducibility.
inline const std::vector<std::string>& result_table_files() {
  static const std::vector<std::string> f{"tables.json", "table1.txt", "table2.txt", "table3.txt"};
  return f;
}

/// Byte comparison of two runs' result tables.
inline CriterionOutcome criterion_reproducible(const std::filesystem::path& run, const std::filesystem::path& previous) {
  std::vector<std::string> differ;
  for (const auto& f : result_table_files()) {
    std::vector<std::uint8_t> x, y;
    try {
      x = io::read_file(run / f);
      y = io::read_file(previous / f);
    } catch (const IoError&) {
      differ.push_back(f + " (missing)");
      continue;
    }
    if (x != y) differ.push_back(f);
  }
  std::string d = "compared with " + previous.string();
  for (const auto& f : differ) d += "; differs: " + f;
  return {7, "reproducibility", differ.empty(), d};
}

struct SuiteOutcome {
  ExperimentResult pooling, finetune, msl;
  std::vector<CriterionOutcome> criteria;
  bool all_passed() const {
    return std::all_of(criteria.begin(), criteria.end(), [](auto& c) { return c.passed.value_or(false); });
  }
};

/// Runs the self-checks and all three tables, writes the result tables,
/// per-run training logs and a PASS/FAIL summary into `out`. With `previous`
/// the tables are compared byte for byte against an earlier run.
inline SuiteOutcome run_experiment_suite(ExperimentConfig cfg, const ExperimentData& data,
                                         const std::filesystem::path& out,
                                         const std::optional<std::filesystem::path>& previous = std::nullopt,
                                         std::ostream* progress = nullptr) {
  std::filesystem::create_directories(out);
  cfg.checkpoint_dir = (out / "checkpoints").string();
  SuiteOutcome s;
  auto note = [&](const std::string& msg) {
    if (progress) *progress << msg << std::endl;
  };
  note("self-checks");
  s.criteria.push_back(criterion_gradients(run_gradcheck_suite()));
  s.criteria.push_back(criterion_cin(check_cin_fidelity()));
  s.criteria.push_back(criterion_metrics(check_metric_oracles()));

  const std::string chash = config_hash(cfg), mhash = data.manifest_hash();
  note("pooling experiment");
  PoolingModels models;
  s.pooling = run_pooling_experiment(cfg, data.a, data.b, &models);
  note("fine-tuning experiment");
  s.finetune = run_finetune_experiment(cfg, data.a, data.b, data.c, models);
  note("missing-small-lesion experiment");
  s.msl = run_msl_experiment(cfg, data.orig, data.msl);
  for (auto* r : {&s.pooling, &s.finetune, &s.msl}) {
    r->config_hash = chash;
    r->manifest_hash = mhash;
  }

  nlohmann::json tables = {{"config_hash", chash},
                           {"manifest_hash", mhash},
                           {"config", to_json(cfg)},
                           {"pooling", to_json(s.pooling)},
                           {"finetune", to_json(s.finetune)},
                           {"msl", to_json(s.msl)}};
  io::write_text_atomic(out / "tables.json", tables.dump(2) + "\n");
  io::write_text_atomic(out / "table1.txt", format_table(s.pooling));
  io::write_text_atomic(out / "table2.txt", format_table(s.finetune));
  io::write_text_atomic(out / "table3.txt", format_table(s.msl, true));

  s.criteria.push_back(criterion_pooling(s.pooling, data.a.spec.name, data.b.spec.name));
  s.criteria.push_back(criterion_finetune(s.finetune, data.c.spec.name));
  s.criteria.push_back(criterion_msl(s.msl, data.orig.spec.name));
  if (previous) {
    s.criteria.push_back(criterion_reproducible(out, *previous));
  } else {
    s.criteria.push_back({7, "reproducibility", std::nullopt, "no previous run given (--compare)"});
  }
  std::string summary;
  for (const auto& c : s.criteria) summary += c.line() + "\n";
  io::write_text_atomic(out / "summary.txt", summary);
  return s;
}

}  // namespace scin
