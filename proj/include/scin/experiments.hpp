#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "scin/checkpoint.hpp"
#include "scin/cohort.hpp"
#include "scin/dataset_io.hpp"
#include "scin/metrics.hpp"
#include "scin/training.hpp"

namespace scin {

struct ExperimentConfig {
  std::string profile = "fast";
  ModelConfig model;
  TrainConfig train;
  TrainConfig finetune;
  std::size_t finetune_samples = 10;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t samples_per_cohort = 100;
  std::vector<double> fractions{0.6, 0.2, 0.2};
  std::uint64_t split_seed = 7;
  CohortSpec cohort_a, cohort_b, cohort_c, msl_base;
  std::size_t msl_k = 10;
  EvalOptions eval;
  std::size_t jobs = 1;
  std::string checkpoint_dir;  // empty: checkpoints stay in memory

  static ExperimentConfig preset(const std::string& name);
};

namespace detail {

inline CohortSpec base_cohort(Extent3 e) {
  CohortSpec s;
  s.extent = e;
  s.channels = 2;
  s.background = {0.0, 0.0};
  s.lesion_intensity_shift = {1.0, 0.6};
  s.background_noise_sigma = 0.35;
  s.gain = {1.0, 1.0};
  s.offset = {0.0, 0.0};
  s.radius_sigma = 0.35;
  return s;
}

}  // namespace detail

/// Cohort presets standing in for the three trials: A has fewer, larger
/// lesions, exact labels and scanner gain 1.2; B more, smaller lesions,
/// labels dilated by one voxel and gain 0.8; C sits between them in
/// geometry with labels dilated by two voxels. The MSL base cohort mixes
/// many sub-10-voxel lesions with larger ones.
inline ExperimentConfig ExperimentConfig::preset(const std::string& name) {
  ExperimentConfig c;
  c.profile = name;
  Extent3 e{16, 16, 16};
  if (name == "desk") {
    e = {32, 32, 32};
    c.model.base_channels = 8;
    c.model.depth = 3;
    c.train.epochs = 40;
    c.finetune.epochs = 60;
  } else if (name == "fast") {
    c.model.base_channels = 8;
    c.model.depth = 2;
    c.train.epochs = 15;
    c.finetune.epochs = 40;
  } else if (name == "smoke") {
    c.model.base_channels = 2;
    c.model.depth = 2;
    c.train.epochs = 1;
    c.finetune.epochs = 1;
    c.samples_per_cohort = 15;
    c.finetune_samples = 3;
    c.seeds = {1};
  } else {
    throw ConfigError("profile: unknown preset '" + name + "' (expected desk | fast | smoke)");
  }
  c.model.in_channels = 2;
  c.model.dropout_p = 0.1;
  c.train.batch_size = 4;
  c.train.lr = 3e-3;
  c.finetune.batch_size = 2;
  c.finetune.lr = 1e-2;
  c.finetune.init = InitPolicy::mean_of_existing();

  const double scale = double(e.d) / 16.0;
  c.cohort_a = detail::base_cohort(e);
  c.cohort_a.name = "trial-A";
  c.cohort_a.lesion_count = 3.0 * scale * scale;
  c.cohort_a.radius_median = 2.0;
  c.cohort_a.gain = {1.2, 1.2};
  c.cohort_a.label_style = LabelStyle::exact();
  c.cohort_a.seed = 11;

  c.cohort_b = c.cohort_a;
  c.cohort_b.name = "trial-B";
  c.cohort_b.lesion_count = 4.0 * scale * scale;
  c.cohort_b.radius_median = 1.6;
  c.cohort_b.gain = {0.8, 0.8};
  c.cohort_b.label_style = LabelStyle::dilate(1);
  c.cohort_b.seed = 22;

  c.cohort_c = c.cohort_a;
  c.cohort_c.name = "trial-C";
  c.cohort_c.lesion_count = 3.5 * scale * scale;
  c.cohort_c.radius_median = 1.8;
  c.cohort_c.gain = {1.0, 1.0};
  c.cohort_c.label_style = LabelStyle::dilate(2);
  c.cohort_c.seed = 33;

  c.msl_base = detail::base_cohort(e);
  c.msl_base.name = "trial-base";
  c.msl_base.lesion_count = 9.0 * scale * scale;
  c.msl_base.radius_median = 1.4;
  c.msl_base.radius_sigma = 0.45;
  c.msl_base.lesion_intensity_shift = {1.5, 1.0};
  c.msl_base.background_noise_sigma = 0.35;
  c.msl_base.blur = false;
  c.msl_base.seed = 44;
  return c;
}

// One row of a results table, evaluated on one test cohort.
struct ResultCell {
  int row = 0;
  std::string regime;        // e.g. "Single-Trial", "Naive-Pooling", "SCIN-Pooling"
  std::string train_set;     // e.g. "trial-A+trial-B"
  std::string finetuned_on;  // empty if not fine-tuned
  std::string conditioned_on;  // "-" for plain instance norm
  std::string test_cohort;
  std::vector<double> dice;  // one per seed
  std::vector<double> small_f1;
  std::vector<double> lesion_f1;
  std::vector<double> operating_point;
  std::vector<std::size_t> small_pred_components;  // predicted components of size <= k, summed over test set
  std::vector<std::string> checkpoints;

  static double mean(const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / double(v.size());
  }
  static double sd(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
  }
};

struct ExperimentResult {
  std::string name;
  std::vector<std::uint64_t> seeds;
  std::vector<ResultCell> cells;
  std::string config_hash;
  std::string manifest_hash;
  std::vector<std::string> notes;
  std::map<std::string, bool> checks;  // structural checks made while running

  const ResultCell& cell(int row, const std::string& test_cohort) const {
    for (const auto& c : cells)
      if (c.row == row && c.test_cohort == test_cohort) return c;
    throw LookupError(name + ": no cell for row " + std::to_string(row) + " on " + test_cohort);
  }
};

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline std::string hash_text(const std::string& s) {
  return hex64(io::fnv1a(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

inline nlohmann::json to_json(const TrainConfig& t) {
  std::string init = t.init.kind == InitPolicy::Kind::OnesZeros  ? "ones-zeros"
                     : t.init.kind == InitPolicy::Kind::CopyFrom ? "copy:" + t.init.copy_from
                                                                 : "mean";
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr},     {"seed", t.seed},
          {"eval_every", t.eval_every}, {"patience", t.patience}, {"init", init}};
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"profile", c.profile},
          {"model", to_json(c.model)},
          {"train", to_json(c.train)},
          {"finetune", to_json(c.finetune)},
          {"finetune_samples", c.finetune_samples},
          {"seeds", c.seeds},
          {"samples_per_cohort", c.samples_per_cohort},
          {"fractions", c.fractions},
          {"split_seed", c.split_seed},
          {"cohort_a", to_json(c.cohort_a)},
          {"cohort_b", to_json(c.cohort_b)},
          {"cohort_c", to_json(c.cohort_c)},
          {"msl_base", to_json(c.msl_base)},
          {"msl_k", c.msl_k},
          {"min_size", c.eval.detection.min_size},
          {"min_overlap_fraction", c.eval.detection.min_overlap_fraction}};
}

inline std::string config_hash(const ExperimentConfig& c) { return hash_text(to_json(c).dump()); }

/// Runs fn(0..n-1) on up to `jobs` threads. Each index must be independent.
inline void run_jobs(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next >= n || err) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

/// Datasets for all three experiments. The MSL pair comes from one base
/// cohort: disjoint halves (distinct seeds), one keeping exact labels and one
/// with small lesions removed.
struct ExperimentData {
  CohortData a, b, c, orig, msl;

  std::vector<CohortData> all() const { return {a, b, c, orig, msl}; }
  std::string manifest_hash() const { return hash_text(manifest_json(all()).dump()); }
};

inline std::pair<CohortSpec, CohortSpec> msl_pair(const CohortSpec& base, std::size_t k) {
  CohortSpec orig = base, msl = base;
  orig.name = "trial-orig";
  orig.label_style = LabelStyle::exact();
  msl.name = "trial-msl";
  msl.label_style = LabelStyle::missing_small(k);
  msl.seed = base.seed + 1;
  return {orig, msl};
}

inline ExperimentData make_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData d;
  const auto n = cfg.samples_per_cohort;
  d.a = make_cohort(cfg.cohort_a, n, cfg.fractions, cfg.split_seed);
  d.b = make_cohort(cfg.cohort_b, n, cfg.fractions, cfg.split_seed + 1);
  d.c = make_cohort(cfg.cohort_c, n, cfg.fractions, cfg.split_seed + 2);
  auto [orig, msl] = msl_pair(cfg.msl_base, cfg.msl_k);
  d.orig = make_cohort(orig, n, cfg.fractions, cfg.split_seed + 3);
  d.msl = make_cohort(msl, n, cfg.fractions, cfg.split_seed + 4);
  return d;
}

inline ExperimentData experiment_data_from(const std::vector<CohortData>& cohorts) {
  auto find = [&](const std::string& name) {
    for (const auto& c : cohorts)
      if (c.spec.name == name) return c;
    throw LoadError("dataset lacks cohort '" + name + "'");
  };
  return {find("trial-A"), find("trial-B"), find("trial-C"), find("trial-orig"), find("trial-msl")};
}

namespace detail {

inline std::vector<const LabeledVolume*> concat(std::vector<const LabeledVolume*> a,
                                                const std::vector<const LabeledVolume*>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::size_t count_small_components(const std::vector<Mask>& preds, std::size_t k) {
  std::size_t n = 0;
  for (const auto& p : preds)
    for (const auto& c : connected_components_18(p)) n += c.size() <= k;
  return n;
}

// Evaluates with the operating point picked on `val`, and also reports the
// number of small predicted components.
template <typename T>
void fill_cell(ResultCell& cell, Model<T>& model, const std::vector<const LabeledVolume*>& test,
               const std::vector<const LabeledVolume*>& val, const std::string& source, const EvalOptions& opt,
               std::size_t k) {
  const auto rep = evaluate(model, test, val, source, opt);
  cell.dice.push_back(rep.dice);
  cell.small_f1.push_back(rep.small_lesion.f1);
  cell.lesion_f1.push_back(rep.lesion.f1);
  cell.operating_point.push_back(rep.operating_point);
  const auto probs = predict_probs(model, test, model.source(source));
  std::vector<Mask> preds;
  for (std::size_t i = 0; i < test.size(); ++i) {
    preds.push_back(threshold_mask(probs[i], test[i]->label.extent, static_cast<float>(rep.operating_point)));
  }
  cell.small_pred_components.push_back(count_small_components(preds, k));
}

// Saves under cfg.checkpoint_dir and returns a path relative to its parent
// so result tables do not depend on where the run directory lives.
template <typename T>
std::string persist(const ExperimentConfig& cfg, const Checkpoint<T>& ck, const std::string& tag) {
  if (cfg.checkpoint_dir.empty()) return "memory:" + tag;
  const std::filesystem::path dir(cfg.checkpoint_dir);
  std::filesystem::create_directories(dir);
  save_checkpoint(ck, dir / (tag + ".ckpt"));
  return (dir.filename() / (tag + ".ckpt")).generic_string();
}

inline TrainConfig with_seed(TrainConfig t, std::uint64_t seed) {
  t.seed = seed;
  return t;
}

// Appends each seed's single-entry cell vectors onto the combined cells.
inline void merge_seeds(std::vector<ResultCell>& cells, const std::vector<std::vector<ResultCell>>& per_seed) {
  auto append = [](auto& dst, const auto& src) { dst.insert(dst.end(), src.begin(), src.end()); };
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (const auto& seed_cells : per_seed) {
      const auto& pc = seed_cells[i];
      append(cells[i].dice, pc.dice);
      append(cells[i].small_f1, pc.small_f1);
      append(cells[i].lesion_f1, pc.lesion_f1);
      append(cells[i].operating_point, pc.operating_point);
      append(cells[i].small_pred_components, pc.small_pred_components);
      append(cells[i].checkpoints, pc.checkpoints);
    }
}

}  // namespace detail

/// True when every backbone tensor of `b` matches `a` bit for bit.
template <typename T>
bool same_backbone(const Model<T>& a, const Model<T>& b) {
  const auto pa = partition_params(a).first, pb = partition_params(b).first;
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto da = pa[i].tensor.data(), db = pb[i].tensor.data();
    if (pa[i].id != pb[i].id || da.size() != db.size()) return false;
    if (std::memcmp(da.data(), db.data(), da.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

struct PoolingModels {
  std::vector<Checkpoint<Real>> naive;  // per seed
  std::vector<Checkpoint<Real>> scin;
};

/// Single-trial vs naive pooling vs SCIN pooling on cohorts A and B.
/// Rows: 1 single(A), 2 single(B), 3 naive, 4 SCIN|A, 5 SCIN|B; each tested on
/// both cohorts. Operating points come from the validation split of the data
/// the model was fit on (or, for SCIN, of the conditioned cohort).
inline ExperimentResult run_pooling_experiment(const ExperimentConfig& cfg, const CohortData& A, const CohortData& B,
                                               PoolingModels* keep = nullptr) {
  ExperimentResult res;
  res.name = "pooling";
  res.seeds = cfg.seeds;
  const std::string a = A.spec.name, b = B.spec.name;
  const std::vector<std::pair<int, std::string>> rows{{1, "Single-Trial"}, {2, "Single-Trial"}, {3, "Naive-Pooling"},
                                                      {4, "SCIN-Pooling"}, {5, "SCIN-Pooling"}};
  const std::vector<std::string> train_sets{a, b, a + "+" + b, a + "+" + b, a + "+" + b};
  const std::vector<std::string> cond{"-", "-", "-", a, b};
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (const auto& test : {a, b}) {
      ResultCell c;
      c.row = rows[r].first;
      c.regime = rows[r].second;
      c.train_set = train_sets[r];
      c.conditioned_on = cond[r];
      c.test_cohort = test;
      res.cells.push_back(c);
    }

  const auto trA = A.train(), vaA = A.val(), teA = A.test();
  const auto trB = B.train(), vaB = B.val(), teB = B.test();
  const auto trAB = detail::concat(trA, trB), vaAB = detail::concat(vaA, vaB);

  const std::size_t S = cfg.seeds.size();
  std::vector<std::vector<ResultCell>> per_seed(S, res.cells);
  std::vector<std::optional<Checkpoint<Real>>> naive(S), scin(S);
  run_jobs(S, cfg.jobs, [&](std::size_t si) {
    const auto seed = cfg.seeds[si];
    const auto tc = detail::with_seed(cfg.train, seed);
    const std::string tag = "-seed" + std::to_string(seed);
    auto& cells = per_seed[si];
    auto run_row = [&](int row, Model<Real>& model, const std::vector<const LabeledVolume*>& val,
                       const std::string& source, const std::string& where) {
      for (auto& c : cells) {
        if (c.row != row) continue;
        detail::fill_cell(c, model, c.test_cohort == a ? teA : teB, val, source, cfg.eval, cfg.msl_k);
        c.checkpoints.push_back(where);
      }
    };
    auto single_a = train<Real>(cfg.model, trA, vaA, SourcesMode::single_source(a), tc);
    run_row(1, single_a.model, vaA, kSharedSource, detail::persist(cfg, single_a, "pooling-single-" + a + tag));
    auto single_b = train<Real>(cfg.model, trB, vaB, SourcesMode::single_source(b), tc);
    run_row(2, single_b.model, vaB, kSharedSource, detail::persist(cfg, single_b, "pooling-single-" + b + tag));
    auto nv = train<Real>(cfg.model, trAB, vaAB, SourcesMode::naive_pool(), tc);
    run_row(3, nv.model, vaAB, kSharedSource, detail::persist(cfg, nv, "pooling-naive" + tag));
    auto sc = train<Real>(cfg.model, trAB, vaAB, SourcesMode::scin_pool(), tc);
    const auto where = detail::persist(cfg, sc, "pooling-scin" + tag);
    run_row(4, sc.model, vaA, a, where);
    run_row(5, sc.model, vaB, b, where);
    naive[si] = std::move(nv);
    scin[si] = std::move(sc);
  });
  detail::merge_seeds(res.cells, per_seed);
  if (keep) {
    for (std::size_t si = 0; si < S; ++si) {
      keep->naive.push_back(std::move(*naive[si]));
      keep->scin.push_back(std::move(*scin[si]));
    }
  }
  return res;
}

/// Norm-only adaptation to cohort C with `finetune_samples` labelled volumes.
/// Rows: 1 naive, 2 naive fine-tuned, 3 SCIN|A, 4 SCIN|B, 5 SCIN fine-tuned |C.
/// Fine-tuned rows select weights and operating point on the fine-tuning
/// samples themselves, so no further cohort-C labels are consumed.
inline ExperimentResult run_finetune_experiment(const ExperimentConfig& cfg, const CohortData& A, const CohortData& B,
                                                const CohortData& C, const PoolingModels& models) {
  ExperimentResult res;
  res.name = "finetune";
  res.seeds = cfg.seeds;
  const std::string a = A.spec.name, b = B.spec.name, c = C.spec.name;
  struct RowDef {
    int row;
    std::string regime, finetuned, cond;
  };
  const std::vector<RowDef> rows{{1, "Naive-Pooling", "", "-"},
                                 {2, "Naive-Pooling", c, "-"},
                                 {3, "SCIN-Pooling", "", a},
                                 {4, "SCIN-Pooling", "", b},
                                 {5, "SCIN-Pooling", c, c}};
  for (const auto& r : rows) {
    ResultCell cell;
    cell.row = r.row;
    cell.regime = r.regime;
    cell.train_set = a + "+" + b;
    cell.finetuned_on = r.finetuned;
    cell.conditioned_on = r.cond;
    cell.test_cohort = c;
    res.cells.push_back(cell);
  }
  if (models.naive.size() != cfg.seeds.size() || models.scin.size() != cfg.seeds.size()) {
    throw ParameterError("finetune experiment: need one pooled model pair per seed");
  }
  const auto trC = C.train();
  if (trC.size() < cfg.finetune_samples) throw ParameterError("finetune experiment: cohort C too small");
  const std::vector<const LabeledVolume*> few(trC.begin(), trC.begin() + long(cfg.finetune_samples));
  const auto teC = C.test();
  const auto vaAB = detail::concat(A.val(), B.val());

  const std::size_t S = cfg.seeds.size();
  std::vector<std::vector<ResultCell>> per_seed(S, res.cells);
  std::vector<char> backbone_same(S, 0);
  run_jobs(S, cfg.jobs, [&](std::size_t si) {
    const auto seed = cfg.seeds[si];
    const auto tc = detail::with_seed(cfg.finetune, seed);
    auto& cells = per_seed[si];
    auto naive = models.naive[si].model.clone();
    auto scin = models.scin[si].model.clone();
    Checkpoint<Real> naive_ck{models.naive[si].model.clone(), models.naive[si].meta, std::nullopt};
    auto naive_ft = finetune_norm_only(naive_ck, few, few, c, tc);
    auto scin_ft = finetune_norm_only(models.scin[si], few, few, c, tc);
    backbone_same[si] = same_backbone(naive, naive_ft.model) && same_backbone(scin, scin_ft.model);
    const std::string tag = "-seed" + std::to_string(seed);
    detail::fill_cell(cells[0], naive, teC, vaAB, kSharedSource, cfg.eval, cfg.msl_k);
    cells[0].checkpoints.push_back("pooling-naive" + tag);
    detail::fill_cell(cells[1], naive_ft.model, teC, few, c, cfg.eval, cfg.msl_k);
    cells[1].checkpoints.push_back(detail::persist(cfg, naive_ft, "finetune-naive" + tag));
    detail::fill_cell(cells[2], scin, teC, A.val(), a, cfg.eval, cfg.msl_k);
    cells[2].checkpoints.push_back("pooling-scin" + tag);
    detail::fill_cell(cells[3], scin, teC, B.val(), b, cfg.eval, cfg.msl_k);
    cells[3].checkpoints.push_back("pooling-scin" + tag);
    detail::fill_cell(cells[4], scin_ft.model, teC, few, c, cfg.eval, cfg.msl_k);
    cells[4].checkpoints.push_back(detail::persist(cfg, scin_ft, "finetune-scin" + tag));
  });
  detail::merge_seeds(res.cells, per_seed);
  res.checks["backbone_bit_identical"] =
      std::all_of(backbone_same.begin(), backbone_same.end(), [](char b) { return b != 0; });
  res.notes.push_back("naive-pool fine-tuning tunes only the shared instance-norm affine row (copied into a new source)");
  return res;
}

/// Missing-small-lesion study. Rows: 1 single(Orig), 2 single(MSL), 3 naive,
/// 4 SCIN|Orig, 5 SCIN|MSL. Every row is tested on the Orig test split
/// (exact labels).
inline ExperimentResult run_msl_experiment(const ExperimentConfig& cfg, const CohortData& Orig,
                                           const CohortData& Msl) {
  ExperimentResult res;
  res.name = "msl";
  res.seeds = cfg.seeds;
  const std::string o = Orig.spec.name, m = Msl.spec.name;
  struct RowDef {
    int row;
    std::string regime, train_set, cond;
  };
  const std::vector<RowDef> rows{{1, "Single-Trial", o, "-"},
                                 {2, "Single-Trial", m, "-"},
                                 {3, "Naive-Pooling", o + "+" + m, "-"},
                                 {4, "SCIN-Pooling", o + "+" + m, o},
                                 {5, "SCIN-Pooling", o + "+" + m, m}};
  for (const auto& r : rows) {
    ResultCell cell;
    cell.row = r.row;
    cell.regime = r.regime;
    cell.train_set = r.train_set;
    cell.conditioned_on = r.cond;
    cell.test_cohort = o;
    res.cells.push_back(cell);
  }
  if (Orig.samples.size() < 3 || Msl.samples.size() < 3) throw SplitError("msl experiment: cohort too small to split");
  const auto trO = Orig.train(), vaO = Orig.val(), teO = Orig.test();
  const auto trM = Msl.train(), vaM = Msl.val();
  const auto trOM = detail::concat(trO, trM), vaOM = detail::concat(vaO, vaM);

  const std::size_t S = cfg.seeds.size();
  std::vector<std::vector<ResultCell>> per_seed(S, res.cells);
  run_jobs(S, cfg.jobs, [&](std::size_t si) {
    const auto seed = cfg.seeds[si];
    const auto tc = detail::with_seed(cfg.train, seed);
    auto& cells = per_seed[si];
    const std::string tag = "-seed" + std::to_string(seed);
    auto so = train<Real>(cfg.model, trO, vaO, SourcesMode::single_source(o), tc);
    detail::fill_cell(cells[0], so.model, teO, vaO, kSharedSource, cfg.eval, cfg.msl_k);
    cells[0].checkpoints.push_back(detail::persist(cfg, so, "msl-single-orig" + tag));
    auto sm = train<Real>(cfg.model, trM, vaM, SourcesMode::single_source(m), tc);
    detail::fill_cell(cells[1], sm.model, teO, vaM, kSharedSource, cfg.eval, cfg.msl_k);
    cells[1].checkpoints.push_back(detail::persist(cfg, sm, "msl-single-msl" + tag));
    auto nv = train<Real>(cfg.model, trOM, vaOM, SourcesMode::naive_pool(), tc);
    detail::fill_cell(cells[2], nv.model, teO, vaOM, kSharedSource, cfg.eval, cfg.msl_k);
    cells[2].checkpoints.push_back(detail::persist(cfg, nv, "msl-naive" + tag));
    auto sc = train<Real>(cfg.model, trOM, vaOM, SourcesMode::scin_pool(), tc);
    const auto where = detail::persist(cfg, sc, "msl-scin" + tag);
    detail::fill_cell(cells[3], sc.model, teO, vaO, o, cfg.eval, cfg.msl_k);
    cells[3].checkpoints.push_back(where);
    detail::fill_cell(cells[4], sc.model, teO, vaM, m, cfg.eval, cfg.msl_k);
    cells[4].checkpoints.push_back(where);
  });
  detail::merge_seeds(res.cells, per_seed);
  return res;
}

}  // namespace scin
