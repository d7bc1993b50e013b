#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "scin/cohort.hpp"
#include "scin/error.hpp"
#include "scin/metrics.hpp"
#include "scin/ops.hpp"
#include "scin/optim.hpp"
#include "scin/unet.hpp"

namespace scin {

using Real = float;  // training precision

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;
  std::size_t patience = 1000;  // epochs without validation improvement before stopping
  InitPolicy init = InitPolicy::mean_of_existing();

  void validate() const {
    if (epochs > 100000) throw ConfigError("train.epochs is unreasonably large");
    if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
    if (!(lr > 0)) throw ConfigError("train.lr must be > 0");
    if (eval_every == 0) throw ConfigError("train.eval_every must be >= 1");
    if (patience == 0) throw ConfigError("train.patience must be >= 1");
  }
};

/// How cohort identity reaches the network during training.
struct SourcesMode {
  enum class Kind { SingleSource, NaivePool, ScinPool };
  Kind kind = Kind::NaivePool;
  std::string single;  // cohort name for SingleSource

  static SourcesMode single_source(std::string name) { return {Kind::SingleSource, std::move(name)}; }
  static SourcesMode naive_pool() { return {Kind::NaivePool, {}}; }
  static SourcesMode scin_pool() { return {Kind::ScinPool, {}}; }
  std::string str() const {
    switch (kind) {
      case Kind::SingleSource:
        return "single:" + single;
      case Kind::NaivePool:
        return "naive-pool";
      case Kind::ScinPool:
        return "scin-pool";
    }
    return "";
  }
};

/// Name of the single affine row used by plain instance-norm models.
inline const std::string kSharedSource = "shared";

struct TrainingMeta {
  std::string mode;
  std::uint64_t seed = 0;
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val_dice = 0.0;
  double best_operating_point = 0.5;
  std::vector<double> loss_history;     // mean training loss per epoch
  std::vector<double> val_dice_history;  // per evaluation
  // source each training cohort is fed through; identity for SCIN models
  std::map<std::string, std::string> cohort_to_source;
};

template <typename T>
struct Checkpoint {
  Model<T> model;
  TrainingMeta meta;
  std::optional<OptimState> optim;
};

/// Stacks samples into a [B,Cin,D,H,W] batch and a [B,1,D,H,W] target.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> make_batch(const std::vector<const LabeledVolume*>& samples) {
  const auto& s0 = samples.front()->image.shape();
  const std::size_t C = s0[0], vox = s0[1] * s0[2] * s0[3];
  Tensor<T> x(Shape{samples.size(), C, s0[1], s0[2], s0[3]});
  Tensor<T> y(Shape{samples.size(), 1, s0[1], s0[2], s0[3]});
  for (std::size_t b = 0; b < samples.size(); ++b) {
    if (samples[b]->image.shape() != s0) throw ShapeError("make_batch: samples have different shapes");
    std::copy(samples[b]->image.data().begin(), samples[b]->image.data().end(), x.data().begin() + long(b * C * vox));
    for (std::size_t i = 0; i < vox; ++i) y.data()[b * vox + i] = T(samples[b]->label.bits[i]);
  }
  return {x, y};
}

/// Eval-mode sigmoid probabilities, one volume at a time.
template <typename T>
std::vector<std::vector<float>> predict_probs(Model<T>& model, const std::vector<const LabeledVolume*>& samples,
                                              const SourceId& source) {
  const bool was = model.training();
  model.set_training(false);
  std::vector<std::vector<float>> out;
  for (const auto* s : samples) {
    auto [x, y] = make_batch<T>({s});
    Tensor<T> logits = model.forward(x, std::vector<SourceId>{source});
    auto p = sigmoid_values<T>(logits.data());
    out.emplace_back(p.begin(), p.end());
  }
  model.set_training(was);
  return out;
}

/// Records which sample ids were used to pick an operating point.
struct AccessLog {
  std::vector<std::string> threshold_ids;
};

struct EvalOptions {
  DetectionConfig detection;
  std::size_t small_max = 10;
  std::vector<double> thresholds = default_threshold_grid();
  bool use_truth = false;  // score against unbiased geometry instead of labels
};

/// Picks the operating point on `val` (never `test`), applies it to the test
/// probabilities and scores against the test labels.
template <typename T>
MetricsReport evaluate(Model<T>& model, const std::vector<const LabeledVolume*>& test,
                       const std::vector<const LabeledVolume*>& val, const std::string& conditioned_on,
                       const EvalOptions& opt = {}, AccessLog* log = nullptr) {
  if (test.empty() || val.empty()) throw ParameterError("evaluate: empty test or validation set");
  const SourceId src = model.source(conditioned_on);
  std::vector<Mask> val_gt;
  for (const auto* s : val) {
    val_gt.push_back(opt.use_truth ? s->truth : s->label);
    if (log) log->threshold_ids.push_back(s->sample_id);
  }
  const double thr = select_operating_point(predict_probs(model, val, src), val_gt, opt.thresholds);
  const auto probs = predict_probs(model, test, src);
  std::vector<Mask> preds, gts;
  for (std::size_t i = 0; i < test.size(); ++i) {
    preds.push_back(threshold_mask(probs[i], test[i]->label.extent, static_cast<float>(thr)));
    gts.push_back(opt.use_truth ? test[i]->truth : test[i]->label);
  }
  return summarize(preds, gts, thr, opt.detection, opt.small_max);
}

/// Mean validation Dice at the best operating point, each sample conditioned
/// on the source its cohort trains through.
template <typename T>
std::pair<double, double> validation_dice(Model<T>& model, const std::vector<const LabeledVolume*>& val,
                                          const std::map<std::string, std::string>& cohort_to_source,
                                          const std::vector<double>& thresholds = default_threshold_grid()) {
  std::vector<std::vector<float>> probs;
  std::vector<Mask> gts;
  for (const auto* s : val) {
    auto p = predict_probs(model, {s}, model.source(cohort_to_source.at(s->source)));
    probs.push_back(std::move(p.front()));
    gts.push_back(s->label);
  }
  const double thr = select_operating_point(probs, gts, thresholds);
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    total += dice(threshold_mask(probs[i], gts[i].extent, static_cast<float>(thr)), gts[i]);
  }
  return {total / double(probs.size()), thr};
}

namespace detail {

// Shared optimisation loop. `trainable(batch_sources)` returns the parameters
// stepped for a batch.
template <typename T, typename Select>
void fit(Checkpoint<T>& ck, const std::vector<const LabeledVolume*>& train,
         const std::vector<const LabeledVolume*>& val, const TrainConfig& cfg, Select&& trainable) {
  Model<T>& model = ck.model;
  OptimState state;
  state.lr = cfg.lr;
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5851f42d4c957f2dULL));
  model.seed_dropout(splitmix64(cfg.seed + 17));

  std::optional<Model<T>> best;
  std::size_t since_best = 0;
  if (!val.empty()) {
    auto [d, thr] = validation_dice(model, val, ck.meta.cohort_to_source);
    ck.meta.best_val_dice = d;
    ck.meta.best_operating_point = thr;
    ck.meta.best_epoch = 0;
    best = model.clone();
  }

  std::vector<std::size_t> order(train.size());
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    model.set_training(true);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<const LabeledVolume*> batch;
      std::vector<SourceId> sources;
      std::set<std::string> present;
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        const auto* s = train[order[k]];
        batch.push_back(s);
        const auto& src = ck.meta.cohort_to_source.at(s->source);
        sources.push_back(model.source(src));
        present.insert(src);
      }
      auto [x, y] = make_batch<T>(batch);
      auto all = model.parameters();
      zero_grad(all);
      Tensor<T> loss = bce_with_logits(model.forward(x, sources), y);
      backward(loss);
      adam_step(trainable(std::vector<std::string>(present.begin(), present.end())), state);
      loss_sum += loss.item();
      ++batches;
    }
    model.set_training(false);
    ck.meta.loss_history.push_back(batches ? loss_sum / double(batches) : 0.0);
    ck.meta.epochs_run = epoch;
    if (!val.empty() && epoch % cfg.eval_every == 0) {
      auto [d, thr] = validation_dice(model, val, ck.meta.cohort_to_source);
      ck.meta.val_dice_history.push_back(d);
      if (d > ck.meta.best_val_dice) {
        ck.meta.best_val_dice = d;
        ck.meta.best_operating_point = thr;
        ck.meta.best_epoch = epoch;
        best = model.clone();
        since_best = 0;
      } else if ((since_best += cfg.eval_every) >= cfg.patience) {
        break;
      }
    }
  }
  if (best) ck.model = std::move(*best);
  ck.optim = std::move(state);
}

}  // namespace detail

/// Trains a fresh model. SingleSource and NaivePool feed every sample through
/// one shared affine row (plain instance norm); ScinPool gives each cohort
/// its own row. The best-validation-Dice weights are returned.
template <typename T>
Checkpoint<T> train(ModelConfig mcfg, const std::vector<const LabeledVolume*>& train_set,
                    const std::vector<const LabeledVolume*>& val_set, const SourcesMode& mode,
                    const TrainConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ParameterError("train: empty training set");
  std::vector<std::string> cohorts;
  for (const auto* s : train_set)
    if (std::find(cohorts.begin(), cohorts.end(), s->source) == cohorts.end()) cohorts.push_back(s->source);
  for (const auto* s : val_set)
    if (std::find(cohorts.begin(), cohorts.end(), s->source) == cohorts.end()) {
      throw ParameterError("train: validation sample '" + s->sample_id + "' is from a cohort absent in training");
    }

  TrainingMeta meta;
  meta.mode = mode.str();
  meta.seed = cfg.seed;
  if (mode.kind == SourcesMode::Kind::ScinPool) {
    std::sort(cohorts.begin(), cohorts.end());
    mcfg.sources = cohorts;
    for (const auto& c : cohorts) meta.cohort_to_source[c] = c;
  } else {
    if (mode.kind == SourcesMode::Kind::SingleSource) {
      for (const auto& c : cohorts)
        if (c != mode.single) {
          throw ParameterError("train: single-source run on '" + mode.single + "' received cohort '" + c + "'");
        }
    }
    mcfg.sources = {kSharedSource};
    for (const auto& c : cohorts) meta.cohort_to_source[c] = kSharedSource;
  }
  Checkpoint<T> ck{build_model<T>(mcfg, detail::splitmix64(cfg.seed)), std::move(meta), std::nullopt};
  detail::fit(ck, train_set, val_set, cfg, [&](const std::vector<std::string>& present) {
    auto backbone = partition_params(ck.model).first;
    auto rows = ck.model.norm_rows_for(present);
    backbone.insert(backbone.end(), rows.begin(), rows.end());
    return backbone;
  });
  return ck;
}

/// Registers `new_source` on a copy of the checkpoint and optimises only its
/// affine rows; every backbone tensor is left bit-identical.
template <typename T>
Checkpoint<T> finetune_norm_only(const Checkpoint<T>& base, const std::vector<const LabeledVolume*>& samples,
                                 const std::vector<const LabeledVolume*>& val_set, const std::string& new_source,
                                 const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw ParameterError("finetune_norm_only: no samples");
  const std::string cohort = samples.front()->source;
  for (const auto* s : samples)
    if (s->source != cohort) throw ParameterError("finetune_norm_only: samples must share one source");
  for (const auto* s : val_set)
    if (s->source != cohort) throw ParameterError("finetune_norm_only: validation samples must share the source");

  Checkpoint<T> ck{base.model.clone(), base.meta, std::nullopt};
  ck.meta.mode = base.meta.mode + "+finetune:" + new_source;
  ck.meta.seed = cfg.seed;
  ck.meta.loss_history.clear();
  ck.meta.val_dice_history.clear();
  ck.meta.epochs_run = ck.meta.best_epoch = 0;
  ck.meta.cohort_to_source = {{cohort, new_source}};
  ck.model.register_source(new_source, cfg.init);
  detail::fit(ck, samples, val_set, cfg, [&](const std::vector<std::string>&) {
    return ck.model.norm_rows_for({new_source});
  });
  return ck;
}

inline std::vector<const LabeledVolume*> pointers(const std::vector<LabeledVolume>& v) {
  std::vector<const LabeledVolume*> out;
  for (const auto& s : v) out.push_back(&s);
  return out;
}

}  // namespace scin
