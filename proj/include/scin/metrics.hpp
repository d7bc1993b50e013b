#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scin/error.hpp"
#include "scin/mask.hpp"

namespace scin {

constexpr std::size_t kUnbounded = std::numeric_limits<std::size_t>::max();

struct SizeRange {
  std::size_t lo = 1;
  std::size_t hi = kUnbounded;
  bool contains(std::size_t s) const { return s >= lo && s <= hi; }
  bool operator==(const SizeRange&) const = default;
};

struct DetectionCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
  DetectionCounts& operator+=(const DetectionCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }
  bool operator==(const DetectionCounts&) const = default;
};

struct DetectionMetrics {
  DetectionCounts counts;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  // False when the ground truth holds no lesion in range: recall (and so F1)
  // is undefined and reporting should omit it.
  bool f1_defined = false;

  static DetectionMetrics from_counts(const DetectionCounts& c) {
    DetectionMetrics m;
    m.counts = c;
    m.precision = (c.tp + c.fp) ? double(c.tp) / double(c.tp + c.fp) : 0.0;
    m.recall = (c.tp + c.fn) ? double(c.tp) / double(c.tp + c.fn) : 0.0;
    m.f1 = (m.precision + m.recall) > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    m.f1_defined = (c.tp + c.fn) > 0;
    return m;
  }
};

struct DetectionConfig {
  std::size_t min_size = 3;  // predicted components smaller than this are noise
  // 0 means any shared voxel; otherwise the fraction of the ground-truth
  // component that must be covered by one predicted component.
  double min_overlap_fraction = 0.0;
};

/// 2|P&G| / (|P|+|G|); two empty masks score 1.
inline double dice(const Mask& pred, const Mask& gt) {
  require_same_extent(pred, gt, "dice");
  std::size_t inter = 0, p = 0, g = 0;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    p += pred.bits[i] != 0;
    g += gt.bits[i] != 0;
    inter += (pred.bits[i] && gt.bits[i]);
  }
  if (p + g == 0) return 1.0;
  return 2.0 * double(inter) / double(p + g);
}

/// Lesion-level detection counts for one volume.
inline DetectionCounts lesion_counts(const Mask& pred, const Mask& gt, const DetectionConfig& cfg = {},
                                     std::optional<SizeRange> range = std::nullopt) {
  require_same_extent(pred, gt, "lesion_f1");
  if (range && range->lo > range->hi) throw ParameterError("lesion_f1: size range lo > hi");
  auto pred_all = connected_components_18(pred);
  auto gt_comps = connected_components_18(gt);
  std::vector<LesionComponent> pred_comps;
  for (auto& c : pred_all)
    if (c.size() >= cfg.min_size) pred_comps.push_back(std::move(c));
  for (std::size_t i = 0; i < pred_comps.size(); ++i) pred_comps[i].id = static_cast<int>(i);

  const auto pred_labels = label_map(pred, pred_comps);
  const auto gt_labels = label_map(gt, gt_comps);
  std::vector<bool> pred_hits_gt(pred_comps.size(), false);
  DetectionCounts out;
  for (const auto& g : gt_comps) {
    // overlap voxels per predicted component
    std::vector<std::pair<int, std::size_t>> overlaps;
    for (const auto& v : g.voxels) {
      const int p = pred_labels[pred.index(v.z, v.y, v.x)];
      if (p < 0) continue;
      auto it = std::find_if(overlaps.begin(), overlaps.end(), [p](auto& e) { return e.first == p; });
      if (it == overlaps.end()) {
        overlaps.emplace_back(p, 1);
      } else {
        ++it->second;
      }
    }
    bool detected = false;
    for (const auto& [p, n] : overlaps) {
      pred_hits_gt[static_cast<std::size_t>(p)] = true;
      if (cfg.min_overlap_fraction <= 0.0 || double(n) >= cfg.min_overlap_fraction * double(g.size())) {
        detected = true;
      }
    }
    if (range && !range->contains(g.size())) continue;
    (detected ? out.tp : out.fn) += 1;
  }
  for (std::size_t i = 0; i < pred_comps.size(); ++i) {
    if (pred_hits_gt[i]) continue;
    if (range && !range->contains(pred_comps[i].size())) continue;
    ++out.fp;
  }
  return out;
}

inline DetectionMetrics lesion_f1(const Mask& pred, const Mask& gt, const DetectionConfig& cfg = {},
                                  std::optional<SizeRange> range = std::nullopt) {
  return DetectionMetrics::from_counts(lesion_counts(pred, gt, cfg, range));
}

inline void validate_bins(const std::vector<SizeRange>& bins) {
  if (bins.empty()) throw ParameterError("stratify_by_size: no bins");
  auto sorted = bins;
  std::sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.lo < b.lo; });
  for (const auto& b : sorted)
    if (b.lo > b.hi) throw ParameterError("stratify_by_size: bin with lo > hi");
  if (sorted.front().lo != 1) throw ParameterError("stratify_by_size: bins must start at size 1");
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i].lo <= sorted[i - 1].hi) throw ParameterError("stratify_by_size: overlapping bins");
    if (sorted[i].lo != sorted[i - 1].hi + 1) throw ParameterError("stratify_by_size: bins leave a gap");
  }
  if (sorted.back().hi != kUnbounded) throw ParameterError("stratify_by_size: last bin must be unbounded");
}

inline std::vector<DetectionCounts> stratified_counts(const Mask& pred, const Mask& gt,
                                                      const std::vector<SizeRange>& bins,
                                                      const DetectionConfig& cfg = {}) {
  validate_bins(bins);
  std::vector<DetectionCounts> out;
  for (const auto& b : bins) out.push_back(lesion_counts(pred, gt, cfg, b));
  return out;
}

inline std::vector<DetectionMetrics> stratify_by_size(const Mask& pred, const Mask& gt,
                                                      const std::vector<SizeRange>& bins,
                                                      const DetectionConfig& cfg = {}) {
  std::vector<DetectionMetrics> out;
  for (const auto& c : stratified_counts(pred, gt, bins, cfg)) out.push_back(DetectionMetrics::from_counts(c));
  return out;
}

inline Mask threshold_mask(const std::vector<float>& prob, Extent3 extent, float thr) {
  if (prob.size() != extent.voxels()) throw ShapeError("threshold: probability volume does not match extent");
  Mask m(extent);
  for (std::size_t i = 0; i < prob.size(); ++i) m.bits[i] = prob[i] > thr ? 1 : 0;
  return m;
}

inline std::vector<double> default_threshold_grid() {
  std::vector<double> g;
  for (int k = 1; k <= 19; ++k) g.push_back(k / 20.0);
  return g;
}

/// Grid threshold with the best mean voxel Dice; ties go to the larger
/// threshold. A voxel is foreground when prob > threshold.
inline double select_operating_point(const std::vector<std::vector<float>>& probs, const std::vector<Mask>& gts,
                                     const std::vector<double>& thresholds = default_threshold_grid()) {
  if (probs.empty() || probs.size() != gts.size()) {
    throw ParameterError("select_operating_point: need equal-length, non-empty probability and label lists");
  }
  if (thresholds.empty()) throw ParameterError("select_operating_point: empty threshold grid");
  double best_thr = thresholds.front(), best = -1.0;
  for (double thr : thresholds) {
    double total = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      total += dice(threshold_mask(probs[i], gts[i].extent, static_cast<float>(thr)), gts[i]);
    }
    const double mean = total / double(probs.size());
    if (mean >= best) {
      best = mean;
      best_thr = thr;
    }
  }
  return best_thr;
}

/// Aggregate over a test set. Dice is the per-volume mean; detection counts
/// are summed over volumes before precision/recall/F1 are formed.
struct MetricsReport {
  double dice = 0.0;
  DetectionMetrics lesion;
  std::vector<SizeRange> bins;
  std::vector<DetectionCounts> bin_counts;
  std::size_t small_lesion_max = 10;
  DetectionMetrics small_lesion;  // ground-truth components with size <= small_lesion_max
  double operating_point = 0.5;
  std::size_t n_samples = 0;
  std::size_t min_size = 3;
};

inline std::vector<SizeRange> default_size_bins(std::size_t small_max = 10) {
  return {{1, small_max}, {small_max + 1, kUnbounded}};
}

inline MetricsReport summarize(const std::vector<Mask>& preds, const std::vector<Mask>& gts, double operating_point,
                               const DetectionConfig& cfg = {}, std::size_t small_max = 10) {
  if (preds.size() != gts.size() || preds.empty()) {
    throw ParameterError("summarize: need equal-length, non-empty prediction and label lists");
  }
  MetricsReport r;
  r.bins = default_size_bins(small_max);
  r.bin_counts.assign(r.bins.size(), {});
  r.small_lesion_max = small_max;
  r.operating_point = operating_point;
  r.n_samples = preds.size();
  r.min_size = cfg.min_size;
  DetectionCounts total;
  double dsum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    dsum += dice(preds[i], gts[i]);
    total += lesion_counts(preds[i], gts[i], cfg);
    const auto per_bin = stratified_counts(preds[i], gts[i], r.bins, cfg);
    for (std::size_t b = 0; b < per_bin.size(); ++b) r.bin_counts[b] += per_bin[b];
  }
  r.dice = dsum / double(preds.size());
  r.lesion = DetectionMetrics::from_counts(total);
  r.small_lesion = DetectionMetrics::from_counts(r.bin_counts.front());
  return r;
}

}  // namespace scin
