#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <random>
#include <string>
#include <vector>

#include "scin/error.hpp"
#include "scin/mask.hpp"
#include "scin/tensor.hpp"

namespace scin {

struct LabelStyle {
  enum class Kind { Exact, DilateBy, ErodeBy, MissingSmallLesions };
  Kind kind = Kind::Exact;
  std::size_t amount = 0;  // radius for Dilate/Erode, k voxels for MissingSmallLesions

  static LabelStyle exact() { return {Kind::Exact, 0}; }
  static LabelStyle dilate(std::size_t r) { return {Kind::DilateBy, r}; }
  static LabelStyle erode(std::size_t r) { return {Kind::ErodeBy, r}; }
  static LabelStyle missing_small(std::size_t k) { return {Kind::MissingSmallLesions, k}; }
  bool operator==(const LabelStyle&) const = default;
};

/// Generative description of one synthetic trial.
struct CohortSpec {
  std::string name;
  Extent3 extent{32, 32, 32};
  std::size_t channels = 2;
  double lesion_count = 5.0;     // Poisson mean
  double radius_median = 2.0;    // log-normal median, voxels
  double radius_sigma = 0.35;    // log-normal shape
  std::vector<double> background{0.0, 0.0};
  std::vector<double> lesion_intensity_shift{1.0, 0.6};
  double background_noise_sigma = 0.35;
  bool blur = true;
  std::vector<double> gain{1.0, 1.0};
  std::vector<double> offset{0.0, 0.0};
  LabelStyle label_style;
  std::uint64_t seed = 1;

  void validate() const {
    auto bad = [&](const std::string& field, const std::string& why) {
      throw ConfigError("cohort '" + name + "': " + field + " " + why);
    };
    if (name.empty()) bad("name", "must be non-empty");
    if (extent.voxels() == 0) bad("extent", "must be positive");
    if (channels == 0) bad("channels", "must be >= 1");
    if (!(lesion_count > 0)) bad("lesion_count", "must be > 0");
    if (!(radius_median > 0)) bad("radius_median", "must be > 0");
    if (!(radius_sigma > 0)) bad("radius_sigma", "must be > 0");
    if (!(background_noise_sigma >= 0)) bad("background_noise_sigma", "must be >= 0");
    for (const auto* v : {&background, &lesion_intensity_shift, &gain, &offset}) {
      if (v->size() != channels) bad("per-channel vectors", "must have one entry per channel");
    }
    for (double g : gain)
      if (!(g > 0)) bad("gain", "must be > 0");
    if (label_style.kind == LabelStyle::Kind::MissingSmallLesions && label_style.amount < 1) {
      bad("label_style.k", "must be >= 1");
    }
  }
};

struct LabeledVolume {
  Tensor<float> image;  // [Cin,D,H,W]
  Mask truth;           // unbiased lesion geometry
  Mask label;           // what training sees, after the cohort's label style
  std::string source;
  std::string sample_id;
};

struct DatasetSplit {
  std::vector<std::string> train, val, test;
  std::vector<double> fractions{0.6, 0.2, 0.2};
  std::uint64_t seed = 0;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace detail

/// Independent per-sample stream: depends only on (seed, index), so serial
/// and parallel generation agree and the cohort name never affects geometry.
inline std::mt19937_64 sample_stream(std::uint64_t seed, std::uint64_t index) {
  return std::mt19937_64(detail::splitmix64(detail::splitmix64(seed) ^ (index * 0xd1b54a32d192ed03ULL)));
}

/// Union of N ~ Poisson(lesion_count) axis-aligned ellipsoids with log-normal
/// radii and distinct centre voxels.
inline Mask sample_lesion_mask(const CohortSpec& spec, std::mt19937_64& rng) {
  Mask m(spec.extent);
  std::poisson_distribution<int> count(spec.lesion_count);
  std::lognormal_distribution<double> radius(std::log(spec.radius_median), spec.radius_sigma);
  std::uniform_real_distribution<double> aspect(0.8, 1.25);
  const int n = count(rng);
  std::vector<Voxel> centres;
  const double dims[3] = {double(spec.extent.d), double(spec.extent.h), double(spec.extent.w)};
  for (int i = 0; i < n; ++i) {
    const double r = radius(rng);
    const double radii[3] = {r * aspect(rng), r * aspect(rng), r * aspect(rng)};
    double c[3];
    Voxel cv;
    for (int attempt = 0;; ++attempt) {
      for (int a = 0; a < 3; ++a) {
        const double margin = std::min(radii[a], dims[a] / 2 - 0.5);
        std::uniform_real_distribution<double> pos(margin, dims[a] - 1 - margin);
        c[a] = pos(rng);
      }
      cv = {static_cast<int>(std::lround(c[0])), static_cast<int>(std::lround(c[1])),
            static_cast<int>(std::lround(c[2]))};
      if (std::find(centres.begin(), centres.end(), cv) == centres.end() || attempt >= 32) break;
    }
    centres.push_back(cv);
    bool any = false;
    for (int z = int(std::floor(c[0] - radii[0])); z <= int(std::ceil(c[0] + radii[0])); ++z)
      for (int y = int(std::floor(c[1] - radii[1])); y <= int(std::ceil(c[1] + radii[1])); ++y)
        for (int x = int(std::floor(c[2] - radii[2])); x <= int(std::ceil(c[2] + radii[2])); ++x) {
          if (!m.inside(z, y, x)) continue;
          const double dz = (z - c[0]) / radii[0], dy = (y - c[1]) / radii[1], dx = (x - c[2]) / radii[2];
          if (dz * dz + dy * dy + dx * dx <= 1.0) {
            m.at(z, y, x) = 1;
            any = true;
          }
        }
    if (!any && m.inside(cv.z, cv.y, cv.x)) m.at(cv.z, cv.y, cv.x) = 1;
  }
  return m;
}

namespace detail {

// Separable [1,2,1]/4 smoothing with clamped borders.
inline void blur121(std::vector<double>& v, Extent3 e) {
  std::vector<double> tmp(v.size());
  const std::size_t strides[3] = {e.h * e.w, e.w, 1};
  const std::size_t lens[3] = {e.d, e.h, e.w};
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t st = strides[axis], len = lens[axis];
    for (std::size_t i = 0; i < v.size(); ++i) {
      const std::size_t pos = (i / st) % len;
      const double left = pos > 0 ? v[i - st] : v[i];
      const double right = pos + 1 < len ? v[i + st] : v[i];
      tmp[i] = 0.25 * left + 0.5 * v[i] + 0.25 * right;
    }
    v.swap(tmp);
  }
}

}  // namespace detail

inline Tensor<float> render_image(const Mask& truth, const CohortSpec& spec, std::mt19937_64& rng) {
  if (!(truth.extent == spec.extent)) throw ShapeError("render_image: mask extent differs from cohort extent");
  const std::size_t vox = spec.extent.voxels();
  Tensor<float> img(Shape{spec.channels, spec.extent.d, spec.extent.h, spec.extent.w});
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<double> ch(vox);
  for (std::size_t c = 0; c < spec.channels; ++c) {
    for (std::size_t i = 0; i < vox; ++i) {
      ch[i] = spec.background[c] + (truth.bits[i] ? spec.lesion_intensity_shift[c] : 0.0);
    }
    if (spec.blur) detail::blur121(ch, spec.extent);
    for (std::size_t i = 0; i < vox; ++i) {
      const double n = noise(rng);  // always drawn so streams stay aligned
      const double v = ch[i] + spec.background_noise_sigma * n;
      img.data()[c * vox + i] = static_cast<float>(spec.gain[c] * v + spec.offset[c]);
    }
  }
  return img;
}

inline Mask apply_label_style(const Mask& truth, const LabelStyle& style) {
  switch (style.kind) {
    case LabelStyle::Kind::Exact:
      return truth;
    case LabelStyle::Kind::DilateBy:
      return dilate6(truth, style.amount);
    case LabelStyle::Kind::ErodeBy:
      return erode6(truth, style.amount);
    case LabelStyle::Kind::MissingSmallLesions:
      return remove_small_components(truth, style.amount);
  }
  return truth;
}

inline LabeledVolume generate_sample(const CohortSpec& spec, std::size_t index) {
  auto rng = sample_stream(spec.seed, index);
  LabeledVolume s;
  s.truth = sample_lesion_mask(spec, rng);
  s.image = render_image(s.truth, spec, rng);
  s.label = apply_label_style(s.truth, spec.label_style);
  s.source = spec.name;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04zu", index);
  s.sample_id = spec.name + "-" + buf;
  return s;
}

/// Pure function of (spec, n).
inline std::vector<LabeledVolume> generate_cohort(const CohortSpec& spec, std::size_t n) {
  spec.validate();
  if (n < 1) throw ConfigError("generate_cohort: n must be >= 1");
  std::vector<LabeledVolume> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_sample(spec, i));
  return out;
}

/// Shuffles ids with `seed`, then cuts by largest-remainder rounding of
/// n*fraction (ties go to the earlier part).
inline DatasetSplit split_dataset(const std::vector<std::string>& ids, std::vector<double> fractions = {0.6, 0.2, 0.2},
                                  std::uint64_t seed = 0) {
  if (fractions.size() != 3) throw SplitError("split_dataset: need train/val/test fractions");
  double total = 0;
  for (double f : fractions) {
    if (!(f > 0)) throw SplitError("split_dataset: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw SplitError("split_dataset: fractions must sum to 1");
  const std::size_t n = ids.size();
  if (n < 3) throw SplitError("split_dataset: need at least 3 samples, got " + std::to_string(n));

  std::size_t sizes[3];
  std::pair<double, std::size_t> rema[3];
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    const double q = double(n) * fractions[i];
    sizes[i] = static_cast<std::size_t>(std::floor(q));
    rema[i] = {q - double(sizes[i]), i};
    assigned += sizes[i];
  }
  std::stable_sort(std::begin(rema), std::end(rema), [](auto& a, auto& b) { return a.first > b.first + 1e-12; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++sizes[rema[k % 3].second];

  std::vector<std::string> order = ids;
  std::mt19937_64 rng(detail::splitmix64(seed));
  std::shuffle(order.begin(), order.end(), rng);
  DatasetSplit s;
  s.fractions = fractions;
  s.seed = seed;
  s.train.assign(order.begin(), order.begin() + long(sizes[0]));
  s.val.assign(order.begin() + long(sizes[0]), order.begin() + long(sizes[0] + sizes[1]));
  s.test.assign(order.begin() + long(sizes[0] + sizes[1]), order.end());
  return s;
}

}  // namespace scin
