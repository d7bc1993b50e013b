#pragma once

// Finite-difference gradient checks and numeric self-checks shared by the CLI
// and the test suites.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

#include "scin/cin.hpp"
#include "scin/mask.hpp"
#include "scin/metrics.hpp"
#include "scin/ops.hpp"
#include "scin/unet.hpp"

namespace scin {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_nonsmooth = 0;
  bool passed = false;
};

struct GradcheckOptions {
  double h = 1e-4;
  double tolerance = 1e-4;
  double abs_floor = 1e-6;         // denominator floor for tiny gradients
  std::size_t max_points = 256;    // per input; larger inputs are sampled
  std::uint64_t seed = 0;
  // Skip points where central differences at h and h/2 disagree (a LeakyReLU
  // kink inside the stencil). A wrong backward still fails: there both
  // estimates agree with each other but not with the analytic value.
  bool skip_nonsmooth = false;
  double max_skipped_fraction = 0.05;
};

/// Compares analytic gradients of f(inputs) (a scalar) against central
/// differences for every input that requires grad. Double precision only.
template <typename T>
GradcheckResult gradcheck(const std::string& name, const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& f,
                          std::vector<Tensor<T>> inputs, const GradcheckOptions& opt = {}) {
  if constexpr (!std::is_same_v<T, double>) {
    throw UsageError("gradcheck: refusing to run below double precision");
  } else {
    GradcheckResult r{name, 0.0, opt.tolerance, 0, false};
    for (auto& t : inputs) t.clear_grad();
    backward(f(inputs));
    std::mt19937_64 rng(opt.seed);
    for (auto& t : inputs) {
      if (!t.requires_grad()) continue;
      const std::vector<T> analytic(t.grad().begin(), t.grad().end());
      std::vector<std::size_t> idx(t.numel());
      std::iota(idx.begin(), idx.end(), 0);
      if (idx.size() > opt.max_points) {
        std::shuffle(idx.begin(), idx.end(), rng);
        idx.resize(opt.max_points);
      }
      for (std::size_t i : idx) {
        T& x = t.data()[i];
        const T orig = x;
        x = orig + opt.h;
        const double up = f(inputs).item();
        x = orig - opt.h;
        const double down = f(inputs).item();
        x = orig;
        const double numeric = (up - down) / (2 * opt.h);
        if (opt.skip_nonsmooth) {
          const double hh = opt.h / 2;
          x = orig + hh;
          const double up2 = f(inputs).item();
          x = orig - hh;
          const double down2 = f(inputs).item();
          x = orig;
          const double half = (up2 - down2) / (2 * hh);
          if (std::abs(half - numeric) > opt.tolerance * std::max({std::abs(half), std::abs(numeric), opt.abs_floor})) {
            ++r.skipped_nonsmooth;
            continue;
          }
        }
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), opt.abs_floor});
        r.max_rel_error = std::max(r.max_rel_error, std::abs(a - numeric) / denom);
        ++r.checked;
      }
    }
    r.passed = r.checked > 0 && r.max_rel_error < opt.tolerance &&
               double(r.skipped_nonsmooth) <= opt.max_skipped_fraction * double(r.checked + r.skipped_nonsmooth);
    return r;
  }
}

namespace detail {

template <typename T>
Tensor<T> randn(Shape s, std::mt19937_64& rng, double scale = 1.0, bool grad = true) {
  Tensor<T> t(std::move(s));
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.data()) v = T(n(rng));
  t.set_requires_grad(grad);
  return t;
}

// Keeps values at least `gap` away from zero so the kink of leaky_relu stays
// outside the finite-difference stencil.
template <typename T>
void push_off_zero(Tensor<T>& t, double gap) {
  for (auto& v : t.data())
    if (std::abs(v) < gap) v = v < 0 ? T(-gap) : T(gap);
}

// Scalar loss <R, y> with a fixed random projection R.
template <typename T>
Tensor<T> project(const Tensor<T>& y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(mul(y, randn<T>(y.shape(), rng, 1.0, false)));
}

}  // namespace detail

/// Hook for mutation tests: rewrites the backward of `out` so the gradient it
/// sends to input `which` has its sign flipped.
template <typename T>
void flip_input_grad_sign(Tensor<T>& out, std::size_t which) {
  auto node = out.impl()->node;
  if (!node || which >= node->inputs.size()) throw UsageError("flip_input_grad_sign: no such graph input");
  auto inner = node->apply;
  node->apply = [inner, which](std::span<const T> gout, std::vector<std::span<T>>& gin) {
    std::vector<T> before(gin[which].begin(), gin[which].end());
    inner(gout, gin);
    for (std::size_t i = 0; i < before.size(); ++i) gin[which][i] = before[i] - (gin[which][i] - before[i]);
  };
}

struct GradcheckSuiteOptions {
  bool double_precision = true;
  bool inject_cin_sign_error = false;  // mutation fixture
  std::uint64_t seed = 1234;
};

/// Every differentiable op on random 8^3 inputs, then an end-to-end tiny
/// U-Net with the looser end-to-end tolerance.
inline std::vector<GradcheckResult> run_gradcheck_suite(const GradcheckSuiteOptions& o = {}) {
  if (!o.double_precision) throw UsageError("gradcheck: refusing to run below double precision");
  using D = double;
  using Fn = std::function<Tensor<D>(std::vector<Tensor<D>>&)>;
  std::mt19937_64 rng(o.seed);
  GradcheckOptions op;
  op.seed = o.seed;
  std::vector<GradcheckResult> out;

  out.push_back(gradcheck<D>("conv3d", Fn([](auto& in) { return detail::project(conv3d(in[0], in[1], in[2], 1, 1), 1); }),
                             {detail::randn<D>({2, 2, 8, 8, 8}, rng), detail::randn<D>({3, 2, 3, 3, 3}, rng, 0.3),
                              detail::randn<D>({3}, rng)},
                             op));
  out.push_back(gradcheck<D>("conv3d_stride2",
                             Fn([](auto& in) { return detail::project(conv3d(in[0], in[1], in[2], 2, 1), 2); }),
                             {detail::randn<D>({1, 2, 8, 8, 8}, rng), detail::randn<D>({3, 2, 3, 3, 3}, rng, 0.3),
                              detail::randn<D>({3}, rng)},
                             op));
  out.push_back(gradcheck<D>("conv3d_1x1", Fn([](auto& in) { return detail::project(conv3d(in[0], in[1], in[2], 1, 0), 3); }),
                             {detail::randn<D>({1, 3, 8, 8, 8}, rng), detail::randn<D>({1, 3, 1, 1, 1}, rng),
                              detail::randn<D>({1}, rng)},
                             op));
  out.push_back(gradcheck<D>("transposed_conv3d",
                             Fn([](auto& in) { return detail::project(transposed_conv3d(in[0], in[1], in[2], 2), 4); }),
                             {detail::randn<D>({2, 3, 4, 4, 4}, rng), detail::randn<D>({3, 2, 2, 2, 2}, rng, 0.5),
                              detail::randn<D>({2}, rng)},
                             op));
  {
    auto x = detail::randn<D>({1, 2, 8, 8, 8}, rng);
    detail::push_off_zero(x, 10 * op.h);
    out.push_back(gradcheck<D>("leaky_relu", Fn([](auto& in) { return detail::project(leaky_relu(in[0], 0.01), 5); }),
                               {x}, op));
  }
  {
    const bool flip = o.inject_cin_sign_error;
    // Two samples routed to different sources; both affine rows are checked.
    out.push_back(gradcheck<D>(
        "cin", Fn([flip](auto& in) {
          auto y = cin_forward(in[0], {1, 0}, {in[1], in[3]}, {in[2], in[4]}, 1e-5);
          if (flip) flip_input_grad_sign(y, 0);
          return detail::project(y, 6);
        }),
        {detail::randn<D>({2, 3, 8, 8, 8}, rng, 2.0), detail::randn<D>({3}, rng), detail::randn<D>({3}, rng),
         detail::randn<D>({3}, rng), detail::randn<D>({3}, rng)},
        op));
  }
  {
    auto logits = detail::randn<D>({1, 1, 8, 8, 8}, rng, 3.0);
    Tensor<D> targets(Shape{1, 1, 8, 8, 8});
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : targets.data()) v = u(rng) < 0.5 ? 0.0 : 1.0;
    out.push_back(gradcheck<D>("bce_with_logits", Fn([targets](auto& in) { return bce_with_logits(in[0], targets); }),
                               {logits}, op));
  }
  out.push_back(gradcheck<D>("concat_channels",
                             Fn([](auto& in) { return detail::project(concat_channels(in[0], in[1]), 7); }),
                             {detail::randn<D>({2, 1, 4, 4, 4}, rng), detail::randn<D>({2, 2, 4, 4, 4}, rng)}, op));
  {
    // conv -> CIN -> LeakyReLU -> 1x1 conv -> BCE on a 2x2x4x4x4 batch.
    Tensor<D> t(Shape{2, 1, 4, 4, 4});
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = i % 3 == 0 ? 1.0 : 0.0;
    GradcheckOptions chain = op;
    chain.skip_nonsmooth = true;
    out.push_back(gradcheck<D>(
        "chain_conv_cin_lrelu_bce", Fn([t](auto& in) {
          auto h = conv3d(in[0], in[1], in[2], 1, 1);
          h = leaky_relu(cin_forward(h, {0, 1}, {in[3], in[5]}, {in[4], in[6]}, 1e-5), 0.01);
          return bce_with_logits(conv3d(h, in[7], in[8], 1, 0), t);
        }),
        {detail::randn<D>({2, 2, 4, 4, 4}, rng), detail::randn<D>({3, 2, 3, 3, 3}, rng, 0.3), detail::randn<D>({3}, rng),
         detail::randn<D>({3}, rng), detail::randn<D>({3}, rng), detail::randn<D>({3}, rng), detail::randn<D>({3}, rng),
         detail::randn<D>({1, 3, 1, 1, 1}, rng), detail::randn<D>({1}, rng)},
        chain));
  }
  {
    // End to end: depth 2, base 2, two sources, dropout off.
    ModelConfig cfg;
    cfg.in_channels = 2;
    cfg.base_channels = 2;
    cfg.depth = 2;
    cfg.dropout_p = 0.0;
    cfg.sources = {"a", "b"};
    auto model = std::make_shared<Model<D>>(build_model<D>(cfg, o.seed));
    model->set_training(true);
    auto x = detail::randn<D>({2, 2, 8, 8, 8}, rng, 1.0, false);
    Tensor<D> y(Shape{2, 1, 8, 8, 8});
    for (std::size_t i = 0; i < y.numel(); ++i) y.data()[i] = (i * 7919) % 5 == 0 ? 1.0 : 0.0;
    std::vector<Tensor<D>> params;
    for (auto& p : model->parameters()) params.push_back(p.tensor);
    GradcheckOptions e2e = op;
    e2e.tolerance = 1e-3;
    e2e.max_points = 24;
    e2e.h = 1e-6;
    e2e.skip_nonsmooth = true;
    out.push_back(gradcheck<D>("end_to_end_unet", Fn([model, x, y](auto&) {
                                 auto logits = model->forward(x, std::vector<std::string>{"a", "b"});
                                 return bce_with_logits(logits, y);
                               }),
                               params, e2e));
  }
  return out;
}

inline bool all_passed(const std::vector<GradcheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const auto& r) { return r.passed; });
}

struct CinFidelity {
  double max_abs_mean = 0.0;         // gamma=1, beta=0 output
  double max_std_dev_from_one = 0.0;
  double max_affine_diff = 0.0;      // |cin(a z + c) - cin(z)|, eps = 1e-5
  double max_affine_diff_eps0 = 0.0;  // same identity with eps = 0
  bool passed = false;
};

/// Normalisation statistics of plain CIN output and invariance to per-instance
/// affine intensity changes. The identity is exact only at eps = 0; the
/// eps = 1e-5 check uses baselines with variance large enough that the eps
/// term stays below the tolerance.
inline CinFidelity check_cin_fidelity(std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  CinFidelity f;
  const std::size_t B = 3, C = 4;
  const Shape s{B, C, 8, 8, 8};
  const std::size_t vox = 512;
  std::vector<Tensor<double>> ones, zeros;
  ones.push_back(Tensor<double>(Shape{C}, 1.0));
  zeros.push_back(Tensor<double>(Shape{C}, 0.0));
  const std::vector<std::size_t> src(B, 0);

  auto z0 = detail::randn<double>(s, rng, 10.0, false);
  std::uniform_real_distribution<double> shift(-50.0, 50.0);
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t i = 0; i < vox; ++i) z0.data()[bc * vox + i] += (bc + 1) * 3.0;
  const auto y0 = cin_forward(z0, src, ones, zeros, 1e-5);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < vox; ++i) m += y0.data()[bc * vox + i];
    m /= vox;
    for (std::size_t i = 0; i < vox; ++i) v += std::pow(y0.data()[bc * vox + i] - m, 2);
    f.max_abs_mean = std::max(f.max_abs_mean, std::abs(m));
    f.max_std_dev_from_one = std::max(f.max_std_dev_from_one, std::abs(std::sqrt(v / vox) - 1.0));
  }

  // Per-instance gain a in [0.5, 3] and offset c.
  std::uniform_real_distribution<double> gain(0.5, 3.0);
  Tensor<double> z1(s);
  for (std::size_t b = 0; b < B; ++b) {
    const double a = gain(rng), c = shift(rng);
    for (std::size_t i = 0; i < C * vox; ++i) z1.data()[b * C * vox + i] = a * z0.data()[b * C * vox + i] + c;
  }
  const auto y1 = cin_forward(z1, src, ones, zeros, 1e-5);
  const auto y0e = cin_forward(z0, src, ones, zeros, 0.0);
  const auto y1e = cin_forward(z1, src, ones, zeros, 0.0);
  for (std::size_t i = 0; i < y0.numel(); ++i) {
    f.max_affine_diff = std::max(f.max_affine_diff, std::abs(y1.data()[i] - y0.data()[i]));
    f.max_affine_diff_eps0 = std::max(f.max_affine_diff_eps0, std::abs(y1e.data()[i] - y0e.data()[i]));
  }
  f.passed = f.max_abs_mean < 1e-6 && f.max_std_dev_from_one < 1e-3 && f.max_affine_diff < 1e-6 &&
             f.max_affine_diff_eps0 < 1e-6;
  return f;
}

namespace detail {

// Union-find labelling over explicit neighbour pairs; an independent route to
// the same partition as the BFS labeller.
inline std::vector<std::size_t> component_sizes_union_find(const Mask& m) {
  const std::size_t n = m.bits.size();
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> root = [&](std::size_t i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.bits[i]) continue;
    const Voxel v = m.voxel(i);
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nz = std::abs(dz) + std::abs(dy) + std::abs(dx);
          if (nz == 0 || nz == 3) continue;
          if (!m.inside(v.z + dz, v.y + dy, v.x + dx)) continue;
          const std::size_t j = m.index(v.z + dz, v.y + dy, v.x + dx);
          if (m.bits[j]) parent[root(i)] = root(j);
        }
  }
  std::map<std::size_t, std::size_t> sizes;
  for (std::size_t i = 0; i < n; ++i)
    if (m.bits[i]) ++sizes[root(i)];
  std::vector<std::size_t> out;
  for (auto [r, s] : sizes) out.push_back(s);
  std::sort(out.begin(), out.end());
  return out;
}

inline Mask box(Extent3 e, Voxel lo, Voxel hi) {
  Mask m(e);
  for (int z = lo.z; z <= hi.z; ++z)
    for (int y = lo.y; y <= hi.y; ++y)
      for (int x = lo.x; x <= hi.x; ++x) m.at(z, y, x) = 1;
  return m;
}

inline Mask unite(Mask a, const Mask& b) {
  for (std::size_t i = 0; i < a.bits.size(); ++i) a.bits[i] |= b.bits[i];
  return a;
}

}  // namespace detail

struct MetricOracleReport {
  std::size_t masks_checked = 0;
  std::size_t label_mismatches = 0;
  std::size_t fixture_failures = 0;
  std::vector<std::string> failed;
  bool passed() const { return label_mismatches == 0 && fixture_failures == 0 && masks_checked > 0; }
};

/// Labelling against union-find on random 16^3 masks, plus the Dice and
/// lesion-F1 hand fixtures.
inline MetricOracleReport check_metric_oracles(std::size_t n_masks = 100, std::uint64_t seed = 3) {
  MetricOracleReport r;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Extent3 e{16, 16, 16};
  for (std::size_t k = 0; k < n_masks; ++k) {
    Mask m(e);
    const double density = 0.05 + 0.3 * double(k) / double(n_masks);
    for (auto& b : m.bits) b = u(rng) < density;
    std::vector<std::size_t> got;
    for (const auto& c : connected_components_18(m)) got.push_back(c.size());
    std::sort(got.begin(), got.end());
    r.label_mismatches += got != detail::component_sizes_union_find(m);
    ++r.masks_checked;
  }
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) {
      ++r.fixture_failures;
      r.failed.push_back(what);
    }
  };
  const Extent3 f{8, 8, 8};
  // |P| = |G| = 4, overlap 2.
  const Mask p4 = detail::box(f, {0, 0, 0}, {0, 0, 3});
  const Mask g4 = detail::box(f, {0, 0, 2}, {0, 0, 5});
  expect(std::abs(dice(p4, g4) - 0.5) < 1e-12, "dice 4/4/2 -> 0.5");
  expect(dice(p4, p4) == 1.0, "dice identical -> 1");
  expect(dice(p4, detail::box(f, {5, 5, 5}, {5, 5, 7})) == 0.0, "dice disjoint -> 0");
  expect(dice(Mask(f), Mask(f)) == 1.0, "dice empty/empty -> 1");

  // GT sizes {5, 20}; prediction hits only the 20-voxel lesion and adds a
  // 4-voxel blob elsewhere.
  const Mask g5 = detail::box(f, {0, 0, 0}, {0, 0, 4});
  const Mask g20 = detail::box(f, {4, 4, 3}, {4, 7, 7});
  const Mask gt = detail::unite(g5, g20);
  const Mask pred = detail::unite(g20, detail::box(f, {7, 0, 0}, {7, 0, 3}));
  const auto small = lesion_f1(pred, gt, {}, SizeRange{1, 10});
  expect(small.counts == DetectionCounts{0, 1, 1} && small.f1 == 0.0, "small-lesion fixture TP0 FP1 FN1");
  const Mask three = detail::unite(gt, detail::box(f, {2, 0, 6}, {2, 1, 7}));
  const auto same = lesion_f1(three, three);
  expect(same.counts.tp == 3 && same.f1 == 1.0, "pred == gt with 3 lesions");
  const auto none = lesion_f1(Mask(f), gt);
  expect(none.counts.fn == 2 && none.recall == 0.0 && none.f1 == 0.0, "empty prediction");
  return r;
}

}  // namespace scin
