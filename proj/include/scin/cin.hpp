#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "scin/error.hpp"
#include "scin/tensor.hpp"

namespace scin {

struct SourceId {
  std::string name;
  std::size_t index = 0;
  bool operator==(const SourceId&) const = default;
};

/// Append-only list of cohort sources. Indices are assignment order and never
/// change, so they are safe to persist.
class SourceRegistry {
 public:
  SourceRegistry() = default;
  explicit SourceRegistry(const std::vector<std::string>& names) {
    for (const auto& n : names) add(n);
  }

  SourceId add(const std::string& name) {
    if (name.empty()) throw RegistrationError("source name must be non-empty");
    if (index_.count(name)) throw RegistrationError("source '" + name + "' is already registered");
    index_[name] = names_.size();
    names_.push_back(name);
    return {name, names_.size() - 1};
  }

  SourceId at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LookupError("unregistered source '" + name + "'");
    return {name, it->second};
  }

  // Validates a caller-held id against this registry.
  std::size_t resolve(const SourceId& id) const {
    auto it = index_.find(id.name);
    if (it == index_.end() || it->second != id.index) {
      throw LookupError("unregistered source '" + id.name + "' (index " + std::to_string(id.index) + ")");
    }
    return it->second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
  std::map<std::string, std::size_t> index_;
};

/// How the affine rows of a newly registered source are initialised.
struct InitPolicy {
  enum class Kind { OnesZeros, CopyFrom, MeanOfExisting };
  Kind kind = Kind::MeanOfExisting;
  std::string copy_from;

  static InitPolicy ones_zeros() { return {Kind::OnesZeros, {}}; }
  static InitPolicy copy(std::string from) { return {Kind::CopyFrom, std::move(from)}; }
  static InitPolicy mean_of_existing() { return {Kind::MeanOfExisting, {}}; }
};

template <typename T>
struct InstanceStats {
  Tensor<T> mu;     // [B,C]
  Tensor<T> sigma;  // [B,C], sqrt(population variance + eps)
};

/// Per-instance, per-channel spatial mean and standard deviation. Nothing is
/// ever pooled across the batch axis.
template <typename T>
InstanceStats<T> instance_stats(const Tensor<T>& z, double eps = 1e-5) {
  if (z.rank() != 5) throw ShapeError("instance_stats: expected [B,C,D,H,W], got " + shape_str(z.shape()));
  const std::size_t B = z.dim(0), C = z.dim(1), vox = z.dim(2) * z.dim(3) * z.dim(4);
  if (vox < 2) throw DomainError("instance_stats: spatial volume must hold at least 2 voxels");
  Tensor<T> mu(Shape{B, C}), sigma(Shape{B, C});
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const T* p = z.data().data() + bc * vox;
    double m = 0.0;
    for (std::size_t i = 0; i < vox; ++i) m += p[i];
    m /= static_cast<double>(vox);
    double var = 0.0;
    for (std::size_t i = 0; i < vox; ++i) {
      const double d = p[i] - m;
      var += d * d;
    }
    var /= static_cast<double>(vox);
    mu.data()[bc] = static_cast<T>(m);
    sigma.data()[bc] = static_cast<T>(std::sqrt(var + eps));
  }
  return {mu, sigma};
}

/// Conditional instance normalisation:
///   out[b,c] = gamma[s_b][c] * (z[b,c] - mu[b,c]) / sigma[b,c] + beta[s_b][c]
/// `source_of[b]` selects the affine row used for sample b. Only rows that
/// some sample actually selects become graph inputs, so unused sources never
/// receive gradient.
template <typename T>
Tensor<T> cin_forward(const Tensor<T>& z, const std::vector<std::size_t>& source_of,
                      const std::vector<Tensor<T>>& gamma, const std::vector<Tensor<T>>& beta,
                      double eps = 1e-5) {
  if (z.rank() != 5) throw ShapeError("cin_forward: expected [B,C,D,H,W], got " + shape_str(z.shape()));
  const std::size_t B = z.dim(0), C = z.dim(1), vox = z.dim(2) * z.dim(3) * z.dim(4);
  if (source_of.size() != B) {
    throw ShapeError("cin_forward: " + std::to_string(source_of.size()) + " sources for batch of " +
                     std::to_string(B));
  }
  if (gamma.size() != beta.size()) throw ShapeError("cin_forward: gamma/beta row counts differ");
  for (std::size_t s : source_of) {
    if (s >= gamma.size()) throw LookupError("cin_forward: source index " + std::to_string(s) + " has no affine row");
  }
  for (std::size_t s = 0; s < gamma.size(); ++s) {
    if (gamma[s].numel() != C || beta[s].numel() != C) {
      throw ShapeError("cin_forward: affine row width differs from channel count " + std::to_string(C));
    }
  }

  const auto stats = instance_stats(z, eps);
  std::vector<T> xhat(z.numel()), out(z.numel());
  for (std::size_t b = 0; b < B; ++b) {
    const auto& g = gamma[source_of[b]].data();
    const auto& bt = beta[source_of[b]].data();
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (b * C + c) * vox;
      const T mu = stats.mu.data()[b * C + c];
      const T inv = T(1) / stats.sigma.data()[b * C + c];
      for (std::size_t i = 0; i < vox; ++i) {
        const T xh = (z.data()[base + i] - mu) * inv;
        xhat[base + i] = xh;
        out[base + i] = g[c] * xh + bt[c];
      }
    }
  }

  // Graph inputs: z, then (gamma, beta) for each distinct selected source.
  const std::set<std::size_t> distinct(source_of.begin(), source_of.end());
  const std::vector<std::size_t> used(distinct.begin(), distinct.end());
  std::vector<Tensor<T>> inputs{z};
  std::vector<std::size_t> slot(gamma.size(), 0);
  for (std::size_t k = 0; k < used.size(); ++k) {
    slot[used[k]] = k;
    inputs.push_back(gamma[used[k]]);
    inputs.push_back(beta[used[k]]);
  }
  std::vector<Tensor<T>> gamma_used;
  for (std::size_t s : used) gamma_used.push_back(gamma[s]);

  return Tensor<T>::from_op(
      z.shape(), std::move(out), std::move(inputs),
      [xhat = std::move(xhat), sigma = stats.sigma, source_of, slot, gamma_used, B, C, vox](
          std::span<const T> gout, std::vector<std::span<T>>& gin) {
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t k = slot[source_of[b]];
          auto gamma_row = gamma_used[k].data();
          auto& dgamma = gin[1 + 2 * k];
          auto& dbeta = gin[2 + 2 * k];
          for (std::size_t c = 0; c < C; ++c) {
            const std::size_t base = (b * C + c) * vox;
            double sum_dy = 0.0, sum_dy_xh = 0.0;
            for (std::size_t i = 0; i < vox; ++i) {
              sum_dy += gout[base + i];
              sum_dy_xh += static_cast<double>(gout[base + i]) * xhat[base + i];
            }
            if (!dgamma.empty()) dgamma[c] += static_cast<T>(sum_dy_xh);
            if (!dbeta.empty()) dbeta[c] += static_cast<T>(sum_dy);
            if (!gin[0].empty()) {
              // dz = gamma/sigma * (dy - mean(dy) - xhat * mean(dy*xhat))
              const double n = static_cast<double>(vox);
              const double scale = gamma_row[c] / sigma.data()[b * C + c];
              const double m_dy = sum_dy / n, m_dyxh = sum_dy_xh / n;
              for (std::size_t i = 0; i < vox; ++i) {
                gin[0][base + i] += static_cast<T>(
                    scale * (gout[base + i] - m_dy - xhat[base + i] * m_dyxh));
              }
            }
          }
        }
      },
      "cin");
}

/// Normalisation layer holding one (gamma, beta) row per registered source.
template <typename T>
class CinLayer {
 public:
  CinLayer() = default;
  CinLayer(std::size_t channels, std::size_t num_sources, double eps = 1e-5)
      : channels_(channels), eps_(eps) {
    if (!(eps > 0)) throw ParameterError("CinLayer: eps must be positive");
    for (std::size_t s = 0; s < num_sources; ++s) add_row(InitPolicy::ones_zeros(), 0);
  }

  Tensor<T> forward(const Tensor<T>& z, const std::vector<std::size_t>& source_of) const {
    return cin_forward(z, source_of, gamma_, beta_, eps_);
  }

  // Appends a row for a new source. `copy_index` is only read for CopyFrom.
  void add_row(const InitPolicy& init, std::size_t copy_index) {
    Tensor<T> g(Shape{channels_}, T(1)), b(Shape{channels_}, T(0));
    if (init.kind == InitPolicy::Kind::CopyFrom) {
      g = gamma_.at(copy_index).clone();
      b = beta_.at(copy_index).clone();
    } else if (init.kind == InitPolicy::Kind::MeanOfExisting && !gamma_.empty()) {
      for (std::size_t c = 0; c < channels_; ++c) {
        double sg = 0.0, sb = 0.0;
        for (std::size_t s = 0; s < gamma_.size(); ++s) {
          sg += gamma_[s].data()[c];
          sb += beta_[s].data()[c];
        }
        g.data()[c] = static_cast<T>(sg / static_cast<double>(gamma_.size()));
        b.data()[c] = static_cast<T>(sb / static_cast<double>(gamma_.size()));
      }
    }
    g.set_requires_grad(true);
    b.set_requires_grad(true);
    gamma_.push_back(g);
    beta_.push_back(b);
  }

  void append_row(Tensor<T> g, Tensor<T> b) {
    if (g.numel() != channels_ || b.numel() != channels_) {
      throw ShapeError("CinLayer: affine row width must equal " + std::to_string(channels_));
    }
    g.set_requires_grad(true);
    b.set_requires_grad(true);
    gamma_.push_back(std::move(g));
    beta_.push_back(std::move(b));
  }

  std::size_t channels() const { return channels_; }
  std::size_t num_sources() const { return gamma_.size(); }
  double eps() const { return eps_; }
  const Tensor<T>& gamma(std::size_t s) const { return gamma_.at(s); }
  const Tensor<T>& beta(std::size_t s) const { return beta_.at(s); }
  const std::vector<Tensor<T>>& gammas() const { return gamma_; }
  const std::vector<Tensor<T>>& betas() const { return beta_; }

 private:
  std::size_t channels_ = 0;
  double eps_ = 1e-5;
  std::vector<Tensor<T>> gamma_;
  std::vector<Tensor<T>> beta_;
};

}  // namespace scin
