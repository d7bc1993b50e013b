#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "scin/cin.hpp"
#include "scin/error.hpp"
#include "scin/ops.hpp"
#include "scin/tensor.hpp"

namespace scin {

struct ModelConfig {
  std::size_t in_channels = 2;
  std::size_t base_channels = 8;
  std::size_t depth = 3;
  double dropout_p = 0.1;
  double leaky_slope = 0.01;
  double norm_eps = 1e-5;
  std::vector<std::string> sources{"pooled"};

  void validate() const {
    if (in_channels < 1) throw ConfigError("model.in_channels must be >= 1");
    if (base_channels < 1) throw ConfigError("model.base_channels must be >= 1");
    if (depth < 1) throw ConfigError("model.depth must be >= 1");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("model.dropout_p must lie in [0,1)");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("model.leaky_slope must lie in (0,1)");
    if (!(norm_eps > 0.0)) throw ConfigError("model.norm_eps must be positive");
    if (sources.empty()) throw ConfigError("model.sources must list at least one source");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct Conv {
  Tensor<T> weight;
  Tensor<T> bias;
};

// conv3d -> CIN -> dropout -> LeakyReLU
template <typename T>
struct ConvBlock {
  std::string name;
  Conv<T> conv;
  CinLayer<T> norm;
  std::size_t stride = 1;
};

struct ParamCounts {
  std::size_t backbone_scalars = 0;
  std::size_t norm_scalars = 0;
  std::size_t cin_layers = 0;
  std::size_t cin_channel_sum = 0;
};

/// 3D U-Net whose every normalisation is source-conditioned.
///
/// Encoder level l (width base*2^l) holds two conv blocks followed, except at
/// the bottleneck, by a stride-2 conv block. Each decoder level upsamples with
/// a 2x2x2 transposed conv, concatenates the matching encoder output and
/// applies two conv blocks. A 1x1x1 conv produces one logit channel.
///
/// Tensors are shared handles, so the class is move-only; use clone() for an
/// independent copy.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t init_seed) : config_(config), dropout_rng_(init_seed ^ 0x9e3779b97f4a7c15ULL) {
    config_.validate();
    for (const auto& s : config_.sources) registry_.add(s);
    std::mt19937_64 rng(init_seed);
    const std::size_t S = registry_.size();
    std::size_t prev = config_.in_channels;
    for (std::size_t l = 0; l < config_.depth; ++l) {
      const std::size_t ch = width(l);
      const std::string p = "enc" + std::to_string(l);
      encoder_.push_back(make_block(p + ".block1", prev, ch, 1, S, rng));
      encoder_.push_back(make_block(p + ".block2", ch, ch, 1, S, rng));
      if (l + 1 < config_.depth) down_.push_back(make_block(p + ".down", ch, ch, 2, S, rng));
      prev = ch;
    }
    for (std::size_t l = config_.depth - 1; l-- > 0;) {
      const std::size_t ch = width(l);
      const std::string p = "dec" + std::to_string(l);
      Conv<T> up{random_weight(Shape{width(l + 1), ch, 2, 2, 2}, width(l + 1) * 8, rng),
                 Tensor<T>(Shape{ch})};
      up.bias.set_requires_grad(true);
      up_.push_back(std::move(up));
      up_names_.push_back(p + ".up");
      decoder_.push_back(make_block(p + ".block1", 2 * ch, ch, 1, S, rng));
      decoder_.push_back(make_block(p + ".block2", ch, ch, 1, S, rng));
    }
    head_ = Conv<T>{random_weight(Shape{1, width(0), 1, 1, 1}, width(0), rng), Tensor<T>(Shape{1})};
    head_.bias.set_requires_grad(true);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  Model clone() const {
    Model out(config_, 0);
    out.registry_ = registry_;
    out.config_ = config_;
    out.training_ = training_;
    out.dropout_rng_ = dropout_rng_;
    out.encoder_ = clone_blocks(encoder_);
    out.down_ = clone_blocks(down_);
    out.decoder_ = clone_blocks(decoder_);
    out.up_.clear();
    for (const auto& u : up_) out.up_.push_back(clone_conv(u));
    out.head_ = clone_conv(head_);
    return out;
  }

  Tensor<T> forward(const Tensor<T>& volume, const std::vector<SourceId>& sources) {
    if (volume.rank() != 5) throw ShapeError("forward: expected [B,Cin,D,H,W], got " + shape_str(volume.shape()));
    if (volume.dim(1) != config_.in_channels) {
      throw ShapeError("forward: model expects " + std::to_string(config_.in_channels) + " input channels, got " +
                       std::to_string(volume.dim(1)));
    }
    const std::size_t mult = std::size_t{1} << (config_.depth - 1);
    for (std::size_t a = 2; a < 5; ++a) {
      if (volume.dim(a) % mult != 0 || volume.dim(a) < 2 * mult) {
        throw ShapeError("forward: spatial extent " + std::to_string(volume.dim(a)) +
                         " must be a multiple of " + std::to_string(mult) + " and at least " +
                         std::to_string(2 * mult));
      }
    }
    if (sources.size() != volume.dim(0)) throw ShapeError("forward: need one source per batch element");
    std::vector<std::size_t> idx;
    idx.reserve(sources.size());
    for (const auto& s : sources) idx.push_back(registry_.resolve(s));

    std::vector<Tensor<T>> skips;
    Tensor<T> x = volume;
    for (std::size_t l = 0; l < config_.depth; ++l) {
      x = apply(encoder_[2 * l], x, idx);
      x = apply(encoder_[2 * l + 1], x, idx);
      if (l + 1 < config_.depth) {
        skips.push_back(x);
        x = apply(down_[l], x, idx);
      }
    }
    for (std::size_t k = 0; k + 1 < config_.depth; ++k) {
      x = transposed_conv3d(x, up_[k].weight, up_[k].bias);
      x = concat_channels(skips[skips.size() - 1 - k], x);
      x = apply(decoder_[2 * k], x, idx);
      x = apply(decoder_[2 * k + 1], x, idx);
    }
    return conv3d(x, head_.weight, head_.bias, 1, 0);
  }

  Tensor<T> forward(const Tensor<T>& volume, const std::vector<std::string>& source_names) {
    std::vector<SourceId> ids;
    for (const auto& n : source_names) ids.push_back(registry_.at(n));
    return forward(volume, ids);
  }

  /// Adds a source; every CIN layer gains one affine row.
  SourceId register_source(const std::string& name, const InitPolicy& init = InitPolicy::mean_of_existing()) {
    if (registry_.contains(name)) throw RegistrationError("source '" + name + "' is already registered");
    std::size_t copy_index = 0;
    if (init.kind == InitPolicy::Kind::CopyFrom) copy_index = registry_.at(init.copy_from).index;
    for_each_block([&](ConvBlock<T>& b) { b.norm.add_row(init, copy_index); });
    auto id = registry_.add(name);
    config_.sources = registry_.names();
    return id;
  }

  /// All parameters in a stable order: backbone and norm rows interleaved by
  /// layer, exactly as the network is traversed.
  std::vector<Parameter<T>> parameters() const { return collect(true, nullptr); }

  /// Affine rows of the listed sources only, in parameters() order.
  std::vector<Parameter<T>> norm_rows_for(const std::vector<std::string>& source_names) const {
    std::vector<std::size_t> idx;
    for (const auto& s : source_names) idx.push_back(registry_.at(s).index);
    return collect(false, &idx);
  }

  ParamCounts counts() const {
    ParamCounts c;
    for (const auto& p : parameters()) {
      (p.group == ParamGroup::Backbone ? c.backbone_scalars : c.norm_scalars) += p.tensor.numel();
    }
    for_each_block([&](const ConvBlock<T>& b) {
      ++c.cin_layers;
      c.cin_channel_sum += b.norm.channels();
    });
    return c;
  }

  std::vector<const CinLayer<T>*> cin_layers() const {
    std::vector<const CinLayer<T>*> out;
    for_each_block([&](const ConvBlock<T>& b) { out.push_back(&b.norm); });
    return out;
  }

  void set_training(bool on) { training_ = on; }
  bool training() const { return training_; }
  void seed_dropout(std::uint64_t seed) { dropout_rng_.seed(seed); }

  const ModelConfig& config() const { return config_; }
  const SourceRegistry& registry() const { return registry_; }
  SourceId source(const std::string& name) const { return registry_.at(name); }

  std::size_t width(std::size_t level) const { return config_.base_channels << level; }

 private:
  std::vector<Parameter<T>> collect(bool with_backbone, const std::vector<std::size_t>* only) const {
    std::vector<Parameter<T>> out;
    auto wanted = [&](std::size_t s) {
      return only == nullptr || std::find(only->begin(), only->end(), s) != only->end();
    };
    auto add_conv = [&](const std::string& name, const Conv<T>& c) {
      if (!with_backbone) return;
      out.push_back({name + ".weight", c.weight, ParamGroup::Backbone});
      out.push_back({name + ".bias", c.bias, ParamGroup::Backbone});
    };
    auto add_block = [&](const ConvBlock<T>& b) {
      add_conv(b.name + ".conv", b.conv);
      for (std::size_t s = 0; s < registry_.size(); ++s) {
        if (!wanted(s)) continue;
        const auto& src = registry_.names()[s];
        out.push_back({b.name + ".norm.gamma." + src, b.norm.gamma(s), ParamGroup::NormAffine});
        out.push_back({b.name + ".norm.beta." + src, b.norm.beta(s), ParamGroup::NormAffine});
      }
    };
    for (std::size_t l = 0; l < config_.depth; ++l) {
      add_block(encoder_[2 * l]);
      add_block(encoder_[2 * l + 1]);
      if (l + 1 < config_.depth) add_block(down_[l]);
    }
    for (std::size_t k = 0; k + 1 < config_.depth; ++k) {
      add_conv(up_names_[k], up_[k]);
      add_block(decoder_[2 * k]);
      add_block(decoder_[2 * k + 1]);
    }
    add_conv("head", head_);
    return out;
  }

  ConvBlock<T> make_block(std::string name, std::size_t cin, std::size_t cout, std::size_t stride,
                          std::size_t S, std::mt19937_64& rng) {
    ConvBlock<T> b;
    b.name = std::move(name);
    b.conv.weight = random_weight(Shape{cout, cin, 3, 3, 3}, cin * 27, rng);
    b.conv.bias = Tensor<T>(Shape{cout});
    b.conv.bias.set_requires_grad(true);
    b.norm = CinLayer<T>(cout, S, config_.norm_eps);
    b.stride = stride;
    return b;
  }

  // He-normal initialisation for leaky-ReLU networks.
  static Tensor<T> random_weight(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor<T> w(std::move(shape));
    for (auto& v : w.data()) v = static_cast<T>(nd(rng));
    w.set_requires_grad(true);
    return w;
  }

  Tensor<T> apply(const ConvBlock<T>& b, const Tensor<T>& x, const std::vector<std::size_t>& idx) {
    Tensor<T> y = conv3d(x, b.conv.weight, b.conv.bias, b.stride, 1);
    y = b.norm.forward(y, idx);
    y = dropout(y, config_.dropout_p, training_, dropout_rng_);
    return leaky_relu(y, static_cast<T>(config_.leaky_slope));
  }

  template <typename F>
  void for_each_block(F&& f) {
    for (auto& b : encoder_) f(b);
    for (auto& b : down_) f(b);
    for (auto& b : decoder_) f(b);
  }
  template <typename F>
  void for_each_block(F&& f) const {
    for (const auto& b : encoder_) f(b);
    for (const auto& b : down_) f(b);
    for (const auto& b : decoder_) f(b);
  }

  static Tensor<T> clone_param(const Tensor<T>& t) {
    Tensor<T> c = t.clone();
    c.set_requires_grad(true);
    return c;
  }
  static Conv<T> clone_conv(const Conv<T>& c) { return {clone_param(c.weight), clone_param(c.bias)}; }
  static std::vector<ConvBlock<T>> clone_blocks(const std::vector<ConvBlock<T>>& in) {
    std::vector<ConvBlock<T>> out;
    for (const auto& b : in) {
      ConvBlock<T> c;
      c.name = b.name;
      c.conv = clone_conv(b.conv);
      c.stride = b.stride;
      c.norm = CinLayer<T>(b.norm.channels(), 0, b.norm.eps());
      for (std::size_t s = 0; s < b.norm.num_sources(); ++s) {
        c.norm.append_row(b.norm.gamma(s).clone(), b.norm.beta(s).clone());
      }
      out.push_back(std::move(c));
    }
    return out;
  }

  ModelConfig config_;
  SourceRegistry registry_;
  std::vector<ConvBlock<T>> encoder_;  // two per level
  std::vector<ConvBlock<T>> down_;     // one per non-bottleneck level
  std::vector<Conv<T>> up_;            // deepest first
  std::vector<std::string> up_names_;
  std::vector<ConvBlock<T>> decoder_;  // two per decoder level, deepest first
  Conv<T> head_;
  bool training_ = false;
  std::mt19937_64 dropout_rng_;
};

template <typename T>
Model<T> build_model(const ModelConfig& config, std::uint64_t init_seed = 0) {
  return Model<T>(config, init_seed);
}

template <typename T>
std::pair<std::vector<Parameter<T>>, std::vector<Parameter<T>>> partition_params(const Model<T>& model) {
  std::vector<Parameter<T>> backbone, norm;
  for (auto& p : model.parameters()) (p.group == ParamGroup::Backbone ? backbone : norm).push_back(p);
  return {backbone, norm};
}

template <typename T>
SourceId register_source(Model<T>& model, const std::string& name,
                         const InitPolicy& init = InitPolicy::mean_of_existing()) {
  return model.register_source(name, init);
}

}  // namespace scin
