#pragma once

// Parameter storage and the small layers the pipeline is built from.

#include <cmath>
#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "tsamlt/ops.hpp"
#include "tsamlt/tensor.hpp"

namespace tsamlt::nn {

using tensor::Shape;
using tensor::Tensor;

/// Named, ordered collection of trainable parameters and non-trainable
/// buffers (batch-norm running statistics). Layers hold handles that share
/// storage with the entries here.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Tensor tensor;
    bool trainable = true;
  };

  Tensor add(std::string name, Shape shape, std::vector<double> values,
             bool trainable = true) {
    if (find(name)) throw ConfigError("param store: duplicate name " + name);
    Tensor t = trainable ? Tensor::parameter(std::move(shape), std::move(values))
                         : Tensor(std::move(shape), std::move(values));
    entries_.push_back({std::move(name), t, trainable});
    return t;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  Tensor get(const std::string& name) const {
    const Entry* e = find(name);
    if (!e) throw ConfigError("param store: no entry named " + name);
    return e->tensor;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  /// theta -= lr * grad_scale * grad for every trainable entry.
  void sgd_step(double lr, double grad_scale = 1.0) {
    for (auto& e : entries_) {
      if (!e.trainable || !e.tensor.has_grad()) continue;
      auto v = e.tensor.mutable_data();
      const auto g = e.tensor.grad();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * grad_scale * g[i];
    }
  }

  /// Copies values from `other`, which must hold the same names and shapes.
  void assign(const ParamStore& other) {
    if (other.entries_.size() != entries_.size()) {
      throw ShapeError("param store: entry count mismatch on assign");
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const auto& src = other.entries_[i];
      auto& dst = entries_[i];
      if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
        throw ShapeError("param store: entry " + dst.name + " does not match " + src.name);
      }
      auto v = dst.tensor.mutable_data();
      std::copy(src.tensor.data().begin(), src.tensor.data().end(), v.begin());
    }
  }

 private:
  std::vector<Entry> entries_;
};

inline std::vector<double> uniform_values(std::size_t n, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

/// y = x·Wᵀ + b. Weights start uniform in ±1/sqrt(in).
struct Linear {
  Tensor weight;  // [out × in]
  Tensor bias;    // [out]

  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         std::mt19937_64& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = store.add(name + ".weight", {out, in}, uniform_values(out * in, bound, rng));
    bias = store.add(name + ".bias", {out}, uniform_values(out, bound, rng));
  }

  Tensor operator()(const Tensor& x) const { return tensor::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(1); }
  std::size_t out_features() const { return weight.dim(0); }
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t dim) {
    gamma = store.add(name + ".gamma", {dim}, std::vector<double>(dim, 1.0));
    beta = store.add(name + ".beta", {dim}, std::vector<double>(dim, 0.0));
  }

  Tensor operator()(const Tensor& x) const { return tensor::layer_norm(x, gamma, beta); }
};

/// 1-D batch normalization over feature columns, momentum 0.9.
struct BatchNorm1d {
  static constexpr double kMomentum = 0.9;

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  BatchNorm1d() = default;
  BatchNorm1d(ParamStore& store, const std::string& name, std::size_t features) {
    gamma = store.add(name + ".gamma", {features}, std::vector<double>(features, 1.0));
    beta = store.add(name + ".beta", {features}, std::vector<double>(features, 0.0));
    running_mean = store.add(name + ".running_mean", {features},
                             std::vector<double>(features, 0.0), false);
    running_var = store.add(name + ".running_var", {features},
                            std::vector<double>(features, 1.0), false);
  }

  /// In training mode the running statistics are updated in place:
  /// running = 0.9·running + 0.1·batch (unbiased batch variance).
  Tensor operator()(const Tensor& x, bool training) {
    if (!training) {
      return tensor::batch_norm_eval(x, gamma, beta, running_mean.data(), running_var.data());
    }
    tensor::BatchStats stats;
    Tensor y = tensor::batch_norm_train(x, gamma, beta, &stats);
    const double b = static_cast<double>(x.dim(0));
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    for (std::size_t k = 0; k < rm.size(); ++k) {
      rm[k] = kMomentum * rm[k] + (1.0 - kMomentum) * stats.mean[k];
      rv[k] = kMomentum * rv[k] + (1.0 - kMomentum) * stats.var[k] * b / (b - 1.0);
    }
    return y;
  }
};

/// Same-padded temporal convolution over a [T × in] sequence.
struct TemporalConv {
  std::size_t kernel = 3;
  Linear proj;  // [out × kernel·in]

  TemporalConv() = default;
  TemporalConv(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               std::size_t kernel_size, std::mt19937_64& rng)
      : kernel(kernel_size), proj(store, name, in * kernel_size, out, rng) {}

  Tensor operator()(const Tensor& x) const {
    return proj(tensor::unfold_time(x, kernel));
  }
};

}  // namespace tsamlt::nn
