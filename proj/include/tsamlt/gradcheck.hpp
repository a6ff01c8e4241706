#pragma once

// Central finite-difference checks of tape gradients. The numeric side only
// ever evaluates forward passes, so it is independent of every adjoint.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tsamlt/ops.hpp"
#include "tsamlt/tensor.hpp"

namespace tsamlt::gradcheck {

using tensor::Tensor;

inline constexpr double kStep = 1e-5;
inline constexpr double kNormFloor = 1e-8;

/// ||a - n|| / max(||a||, ||n||, floor).
inline double relative_error(const std::vector<double>& analytic,
                             const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), kNormFloor});
}

struct Result {
  std::vector<double> analytic;
  std::vector<double> numeric;
  double rel_error = 0.0;
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

/// Full gradient check of a scalar function w.r.t. every coordinate of
/// `inputs` (which are turned into fresh leaves).
inline Result check(const LossFn& fn, const std::vector<Tensor>& inputs, double h = kStep) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) {
    leaves.push_back(Tensor::parameter(in.shape(), {in.data().begin(), in.data().end()}));
  }
  Result r;
  {
    tensor::Tape tape;
    tensor::TapeScope scope(tape);
    Tensor loss = fn(leaves);
    tape.backward(loss);
  }
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      r.analytic.insert(r.analytic.end(), leaf.grad().begin(), leaf.grad().end());
    } else {
      r.analytic.insert(r.analytic.end(), leaf.size(), 0.0);
    }
  }
  tensor::NoGradScope no_grad;
  for (auto& leaf : leaves) {
    auto v = leaf.mutable_data();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double saved = v[i];
      v[i] = saved + h;
      const double up = fn(leaves).item();
      v[i] = saved - h;
      const double down = fn(leaves).item();
      v[i] = saved;
      r.numeric.push_back((up - down) / (2.0 * h));
    }
  }
  r.rel_error = relative_error(r.analytic, r.numeric);
  return r;
}

/// Gradient check of sum(weights ⊙ op(inputs)) with random output weights,
/// which exercises the full Jacobian of a tensor-valued op.
inline Result check_op(const std::function<Tensor(const std::vector<Tensor>&)>& op,
                       const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                       double h = kStep) {
  std::vector<double> weights;
  {
    tensor::NoGradScope no_grad;
    const Tensor probe = op(inputs);
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    weights.resize(probe.size());
    for (auto& w : weights) w = dist(rng);
  }
  return check(
      [&](const std::vector<Tensor>& xs) {
        const Tensor y = op(xs);
        return tensor::sum(tensor::mul(y, Tensor(y.shape(), weights)));
      },
      inputs, h);
}

/// Directional check for functions of existing leaves (model parameters):
/// compares ∇f·v against (f(θ+hv) - f(θ-hv)) / 2h for a random unit
/// direction v. `fn` must build its graph from the leaves' current values.
inline Result check_directional(const std::function<Tensor()>& fn, std::vector<Tensor> leaves,
                                std::mt19937_64& rng, double h = kStep) {
  for (auto& leaf : leaves) leaf.zero_grad();
  {
    tensor::Tape tape;
    tensor::TapeScope scope(tape);
    Tensor loss = fn();
    tape.backward(loss);
  }
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<std::vector<double>> dir(leaves.size());
  double norm = 0.0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    dir[p].resize(leaves[p].size());
    for (auto& d : dir[p]) {
      d = dist(rng);
      norm += d * d;
    }
  }
  norm = std::sqrt(norm);
  double analytic = 0.0;
  for (std::size_t p = 0; p < leaves.size(); ++p) {
    for (auto& d : dir[p]) d /= norm;
    if (!leaves[p].has_grad()) continue;
    const auto g = leaves[p].grad();
    for (std::size_t i = 0; i < g.size(); ++i) analytic += g[i] * dir[p][i];
  }
  auto shift = [&](double s) {
    for (std::size_t p = 0; p < leaves.size(); ++p) {
      auto v = leaves[p].mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += s * dir[p][i];
    }
  };
  tensor::NoGradScope no_grad;
  const auto snapshot = [&] {
    std::vector<std::vector<double>> s;
    for (auto& l : leaves) s.emplace_back(l.data().begin(), l.data().end());
    return s;
  }();
  auto restore = [&] {
    for (std::size_t p = 0; p < leaves.size(); ++p) {
      std::copy(snapshot[p].begin(), snapshot[p].end(), leaves[p].mutable_data().begin());
    }
  };
  shift(h);
  const double up = fn().item();
  restore();
  shift(-h);
  const double down = fn().item();
  restore();
  for (auto& leaf : leaves) leaf.zero_grad();

  Result r;
  r.analytic = {analytic};
  r.numeric = {(up - down) / (2.0 * h)};
  r.rel_error = relative_error(r.analytic, r.numeric);
  return r;
}

}  // namespace tsamlt::gradcheck
