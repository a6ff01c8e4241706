#pragma once

// Distances between a query's multi-level representation and its
// query-specific prototype, the distance-fusion network, and the loss.

#include <algorithm>
#include <atomic>
#include <span>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "tsamlt/nn.hpp"
#include "tsamlt/ops.hpp"

namespace tsamlt::metrics {

using tensor::Tensor;

/// C[i][j] = Euclidean distance between row i of `query` and row j of `proto`.
inline Tensor cost_matrix(const Tensor& query, const Tensor& proto) {
  if (query.rank() != 2 || proto.rank() != 2 || query.dim(1) != proto.dim(1)) {
    throw ShapeError("cost_matrix: feature dims differ");
  }
  return tensor::sqrt(tensor::pairwise_sq_distance(query, proto));
}

struct SinkhornOptions {
  double epsilon = 0.05;
  std::size_t max_iters = 100;
  double tol = 1e-6;  // 0 runs exactly max_iters iterations
  // Damped Newton steps on the dual potentials when the scaling sweeps stop
  // short of tol. Not differentiable, so only allowed outside a tape.
  std::size_t newton_iters = 0;
};

struct SinkhornResult {
  Tensor plan;      // n×m, marginals 1/n and 1/m
  Tensor distance;  // [1], Σ C ⊙ P
  std::size_t iterations = 0;
  double marginal_violation = 0.0;
};

/// Count of Sinkhorn solves since process start (all threads).
inline std::atomic<std::size_t>& sinkhorn_invocations() {
  static std::atomic<std::size_t> count{0};
  return count;
}

/// Max deviation of plan row/column sums from 1/n and 1/m.
inline double marginal_violation(const Tensor& plan) {
  const std::size_t n = plan.dim(0), m = plan.dim(1);
  double worst = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += plan.at(i, j);
    worst = std::max(worst, std::abs(s - 1.0 / static_cast<double>(n)));
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += plan.at(i, j);
    worst = std::max(worst, std::abs(s - 1.0 / static_cast<double>(m)));
  }
  return worst;
}

namespace detail {

/// Solves A x = rhs in place (A is k×k row-major) by Gaussian elimination
/// with partial pivoting. Returns false on an exactly singular pivot.
inline bool solve_dense(std::vector<double> a, std::vector<double>& rhs) {
  const std::size_t k = rhs.size();
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < k; ++r)
      if (std::abs(a[r * k + c]) > std::abs(a[piv * k + c])) piv = r;
    if (a[piv * k + c] == 0.0) return false;
    if (piv != c) {
      for (std::size_t j = 0; j < k; ++j) std::swap(a[piv * k + j], a[c * k + j]);
      std::swap(rhs[piv], rhs[c]);
    }
    for (std::size_t r = c + 1; r < k; ++r) {
      const double f = a[r * k + c] / a[c * k + c];
      if (f == 0.0) continue;
      for (std::size_t j = c; j < k; ++j) a[r * k + j] -= f * a[c * k + j];
      rhs[r] -= f * rhs[c];
    }
  }
  for (std::size_t c = k; c-- > 0;) {
    double v = rhs[c];
    for (std::size_t j = c + 1; j < k; ++j) v -= a[c * k + j] * rhs[j];
    rhs[c] = v / a[c * k + c];
  }
  return true;
}

inline double log_sum_exp(const std::vector<double>& v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

/// Newton ascent on the concave dual
///   g(α, β) = Σ α_i/n + Σ β_j/m − Σ exp(logK_ij + α_i + β_j)
/// with β_{m-1} held fixed (the potentials are defined up to a shift).
/// Steps are lightly damped, capped in size, and backtracked on g; a plain
/// scaling sweep is taken whenever backtracking fails.
inline void newton_refine(std::span<const double> log_k, std::size_t n, std::size_t m,
                          std::vector<double>& alpha, std::vector<double>& beta,
                          const SinkhornOptions& opts) {
  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  const std::size_t dim = n + m - 1;
  auto plan_at = [&](const std::vector<double>& a, const std::vector<double>& b, std::size_t i,
                     std::size_t j) { return std::exp(log_k[i * m + j] + a[i] + b[j]); };
  auto dual = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double g = 0.0;
    for (std::size_t i = 0; i < n; ++i) g += a[i] / static_cast<double>(n);
    for (std::size_t j = 0; j < m; ++j) g += b[j] / static_cast<double>(m);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) g -= plan_at(a, b, i, j);
    return g;
  };
  auto sweep = [&] {
    std::vector<double> tmp(m);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < m; ++j) tmp[j] = log_k[i * m + j] + beta[j];
      alpha[i] = log_a - log_sum_exp(tmp);
    }
    tmp.resize(n);
    for (std::size_t j = 0; j < m; ++j) {
      for (std::size_t i = 0; i < n; ++i) tmp[i] = log_k[i * m + j] + alpha[i];
      beta[j] = log_b - log_sum_exp(tmp);
    }
  };

  for (std::size_t step = 0; step < opts.newton_iters; ++step) {
    // Gradient (marginal residuals) and negated Hessian of g.
    std::vector<double> grad(dim, 0.0), hess(dim * dim, 0.0);
    double worst = 0.0;
    std::vector<double> cols(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        const double p = plan_at(alpha, beta, i, j);
        row += p;
        cols[j] += p;
        if (j + 1 < m) {
          hess[i * dim + n + j] += p;
          hess[(n + j) * dim + i] += p;
        }
      }
      hess[i * dim + i] = row;
      grad[i] = 1.0 / static_cast<double>(n) - row;
      worst = std::max(worst, std::abs(grad[i]));
    }
    for (std::size_t j = 0; j < m; ++j) {
      worst = std::max(worst, std::abs(1.0 / static_cast<double>(m) - cols[j]));
      if (j + 1 < m) {
        hess[(n + j) * dim + n + j] = cols[j];
        grad[n + j] = 1.0 / static_cast<double>(m) - cols[j];
      }
    }
    if (worst < opts.tol) return;

    double diag = 0.0;
    for (std::size_t k = 0; k < dim; ++k) diag = std::max(diag, hess[k * dim + k]);
    for (std::size_t k = 0; k < dim; ++k) hess[k * dim + k] += 1e-3 * worst + 1e-13 * diag;
    std::vector<double> dir = grad;
    bool accepted = false;
    if (solve_dense(hess, dir)) {
      double largest = 0.0, slope = 0.0;
      for (std::size_t k = 0; k < dim; ++k) {
        largest = std::max(largest, std::abs(dir[k]));
        slope += grad[k] * dir[k];
      }
      if (largest > 5.0)
        for (auto& d : dir) d *= 5.0 / largest;
      slope *= std::min(1.0, 5.0 / std::max(largest, 1e-300));
      const double g0 = dual(alpha, beta);
      double t = 1.0;
      for (int ls = 0; ls < 60 && slope > 0.0; ++ls, t *= 0.5) {
        std::vector<double> a2 = alpha, b2 = beta;
        for (std::size_t i = 0; i < n; ++i) a2[i] += t * dir[i];
        for (std::size_t j = 0; j + 1 < m; ++j) b2[j] += t * dir[n + j];
        if (dual(a2, b2) >= g0 + 1e-4 * t * slope) {
          alpha = std::move(a2);
          beta = std::move(b2);
          accepted = true;
          break;
        }
      }
    }
    if (!accepted) sweep();
  }
}

}  // namespace detail

/// Entropic OT with uniform marginals by log-domain alternating scaling.
/// The executed iterations are recorded on the tape, so gradients flow by
/// unrolled differentiation.
inline SinkhornResult sinkhorn(const Tensor& cost, const SinkhornOptions& opts = {}) {
  if (cost.rank() != 2) throw ShapeError("sinkhorn: cost must be a matrix");
  if (!(opts.epsilon > 0.0)) throw ConfigError("sinkhorn: epsilon must be positive");
  const std::size_t n = cost.dim(0), m = cost.dim(1);
  if (n == 0 || m == 0) throw ShapeError("sinkhorn: empty cost matrix");
  sinkhorn_invocations().fetch_add(1, std::memory_order_relaxed);

  const double log_a = -std::log(static_cast<double>(n));
  const double log_b = -std::log(static_cast<double>(m));
  const Tensor kernel = tensor::scale(cost, -1.0 / opts.epsilon);  // log K
  Tensor alpha = Tensor::zeros({n});
  Tensor beta = Tensor::zeros({m});

  SinkhornResult res;
  auto row_violation = [&] {
    double worst = 0.0;
    const auto k = kernel.data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += std::exp(k[i * m + j] + alpha[i] + beta[j]);
      worst = std::max(worst, std::abs(s - 1.0 / static_cast<double>(n)));
    }
    return worst;
  };
  for (std::size_t it = 0; it < opts.max_iters; ++it) {
    alpha = tensor::affine(tensor::logsumexp(tensor::add_rowwise(kernel, beta), 1), -1.0, log_a);
    beta = tensor::affine(tensor::logsumexp(tensor::add_colwise(kernel, alpha), 0), -1.0, log_b);
    res.iterations = it + 1;
    if (opts.tol > 0.0 && row_violation() < opts.tol) break;
  }
  if (opts.newton_iters > 0) {
    if (tensor::recording()) throw ConfigError("sinkhorn: newton refinement cannot be recorded");
    if (opts.tol > 0.0 && row_violation() >= opts.tol) {
      std::vector<double> a(alpha.data().begin(), alpha.data().end());
      std::vector<double> b(beta.data().begin(), beta.data().end());
      detail::newton_refine(kernel.data(), n, m, a, b, opts);
      alpha = Tensor({n}, std::move(a));
      beta = Tensor({m}, std::move(b));
    }
  }
  res.plan = tensor::exp(tensor::add_colwise(tensor::add_rowwise(kernel, beta), alpha));
  res.distance = tensor::sum(tensor::mul(cost, res.plan));
  res.marginal_violation = marginal_violation(res.plan);
  return res;
}

/// Exact OT value for square costs with uniform marginals: the optimum is a
/// permutation matrix scaled by 1/n, so this is min-cost assignment / n
/// (Hungarian algorithm with potentials).
inline double exact_ot(const std::vector<double>& cost, std::size_t n) {
  if (cost.size() != n * n) throw ShapeError("exact_ot: cost must be square n×n");
  if (n == 0) throw ShapeError("exact_ot: empty cost");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; p[j] = row assigned to column j.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) total += cost[(p[j] - 1) * n + (j - 1)];
  return total / static_cast<double>(n);
}

inline double exact_ot(const Tensor& cost) {
  if (cost.rank() != 2 || cost.dim(0) != cost.dim(1)) {
    throw ShapeError("exact_ot: cost must be square");
  }
  return exact_ot(std::vector<double>(cost.data().begin(), cost.data().end()), cost.dim(0));
}

/// Squared Frobenius distance averaged over rows.
inline Tensor seq_distance(const Tensor& query, const Tensor& proto) {
  tensor::detail::require_same_shape(query, proto, "seq_distance");
  const double rows = static_cast<double>(query.rows());
  return tensor::scale(tensor::sum(tensor::square(tensor::sub(query, proto))), 1.0 / rows);
}

enum class LossVariant { kFusion, kSequence, kOt };

inline LossVariant parse_loss_variant(const std::string& s) {
  if (s == "fusion") return LossVariant::kFusion;
  if (s == "sequence") return LossVariant::kSequence;
  if (s == "ot") return LossVariant::kOt;
  throw ConfigError("loss variant must be fusion|sequence|ot, got " + s);
}

inline std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::kFusion: return "fusion";
    case LossVariant::kSequence: return "sequence";
    case LossVariant::kOt: return "ot";
  }
  return "fusion";
}

/// Linear 2N -> N, leaky ReLU, batch norm over the query batch. The input
/// row is [dis_ot ‖ dis_seq]. Weights start at zero, so an untrained
/// network scores every class equally.
class FusionNet {
 public:
  FusionNet() = default;
  FusionNet(nn::ParamStore& store, std::size_t way) : way_(way) {
    linear_.weight = store.add("fusion.linear.weight", {way, 2 * way},
                               std::vector<double>(2 * way * way, 0.0));
    linear_.bias = store.add("fusion.linear.bias", {way}, std::vector<double>(way, 0.0));
    norm_ = nn::BatchNorm1d(store, "fusion.bn", way);
  }

  /// dis_ot, dis_seq: [P × N] -> dis_fus [P × N].
  Tensor operator()(const Tensor& dis_ot, const Tensor& dis_seq, bool training) {
    if (dis_ot.rank() != 2 || dis_ot.shape() != dis_seq.shape() || dis_ot.dim(1) != way_) {
      throw ShapeError("fusion: expected two [P x " + std::to_string(way_) + "] inputs");
    }
    const Tensor con = tensor::concat({dis_ot, dis_seq}, 1);
    return norm_(tensor::leaky_relu(linear_(con)), training);
  }

  std::size_t way() const { return way_; }
  nn::Linear& linear() { return linear_; }
  nn::BatchNorm1d& norm() { return norm_; }

 private:
  std::size_t way_ = 0;
  nn::Linear linear_;
  nn::BatchNorm1d norm_;
};

struct Classification {
  Tensor probabilities;  // [P × N]
  Tensor loss;           // [1]
};

/// Softmax over classes of the logits and mean cross-entropy of the true labels.
inline Classification classify_and_loss(const Tensor& logits,
                                        const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(1) < 2) {
    throw ShapeError("classify: logits must be [P x N] with N >= 2");
  }
  if (labels.size() != logits.dim(0)) throw ShapeError("classify: one label per query");
  for (auto y : labels) {
    if (y >= logits.dim(1)) throw ConfigError("classify: label outside [0, N)");
  }
  Classification out;
  out.probabilities = tensor::softmax(logits, 1);
  out.loss = tensor::neg(tensor::mean(tensor::pick(tensor::log_softmax(logits, 1), labels)));
  return out;
}

/// Expected accuracy of argmax prediction with ties split evenly.
inline double tie_aware_accuracy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  const std::size_t p = logits.dim(0), n = logits.dim(1);
  double total = 0.0;
  for (std::size_t q = 0; q < p; ++q) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) best = std::max(best, logits.at(q, c));
    std::size_t ties = 0;
    for (std::size_t c = 0; c < n; ++c) ties += logits.at(q, c) == best ? 1 : 0;
    if (logits.at(q, labels[q]) == best) total += 1.0 / static_cast<double>(ties);
  }
  return p ? total / static_cast<double>(p) : 0.0;
}

}  // namespace tsamlt::metrics
