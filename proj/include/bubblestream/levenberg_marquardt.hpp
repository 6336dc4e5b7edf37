#pragma once

// Levenberg-Marquardt for least-squares problems whose Jacobian has arrow
// structure: independent residual blocks, each owning a small fixed-size
// parameter vector, plus an optional parameter vector shared by all blocks.
// The shared part is eliminated by a Schur complement, so the cost per
// iteration is linear in the number of blocks.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

namespace bubblestream {

struct LmOptions {
  int max_iterations = 100;
  double parameter_tolerance = 1e-10;
  double cost_tolerance = 1e-12;
  /// Huber threshold on individual residuals; 0 disables robustification.
  double huber_delta = 0.0;
};

struct LmSummary {
  double initial_cost = 0.0;
  double final_cost = 0.0;
  int iterations = 0;
  bool converged = false;
};

template <int LocalDim>
struct ArrowBlock {
  Eigen::VectorXd residuals;
  Eigen::Matrix<double, Eigen::Dynamic, LocalDim> local_jacobian;
  Eigen::MatrixXd shared_jacobian;  // residuals x shared parameters
};

namespace detail {

/// ½ρ(r²) summed; ρ is the identity or the Huber function.
inline double robust_cost(const Eigen::VectorXd& r, double delta) {
  if (delta <= 0.0) return 0.5 * r.squaredNorm();
  double c = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    const double a = std::abs(r[i]);
    c += a <= delta ? a * a : 2.0 * delta * a - delta * delta;
  }
  return 0.5 * c;
}

inline double huber_weight(double r, double delta) {
  const double a = std::abs(r);
  return (delta <= 0.0 || a <= delta) ? 1.0 : delta / a;
}

}  // namespace detail

/// Minimizes Σ_k ½ρ(‖r_k(x_k, y)‖²) over the block parameters x_k and the
/// shared parameters y. `evaluate(k, x_k, y, with_jacobian)` returns block k;
/// the Jacobians may be left empty when `with_jacobian` is false. Steps that
/// do not decrease the cost are rejected, so the returned cost never exceeds
/// the initial one.
template <int L, typename Evaluate>
LmSummary minimize_arrow(std::vector<Eigen::Matrix<double, L, 1>>& local, Eigen::VectorXd& shared,
                         Evaluate&& evaluate, const LmOptions& options) {
  using LocalVector = Eigen::Matrix<double, L, 1>;
  using LocalMatrix = Eigen::Matrix<double, L, L>;
  using Coupling = Eigen::Matrix<double, L, Eigen::Dynamic>;

  const std::size_t n = local.size();
  const Eigen::Index m = shared.size();
  const double delta = options.huber_delta;

  std::vector<LocalMatrix> Hkk(n);
  std::vector<Coupling> Hks(n);
  std::vector<LocalVector> gk(n);
  Eigen::MatrixXd Hss(m, m);
  Eigen::VectorXd gs(m);

  auto total_cost = [&](const std::vector<LocalVector>& x, const Eigen::VectorXd& y) {
    double c = 0.0;
    for (std::size_t k = 0; k < n; ++k) c += detail::robust_cost(evaluate(k, x[k], y, false).residuals, delta);
    return c;
  };

  auto linearize = [&]() {
    double c = 0.0;
    Hss.setZero();
    gs.setZero();
    for (std::size_t k = 0; k < n; ++k) {
      const ArrowBlock<L> b = evaluate(k, local[k], shared, true);
      c += detail::robust_cost(b.residuals, delta);
      Eigen::VectorXd w(b.residuals.size());
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = detail::huber_weight(b.residuals[i], delta);
      const Eigen::VectorXd wr = w.cwiseProduct(b.residuals);
      Hkk[k] = b.local_jacobian.transpose() * w.asDiagonal() * b.local_jacobian;
      gk[k] = b.local_jacobian.transpose() * wr;
      if (m > 0) {
        Hks[k] = b.local_jacobian.transpose() * w.asDiagonal() * b.shared_jacobian;
        Hss.noalias() += b.shared_jacobian.transpose() * w.asDiagonal() * b.shared_jacobian;
        gs.noalias() += b.shared_jacobian.transpose() * wr;
      }
    }
    return c;
  };

  LmSummary summary;
  double cost = linearize();
  summary.initial_cost = summary.final_cost = cost;
  if (!std::isfinite(cost)) return summary;

  auto damping_of = [](double h, double floor) { return std::max(h, floor); };
  double max_diag = m > 0 ? Hss.diagonal().maxCoeff() : 0.0;
  for (std::size_t k = 0; k < n; ++k) max_diag = std::max(max_diag, Hkk[k].diagonal().maxCoeff());
  // Damping is relative to diag(JᵀJ), so λ is dimensionless.
  double lambda = 1e-4;
  double nu = 2.0;

  std::vector<LocalVector> step_local(n), trial_local(n);
  std::vector<Coupling> AinvB(n);
  std::vector<LocalVector> Ainvg(n);
  std::vector<Eigen::LDLT<LocalMatrix>> factors(n);

  while (summary.iterations < options.max_iterations) {
    ++summary.iterations;
    if (cost == 0.0) {
      summary.converged = true;
      break;
    }
    const double floor = 1e-12 * std::max(max_diag, 1e-300);

    // Reduced system on the shared parameters.
    Eigen::MatrixXd S = Hss;
    Eigen::VectorXd rhs = -gs;
    Eigen::VectorXd Ds(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      Ds[i] = damping_of(Hss(i, i), floor);
      S(i, i) += lambda * Ds[i];
    }
    std::vector<LocalVector> Dk(n);
    for (std::size_t k = 0; k < n; ++k) {
      LocalMatrix A = Hkk[k];
      for (int i = 0; i < L; ++i) {
        Dk[k][i] = damping_of(Hkk[k](i, i), floor);
        A(i, i) += lambda * Dk[k][i];
      }
      factors[k].compute(A);
      Ainvg[k] = factors[k].solve(gk[k]);
      if (m > 0) {
        AinvB[k] = factors[k].solve(Hks[k]);
        S.noalias() -= Hks[k].transpose() * AinvB[k];
        rhs.noalias() += Hks[k].transpose() * Ainvg[k];
      }
    }
    Eigen::VectorXd step_shared = Eigen::VectorXd::Zero(m);
    if (m > 0) step_shared = S.ldlt().solve(rhs);
    double step_sq = step_shared.squaredNorm();
    double x_sq = shared.squaredNorm();
    for (std::size_t k = 0; k < n; ++k) {
      step_local[k] = -Ainvg[k];
      if (m > 0) step_local[k].noalias() -= AinvB[k] * step_shared;
      step_sq += step_local[k].squaredNorm();
      x_sq += local[k].squaredNorm();
    }
    const double step_norm = std::sqrt(step_sq);
    if (!std::isfinite(step_norm)) break;
    if (step_norm <= options.parameter_tolerance * (std::sqrt(x_sq) + options.parameter_tolerance)) {
      summary.converged = true;
      break;
    }

    // Decrease predicted by the damped linear model: ½ δᵀ(λDδ − g).
    double predicted = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      predicted += step_local[k].dot(lambda * Dk[k].cwiseProduct(step_local[k]) - gk[k]);
      trial_local[k] = local[k] + step_local[k];
    }
    if (m > 0) predicted += step_shared.dot(lambda * Ds.cwiseProduct(step_shared) - gs);
    predicted *= 0.5;
    const Eigen::VectorXd trial_shared = shared + step_shared;
    const double trial_cost = total_cost(trial_local, trial_shared);

    if (std::isfinite(trial_cost) && trial_cost < cost) {
      const double actual = cost - trial_cost;
      const double rho = predicted > 0.0 ? actual / predicted : 0.0;
      lambda *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
      nu = 2.0;
      local = trial_local;
      shared = trial_shared;
      const double previous = cost;
      cost = linearize();
      if (actual <= options.cost_tolerance * previous) {
        summary.converged = true;
        break;
      }
    } else {
      lambda *= nu;
      nu *= 2.0;
      if (lambda > 1e32) {
        // No descent direction left at machine precision.
        summary.converged = true;
        break;
      }
    }
  }
  summary.final_cost = cost;
  return summary;
}

}  // namespace bubblestream
