#pragma once

#include <cmath>
#include <utility>

#include <Eigen/Dense>

namespace salutary {

struct CgResult {
  Eigen::VectorXd x;
  double relative_residual = 0.0;  // ||b - A x|| / ||b||, recomputed on exit
  int iterations = 0;
  bool converged = false;
};

// Conjugate gradient for a symmetric positive definite operator given as a
// callable v -> A v. Stops when the true relative residual is <= rel_tol;
// when the recursive residual drifts from the true one the iteration is
// restarted from the current iterate.
template <class Operator>
CgResult conjugate_gradient(Operator&& apply, const Eigen::VectorXd& b, double rel_tol,
                            int max_iterations, const Eigen::VectorXd* x0 = nullptr) {
  CgResult out;
  const double b_norm = b.norm();
  out.x = x0 != nullptr ? *x0 : Eigen::VectorXd::Zero(b.size());
  if (b_norm == 0.0) {
    out.x.setZero();
    out.converged = true;
    return out;
  }
  const double target = rel_tol * b_norm;

  Eigen::VectorXd r = x0 != nullptr ? Eigen::VectorXd(b - apply(out.x)) : b;
  Eigen::VectorXd p = r;
  double rr = r.squaredNorm();
  Eigen::VectorXd best_x = out.x;
  double best_res = std::sqrt(rr);

  while (out.iterations < max_iterations) {
    if (std::sqrt(rr) <= target) {
      r = b - apply(out.x);
      rr = r.squaredNorm();
      if (std::sqrt(rr) <= target) break;
      p = r;
    }
    const Eigen::VectorXd ap = apply(p);
    const double pap = p.dot(ap);
    if (!(pap > 0.0)) break;  // lost positive definiteness numerically
    const double alpha = rr / pap;
    out.x += alpha * p;
    r -= alpha * ap;
    const double rr_next = r.squaredNorm();
    p = r + (rr_next / rr) * p;
    rr = rr_next;
    ++out.iterations;
    if (std::sqrt(rr) < best_res) {
      best_res = std::sqrt(rr);
      best_x = out.x;
    }
  }

  const double true_res = (b - apply(out.x)).norm();
  out.relative_residual = true_res / b_norm;
  out.converged = true_res <= target;
  if (!out.converged) {
    const double best_true = (b - apply(best_x)).norm();
    if (best_true < true_res) {
      out.x = best_x;
      out.relative_residual = best_true / b_norm;
    }
  }
  return out;
}

}  // namespace salutary
