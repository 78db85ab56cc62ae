#pragma once

#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace radiodepth {

struct LbfgsOptions {
  int memory = 10;
  int max_iters = 200;
  /// Stop when the gradient infinity-norm falls below this.
  double gradient_tol = 1e-8;
  /// Stop when the relative cost decrease over one iteration is below this.
  double cost_tol = 1e-12;
  int max_line_search = 40;
  /// Armijo sufficient-decrease constant.
  double armijo = 1e-4;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double cost = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string stop_reason;
  std::vector<double> trace;
};

/// Returns the cost at x and writes its gradient.
using CostFunction = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

/// Limited-memory BFGS (two-loop recursion) with a backtracking Armijo line
/// search. Curvature pairs with s'y <= 0 are skipped, which keeps the
/// inverse-Hessian estimate positive definite on piecewise-smooth costs.
LbfgsResult minimize_lbfgs(const CostFunction& f, Eigen::VectorXd x0,
                           const LbfgsOptions& options = {});

}  // namespace radiodepth
