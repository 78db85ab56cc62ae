#include "radiodepth/lbfgs.hpp"

#include <cmath>
#include <deque>

#include "radiodepth/common.hpp"

namespace radiodepth {

LbfgsResult minimize_lbfgs(const CostFunction& f, Eigen::VectorXd x0,
                           const LbfgsOptions& options) {
  LbfgsResult r;
  r.x = std::move(x0);
  Eigen::VectorXd g(r.x.size());
  r.cost = f(r.x, g);
  r.evaluations = 1;
  if (!std::isfinite(r.cost) || !g.allFinite())
    throw NumericError("lbfgs: non-finite cost or gradient at the starting point");
  r.trace.push_back(r.cost);

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  Eigen::VectorXd x_new(r.x.size()), g_new(r.x.size());

  for (int it = 0; it < options.max_iters; ++it) {
    if (g.size() == 0 || g.lpNorm<Eigen::Infinity>() < options.gradient_tol) {
      r.converged = true;
      r.stop_reason = "gradient tolerance";
      return r;
    }

    // Two-loop recursion for d = -H g.
    Eigen::VectorXd q = g;
    std::vector<double> alpha(s_hist.size());
    for (std::size_t i = s_hist.size(); i-- > 0;) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    Eigen::VectorXd d = gamma * q;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(d);
      d += (alpha[i] - beta) * s_hist[i];
    }
    d = -d;
    double slope = g.dot(d);
    if (!(slope < 0.0)) {
      // Not a descent direction: restart from steepest descent.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      d = -g;
      slope = -g.squaredNorm();
    }

    // First iteration: unit-length step along the gradient.
    double step = s_hist.empty() ? std::min(1.0, 1.0 / d.norm()) : 1.0;
    double cost_new = 0.0;
    bool accepted = false;
    for (int ls = 0; ls < options.max_line_search; ++ls) {
      x_new = r.x + step * d;
      cost_new = f(x_new, g_new);
      ++r.evaluations;
      if (std::isfinite(cost_new) && g_new.allFinite() &&
          cost_new <= r.cost + options.armijo * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    r.iterations = it + 1;
    if (!accepted) {
      r.converged = true;
      r.stop_reason = "line search made no progress";
      return r;
    }

    const Eigen::VectorXd s = x_new - r.x;
    const Eigen::VectorXd y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(s);
      y_hist.push_back(y);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > options.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double previous = r.cost;
    r.x = x_new;
    g = g_new;
    r.cost = cost_new;
    r.trace.push_back(r.cost);
    if (previous - cost_new <= options.cost_tol * std::max(1.0, std::abs(previous))) {
      r.converged = true;
      r.stop_reason = "cost tolerance";
      return r;
    }
  }
  r.stop_reason = "iteration limit";
  return r;
}

}  // namespace radiodepth
