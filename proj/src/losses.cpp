#include "radiodepth/losses.hpp"

#include <cmath>

namespace radiodepth {

std::string to_string(LossVariant v) {
  switch (v) {
    case LossVariant::si_indep: return "si_indep";
    case LossVariant::si_dep: return "si_dep";
    case LossVariant::casi_indep: return "casi_indep";
    case LossVariant::casi_dep: return "casi_dep";
  }
  return "unknown";
}

std::string to_string(AlignmentScope s) {
  switch (s) {
    case AlignmentScope::per_map: return "per_map";
    case AlignmentScope::per_object: return "per_object";
    case AlignmentScope::global: return "global";
  }
  return "unknown";
}

LossVariant loss_variant_from_string(const std::string& name) {
  for (auto v : {LossVariant::si_indep, LossVariant::si_dep, LossVariant::casi_indep,
                 LossVariant::casi_dep})
    if (to_string(v) == name) return v;
  throw ConfigError("unknown loss variant '" + name + "'");
}

AlignmentScope alignment_scope_from_string(const std::string& name) {
  for (auto s : {AlignmentScope::per_map, AlignmentScope::per_object, AlignmentScope::global})
    if (to_string(s) == name) return s;
  throw ConfigError("unknown alignment scope '" + name + "'");
}

void LossConfig::validate() const {
  if (!(alpha > 0.0)) throw ConfigError("loss: alpha must be > 0");
  if (!(lambda_var >= 0.0 && lambda_var <= 1.0))
    throw ConfigError("loss: lambda_var must be in [0, 1]");
  if (!(epsilon > 0.0)) throw ConfigError("loss: epsilon must be > 0");
}

namespace {

// Per-map working state: valid pixel indices and the log residual there.
struct MapTerms {
  std::vector<std::size_t> pixels;
  std::vector<double> residual;
  // Center-aligned only: shifted prediction before the clamp.
  std::vector<double> shifted;
};

std::size_t group_of(std::size_t map, std::size_t map_count, AlignmentScope scope,
                     std::size_t maps_per_object) {
  switch (scope) {
    case AlignmentScope::per_map: return map;
    case AlignmentScope::per_object: return map / std::max<std::size_t>(1, maps_per_object);
    case AlignmentScope::global: return 0;
  }
  (void)map_count;
  return map;
}

std::vector<MapTerms> compute_terms(std::span<const DepthMap> pred,
                                    std::span<const DepthMap> gt, const LossConfig& cfg,
                                    std::size_t maps_per_object,
                                    std::vector<std::size_t>* group_index,
                                    std::vector<double>* group_count) {
  if (pred.size() != gt.size())
    throw std::invalid_argument("loss: prediction and ground truth map counts differ");
  const std::size_t N = pred.size();
  std::vector<MapTerms> terms(N);
  for (std::size_t j = 0; j < N; ++j) {
    if (pred[j].width() != gt[j].width() || pred[j].height() != gt[j].height())
      throw std::invalid_argument("loss: map " + std::to_string(j) + " shape mismatch");
    for (std::size_t i = 0; i < gt[j].size(); ++i) {
      if (!pred[j].valid(i) || !gt[j].valid(i)) continue;
      if (!(gt[j][i] > 0.0) || !(pred[j][i] > 0.0))
        throw std::domain_error("loss: non-positive valid depth in map " + std::to_string(j));
      terms[j].pixels.push_back(i);
    }
  }

  if (!cfg.center_aligned()) {
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t i : terms[j].pixels)
        terms[j].residual.push_back(std::log(pred[j][i]) - std::log(gt[j][i]));
    return terms;
  }

  // Center shift t(gt) - t(pred) per alignment group.
  std::size_t groups = 0;
  std::vector<std::size_t> gidx(N);
  for (std::size_t j = 0; j < N; ++j) {
    gidx[j] = group_of(j, N, cfg.alignment_scope, maps_per_object);
    groups = std::max(groups, gidx[j] + 1);
  }
  std::vector<std::vector<double>> gt_vals(groups), pred_vals(groups);
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t i : terms[j].pixels) {
      gt_vals[gidx[j]].push_back(gt[j][i]);
      pred_vals[gidx[j]].push_back(pred[j][i]);
    }
  std::vector<double> shift(groups, 0.0), count(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g) {
    count[g] = static_cast<double>(gt_vals[g].size());
    if (count[g] > 0)
      shift[g] = (pairwise_sum(gt_vals[g]) - pairwise_sum(pred_vals[g])) / count[g];
  }
  for (std::size_t j = 0; j < N; ++j) {
    for (std::size_t i : terms[j].pixels) {
      const double s = pred[j][i] + shift[gidx[j]];
      terms[j].shifted.push_back(s);
      terms[j].residual.push_back(std::log(std::max(s, 0.0) + cfg.epsilon) -
                                  std::log(gt[j][i] + cfg.epsilon));
    }
  }
  if (group_index) *group_index = std::move(gidx);
  if (group_count) *group_count = std::move(count);
  return terms;
}

// D = mean(r^2) - lambda * mean(r)^2, clamped at zero against round-off.
double variance_term(double s1, double s2, double t, double lambda) {
  return std::max(0.0, s2 / t - lambda * (s1 / t) * (s1 / t));
}

}  // namespace

LossResult evaluate_loss(std::span<const DepthMap> pred, std::span<const DepthMap> gt,
                         const LossConfig& cfg, std::size_t maps_per_object) {
  cfg.validate();
  std::vector<std::size_t> gidx;
  std::vector<double> gcount;
  auto terms = compute_terms(pred, gt, cfg, maps_per_object, &gidx, &gcount);
  const std::size_t N = terms.size();

  LossResult out;
  out.per_map_values.assign(N, std::nan(""));
  out.valid_counts.resize(N);
  out.gradient.reserve(N);
  for (std::size_t j = 0; j < N; ++j) {
    out.gradient.emplace_back(pred[j].width(), pred[j].height(), 0.0);
    out.valid_counts[j] = terms[j].pixels.size();
  }

  std::vector<double> s1(N, 0.0), s2(N, 0.0);
  std::size_t used = 0;
  for (std::size_t j = 0; j < N; ++j) {
    if (terms[j].pixels.empty()) {
      out.warnings.push_back("map " + std::to_string(j) + " has no valid pixels; skipped");
      continue;
    }
    ++used;
    std::vector<double> sq(terms[j].residual.size());
    for (std::size_t p = 0; p < sq.size(); ++p) sq[p] = terms[j].residual[p] * terms[j].residual[p];
    s1[j] = pairwise_sum(terms[j].residual);
    s2[j] = pairwise_sum(sq);
    const double t = static_cast<double>(terms[j].pixels.size());
    out.per_map_values[j] = cfg.alpha * std::sqrt(variance_term(s1[j], s2[j], t, cfg.lambda_var));
  }
  if (used == 0) throw std::domain_error("loss: every map has an empty valid set");

  // dL/dr per map, stored in place of the residual scale factors.
  std::vector<double> coef(N, 0.0), mean_shift(N, 0.0);
  if (cfg.pooled()) {
    double T = 0.0;
    for (std::size_t j = 0; j < N; ++j) T += static_cast<double>(terms[j].pixels.size());
    const double S1 = pairwise_sum(s1);
    const double S2 = pairwise_sum(s2);
    const double D = variance_term(S1, S2, T, cfg.lambda_var);
    out.value = cfg.alpha * std::sqrt(D);
    if (D > 0.0)
      for (std::size_t j = 0; j < N; ++j) {
        coef[j] = cfg.alpha / (T * std::sqrt(D));
        mean_shift[j] = cfg.lambda_var * S1 / T;
      }
  } else {
    std::vector<double> roots;
    for (std::size_t j = 0; j < N; ++j) {
      if (terms[j].pixels.empty()) continue;
      const double t = static_cast<double>(terms[j].pixels.size());
      const double D = variance_term(s1[j], s2[j], t, cfg.lambda_var);
      roots.push_back(std::sqrt(D));
      if (D > 0.0) {
        coef[j] = cfg.alpha / (static_cast<double>(used) * t * std::sqrt(D));
        mean_shift[j] = cfg.lambda_var * s1[j] / t;
      }
    }
    out.value = cfg.alpha / static_cast<double>(used) * pairwise_sum(roots);
  }

  if (!cfg.center_aligned()) {
    for (std::size_t j = 0; j < N; ++j)
      for (std::size_t p = 0; p < terms[j].pixels.size(); ++p) {
        const std::size_t i = terms[j].pixels[p];
        const double dr = coef[j] * (terms[j].residual[p] - mean_shift[j]);
        out.gradient[j][i] = dr / pred[j][i];
      }
    return out;
  }

  // Center-aligned chain rule: d h_i / d pred_k = a_i (delta_ik - 1/T_group),
  // a_i = 1 / (shifted_i + eps) where the clamp is inactive, 0 otherwise.
  const std::size_t groups = gcount.size();
  std::vector<std::vector<double>> w(N);
  std::vector<std::vector<double>> group_w(groups);
  for (std::size_t j = 0; j < N; ++j) {
    w[j].resize(terms[j].pixels.size());
    for (std::size_t p = 0; p < w[j].size(); ++p) {
      const double s = terms[j].shifted[p];
      const double a = s > 0.0 ? 1.0 / (s + cfg.epsilon) : 0.0;
      w[j][p] = coef[j] * (terms[j].residual[p] - mean_shift[j]) * a;
      group_w[gidx[j]].push_back(w[j][p]);
    }
  }
  std::vector<double> group_mean(groups, 0.0);
  for (std::size_t g = 0; g < groups; ++g)
    if (gcount[g] > 0) group_mean[g] = pairwise_sum(group_w[g]) / gcount[g];
  for (std::size_t j = 0; j < N; ++j)
    for (std::size_t p = 0; p < w[j].size(); ++p)
      out.gradient[j][terms[j].pixels[p]] = w[j][p] - group_mean[gidx[j]];
  return out;
}

LossResult si_loss(const DepthMap& pred, const DepthMap& gt, const LossConfig& cfg) {
  LossConfig c = cfg;
  c.variant = LossVariant::si_indep;
  auto r = evaluate_loss(std::span(&pred, 1), std::span(&gt, 1), c, 1);
  if (!r.warnings.empty()) throw std::domain_error("si_loss: empty valid set");
  return r;
}

namespace {
LossResult run_variant(const DepthMapSet& pred, const DepthMapSet& gt, LossConfig cfg,
                       LossVariant v) {
  cfg.variant = v;
  return evaluate_loss(pred.maps, gt.maps, cfg, 2);
}
}  // namespace

LossResult si_indep(const DepthMapSet& p, const DepthMapSet& g, LossConfig cfg) {
  return run_variant(p, g, cfg, LossVariant::si_indep);
}
LossResult si_dep(const DepthMapSet& p, const DepthMapSet& g, LossConfig cfg) {
  return run_variant(p, g, cfg, LossVariant::si_dep);
}
LossResult casi_indep(const DepthMapSet& p, const DepthMapSet& g, LossConfig cfg) {
  return run_variant(p, g, cfg, LossVariant::casi_indep);
}
LossResult casi_dep(const DepthMapSet& p, const DepthMapSet& g, LossConfig cfg) {
  return run_variant(p, g, cfg, LossVariant::casi_dep);
}

std::vector<DepthMap> casi_errors(std::span<const DepthMap> pred,
                                  std::span<const DepthMap> gt, const LossConfig& cfg,
                                  std::size_t maps_per_object) {
  cfg.validate();
  LossConfig c = cfg;
  if (!c.center_aligned()) c.variant = LossVariant::casi_indep;
  auto terms = compute_terms(pred, gt, c, maps_per_object, nullptr, nullptr);
  std::vector<DepthMap> out;
  for (std::size_t j = 0; j < terms.size(); ++j) {
    DepthMap h(pred[j].width(), pred[j].height());
    for (std::size_t p = 0; p < terms[j].pixels.size(); ++p)
      h[terms[j].pixels[p]] = terms[j].residual[p];
    out.push_back(std::move(h));
  }
  return out;
}

DepthMap casi_error(const DepthMap& pred, const DepthMap& gt, const LossConfig& cfg) {
  auto maps = casi_errors(std::span(&pred, 1), std::span(&gt, 1), cfg, 1);
  if (maps[0].valid_count() == 0) throw std::domain_error("casi_error: empty valid set");
  return std::move(maps[0]);
}

}  // namespace radiodepth
