#pragma once

#include <span>
#include <string>
#include <vector>

#include "radiodepth/geometry.hpp"

namespace radiodepth {

enum class LossVariant { si_indep, si_dep, casi_indep, casi_dep };
enum class AlignmentScope { per_map, per_object, global };

std::string to_string(LossVariant v);
std::string to_string(AlignmentScope s);
/// Throw ConfigError on unknown names.
LossVariant loss_variant_from_string(const std::string& name);
AlignmentScope alignment_scope_from_string(const std::string& name);

struct LossConfig {
  double alpha = 10.0;
  double lambda_var = 0.85;
  /// Safeguard inside the center-aligned logarithms, mm.
  double epsilon = 1e-6;
  LossVariant variant = LossVariant::casi_indep;
  /// Which maps share one center shift in the center-aligned variants.
  AlignmentScope alignment_scope = AlignmentScope::per_object;

  /// Throws ConfigError.
  void validate() const;
  bool center_aligned() const {
    return variant == LossVariant::casi_indep || variant == LossVariant::casi_dep;
  }
  bool pooled() const {
    return variant == LossVariant::si_dep || variant == LossVariant::casi_dep;
  }
};

struct LossResult {
  double value = 0.0;
  /// dL/d(pred) per map, zero on pixels outside the valid set.
  std::vector<DepthMap> gradient;
  /// alpha * sqrt(D) of each map on its own; NaN for skipped maps.
  std::vector<double> per_map_values;
  /// Valid pixel count per map (intersection of both masks).
  std::vector<std::size_t> valid_counts;
  std::vector<std::string> warnings;
};

/// Any of the four variants over N paired maps. Consecutive runs of
/// `maps_per_object` maps form one object for per_object alignment.
/// Maps with an empty valid set are skipped and reported in warnings.
/// Throws std::domain_error when every map is empty or a valid depth is
/// non-positive, std::invalid_argument on shape mismatches.
LossResult evaluate_loss(std::span<const DepthMap> pred, std::span<const DepthMap> gt,
                         const LossConfig& cfg, std::size_t maps_per_object = 2);

/// Single-map scale-invariant loss.
LossResult si_loss(const DepthMap& pred, const DepthMap& gt, const LossConfig& cfg);

/// Averaged per-map losses and the pooled (pixel-dependent) generalization.
LossResult si_indep(const DepthMapSet& pred, const DepthMapSet& gt, LossConfig cfg);
LossResult si_dep(const DepthMapSet& pred, const DepthMapSet& gt, LossConfig cfg);
LossResult casi_indep(const DepthMapSet& pred, const DepthMapSet& gt, LossConfig cfg);
LossResult casi_dep(const DepthMapSet& pred, const DepthMapSet& gt, LossConfig cfg);

/// Center-aligned log error h for every map; NaN outside each map's valid set.
std::vector<DepthMap> casi_errors(std::span<const DepthMap> pred,
                                  std::span<const DepthMap> gt, const LossConfig& cfg,
                                  std::size_t maps_per_object = 2);
/// Single map aligned on its own valid pixels.
DepthMap casi_error(const DepthMap& pred, const DepthMap& gt, const LossConfig& cfg);

}  // namespace radiodepth
