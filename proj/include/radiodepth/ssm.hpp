#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "radiodepth/geometry.hpp"
#include "radiodepth/lbfgs.hpp"

namespace radiodepth {

/// Shapes with point-to-point correspondence: shapes[s][p] is point p of shape s.
struct CorrespondedShapeSet {
  int object_id = 0;
  std::vector<std::vector<Vec3>> shapes;

  std::size_t point_count() const { return shapes.empty() ? 0 : shapes[0].size(); }
  /// Throws std::invalid_argument unless every shape has the same P >= 4 points.
  void validate() const;
};

/// Generalized Procrustes alignment (translation, optionally rotation, no
/// scaling) of every shape onto the evolving mean.
CorrespondedShapeSet procrustes_align(const CorrespondedShapeSet& set,
                                      bool allow_rotation = true, int iterations = 10);

/// Linear shape model s(theta) = mean + sum_i theta_i * mode_scales_i * modes.col(i),
/// with theta in standard-deviation units.
struct ShapeModel {
  int object_id = 0;
  /// Flattened P x 3 mean, point-major (x0, y0, z0, x1, ...).
  Eigen::VectorXd mean;
  /// 3P x N_theta, orthonormal columns.
  Eigen::MatrixXd modes;
  Eigen::VectorXd mode_scales;

  std::size_t point_count() const { return static_cast<std::size_t>(mean.size() / 3); }
  std::size_t mode_count() const { return static_cast<std::size_t>(modes.cols()); }
  std::vector<Vec3> instance(const Eigen::VectorXd& theta) const;
  /// Projection coefficients of a corresponded shape (least squares).
  Eigen::VectorXd coefficients(const std::vector<Vec3>& shape) const;
  /// Throws std::invalid_argument on non-orthonormal modes or bad scales.
  void validate() const;
};

/// PCA of the (pre-aligned) shapes. Throws std::invalid_argument when
/// n_modes > S - 1 or when a requested mode has zero variance.
ShapeModel build_ssm(const CorrespondedShapeSet& set, std::size_t n_modes);

enum class DistanceMode { bidirectional, target_to_model };
enum class RigidPrealign { centroid, none };

std::string to_string(DistanceMode m);
DistanceMode distance_mode_from_string(const std::string& name);

struct SsmFitConfig {
  double lambda_l2 = 0.01;
  /// Dilation of the target's bounding box used by the clip, mm.
  double clip_margin = 5.0;
  DistanceMode distance_mode = DistanceMode::bidirectional;
  LbfgsOptions lbfgs{10, 200, 1e-8};
  int restarts = 3;
  /// Standard deviation (SD units) of the seeded restart perturbations.
  double restart_sigma = 0.5;
  std::uint64_t seed = 0;
  RigidPrealign rigid_prealign = RigidPrealign::centroid;
  /// Clip-mask refreshes per restart.
  int max_outer = 8;

  void validate() const;
};

/// Model points inside the target's bounding box dilated by `margin`.
std::vector<std::uint8_t> clip_mask(std::span<const Vec3> model, std::span<const Vec3> target,
                                    double margin);
std::vector<Vec3> clip(std::span<const Vec3> model, std::span<const Vec3> target, double margin);

struct SsmCost {
  double value = 0.0;
  Eigen::VectorXd gradient;
  double distance = 0.0;
  double regularizer = 0.0;
  std::size_t clipped_points = 0;
  std::vector<std::string> warnings;
};

/// Clipped distance plus (lambda_l2 / N_theta) * |theta|^2, with its gradient
/// in theta. The model is used as given (no pre-alignment).
SsmCost ssm_cost(const ShapeModel& model, const Eigen::VectorXd& theta,
                 const PointCloud& target, const SsmFitConfig& cfg);

struct SsmFitResult {
  Eigen::VectorXd theta;
  /// s(theta*) plus the pre-alignment offset, unclipped.
  std::vector<Vec3> completed;
  Vec3 offset = Vec3::Zero();
  double cost = 0.0;
  double cost_at_zero = 0.0;
  std::vector<double> restart_costs;
  int best_restart = -1;  // -1: theta = 0 itself was best
  std::vector<std::string> warnings;
};

/// L-BFGS from theta = 0 and seeded perturbations; the lowest-cost run wins.
/// Throws NumericError when every restart fails.
SsmFitResult fit_ssm(const ShapeModel& model, const PointCloud& target,
                     const SsmFitConfig& cfg);

void save_ssm(const std::filesystem::path& path, const ShapeModel& model);
ShapeModel load_ssm(const std::filesystem::path& path);

}  // namespace radiodepth
