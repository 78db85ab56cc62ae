#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "radiodepth/geometry.hpp"
#include "radiodepth/losses.hpp"
#include "radiodepth/phantom.hpp"

namespace radiodepth {

// ---------------------------------------------------------------------------
// Direct per-pixel optimization

enum class InitKind { gt_plus_noise, constant };

struct FitConfig {
  LossConfig loss;
  int max_iters = 5000;
  /// Multiplier on the Polyak step; values in (0, 2) converge.
  double learning_rate = 1.0;
  InitKind init = InitKind::gt_plus_noise;
  /// Noise sigma (gt_plus_noise) in mm.
  double init_sigma = 20.0;
  /// Initial depth (constant) in mm, or a constant offset added to gt when
  /// init is gt_plus_noise.
  double init_constant = 0.0;
  std::uint64_t rng_seed = 0;
  /// Stops once the loss falls to this value.
  double convergence_tol = 1e-11;

  void validate() const;
};

struct FitResult {
  DepthMapSet depth;
  /// Loss before each iteration, then the final loss.
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

/// Gradient descent on per-pixel log-depth toward `target`, whose validity
/// masks are kept fixed. The step is the Polyak step lr * L / |grad L|^2,
/// exploiting that the supervised minimum is L = 0.
/// Throws NumericError with the iteration index if the loss turns non-finite.
FitResult optimize_depth(const DepthMapSet& target, const FitConfig& cfg);

// ---------------------------------------------------------------------------
// Patch regressor

/// Per-pixel MLP: (2k+1)^2 radiograph patch (as line integrals) plus
/// normalized pixel coordinates -> softplus hidden layers -> one log-depth
/// per output map.
struct PatchRegressor {
  int patch_radius = 2;
  std::vector<int> hidden{64, 64};
  std::vector<int> object_ids;
  /// Two outputs per object (front, back) when true, front only otherwise.
  bool dual_face = true;
  int width = 0;
  int height = 0;
  std::uint64_t seed = 0;
  LossConfig loss;
  /// weights[l] is (out x in); biases[l] has `out` entries.
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;

  int input_size() const { return (2 * patch_radius + 1) * (2 * patch_radius + 1) + 2; }
  int output_size() const {
    return static_cast<int>(object_ids.size()) * (dual_face ? 2 : 1);
  }
  std::size_t parameter_count() const;
  std::vector<double> parameters() const;
  void set_parameters(std::span<const double> values);
};

struct TrainingSample {
  DepthMap radiograph;
  DepthMapSet gt;
  LabelMask mask;
};

struct TrainConfig {
  LossConfig loss;
  int patch_radius = 2;
  std::vector<int> hidden{64, 64};
  int epochs = 200;
  double learning_rate = 0.02;
  int batch_size = 1;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 5.0;
  bool dual_face = true;
  std::uint64_t rng_seed = 0;

  void validate() const;
};

struct TrainResult {
  PatchRegressor model;
  /// Dataset loss before training, then the mean minibatch loss per epoch.
  std::vector<double> curve;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Seeded initialization; output biases start at the mean log-depth of each
/// map over the training set.
PatchRegressor init_regressor(std::span<const TrainingSample> data, const TrainConfig& cfg);

/// Mean loss over the batch and its gradient, shaped like the model.
double batch_loss_and_gradient(const PatchRegressor& model,
                               std::span<const TrainingSample> batch,
                               std::vector<double>* gradient);

/// Minibatch SGD with a fixed learning rate. Throws std::invalid_argument
/// on fewer than two scenes or mixed geometries, NumericError on a
/// non-finite loss.
TrainResult train_regressor(std::span<const TrainingSample> data, const TrainConfig& cfg);

/// Depths exp(network output) on pixels labelled for each object; all other
/// pixels are invalid. Back depths are raised to the front depth where the
/// two outputs cross. A front-only model leaves the back maps invalid.
DepthMapSet predict(const PatchRegressor& model, const ImagingGeometry& geometry,
                    const DepthMap& radiograph, const LabelMask& mask);

TrainingSample make_training_sample(const GroundTruth& gt);

void save_regressor(const std::filesystem::path& path, const PatchRegressor& model);
PatchRegressor load_regressor(const std::filesystem::path& path);

}  // namespace radiodepth
