#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "radiodepth/depthfit.hpp"
#include "radiodepth/geometry.hpp"
#include "radiodepth/losses.hpp"
#include "radiodepth/phantom.hpp"
#include "radiodepth/ssm.hpp"

namespace radiodepth {

struct SsmStageConfig {
  bool enabled = true;
  /// Scenes sampled (from their own seed stream) to build each object's model.
  int training_shapes = 24;
  /// Approximate corresponded points per object.
  int points = 800;
  int n_modes = 8;
  /// "procrustes" (translation + rotation), "translation", or "none".
  std::string alignment = "procrustes";
  SsmFitConfig fit;
  DistanceMode dual_distance = DistanceMode::bidirectional;
  DistanceMode single_distance = DistanceMode::target_to_model;
  /// Reconstructed clouds are subsampled to at most this many points before fitting.
  int max_target_points = 1500;
};

struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::filesystem::path output_dir = "radiodepth_out";
  ImagingGeometry geometry = ImagingGeometry::centered(128, 128, 3.2, 1000.0);
  std::string template_name = "hip-like";
  int scenes = 16;
  int folds = 4;
  JitterParams jitter = JitterParams::typical();
  /// Radiograph noise sigma (intensity units).
  double noise_sigma = 0.002;
  std::vector<LossVariant> variants{LossVariant::si_indep, LossVariant::casi_indep,
                                    LossVariant::casi_dep};
  /// Adds a front-face-only si_indep run.
  bool single_face_baseline = true;
  TrainConfig train;
  /// Depth-center restoration for center-aligned predictions: "train-mean" or "none".
  std::string casi_center = "train-mean";
  SsmStageConfig ssm;
  std::size_t emd_cap = 256;
  int gt_surface_points = 4000;

  void validate() const;
};

/// Throws ConfigError on unknown keys, bad types or invalid values.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
nlohmann::json experiment_config_to_json(const ExperimentConfig& cfg);

/// Scene i: fold i % folds; deformed when (i / folds) is odd, so every fold
/// holds both subgroups.
int scene_fold(const ExperimentConfig& cfg, int scene);
bool scene_deformed(const ExperimentConfig& cfg, int scene);
std::string object_class(const std::string& template_name, int object_id);

struct PipelineOutputs {
  std::filesystem::path metrics_csv;
  std::filesystem::path summary_json;
  nlohmann::json summary;
  std::vector<std::string> warnings;
};

/// Phantoms -> training per fold -> prediction -> back-projection -> SSM
/// completion -> metrics. Stage failures are rethrown with the stage name;
/// artifacts written so far are kept.
PipelineOutputs run_pipeline(const ExperimentConfig& cfg);

struct CompareRow {
  std::string key;
  double a = 0.0;
  double b = 0.0;
  double delta = 0.0;  // b - a
  bool improved = false;
};

/// Per-metric deltas between two summaries. Throws ValidationError when the
/// metric sets differ.
std::vector<CompareRow> compare_report(const nlohmann::json& a, const nlohmann::json& b);

struct FileDiagnostic {
  std::filesystem::path path;
  std::string kind;
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

/// Checks DMAP, PLY, model and summary files. Never throws for bad content.
std::vector<FileDiagnostic> validate_files(const std::vector<std::filesystem::path>& paths);

}  // namespace radiodepth
