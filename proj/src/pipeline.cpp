#include "radiodepth/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "radiodepth/common.hpp"
#include "radiodepth/io.hpp"
#include "radiodepth/metrics.hpp"

namespace radiodepth {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return it.key() == k; });
    if (!known) throw ConfigError("unknown config key '" + where + "." + it.key() + "'");
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

std::string padded(int i, int width = 2) {
  std::string s = std::to_string(i);
  return std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(s.size()))),
                     '0') + s;
}

std::string fixed2(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Rethrow with the stage name, keeping the exception type for exit codes.
template <class F>
auto stage(const std::string& name, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    throw ConfigError("stage " + name + ": " + e.what());
  } catch (const NumericError& e) {
    throw NumericError("stage " + name + ": " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError("stage " + name + ": " + e.what());
  } catch (const std::domain_error& e) {
    throw NumericError("stage " + name + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("stage " + name + ": " + e.what());
  }
}

struct Run {
  std::string name;
  LossVariant variant;
  bool dual_face;
};

struct Record {
  std::string run;
  int fold = 0;
  int scene = 0;
  bool deformed = false;
  int object_id = 0;
  std::string stage;  // point_cloud | completion
  SurfaceMetricReport surface;
  double mae = NAN, rmse = NAN;
  double volume_pred = NAN, volume_true = NAN;
};

PointCloud object_cloud(const ImagingGeometry& geom, const DepthMapSet& set, std::size_t k,
                        bool dual) {
  PointCloud c = backproject(geom, set.front(k), set.object_ids[k]);
  if (dual) c.append(backproject(geom, set.back(k), set.object_ids[k]));
  return c;
}

// Mean valid depth of one object's maps (front, plus back when dual).
double depth_center(const DepthMapSet& set, std::size_t k, bool dual) {
  std::vector<double> v;
  for (int face = 0; face < (dual ? 2 : 1); ++face) {
    const DepthMap& m = set.maps[2 * k + face];
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m.valid(i)) v.push_back(m[i]);
  }
  if (v.empty()) return NAN;
  return pairwise_sum(v) / static_cast<double>(v.size());
}

PointCloud subsample(const PointCloud& c, std::size_t cap, std::uint64_t seed) {
  if (c.size() <= cap) return c;
  PointCloud out;
  for (std::size_t i : subsample_indices(c.size(), cap, seed)) {
    out.points.push_back(c.points[i]);
    if (c.has_labels()) out.object_ids.push_back(c.object_ids[i]);
  }
  return out;
}

double mean_of(const std::vector<double>& v) {
  return pairwise_sum(v) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  std::vector<double> sq(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) sq[i] = (v[i] - m) * (v[i] - m);
  return std::sqrt(pairwise_sum(sq) / static_cast<double>(v.size() - 1));
}

json summary_row(const std::string& run, const std::string& stage_name, const std::string& group,
                 const std::string& metric, const std::vector<double>& values) {
  const double m = mean_of(values);
  const double s = sample_std(values);
  return {{"key", run + "/" + stage_name + "/" + group + "/" + metric},
          {"run", run},
          {"stage", stage_name},
          {"group", group},
          {"metric", metric},
          {"mean", m},
          {"std", s},
          {"n", values.size()},
          {"text", fixed2(m) + "(" + fixed2(s) + ")"}};
}

}  // namespace

int scene_fold(const ExperimentConfig& cfg, int scene) { return scene % cfg.folds; }

bool scene_deformed(const ExperimentConfig& cfg, int scene) {
  return (scene / cfg.folds) % 2 == 1;
}

std::string object_class(const std::string& template_name, int object_id) {
  if (template_name == "hip-like") return object_id <= 2 ? "pelvis" : "femur";
  return "blob";
}

void ExperimentConfig::validate() const {
  try {
    geometry.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("geometry: ") + e.what());
  }
  if (template_name != "hip-like" && template_name != "random-blobs")
    throw ConfigError("unknown phantom template '" + template_name + "'");
  if (folds < 2) throw ConfigError("folds must be >= 2");
  if (scenes < folds) throw ConfigError("scenes must be >= folds");
  if (scenes - (scenes + folds - 1) / folds < 2)
    throw ConfigError("every fold needs at least two training scenes");
  jitter.validate();
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (variants.empty() && !single_face_baseline) throw ConfigError("no runs configured");
  std::set<LossVariant> seen;
  for (auto v : variants)
    if (!seen.insert(v).second) throw ConfigError("duplicate variant " + to_string(v));
  train.validate();
  if (casi_center != "train-mean" && casi_center != "none")
    throw ConfigError("casi_center must be 'train-mean' or 'none'");
  if (ssm.enabled) {
    ssm.fit.validate();
    if (ssm.training_shapes < 2) throw ConfigError("ssm.training_shapes must be >= 2");
    if (ssm.n_modes < 0 || ssm.n_modes > ssm.training_shapes - 1)
      throw ConfigError("ssm.n_modes must be in [0, training_shapes - 1]");
    if (ssm.points < 4) throw ConfigError("ssm.points must be >= 4");
    if (ssm.alignment != "procrustes" && ssm.alignment != "translation" &&
        ssm.alignment != "none")
      throw ConfigError("ssm.alignment must be procrustes, translation or none");
    if (ssm.max_target_points < 1) throw ConfigError("ssm.max_target_points must be >= 1");
  }
  if (emd_cap < 1) throw ConfigError("metrics.emd_cap must be >= 1");
  if (gt_surface_points < 1) throw ConfigError("metrics.gt_surface_points must be >= 1");
}

ExperimentConfig experiment_config_from_json(const json& j) {
  ExperimentConfig c;
  check_keys(j,
             {"seed", "output_dir", "geometry", "resolution", "template", "scenes", "folds",
              "jitter", "noise_sigma", "variants", "single_face_baseline", "train", "loss",
              "casi_center", "ssm", "metrics"},
             "config");
  read_opt(j, "seed", c.seed, "config");
  std::string out_dir = c.output_dir.string();
  read_opt(j, "output_dir", out_dir, "config");
  c.output_dir = out_dir;
  if (j.contains("geometry") && j.contains("resolution"))
    throw ConfigError("config: give either geometry or resolution, not both");
  if (j.contains("geometry")) c.geometry = geometry_from_json(j.at("geometry"));
  if (j.contains("resolution")) {
    int res = 0;
    read_opt(j, "resolution", res, "config");
    if (res < 8) throw ConfigError("config.resolution must be >= 8");
    // Same 409.6 mm detector at any resolution.
    c.geometry = ImagingGeometry::centered(res, res, 409.6 / res, 1000.0);
  }
  read_opt(j, "template", c.template_name, "config");
  read_opt(j, "scenes", c.scenes, "config");
  read_opt(j, "folds", c.folds, "config");
  if (j.contains("jitter")) {
    const json& jj = j.at("jitter");
    check_keys(jj, {"translation_mm", "rotation_deg", "scale", "shape", "deformation"},
               "jitter");
    read_opt(jj, "translation_mm", c.jitter.translation_mm, "jitter");
    read_opt(jj, "rotation_deg", c.jitter.rotation_deg, "jitter");
    read_opt(jj, "scale", c.jitter.scale, "jitter");
    read_opt(jj, "shape", c.jitter.shape, "jitter");
    read_opt(jj, "deformation", c.jitter.deformation, "jitter");
  }
  read_opt(j, "noise_sigma", c.noise_sigma, "config");
  if (j.contains("variants")) {
    std::vector<std::string> names;
    read_opt(j, "variants", names, "config");
    c.variants.clear();
    for (const auto& n : names) c.variants.push_back(loss_variant_from_string(n));
  }
  read_opt(j, "single_face_baseline", c.single_face_baseline, "config");
  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t,
               {"epochs", "learning_rate", "hidden", "patch_radius", "batch_size", "grad_clip"},
               "train");
    read_opt(t, "epochs", c.train.epochs, "train");
    read_opt(t, "learning_rate", c.train.learning_rate, "train");
    read_opt(t, "hidden", c.train.hidden, "train");
    read_opt(t, "patch_radius", c.train.patch_radius, "train");
    read_opt(t, "batch_size", c.train.batch_size, "train");
    read_opt(t, "grad_clip", c.train.grad_clip, "train");
  }
  if (j.contains("loss")) {
    const json& l = j.at("loss");
    check_keys(l, {"alpha", "lambda_var", "epsilon", "alignment_scope"}, "loss");
    read_opt(l, "alpha", c.train.loss.alpha, "loss");
    read_opt(l, "lambda_var", c.train.loss.lambda_var, "loss");
    read_opt(l, "epsilon", c.train.loss.epsilon, "loss");
    std::string scope = to_string(c.train.loss.alignment_scope);
    read_opt(l, "alignment_scope", scope, "loss");
    c.train.loss.alignment_scope = alignment_scope_from_string(scope);
  }
  read_opt(j, "casi_center", c.casi_center, "config");
  if (j.contains("ssm")) {
    const json& s = j.at("ssm");
    check_keys(s,
               {"enabled", "training_shapes", "points", "n_modes", "alignment", "lambda_l2",
                "clip_margin", "restarts", "restart_sigma", "max_iters", "max_outer",
                "dual_distance", "single_distance", "max_target_points", "rigid_prealign"},
               "ssm");
    read_opt(s, "enabled", c.ssm.enabled, "ssm");
    read_opt(s, "training_shapes", c.ssm.training_shapes, "ssm");
    read_opt(s, "points", c.ssm.points, "ssm");
    read_opt(s, "n_modes", c.ssm.n_modes, "ssm");
    read_opt(s, "alignment", c.ssm.alignment, "ssm");
    read_opt(s, "lambda_l2", c.ssm.fit.lambda_l2, "ssm");
    read_opt(s, "clip_margin", c.ssm.fit.clip_margin, "ssm");
    read_opt(s, "restarts", c.ssm.fit.restarts, "ssm");
    read_opt(s, "restart_sigma", c.ssm.fit.restart_sigma, "ssm");
    read_opt(s, "max_iters", c.ssm.fit.lbfgs.max_iters, "ssm");
    read_opt(s, "max_outer", c.ssm.fit.max_outer, "ssm");
    read_opt(s, "max_target_points", c.ssm.max_target_points, "ssm");
    std::string name;
    if (s.contains("dual_distance")) {
      read_opt(s, "dual_distance", name, "ssm");
      c.ssm.dual_distance = distance_mode_from_string(name);
    }
    if (s.contains("single_distance")) {
      read_opt(s, "single_distance", name, "ssm");
      c.ssm.single_distance = distance_mode_from_string(name);
    }
    if (s.contains("rigid_prealign")) {
      read_opt(s, "rigid_prealign", name, "ssm");
      if (name == "centroid")
        c.ssm.fit.rigid_prealign = RigidPrealign::centroid;
      else if (name == "none")
        c.ssm.fit.rigid_prealign = RigidPrealign::none;
      else
        throw ConfigError("ssm.rigid_prealign must be centroid or none");
    }
  }
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    check_keys(m, {"emd_cap", "gt_surface_points"}, "metrics");
    read_opt(m, "emd_cap", c.emd_cap, "metrics");
    read_opt(m, "gt_surface_points", c.gt_surface_points, "metrics");
  }
  c.validate();
  return c;
}

json experiment_config_to_json(const ExperimentConfig& c) {
  json variants = json::array();
  for (auto v : c.variants) variants.push_back(to_string(v));
  return {
      {"seed", c.seed},
      {"output_dir", c.output_dir.string()},
      {"geometry", geometry_to_json(c.geometry)},
      {"template", c.template_name},
      {"scenes", c.scenes},
      {"folds", c.folds},
      {"jitter",
       {{"translation_mm", c.jitter.translation_mm},
        {"rotation_deg", c.jitter.rotation_deg},
        {"scale", c.jitter.scale},
        {"shape", c.jitter.shape},
        {"deformation", c.jitter.deformation}}},
      {"noise_sigma", c.noise_sigma},
      {"variants", variants},
      {"single_face_baseline", c.single_face_baseline},
      {"train",
       {{"epochs", c.train.epochs},
        {"learning_rate", c.train.learning_rate},
        {"hidden", c.train.hidden},
        {"patch_radius", c.train.patch_radius},
        {"batch_size", c.train.batch_size},
        {"grad_clip", c.train.grad_clip}}},
      {"loss",
       {{"alpha", c.train.loss.alpha},
        {"lambda_var", c.train.loss.lambda_var},
        {"epsilon", c.train.loss.epsilon},
        {"alignment_scope", to_string(c.train.loss.alignment_scope)}}},
      {"casi_center", c.casi_center},
      {"ssm",
       {{"enabled", c.ssm.enabled},
        {"training_shapes", c.ssm.training_shapes},
        {"points", c.ssm.points},
        {"n_modes", c.ssm.n_modes},
        {"alignment", c.ssm.alignment},
        {"lambda_l2", c.ssm.fit.lambda_l2},
        {"clip_margin", c.ssm.fit.clip_margin},
        {"restarts", c.ssm.fit.restarts},
        {"restart_sigma", c.ssm.fit.restart_sigma},
        {"max_iters", c.ssm.fit.lbfgs.max_iters},
        {"max_outer", c.ssm.fit.max_outer},
        {"dual_distance", to_string(c.ssm.dual_distance)},
        {"single_distance", to_string(c.ssm.single_distance)},
        {"max_target_points", c.ssm.max_target_points},
        {"rigid_prealign",
         c.ssm.fit.rigid_prealign == RigidPrealign::centroid ? "centroid" : "none"}}},
      {"metrics", {{"emd_cap", c.emd_cap}, {"gt_surface_points", c.gt_surface_points}}}};
}

PipelineOutputs run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  PipelineOutputs out;
  const fs::path dir = cfg.output_dir;
  const ImagingGeometry& geom = cfg.geometry;
  stage("setup", [&] {
    fs::create_directories(dir);
    write_file(dir / "config.json", experiment_config_to_json(cfg).dump(2) + "\n");
  });

  // Phantoms and ground truth.
  std::vector<PhantomScene> scenes(static_cast<std::size_t>(cfg.scenes));
  std::vector<GroundTruth> truth(scenes.size());
  std::vector<std::map<int, PointCloud>> surfaces(scenes.size());
  stage("phantom", [&] {
    for (int i = 0; i < cfg.scenes; ++i) {
      const auto si = static_cast<std::size_t>(i);
      JitterParams j = cfg.jitter;
      j.deformed = scene_deformed(cfg, i);
      scenes[si] = sample_scene(derive_seed(cfg.seed, "scene", si), cfg.template_name, j, geom);
      truth[si] = render_ground_truth(
          scenes[si], {cfg.noise_sigma, derive_seed(cfg.seed, "noise", si)});
      const std::string stem = "scene_" + padded(i);
      write_file(dir / "phantoms" / (stem + ".json"), scene_to_json(scenes[si]).dump(1) + "\n");
      write_dmap(dir / "phantoms" / (stem + "_depth.dmap"), to_dmap(truth[si].depth));
      write_dmap(dir / "phantoms" / (stem + "_radiograph.dmap"),
                 DmapFile{geom, {}, {truth[si].radiograph}});
      write_dmap(dir / "phantoms" / (stem + "_labels.dmap"),
                 DmapFile{geom, truth[si].labels.object_ids(), truth[si].labels.to_channels()});
      for (const auto& obj : scenes[si].objects)
        surfaces[si][obj.object_id] = sample_surface_points(
            obj, static_cast<std::size_t>(cfg.gt_surface_points),
            derive_seed(cfg.seed, "surface", si * 1000 + static_cast<std::size_t>(obj.object_id)));
    }
  });
  const std::vector<int> ids = scenes[0].object_ids();

  // Shape models from a separate population of scenes.
  std::map<int, ShapeModel> models;
  std::map<int, std::vector<SurfaceParam>> params;
  if (cfg.ssm.enabled) {
    stage("ssm-build", [&] {
      const PhantomScene reference = sample_scene(derive_seed(cfg.seed, "ssm-reference"),
                                                  cfg.template_name, JitterParams{}, geom);
      std::map<int, CorrespondedShapeSet> sets;
      for (const auto& obj : reference.objects) {
        params[obj.object_id] =
            correspondence_params(obj, static_cast<std::size_t>(cfg.ssm.points));
        sets[obj.object_id].object_id = obj.object_id;
      }
      for (int s = 0; s < cfg.ssm.training_shapes; ++s) {
        JitterParams j = cfg.jitter;
        j.deformed = s % 2 == 1;
        const PhantomScene sc =
            sample_scene(derive_seed(cfg.seed, "ssm-shape", static_cast<std::size_t>(s)),
                         cfg.template_name, j, geom);
        for (const auto& obj : sc.objects)
          sets[obj.object_id].shapes.push_back(corresponded_points(obj, params[obj.object_id]));
      }
      for (auto& [id, set] : sets) {
        if (cfg.ssm.alignment != "none")
          set = procrustes_align(set, cfg.ssm.alignment == "procrustes");
        models[id] = build_ssm(set, static_cast<std::size_t>(cfg.ssm.n_modes));
        save_ssm(dir / "ssm" / ("object_" + std::to_string(id) + ".ssm"), models[id]);
      }
    });
  }

  std::vector<Run> runs;
  for (auto v : cfg.variants) runs.push_back({to_string(v), v, true});
  if (cfg.single_face_baseline) runs.push_back({"si_indep_single", LossVariant::si_indep, false});

  std::vector<Record> records;
  json training = json::array();
  for (std::size_t r = 0; r < runs.size(); ++r) {
    const Run& run = runs[r];
    const fs::path run_dir = dir / "runs" / run.name;
    for (int fold = 0; fold < cfg.folds; ++fold) {
      const std::string tag = run.name + " fold " + std::to_string(fold);
      std::vector<TrainingSample> train_set;
      std::vector<int> test_scenes;
      for (int i = 0; i < cfg.scenes; ++i) {
        if (scene_fold(cfg, i) == fold)
          test_scenes.push_back(i);
        else
          train_set.push_back(make_training_sample(truth[static_cast<std::size_t>(i)]));
      }
      TrainConfig tc = cfg.train;
      tc.loss.variant = run.variant;
      tc.dual_face = run.dual_face;
      tc.rng_seed = derive_seed(cfg.seed, "train", r * 64 + static_cast<std::size_t>(fold));
      const TrainResult trained = stage("train " + tag, [&] {
        TrainResult t = train_regressor(train_set, tc);
        save_regressor(run_dir / ("fold_" + std::to_string(fold) + ".model"), t.model);
        return t;
      });
      training.push_back({{"run", run.name},
                          {"fold", fold},
                          {"initial_loss", trained.initial_loss},
                          {"final_loss", trained.final_loss}});

      // Standardized geometry: the training scenes' mean depth center per
      // object restores the level that a center-aligned loss leaves free.
      std::map<int, double> prior_center;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        std::vector<double> centers;
        for (const auto& s : train_set) centers.push_back(depth_center(s.gt, k, run.dual_face));
        prior_center[ids[k]] = mean_of(centers);
      }
      const bool restore = tc.loss.center_aligned() && cfg.casi_center == "train-mean";

      for (int i : test_scenes) {
        const auto si = static_cast<std::size_t>(i);
        const std::string stem = "scene_" + padded(i);
        const DepthMapSet pred = stage("predict " + tag, [&] {
          DepthMapSet p = predict(trained.model, geom, truth[si].radiograph, truth[si].labels);
          if (restore) {
            for (std::size_t k = 0; k < ids.size(); ++k) {
              const double shift = prior_center[ids[k]] - depth_center(p, k, run.dual_face);
              if (!std::isfinite(shift)) continue;
              for (int face = 0; face < 2; ++face)
                for (double& d : p.maps[2 * k + static_cast<std::size_t>(face)].values())
                  if (!std::isnan(d)) d = std::max(d + shift, 1e-3);
            }
          }
          write_dmap(run_dir / (stem + "_pred.dmap"), to_dmap(p));
          return p;
        });

        PointCloud scene_cloud, scene_completed;
        for (std::size_t k = 0; k < ids.size(); ++k) {
          const int id = ids[k];
          Record rec;
          rec.run = run.name;
          rec.fold = fold;
          rec.scene = i;
          rec.deformed = scenes[si].deformed;
          rec.object_id = id;
          rec.stage = "point_cloud";
          const PointCloud cloud = object_cloud(geom, pred, k, run.dual_face);
          scene_cloud.append(cloud);
          if (cloud.empty()) {
            out.warnings.push_back(tag + " scene " + std::to_string(i) + " object " +
                                   std::to_string(id) + ": empty reconstruction skipped");
            continue;
          }
          stage("metrics " + tag, [&] {
            rec.surface = surface_metrics(
                cloud, surfaces[si][id], cfg.emd_cap,
                derive_seed(cfg.seed, "emd", si * 1000 + static_cast<std::size_t>(id)));
            std::vector<double> abs_err, sq_err;
            for (int face = 0; face < (run.dual_face ? 2 : 1); ++face) {
              const DepthMap& pm = pred.maps[2 * k + static_cast<std::size_t>(face)];
              const DepthMap& gm = truth[si].depth.maps[2 * k + static_cast<std::size_t>(face)];
              for (std::size_t p = 0; p < pm.size(); ++p) {
                if (!pm.valid(p) || !gm.valid(p)) continue;
                abs_err.push_back(std::abs(pm[p] - gm[p]));
                sq_err.push_back((pm[p] - gm[p]) * (pm[p] - gm[p]));
              }
            }
            if (!abs_err.empty()) {
              rec.mae = mean_of(abs_err);
              rec.rmse = std::sqrt(mean_of(sq_err));
            }
            if (run.dual_face) {
              rec.volume_pred = volume_from_thickness(pred, geom, id);
              rec.volume_true = volume_from_thickness(truth[si].depth, geom, id);
            }
          });
          records.push_back(rec);

          if (!cfg.ssm.enabled) continue;
          Record comp = rec;
          comp.stage = "completion";
          comp.mae = comp.rmse = comp.volume_pred = comp.volume_true = NAN;
          stage("ssm-fit " + tag, [&] {
            SsmFitConfig fc = cfg.ssm.fit;
            fc.distance_mode = run.dual_face ? cfg.ssm.dual_distance : cfg.ssm.single_distance;
            fc.seed = derive_seed(cfg.seed, "ssm-fit", si * 1000 + static_cast<std::size_t>(id));
            const PointCloud target =
                subsample(cloud, static_cast<std::size_t>(cfg.ssm.max_target_points),
                          derive_seed(cfg.seed, "ssm-target", si * 1000 + static_cast<std::size_t>(id)));
            const SsmFitResult fit = fit_ssm(models.at(id), target, fc);
            for (const auto& w : fit.warnings)
              out.warnings.push_back(tag + " scene " + std::to_string(i) + " object " +
                                     std::to_string(id) + ": " + w);
            PointCloud completed;
            completed.points = fit.completed;
            completed.object_ids.assign(fit.completed.size(), id);
            PointCloud reference;
            reference.points = corresponded_points(scenes[si].objects[k], params.at(id));
            comp.surface = surface_metrics(
                completed, reference, cfg.emd_cap,
                derive_seed(cfg.seed, "emd-completion", si * 1000 + static_cast<std::size_t>(id)));
            scene_completed.append(completed);
          });
          records.push_back(comp);
        }
        write_ply(run_dir / (stem + "_cloud.ply"), scene_cloud);
        if (cfg.ssm.enabled && !scene_completed.empty())
          write_ply(run_dir / (stem + "_completed.ply"), scene_completed);
      }
    }
  }

  // Metrics table.
  std::ostringstream csv;
  csv.precision(17);
  csv << "run,fold,scene,subgroup,object_id,object_class,stage,assd,hd95,emd,cd_l2,mae,rmse,"
         "volume_pred,volume_true\n";
  for (const auto& rec : records)
    csv << rec.run << ',' << rec.fold << ',' << rec.scene << ','
        << (rec.deformed ? "deformed" : "clean") << ',' << rec.object_id << ','
        << object_class(cfg.template_name, rec.object_id) << ',' << rec.stage << ','
        << rec.surface.assd << ',' << rec.surface.hd95 << ',' << rec.surface.emd << ','
        << rec.surface.cd_l2 << ',' << rec.mae << ',' << rec.rmse << ',' << rec.volume_pred
        << ',' << rec.volume_true << '\n';
  out.metrics_csv = dir / "metrics.csv";
  write_file(out.metrics_csv, csv.str());

  // Summary: mean(std) per run, stage, group and metric.
  json rows = json::array();
  std::vector<std::string> groups{"all", "clean", "deformed"};
  std::vector<std::string> classes;
  for (int id : ids) {
    const std::string c = object_class(cfg.template_name, id);
    if (std::find(classes.begin(), classes.end(), c) == classes.end()) classes.push_back(c);
  }
  for (const auto& c : classes) groups.push_back("class:" + c);
  auto in_group = [&](const Record& rec, const std::string& g) {
    if (g == "all") return true;
    if (g == "clean") return !rec.deformed;
    if (g == "deformed") return rec.deformed;
    return "class:" + object_class(cfg.template_name, rec.object_id) == g;
  };
  for (const auto& run : runs) {
    for (const std::string st : {"point_cloud", "completion"}) {
      if (st == "completion" && !cfg.ssm.enabled) continue;
      for (const auto& g : groups) {
        std::map<std::string, std::vector<double>> vals;
        for (const auto& rec : records) {
          if (rec.run != run.name || rec.stage != st || !in_group(rec, g)) continue;
          vals["assd"].push_back(rec.surface.assd);
          vals["hd95"].push_back(rec.surface.hd95);
          vals["emd"].push_back(rec.surface.emd);
          vals["cd_l2"].push_back(rec.surface.cd_l2);
          if (std::isfinite(rec.mae)) {
            vals["mae"].push_back(rec.mae);
            vals["rmse"].push_back(rec.rmse);
          }
        }
        for (const std::string m : {"assd", "hd95", "emd", "cd_l2", "mae", "rmse"})
          if (!vals[m].empty()) rows.push_back(summary_row(run.name, st, g, m, vals[m]));
      }
    }
    if (run.dual_face) {
      for (const auto& g : groups) {
        std::vector<double> vp, vt;
        for (const auto& rec : records)
          if (rec.run == run.name && rec.stage == "point_cloud" && in_group(rec, g) &&
              std::isfinite(rec.volume_pred)) {
            vp.push_back(rec.volume_pred);
            vt.push_back(rec.volume_true);
          }
        if (vp.size() < 2) continue;
        try {
          const double r = pcc(vp, vt);
          json row = summary_row(run.name, "volume", g, "pcc", {r});
          row["n"] = vp.size();
          rows.push_back(row);
        } catch (const std::invalid_argument& e) {
          out.warnings.push_back(run.name + " volume " + g + ": " + e.what());
        }
      }
    }
  }
  json run_list = json::array();
  for (const auto& run : runs)
    run_list.push_back({{"name", run.name},
                        {"loss", to_string(run.variant)},
                        {"faces", run.dual_face ? "dual" : "single"}});
  out.summary = {{"format", "radiodepth-summary"},
                 {"version", 1},
                 {"config", experiment_config_to_json(cfg)},
                 {"runs", run_list},
                 {"training", training},
                 {"rows", rows},
                 {"warnings", out.warnings}};
  out.summary_json = dir / "summary.json";
  write_file(out.summary_json, out.summary.dump(2) + "\n");
  return out;
}

std::vector<CompareRow> compare_report(const json& a, const json& b) {
  auto table = [](const json& s, const char* which) {
    std::map<std::string, std::pair<std::string, double>> t;
    try {
      if (s.at("format") != "radiodepth-summary")
        throw ValidationError(std::string(which) + " is not a summary");
      for (const auto& row : s.at("rows"))
        t[row.at("key").get<std::string>()] = {row.at("metric").get<std::string>(),
                                               row.at("mean").get<double>()};
    } catch (const json::exception& e) {
      throw ValidationError(std::string(which) + ": malformed summary: " + e.what());
    }
    return t;
  };
  const auto ta = table(a, "first summary");
  const auto tb = table(b, "second summary");
  std::vector<std::string> missing;
  for (const auto& [k, v] : ta)
    if (!tb.count(k)) missing.push_back(k + " (only in first)");
  for (const auto& [k, v] : tb)
    if (!ta.count(k)) missing.push_back(k + " (only in second)");
  if (!missing.empty()) {
    std::string msg = "summary schemas differ:";
    for (const auto& m : missing) msg += " " + m;
    throw ValidationError(msg);
  }
  std::vector<CompareRow> rows;
  for (const auto& [k, v] : ta) {
    CompareRow r;
    r.key = k;
    r.a = v.second;
    r.b = tb.at(k).second;
    r.delta = r.b - r.a;
    r.improved = v.first == "pcc" ? r.delta > 0.0 : r.delta < 0.0;
    rows.push_back(r);
  }
  return rows;
}

namespace {

void check_dmap(const fs::path& p, FileDiagnostic& d) {
  const DmapFile f = read_dmap(p);
  const auto& ids = f.object_ids;
  if (std::set<int>(ids.begin(), ids.end()).size() != ids.size())
    d.violations.push_back("duplicate object ids");
  if (!ids.empty() && f.channels.size() == 2 * ids.size()) {
    d.kind = "dmap:depth";
    try {
      depth_set_from_dmap(f).validate();
    } catch (const std::exception& e) {
      d.violations.push_back(e.what());
    }
  } else if (!ids.empty() && f.channels.size() == ids.size()) {
    d.kind = "dmap:labels";
    for (const auto& ch : f.channels)
      for (double v : ch.values())
        if (!std::isnan(v) && v != 1.0) {
          d.violations.push_back("label channel holds a value other than 1 or NaN");
          return;
        }
  } else if (ids.empty() && f.channels.size() == 1) {
    d.kind = "dmap:radiograph";
    for (double v : f.channels[0].values())
      if (!(v >= 0.0 && v <= 1.0)) {
        d.violations.push_back("radiograph intensity outside [0, 1]");
        return;
      }
  } else {
    d.kind = "dmap";
    d.violations.push_back("channel count " + std::to_string(f.channels.size()) +
                           " does not fit " + std::to_string(ids.size()) + " object ids");
  }
}

}  // namespace

std::vector<FileDiagnostic> validate_files(const std::vector<fs::path>& paths) {
  std::vector<fs::path> files;
  for (const auto& p : paths) {
    std::error_code ec;
    if (fs::is_directory(p, ec)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p, ec))
        if (e.is_regular_file()) found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else {
      files.push_back(p);
    }
  }

  std::vector<FileDiagnostic> out;
  for (const auto& p : files) {
    FileDiagnostic d;
    d.path = p;
    try {
      if (!fs::is_regular_file(p)) throw ValidationError("file does not exist");
      const std::string ext = p.extension().string();
      std::string head;
      {
        std::ifstream in(p, std::ios::binary);
        head.resize(5);
        in.read(head.data(), 5);
        head.resize(static_cast<std::size_t>(in.gcount()));
      }
      if (head == "DMAP\n" || ext == ".dmap") {
        d.kind = "dmap";
        check_dmap(p, d);
      } else if (head.rfind("ply", 0) == 0 || ext == ".ply") {
        d.kind = "ply";
        read_ply(p);
      } else if (ext == ".model") {
        d.kind = "model:regressor";
        load_regressor(p);
      } else if (ext == ".ssm") {
        d.kind = "model:ssm";
        load_ssm(p);
      } else if (ext == ".json") {
        d.kind = "json";
        const json j = json::parse(read_file(p));
        if (j.is_object() && j.value("format", "") == "radiodepth-summary") {
          d.kind = "summary";
          compare_report(j, j);
        }
      } else if (ext == ".csv") {
        d.kind = "csv";
        std::istringstream in(read_file(p));
        std::string line;
        std::size_t cols = 0, n = 0;
        while (std::getline(in, line)) {
          const auto c = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
          if (n++ == 0)
            cols = c;
          else if (c != cols) {
            d.violations.push_back("row " + std::to_string(n) + " has " + std::to_string(c) +
                                   " columns, header has " + std::to_string(cols));
            break;
          }
        }
        if (n == 0) d.violations.push_back("empty table");
      } else {
        d.kind = "unknown";
        d.violations.push_back("unrecognized file type");
      }
    } catch (const std::exception& e) {
      d.violations.push_back(e.what());
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace radiodepth
