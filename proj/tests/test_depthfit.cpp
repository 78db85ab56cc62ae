#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "radiodepth/depthfit.hpp"
#include "radiodepth/metrics.hpp"
#include "radiodepth/phantom.hpp"

using namespace radiodepth;

namespace {

GroundTruth small_scene(std::uint64_t seed, int res = 40, bool deformed = false) {
  const auto geom = ImagingGeometry::centered(res, res, 409.6 / res);
  JitterParams j = JitterParams::typical();
  j.deformed = deformed;
  return render_ground_truth(sample_scene(seed, "hip-like", j, geom));
}

/// RMSE after shifting each map so its mean matches the target's mean.
double center_aligned_rmse(const DepthMapSet& pred, const DepthMapSet& gt) {
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < gt.maps.size(); ++m) {
    double mp = 0.0, mg = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < gt.maps[m].size(); ++i)
      if (gt.maps[m].valid(i)) {
        mp += pred.maps[m][i];
        mg += gt.maps[m][i];
        ++c;
      }
    if (c == 0) continue;
    const double shift = (mg - mp) / static_cast<double>(c);
    for (std::size_t i = 0; i < gt.maps[m].size(); ++i)
      if (gt.maps[m].valid(i)) {
        const double d = pred.maps[m][i] + shift - gt.maps[m][i];
        se += d * d;
        ++n;
      }
  }
  return std::sqrt(se / static_cast<double>(n));
}

std::filesystem::path tmp_dir(const std::string& name) {
  auto p = std::filesystem::path(RADIODEPTH_TEST_TMP) / name;
  std::filesystem::create_directories(p);
  return p;
}

TrainConfig tiny_train(LossVariant v) {
  TrainConfig c;
  c.loss.variant = v;
  c.hidden = {8, 8};
  c.patch_radius = 1;
  c.epochs = 15;
  c.rng_seed = 3;
  return c;
}

}  // namespace

TEST(OptimizeDepth, GroundTruthInitConvergesImmediately) {
  const auto gt = small_scene(1);
  FitConfig cfg;
  cfg.init_sigma = 0.0;
  const auto r = optimize_depth(gt.depth, cfg);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.iterations, 0);
  EXPECT_EQ(r.trace.size(), 1u);
}

TEST(OptimizeDepth, CasiReachesTargetUpToShift) {
  const auto gt = small_scene(2);
  FitConfig cfg;
  cfg.loss.variant = LossVariant::casi_indep;
  cfg.init_sigma = 20.0;
  cfg.rng_seed = 11;
  const auto r = optimize_depth(gt.depth, cfg);
  EXPECT_LE(r.iterations, 5000);
  EXPECT_LT(center_aligned_rmse(r.depth, gt.depth), 1e-3 * 20.0);
  EXPECT_LT(r.trace.back(), r.trace.front());
}

TEST(OptimizeDepth, CasiDepAlsoConverges) {
  const auto gt = small_scene(4);
  FitConfig cfg;
  cfg.loss.variant = LossVariant::casi_dep;
  cfg.rng_seed = 12;
  const auto r = optimize_depth(gt.depth, cfg);
  EXPECT_LT(center_aligned_rmse(r.depth, gt.depth), 1e-3 * 20.0);
}

TEST(OptimizeDepth, SiLambdaOneRecoversUpToGlobalScale) {
  const auto gt = small_scene(3);
  FitConfig cfg;
  cfg.loss.variant = LossVariant::si_dep;
  cfg.loss.lambda_var = 1.0;
  cfg.init_sigma = 20.0;
  cfg.rng_seed = 5;
  const auto r = optimize_depth(gt.depth, cfg);
  std::vector<double> lr;
  for (std::size_t m = 0; m < gt.depth.maps.size(); ++m)
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      if (gt.depth.maps[m].valid(i))
        lr.push_back(std::log(r.depth.maps[m][i]) - std::log(gt.depth.maps[m][i]));
  double mean = 0.0;
  for (double x : lr) mean += x;
  mean /= static_cast<double>(lr.size());
  double var = 0.0;
  for (double x : lr) var += (x - mean) * (x - mean);
  EXPECT_LT(std::sqrt(var / static_cast<double>(lr.size())), 1e-6);
}

TEST(OptimizeDepth, KeepsTargetMask) {
  const auto gt = small_scene(5);
  FitConfig cfg;
  cfg.max_iters = 3;
  const auto r = optimize_depth(gt.depth, cfg);
  for (std::size_t m = 0; m < gt.depth.maps.size(); ++m)
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      EXPECT_EQ(r.depth.maps[m].valid(i), gt.depth.maps[m].valid(i));
}

TEST(OptimizeDepth, BadConfig) {
  const auto gt = small_scene(1, 16);
  FitConfig cfg;
  cfg.max_iters = 0;
  EXPECT_THROW(optimize_depth(gt.depth, cfg), ConfigError);
  cfg = FitConfig{};
  cfg.init = InitKind::constant;
  cfg.init_constant = -1.0;
  EXPECT_THROW(optimize_depth(gt.depth, cfg), ConfigError);
}

TEST(Regressor, ParameterRoundTrip) {
  std::vector<TrainingSample> data{make_training_sample(small_scene(1, 16)),
                                   make_training_sample(small_scene(2, 16))};
  const auto m = init_regressor(data, tiny_train(LossVariant::casi_indep));
  PatchRegressor copy = m;
  copy.set_parameters(m.parameters());
  EXPECT_EQ(copy.parameters(), m.parameters());
  EXPECT_EQ(m.parameters().size(), m.parameter_count());
  std::vector<double> wrong(3, 0.0);
  EXPECT_THROW(copy.set_parameters(wrong), std::invalid_argument);
}

class RegressorGradient : public ::testing::TestWithParam<LossVariant> {};

TEST_P(RegressorGradient, MatchesCentralDifferences) {
  std::vector<TrainingSample> data{make_training_sample(small_scene(7, 12)),
                                   make_training_sample(small_scene(8, 12))};
  auto cfg = tiny_train(GetParam());
  cfg.hidden = {5, 4};
  auto model = init_regressor(data, cfg);
  // Move away from the symmetric initialization.
  auto p = model.parameters();
  Rng rng(99);
  for (double& x : p) x += rng.normal(0.0, 0.05);
  model.set_parameters(p);

  std::vector<double> grad;
  batch_loss_and_gradient(model, data, &grad);
  double diff2 = 0.0, ref2 = 0.0;
  const double h = 1e-6;
  for (std::size_t k = 0; k < p.size(); ++k) {
    auto up = p, down = p;
    up[k] += h;
    down[k] -= h;
    PatchRegressor a = model, b = model;
    a.set_parameters(up);
    b.set_parameters(down);
    const double fd =
        (batch_loss_and_gradient(a, data, nullptr) - batch_loss_and_gradient(b, data, nullptr)) /
        (2.0 * h);
    diff2 += (fd - grad[k]) * (fd - grad[k]);
    ref2 += grad[k] * grad[k];
  }
  EXPECT_LT(std::sqrt(diff2 / ref2), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Variants, RegressorGradient,
                         ::testing::Values(LossVariant::si_indep, LossVariant::si_dep,
                                           LossVariant::casi_indep, LossVariant::casi_dep));

TEST(Regressor, TrainingReducesLossAndIsDeterministic) {
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 4; ++s) data.push_back(make_training_sample(small_scene(20 + s, 24)));
  const auto cfg = tiny_train(LossVariant::casi_indep);
  const auto a = train_regressor(data, cfg);
  const auto b = train_regressor(data, cfg);
  EXPECT_LT(a.final_loss, a.initial_loss);
  EXPECT_EQ(a.curve.size(), static_cast<std::size_t>(cfg.epochs) + 1);
  EXPECT_EQ(a.model.parameters(), b.model.parameters());
}

TEST(Regressor, TrainingRejectsTooFewScenes) {
  std::vector<TrainingSample> data{make_training_sample(small_scene(1, 16))};
  EXPECT_THROW(train_regressor(data, tiny_train(LossVariant::si_indep)), std::invalid_argument);
}

TEST(Regressor, PredictOnMaskWithOrderedFaces) {
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 3; ++s) data.push_back(make_training_sample(small_scene(30 + s, 24)));
  const auto r = train_regressor(data, tiny_train(LossVariant::casi_indep));
  const auto test = small_scene(40, 24);
  const auto pred = predict(r.model, test.depth.geometry, test.radiograph, test.labels);
  EXPECT_NO_THROW(pred.validate());
  for (std::size_t k = 0; k < pred.object_count(); ++k) {
    const auto ch = *test.labels.channel_of(pred.object_ids[k]);
    for (std::size_t i = 0; i < pred.front(k).size(); ++i) {
      EXPECT_EQ(pred.front(k).valid(i), test.labels.has(ch, i));
      if (pred.front(k).valid(i)) {
        EXPECT_GT(pred.front(k)[i], 0.0);
        EXPECT_GE(pred.back(k)[i], pred.front(k)[i]);
      }
    }
  }
}

TEST(Regressor, SingleFaceLeavesBackInvalid) {
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 2; ++s) data.push_back(make_training_sample(small_scene(50 + s, 20)));
  auto cfg = tiny_train(LossVariant::si_indep);
  cfg.dual_face = false;
  cfg.epochs = 3;
  const auto r = train_regressor(data, cfg);
  const auto pred = predict(r.model, data[0].gt.geometry, data[0].radiograph, data[0].mask);
  for (std::size_t k = 0; k < pred.object_count(); ++k) {
    EXPECT_GT(pred.front(k).valid_count(), 0u);
    EXPECT_EQ(pred.back(k).valid_count(), 0u);
  }
}

TEST(Regressor, SaveLoadRoundTrip) {
  std::vector<TrainingSample> data{make_training_sample(small_scene(1, 16)),
                                   make_training_sample(small_scene(2, 16))};
  const auto m = init_regressor(data, tiny_train(LossVariant::casi_dep));
  const auto path = tmp_dir("depthfit") / "m.model";
  save_regressor(path, m);
  const auto back = load_regressor(path);
  EXPECT_EQ(back.parameters(), m.parameters());
  EXPECT_EQ(back.object_ids, m.object_ids);
  EXPECT_EQ(back.loss.variant, LossVariant::casi_dep);

  std::ofstream(path, std::ios::binary) << "garbage\n";
  EXPECT_THROW(load_regressor(path), ValidationError);
}

TEST(Regressor, PredictRejectsWrongGeometry) {
  std::vector<TrainingSample> data{make_training_sample(small_scene(1, 16)),
                                   make_training_sample(small_scene(2, 16))};
  const auto m = init_regressor(data, tiny_train(LossVariant::casi_indep));
  const auto other = small_scene(3, 20);
  EXPECT_THROW(predict(m, other.depth.geometry, other.radiograph, other.labels),
               std::invalid_argument);
}

TEST(OptimizeDepth, ConstantOffsetUnderCasiStartsAtZero) {
  const auto gt = small_scene(9);
  FitConfig cfg;
  cfg.loss.variant = LossVariant::casi_indep;
  cfg.init_sigma = 0.0;
  cfg.init_constant = 50.0;
  const auto r = optimize_depth(gt.depth, cfg);
  EXPECT_LT(r.trace.front(), 1e-9);
  for (std::size_t m = 0; m < gt.depth.maps.size(); ++m)
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      if (gt.depth.maps[m].valid(i)) EXPECT_NEAR(r.depth.maps[m][i] - gt.depth.maps[m][i], 50.0, 1e-9);
}

TEST(Regressor, TwoHundredEpochsHalveTheLoss) {
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 8; ++s) data.push_back(make_training_sample(small_scene(60 + s, 32, s % 2)));
  TrainConfig cfg;
  cfg.loss.variant = LossVariant::casi_indep;
  cfg.rng_seed = 1;
  const auto r = train_regressor(data, cfg);
  EXPECT_LT(r.final_loss, 0.5 * r.initial_loss);
}

TEST(Regressor, DuplicateSceneGivesIdenticalPredictions) {
  const auto scene = make_training_sample(small_scene(70, 20));
  std::vector<TrainingSample> data{scene, scene, make_training_sample(small_scene(71, 20))};
  const auto r = train_regressor(data, tiny_train(LossVariant::si_indep));
  const auto a = predict(r.model, scene.gt.geometry, data[0].radiograph, data[0].mask);
  const auto b = predict(r.model, scene.gt.geometry, data[1].radiograph, data[1].mask);
  for (std::size_t m = 0; m < a.maps.size(); ++m)
    for (std::size_t i = 0; i < a.maps[m].size(); ++i)
      if (a.maps[m].valid(i)) EXPECT_EQ(a.maps[m][i], b.maps[m][i]);
}

TEST(Regressor, DualFaceCloudBeatsSingleFaceOnHeldOutScene) {
  const auto geom = ImagingGeometry::centered(48, 48, 409.6 / 48);
  std::vector<TrainingSample> data;
  for (std::uint64_t s = 0; s < 8; ++s) {
    JitterParams j = JitterParams::typical();
    j.deformed = s % 2;
    data.push_back(make_training_sample(render_ground_truth(sample_scene(80 + s, "hip-like", j, geom))));
  }
  const auto scene = sample_scene(99, "hip-like", JitterParams::typical(), geom);
  const auto test = render_ground_truth(scene);
  TrainConfig cfg;
  cfg.loss.variant = LossVariant::si_indep;
  cfg.hidden = {32, 32};
  cfg.epochs = 100;
  const auto dual = train_regressor(data, cfg);
  cfg.dual_face = false;
  const auto single = train_regressor(data, cfg);

  auto cloud_of = [&](const PatchRegressor& m, bool both) {
    const auto pred = predict(m, geom, test.radiograph, test.labels);
    PointCloud c;
    for (std::size_t k = 0; k < pred.object_count(); ++k) {
      c.append(backproject(geom, pred.front(k)));
      if (both) c.append(backproject(geom, pred.back(k)));
    }
    return c;
  };
  PointCloud surface;
  for (const auto& o : scene.objects) surface.append(sample_surface_points(o, 2000, o.object_id));
  EXPECT_LT(assd(cloud_of(dual.model, true), surface), assd(cloud_of(single.model, false), surface));
}
