#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "oracles.hpp"
#include "radiodepth/metrics.hpp"
#include "radiodepth/ssm.hpp"

using namespace radiodepth;

namespace {

/// Fibonacci directions on the unit sphere.
std::vector<Vec3> sphere_dirs(std::size_t n) {
  std::vector<Vec3> d;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (std::size_t i = 0; i < n; ++i) {
    const double z = 1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double r = std::sqrt(1.0 - z * z);
    const double phi = golden * static_cast<double>(i);
    d.emplace_back(r * std::cos(phi), r * std::sin(phi), z);
  }
  return d;
}

std::vector<Vec3> ellipsoid(const Vec3& radii, const Vec3& center, std::size_t n = 200) {
  auto d = sphere_dirs(n);
  for (auto& p : d) p = center + p.cwiseProduct(radii);
  return d;
}

/// Two-parameter ellipsoid family, linear in its parameters.
CorrespondedShapeSet family(std::size_t shapes, std::uint64_t seed, std::size_t n = 200) {
  Rng rng(seed);
  CorrespondedShapeSet set;
  set.object_id = 1;
  for (std::size_t s = 0; s < shapes; ++s) {
    const double t1 = rng.normal(), t2 = rng.normal();
    set.shapes.push_back(
        ellipsoid(Vec3(30 + 4 * t1, 20 + 2 * t2, 25 + 3 * t1 - t2), Vec3(0, 0, 800), n));
  }
  return set;
}

PointCloud cloud(std::vector<Vec3> p) {
  PointCloud c;
  c.points = std::move(p);
  return c;
}

std::filesystem::path tmp_dir(const std::string& name) {
  auto p = std::filesystem::path(RADIODEPTH_TEST_TMP) / name;
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(Ssm, IdenticalShapesDemandZeroModes) {
  CorrespondedShapeSet set;
  set.object_id = 2;
  const auto e = ellipsoid(Vec3(10, 20, 30), Vec3(1, 2, 3), 50);
  set.shapes = {e, e, e, e};
  EXPECT_THROW(build_ssm(set, 1), std::invalid_argument);
  const auto m = build_ssm(set, 0);
  EXPECT_EQ(m.mode_count(), 0u);
  const auto inst = m.instance(Eigen::VectorXd());
  for (std::size_t i = 0; i < e.size(); ++i) EXPECT_LT((inst[i] - e[i]).norm(), 1e-9);
}

TEST(Ssm, TooManyModes) {
  const auto set = family(5, 1);
  EXPECT_THROW(build_ssm(set, 5), std::invalid_argument);
}

TEST(Ssm, OneRadiusFamilyHasOneDominantMode) {
  CorrespondedShapeSet set;
  for (int s = 0; s < 10; ++s)
    set.shapes.push_back(ellipsoid(Vec3(20 + 2.0 * s, 15, 12), Vec3::Zero(), 150));
  const auto m = build_ssm(procrustes_align(set), 3);
  const double total = m.mode_scales.squaredNorm();
  EXPECT_GT(m.mode_scales[0] * m.mode_scales[0] / total, 0.999);
  EXPECT_NO_THROW(m.validate());
}

TEST(Ssm, FullModeReconstruction) {
  Rng rng(5);
  CorrespondedShapeSet set;
  for (int s = 0; s < 7; ++s) {
    std::vector<Vec3> shape;
    for (int p = 0; p < 40; ++p) shape.push_back(Vec3(rng.normal(), rng.normal(), rng.normal()) * 10);
    set.shapes.push_back(shape);
  }
  const auto m = build_ssm(set, 6);
  for (const auto& shape : set.shapes) {
    const auto rec = m.instance(m.coefficients(shape));
    double worst = 0.0;
    for (std::size_t i = 0; i < shape.size(); ++i) worst = std::max(worst, (rec[i] - shape[i]).norm());
    EXPECT_LT(worst, 1e-6);
  }
}

TEST(Ssm, ModesAreOrthonormalAndScaledInSdUnits) {
  const auto set = family(12, 2);
  const auto m = build_ssm(set, 2);
  const Eigen::MatrixXd gram = m.modes.transpose() * m.modes;
  EXPECT_LT((gram - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff(), 1e-9);
  for (int k = 0; k < 2; ++k) {
    double var = 0.0;
    for (const auto& s : set.shapes) var += std::pow(m.coefficients(s)[k], 2);
    EXPECT_NEAR(var / (set.shapes.size() - 1), 1.0, 1e-9);
  }
}

TEST(Procrustes, RemovesRigidMotion) {
  const auto base = ellipsoid(Vec3(30, 20, 10), Vec3::Zero(), 80);
  CorrespondedShapeSet set;
  set.shapes.push_back(base);
  const Mat3 r = Eigen::AngleAxisd(0.4, Vec3(1, 2, 3).normalized()).toRotationMatrix();
  std::vector<Vec3> moved;
  for (const auto& p : base) moved.push_back(r * p + Vec3(5, -7, 9));
  set.shapes.push_back(moved);
  const auto aligned = procrustes_align(set);
  for (std::size_t i = 0; i < base.size(); ++i)
    EXPECT_LT((aligned.shapes[1][i] - aligned.shapes[0][i]).norm(), 1e-8);
}

TEST(SsmCost, ZeroAtMean) {
  const auto m = build_ssm(family(10, 3), 2);
  SsmFitConfig cfg;
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);
  for (double lambda : {0.0, 0.01, 100.0}) {
    cfg.lambda_l2 = lambda;
    const auto c = ssm_cost(m, zero, cloud(m.instance(zero)), cfg);
    EXPECT_NEAR(c.value, 0.0, 1e-12);
    EXPECT_EQ(c.regularizer, 0.0);
  }
}

TEST(SsmCost, HandExample) {
  ShapeModel m;
  m.object_id = 1;
  m.mean = Eigen::Vector3d(1, 0, 0);
  m.modes = Eigen::MatrixXd::Zero(3, 0);
  m.mode_scales = Eigen::VectorXd(0);
  SsmFitConfig cfg;
  cfg.lambda_l2 = 0.0;
  const auto target = cloud({Vec3::Zero()});
  EXPECT_NEAR(ssm_cost(m, Eigen::VectorXd(0), target, cfg).value, 2.0, 1e-12);
  cfg.distance_mode = DistanceMode::target_to_model;
  EXPECT_NEAR(ssm_cost(m, Eigen::VectorXd(0), target, cfg).value, 1.0, 1e-12);
}

TEST(SsmCost, EmptyClipDropsModelTerm) {
  ShapeModel m;
  m.mean = Eigen::Vector3d(100, 0, 0);
  m.modes = Eigen::MatrixXd::Zero(3, 0);
  m.mode_scales = Eigen::VectorXd(0);
  SsmFitConfig cfg;
  cfg.lambda_l2 = 0.0;
  const auto c = ssm_cost(m, Eigen::VectorXd(0), cloud({Vec3::Zero()}), cfg);
  EXPECT_NEAR(c.value, 100.0, 1e-12);
  EXPECT_EQ(c.clipped_points, 0u);
  EXPECT_FALSE(c.warnings.empty());
}

TEST(SsmCost, GradientMatchesFiniteDifferences) {
  const auto set = family(12, 4);
  const auto m = build_ssm(set, 2);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    SsmFitConfig cfg;
    cfg.distance_mode = trial % 2 == 0 ? DistanceMode::bidirectional : DistanceMode::target_to_model;
    Eigen::VectorXd theta(2);
    theta << rng.normal(), rng.normal();
    // Target: a perturbed, partial copy of another family member.
    std::vector<Vec3> t;
    for (const auto& p : set.shapes[trial % set.shapes.size()])
      if (p.z() < 805.0) t.push_back(p + Vec3(rng.normal(), rng.normal(), rng.normal()) * 0.3);
    EXPECT_LT(oracle::ssm_gradient_error(m, theta, cloud(t), cfg), 1e-5) << trial;
  }
}

TEST(Clip, IdempotentAndNeverAdds) {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto model = oracle::random_cloud(rng, 100, 20.0);
    const auto target = oracle::random_cloud(rng, 10, 8.0);
    const auto once = clip(model.points, target.points, 2.0);
    const auto twice = clip(once, target.points, 2.0);
    EXPECT_LE(once.size(), model.size());
    EXPECT_EQ(once, twice);
  }
}

TEST(FitSsm, RecoversGeneratingCoefficients) {
  const auto set = family(12, 10);
  const auto m = build_ssm(set, 2);
  SsmFitConfig cfg;
  cfg.lambda_l2 = 0.0;
  cfg.rigid_prealign = RigidPrealign::none;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto truth = m.coefficients(set.shapes[s]);
    const auto r = fit_ssm(m, cloud(set.shapes[s]), cfg);
    EXPECT_LT((r.theta - truth).cwiseAbs().maxCoeff(), 1e-3) << s;
  }
}

TEST(FitSsm, LargeRegularizerPinsThetaToZero) {
  const auto m = build_ssm(family(12, 11), 2);
  SsmFitConfig cfg;
  cfg.lambda_l2 = 1e6;
  const auto r = fit_ssm(m, cloud(m.instance(Eigen::VectorXd::Zero(2))), cfg);
  EXPECT_LT(r.theta.norm(), 1e-6);
}

TEST(FitSsm, CostNoWorseThanZeroAndMinOverRestarts) {
  const auto set = family(12, 12);
  const auto m = build_ssm(set, 2);
  Rng rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<Vec3> t;
    for (const auto& p : set.shapes[trial])
      if (p.z() < 800.0) t.push_back(p + Vec3(rng.normal(), rng.normal(), rng.normal()));
    SsmFitConfig cfg;
    cfg.seed = static_cast<std::uint64_t>(trial);
    const auto r = fit_ssm(m, cloud(t), cfg);
    EXPECT_LE(r.cost, r.cost_at_zero);
    EXPECT_EQ(r.restart_costs.size(), static_cast<std::size_t>(cfg.restarts));
    EXPECT_EQ(r.cost, *std::min_element(r.restart_costs.begin(), r.restart_costs.end()));
  }
}

TEST(FitSsm, FrontHalfBidirectionalBeatsTargetToModelOnAverage) {
  // Ellipsoid with eight radial bumps; targets are 200 points from the front
  // half. A single pair is close to a tie, so compare means over 30 fits.
  Rng crng(99);
  std::vector<Vec3> centers;
  for (int k = 0; k < 8; ++k) centers.push_back(crng.unit_vector());
  const auto dirs = sphere_dirs(400);
  auto bumpy = [&](const std::vector<double>& t) {
    std::vector<Vec3> pts;
    for (const auto& u : dirs) {
      double bump = 0.0;
      for (std::size_t k = 0; k < t.size(); ++k)
        bump += t[k] * std::exp(-(u - centers[k]).squaredNorm() / 0.1);
      pts.push_back(Vec3(0, 0, 800) + u.cwiseProduct(Vec3(30, 20, 25)) * (1.0 + bump));
    }
    return pts;
  };
  double sum_bi = 0.0, sum_t2m = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    CorrespondedShapeSet set;
    for (int s = 0; s < 20; ++s) {
      std::vector<double> t;
      for (int k = 0; k < 8; ++k) t.push_back(0.1 * rng.normal());
      set.shapes.push_back(bumpy(t));
    }
    const auto m = build_ssm(set, 8);
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<Vec3> half;
      for (const auto& p : set.shapes[s])
        if (p.z() < 800.0) half.push_back(p);
      std::vector<Vec3> target;
      for (auto i : subsample_indices(half.size(), 200, seed * 10 + s)) target.push_back(half[i]);
      SsmFitConfig bi;
      SsmFitConfig t2m;
      t2m.distance_mode = DistanceMode::target_to_model;
      sum_bi += assd(cloud(fit_ssm(m, cloud(target), bi).completed), cloud(set.shapes[s]));
      sum_t2m += assd(cloud(fit_ssm(m, cloud(target), t2m).completed), cloud(set.shapes[s]));
    }
  }
  EXPECT_LT(sum_bi, sum_t2m);
}

TEST(FitSsm, EmptyTargetRejected) {
  const auto m = build_ssm(family(6, 16), 2);
  EXPECT_THROW(fit_ssm(m, PointCloud{}, SsmFitConfig{}), std::invalid_argument);
}

TEST(SsmFitConfig, Validation) {
  SsmFitConfig c;
  c.lambda_l2 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = SsmFitConfig{};
  c.clip_margin = -0.5;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(distance_mode_from_string("target-to-model"), DistanceMode::target_to_model);
  EXPECT_THROW(distance_mode_from_string("nearest"), ConfigError);
}

TEST(SsmIo, RoundTripAndCorruption) {
  const auto m = build_ssm(family(10, 17), 2);
  const auto path = tmp_dir("ssm") / "m.ssm";
  save_ssm(path, m);
  const auto back = load_ssm(path);
  EXPECT_EQ(back.object_id, m.object_id);
  EXPECT_EQ(back.mean, m.mean);
  EXPECT_EQ(back.modes, m.modes);
  EXPECT_EQ(back.mode_scales, m.mode_scales);

  std::ofstream(path, std::ios::binary | std::ios::trunc) << "{\"format\":\"other\"}\n";
  EXPECT_THROW(load_ssm(path), ValidationError);
}
