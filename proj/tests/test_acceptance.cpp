// Acceptance checks: one PASS/FAIL line per criterion. Exit status is the
// number of failed criteria.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "radiodepth/depthfit.hpp"
#include "radiodepth/io.hpp"
#include "radiodepth/losses.hpp"
#include "radiodepth/metrics.hpp"
#include "radiodepth/phantom.hpp"
#include "radiodepth/pipeline.hpp"
#include "radiodepth/ssm.hpp"
#include "tiny_config.hpp"

using namespace radiodepth;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path tmp_dir(const std::string& name) {
  auto p = fs::path(RADIODEPTH_TEST_TMP) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

LossConfig loss_cfg(LossVariant v, double lambda = 0.85,
                    AlignmentScope scope = AlignmentScope::per_object) {
  LossConfig c;
  c.variant = v;
  c.lambda_var = lambda;
  c.alignment_scope = scope;
  return c;
}

// 1 -------------------------------------------------------------------------
void loss_closed_forms(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  DepthMap g(8, 6);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = 500.0 + 7.0 * static_cast<double>(i);
  DepthMap eg = g;
  for (double& v : eg.values()) v *= std::numbers::e;
  const double si = si_loss(eg, g, loss_cfg(LossVariant::si_indep)).value;
  o.require(std::abs(si - 3.872983346207417) < 1e-9, "si_loss(e*gt)");

  DepthMapSet gs;
  gs.geometry = ImagingGeometry::centered(8, 6, 1.0);
  gs.object_ids = {1};
  DepthMap g2 = g;
  for (double& v : g2.values()) v += 40.0;
  gs.maps = {g, g2};
  DepthMapSet ps = gs;
  for (double& v : ps.maps[0].values()) v *= std::exp(1.0);
  for (double& v : ps.maps[1].values()) v *= std::exp(-1.0);
  const double dep = si_dep(ps, gs, loss_cfg(LossVariant::si_dep)).value;
  o.require(std::abs(dep - 10.0) < 1e-9, "si_dep two-map case");

  const auto mp = oracle::random_maps(77);
  double worst = 0.0;
  for (auto v : {LossVariant::casi_indep, LossVariant::casi_dep})
    for (double c = -100.0; c <= 100.0; c += 12.5) {
      std::vector<DepthMap> shifted = mp.gt;
      for (auto& m : shifted)
        for (double& d : m.values())
          if (!std::isnan(d)) d += c;
      worst = std::max(worst, evaluate_loss(shifted, mp.gt, loss_cfg(v)).value);
    }
  o.require(worst < 1e-10, "casi(gt + c)");
  const double secs = seconds_since(t0);
  o.require(secs < 1.0, "runtime");
  o.detail << "si=" << si << " dep=" << dep << " casi_shift_max=" << worst << " t=" << secs
           << "s";
}

// 2 -------------------------------------------------------------------------
CorrespondedShapeSet ellipsoid_family(std::uint64_t seed) {
  Rng rng(seed);
  CorrespondedShapeSet set;
  set.object_id = 1;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int s = 0; s < 12; ++s) {
    const Vec3 radii(30 + 4 * rng.normal(), 20 + 2 * rng.normal(), 25 + 3 * rng.normal());
    std::vector<Vec3> pts;
    for (int i = 0; i < 150; ++i) {
      const double z = 1.0 - 2.0 * (i + 0.5) / 150.0, r = std::sqrt(1.0 - z * z);
      pts.push_back(Vec3(0, 0, 800) +
                    Vec3(r * std::cos(golden * i), r * std::sin(golden * i), z).cwiseProduct(radii));
    }
    set.shapes.push_back(pts);
  }
  return set;
}

void gradient_suite(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  const AlignmentScope scopes[] = {AlignmentScope::per_map, AlignmentScope::per_object,
                                   AlignmentScope::global};
  double worst_loss = 0.0;
  int loss_cases = 0;
  for (auto v : {LossVariant::si_indep, LossVariant::si_dep, LossVariant::casi_indep,
                 LossVariant::casi_dep})
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto mp = oracle::random_maps(5000 + seed);
      worst_loss = std::max(worst_loss,
                            oracle::loss_gradient_error(mp, loss_cfg(v, 0.85, scopes[seed % 3])));
      ++loss_cases;
    }
  o.require(worst_loss < 1e-6, "loss gradients");

  const auto set = ellipsoid_family(21);
  const auto model = build_ssm(procrustes_align(set), 4);
  Rng rng(22);
  double worst_ssm = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    SsmFitConfig cfg;
    cfg.distance_mode = trial % 2 ? DistanceMode::target_to_model : DistanceMode::bidirectional;
    Eigen::VectorXd theta(4);
    for (int i = 0; i < 4; ++i) theta[i] = rng.normal();
    PointCloud target;
    for (const auto& p : set.shapes[static_cast<std::size_t>(trial) % set.shapes.size()])
      if (p.z() < 806.0) target.points.push_back(p + 0.5 * Vec3(rng.normal(), rng.normal(), rng.normal()));
    worst_ssm = std::max(worst_ssm, oracle::ssm_gradient_error(model, theta, target, cfg));
  }
  o.require(worst_ssm < 1e-5, "ssm gradients");
  const double secs = seconds_since(t0);
  o.require(secs < 30.0, "runtime");
  o.detail << loss_cases << " loss cases max_rel=" << worst_loss << "; 100 ssm cases max_rel="
           << worst_ssm << " t=" << secs << "s";
}

// 3 -------------------------------------------------------------------------
void geometry_oracle(Outcome& o) {
  const ImagingGeometry g = ImagingGeometry::standard();
  PhantomScene scene;
  scene.geometry = g;
  scene.template_name = "custom";
  const Vec3 c(0, 0, 800);
  scene.objects.push_back({1, {Primitive::sphere(c, 100.0, 0.001)}});
  const GroundTruth gt = render_ground_truth(scene);
  double root_err = 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < g.pixel_count(); ++i) {
    const Vec3 d = pixel_ray(g, gt.radiograph.u_of(i), gt.radiograph.v_of(i)).direction;
    const double b = d.dot(c), disc = b * b - (c.squaredNorm() - 1e4);
    if (!gt.depth.front(0).valid(i)) continue;
    ++hits;
    root_err = std::max(root_err, std::abs(gt.depth.front(0)[i] - (b - std::sqrt(disc))));
    root_err = std::max(root_err, std::abs(gt.depth.back(0)[i] - (b + std::sqrt(disc))));
  }
  o.require(hits > 1000 && root_err < 1e-9, "analytic roots");

  double trip = 0.0;
  for (std::size_t m = 0; m < 2; ++m) {
    const auto p = project_depth(g, backproject(g, gt.depth.maps[m]));
    for (std::size_t i = 0; i < g.pixel_count(); ++i) {
      if (gt.depth.maps[m].valid(i) != p.depth.valid(i)) trip = INFINITY;
      else if (p.depth.valid(i)) trip = std::max(trip, std::abs(p.depth[i] - gt.depth.maps[m][i]));
    }
  }
  o.require(trip < 1e-9, "round trip");

  double att = 0.0;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto s = sample_scene(seed, "hip-like", JitterParams::typical(),
                                ImagingGeometry::centered(128, 128, 3.2));
    const auto r = render_ground_truth(s);
    for (std::size_t i = 0; i < r.radiograph.size(); ++i) {
      double integral = 0.0;
      for (std::size_t k = 0; k < s.objects.size(); ++k)
        if (r.depth.front(k).valid(i))
          integral += s.objects[k].attenuation() * (r.depth.back(k)[i] - r.depth.front(k)[i]);
      att = std::max(att, std::abs(r.radiograph[i] - std::exp(-integral)));
    }
  }
  o.require(att < 1e-9, "attenuation vs thickness");
  o.detail << "roots=" << root_err << " roundtrip=" << trip << " attenuation=" << att;
}

// 4 -------------------------------------------------------------------------
void metric_oracles(Outcome& o) {
  Rng rng(40);
  int mismatches = 0;
  for (int t = 0; t < 1000; ++t) {
    const auto a = oracle::random_cloud(rng, 1 + rng.below(8));
    const auto b = oracle::random_cloud(rng, 1 + rng.below(8));
    mismatches += assd(a, b) != oracle::brute_assd(a, b);
    mismatches += hd95(a, b) != oracle::brute_hd95(a, b);
    mismatches += cd_l2(a, b) != oracle::brute_cd_l2(a, b);
  }
  o.require(mismatches == 0, "brute-force assd/hd95/cd_l2");
  double emd_err = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.below(6);
    const auto a = oracle::random_cloud(rng, n), b = oracle::random_cloud(rng, n);
    emd_err = std::max(emd_err, std::abs(emd(a, b) - oracle::brute_emd(a, b)));
  }
  o.require(emd_err < 1e-12, "emd vs permutations");
  PointCloud a, b;
  a.points = {Vec3(0, 0, 0)};
  b.points = {Vec3(1, 0, 0), Vec3(3, 0, 0)};
  o.require(assd(a, b) == 5.0 / 3.0, "assd worked example");
  o.require(cd_l2(a, b) == 6.0, "cd_l2 worked example");
  o.detail << "mismatches=" << mismatches << " emd_max_err=" << emd_err
           << " assd=" << assd(a, b) << " cd_l2=" << cd_l2(a, b);
}

// 5 -------------------------------------------------------------------------
double monte_carlo_volume(const PhantomObject& obj, std::uint64_t seed, int samples) {
  Vec3 lo = Vec3::Constant(INFINITY), hi = -lo;
  for (const auto& p : obj.primitives) {
    const double reach = p.radii.maxCoeff() + p.half_length;
    lo = lo.cwiseMin(p.translation - Vec3::Constant(reach));
    hi = hi.cwiseMax(p.translation + Vec3::Constant(reach));
  }
  Rng rng(seed);
  int inside = 0;
  for (int i = 0; i < samples; ++i) {
    const Vec3 q(rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()),
                 rng.uniform(lo.z(), hi.z()));
    inside += obj.contains(q);
  }
  return (hi - lo).prod() * inside / samples;
}

void volume_checks(Outcome& o) {
  PhantomScene scene;
  scene.geometry = ImagingGeometry::centered(256, 256, 1.6);
  scene.template_name = "custom";
  scene.objects.push_back({1, {Primitive::sphere(Vec3(0, 0, 800), 100.0, 0.001)}});
  const double est =
      volume_from_thickness(render_ground_truth(scene).depth, scene.geometry, 1);
  const double truth = 4.0 / 3.0 * std::numbers::pi * 1e6;
  const double rel = std::abs(est - truth) / truth;
  o.require(rel < 0.02, "sphere volume");

  std::vector<double> estimated, reference;
  // Per class as well: pooling pelvis and femur inflates the correlation.
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_class;
  const auto geom = ImagingGeometry::centered(128, 128, 3.2);
  for (std::uint64_t s = 0; s < 16; ++s) {
    JitterParams j = JitterParams::typical();
    j.deformed = s % 2 == 1;
    const auto sc = sample_scene(derive_seed(55, "volume", s), "hip-like", j, geom);
    const auto gt = render_ground_truth(sc);
    for (const auto& obj : sc.objects) {
      estimated.push_back(volume_from_thickness(gt.depth, geom, obj.object_id));
      reference.push_back(monte_carlo_volume(obj, derive_seed(55, "mc", s), 400000));
      auto& cls = by_class[object_class("hip-like", obj.object_id)];
      cls.first.push_back(estimated.back());
      cls.second.push_back(reference.back());
    }
  }
  const double r = pcc(estimated, reference);
  o.require(r > 0.95, "pcc");
  o.detail << "sphere rel_err=" << rel << " pcc=" << r << " over " << estimated.size()
           << " objects in 16 phantoms";
  for (const auto& [name, xy] : by_class) {
    const double rc = pcc(xy.first, xy.second);
    o.require(rc > 0.95, "pcc " + name);
    o.detail << " pcc_" << name << "=" << rc;
  }
}

// 6 -------------------------------------------------------------------------
void convergence(Outcome& o) {
  const auto geom = ImagingGeometry::centered(40, 40, 409.6 / 40);
  const auto gt = render_ground_truth(sample_scene(6, "hip-like", JitterParams::typical(), geom));
  FitConfig casi;
  casi.loss.variant = LossVariant::casi_indep;
  casi.init_sigma = 20.0;
  casi.rng_seed = 61;
  const auto rc = optimize_depth(gt.depth, casi);
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t m = 0; m < gt.depth.maps.size(); ++m) {
    double mp = 0.0, mg = 0.0;
    std::size_t c = 0;
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      if (gt.depth.maps[m].valid(i)) {
        mp += rc.depth.maps[m][i];
        mg += gt.depth.maps[m][i];
        ++c;
      }
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      if (gt.depth.maps[m].valid(i)) {
        const double d = rc.depth.maps[m][i] + (mg - mp) / c - gt.depth.maps[m][i];
        se += d * d;
        ++n;
      }
  }
  const double rmse = std::sqrt(se / n);
  o.require(rmse < 1e-3 * 20.0 && rc.iterations <= 5000, "casi convergence");

  FitConfig si;
  si.loss.variant = LossVariant::si_dep;
  si.loss.lambda_var = 1.0;
  si.init_sigma = 20.0;
  si.rng_seed = 62;
  const auto rs = optimize_depth(gt.depth, si);
  std::vector<double> lr;
  for (std::size_t m = 0; m < gt.depth.maps.size(); ++m)
    for (std::size_t i = 0; i < gt.depth.maps[m].size(); ++i)
      if (gt.depth.maps[m].valid(i))
        lr.push_back(std::log(rs.depth.maps[m][i] / gt.depth.maps[m][i]));
  double mean = 0.0, var = 0.0;
  for (double x : lr) mean += x;
  mean /= lr.size();
  for (double x : lr) var += (x - mean) * (x - mean);
  const double sd = std::sqrt(var / lr.size());
  o.require(sd < 1e-6, "si scale recovery");
  o.detail << "casi rmse=" << rmse << " in " << rc.iterations << " it; si log-ratio sd=" << sd
           << " in " << rs.iterations << " it";
}

// 7 -------------------------------------------------------------------------
double row_mean(const json& summary, const std::string& key) {
  for (const auto& r : summary["rows"])
    if (r["key"] == key) return r["mean"].get<double>();
  throw std::runtime_error("summary row missing: " + key);
}

void benchmark(Outcome& o) {
  const auto t0 = std::chrono::steady_clock::now();
  json j = json::parse(R"({
    "resolution": 96, "scenes": 16, "folds": 4,
    "train": {"epochs": 150, "hidden": [32, 32]},
    "ssm": {"training_shapes": 24, "n_modes": 8, "restarts": 2}
  })");
  j["output_dir"] = tmp_dir("acceptance_bench").string();
  const auto out = run_pipeline(experiment_config_from_json(j));
  const auto& s = out.summary;
  const double casi = row_mean(s, "casi_indep/point_cloud/all/assd");
  const double si = row_mean(s, "si_indep/point_cloud/all/assd");
  const double single = row_mean(s, "si_indep_single/point_cloud/all/assd");
  o.require(casi < si, "casi_indep < si_indep");
  o.require(si < single, "si_indep < single-face");
  o.detail << "assd casi_indep=" << casi << " si_indep=" << si << " single=" << single;
  for (const std::string g : {"clean", "deformed"}) {
    const double dual = row_mean(s, "si_indep/completion/" + g + "/assd");
    const double dual_casi = row_mean(s, "casi_indep/completion/" + g + "/assd");
    const double one = row_mean(s, "si_indep_single/completion/" + g + "/assd");
    o.require(dual < one && dual_casi < one, "completion " + g);
    o.detail << "; completion " << g << " si_indep=" << dual << " casi_indep=" << dual_casi
             << " single=" << one;
  }
  const double secs = seconds_since(t0);
  o.require(secs < 1800.0, "runtime");
  o.detail << "; t=" << secs << "s";
}

// 8 -------------------------------------------------------------------------
int run_cli(const std::string& args) {
  const int status = std::system(("\"" RADIODEPTH_CLI "\" " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void determinism(Outcome& o) {
  const auto dir = tmp_dir("acceptance_determinism");
  json cfg = tiny_experiment((dir / "out").string());
  cfg["scenes"] = 6;
  cfg["folds"] = 3;
  cfg["variants"] = {"si_indep", "casi_dep"};
  std::ofstream(dir / "c.json") << cfg.dump();
  const std::string args = "pipeline --deterministic --config \"" + (dir / "c.json").string() + "\"";
  const int c1 = run_cli(args);
  const std::string first = c1 == 0 ? read_file(dir / "out" / "summary.json") : "";
  const int c2 = run_cli(args);
  const std::string second = c2 == 0 ? read_file(dir / "out" / "summary.json") : "";
  o.require(c1 == 0 && c2 == 0, "pipeline exit codes");
  o.require(!first.empty() && first == second, "byte-identical summary");
  o.detail << "summary bytes=" << first.size() << " identical=" << (first == second);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"1 loss closed forms", loss_closed_forms},
      {"2 gradient suite", gradient_suite},
      {"3 geometry/phantom oracle", geometry_oracle},
      {"4 metric oracles", metric_oracles},
      {"5 volume", volume_checks},
      {"6 convergence", convergence},
      {"7 benchmark direction", benchmark},
      {"8 determinism", determinism},
  };
  int failed = 0;
  for (const auto& [name, fn] : criteria) {
    Outcome o;
    try {
      fn(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail.str() << std::endl;
  }
  return failed;
}
