#include "radiodepth/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include "radiodepth/common.hpp"
#include "radiodepth/io.hpp"
#include "radiodepth/kdtree.hpp"

namespace radiodepth {

using json = nlohmann::json;

void CorrespondedShapeSet::validate() const {
  if (shapes.empty()) throw std::invalid_argument("shape set is empty");
  const std::size_t p = shapes[0].size();
  if (p < 4) throw std::invalid_argument("shapes need at least 4 points");
  for (std::size_t s = 0; s < shapes.size(); ++s) {
    if (shapes[s].size() != p)
      throw std::invalid_argument("shape " + std::to_string(s) + " has " +
                                  std::to_string(shapes[s].size()) + " points, expected " +
                                  std::to_string(p));
    for (const auto& x : shapes[s])
      if (!x.allFinite())
        throw std::invalid_argument("shape " + std::to_string(s) + " has non-finite points");
  }
}

namespace {

Vec3 centroid(std::span<const Vec3> pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& x : pts) c += x;
  return c / static_cast<double>(pts.size());
}

// Rotation R minimizing sum |R a_i - b_i|^2 for centered a, b.
Mat3 kabsch(std::span<const Vec3> a, std::span<const Vec3> b) {
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) h += a[i] * b[i].transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
  return svd.matrixV() * d * svd.matrixU().transpose();
}

std::vector<Vec3> transformed(std::span<const Vec3> pts, const Mat3& r, const Vec3& from,
                              const Vec3& to) {
  std::vector<Vec3> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = r * (pts[i] - from) + to;
  return out;
}

Eigen::VectorXd flatten(std::span<const Vec3> pts) {
  Eigen::VectorXd v(3 * static_cast<Eigen::Index>(pts.size()));
  for (std::size_t i = 0; i < pts.size(); ++i) v.segment<3>(3 * i) = pts[i];
  return v;
}

std::vector<Vec3> unflatten(const Eigen::VectorXd& v) {
  std::vector<Vec3> pts(static_cast<std::size_t>(v.size() / 3));
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = v.segment<3>(3 * i);
  return pts;
}

}  // namespace

CorrespondedShapeSet procrustes_align(const CorrespondedShapeSet& set, bool allow_rotation,
                                      int iterations) {
  set.validate();
  // The first shape fixes the output frame, so aligned shapes stay near
  // their original pose.
  const Vec3 anchor = centroid(set.shapes[0]);
  std::vector<std::vector<Vec3>> centered;
  for (const auto& s : set.shapes)
    centered.push_back(transformed(s, Mat3::Identity(), centroid(s), Vec3::Zero()));
  const std::vector<Vec3> reference = centered[0];

  std::vector<Vec3> mean = reference;
  std::vector<std::vector<Vec3>> aligned = centered;
  for (int it = 0; it < std::max(1, iterations); ++it) {
    if (allow_rotation)
      for (std::size_t s = 0; s < aligned.size(); ++s)
        aligned[s] = transformed(centered[s], kabsch(centered[s], mean), Vec3::Zero(),
                                 Vec3::Zero());
    std::vector<Vec3> next(mean.size(), Vec3::Zero());
    for (const auto& s : aligned)
      for (std::size_t i = 0; i < s.size(); ++i) next[i] += s[i];
    for (auto& x : next) x /= static_cast<double>(aligned.size());
    // Pin the mean's orientation to the reference shape.
    if (allow_rotation)
      next = transformed(next, kabsch(next, reference), Vec3::Zero(), Vec3::Zero());
    double change = 0.0;
    for (std::size_t i = 0; i < next.size(); ++i) change += (next[i] - mean[i]).squaredNorm();
    mean = std::move(next);
    if (!allow_rotation || change < 1e-20) break;
  }
  if (allow_rotation)
    for (std::size_t s = 0; s < aligned.size(); ++s)
      aligned[s] = transformed(centered[s], kabsch(centered[s], mean), Vec3::Zero(),
                               Vec3::Zero());

  CorrespondedShapeSet out;
  out.object_id = set.object_id;
  for (auto& s : aligned) out.shapes.push_back(transformed(s, Mat3::Identity(), Vec3::Zero(), anchor));
  return out;
}

std::vector<Vec3> ShapeModel::instance(const Eigen::VectorXd& theta) const {
  if (static_cast<std::size_t>(theta.size()) != mode_count())
    throw std::invalid_argument("theta has " + std::to_string(theta.size()) +
                                " entries, model has " + std::to_string(mode_count()) +
                                " modes");
  if (mode_count() == 0) return unflatten(mean);
  return unflatten(mean + modes * mode_scales.cwiseProduct(theta));
}

Eigen::VectorXd ShapeModel::coefficients(const std::vector<Vec3>& shape) const {
  if (shape.size() != point_count())
    throw std::invalid_argument("shape has the wrong number of points");
  const Eigen::VectorXd proj = modes.transpose() * (flatten(shape) - mean);
  return proj.cwiseQuotient(mode_scales);
}

void ShapeModel::validate() const {
  if (mean.size() < 12 || mean.size() % 3 != 0)
    throw std::invalid_argument("shape model mean must hold at least 4 points");
  if (!mean.allFinite()) throw std::invalid_argument("shape model mean is non-finite");
  if (modes.rows() != mean.size())
    throw std::invalid_argument("mode length does not match the mean");
  if (mode_scales.size() != modes.cols())
    throw std::invalid_argument("mode_scales length does not match the mode count");
  for (Eigen::Index i = 0; i < mode_scales.size(); ++i) {
    if (!(mode_scales[i] > 0.0) || !std::isfinite(mode_scales[i]))
      throw std::invalid_argument("mode_scales must be positive and finite");
    if (i > 0 && mode_scales[i] > mode_scales[i - 1])
      throw std::invalid_argument("mode_scales must be non-increasing");
  }
  if (modes.cols() > 0) {
    const Eigen::MatrixXd gram = modes.transpose() * modes;
    const double err =
        (gram - Eigen::MatrixXd::Identity(modes.cols(), modes.cols())).cwiseAbs().maxCoeff();
    if (!(err <= 1e-9))
      throw std::invalid_argument("modes are not orthonormal (Gram error " +
                                  std::to_string(err) + ")");
  }
}

ShapeModel build_ssm(const CorrespondedShapeSet& set, std::size_t n_modes) {
  set.validate();
  const std::size_t s_count = set.shapes.size();
  if (n_modes > 0 && n_modes + 1 > s_count)
    throw std::invalid_argument("n_modes = " + std::to_string(n_modes) + " exceeds S - 1 = " +
                                std::to_string(s_count - 1));
  const Eigen::Index dim = 3 * static_cast<Eigen::Index>(set.point_count());
  Eigen::MatrixXd x(static_cast<Eigen::Index>(s_count), dim);
  for (std::size_t s = 0; s < s_count; ++s)
    x.row(static_cast<Eigen::Index>(s)) = flatten(set.shapes[s]).transpose();

  ShapeModel m;
  m.object_id = set.object_id;
  m.mean = x.colwise().mean().transpose();
  m.modes.resize(dim, 0);
  m.mode_scales.resize(0);
  if (n_modes == 0) return m;

  x.rowwise() -= m.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinV);
  const Eigen::VectorXd sv = svd.singularValues();
  const double denom = std::sqrt(static_cast<double>(s_count - 1));
  const double tiny = 1e-9 * std::max(1.0, m.mean.cwiseAbs().maxCoeff());
  for (std::size_t i = 0; i < n_modes; ++i) {
    if (!(sv[static_cast<Eigen::Index>(i)] / denom > tiny))
      throw std::invalid_argument(
          "mode " + std::to_string(i) + " has zero variance; the shapes span only " +
          std::to_string(i) + " modes (use n_modes = " + std::to_string(i) + ")");
  }
  const auto k = static_cast<Eigen::Index>(n_modes);
  m.modes = svd.matrixV().leftCols(k);
  m.mode_scales = sv.head(k) / denom;
  // Fix each mode's sign so the largest-magnitude entry is positive.
  for (Eigen::Index i = 0; i < k; ++i) {
    Eigen::Index arg;
    m.modes.col(i).cwiseAbs().maxCoeff(&arg);
    if (m.modes(arg, i) < 0) m.modes.col(i) = -m.modes.col(i);
  }
  return m;
}

std::string to_string(DistanceMode m) {
  return m == DistanceMode::bidirectional ? "bidirectional" : "target-to-model";
}

DistanceMode distance_mode_from_string(const std::string& name) {
  if (name == "bidirectional") return DistanceMode::bidirectional;
  if (name == "target-to-model" || name == "target_to_model")
    return DistanceMode::target_to_model;
  throw ConfigError("unknown distance mode '" + name + "'");
}

void SsmFitConfig::validate() const {
  if (!(lambda_l2 >= 0.0) || !std::isfinite(lambda_l2))
    throw ConfigError("lambda_l2 must be finite and >= 0");
  if (!(clip_margin >= 0.0) || !std::isfinite(clip_margin))
    throw ConfigError("clip_margin must be finite and >= 0");
  if (restarts < 1) throw ConfigError("restarts must be >= 1");
  if (!(restart_sigma >= 0.0)) throw ConfigError("restart_sigma must be >= 0");
  if (max_outer < 1) throw ConfigError("max_outer must be >= 1");
  if (lbfgs.memory < 1 || lbfgs.max_iters < 0)
    throw ConfigError("lbfgs memory must be >= 1 and max_iters >= 0");
}

std::vector<std::uint8_t> clip_mask(std::span<const Vec3> model, std::span<const Vec3> target,
                                    double margin) {
  if (target.empty()) throw std::invalid_argument("clip: empty target");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& t : target) {
    lo = lo.cwiseMin(t);
    hi = hi.cwiseMax(t);
  }
  lo.array() -= margin;
  hi.array() += margin;
  std::vector<std::uint8_t> mask(model.size());
  for (std::size_t i = 0; i < model.size(); ++i)
    mask[i] = (model[i].array() >= lo.array()).all() && (model[i].array() <= hi.array()).all();
  return mask;
}

std::vector<Vec3> clip(std::span<const Vec3> model, std::span<const Vec3> target, double margin) {
  const auto mask = clip_mask(model, target, margin);
  std::vector<Vec3> out;
  for (std::size_t i = 0; i < model.size(); ++i)
    if (mask[i]) out.push_back(model[i]);
  return out;
}

namespace {

// Cost with a fixed clip mask (nullptr: compute the mask from the instance).
SsmCost evaluate_cost(const ShapeModel& model, const Eigen::VectorXd& theta,
                      std::span<const Vec3> target, const KdTree& target_tree,
                      const std::vector<std::uint8_t>* fixed_mask, const SsmFitConfig& cfg) {
  const std::vector<Vec3> inst = model.instance(theta);
  const std::size_t p = inst.size();
  SsmCost out;
  Eigen::VectorXd g_points = Eigen::VectorXd::Zero(3 * static_cast<Eigen::Index>(p));

  // Target -> model term against `pool` (indices into inst).
  auto target_term = [&](const std::vector<std::size_t>& pool) {
    std::vector<Vec3> pts(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pts[i] = inst[pool[i]];
    const KdTree tree(pts);
    std::vector<double> dist(target.size());
    std::vector<std::size_t> match(target.size());
    parallel_for(target.size(), [&](std::size_t i) {
      const Neighbor nb = tree.nearest(target[i]);
      dist[i] = std::sqrt(nb.squared_distance);
      match[i] = pool[nb.index];
    });
    const double n = static_cast<double>(target.size());
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (dist[i] > 0.0)
        g_points.segment<3>(3 * static_cast<Eigen::Index>(match[i])) +=
            (inst[match[i]] - target[i]) / (dist[i] * n);
    }
    return pairwise_sum(dist) / n;
  };

  std::vector<std::size_t> all(p);
  for (std::size_t i = 0; i < p; ++i) all[i] = i;

  if (cfg.distance_mode == DistanceMode::target_to_model) {
    out.clipped_points = p;
    out.distance = target_term(all);
  } else {
    const std::vector<std::uint8_t> mask =
        fixed_mask ? *fixed_mask : clip_mask(inst, target, cfg.clip_margin);
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < p; ++i)
      if (mask[i]) kept.push_back(i);
    out.clipped_points = kept.size();
    if (kept.empty()) {
      out.warnings.push_back(
          "clip removed every model point; model->target term dropped and the "
          "target->model term uses the unclipped model");
      out.distance = target_term(all);
    } else {
      std::vector<double> dist(kept.size());
      std::vector<std::size_t> match(kept.size());
      parallel_for(kept.size(), [&](std::size_t k) {
        const Neighbor nb = target_tree.nearest(inst[kept[k]]);
        dist[k] = std::sqrt(nb.squared_distance);
        match[k] = nb.index;
      });
      const double n = static_cast<double>(kept.size());
      for (std::size_t k = 0; k < kept.size(); ++k)
        if (dist[k] > 0.0)
          g_points.segment<3>(3 * static_cast<Eigen::Index>(kept[k])) +=
              (inst[kept[k]] - target[match[k]]) / (dist[k] * n);
      out.distance = pairwise_sum(dist) / n + target_term(kept);
    }
  }

  const auto n_theta = static_cast<double>(theta.size());
  out.gradient = Eigen::VectorXd::Zero(theta.size());
  if (theta.size() > 0) {
    out.regularizer = cfg.lambda_l2 / n_theta * theta.squaredNorm();
    out.gradient = model.mode_scales.cwiseProduct(model.modes.transpose() * g_points) +
                   (2.0 * cfg.lambda_l2 / n_theta) * theta;
  }
  out.value = out.distance + out.regularizer;
  return out;
}

}  // namespace

SsmCost ssm_cost(const ShapeModel& model, const Eigen::VectorXd& theta, const PointCloud& target,
                 const SsmFitConfig& cfg) {
  if (target.points.empty()) throw std::invalid_argument("ssm_cost: empty target");
  const KdTree tree(target.points);
  return evaluate_cost(model, theta, target.points, tree, nullptr, cfg);
}

SsmFitResult fit_ssm(const ShapeModel& model, const PointCloud& target, const SsmFitConfig& cfg) {
  cfg.validate();
  if (target.points.empty()) throw std::invalid_argument("fit_ssm: empty target");
  SsmFitResult res;
  ShapeModel shifted = model;
  if (cfg.rigid_prealign == RigidPrealign::centroid) {
    const Vec3 model_c = centroid(unflatten(model.mean));
    res.offset = centroid(target.points) - model_c;
    for (std::size_t i = 0; i < model.point_count(); ++i)
      shifted.mean.segment<3>(3 * static_cast<Eigen::Index>(i)) += res.offset;
  }

  const KdTree tree(target.points);
  const std::span<const Vec3> tgt(target.points);
  const auto n_theta = static_cast<Eigen::Index>(model.mode_count());
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(n_theta);
  const SsmCost at_zero = evaluate_cost(shifted, zero, tgt, tree, nullptr, cfg);
  res.cost_at_zero = at_zero.value;
  if (!std::isfinite(res.cost_at_zero)) throw NumericError("fit_ssm: non-finite cost at theta = 0");

  Rng rng(derive_seed(cfg.seed, "ssm-restart"));
  std::vector<std::string> failures;
  double best_cost = std::numeric_limits<double>::infinity();
  Eigen::VectorXd best_theta = zero;

  for (int r = 0; r < cfg.restarts; ++r) {
    Eigen::VectorXd theta = zero;
    if (r > 0)
      for (Eigen::Index i = 0; i < n_theta; ++i) theta[i] = rng.normal(0.0, cfg.restart_sigma);
    try {
      SsmCost fresh = evaluate_cost(shifted, theta, tgt, tree, nullptr, cfg);
      double run_cost = fresh.value;
      Eigen::VectorXd run_theta = theta;
      std::vector<std::uint8_t> mask =
          clip_mask(shifted.instance(theta), tgt, cfg.clip_margin);
      const int outer = cfg.distance_mode == DistanceMode::bidirectional ? cfg.max_outer : 1;
      for (int o = 0; o < outer; ++o) {
        const CostFunction f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
          SsmCost c = evaluate_cost(shifted, x, tgt, tree, &mask, cfg);
          grad = std::move(c.gradient);
          return c.value;
        };
        const LbfgsResult lr = minimize_lbfgs(f, theta, cfg.lbfgs);
        theta = lr.x;
        fresh = evaluate_cost(shifted, theta, tgt, tree, nullptr, cfg);
        if (!std::isfinite(fresh.value)) throw NumericError("non-finite cost after L-BFGS");
        if (fresh.value < run_cost) {
          run_cost = fresh.value;
          run_theta = theta;
        }
        auto next_mask = clip_mask(shifted.instance(theta), tgt, cfg.clip_margin);
        if (next_mask == mask) break;
        mask = std::move(next_mask);
      }
      res.restart_costs.push_back(run_cost);
      if (run_cost < best_cost) {
        best_cost = run_cost;
        best_theta = run_theta;
        res.best_restart = r;
      }
    } catch (const NumericError& e) {
      res.restart_costs.push_back(std::numeric_limits<double>::quiet_NaN());
      failures.push_back("restart " + std::to_string(r) + ": " + e.what());
    }
  }
  if (!std::isfinite(best_cost)) {
    std::string msg = "fit_ssm: every restart failed";
    for (const auto& f : failures) msg += "; " + f;
    throw NumericError(msg);
  }
  res.warnings = failures;
  const SsmCost final_cost = evaluate_cost(shifted, best_theta, tgt, tree, nullptr, cfg);
  for (const auto& w : final_cost.warnings) res.warnings.push_back(w);
  res.theta = best_theta;
  res.cost = best_cost;
  res.completed = shifted.instance(best_theta);
  return res;
}

void save_ssm(const std::filesystem::path& path, const ShapeModel& model) {
  model.validate();
  std::vector<double> scales(model.mode_scales.data(),
                             model.mode_scales.data() + model.mode_scales.size());
  const json header{{"format", "radiodepth-ssm"},
                    {"version", 1},
                    {"object_id", model.object_id},
                    {"P", model.point_count()},
                    {"N_theta", model.mode_count()},
                    {"mode_scales", scales}};
  std::string bytes = header.dump() + "\n";
  append_f64_le(bytes, model.mean.data(), static_cast<std::size_t>(model.mean.size()));
  append_f64_le(bytes, model.modes.data(), static_cast<std::size_t>(model.modes.size()));
  write_file(path, bytes);
}

ShapeModel load_ssm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t eol = bytes.find('\n');
  if (eol == std::string::npos) throw ValidationError(path.string() + ": missing header");
  ShapeModel m;
  std::size_t p = 0, k = 0;
  try {
    const json h = json::parse(bytes.substr(0, eol));
    if (h.at("format") != "radiodepth-ssm")
      throw ValidationError(path.string() + ": not a shape model file");
    m.object_id = h.at("object_id").get<int>();
    p = h.at("P").get<std::size_t>();
    k = h.at("N_theta").get<std::size_t>();
    const auto scales = h.at("mode_scales").get<std::vector<double>>();
    if (scales.size() != k)
      throw ValidationError(path.string() + ": mode_scales length differs from N_theta");
    m.mode_scales = Eigen::Map<const Eigen::VectorXd>(scales.data(),
                                                      static_cast<Eigen::Index>(k));
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": bad header: " + e.what());
  }
  const std::size_t n = 3 * p + 3 * p * k;
  if (bytes.size() != eol + 1 + 8 * n)
    throw ValidationError(path.string() + ": blob size does not match P and N_theta");
  m.mean.resize(static_cast<Eigen::Index>(3 * p));
  m.modes.resize(static_cast<Eigen::Index>(3 * p), static_cast<Eigen::Index>(k));
  read_f64_le(bytes, eol + 1, m.mean.data(), 3 * p);
  read_f64_le(bytes, eol + 1 + 8 * 3 * p, m.modes.data(), 3 * p * k);
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace radiodepth
