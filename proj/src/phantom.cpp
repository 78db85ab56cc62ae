#include "radiodepth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include <Eigen/Geometry>

#include "radiodepth/io.hpp"

namespace radiodepth {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr double kGoldenAngle = 2.399963229728653;  // pi * (3 - sqrt(5))

// Roots of t^2 + 2 b t + c = 0 as an ordered interval.
std::optional<Interval> half_b_roots(double b, double c) {
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double s = std::sqrt(disc);
  // Stable form: avoid cancellation in the root nearest zero.
  const double q = (b > 0.0) ? -(b + s) : -(b - s);
  double t0 = q;
  double t1 = (q != 0.0) ? c / q : 0.0;
  if (q == 0.0) t1 = -b + s;
  if (t0 > t1) std::swap(t0, t1);
  return Interval{t0, t1};
}

std::optional<Interval> sphere_hit(const Vec3& origin, const Vec3& direction,
                                   const Vec3& center, double radius) {
  const Vec3 m = origin - center;
  return half_b_roots(m.dot(direction), m.squaredNorm() - radius * radius);
}

void merge(std::optional<Interval>& acc, const std::optional<Interval>& hit) {
  if (!hit) return;
  if (!acc) {
    acc = hit;
    return;
  }
  acc->near = std::min(acc->near, hit->near);
  acc->far = std::max(acc->far, hit->far);
}

Vec3 direction_from(double a, double b) {
  const double z = std::clamp(a, -1.0, 1.0);
  const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
  return {r * std::cos(b), r * std::sin(b), z};
}

double thomsen_ellipsoid_area(const Vec3& r) {
  constexpr double p = 1.6075;
  const double ap = std::pow(r.x(), p), bp = std::pow(r.y(), p), cp = std::pow(r.z(), p);
  return 4.0 * kPi * std::pow((ap * bp + ap * cp + bp * cp) / 3.0, 1.0 / p);
}

json vec_json(const Vec3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vec3 vec_from(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

Mat3 rotation_about(const Vec3& axis, double degrees) {
  return Eigen::AngleAxisd(degrees * kPi / 180.0, axis.normalized()).toRotationMatrix();
}

// Bounded normal draw: clamps to +-3 sigma so jitter bounds are hard limits.
double bounded_normal(Rng& rng, double sigma) {
  return std::clamp(rng.normal(), -3.0, 3.0) * sigma;
}

}  // namespace

std::string to_string(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::sphere: return "sphere";
    case PrimitiveKind::ellipsoid: return "ellipsoid";
    case PrimitiveKind::capsule: return "capsule";
  }
  return "unknown";
}

PrimitiveKind primitive_kind_from_string(const std::string& name) {
  if (name == "sphere") return PrimitiveKind::sphere;
  if (name == "ellipsoid") return PrimitiveKind::ellipsoid;
  if (name == "capsule") return PrimitiveKind::capsule;
  throw ConfigError("unknown primitive kind '" + name + "'");
}

Primitive Primitive::sphere(const Vec3& center, double radius, double attenuation) {
  Primitive p;
  p.kind = PrimitiveKind::sphere;
  p.translation = center;
  p.radii = Vec3::Constant(radius);
  p.attenuation = attenuation;
  return p;
}

Primitive Primitive::ellipsoid(const Vec3& center, const Vec3& radii,
                               const Mat3& rotation, double attenuation) {
  Primitive p;
  p.kind = PrimitiveKind::ellipsoid;
  p.translation = center;
  p.radii = radii;
  p.rotation = rotation;
  p.attenuation = attenuation;
  return p;
}

Primitive Primitive::capsule(const Vec3& center, const Vec3& axis, double radius,
                             double half_length, double attenuation) {
  Primitive p;
  p.kind = PrimitiveKind::capsule;
  p.translation = center;
  p.rotation = Eigen::Quaterniond::FromTwoVectors(Vec3::UnitZ(), axis.normalized())
                   .toRotationMatrix();
  p.radii = Vec3::Constant(radius);
  p.half_length = half_length;
  p.attenuation = attenuation;
  return p;
}

void Primitive::validate() const {
  constexpr double tol = 1e-9;
  if ((rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff() > tol ||
      std::abs(rotation.determinant() - 1.0) > tol)
    throw std::invalid_argument("primitive: rotation is not orthonormal with det +1");
  if (!translation.allFinite()) throw std::invalid_argument("primitive: bad translation");
  if (!(radii.minCoeff() > 0.0)) throw std::invalid_argument("primitive: radii must be > 0");
  if (kind == PrimitiveKind::capsule && !(half_length > 0.0))
    throw std::invalid_argument("primitive: capsule half_length must be > 0");
  if (!(attenuation >= 0.0)) throw std::invalid_argument("primitive: attenuation must be >= 0");
}

std::optional<Interval> Primitive::intersect(const Vec3& origin,
                                             const Vec3& direction) const {
  switch (kind) {
    case PrimitiveKind::sphere:
      return sphere_hit(origin, direction, translation, radii.x());
    case PrimitiveKind::ellipsoid: {
      const Vec3 o = to_local(origin).cwiseQuotient(radii);
      const Vec3 d = (rotation.transpose() * direction).cwiseQuotient(radii);
      const double a = d.squaredNorm();
      auto hit = half_b_roots(o.dot(d) / a, (o.squaredNorm() - 1.0) / a);
      return hit;
    }
    case PrimitiveKind::capsule: {
      const Vec3 o = to_local(origin);
      const Vec3 d = rotation.transpose() * direction;
      const double r = radii.x();
      const double h = half_length;
      std::optional<Interval> acc;
      merge(acc, sphere_hit(o, d, Vec3(0, 0, -h), r));
      merge(acc, sphere_hit(o, d, Vec3(0, 0, h), r));
      // Finite cylinder body: infinite cylinder clipped to the slab |z| <= h.
      const double a = d.x() * d.x() + d.y() * d.y();
      if (a > 1e-300) {
        auto body = half_b_roots((o.x() * d.x() + o.y() * d.y()) / a,
                                 (o.x() * o.x() + o.y() * o.y() - r * r) / a);
        if (body) {
          double lo = body->near, hi = body->far;
          if (std::abs(d.z()) > 1e-300) {
            double s0 = (-h - o.z()) / d.z(), s1 = (h - o.z()) / d.z();
            if (s0 > s1) std::swap(s0, s1);
            lo = std::max(lo, s0);
            hi = std::min(hi, s1);
          } else if (std::abs(o.z()) > h) {
            lo = 1.0, hi = 0.0;
          }
          if (lo <= hi) merge(acc, Interval{lo, hi});
        }
      }
      return acc;
    }
  }
  return std::nullopt;
}

double Primitive::implicit(const Vec3& p) const {
  const Vec3 q = to_local(p);
  switch (kind) {
    case PrimitiveKind::sphere:
      return q.norm() - radii.x();
    case PrimitiveKind::ellipsoid:
      return (q.cwiseQuotient(radii).norm() - 1.0) * radii.minCoeff();
    case PrimitiveKind::capsule: {
      const double z = std::clamp(q.z(), -half_length, half_length);
      return (q - Vec3(0, 0, z)).norm() - radii.x();
    }
  }
  return 0.0;
}

double Primitive::volume() const {
  switch (kind) {
    case PrimitiveKind::sphere:
      return 4.0 / 3.0 * kPi * std::pow(radii.x(), 3);
    case PrimitiveKind::ellipsoid:
      return 4.0 / 3.0 * kPi * radii.x() * radii.y() * radii.z();
    case PrimitiveKind::capsule: {
      const double r = radii.x();
      return kPi * r * r * 2.0 * half_length + 4.0 / 3.0 * kPi * r * r * r;
    }
  }
  return 0.0;
}

double Primitive::surface_area() const {
  switch (kind) {
    case PrimitiveKind::sphere:
      return 4.0 * kPi * radii.x() * radii.x();
    case PrimitiveKind::ellipsoid:
      return thomsen_ellipsoid_area(radii);
    case PrimitiveKind::capsule: {
      const double r = radii.x();
      return 4.0 * kPi * r * r + 4.0 * kPi * r * half_length;
    }
  }
  return 0.0;
}

Vec3 Primitive::surface_point(double a, double b) const {
  Vec3 local;
  switch (kind) {
    case PrimitiveKind::sphere:
    case PrimitiveKind::ellipsoid:
      local = direction_from(a, b).cwiseProduct(radii);
      break;
    case PrimitiveKind::capsule: {
      const double r = radii.x();
      const double h = half_length;
      const double cap = 0.5 * kPi * r;
      const double s = std::clamp(a, 0.0, 1.0) * (2.0 * cap + 2.0 * h);
      const Vec3 ring(std::cos(b), std::sin(b), 0.0);
      if (s < cap) {
        const double beta = s / r;
        local = r * std::sin(beta) * ring + Vec3(0, 0, -h - r * std::cos(beta));
      } else if (s < cap + 2.0 * h) {
        local = r * ring + Vec3(0, 0, -h + (s - cap));
      } else {
        const double beta = (s - cap - 2.0 * h) / r;
        local = r * std::cos(beta) * ring + Vec3(0, 0, h + r * std::sin(beta));
      }
      break;
    }
  }
  return rotation * local + translation;
}

double PhantomObject::attenuation() const {
  double mu = 0.0;
  for (const auto& p : primitives) mu = std::max(mu, p.attenuation);
  return mu;
}

bool PhantomObject::contains(const Vec3& p, double margin) const {
  return std::any_of(primitives.begin(), primitives.end(),
                     [&](const Primitive& prim) { return prim.implicit(p) < -margin; });
}

std::vector<int> PhantomScene::object_ids() const {
  std::vector<int> ids;
  for (const auto& o : objects) ids.push_back(o.object_id);
  return ids;
}

void PhantomScene::validate() const {
  geometry.validate();
  if (objects.empty()) throw std::invalid_argument("scene: at least one object required");
  std::set<int> seen;
  for (const auto& o : objects) {
    if (!seen.insert(o.object_id).second)
      throw std::invalid_argument("scene: duplicate object id " + std::to_string(o.object_id));
    if (o.primitives.empty())
      throw std::invalid_argument("scene: object without primitives");
    for (const auto& p : o.primitives) p.validate();
  }
}

std::optional<Interval> ray_intersect(std::span<const Primitive> object,
                                      const Vec3& origin, const Vec3& direction) {
  std::optional<Interval> acc;
  for (const auto& p : object) merge(acc, p.intersect(origin, direction));
  return acc;
}

// ---------------------------------------------------------------------------
// LabelMask

LabelMask::LabelMask(int width, int height, std::vector<int> object_ids)
    : width_(width), height_(height), object_ids_(std::move(object_ids)) {
  bits_.assign(object_ids_.size(), std::vector<std::uint8_t>(pixel_count(), 0));
}

std::optional<std::size_t> LabelMask::channel_of(int object_id) const {
  auto it = std::find(object_ids_.begin(), object_ids_.end(), object_id);
  if (it == object_ids_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - object_ids_.begin());
}

std::size_t LabelMask::label_count(std::size_t pixel) const {
  std::size_t n = 0;
  for (const auto& ch : bits_) n += ch[pixel];
  return n;
}

std::vector<DepthMap> LabelMask::to_channels() const {
  std::vector<DepthMap> out;
  for (const auto& ch : bits_) {
    DepthMap m(width_, height_);
    for (std::size_t i = 0; i < ch.size(); ++i)
      if (ch[i]) m[i] = 1.0;
    out.push_back(std::move(m));
  }
  return out;
}

LabelMask LabelMask::from_channels(const std::vector<DepthMap>& channels,
                                   std::vector<int> object_ids) {
  if (channels.size() != object_ids.size())
    throw ValidationError("label mask: one channel per object required");
  const int w = channels.empty() ? 0 : channels[0].width();
  const int h = channels.empty() ? 0 : channels[0].height();
  LabelMask mask(w, h, std::move(object_ids));
  for (std::size_t k = 0; k < channels.size(); ++k)
    for (std::size_t i = 0; i < channels[k].size(); ++i)
      mask.set(k, i, channels[k].valid(i) && channels[k][i] > 0.5);
  return mask;
}

LabelMask LabelMask::from_depth_validity(const DepthMapSet& set) {
  LabelMask mask(set.geometry.width, set.geometry.height, set.object_ids);
  for (std::size_t k = 0; k < set.object_count(); ++k)
    for (std::size_t i = 0; i < set.front(k).size(); ++i)
      mask.set(k, i, set.front(k).valid(i));
  return mask;
}

// ---------------------------------------------------------------------------
// Rendering

GroundTruth render_ground_truth(const PhantomScene& scene, const RenderOptions& options) {
  scene.validate();
  const auto& geom = scene.geometry;
  const std::size_t K = scene.objects.size();
  GroundTruth gt;
  gt.depth.geometry = geom;
  gt.depth.object_ids = scene.object_ids();
  gt.depth.maps.assign(2 * K, DepthMap(geom.width, geom.height));
  gt.labels = LabelMask(geom.width, geom.height, gt.depth.object_ids);
  gt.radiograph = DepthMap(geom.width, geom.height, 1.0);

  std::vector<double> mu(K);
  for (std::size_t k = 0; k < K; ++k) mu[k] = scene.objects[k].attenuation();

  parallel_for(static_cast<std::size_t>(geom.height), [&](std::size_t row) {
    const int v = static_cast<int>(row);
    for (int u = 0; u < geom.width; ++u) {
      const Ray ray = pixel_ray(geom, u, v);
      const std::size_t i = gt.radiograph.index(u, v);
      double line_integral = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        auto hit = ray_intersect(scene.objects[k].primitives, ray.origin, ray.direction);
        if (!hit) continue;
        gt.depth.front(k)[i] = hit->near;
        gt.depth.back(k)[i] = hit->far;
        gt.labels.set(k, i, true);
        line_integral += mu[k] * (hit->far - hit->near);
      }
      gt.radiograph[i] = std::exp(-line_integral);
    }
  });

  if (options.noise_sigma > 0.0) {
    Rng rng(options.noise_seed);
    for (double& px : gt.radiograph.values())
      px = std::clamp(px + options.noise_sigma * rng.normal(), 0.0, 1.0);
  }
  return gt;
}

// ---------------------------------------------------------------------------
// Scene templates

JitterParams JitterParams::typical() {
  JitterParams j;
  j.translation_mm = 6.0;
  j.rotation_deg = 4.0;
  j.scale = 0.05;
  j.shape = 0.06;
  return j;
}

void JitterParams::validate() const {
  auto check = [](double v, double hi, const char* name) {
    if (!(v >= 0.0 && v <= hi))
      throw ConfigError(std::string("jitter: ") + name + " must be in [0, " +
                        std::to_string(hi) + "]");
  };
  check(translation_mm, 30.0, "translation_mm");
  check(rotation_deg, 15.0, "rotation_deg");
  check(scale, 0.2, "scale");
  check(shape, 0.2, "shape");
  check(deformation, 0.5, "deformation");
}

namespace {

constexpr double kPelvisMu = 0.030;
constexpr double kFemurMu = 0.040;

// Canonical hip: left side at negative x; the right side mirrors it.
PhantomObject hip_pelvis(int id, double side) {
  const Vec3 mirror(side, 1.0, 1.0);
  auto tilt = [&](double about_z, double about_y) {
    return Mat3(rotation_about(Vec3::UnitZ(), side * about_z) *
                rotation_about(Vec3::UnitY(), side * about_y));
  };
  PhantomObject o;
  o.object_id = id;
  o.primitives.push_back(Primitive::ellipsoid(Vec3(-65, -45, 800).cwiseProduct(mirror),
                                              Vec3(48, 58, 16), tilt(25, 30), kPelvisMu));
  o.primitives.push_back(Primitive::ellipsoid(Vec3(-72, 15, 805).cwiseProduct(mirror),
                                              Vec3(32, 38, 28), tilt(0, 0), kPelvisMu));
  o.primitives.push_back(Primitive::ellipsoid(Vec3(-40, 50, 795).cwiseProduct(mirror),
                                              Vec3(38, 18, 14), tilt(-20, 0), kPelvisMu));
  return o;
}

PhantomObject hip_femur(int id, double side) {
  const Vec3 mirror(side, 1.0, 1.0);
  PhantomObject o;
  o.object_id = id;
  o.primitives.push_back(Primitive::sphere(Vec3(-88, 18, 805).cwiseProduct(mirror), 23.0,
                                           kFemurMu));
  o.primitives.push_back(Primitive::capsule(Vec3(-108, 80, 805).cwiseProduct(mirror),
                                            Vec3(-0.25 * side, 1.0, 0.0), 15.0, 55.0,
                                            kFemurMu));
  return o;
}

Vec3 object_pivot(const PhantomObject& o) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : o.primitives) c += p.translation;
  return c / static_cast<double>(o.primitives.size());
}

void jitter_object(PhantomObject& o, Rng& rng, const JitterParams& j) {
  const Vec3 pivot = object_pivot(o);
  const Vec3 shift(bounded_normal(rng, j.translation_mm), bounded_normal(rng, j.translation_mm),
                   bounded_normal(rng, j.translation_mm));
  const Vec3 axis = rng.unit_vector();
  const Mat3 rot = rotation_about(axis, bounded_normal(rng, j.rotation_deg));
  const double scale = 1.0 + bounded_normal(rng, j.scale);
  for (auto& p : o.primitives) {
    p.translation = pivot + scale * (rot * (p.translation - pivot)) + shift;
    p.rotation = rot * p.rotation;
    // Re-orthonormalize to keep the rotation invariant tight.
    Eigen::JacobiSVD<Mat3> svd(p.rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
    p.rotation = svd.matrixU() * svd.matrixV().transpose();
    if (p.kind == PrimitiveKind::ellipsoid) {
      for (int a = 0; a < 3; ++a) p.radii[a] *= scale * (1.0 + bounded_normal(rng, j.shape));
    } else {
      p.radii *= scale * (1.0 + bounded_normal(rng, j.shape));
      if (p.kind == PrimitiveKind::capsule)
        p.half_length *= scale * (1.0 + bounded_normal(rng, j.shape));
    }
  }
}

// Flattened femoral head and shallow socket; stronger on the left side.
void deform_hip(std::vector<PhantomObject>& objects, double amount) {
  for (auto& o : objects) {
    const double side_weight = (o.object_id % 2 == 1) ? 1.0 : 0.5;
    const double f = amount * side_weight;
    if (o.object_id >= 3) {
      Primitive& head = o.primitives[0];
      head.kind = PrimitiveKind::ellipsoid;
      head.radii.y() *= (1.0 - f);
      head.radii.x() *= (1.0 + 0.5 * f);
      head.translation += head.rotation * Vec3(0.0, 0.5 * f * head.radii.y(), 0.0);
    } else {
      Primitive& socket = o.primitives[1];
      socket.radii.x() *= (1.0 + 0.5 * f);
      socket.radii.z() *= (1.0 - 0.5 * f);
    }
  }
}

PhantomObject random_blob(int id, Rng& rng, double x_center) {
  const Vec3 center(x_center + rng.uniform(-10, 10), rng.uniform(-30, 30),
                    800.0 + rng.uniform(-30, 30));
  const double mu = rng.uniform(0.02, 0.05);
  PhantomObject o;
  o.object_id = id;
  switch (rng.below(3)) {
    case 0:
      o.primitives.push_back(Primitive::sphere(center, rng.uniform(20, 45), mu));
      break;
    case 1: {
      const Mat3 rot = rotation_about(rng.unit_vector(), rng.uniform(0, 180));
      o.primitives.push_back(Primitive::ellipsoid(
          center, Vec3(rng.uniform(20, 45), rng.uniform(20, 45), rng.uniform(20, 45)), rot,
          mu));
      break;
    }
    default: {
      const double r = rng.uniform(12, 25);
      o.primitives.push_back(
          Primitive::capsule(center, rng.unit_vector(), r, rng.uniform(10, 25), mu));
      break;
    }
  }
  return o;
}

}  // namespace

PhantomScene sample_scene(std::uint64_t seed, const std::string& template_name,
                          const JitterParams& jitter, const ImagingGeometry& geometry) {
  jitter.validate();
  PhantomScene scene;
  scene.geometry = geometry;
  scene.template_name = template_name;
  scene.seed = seed;
  Rng rng(seed);
  if (template_name == "hip-like") {
    scene.objects = {hip_pelvis(1, 1.0), hip_pelvis(2, -1.0), hip_femur(3, 1.0),
                     hip_femur(4, -1.0)};
    if (jitter.deformed) {
      scene.deformed = true;
      deform_hip(scene.objects, jitter.deformation);
    }
    for (auto& o : scene.objects) jitter_object(o, rng, jitter);
  } else if (template_name == "random-blobs") {
    scene.objects = {random_blob(1, rng, -90.0), random_blob(2, rng, 0.0),
                     random_blob(3, rng, 90.0)};
  } else {
    throw ConfigError("unknown phantom template '" + template_name +
                      "' (expected hip-like or random-blobs)");
  }
  scene.validate();
  return scene;
}

PointCloud sample_surface_points(const PhantomObject& object, std::size_t count,
                                 std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("sample_surface_points: count must be >= 1");
  const auto& prims = object.primitives;
  // Envelope areas: exact for spheres/capsules, an upper bound for ellipsoids.
  std::vector<double> envelope;
  for (const auto& p : prims) {
    if (p.kind == PrimitiveKind::ellipsoid)
      envelope.push_back(4.0 * kPi * p.radii.prod() / p.radii.minCoeff());
    else
      envelope.push_back(p.surface_area());
  }
  std::vector<double> cumulative(envelope.size());
  std::partial_sum(envelope.begin(), envelope.end(), cumulative.begin());
  const double total = cumulative.back();

  Rng rng(seed);
  PointCloud cloud;
  cloud.points.reserve(count);
  const std::size_t max_attempts = 10000 * count + 100000;
  std::size_t attempts = 0;
  while (cloud.size() < count) {
    if (++attempts > max_attempts)
      throw NumericError("sample_surface_points: rejection sampling did not terminate");
    const double pick = rng.uniform() * total;
    const std::size_t k = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), pick) - cumulative.begin());
    const Primitive& p = prims[std::min(k, prims.size() - 1)];
    Vec3 local;
    if (p.kind == PrimitiveKind::capsule) {
      const double r = p.radii.x();
      const double cyl = 4.0 * kPi * r * p.half_length;
      if (rng.uniform() * p.surface_area() < cyl) {
        const double a = rng.uniform(0.0, 2.0 * kPi);
        local = Vec3(r * std::cos(a), r * std::sin(a), rng.uniform(-p.half_length, p.half_length));
      } else {
        const Vec3 d = rng.unit_vector();
        local = r * d + Vec3(0, 0, d.z() >= 0.0 ? p.half_length : -p.half_length);
      }
    } else {
      const Vec3 d = rng.unit_vector();
      if (p.kind == PrimitiveKind::ellipsoid) {
        const double density = d.cwiseQuotient(p.radii).norm() * p.radii.minCoeff();
        if (rng.uniform() >= density) continue;
      }
      local = d.cwiseProduct(p.radii);
    }
    const Vec3 point = p.rotation * local + p.translation;
    bool hidden = false;
    for (const auto& other : prims)
      if (&other != &p && other.implicit(point) < -1e-9) hidden = true;
    if (hidden) continue;
    cloud.points.push_back(point);
    cloud.object_ids.push_back(object.object_id);
  }
  return cloud;
}

std::vector<SurfaceParam> correspondence_params(const PhantomObject& reference,
                                                std::size_t approx_count) {
  const auto& prims = reference.primitives;
  double total_area = 0.0;
  for (const auto& p : prims) total_area += p.surface_area();
  std::vector<SurfaceParam> params;
  for (std::size_t k = 0; k < prims.size(); ++k) {
    const auto n = std::max<std::size_t>(
        8, static_cast<std::size_t>(std::lround(approx_count * prims[k].surface_area() /
                                                total_area)));
    for (std::size_t i = 0; i < n; ++i) {
      SurfaceParam sp{k, 0.0, std::fmod(kGoldenAngle * static_cast<double>(i), 2.0 * kPi)};
      const double frac = (static_cast<double>(i) + 0.5) / static_cast<double>(n);
      sp.a = prims[k].kind == PrimitiveKind::capsule ? frac : 1.0 - 2.0 * frac;
      const Vec3 point = prims[k].surface_point(sp.a, sp.b);
      bool hidden = false;
      for (std::size_t o = 0; o < prims.size(); ++o)
        if (o != k && prims[o].implicit(point) < -0.5) hidden = true;
      if (!hidden) params.push_back(sp);
    }
  }
  return params;
}

std::vector<Vec3> corresponded_points(const PhantomObject& object,
                                      std::span<const SurfaceParam> params) {
  std::vector<Vec3> out;
  out.reserve(params.size());
  for (const auto& sp : params) {
    if (sp.primitive >= object.primitives.size())
      throw std::invalid_argument("corresponded_points: primitive layout mismatch");
    out.push_back(object.primitives[sp.primitive].surface_point(sp.a, sp.b));
  }
  return out;
}

json scene_to_json(const PhantomScene& scene) {
  json objects = json::array();
  for (const auto& o : scene.objects) {
    json prims = json::array();
    for (const auto& p : o.primitives) {
      json rot = json::array();
      for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c) rot.push_back(p.rotation(r, c));
      prims.push_back({{"kind", to_string(p.kind)},
                       {"rotation", rot},
                       {"translation", vec_json(p.translation)},
                       {"radii", vec_json(p.radii)},
                       {"half_length", p.half_length},
                       {"attenuation", p.attenuation}});
    }
    objects.push_back({{"object_id", o.object_id}, {"primitives", prims}});
  }
  return {{"template", scene.template_name},
          {"seed", scene.seed},
          {"deformed", scene.deformed},
          {"geometry", geometry_to_json(scene.geometry)},
          {"objects", objects}};
}

PhantomScene scene_from_json(const json& j) {
  try {
    PhantomScene scene;
    scene.template_name = j.value("template", std::string{});
    scene.seed = j.value("seed", std::uint64_t{0});
    scene.deformed = j.value("deformed", false);
    scene.geometry = geometry_from_json(j.at("geometry"));
    for (const auto& jo : j.at("objects")) {
      PhantomObject o;
      o.object_id = jo.at("object_id").get<int>();
      for (const auto& jp : jo.at("primitives")) {
        Primitive p;
        p.kind = primitive_kind_from_string(jp.at("kind").get<std::string>());
        const auto& rot = jp.at("rotation");
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) p.rotation(r, c) = rot.at(3 * r + c).get<double>();
        p.translation = vec_from(jp.at("translation"));
        p.radii = vec_from(jp.at("radii"));
        p.half_length = jp.value("half_length", 0.0);
        p.attenuation = jp.at("attenuation").get<double>();
        o.primitives.push_back(p);
      }
      scene.objects.push_back(std::move(o));
    }
    return scene;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("scene json: ") + e.what());
  }
}

}  // namespace radiodepth
