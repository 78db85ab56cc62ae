#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "radiodepth/geometry.hpp"

namespace radiodepth {

enum class PrimitiveKind { sphere, ellipsoid, capsule };

std::string to_string(PrimitiveKind kind);
PrimitiveKind primitive_kind_from_string(const std::string& name);

/// Closed ray-parameter interval [near, far].
struct Interval {
  double near = 0.0;
  double far = 0.0;
};

/// Convex analytic solid in a local frame mapped to the world by
/// p_world = rotation * p_local + translation.
///   sphere:    radius = radii.x()
///   ellipsoid: semi-axes radii
///   capsule:   radius = radii.x(), segment along local z in [-half_length, half_length]
struct Primitive {
  PrimitiveKind kind = PrimitiveKind::sphere;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  Vec3 radii = Vec3::Ones();
  double half_length = 0.0;
  /// Linear attenuation coefficient, 1/mm.
  double attenuation = 0.0;

  static Primitive sphere(const Vec3& center, double radius, double attenuation);
  static Primitive ellipsoid(const Vec3& center, const Vec3& radii,
                             const Mat3& rotation, double attenuation);
  /// Capsule whose segment runs along `axis` through `center`.
  static Primitive capsule(const Vec3& center, const Vec3& axis, double radius,
                           double half_length, double attenuation);

  /// Throws std::invalid_argument on non-positive sizes or a non-rotation matrix.
  void validate() const;

  /// Entry/exit parameters of the ray; direction must be unit length.
  std::optional<Interval> intersect(const Vec3& origin, const Vec3& direction) const;
  /// Negative inside, zero on the surface, positive outside. Only the sign
  /// and the zero set are exact for ellipsoids.
  double implicit(const Vec3& p) const;
  double volume() const;
  double surface_area() const;
  /// Point for surface parameters (a, b): sphere/ellipsoid use a = cos(polar)
  /// in [-1, 1], b = azimuth; capsule uses a in [0, 1] as profile arclength
  /// fraction from the -z pole, b = azimuth.
  Vec3 surface_point(double a, double b) const;

  Vec3 to_local(const Vec3& p) const { return rotation.transpose() * (p - translation); }

  friend bool operator==(const Primitive&, const Primitive&) = default;
};

struct PhantomObject {
  int object_id = 0;
  std::vector<Primitive> primitives;

  /// Attenuation used for the radiograph: the largest primitive coefficient.
  double attenuation() const;
  bool contains(const Vec3& p, double margin = 0.0) const;

  friend bool operator==(const PhantomObject&, const PhantomObject&) = default;
};

struct PhantomScene {
  ImagingGeometry geometry;
  std::vector<PhantomObject> objects;
  std::string template_name;
  std::uint64_t seed = 0;
  /// Scene belongs to the harder "deformed" subgroup.
  bool deformed = false;

  std::vector<int> object_ids() const;
  /// Throws std::invalid_argument on duplicate ids, no objects, or bad primitives.
  void validate() const;

  friend bool operator==(const PhantomScene&, const PhantomScene&) = default;
};

/// Union interval endpoints over all primitives of one object; nullopt on a miss.
std::optional<Interval> ray_intersect(std::span<const Primitive> object,
                                      const Vec3& origin, const Vec3& direction);

/// Multi-label per-pixel mask. Channel k corresponds to object_ids[k].
class LabelMask {
 public:
  LabelMask() = default;
  LabelMask(int width, int height, std::vector<int> object_ids);

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width_) * static_cast<std::size_t>(height_);
  }
  const std::vector<int>& object_ids() const { return object_ids_; }
  std::optional<std::size_t> channel_of(int object_id) const;

  bool has(std::size_t channel, std::size_t pixel) const {
    return bits_[channel][pixel] != 0;
  }
  void set(std::size_t channel, std::size_t pixel, bool on) {
    bits_[channel][pixel] = on ? 1 : 0;
  }
  std::size_t label_count(std::size_t pixel) const;
  /// Union of all channels.
  bool any(std::size_t pixel) const { return label_count(pixel) > 0; }

  /// One 1.0/NaN channel per object (the labels.dmap layout) and back.
  std::vector<DepthMap> to_channels() const;
  static LabelMask from_channels(const std::vector<DepthMap>& channels,
                                 std::vector<int> object_ids);
  /// Mask with channel k = validity of front(k) in a depth set.
  static LabelMask from_depth_validity(const DepthMapSet& set);

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<int> object_ids_;
  std::vector<std::vector<std::uint8_t>> bits_;
};

struct RenderOptions {
  /// Standard deviation of additive Gaussian pixel noise; 0 disables it.
  double noise_sigma = 0.0;
  std::uint64_t noise_seed = 0;
};

struct GroundTruth {
  DepthMapSet depth;
  LabelMask labels;
  /// Transmitted intensity exp(-sum mu * chord), in [0, 1].
  DepthMap radiograph;
};

GroundTruth render_ground_truth(const PhantomScene& scene,
                                const RenderOptions& options = {});

struct JitterParams {
  /// Per-axis object translation sigma, mm. Bound: [0, 30].
  double translation_mm = 0.0;
  /// Object rotation sigma, degrees. Bound: [0, 15].
  double rotation_deg = 0.0;
  /// Relative object scale sigma. Bound: [0, 0.2].
  double scale = 0.0;
  /// Relative per-primitive radius sigma. Bound: [0, 0.2].
  double shape = 0.0;
  /// Switches on the deformed variant (flattened femoral heads, shallow sockets).
  bool deformed = false;
  /// Flattening fraction of the deformed variant. Bound: [0, 0.5].
  double deformation = 0.3;

  /// Jitter used for the benchmark datasets.
  static JitterParams typical();
  void validate() const;
};

/// Deterministic scene from a seed. Templates: "hip-like" (objects 1, 2 pelvis
/// halves; 3, 4 femurs) and "random-blobs" (three single-primitive objects).
/// Throws ConfigError on an unknown template or out-of-bound jitter.
PhantomScene sample_scene(std::uint64_t seed, const std::string& template_name,
                          const JitterParams& jitter,
                          const ImagingGeometry& geometry = ImagingGeometry::standard());

/// Uniform samples on the union surface of an object (area-weighted rejection).
PointCloud sample_surface_points(const PhantomObject& object, std::size_t count,
                                 std::uint64_t seed);

/// Fixed surface parameter used to build corresponded point sets.
struct SurfaceParam {
  std::size_t primitive = 0;
  double a = 0.0;
  double b = 0.0;
};

/// Parameters spread over each primitive in proportion to its area, keeping
/// only those whose point on `reference` lies on the union surface.
std::vector<SurfaceParam> correspondence_params(const PhantomObject& reference,
                                                std::size_t approx_count);
/// Evaluates the parameters on an object with the same primitive layout.
std::vector<Vec3> corresponded_points(const PhantomObject& object,
                                      std::span<const SurfaceParam> params);

nlohmann::json scene_to_json(const PhantomScene& scene);
PhantomScene scene_from_json(const nlohmann::json& j);

}  // namespace radiodepth
