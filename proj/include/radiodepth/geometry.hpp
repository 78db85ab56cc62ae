#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <vector>

#include "radiodepth/common.hpp"

namespace radiodepth {

/// Point source plus flat detector. Every pixel (u, v) defines one ray from
/// the source through the detector point of that pixel's center.
struct ImagingGeometry {
  Vec3 source_position{0.0, 0.0, 0.0};
  /// World position of the center of pixel (0, 0).
  Vec3 detector_origin{0.0, 0.0, 1000.0};
  Vec3 detector_u_axis{1.0, 0.0, 0.0};
  Vec3 detector_v_axis{0.0, 1.0, 0.0};
  double pixel_spacing_u = 1.0;
  double pixel_spacing_v = 1.0;
  int width = 1;
  int height = 1;

  /// Source on the optical axis at the origin, detector plane at z = sdd,
  /// principal point at the detector center.
  static ImagingGeometry centered(int width, int height, double pixel_spacing,
                                  double source_to_detector = 1000.0);
  /// Demo setup: 1000 mm SDD, 256x256 detector, 1.6 mm pixels.
  static ImagingGeometry standard() { return centered(256, 256, 1.6, 1000.0); }

  /// Throws std::invalid_argument when an invariant does not hold.
  void validate() const;

  Vec3 detector_point(double u, double v) const {
    return detector_origin + u * pixel_spacing_u * detector_u_axis +
           v * pixel_spacing_v * detector_v_axis;
  }
  Vec3 detector_normal() const { return detector_u_axis.cross(detector_v_axis); }
  /// Distance from the source to the detector point of (u, v).
  double detector_distance(double u, double v) const {
    return (detector_point(u, v) - source_position).norm();
  }
  std::size_t pixel_count() const {
    return static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  }

  friend bool operator==(const ImagingGeometry&, const ImagingGeometry&) = default;
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

/// Per-pixel depth grid in mm, measured as Euclidean distance from the
/// source along the pixel ray. NaN marks an invalid pixel.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height,
           double fill = std::numeric_limits<double>::quiet_NaN());

  int width() const { return width_; }
  int height() const { return height_; }
  std::size_t size() const { return values_.size(); }

  double& at(int u, int v) { return values_[index(u, v)]; }
  double at(int u, int v) const { return values_[index(u, v)]; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  bool valid(std::size_t i) const { return !std::isnan(values_[i]); }
  bool valid(int u, int v) const { return valid(index(u, v)); }
  void invalidate(std::size_t i) {
    values_[i] = std::numeric_limits<double>::quiet_NaN();
  }
  std::size_t valid_count() const;

  std::size_t index(int u, int v) const {
    return static_cast<std::size_t>(v) * static_cast<std::size_t>(width_) +
           static_cast<std::size_t>(u);
  }
  int u_of(std::size_t i) const { return static_cast<int>(i % width_); }
  int v_of(std::size_t i) const { return static_cast<int>(i / width_); }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }

  bool matches(const ImagingGeometry& geom) const {
    return width_ == geom.width && height_ == geom.height;
  }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

/// Front/back depth maps for K objects under one geometry. maps[2k] is the
/// front face of object_ids[k], maps[2k + 1] its back face.
struct DepthMapSet {
  ImagingGeometry geometry;
  std::vector<int> object_ids;
  std::vector<DepthMap> maps;

  std::size_t object_count() const { return object_ids.size(); }
  DepthMap& front(std::size_t k) { return maps[2 * k]; }
  const DepthMap& front(std::size_t k) const { return maps[2 * k]; }
  DepthMap& back(std::size_t k) { return maps[2 * k + 1]; }
  const DepthMap& back(std::size_t k) const { return maps[2 * k + 1]; }
  /// Index into object_ids; nullopt if absent.
  std::optional<std::size_t> object_index(int object_id) const;

  /// Checks shapes and back >= front on pixels valid in both faces.
  void validate() const;
};

struct PointCloud {
  std::vector<Vec3> points;
  /// Either empty or one label per point.
  std::vector<int> object_ids;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_labels() const { return !object_ids.empty(); }
  void append(const PointCloud& other);
  /// Points whose label equals object_id.
  PointCloud select(int object_id) const;
};

/// Ray through the (possibly fractional) pixel coordinate (u, v).
/// Throws std::domain_error outside [0, width) x [0, height).
Ray pixel_ray(const ImagingGeometry& geom, double u, double v);

/// One point per valid pixel at source + depth * direction.
PointCloud backproject(const ImagingGeometry& geom, const DepthMap& depth,
                       std::optional<int> object_id = std::nullopt);

struct Projection {
  DepthMap depth;
  std::size_t behind_source = 0;
  std::size_t outside_detector = 0;
};

/// Nearest-point-per-pixel depth map of a cloud. Points behind the source or
/// off the detector are skipped and counted.
Projection project_depth(const ImagingGeometry& geom, const PointCloud& cloud);

/// Cross-section of the pixel's ray tube at the given depth, in mm^2.
double pixel_footprint_area(const ImagingGeometry& geom, double u, double v,
                            double depth);

}  // namespace radiodepth
