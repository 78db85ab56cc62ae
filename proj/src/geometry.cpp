#include "radiodepth/geometry.hpp"

#include <algorithm>
#include <string>

namespace radiodepth {

ImagingGeometry ImagingGeometry::centered(int width, int height,
                                          double pixel_spacing,
                                          double source_to_detector) {
  ImagingGeometry g;
  g.width = width;
  g.height = height;
  g.pixel_spacing_u = pixel_spacing;
  g.pixel_spacing_v = pixel_spacing;
  g.source_position = Vec3::Zero();
  g.detector_u_axis = Vec3::UnitX();
  g.detector_v_axis = Vec3::UnitY();
  g.detector_origin = Vec3(-0.5 * (width - 1) * pixel_spacing,
                           -0.5 * (height - 1) * pixel_spacing,
                           source_to_detector);
  return g;
}

void ImagingGeometry::validate() const {
  constexpr double tol = 1e-9;
  if (width < 1 || height < 1)
    throw std::invalid_argument("geometry: width and height must be >= 1");
  if (!(pixel_spacing_u > 0.0) || !(pixel_spacing_v > 0.0))
    throw std::invalid_argument("geometry: pixel spacing must be positive");
  if (std::abs(detector_u_axis.norm() - 1.0) > tol ||
      std::abs(detector_v_axis.norm() - 1.0) > tol)
    throw std::invalid_argument("geometry: detector axes must be unit vectors");
  if (std::abs(detector_u_axis.dot(detector_v_axis)) > tol)
    throw std::invalid_argument("geometry: detector axes must be orthogonal");
  const double offset = (source_position - detector_origin).dot(detector_normal());
  if (std::abs(offset) <= tol)
    throw std::invalid_argument("geometry: source lies on the detector plane");
  if (!source_position.allFinite() || !detector_origin.allFinite())
    throw std::invalid_argument("geometry: non-finite position");
}

DepthMap::DepthMap(int width, int height, double fill)
    : width_(width), height_(height) {
  if (width < 0 || height < 0)
    throw std::invalid_argument("DepthMap: negative dimensions");
  values_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height),
                 fill);
}

std::size_t DepthMap::valid_count() const {
  return static_cast<std::size_t>(std::count_if(
      values_.begin(), values_.end(), [](double d) { return !std::isnan(d); }));
}

std::optional<std::size_t> DepthMapSet::object_index(int object_id) const {
  auto it = std::find(object_ids.begin(), object_ids.end(), object_id);
  if (it == object_ids.end()) return std::nullopt;
  return static_cast<std::size_t>(it - object_ids.begin());
}

void DepthMapSet::validate() const {
  if (maps.size() != 2 * object_ids.size())
    throw std::invalid_argument("DepthMapSet: expected two maps per object");
  for (const auto& m : maps) {
    if (!m.matches(geometry))
      throw std::invalid_argument("DepthMapSet: map size does not match geometry");
    for (std::size_t i = 0; i < m.size(); ++i)
      if (m.valid(i) && !(m[i] > 0.0))
        throw std::invalid_argument("DepthMapSet: non-positive valid depth");
  }
  for (std::size_t k = 0; k < object_count(); ++k) {
    const auto& f = front(k);
    const auto& b = back(k);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (f.valid(i) && b.valid(i) && b[i] < f[i])
        throw std::invalid_argument("DepthMapSet: back >= front violated for object " +
                                    std::to_string(object_ids[k]));
  }
}

void PointCloud::append(const PointCloud& other) {
  // Labels survive only if both sides carry them.
  const bool keep_labels =
      (empty() || has_labels()) && (other.empty() || other.has_labels());
  points.insert(points.end(), other.points.begin(), other.points.end());
  if (keep_labels)
    object_ids.insert(object_ids.end(), other.object_ids.begin(), other.object_ids.end());
  else
    object_ids.clear();
}

PointCloud PointCloud::select(int object_id) const {
  PointCloud out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (has_labels() && object_ids[i] == object_id) {
      out.points.push_back(points[i]);
      out.object_ids.push_back(object_id);
    }
  }
  return out;
}

Ray pixel_ray(const ImagingGeometry& geom, double u, double v) {
  if (!(u >= 0.0 && u < geom.width && v >= 0.0 && v < geom.height))
    throw std::domain_error("pixel_ray: pixel (" + std::to_string(u) + ", " +
                            std::to_string(v) + ") outside detector");
  return {geom.source_position,
          (geom.detector_point(u, v) - geom.source_position).normalized()};
}

PointCloud backproject(const ImagingGeometry& geom, const DepthMap& depth,
                       std::optional<int> object_id) {
  if (!depth.matches(geom))
    throw std::invalid_argument("backproject: depth map does not match geometry");
  PointCloud cloud;
  for (std::size_t i = 0; i < depth.size(); ++i) {
    if (!depth.valid(i)) continue;
    const Ray ray = pixel_ray(geom, depth.u_of(i), depth.v_of(i));
    cloud.points.push_back(ray.origin + depth[i] * ray.direction);
    if (object_id) cloud.object_ids.push_back(*object_id);
  }
  return cloud;
}

Projection project_depth(const ImagingGeometry& geom, const PointCloud& cloud) {
  Projection out{DepthMap(geom.width, geom.height), 0, 0};
  const Vec3 normal = geom.detector_normal();
  const double plane = (geom.detector_origin - geom.source_position).dot(normal);
  for (const Vec3& p : cloud.points) {
    const Vec3 d = p - geom.source_position;
    const double along = d.dot(normal);
    // Point must lie on the detector side of the source.
    if (along * plane <= 0.0) {
      ++out.behind_source;
      continue;
    }
    const Vec3 hit = geom.source_position + (plane / along) * d;
    const Vec3 rel = hit - geom.detector_origin;
    const double u = rel.dot(geom.detector_u_axis) / geom.pixel_spacing_u;
    const double v = rel.dot(geom.detector_v_axis) / geom.pixel_spacing_v;
    const long iu = std::lround(u);
    const long iv = std::lround(v);
    if (iu < 0 || iv < 0 || iu >= geom.width || iv >= geom.height) {
      ++out.outside_detector;
      continue;
    }
    const double depth = d.norm();
    double& slot = out.depth.at(static_cast<int>(iu), static_cast<int>(iv));
    if (std::isnan(slot) || depth < slot) slot = depth;
  }
  return out;
}

double pixel_footprint_area(const ImagingGeometry& geom, double u, double v,
                            double depth) {
  if (!(depth > 0.0)) throw std::domain_error("pixel_footprint_area: depth must be > 0");
  if (!(u >= 0.0 && u < geom.width && v >= 0.0 && v < geom.height))
    throw std::domain_error("pixel_footprint_area: pixel outside detector");
  const double ratio = depth / geom.detector_distance(u, v);
  return geom.pixel_spacing_u * geom.pixel_spacing_v * ratio * ratio;
}

}  // namespace radiodepth
