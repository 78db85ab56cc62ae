#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "radiodepth/geometry.hpp"
#include "radiodepth/phantom.hpp"

namespace radiodepth {

/// Surface metrics between two clouds. Every function throws
/// std::invalid_argument on an empty cloud.
double assd(const PointCloud& a, const PointCloud& b);
/// Linearly interpolated 95th percentile of both directed distance sets pooled.
double hd95(const PointCloud& a, const PointCloud& b);
/// Symmetric Hausdorff distance (max of the pooled set).
double hausdorff(const PointCloud& a, const PointCloud& b);
/// Sum of the two directional mean squared nearest distances, mm^2.
double cd_l2(const PointCloud& a, const PointCloud& b);

/// Deterministic uniform subsample of n indices in increasing order.
std::vector<std::size_t> subsample_indices(std::size_t size, std::size_t n, std::uint64_t seed);

/// Optimal assignment on a square cost matrix (row-major, n x n). Returns
/// the column assigned to each row.
std::vector<std::size_t> hungarian(std::span<const double> cost, std::size_t n);

/// Mean matched distance of the optimal one-to-one assignment between equal
/// size subsamples of n = min(|A|, |B|, cap) points.
double emd(const PointCloud& a, const PointCloud& b, std::size_t cap = 512,
           std::uint64_t seed = 0);

struct SurfaceMetricReport {
  double assd = 0.0;
  double hd95 = 0.0;
  double emd = 0.0;
  double cd_l2 = 0.0;
  std::size_t size_a = 0;
  std::size_t size_b = 0;
  std::size_t emd_points = 0;
};

SurfaceMetricReport surface_metrics(const PointCloud& pred, const PointCloud& gt,
                                    std::size_t emd_cap = 512, std::uint64_t seed = 0);

struct DepthErrors {
  double mae = 0.0;
  double rmse = 0.0;
  std::size_t count = 0;
};

/// Over pixels valid in both maps; throws std::invalid_argument if none.
DepthErrors depth_errors(const DepthMap& pred, const DepthMap& gt);

/// 2|A and B| / (|A| + |B|) for one object's channel; 1 when both are empty.
double dice(const LabelMask& a, const LabelMask& b, int object_id);

/// Sum over pixels valid in both faces of (back - front) times the pixel
/// footprint at the mid depth. Throws std::invalid_argument if the object
/// is not in the set.
double volume_from_thickness(const DepthMapSet& set, const ImagingGeometry& geom, int object_id);

/// Pearson correlation; throws std::invalid_argument on fewer than 2 values,
/// length mismatch, or zero variance.
double pcc(std::span<const double> x, std::span<const double> y);

}  // namespace radiodepth
