#include "radiodepth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "radiodepth/common.hpp"
#include "radiodepth/kdtree.hpp"

namespace radiodepth {

namespace {

void require_nonempty(const PointCloud& a, const PointCloud& b, const char* what) {
  if (a.empty() || b.empty())
    throw std::invalid_argument(std::string(what) + ": empty point cloud");
}

// Directed distances a->b followed by b->a.
std::vector<double> pooled_distances(const PointCloud& a, const PointCloud& b) {
  std::vector<double> d = nearest_distances(a.points, b.points);
  const std::vector<double> back = nearest_distances(b.points, a.points);
  d.insert(d.end(), back.begin(), back.end());
  return d;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return v[lo] + frac * (v[hi] - v[lo]);
}

double mean_of_squares(const std::vector<double>& d) {
  std::vector<double> sq(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) sq[i] = d[i] * d[i];
  return pairwise_sum(sq) / static_cast<double>(d.size());
}

}  // namespace

double assd(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b, "assd");
  const auto d = pooled_distances(a, b);
  return pairwise_sum(d) / static_cast<double>(d.size());
}

double hd95(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b, "hd95");
  return percentile(pooled_distances(a, b), 0.95);
}

double hausdorff(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b, "hausdorff");
  const auto d = pooled_distances(a, b);
  return *std::max_element(d.begin(), d.end());
}

double cd_l2(const PointCloud& a, const PointCloud& b) {
  require_nonempty(a, b, "cd_l2");
  return mean_of_squares(nearest_distances(a.points, b.points)) +
         mean_of_squares(nearest_distances(b.points, a.points));
}

std::vector<std::size_t> subsample_indices(std::size_t size, std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (n >= size) return idx;
  Rng rng(seed);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(size - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::vector<std::size_t> hungarian(std::span<const double> cost, std::size_t n) {
  if (cost.size() != n * n) throw std::invalid_argument("hungarian: cost matrix is not n x n");
  // Shortest augmenting path with potentials; 1-based, column 0 is a sentinel.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> assignment(n);
  for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
  return assignment;
}

double emd(const PointCloud& a, const PointCloud& b, std::size_t cap, std::uint64_t seed) {
  require_nonempty(a, b, "emd");
  if (cap == 0) throw std::invalid_argument("emd: cap must be positive");
  const std::size_t n = std::min({a.size(), b.size(), cap});
  const auto ia = subsample_indices(a.size(), n, derive_seed(seed, "emd-a"));
  const auto ib = subsample_indices(b.size(), n, derive_seed(seed, "emd-b"));
  std::vector<double> cost(n * n);
  parallel_for(n, [&](std::size_t r) {
    for (std::size_t c = 0; c < n; ++c)
      cost[r * n + c] = (a.points[ia[r]] - b.points[ib[c]]).norm();
  });
  const auto match = hungarian(cost, n);
  std::vector<double> matched(n);
  for (std::size_t r = 0; r < n; ++r) matched[r] = cost[r * n + match[r]];
  return pairwise_sum(matched) / static_cast<double>(n);
}

SurfaceMetricReport surface_metrics(const PointCloud& pred, const PointCloud& gt,
                                    std::size_t emd_cap, std::uint64_t seed) {
  require_nonempty(pred, gt, "surface_metrics");
  SurfaceMetricReport r;
  const auto ab = nearest_distances(pred.points, gt.points);
  const auto ba = nearest_distances(gt.points, pred.points);
  std::vector<double> pooled = ab;
  pooled.insert(pooled.end(), ba.begin(), ba.end());
  r.assd = pairwise_sum(pooled) / static_cast<double>(pooled.size());
  r.hd95 = percentile(pooled, 0.95);
  r.cd_l2 = mean_of_squares(ab) + mean_of_squares(ba);
  r.emd = emd(pred, gt, emd_cap, seed);
  r.size_a = pred.size();
  r.size_b = gt.size();
  r.emd_points = std::min({pred.size(), gt.size(), emd_cap});
  return r;
}

DepthErrors depth_errors(const DepthMap& pred, const DepthMap& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height())
    throw std::invalid_argument("depth_errors: map dimensions differ");
  std::vector<double> abs_err, sq_err;
  for (std::size_t i = 0; i < gt.values().size(); ++i) {
    if (!pred.valid(i) || !gt.valid(i)) continue;
    const double e = pred[i] - gt[i];
    abs_err.push_back(std::abs(e));
    sq_err.push_back(e * e);
  }
  if (abs_err.empty()) throw std::invalid_argument("depth_errors: no overlapping valid pixels");
  const double n = static_cast<double>(abs_err.size());
  return {pairwise_sum(abs_err) / n, std::sqrt(pairwise_sum(sq_err) / n), abs_err.size()};
}

double dice(const LabelMask& a, const LabelMask& b, int object_id) {
  if (a.width() != b.width() || a.height() != b.height())
    throw std::invalid_argument("dice: mask dimensions differ");
  const auto ca = a.channel_of(object_id);
  const auto cb = b.channel_of(object_id);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    const bool ia = ca && a.has(*ca, p);
    const bool ib = cb && b.has(*cb, p);
    na += ia;
    nb += ib;
    both += ia && ib;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double volume_from_thickness(const DepthMapSet& set, const ImagingGeometry& geom, int object_id) {
  const auto k = set.object_index(object_id);
  if (!k) throw std::invalid_argument("volume_from_thickness: object " +
                                      std::to_string(object_id) + " not in the depth set");
  const DepthMap& f = set.front(*k);
  const DepthMap& b = set.back(*k);
  if (f.width() != geom.width || f.height() != geom.height)
    throw std::invalid_argument("volume_from_thickness: geometry does not match the maps");
  std::vector<double> terms;
  for (std::size_t i = 0; i < f.values().size(); ++i) {
    if (!f.valid(i) || !b.valid(i)) continue;
    const double mid = 0.5 * (f[i] + b[i]);
    terms.push_back((b[i] - f[i]) * pixel_footprint_area(geom, f.u_of(i), f.v_of(i), mid));
  }
  return pairwise_sum(terms);
}

double pcc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("pcc: series lengths differ");
  if (x.size() < 2) throw std::invalid_argument("pcc: need at least 2 values");
  const double n = static_cast<double>(x.size());
  const double mx = pairwise_sum(x) / n;
  const double my = pairwise_sum(y) / n;
  std::vector<double> sxy(x.size()), sxx(x.size()), syy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy[i] = (x[i] - mx) * (y[i] - my);
    sxx[i] = (x[i] - mx) * (x[i] - mx);
    syy[i] = (y[i] - my) * (y[i] - my);
  }
  const double vx = pairwise_sum(sxx), vy = pairwise_sum(syy);
  if (!(vx > 0.0) || !(vy > 0.0)) throw std::invalid_argument("pcc: zero variance");
  return std::clamp(pairwise_sum(sxy) / std::sqrt(vx * vy), -1.0, 1.0);
}

}  // namespace radiodepth
