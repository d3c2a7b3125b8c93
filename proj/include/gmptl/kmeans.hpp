#pragma once

#include <cstdint>
#include <vector>

#include "gmptl/common.hpp"

namespace gmptl {

struct KMeansResult {
  Mat centroids;                  // K x D
  std::vector<int> assignments;   // N
  std::vector<double> distortion; // sum of squared distances, one entry per Lloyd iteration
  int iterations = 0;
  bool converged = false;
};

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below `tol` or `max_iters` is reached. Empty clusters are
/// re-seeded at the point farthest from its assigned centroid.
KMeansResult fit_kmeans(const Mat& points, int k, int max_iters, double tol, std::uint64_t seed);

/// Nearest-centroid index per row (ties go to the lower index).
std::vector<int> assign_nearest(const Mat& points, const Mat& centroids);

/// Sum of squared distances of each point to its assigned centroid.
double distortion(const Mat& points, const Mat& centroids, const std::vector<int>& assignments);

}  // namespace gmptl
