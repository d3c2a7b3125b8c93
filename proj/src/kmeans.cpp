#include "gmptl/kmeans.hpp"

#include <limits>

#include "gmptl/error.hpp"

namespace gmptl {

namespace {

// Squared distances from `x` to every centroid row.
inline Eigen::VectorXd sq_dists(const Mat& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  return (centroids.rowwise() - x).rowwise().squaredNorm();
}

}  // namespace

std::vector<int> assign_nearest(const Mat& points, const Mat& centroids) {
  std::vector<int> out(static_cast<std::size_t>(points.rows()));
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    Eigen::Index best = 0;
    sq_dists(centroids, points.row(i)).minCoeff(&best);
    out[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

double distortion(const Mat& points, const Mat& centroids, const std::vector<int>& assignments) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    total += (points.row(i) - centroids.row(assignments[static_cast<std::size_t>(i)])).squaredNorm();
  return total;
}

KMeansResult fit_kmeans(const Mat& points, int k, int max_iters, double tol, std::uint64_t seed) {
  const Eigen::Index n = points.rows(), d = points.cols();
  if (k <= 0) fail(ErrorCode::ConfigInvalid, "k-means: K must be positive");
  if (n < k) fail(ErrorCode::TooFewPoints, "k-means: " + std::to_string(n) + " points for K=" + std::to_string(k));
  if (max_iters <= 0 || tol < 0.0) fail(ErrorCode::ConfigInvalid, "k-means: max_iters > 0 and tol >= 0 required");
  if (!points.allFinite()) fail(ErrorCode::NonFiniteInput, "k-means: non-finite points");

  Rng rng(seed);
  KMeansResult res;
  res.centroids.resize(k, d);

  // k-means++ seeding.
  std::uniform_int_distribution<Eigen::Index> first(0, n - 1);
  res.centroids.row(0) = points.row(first(rng));
  Eigen::VectorXd closest(n);
  for (Eigen::Index i = 0; i < n; ++i) closest(i) = (points.row(i) - res.centroids.row(0)).squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int c = 1; c < k; ++c) {
    const double total = closest.sum();
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double r = unit(rng) * total;
      pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        r -= closest(i);
        if (r < 0.0 && closest(i) > 0.0) {
          pick = i;
          break;
        }
      }
      // Guard against rounding landing on an already-chosen point.
      if (closest(pick) == 0.0) closest.maxCoeff(&pick);
    } else {
      pick = first(rng);
    }
    res.centroids.row(c) = points.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) closest(i) = std::min(closest(i), (points.row(i) - res.centroids.row(c)).squaredNorm());
  }

  res.assignments = assign_nearest(points, res.centroids);
  res.distortion.push_back(distortion(points, res.centroids, res.assignments));

  for (int it = 0; it < max_iters; ++it) {
    Mat sums = Mat::Zero(k, d);
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = res.assignments[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    Mat updated = res.centroids;
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        updated.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
        continue;
      }
      // Empty cluster: move it onto the worst-served point not already used.
      Eigen::Index worst = -1;
      double worst_d = -1.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        const double dist = (points.row(i) - res.centroids.row(res.assignments[static_cast<std::size_t>(i)])).squaredNorm();
        if (dist > worst_d) {
          worst_d = dist;
          worst = i;
        }
      }
      taken[static_cast<std::size_t>(worst)] = 1;
      updated.row(c) = points.row(worst);
    }
    const double shift = (updated - res.centroids).rowwise().norm().maxCoeff();
    res.centroids = std::move(updated);
    res.assignments = assign_nearest(points, res.centroids);
    res.distortion.push_back(distortion(points, res.centroids, res.assignments));
    res.iterations = it + 1;
    if (shift <= tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

}  // namespace gmptl
