#pragma once

// Lloyd's k-means with k-means++ seeding.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <set>
#include <stdexcept>
#include <vector>

#include "tagpr/random.hpp"

namespace tagpr {

template <class T = double>
struct KMeansResult {
  std::vector<std::size_t> assignments;
  std::vector<std::vector<T>> centroids;
  std::vector<T> inertia_trace;  // after every assignment step
  int iterations = 0;
  bool converged = false;
};

template <class T>
T squared_distance(const std::vector<T>& a, const std::vector<T>& b) {
  T d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

/// Clusters `points` into k groups. Requires k <= number of distinct points.
/// Ties keep a point's current cluster, so the inertia trace never increases.
template <class T>
KMeansResult<T> kmeans(const std::vector<std::vector<T>>& points, std::size_t k, std::uint64_t seed,
                       int max_iters = 100) {
  if (k == 0) throw std::invalid_argument("kmeans: k must be >= 1");
  const std::set<std::vector<T>> distinct(points.begin(), points.end());
  if (k > distinct.size()) throw std::invalid_argument("kmeans: k exceeds the number of distinct points");
  const std::size_t n = points.size();
  const std::size_t dim = points.front().size();
  for (const auto& p : points) {
    if (p.size() != dim) throw std::invalid_argument("kmeans: points have different dimensions");
  }

  KMeansResult<T> res;
  Rng rng(seed);

  // k-means++: first centre uniform, then proportional to squared distance.
  std::vector<T> nearest(n, std::numeric_limits<T>::max());
  res.centroids.push_back(points[rng() % n]);
  while (res.centroids.size() < k) {
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(points[i], res.centroids.back()));
      total += nearest[i];
    }
    T u = static_cast<T>(uniform01(rng)) * total;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest[i] <= T(0)) continue;
      u -= nearest[i];
      if (u < T(0)) {
        pick = i;
        break;
      }
    }
    if (pick == n) {
      for (std::size_t i = n; i-- > 0;) {
        if (nearest[i] > T(0)) {
          pick = i;
          break;
        }
      }
    }
    res.centroids.push_back(points[pick]);
  }

  res.assignments.assign(n, k);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    T inertia = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = res.assignments[i];
      T best_d = best < k ? squared_distance(points[i], res.centroids[best]) : std::numeric_limits<T>::max();
      for (std::size_t c = 0; c < k; ++c) {
        const T d = squared_distance(points[i], res.centroids[c]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      changed = changed || best != res.assignments[i];
      res.assignments[i] = best;
      inertia += best_d;
    }
    res.inertia_trace.push_back(inertia);
    res.iterations = iter + 1;
    if (!changed) {
      res.converged = true;
      break;
    }
    std::vector<std::vector<T>> sums(k, std::vector<T>(dim, T(0)));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[res.assignments[i]];
      for (std::size_t d = 0; d < dim; ++d) sums[res.assignments[i]][d] += points[i][d];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;  // empty cluster keeps its centre
      for (std::size_t d = 0; d < dim; ++d) res.centroids[c][d] = sums[c][d] / static_cast<T>(counts[c]);
    }
  }
  return res;
}

}  // namespace tagpr
