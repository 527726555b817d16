#pragma once

// Shared fixtures and independent oracles for the test suites. Everything
// here is deliberately implemented without touching the library's training
// or decoding internals, so it can serve as a second opinion.

#include <sidkit/common.hpp>
#include <sidkit/data.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace testutil {

using sidkit::MatF;
using sidkit::MatX;
using sidkit::VecX;

inline std::string temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() /
             ("sidkit_test_" + tag + "_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  return dir.string();
}

// Gaussian mixture with well-separated unit-norm centers.
struct PlantedMixture {
  MatF points;              // n x d
  std::vector<int> labels;  // planted cluster per point
  MatF centers;             // k x d
};

inline PlantedMixture make_planted_mixture(int n, int d, int k, double sigma,
                                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  PlantedMixture m;
  m.centers = MatF(k, d);
  for (;;) {
    for (int c = 0; c < k; ++c) {
      Eigen::VectorXd v(d);
      for (int j = 0; j < d; ++j) v(j) = gauss(rng);
      v.normalize();
      m.centers.row(c) = v.cast<float>();
    }
    double min_sep = 1e9;
    for (int a = 0; a < k; ++a)
      for (int b = a + 1; b < k; ++b)
        min_sep = std::min(min_sep,
                           double((m.centers.row(a) - m.centers.row(b)).norm()));
    if (min_sep > 0.5) break;  // resample rare near-collisions
  }
  m.points = MatF(n, d);
  m.labels.resize(n);
  std::uniform_int_distribution<int> pick(0, k - 1);
  for (int i = 0; i < n; ++i) {
    int c = pick(rng);
    m.labels[i] = c;
    for (int j = 0; j < d; ++j)
      m.points(i, j) = m.centers(c, j) + float(sigma * gauss(rng));
  }
  return m;
}

inline sidkit::ItemCatalog catalog_from_matrix(const MatF& points,
                                               const std::string& prefix = "it") {
  std::vector<std::string> ids;
  ids.reserve(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    ids.push_back(prefix + std::to_string(i));
  return sidkit::ItemCatalog::from_rows(std::move(ids), points);
}

// Adjusted Rand index between two labelings (standard contingency formula).
inline double adjusted_rand_index(const std::vector<int>& a,
                                  const std::vector<int>& b) {
  const std::size_t n = a.size();
  std::map<std::pair<int, int>, long long> cont;
  std::map<int, long long> ra, rb;
  for (std::size_t i = 0; i < n; ++i) {
    ++cont[{a[i], b[i]}];
    ++ra[a[i]];
    ++rb[b[i]];
  }
  auto choose2 = [](long long x) { return x * (x - 1) / 2.0; };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (auto& [key, c] : cont) sum_ij += choose2(c);
  for (auto& [key, c] : ra) sum_a += choose2(c);
  for (auto& [key, c] : rb) sum_b += choose2(c);
  double total = choose2(static_cast<long long>(n));
  double expected = sum_a * sum_b / total;
  double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

// Full-batch Lloyd assignment: nearest centroid, ties to the lowest index.
inline std::vector<int> lloyd_assign(const MatF& points, const MatF& centroids) {
  std::vector<int> labels(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    int best = 0;
    float best_d = (points.row(i) - centroids.row(0)).squaredNorm();
    for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
      float d = (points.row(i) - centroids.row(c)).squaredNorm();
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(c);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
  }
  return labels;
}

// Full-batch Lloyd iteration until assignments stabilize.
inline std::pair<MatF, std::vector<int>> lloyd_kmeans(const MatF& points,
                                                      MatF centroids,
                                                      int max_iters = 200) {
  std::vector<int> labels;
  for (int it = 0; it < max_iters; ++it) {
    auto next = lloyd_assign(points, centroids);
    MatF sums = MatF::Zero(centroids.rows(), centroids.cols());
    std::vector<int> counts(static_cast<std::size_t>(centroids.rows()), 0);
    for (Eigen::Index i = 0; i < points.rows(); ++i) {
      sums.row(next[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(next[static_cast<std::size_t>(i)])];
    }
    for (Eigen::Index c = 0; c < centroids.rows(); ++c)
      if (counts[static_cast<std::size_t>(c)] > 0)
        centroids.row(c) = sums.row(c) / float(counts[static_cast<std::size_t>(c)]);
    if (next == labels) break;
    labels = std::move(next);
  }
  return {centroids, labels};
}

}  // namespace testutil
