#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "hvcm/attribute_space.hpp"
#include "hvcm/feature_store.hpp"

namespace hvcm::synthetic {

/// Isotropic Gaussian blob rows appended to `ds` with the given label.
inline void append_blob(FeatureDataset& ds, const Vector& center, double stddev, std::size_t count,
                        std::int32_t label, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  ds.dim = static_cast<std::uint32_t>(center.size());
  for (std::size_t k = 0; k < count; ++k) {
    for (Eigen::Index j = 0; j < center.size(); ++j) {
      ds.data.push_back(static_cast<float>(center[j] + normal(rng)));
    }
    ds.labels.push_back(label);
    ++ds.n;
  }
}

/// Three unit-variance 2-D classes on an equilateral triangle of side 10
/// (inter-center distance 10x the within-class std) and one OOD blob far
/// below them.
struct BlobTask {
  std::vector<Vector> class_centers;
  Vector ood_center;
  double stddev = 1.0;

  static BlobTask standard() {
    BlobTask t;
    t.class_centers = {Eigen::Vector2d(0.0, 0.0), Eigen::Vector2d(10.0, 0.0),
                       Eigen::Vector2d(5.0, 5.0 * std::sqrt(3.0))};
    t.ood_center = Eigen::Vector2d(5.0, -15.0);
    return t;
  }

  /// Labeled InD rows, `per_class` per class.
  FeatureDataset ind(std::size_t per_class, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    FeatureDataset ds;
    ds.name = "blobs";
    ds.has_labels = true;
    ds.c_max = static_cast<std::uint32_t>(class_centers.size());
    for (std::size_t c = 0; c < class_centers.size(); ++c) {
      append_blob(ds, class_centers[c], stddev, per_class, static_cast<std::int32_t>(c), rng);
    }
    return ds;
  }

  /// OOD rows labeled -1.
  FeatureDataset ood(std::size_t count, std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    FeatureDataset ds;
    ds.name = "blobs-ood";
    ds.has_labels = true;
    ds.c_max = static_cast<std::uint32_t>(class_centers.size());
    append_blob(ds, ood_center, stddev, count, kOodLabel, rng);
    return ds;
  }
};

/// Zero-mean Gaussian with block-diagonal covariance: `blocks` independent
/// blocks of width `block_dim`, each with a random SPD covariance.
struct BlockGaussian {
  Vector mean;
  Matrix factor;  // lower Cholesky factor of the covariance

  Vector sample(std::mt19937_64& rng) const {
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector z(mean.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z[k] = normal(rng);
    return mean + factor * z;
  }
};

inline Matrix random_spd(Eigen::Index dim, std::mt19937_64& rng, double jitter = 0.1) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(dim, dim);
  for (Eigen::Index r = 0; r < dim; ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) a(r, c) = normal(rng);
  }
  Matrix spd = a * a.transpose() / static_cast<double>(dim);
  spd.diagonal().array() += jitter;
  return spd;
}

inline BlockGaussian block_gaussian(const Vector& mean, int blocks, Eigen::Index block_dim,
                                    std::mt19937_64& rng) {
  const auto d = static_cast<Eigen::Index>(blocks) * block_dim;
  Matrix cov = Matrix::Zero(d, d);
  for (int b = 0; b < blocks; ++b) {
    cov.block(b * block_dim, b * block_dim, block_dim, block_dim) = random_spd(block_dim, rng);
  }
  return {mean, Eigen::LLT<Matrix>(cov).matrixL()};
}

inline void append_samples(FeatureDataset& ds, const BlockGaussian& dist, std::size_t count,
                           std::int32_t label, std::mt19937_64& rng) {
  ds.dim = static_cast<std::uint32_t>(dist.mean.size());
  for (std::size_t k = 0; k < count; ++k) {
    const Vector x = dist.sample(rng);
    for (Eigen::Index j = 0; j < x.size(); ++j) ds.data.push_back(static_cast<float>(x[j]));
    ds.labels.push_back(label);
    ++ds.n;
  }
}

}  // namespace hvcm::synthetic
