#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hvcm/error.hpp"

namespace hvcm {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// y = W x + b with W of shape (output_dim x input_dim).
struct AffineMap {
  Matrix weight;
  Vector bias;

  Eigen::Index input_dim() const { return weight.cols(); }
  Eigen::Index output_dim() const { return weight.rows(); }

  static AffineMap identity(Eigen::Index dim) {
    return {Matrix::Identity(dim, dim), Vector::Zero(dim)};
  }
  static AffineMap zero(Eigen::Index out, Eigen::Index in) {
    return {Matrix::Zero(out, in), Vector::Zero(out)};
  }

  bool finite() const { return weight.allFinite() && bias.allFinite(); }
};

/// The single affine layer mapping backbone features into attribute space.
using ProjectionHead = AffineMap;

inline Vector project(const ProjectionHead& head, const Eigen::Ref<const Vector>& feature) {
  require(feature.size() == head.input_dim(), "projection input has length " +
                                                  std::to_string(feature.size()) + ", head expects " +
                                                  std::to_string(head.input_dim()));
  require(head.bias.size() == head.output_dim(), "projection bias length mismatch");
  return head.weight * feature + head.bias;
}

inline Vector to_vector(std::span<const float> values) {
  Vector out(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) out[static_cast<Eigen::Index>(i)] = values[i];
  return out;
}

/// Stack of tanh layers followed by the projection head. With no hidden
/// layers this is just the head.
struct FeatureEncoder {
  std::vector<AffineMap> hidden;
  ProjectionHead head;

  Eigen::Index input_dim() const {
    return hidden.empty() ? head.input_dim() : hidden.front().input_dim();
  }
  Eigen::Index output_dim() const { return head.output_dim(); }

  Vector encode(const Eigen::Ref<const Vector>& feature) const {
    Vector h = feature;
    for (const auto& layer : hidden) h = project(layer, h).array().tanh().matrix();
    return project(head, h);
  }
};

/// An attribute vector cut into G equal contiguous sub-vectors.
struct GroupedAttributes {
  std::vector<Vector> groups;
  bool normalized = false;

  std::size_t group_count() const { return groups.size(); }
  Eigen::Index group_dim() const { return groups.empty() ? 0 : groups.front().size(); }

  Vector concatenate() const {
    Vector out(static_cast<Eigen::Index>(groups.size()) * group_dim());
    for (std::size_t i = 0; i < groups.size(); ++i) {
      out.segment(static_cast<Eigen::Index>(i) * group_dim(), group_dim()) = groups[i];
    }
    return out;
  }
};

/// Group i holds indices [i*d/G, (i+1)*d/G).
inline GroupedAttributes group(const Eigen::Ref<const Vector>& attribute, int group_count) {
  require(group_count >= 1, "group count must be positive");
  const auto d = attribute.size();
  require(d % group_count == 0, "G must divide d (G=" + std::to_string(group_count) +
                                    ", d=" + std::to_string(d) + ")");
  const auto width = d / group_count;
  GroupedAttributes out;
  out.groups.reserve(static_cast<std::size_t>(group_count));
  for (int i = 0; i < group_count; ++i) out.groups.emplace_back(attribute.segment(i * width, width));
  return out;
}

/// softmax(sub / temperature), max-subtracted.
inline Vector normalize_group(const Eigen::Ref<const Vector>& sub, double temperature) {
  require(temperature > 0.0, "softmax temperature must be positive");
  require(sub.size() > 0, "cannot normalize an empty group");
  const Vector scaled = sub / temperature;
  Vector e = (scaled.array() - scaled.maxCoeff()).exp().matrix();
  return e / e.sum();
}

inline GroupedAttributes normalize(const GroupedAttributes& ga, double temperature) {
  GroupedAttributes out;
  out.normalized = true;
  out.groups.reserve(ga.groups.size());
  for (const auto& g : ga.groups) out.groups.push_back(normalize_group(g, temperature));
  return out;
}

}  // namespace hvcm
