#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hvcm/attribute_space.hpp"
#include "hvcm/binary_io.hpp"
#include "hvcm/error.hpp"
#include "hvcm/parallel.hpp"

namespace hvcm {

/// Which representation the per-group statistics are computed on.
enum class StatsMode { raw, softmax };

inline std::string to_string(StatsMode mode) {
  return mode == StatsMode::raw ? "raw" : "softmax";
}

inline StatsMode parse_stats_mode(const std::string& text) {
  if (text == "raw") return StatsMode::raw;
  if (text == "softmax") return StatsMode::softmax;
  fail("unknown statistics mode '" + text + "' (expected raw or softmax)");
}

/// ridge = max(floor, relative * trace(sigma) / dim), multiplied by `factor`
/// on each failed factorization, at most `escalations` times.
struct RidgePolicy {
  double floor = 1e-6;
  double relative = 1e-3;
  int escalations = 3;
  double factor = 10.0;

  static RidgePolicy fixed(double ridge) { return {ridge, 0.0, 3, 10.0}; }

  double initial(const Matrix& sigma) const {
    const double dim = static_cast<double>(std::max<Eigen::Index>(1, sigma.rows()));
    return std::max(floor, relative * sigma.trace() / dim);
  }
};

struct GroupGaussian {
  Vector mu;
  Matrix sigma;
  Matrix chol;  // lower factor of sigma + ridge * I
  double ridge = 0.0;

  Eigen::Index dim() const { return mu.size(); }
};

struct ClassModel {
  int class_id = 0;
  std::vector<GroupGaussian> components;
  std::vector<double> weights;

  /// The G group means laid end to end.
  Vector concatenated_centers() const {
    const auto width = components.empty() ? 0 : components.front().dim();
    Vector out(static_cast<Eigen::Index>(components.size()) * width);
    for (std::size_t i = 0; i < components.size(); ++i) {
      out.segment(static_cast<Eigen::Index>(i) * width, width) = components[i].mu;
    }
    return out;
  }
};

struct ModelConfig {
  int groups = 1;
  Eigen::Index attr_dim = 0;   // d
  Eigen::Index input_dim = 0;  // q, raw feature length
  RidgePolicy ridge;
  StatsMode stats = StatsMode::raw;
  double softmax_temperature = 1.0;
  FeatureEncoder encoder;

  Eigen::Index group_dim() const { return groups > 0 ? attr_dim / groups : 0; }
};

struct HvcmModel {
  ModelConfig config;
  std::vector<ClassModel> classes;
  std::optional<double> threshold;
  bool frozen = false;

  std::size_t class_count() const { return classes.size(); }
};

// ---------------------------------------------------------------------------
// Fitting

/// Factorizes sigma + ridge * I, escalating the ridge on failure.
inline void factorize(GroupGaussian& comp, const RidgePolicy& policy) {
  const auto k = comp.sigma.rows();
  if (!comp.sigma.allFinite()) {
    throw Error(ErrorKind::degenerate_fit, "covariance has non-finite entries");
  }
  double ridge = policy.initial(comp.sigma);
  for (int attempt = 0; attempt <= policy.escalations; ++attempt) {
    Matrix shifted = comp.sigma;
    shifted.diagonal().array() += ridge;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Matrix l = llt.matrixL();
      if ((l.diagonal().array() > 0.0).all() && l.allFinite()) {
        comp.chol = std::move(l);
        comp.ridge = ridge;
        return;
      }
    }
    ridge *= policy.factor;
  }
  throw Error(ErrorKind::degenerate_fit,
              "covariance factorization failed after ridge escalation (dim " +
                  std::to_string(k) + ")");
}

/// Sample mean and unbiased (N-1) covariance of one group, accumulated with
/// Welford's streaming update. N = 1 yields a zero covariance.
template <typename GroupAt>
GroupGaussian fit_group(std::size_t count, Eigen::Index dim, GroupAt&& sample) {
  GroupGaussian comp;
  comp.mu = Vector::Zero(dim);
  Matrix m2 = Matrix::Zero(dim, dim);
  Vector delta(dim);
  for (std::size_t n = 1; n <= count; ++n) {
    const auto& x = sample(n - 1);
    delta = x - comp.mu;
    comp.mu += delta / static_cast<double>(n);
    m2.selfadjointView<Eigen::Lower>().rankUpdate(
        delta, static_cast<double>(n - 1) / static_cast<double>(n));
  }
  if (count > 1) {
    comp.sigma = Matrix(m2.selfadjointView<Eigen::Lower>()) / static_cast<double>(count - 1);
  } else {
    comp.sigma = Matrix::Zero(dim, dim);
  }
  return comp;
}

inline std::vector<double> renormalized(std::span<const double> weights) {
  double total = 0.0;
  for (double w : weights) {
    require(std::isfinite(w) && w >= 0.0, "group weights must be finite and nonnegative");
    total += w;
  }
  require(total > 0.0, "group weights sum to zero");
  std::vector<double> out(weights.begin(), weights.end());
  for (auto& w : out) w /= total;
  return out;
}

inline std::vector<double> uniform_weights(int groups) {
  return std::vector<double>(static_cast<std::size_t>(groups), 1.0 / groups);
}

inline ClassModel fit_class(std::span<const GroupedAttributes> attrs,
                            std::span<const double> weights,
                            const RidgePolicy& policy,
                            int class_id = 0) {
  require(!attrs.empty(), "class " + std::to_string(class_id) + " has zero samples");
  const auto g = attrs.front().group_count();
  const auto width = attrs.front().group_dim();
  for (const auto& ga : attrs) {
    require(ga.group_count() == g && ga.group_dim() == width,
            "samples of class " + std::to_string(class_id) + " disagree on group shape");
  }
  require(weights.size() == g, "expected " + std::to_string(g) + " group weights, got " +
                                   std::to_string(weights.size()));

  ClassModel cm;
  cm.class_id = class_id;
  cm.weights = renormalized(weights);
  cm.components.reserve(g);
  for (std::size_t i = 0; i < g; ++i) {
    auto comp = fit_group(attrs.size(), width,
                          [&](std::size_t m) -> const Vector& { return attrs[m].groups[i]; });
    factorize(comp, policy);
    cm.components.push_back(std::move(comp));
  }
  return cm;
}

// ---------------------------------------------------------------------------
// Scoring

/// -(x - mu)^T (sigma + ridge I)^{-1} (x - mu) via a forward solve on chol.
inline double mahalanobis(const GroupGaussian& comp, const Eigen::Ref<const Vector>& sub) {
  require(sub.size() == comp.dim(), "group length " + std::to_string(sub.size()) +
                                        " does not match component dimension " +
                                        std::to_string(comp.dim()));
  require(comp.chol.rows() == comp.dim(), "component is not factorized");
  const Vector y = comp.chol.triangularView<Eigen::Lower>().solve(sub - comp.mu);
  return 0.0 - y.squaredNorm();
}

inline void check_shape(const ClassModel& cm, const GroupedAttributes& ga) {
  require(ga.group_count() == cm.components.size(),
          "sample has " + std::to_string(ga.group_count()) + " groups, model has " +
              std::to_string(cm.components.size()));
}

/// Weighted sum of group Mahalanobis scores.
inline double class_score(const ClassModel& cm, const GroupedAttributes& ga) {
  check_shape(cm, ga);
  double score = 0.0;
  for (std::size_t i = 0; i < cm.components.size(); ++i) {
    score += cm.weights[i] * mahalanobis(cm.components[i], ga.groups[i]);
  }
  return score;
}

struct DatasetScore {
  double score = 0.0;
  int argmax_class = 0;
};

/// Best class score across all classes; ties go to the lowest class id.
inline DatasetScore dataset_score(const HvcmModel& model, const GroupedAttributes& ga) {
  require(model.frozen, "model is not frozen");
  require(!model.classes.empty(), "model has no classes");
  DatasetScore best{class_score(model.classes.front(), ga), model.classes.front().class_id};
  for (std::size_t c = 1; c < model.classes.size(); ++c) {
    const double s = class_score(model.classes[c], ga);
    if (s > best.score) best = {s, model.classes[c].class_id};
  }
  return best;
}

enum class Decision { ind, ood };

/// InD iff score >= threshold.
inline Decision detect(const HvcmModel& model, double score) {
  require(model.threshold.has_value(), "detection threshold is not set");
  return score >= *model.threshold ? Decision::ind : Decision::ood;
}

/// log sum_i w_i N(a_i; mu_i, sigma_i + ridge I). A diagnostic: the
/// components live on different subspaces, so this is not a density on R^d.
inline double log_density(const ClassModel& cm, const GroupedAttributes& ga) {
  check_shape(cm, ga);
  constexpr double log_2pi = 1.8378770664093454835606594728112;  // ln(2 pi)
  std::vector<double> terms;
  terms.reserve(cm.components.size());
  for (std::size_t i = 0; i < cm.components.size(); ++i) {
    if (cm.weights[i] <= 0.0) continue;
    const auto& comp = cm.components[i];
    require(comp.chol.rows() == comp.dim() && comp.dim() > 0, "component is not factorized");
    const double log_det = 2.0 * comp.chol.diagonal().array().log().sum();
    const double quad = -mahalanobis(comp, ga.groups[i]);
    terms.push_back(std::log(cm.weights[i]) -
                    0.5 * (static_cast<double>(comp.dim()) * log_2pi + log_det + quad));
  }
  if (terms.empty()) return -std::numeric_limits<double>::infinity();
  const double peak = *std::max_element(terms.begin(), terms.end());
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - peak);
  return peak + std::log(acc);
}

/// Maps an attribute vector into the representation the model's statistics
/// were computed on.
inline GroupedAttributes model_groups(const ModelConfig& config, const Eigen::Ref<const Vector>& attribute) {
  require(attribute.size() == config.attr_dim,
          "attribute length " + std::to_string(attribute.size()) + " does not match d=" +
              std::to_string(config.attr_dim));
  auto ga = group(attribute, config.groups);
  return config.stats == StatsMode::softmax ? normalize(ga, config.softmax_temperature) : ga;
}

/// Raw feature -> encoder -> grouped statistics-space attributes.
inline GroupedAttributes feature_groups(const ModelConfig& config, const Eigen::Ref<const Vector>& feature) {
  require(feature.size() == config.input_dim,
          "feature length " + std::to_string(feature.size()) + " does not match model input q=" +
              std::to_string(config.input_dim));
  return model_groups(config, config.encoder.encode(feature));
}

/// Cosine similarity against each class's concatenated centers; ties go to
/// the lowest class id.
inline int classify_cosine(const HvcmModel& model, const Eigen::Ref<const Vector>& attribute) {
  require(!model.classes.empty(), "model has no classes");
  const Vector a = model_groups(model.config, attribute).concatenate();
  const double norm = a.norm();
  require(norm > 0.0, "cannot classify a zero-norm attribute vector");
  int best_class = model.classes.front().class_id;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& cm : model.classes) {
    const Vector centers = cm.concatenated_centers();
    const double cn = centers.norm();
    require(cn > 0.0, "class " + std::to_string(cm.class_id) + " has zero-norm centers");
    const double cosine = a.dot(centers) / (norm * cn);
    if (cosine > best) {
      best = cosine;
      best_class = cm.class_id;
    }
  }
  return best_class;
}

/// Fits every class and returns a frozen model with no threshold.
inline HvcmModel freeze(const std::vector<std::vector<GroupedAttributes>>& class_attrs,
                        const std::vector<std::vector<double>>& weights,
                        ModelConfig config,
                        std::size_t threads = thread_budget()) {
  require(!class_attrs.empty(), "cannot freeze a model without classes");
  require(weights.size() == class_attrs.size(), "one weight vector per class is required");
  HvcmModel model;
  model.config = std::move(config);
  model.classes.resize(class_attrs.size());
  parallel_for(class_attrs.size(), [&](std::size_t c) {
    model.classes[c] = fit_class(class_attrs[c], weights[c], model.config.ridge, static_cast<int>(c));
  }, threads);
  model.frozen = true;
  return model;
}

// ---------------------------------------------------------------------------
// Model file: "HVCM", u32 version, u32 json_len, JSON header, then per class
// G x (f64 weight, mean, lower triangle of chol), then the projection head
// (weights row-major, bias), then any hidden tanh layers.

namespace detail {

inline constexpr char kModelMagic[4] = {'H', 'V', 'C', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

inline void put_affine(std::string& out, const AffineMap& map) {
  for (Eigen::Index r = 0; r < map.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < map.weight.cols(); ++c) io::put<double>(out, map.weight(r, c));
  }
  for (Eigen::Index r = 0; r < map.bias.size(); ++r) io::put<double>(out, map.bias[r]);
}

inline AffineMap get_affine(io::Reader& in, Eigen::Index rows, Eigen::Index cols) {
  AffineMap map{Matrix(rows, cols), Vector(rows)};
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) map.weight(r, c) = in.get<double>();
  }
  for (Eigen::Index r = 0; r < rows; ++r) map.bias[r] = in.get<double>();
  return map;
}

}  // namespace detail

inline std::string encode_model(const HvcmModel& model) {
  const auto& cfg = model.config;
  nlohmann::json header;
  header["G"] = cfg.groups;
  header["d"] = cfg.attr_dim;
  header["q"] = cfg.input_dim;
  header["C"] = model.classes.size();
  header["statistics_mode"] = to_string(cfg.stats);
  header["softmax_temperature"] = cfg.softmax_temperature;
  header["ridge_policy"] = {{"floor", cfg.ridge.floor},
                            {"relative", cfg.ridge.relative},
                            {"escalations", cfg.ridge.escalations},
                            {"factor", cfg.ridge.factor}};
  header["threshold"] = model.threshold ? nlohmann::json(*model.threshold) : nlohmann::json(nullptr);
  auto ridges = nlohmann::json::array();
  for (const auto& cm : model.classes) {
    auto row = nlohmann::json::array();
    for (const auto& comp : cm.components) row.push_back(comp.ridge);
    ridges.push_back(row);
  }
  header["ridges"] = ridges;
  auto widths = nlohmann::json::array();
  for (const auto& layer : cfg.encoder.hidden) widths.push_back(layer.output_dim());
  header["hidden_layers"] = widths;

  const std::string json = header.dump();
  std::string out(detail::kModelMagic, 4);
  io::put<std::uint32_t>(out, detail::kModelVersion);
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(json.size()));
  out += json;
  for (const auto& cm : model.classes) {
    for (std::size_t i = 0; i < cm.components.size(); ++i) {
      const auto& comp = cm.components[i];
      io::put<double>(out, cm.weights[i]);
      for (Eigen::Index k = 0; k < comp.dim(); ++k) io::put<double>(out, comp.mu[k]);
      for (Eigen::Index r = 0; r < comp.dim(); ++r) {
        for (Eigen::Index c = 0; c <= r; ++c) io::put<double>(out, comp.chol(r, c));
      }
    }
  }
  detail::put_affine(out, cfg.encoder.head);
  for (const auto& layer : cfg.encoder.hidden) detail::put_affine(out, layer);
  return out;
}

inline HvcmModel decode_model(std::string_view bytes) {
  io::Reader in(bytes);
  if (in.remaining() < 4 || std::memcmp(in.take(4).data(), detail::kModelMagic, 4) != 0) {
    fail("bad magic");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != detail::kModelVersion) {
    fail("unsupported model file version " + std::to_string(version));
  }
  const auto json_len = in.get<std::uint32_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(in.take(json_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed model header: ") + e.what());
  }

  HvcmModel model;
  auto& cfg = model.config;
  std::vector<std::vector<double>> ridges;
  std::vector<Eigen::Index> hidden;
  std::size_t class_count = 0;
  try {
    cfg.groups = header.at("G").get<int>();
    cfg.attr_dim = header.at("d").get<Eigen::Index>();
    cfg.input_dim = header.at("q").get<Eigen::Index>();
    class_count = header.at("C").get<std::size_t>();
    cfg.stats = parse_stats_mode(header.at("statistics_mode").get<std::string>());
    cfg.softmax_temperature = header.at("softmax_temperature").get<double>();
    const auto& rp = header.at("ridge_policy");
    cfg.ridge = {rp.at("floor").get<double>(), rp.at("relative").get<double>(),
                 rp.at("escalations").get<int>(), rp.at("factor").get<double>()};
    if (!header.at("threshold").is_null()) model.threshold = header["threshold"].get<double>();
    ridges = header.at("ridges").get<std::vector<std::vector<double>>>();
    hidden = header.value("hidden_layers", std::vector<Eigen::Index>{});
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed model header: ") + e.what());
  }
  require(cfg.groups >= 1 && cfg.attr_dim >= 1 && cfg.attr_dim % cfg.groups == 0,
          "model header has inconsistent G and d");
  require(cfg.input_dim >= 1, "model header has invalid q");
  require(ridges.size() == class_count, "model header ridge table does not match C");

  const auto width = cfg.group_dim();
  model.classes.resize(class_count);
  for (std::size_t c = 0; c < class_count; ++c) {
    auto& cm = model.classes[c];
    cm.class_id = static_cast<int>(c);
    require(ridges[c].size() == static_cast<std::size_t>(cfg.groups),
            "model header ridge table does not match G");
    for (int i = 0; i < cfg.groups; ++i) {
      GroupGaussian comp;
      cm.weights.push_back(in.get<double>());
      comp.mu.resize(width);
      for (Eigen::Index k = 0; k < width; ++k) comp.mu[k] = in.get<double>();
      comp.chol = Matrix::Zero(width, width);
      for (Eigen::Index r = 0; r < width; ++r) {
        for (Eigen::Index k = 0; k <= r; ++k) comp.chol(r, k) = in.get<double>();
      }
      comp.ridge = ridges[c][static_cast<std::size_t>(i)];
      comp.sigma = comp.chol * comp.chol.transpose();
      comp.sigma.diagonal().array() -= comp.ridge;
      cm.components.push_back(std::move(comp));
    }
  }
  const auto head_in = hidden.empty() ? cfg.input_dim : hidden.back();
  cfg.encoder.head = detail::get_affine(in, cfg.attr_dim, head_in);
  auto prev = cfg.input_dim;
  for (auto w : hidden) {
    require(w >= 1, "model header has invalid hidden layer width");
    cfg.encoder.hidden.push_back(detail::get_affine(in, w, prev));
    prev = w;
  }
  if (in.remaining() != 0) fail("trailing bytes after model payload");
  model.frozen = true;
  return model;
}

inline void save_model(const HvcmModel& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_model(model));
}

inline HvcmModel load_model(const std::filesystem::path& path) {
  return decode_model(io::read_file(path));
}

}  // namespace hvcm
