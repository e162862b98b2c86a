#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hvcm/attribute_space.hpp"
#include "hvcm/class_density.hpp"
#include "hvcm/error.hpp"
#include "hvcm/feature_store.hpp"

namespace hvcm {

/// Divergence used by the two center terms.
enum class Objective { l2, kl, js };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::l2: return "L2";
    case Objective::kl: return "KL";
    case Objective::js: return "JS";
  }
  return "?";
}

inline Objective parse_objective(const std::string& text) {
  if (text == "L2" || text == "l2") return Objective::l2;
  if (text == "KL" || text == "kl") return Objective::kl;
  if (text == "JS" || text == "js") return Objective::js;
  fail("objective: unknown value '" + text + "' (expected L2, KL or JS)");
}

struct TrainConfig {
  // Loss coefficients.
  double alpha = 1.0;
  double beta = 0.1;
  // gamma1 / gamma2 scale the Adam step for network and centers; gamma3 is the
  // EMA rate of the stored group weights.
  double gamma1 = 1.0;
  double gamma2 = 1.0;
  double gamma3 = 1e-4;
  double learning_rate = 1e-2;
  double teacher_momentum = 0.99;
  double tau_s = 0.1;
  double tau_t = 0.04;
  double tau_attr = 1.0;  // per-group softmax for attributes and centers
  Objective objective = Objective::js;
  int views = 2;
  double noise_std = 0.1;
  double mask_rate = 0.1;
  int epochs = 20;
  int batch_size = 32;
  std::uint64_t seed = 0;
  int groups = 4;
  int attr_dim = 16;
  std::vector<int> hidden = {16};
  double init_scale = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool standardize_inputs = true;  // z-score inputs with training-set statistics
};

/// Rejects out-of-range settings; the message names the offending field.
inline void validate(const TrainConfig& c) {
  auto check = [](bool ok, const std::string& field, const std::string& rule) {
    if (!ok) fail(field + " " + rule);
  };
  check(c.alpha >= 0.0, "alpha", "must be nonnegative");
  check(c.beta >= 0.0, "beta", "must be nonnegative");
  check(c.gamma1 >= 0.0, "gamma1", "must be nonnegative");
  check(c.gamma2 >= 0.0, "gamma2", "must be nonnegative");
  check(c.gamma3 >= 0.0 && c.gamma3 <= 1.0, "gamma3", "must lie in [0,1]");
  check(c.learning_rate > 0.0, "learning_rate", "must be positive");
  check(c.teacher_momentum >= 0.0 && c.teacher_momentum <= 1.0, "teacher_momentum",
        "must lie in [0,1]");
  check(c.tau_s > 0.0, "tau_s", "must be positive");
  check(c.tau_t > 0.0, "tau_t", "must be positive");
  check(c.tau_attr > 0.0, "tau_attr", "must be positive");
  check(c.views >= 1, "views", "must be at least 1");
  check(c.noise_std >= 0.0, "noise_std", "must be nonnegative");
  check(c.mask_rate >= 0.0 && c.mask_rate < 1.0, "mask_rate", "must lie in [0,1)");
  check(c.epochs >= 0, "epochs", "must be nonnegative");
  check(c.batch_size >= 1, "batch_size", "must be positive");
  check(c.groups >= 1, "groups", "must be positive");
  check(c.attr_dim >= 1 && c.attr_dim % std::max(1, c.groups) == 0, "attr_dim",
        "must be a positive multiple of groups");
  for (int w : c.hidden) check(w >= 1, "hidden", "widths must be positive");
  check(c.init_scale > 0.0, "init_scale", "must be positive");
  check(c.adam_beta1 >= 0.0 && c.adam_beta1 < 1.0, "adam_beta1", "must lie in [0,1)");
  check(c.adam_beta2 >= 0.0 && c.adam_beta2 < 1.0, "adam_beta2", "must lie in [0,1)");
  check(c.adam_eps > 0.0, "adam_eps", "must be positive");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"alpha", c.alpha},           {"beta", c.beta},
          {"gamma1", c.gamma1},         {"gamma2", c.gamma2},
          {"gamma3", c.gamma3},         {"learning_rate", c.learning_rate},
          {"teacher_momentum", c.teacher_momentum},
          {"tau_s", c.tau_s},           {"tau_t", c.tau_t},
          {"tau_attr", c.tau_attr},     {"objective", to_string(c.objective)},
          {"views", c.views},           {"noise_std", c.noise_std},
          {"mask_rate", c.mask_rate},   {"epochs", c.epochs},
          {"batch_size", c.batch_size}, {"seed", c.seed},
          {"groups", c.groups},         {"attr_dim", c.attr_dim},
          {"hidden", c.hidden},         {"init_scale", c.init_scale},
          {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},     {"standardize_inputs", c.standardize_inputs}};
}

/// Strict parse: keys not present in TrainConfig are rejected. Missing keys
/// keep their defaults.
inline TrainConfig config_from_json(const nlohmann::json& j) {
  require(j.is_object(), "training config must be a JSON object");
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) fail("unknown training config key '" + key + "'");
  }
  auto read = [&](const char* key, auto& field) {
    if (!j.contains(key)) return;
    try {
      field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    } catch (const nlohmann::json::exception&) {
      fail(std::string(key) + " has the wrong type");
    }
  };
  read("alpha", c.alpha);
  read("beta", c.beta);
  read("gamma1", c.gamma1);
  read("gamma2", c.gamma2);
  read("gamma3", c.gamma3);
  read("learning_rate", c.learning_rate);
  read("teacher_momentum", c.teacher_momentum);
  read("tau_s", c.tau_s);
  read("tau_t", c.tau_t);
  read("tau_attr", c.tau_attr);
  if (j.contains("objective")) {
    std::string name;
    read("objective", name);
    c.objective = parse_objective(name);
  }
  read("views", c.views);
  read("noise_std", c.noise_std);
  read("mask_rate", c.mask_rate);
  read("epochs", c.epochs);
  read("batch_size", c.batch_size);
  read("seed", c.seed);
  read("groups", c.groups);
  read("attr_dim", c.attr_dim);
  read("hidden", c.hidden);
  read("init_scale", c.init_scale);
  read("adam_beta1", c.adam_beta1);
  read("adam_beta2", c.adam_beta2);
  read("adam_eps", c.adam_eps);
  read("standardize_inputs", c.standardize_inputs);
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Distribution helpers

namespace detail {

inline constexpr double kTiny = 1e-300;

inline double log_sum_exp(const Vector& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

/// Pullback of a gradient on p = softmax(z / tau) onto z.
inline Vector softmax_backward(const Vector& p, const Vector& grad_p, double tau) {
  return (p.array() * (grad_p.array() - grad_p.dot(p))).matrix() / tau;
}

inline bool on_simplex(const Vector& p, double tol = 1e-6) {
  return (p.array() >= 0.0).all() && std::abs(p.sum() - 1.0) <= tol;
}

}  // namespace detail

/// A divergence value with its partial derivatives in both arguments.
struct DivergenceEval {
  double value = 0.0;
  Vector d_first;
  Vector d_second;
};

/// D(p || q) for the configured objective. L2 is the squared Euclidean distance.
inline DivergenceEval divergence(Objective objective, const Vector& p, const Vector& q) {
  require(p.size() == q.size(), "divergence arguments differ in length");
  DivergenceEval out;
  switch (objective) {
    case Objective::l2: {
      const Vector diff = p - q;
      out.value = diff.squaredNorm();
      out.d_first = 2.0 * diff;
      out.d_second = -2.0 * diff;
      break;
    }
    case Objective::kl: {
      const auto pc = p.array().max(detail::kTiny);
      const auto qc = q.array().max(detail::kTiny);
      const Eigen::ArrayXd log_ratio = (pc / qc).log();
      out.value = (p.array() * log_ratio).sum();
      out.d_first = (log_ratio + 1.0).matrix();
      out.d_second = (-p.array() / qc).matrix();
      break;
    }
    case Objective::js: {
      const Eigen::ArrayXd m = (0.5 * (p + q)).array().max(detail::kTiny);
      const Eigen::ArrayXd lp = (p.array().max(detail::kTiny) / m).log();
      const Eigen::ArrayXd lq = (q.array().max(detail::kTiny) / m).log();
      out.value = 0.5 * ((p.array() * lp).sum() + (q.array() * lq).sum());
      out.d_first = (0.5 * lp).matrix();
      out.d_second = (0.5 * lq).matrix();
      break;
    }
  }
  return out;
}

/// Cross-entropy of softmax(student / tau_s) under softmax(teacher / tau_t).
/// The teacher distribution is a constant.
inline double kd_loss(const Vector& student_attr, const Vector& teacher_attr, double tau_s,
                      double tau_t, Vector* grad_student = nullptr) {
  require(tau_s > 0.0 && tau_t > 0.0, "distillation temperatures must be positive");
  require(student_attr.size() == teacher_attr.size(), "student and teacher lengths differ");
  const Vector target = normalize_group(teacher_attr, tau_t);
  const Vector zs = student_attr / tau_s;
  const Vector log_ps = zs.array() - detail::log_sum_exp(zs);
  if (grad_student) *grad_student = (log_ps.array().exp().matrix() - target) / tau_s;
  return -target.dot(log_ps);
}

inline void check_normalized(const GroupedAttributes& ga, const char* what) {
  for (const auto& g : ga.groups) {
    require(detail::on_simplex(g), std::string(what) + " groups must be softmax-normalized");
  }
}

/// sum_i D(a_i || mu_i).
inline double center_align_loss(const GroupedAttributes& ga, const GroupedAttributes& centers,
                                Objective objective) {
  require(ga.group_count() == centers.group_count(), "group counts differ");
  if (objective != Objective::l2) {
    check_normalized(ga, "attribute");
    check_normalized(centers, "center");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < ga.group_count(); ++i) {
    total += divergence(objective, ga.groups[i], centers.groups[i]).value;
  }
  return total;
}

/// sum_i w_i(x) D(mu_i || a_i).
inline double weighted_center_loss(const GroupedAttributes& ga, const GroupedAttributes& centers,
                                   std::span<const double> sample_weights, Objective objective) {
  require(ga.group_count() == centers.group_count(), "group counts differ");
  require(sample_weights.size() == ga.group_count(), "one weight per group is required");
  double sum = 0.0;
  for (double w : sample_weights) {
    require(w >= 0.0, "sample weights must be nonnegative");
    sum += w;
  }
  require(std::abs(sum - 1.0) <= 1e-6, "sample weights must sum to 1");
  if (objective != Objective::l2) {
    check_normalized(ga, "attribute");
    check_normalized(centers, "center");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < ga.group_count(); ++i) {
    total += sample_weights[i] * divergence(objective, centers.groups[i], ga.groups[i]).value;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Trainable state

/// Learnable center logits for every class plus the stored EMA group weights
/// and the linear layer predicting per-sample group weights.
struct CenterBank {
  Matrix centers;         // C x d; row c holds the G group logits end to end
  Matrix weights;         // C x G, rows on the simplex
  AffineMap weight_head;  // G x d
};

struct TrainState {
  // Inputs are mapped to (z - input_mean) .* input_scale before the encoder.
  Vector input_mean;
  Vector input_scale;
  FeatureEncoder student;
  FeatureEncoder teacher;
  CenterBank bank;
  int groups = 1;
  Vector adam_m;
  Vector adam_v;
  std::uint64_t step = 0;
  std::mt19937_64 rng;
};

namespace detail {

template <typename Encoder, typename Fn>
void for_each_layer(Encoder& enc, Fn&& fn) {
  for (auto& layer : enc.hidden) fn(layer);
  fn(enc.head);
}

inline Eigen::Index layer_size(const AffineMap& m) { return m.weight.size() + m.bias.size(); }

inline Eigen::Index encoder_size(const FeatureEncoder& enc) {
  Eigen::Index n = 0;
  for_each_layer(enc, [&](const AffineMap& m) { n += layer_size(m); });
  return n;
}

// Row-major weights then bias, layer by layer.
inline void write_layer(const AffineMap& m, Vector& flat, Eigen::Index& pos) {
  for (Eigen::Index r = 0; r < m.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.weight.cols(); ++c) flat[pos++] = m.weight(r, c);
  }
  for (Eigen::Index r = 0; r < m.bias.size(); ++r) flat[pos++] = m.bias[r];
}

inline void read_layer(AffineMap& m, const Vector& flat, Eigen::Index& pos) {
  for (Eigen::Index r = 0; r < m.weight.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.weight.cols(); ++c) m.weight(r, c) = flat[pos++];
  }
  for (Eigen::Index r = 0; r < m.bias.size(); ++r) m.bias[r] = flat[pos++];
}

}  // namespace detail

/// Offsets of the three trainable blocks inside the flat parameter vector:
/// [student encoder | centers (row-major) | weight head].
struct ParameterLayout {
  Eigen::Index encoder = 0;
  Eigen::Index centers = 0;
  Eigen::Index head = 0;

  Eigen::Index total() const { return encoder + centers + head; }
};

inline ParameterLayout layout_of(const TrainState& s) {
  return {detail::encoder_size(s.student), s.bank.centers.size(),
          detail::layer_size(s.bank.weight_head)};
}

inline Vector pack_parameters(const TrainState& s) {
  Vector flat(layout_of(s).total());
  Eigen::Index pos = 0;
  detail::for_each_layer(s.student, [&](const AffineMap& m) { detail::write_layer(m, flat, pos); });
  for (Eigen::Index r = 0; r < s.bank.centers.rows(); ++r) {
    for (Eigen::Index c = 0; c < s.bank.centers.cols(); ++c) flat[pos++] = s.bank.centers(r, c);
  }
  detail::write_layer(s.bank.weight_head, flat, pos);
  return flat;
}

inline void unpack_parameters(TrainState& s, const Vector& flat) {
  require(flat.size() == layout_of(s).total(), "parameter vector length mismatch");
  Eigen::Index pos = 0;
  detail::for_each_layer(s.student, [&](AffineMap& m) { detail::read_layer(m, flat, pos); });
  for (Eigen::Index r = 0; r < s.bank.centers.rows(); ++r) {
    for (Eigen::Index c = 0; c < s.bank.centers.cols(); ++c) s.bank.centers(r, c) = flat[pos++];
  }
  detail::read_layer(s.bank.weight_head, flat, pos);
}

/// Gaussian-noise initialization: encoder weights N(0, init_scale^2 / fan_in),
/// center logits N(0, init_scale^2), weight head N(0, 1 / d), zero biases.
/// Stored weights start uniform and the teacher is an exact copy.
inline TrainState init_state(const TrainConfig& config, int input_dim, int class_count) {
  validate(config);
  require(input_dim >= 1, "input dimension must be positive");
  require(class_count >= 1, "at least one class is required");
  TrainState s;
  s.groups = config.groups;
  s.rng.seed(config.seed);
  s.input_mean = Vector::Zero(input_dim);
  s.input_scale = Vector::Ones(input_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double std) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = std * normal(s.rng);
    }
    return m;
  };
  Eigen::Index prev = input_dim;
  for (int w : config.hidden) {
    s.student.hidden.push_back(
        {gaussian(w, prev, config.init_scale / std::sqrt(static_cast<double>(prev))), Vector::Zero(w)});
    prev = w;
  }
  s.student.head = {gaussian(config.attr_dim, prev, config.init_scale / std::sqrt(static_cast<double>(prev))),
                    Vector::Zero(config.attr_dim)};
  s.teacher = s.student;
  s.bank.centers = gaussian(class_count, config.attr_dim, config.init_scale);
  s.bank.weights = Matrix::Constant(class_count, config.groups, 1.0 / config.groups);
  s.bank.weight_head = {gaussian(config.groups, config.attr_dim, 1.0 / std::sqrt(static_cast<double>(config.attr_dim))),
                        Vector::Zero(config.groups)};
  const auto n = layout_of(s).total();
  s.adam_m = Vector::Zero(n);
  s.adam_v = Vector::Zero(n);
  return s;
}

/// V perturbed copies of a sample: coordinates zeroed with probability
/// `mask_rate`, the rest shifted by N(0, noise_std^2).
inline std::vector<Vector> augment_views(const Vector& sample, int views, double noise_std,
                                         double mask_rate, std::mt19937_64& rng) {
  require(views >= 2, "augmentation needs at least 2 views");
  require(noise_std >= 0.0 && mask_rate >= 0.0 && mask_rate < 1.0, "invalid augmentation settings");
  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<Vector> out;
  out.reserve(static_cast<std::size_t>(views));
  for (int v = 0; v < views; ++v) {
    Vector x = sample;
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      if (mask_rate > 0.0 && unit(rng) < mask_rate) {
        x[k] = 0.0;
      } else if (noise_std > 0.0) {
        x[k] += noise_std * noise(rng);
      }
    }
    out.push_back(std::move(x));
  }
  return out;
}

/// One labeled sample with its (already augmented) views.
struct TrainSample {
  std::vector<Vector> views;
  int label = 0;
};

using Batch = std::vector<TrainSample>;

struct LossTerms {
  double total = 0.0;
  double kd = 0.0;
  double align = 0.0;     // alpha-scaled
  double weighted = 0.0;  // beta-scaled
};

struct LossResult {
  LossTerms terms;
  Vector gradient;                    // same layout as pack_parameters
  std::vector<Vector> sample_weights; // per sample, mean predicted weights over views
};

namespace detail {

struct ForwardCache {
  std::vector<Vector> inputs;  // input to each layer
  std::vector<Vector> outputs; // tanh outputs of hidden layers
  Vector out;
};

inline ForwardCache forward(const FeatureEncoder& enc, const Vector& x) {
  ForwardCache c;
  Vector h = x;
  for (const auto& layer : enc.hidden) {
    c.inputs.push_back(h);
    h = (layer.weight * h + layer.bias).array().tanh().matrix();
    c.outputs.push_back(h);
  }
  c.inputs.push_back(h);
  c.out = enc.head.weight * h + enc.head.bias;
  return c;
}

// Accumulates dL/dtheta into grad[0, encoder_size) given dL/d(out).
inline void backward(const FeatureEncoder& enc, const ForwardCache& c, const Vector& grad_out,
                     Vector& grad) {
  // Offsets of each layer in the flat layout.
  std::vector<Eigen::Index> offsets;
  Eigen::Index pos = 0;
  for_each_layer(enc, [&](const AffineMap& m) {
    offsets.push_back(pos);
    pos += layer_size(m);
  });

  auto accumulate = [&](const AffineMap& m, Eigen::Index off, const Vector& delta, const Vector& input) {
    for (Eigen::Index r = 0; r < m.weight.rows(); ++r) {
      for (Eigen::Index k = 0; k < m.weight.cols(); ++k) grad[off + r * m.weight.cols() + k] += delta[r] * input[k];
    }
    grad.segment(off + m.weight.size(), m.bias.size()) += delta;
  };

  const std::size_t layers = enc.hidden.size();
  Vector delta = grad_out;
  accumulate(enc.head, offsets[layers], delta, c.inputs[layers]);
  Vector upstream = enc.head.weight.transpose() * delta;
  for (std::size_t l = layers; l-- > 0;) {
    const auto& act = c.outputs[l];
    delta = (upstream.array() * (1.0 - act.array().square())).matrix();
    accumulate(enc.hidden[l], offsets[l], delta, c.inputs[l]);
    upstream = enc.hidden[l].weight.transpose() * delta;
  }
}

}  // namespace detail

/// Batch-mean objective
///   L_KD + alpha * sum_i D(a_i || mu_i) + beta * sum_i w_i(x) D(mu_i || a_i)
/// with analytic gradients for the student encoder, the center logits and the
/// weight head. L_KD averages teacher(view u) -> student(view v) cross-entropy
/// over ordered pairs u != v, so a single view contributes no distillation
/// term. Center terms are averaged over views.
inline LossResult total_loss(const Batch& batch, const TrainState& state, const TrainConfig& config) {
  require(!batch.empty(), "empty batch");
  const auto layout = layout_of(state);
  const int g_count = state.groups;
  const auto d = state.bank.centers.cols();
  const auto width = d / g_count;
  const auto class_count = state.bank.centers.rows();

  LossResult result;
  result.gradient = Vector::Zero(layout.total());
  const double per_sample = 1.0 / static_cast<double>(batch.size());

  for (const auto& sample : batch) {
    if (sample.label < 0 || sample.label >= class_count) {
      fail("training sample has label " + std::to_string(sample.label) +
           " outside [0, " + std::to_string(class_count) + ")");
    }
    require(!sample.views.empty(), "training sample has no views");
    const auto v_count = sample.views.size();
    const auto c = sample.label;

    std::vector<detail::ForwardCache> student;
    std::vector<Vector> teacher_out;
    for (const auto& view : sample.views) {
      student.push_back(detail::forward(state.student, view));
      teacher_out.push_back(state.teacher.encode(view));
    }
    std::vector<Vector> grad_out(v_count, Vector::Zero(d));

    // Distillation over ordered view pairs.
    if (v_count >= 2) {
      const double scale = per_sample / static_cast<double>(v_count * (v_count - 1));
      Vector g;
      for (std::size_t u = 0; u < v_count; ++u) {
        for (std::size_t v = 0; v < v_count; ++v) {
          if (u == v) continue;
          const double ce = kd_loss(student[v].out, teacher_out[u], config.tau_s, config.tau_t, &g);
          result.terms.kd += scale * ce;
          grad_out[v] += scale * g;
        }
      }
    }

    // Normalized centers of this class.
    std::vector<Vector> mu(static_cast<std::size_t>(g_count));
    for (int i = 0; i < g_count; ++i) {
      mu[i] = normalize_group(state.bank.centers.row(c).segment(i * width, width).transpose(), config.tau_attr);
    }
    std::vector<Vector> grad_mu(static_cast<std::size_t>(g_count), Vector::Zero(width));
    Vector mean_weights = Vector::Zero(g_count);

    const double view_scale = per_sample / static_cast<double>(v_count);
    for (std::size_t v = 0; v < v_count; ++v) {
      const Vector& s = student[v].out;
      const Vector logits = state.bank.weight_head.weight * s + state.bank.weight_head.bias;
      const Vector w = normalize_group(logits, 1.0);
      mean_weights += w / static_cast<double>(v_count);
      Vector grad_w = Vector::Zero(g_count);

      for (int i = 0; i < g_count; ++i) {
        const Vector a = normalize_group(s.segment(i * width, width), config.tau_attr);
        const auto fwd = divergence(config.objective, a, mu[i]);
        const auto rev = divergence(config.objective, mu[i], a);

        result.terms.align += view_scale * config.alpha * fwd.value;
        result.terms.weighted += view_scale * config.beta * w[i] * rev.value;

        const Vector grad_a = view_scale * (config.alpha * fwd.d_first + config.beta * w[i] * rev.d_second);
        grad_mu[i] += view_scale * (config.alpha * fwd.d_second + config.beta * w[i] * rev.d_first);
        grad_w[i] = view_scale * config.beta * rev.value;

        grad_out[v].segment(i * width, width) += detail::softmax_backward(a, grad_a, config.tau_attr);
      }

      // Weight head: logits = W s + b, w = softmax(logits).
      const Vector grad_logits = detail::softmax_backward(w, grad_w, 1.0);
      const auto& head = state.bank.weight_head;
      Eigen::Index off = layout.encoder + layout.centers;
      for (Eigen::Index r = 0; r < head.weight.rows(); ++r) {
        for (Eigen::Index k = 0; k < head.weight.cols(); ++k) {
          result.gradient[off + r * head.weight.cols() + k] += grad_logits[r] * s[k];
        }
      }
      result.gradient.segment(off + head.weight.size(), head.bias.size()) += grad_logits;
      grad_out[v] += head.weight.transpose() * grad_logits;
    }

    for (int i = 0; i < g_count; ++i) {
      const Vector gz = detail::softmax_backward(mu[i], grad_mu[i], config.tau_attr);
      result.gradient.segment(layout.encoder + c * d + i * width, width) += gz;
    }
    for (std::size_t v = 0; v < v_count; ++v) {
      detail::backward(state.student, student[v], grad_out[v], result.gradient);
    }
    result.sample_weights.push_back(mean_weights);
  }
  result.terms.total = result.terms.kd + result.terms.align + result.terms.weighted;
  return result;
}

struct StepReport {
  std::uint64_t step = 0;
  LossTerms loss;
  double grad_norm = 0.0;
  double weight_entropy = 0.0;  // mean entropy of the stored weight rows
};

inline nlohmann::json to_json(const StepReport& r) {
  return {{"step", r.step},
          {"loss_total", r.loss.total},
          {"loss_kd", r.loss.kd},
          {"loss_align", r.loss.align},
          {"loss_weighted", r.loss.weighted},
          {"grad_norm", r.grad_norm},
          {"weight_entropy", r.weight_entropy}};
}

inline double mean_row_entropy(const Matrix& rows) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    for (Eigen::Index k = 0; k < rows.cols(); ++k) {
      const double p = rows(r, k);
      if (p > 0.0) total -= p * std::log(p);
    }
  }
  return rows.rows() > 0 ? total / static_cast<double>(rows.rows()) : 0.0;
}

/// Applies one update from an already-augmented batch: Adam on the student
/// (rate learning_rate * gamma1, shared by the weight head) and on the center
/// logits (learning_rate * gamma2); EMA at gamma3 of each class's stored
/// weights toward the batch mean of its predicted weights (classes absent from
/// the batch keep theirs); EMA of the teacher toward the updated student.
inline StepReport apply_step(TrainState& state, const Batch& batch, const TrainConfig& config) {
  const auto result = total_loss(batch, state, config);
  if (!std::isfinite(result.terms.total) || !result.gradient.allFinite()) {
    throw Error(ErrorKind::divergence,
                "training diverged at step " + std::to_string(state.step + 1) + " (non-finite loss)");
  }
  const auto layout = layout_of(state);
  const Vector& g = result.gradient;

  state.step += 1;
  const double t = static_cast<double>(state.step);
  state.adam_m = config.adam_beta1 * state.adam_m + (1.0 - config.adam_beta1) * g;
  state.adam_v = config.adam_beta2 * state.adam_v + (1.0 - config.adam_beta2) * g.cwiseProduct(g);
  const double bc1 = 1.0 - std::pow(config.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(config.adam_beta2, t);
  Vector step = (state.adam_m / bc1).array() / ((state.adam_v / bc2).array().sqrt() + config.adam_eps);
  Vector rate = Vector::Constant(layout.total(), config.learning_rate * config.gamma1);
  rate.segment(layout.encoder, layout.centers).setConstant(config.learning_rate * config.gamma2);
  unpack_parameters(state, pack_parameters(state) - rate.cwiseProduct(step));

  // Stored group weights.
  const auto class_count = state.bank.weights.rows();
  std::vector<Vector> sums(static_cast<std::size_t>(class_count), Vector::Zero(state.groups));
  std::vector<int> counts(static_cast<std::size_t>(class_count), 0);
  for (std::size_t k = 0; k < batch.size(); ++k) {
    sums[batch[k].label] += result.sample_weights[k];
    counts[batch[k].label] += 1;
  }
  for (Eigen::Index c = 0; c < class_count; ++c) {
    if (counts[c] == 0) continue;
    const Vector target = sums[c] / static_cast<double>(counts[c]);
    state.bank.weights.row(c) =
        (1.0 - config.gamma3) * state.bank.weights.row(c) + config.gamma3 * target.transpose();
  }

  // Teacher EMA.
  const double m = config.teacher_momentum;
  for (std::size_t l = 0; l < state.student.hidden.size(); ++l) {
    auto& tl = state.teacher.hidden[l];
    const auto& sl = state.student.hidden[l];
    tl.weight = m * tl.weight + (1.0 - m) * sl.weight;
    tl.bias = m * tl.bias + (1.0 - m) * sl.bias;
  }
  state.teacher.head.weight = m * state.teacher.head.weight + (1.0 - m) * state.student.head.weight;
  state.teacher.head.bias = m * state.teacher.head.bias + (1.0 - m) * state.student.head.bias;

  StepReport report;
  report.step = state.step;
  report.loss = result.terms;
  report.grad_norm = g.norm();
  report.weight_entropy = mean_row_entropy(state.bank.weights);
  return report;
}

/// Raw labeled samples for one step; views are drawn from the state's RNG.
struct RawBatch {
  std::vector<Vector> samples;
  std::vector<int> labels;
};

inline Batch make_views(TrainState& state, const RawBatch& raw, const TrainConfig& config) {
  require(raw.samples.size() == raw.labels.size(), "sample and label counts differ");
  Batch batch;
  batch.reserve(raw.samples.size());
  for (std::size_t k = 0; k < raw.samples.size(); ++k) {
    if (config.views >= 2) {
      batch.push_back({augment_views(raw.samples[k], config.views, config.noise_std,
                                     config.mask_rate, state.rng),
                       raw.labels[k]});
    } else {
      batch.push_back({{raw.samples[k]}, raw.labels[k]});
    }
  }
  return batch;
}

inline StepReport train_step(TrainState& state, const RawBatch& raw, const TrainConfig& config) {
  return apply_step(state, make_views(state, raw, config), config);
}

/// Per-feature mean and inverse standard deviation of the labeled rows.
/// Constant features keep scale 1.
inline void set_input_scaling(TrainState& state, const FeatureDataset& ds) {
  const auto dim = static_cast<Eigen::Index>(ds.dim);
  Vector mean = Vector::Zero(dim);
  Vector m2 = Vector::Zero(dim);
  double n = 0.0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.label(i) < 0) continue;
    const Vector x = to_vector(ds.row(i));
    n += 1.0;
    const Vector delta = x - mean;
    mean += delta / n;
    m2 += delta.cwiseProduct(x - mean);
  }
  require(n > 0.0, "no labeled rows to compute input statistics");
  state.input_mean = mean;
  state.input_scale = Vector::Ones(dim);
  for (Eigen::Index k = 0; k < dim; ++k) {
    const double sd = std::sqrt(m2[k] / n);
    if (sd > 0.0) state.input_scale[k] = 1.0 / sd;
  }
}

inline Vector standardized(const TrainState& state, const Vector& z) {
  return (z - state.input_mean).cwiseProduct(state.input_scale);
}

/// The student with input standardization folded into its first layer, so it
/// consumes raw features.
inline FeatureEncoder raw_input_encoder(const TrainState& state) {
  FeatureEncoder enc = state.student;
  AffineMap& first = enc.hidden.empty() ? enc.head : enc.hidden.front();
  first.bias -= first.weight * state.input_mean.cwiseProduct(state.input_scale);
  first.weight = first.weight * state.input_scale.asDiagonal();
  return enc;
}

/// Epoch loop over a labeled dataset (rows labeled -1 are skipped). Each epoch
/// visits the rows in a seeded shuffled order; `on_step` sees every report.
/// With standardize_inputs, a fresh state (step 0) first takes its input
/// statistics from `ds`.
template <typename OnStep>
void train(TrainState& state, const FeatureDataset& ds, const TrainConfig& config, OnStep&& on_step) {
  validate(config);
  require(ds.has_labels, "training needs a labeled dataset");
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (ds.labels[i] >= 0) rows.push_back(i);
  }
  require(!rows.empty(), "training dataset has no labeled rows");
  require(ds.dim == state.input_mean.size(), "dataset dimension does not match the encoder input");
  if (config.standardize_inputs && state.step == 0) set_input_scaling(state, ds);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(rows.begin(), rows.end(), state.rng);
    for (std::size_t start = 0; start < rows.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const auto stop = std::min(rows.size(), start + static_cast<std::size_t>(config.batch_size));
      RawBatch raw;
      for (std::size_t k = start; k < stop; ++k) {
        raw.samples.push_back(standardized(state, to_vector(ds.row(rows[k]))));
        raw.labels.push_back(ds.labels[rows[k]]);
      }
      on_step(train_step(state, raw, config));
    }
  }
}

/// Encodes every labeled row with the student, fits the per-class group
/// Gaussians and freezes them with the renormalized stored weights.
inline HvcmModel export_to_density(const TrainState& state, const FeatureDataset& ds,
                                   const RidgePolicy& ridge = {},
                                   StatsMode stats = StatsMode::raw) {
  require(ds.has_labels, "export needs a labeled dataset");
  const auto class_count = state.bank.weights.rows();
  require(ds.dim == state.student.input_dim(), "dataset dimension does not match the encoder input");

  ModelConfig cfg;
  cfg.groups = state.groups;
  cfg.attr_dim = state.student.output_dim();
  cfg.input_dim = state.student.input_dim();
  cfg.ridge = ridge;
  cfg.stats = stats;
  cfg.encoder = raw_input_encoder(state);

  std::vector<std::vector<GroupedAttributes>> per_class(static_cast<std::size_t>(class_count));
  for (std::size_t i = 0; i < ds.n; ++i) {
    const auto l = ds.labels[i];
    if (l < 0) continue;
    require(l < class_count, "dataset label exceeds the trained class count");
    per_class[l].push_back(feature_groups(cfg, to_vector(ds.row(i))));
  }
  for (Eigen::Index c = 0; c < class_count; ++c) {
    if (per_class[c].empty()) fail("class " + std::to_string(c) + " has no samples to export");
  }
  std::vector<std::vector<double>> weights;
  for (Eigen::Index c = 0; c < class_count; ++c) {
    const Vector row = state.bank.weights.row(c).transpose();
    weights.emplace_back(row.data(), row.data() + row.size());
  }
  return freeze(per_class, weights, std::move(cfg));
}

}  // namespace hvcm
