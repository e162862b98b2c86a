#include <cmath>
#include <filesystem>
#include <random>

#include <gtest/gtest.h>

#include "hvcm/class_density.hpp"
#include "hvcm/eval_harness.hpp"
#include "hvcm/synthetic.hpp"
#include "oracles.hpp"

using namespace hvcm;

namespace {

GroupedAttributes single_group(const Vector& v) { return group(v, 1); }

oracle::Vec to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

oracle::Mat to_rows(const Matrix& m) {
  oracle::Mat out(static_cast<std::size_t>(m.rows()), oracle::Vec(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
  }
  return out;
}

Vector gaussian_vector(Eigen::Index dim, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Vector v(dim);
  for (auto& x : v) x = normal(rng);
  return v;
}

/// Model with one class per given center, identity covariance components.
HvcmModel identity_model(const std::vector<Vector>& centers, int groups) {
  HvcmModel model;
  model.config.groups = groups;
  model.config.attr_dim = centers.front().size();
  model.config.input_dim = centers.front().size();
  model.config.encoder.head = AffineMap::identity(centers.front().size());
  const auto width = model.config.group_dim();
  for (std::size_t c = 0; c < centers.size(); ++c) {
    ClassModel cm;
    cm.class_id = static_cast<int>(c);
    cm.weights = uniform_weights(groups);
    for (int i = 0; i < groups; ++i) {
      cm.components.push_back({centers[c].segment(i * width, width), Matrix::Zero(width, width),
                               Matrix::Identity(width, width), 0.0});
    }
    model.classes.push_back(cm);
  }
  model.frozen = true;
  return model;
}

}  // namespace

TEST(FitClass, HandCovariance) {
  const std::vector<GroupedAttributes> attrs = {single_group(Eigen::Vector2d(0, 0)),
                                                single_group(Eigen::Vector2d(2, 2))};
  const std::vector<double> w = {1.0};
  const auto cm = fit_class(attrs, w, RidgePolicy::fixed(1e-6));
  const auto& comp = cm.components.front();
  EXPECT_EQ(comp.mu, Eigen::Vector2d(1, 1));
  EXPECT_EQ(comp.sigma, (Eigen::Matrix2d() << 2, 2, 2, 2).finished());
}

TEST(FitClass, SingleSampleGivesRidgeOnlyCovariance) {
  const std::vector<GroupedAttributes> attrs = {single_group(Eigen::Vector3d(1, 2, 3))};
  const std::vector<double> w = {1.0};
  const auto cm = fit_class(attrs, w, RidgePolicy{});
  const auto& comp = cm.components.front();
  EXPECT_EQ(comp.sigma, Matrix::Zero(3, 3));
  EXPECT_EQ(comp.ridge, 1e-6);
  EXPECT_NEAR((comp.chol - std::sqrt(1e-6) * Matrix::Identity(3, 3)).cwiseAbs().maxCoeff(), 0.0, 1e-18);
}

TEST(FitClass, MatchesTwoPassOracleAndTruth) {
  std::mt19937_64 rng(123);
  const Eigen::Vector2d mean(3.0, -1.0);
  Eigen::Matrix2d factor;
  factor << 2.0, 0.0, 0.6, 0.5;
  std::vector<GroupedAttributes> attrs;
  std::vector<oracle::Vec> rows;
  for (int i = 0; i < 1000; ++i) {
    const Vector x = mean + factor * gaussian_vector(2, rng);
    attrs.push_back(single_group(x));
    rows.push_back(to_std(x));
  }
  const std::vector<double> w = {1.0};
  const auto comp = fit_class(attrs, w, RidgePolicy{}).components.front();
  const auto [o_mean, o_cov] = oracle::two_pass_moments(rows);
  for (int a = 0; a < 2; ++a) {
    EXPECT_NEAR(comp.mu[a], o_mean[a], 1e-10 * std::abs(o_mean[a]));
    for (int b = 0; b < 2; ++b) EXPECT_NEAR(comp.sigma(a, b), o_cov[a][b], 1e-10 * std::abs(o_cov[a][b]));
  }
  // Within three standard errors of the generating parameters.
  const Matrix truth = factor * factor.transpose();
  for (int a = 0; a < 2; ++a) {
    EXPECT_LE(std::abs(comp.mu[a] - mean[a]), 3.0 * std::sqrt(truth(a, a) / 1000.0));
    for (int b = 0; b < 2; ++b) {
      const double se = std::sqrt((truth(a, b) * truth(a, b) + truth(a, a) * truth(b, b)) / 999.0);
      EXPECT_LE(std::abs(comp.sigma(a, b) - truth(a, b)), 3.0 * se);
    }
  }
}

TEST(FitClass, WeightsAreRenormalized) {
  const std::vector<GroupedAttributes> attrs = {group(Eigen::Vector4d(0, 1, 2, 3), 2),
                                                group(Eigen::Vector4d(1, 1, 0, 3), 2)};
  const std::vector<double> w = {2.0, 6.0};
  const auto cm = fit_class(attrs, w, RidgePolicy{});
  EXPECT_DOUBLE_EQ(cm.weights[0], 0.25);
  EXPECT_DOUBLE_EQ(cm.weights[1], 0.75);
  const std::vector<double> bad = {1.0};
  EXPECT_THROW(fit_class(attrs, bad, RidgePolicy{}), Error);
}

TEST(FitClass, NonFiniteCovarianceIsDegenerate) {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<GroupedAttributes> attrs = {single_group(Eigen::Vector2d(inf, 0)),
                                                single_group(Eigen::Vector2d(1, 0))};
  const std::vector<double> w = {1.0};
  try {
    fit_class(attrs, w, RidgePolicy{});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::degenerate_fit);
  }
}

TEST(Mahalanobis, ZeroAtMeanAndIdentityExample) {
  GroupGaussian comp{Eigen::Vector2d(1, 1), Matrix::Zero(2, 2), Matrix::Identity(2, 2), 0.0};
  EXPECT_EQ(mahalanobis(comp, comp.mu), 0.0);
  EXPECT_EQ(mahalanobis(comp, Eigen::Vector2d(4, 5)), -25.0);
}

TEST(Mahalanobis, MatchesExplicitInverse) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    const auto k = 1 + static_cast<Eigen::Index>(rng() % 16);
    GroupGaussian comp;
    comp.mu = gaussian_vector(k, rng);
    comp.sigma = synthetic::random_spd(k, rng);
    factorize(comp, RidgePolicy{});
    const Vector x = gaussian_vector(k, rng, 2.0);
    const auto inv = oracle::inverse(oracle::add_ridge(to_rows(comp.sigma), comp.ridge));
    const double expected = oracle::neg_quadratic(inv, to_std(x), to_std(comp.mu));
    EXPECT_NEAR(mahalanobis(comp, x), expected, 1e-9 * std::abs(expected));
    EXPECT_LE(mahalanobis(comp, x), 0.0);
  }
}

TEST(Mahalanobis, ShapeMismatchRejected) {
  GroupGaussian comp{Eigen::Vector2d(1, 1), Matrix::Zero(2, 2), Matrix::Identity(2, 2), 0.0};
  EXPECT_THROW(mahalanobis(comp, Eigen::Vector3d(1, 1, 1)), Error);
}

TEST(ClassScore, WeightedMeanOfGroupScores) {
  ClassModel cm;
  cm.weights = {0.5, 0.5};
  cm.components.push_back({Vector::Zero(1), Matrix::Zero(1, 1), Matrix::Identity(1, 1), 0.0});
  cm.components.push_back({Vector::Zero(1), Matrix::Zero(1, 1), Matrix::Identity(1, 1), 0.0});
  GroupedAttributes ga;
  ga.groups = {Vector::Constant(1, std::sqrt(2.0)), Vector::Constant(1, 2.0)};
  EXPECT_NEAR(class_score(cm, ga), -3.0, 1e-15);
  ga.groups = {Vector::Zero(1), Vector::Zero(1)};
  EXPECT_EQ(class_score(cm, ga), 0.0);
}

TEST(ClassScore, SingleGroupReducesToMahalanobis) {
  std::mt19937_64 rng(5);
  GroupGaussian comp{gaussian_vector(4, rng), synthetic::random_spd(4, rng), {}, 0.0};
  factorize(comp, RidgePolicy{});
  ClassModel cm;
  cm.weights = {1.0};
  cm.components = {comp};
  const Vector x = gaussian_vector(4, rng);
  EXPECT_EQ(class_score(cm, single_group(x)), mahalanobis(comp, x));
}

TEST(DatasetScore, ArgmaxAtOwnCenters) {
  const std::vector<Vector> centers = {Eigen::Vector4d(0, 0, 0, 0), Eigen::Vector4d(10, 0, 10, 0),
                                       Eigen::Vector4d(0, 10, 0, 10)};
  const auto model = identity_model(centers, 2);
  const auto s = dataset_score(model, group(centers[2], 2));
  EXPECT_EQ(s.score, 0.0);
  EXPECT_EQ(s.argmax_class, 2);
}

TEST(DatasetScore, OneClassEqualsClassScoreAndMonotoneUnderAddition) {
  std::mt19937_64 rng(31);
  std::vector<Vector> centers = {gaussian_vector(4, rng)};
  auto model = identity_model(centers, 2);
  const Vector x = gaussian_vector(4, rng);
  const auto one = dataset_score(model, group(x, 2));
  EXPECT_EQ(one.score, class_score(model.classes[0], group(x, 2)));
  EXPECT_EQ(one.argmax_class, 0);
  double prev = one.score;
  for (int extra = 0; extra < 5; ++extra) {
    centers.push_back(gaussian_vector(4, rng));
    model = identity_model(centers, 2);
    const double now = dataset_score(model, group(x, 2)).score;
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(DatasetScore, TiesGoToLowestClass) {
  const std::vector<Vector> centers = {Eigen::Vector2d(1, 0), Eigen::Vector2d(-1, 0)};
  const auto model = identity_model(centers, 1);
  EXPECT_EQ(dataset_score(model, group(Eigen::Vector2d(0, 3), 1)).argmax_class, 0);
}

TEST(DatasetScore, UnfrozenModelRejected) {
  auto model = identity_model({Eigen::Vector2d(1, 0)}, 1);
  model.frozen = false;
  EXPECT_THROW(dataset_score(model, group(Eigen::Vector2d(0, 0), 1)), Error);
}

TEST(Detect, InclusiveBoundary) {
  auto model = identity_model({Eigen::Vector2d(1, 0)}, 1);
  EXPECT_THROW(detect(model, 0.0), Error);
  model.threshold = -10.0;
  EXPECT_EQ(detect(model, 0.0), Decision::ind);
  EXPECT_EQ(detect(model, -11.0), Decision::ood);
  EXPECT_EQ(detect(model, -10.0), Decision::ind);
}

TEST(LogDensity, StandardNormalAtZero) {
  ClassModel cm;
  cm.weights = {1.0};
  cm.components = {{Vector::Zero(1), Matrix::Identity(1, 1), Matrix::Identity(1, 1), 0.0}};
  EXPECT_NEAR(log_density(cm, single_group(Vector::Zero(1))), -0.9189385332046727, 1e-15);
}

TEST(LogDensity, IdenticalComponentsIgnoreGroupCount) {
  std::mt19937_64 rng(17);
  GroupGaussian comp{gaussian_vector(3, rng), synthetic::random_spd(3, rng), {}, 0.0};
  factorize(comp, RidgePolicy{});
  const Vector a = gaussian_vector(3, rng);
  ClassModel one;
  one.weights = {1.0};
  one.components = {comp};
  const double expected = log_density(one, single_group(a));
  for (int g : {2, 3, 5}) {
    ClassModel many;
    many.weights = uniform_weights(g);
    GroupedAttributes ga;
    for (int i = 0; i < g; ++i) {
      many.components.push_back(comp);
      ga.groups.push_back(a);
    }
    EXPECT_NEAR(log_density(many, ga), expected, 1e-12);
  }
}

TEST(LogDensity, MatchesDirectSummation) {
  std::mt19937_64 rng(19);
  for (int trial = 0; trial < 10; ++trial) {
    ClassModel cm;
    cm.weights = {0.2, 0.5, 0.3};
    GroupedAttributes ga;
    double direct = 0.0;
    for (int i = 0; i < 3; ++i) {
      GroupGaussian comp{gaussian_vector(2, rng), synthetic::random_spd(2, rng), {}, 0.0};
      factorize(comp, RidgePolicy{});
      const Vector a = comp.mu + gaussian_vector(2, rng, 0.5);
      direct += cm.weights[i] * oracle::gaussian_pdf(to_std(a), to_std(comp.mu),
                                                     oracle::add_ridge(to_rows(comp.sigma), comp.ridge));
      cm.components.push_back(comp);
      ga.groups.push_back(a);
    }
    EXPECT_NEAR(log_density(cm, ga), std::log(direct), 1e-9 * std::abs(std::log(direct)) + 1e-12);
  }
}

TEST(LogDensity, SameOrderingAsScoreForSingleGroup) {
  std::mt19937_64 rng(23);
  GroupGaussian comp{Vector::Zero(3), synthetic::random_spd(3, rng), {}, 0.0};
  factorize(comp, RidgePolicy{});
  ClassModel cm;
  cm.weights = {1.0};
  cm.components = {comp};
  std::vector<double> by_score, by_density;
  for (int i = 0; i < 200; ++i) {
    const auto ga = single_group(gaussian_vector(3, rng, 2.0));
    by_score.push_back(class_score(cm, ga));
    by_density.push_back(log_density(cm, ga));
  }
  EXPECT_EQ(oracle::spearman(by_score, by_density), 1.0);
}

TEST(Cosine, OwnCentersAndScaleInvariance) {
  const std::vector<Vector> centers = {Eigen::Vector4d(1, 0, 1, 0), Eigen::Vector4d(0, 1, 0, 1),
                                       Eigen::Vector4d(1, 1, -1, -1)};
  const auto model = identity_model(centers, 2);
  std::mt19937_64 rng(2);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(classify_cosine(model, centers[c]), c);
  for (int i = 0; i < 100; ++i) {
    const Vector a = gaussian_vector(4, rng);
    const int base = classify_cosine(model, a);
    for (double s : {1e-3, 0.5, 7.0, 1e4}) EXPECT_EQ(classify_cosine(model, s * a), base);
  }
  EXPECT_THROW(classify_cosine(model, Vector::Zero(4)), Error);
}

TEST(Cosine, SeparableBlobsHeldOut) {
  // Well-separated class directions with within-class spread 10x smaller
  // than the inter-center distance.
  const auto task = synthetic::BlobTask::standard();
  const auto train = task.ind(200, 1);
  const auto test = task.ind(200, 2);
  ModelConfig cfg;
  cfg.groups = 1;
  cfg.attr_dim = 2;
  cfg.input_dim = 2;
  cfg.encoder.head = AffineMap{Matrix::Identity(2, 2), Eigen::Vector2d(-5.0, -5.0 / std::sqrt(3.0))};
  std::vector<std::vector<GroupedAttributes>> per_class(3);
  for (std::size_t i = 0; i < train.n; ++i) {
    per_class[train.labels[i]].push_back(feature_groups(cfg, to_vector(train.row(i))));
  }
  const auto model = freeze(per_class, {{1.0}, {1.0}, {1.0}}, cfg);
  std::vector<Vector> attrs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test.n; ++i) {
    attrs.push_back(cfg.encoder.encode(to_vector(test.row(i))));
    labels.push_back(test.labels[i]);
  }
  EXPECT_GE(ind_accuracy(model, attrs, labels), 0.99);
}

TEST(Freeze, ThreeClassesAndDeterminism) {
  std::mt19937_64 rng(41);
  std::vector<std::vector<GroupedAttributes>> per_class(3);
  for (int c = 0; c < 3; ++c) {
    for (int i = 0; i < 100; ++i) per_class[c].push_back(group(gaussian_vector(8, rng), 4));
  }
  per_class.push_back({group(gaussian_vector(8, rng), 4)});  // single-sample class
  ModelConfig cfg;
  cfg.groups = 4;
  cfg.attr_dim = 8;
  cfg.input_dim = 8;
  cfg.encoder.head = AffineMap::identity(8);
  const std::vector<std::vector<double>> w(4, uniform_weights(4));
  const auto a = freeze(per_class, w, cfg, 1);
  const auto b = freeze(per_class, w, cfg, 4);
  ASSERT_EQ(a.class_count(), 4u);
  for (const auto& cm : a.classes) {
    ASSERT_EQ(cm.components.size(), 4u);
    double total = 0.0;
    for (double x : cm.weights) total += x;
    EXPECT_NEAR(total, 1.0, 1e-15);
    for (const auto& comp : cm.components) {
      EXPECT_GT(comp.ridge, 0.0);
      EXPECT_TRUE((comp.chol.diagonal().array() > 0.0).all());
    }
  }
  EXPECT_EQ(a.classes[3].components[0].sigma, Matrix::Zero(2, 2));
  EXPECT_EQ(encode_model(a), encode_model(b));
}

TEST(ModelFile, RoundTripPreservesScores) {
  std::mt19937_64 rng(43);
  std::vector<std::vector<GroupedAttributes>> per_class(2);
  ModelConfig cfg;
  cfg.groups = 2;
  cfg.attr_dim = 4;
  cfg.input_dim = 3;
  cfg.stats = StatsMode::softmax;
  cfg.softmax_temperature = 0.5;
  cfg.encoder.hidden.push_back({Matrix::Random(5, 3), Vector::Random(5)});
  cfg.encoder.head = {Matrix::Random(4, 5), Vector::Random(4)};
  std::vector<Vector> probes;
  for (int c = 0; c < 2; ++c) {
    for (int i = 0; i < 50; ++i) {
      const Vector x = gaussian_vector(3, rng) + Vector::Constant(3, 2.0 * c);
      per_class[c].push_back(feature_groups(cfg, x));
      probes.push_back(x);
    }
  }
  auto model = freeze(per_class, {{0.3, 0.7}, {0.5, 0.5}}, cfg);
  model.threshold = -4.25;
  const auto path = std::filesystem::temp_directory_path() / "hvcm_model_roundtrip.hvcm";
  save_model(model, path);
  const auto back = load_model(path);
  EXPECT_EQ(encode_model(back), encode_model(model));
  ASSERT_TRUE(back.threshold.has_value());
  EXPECT_EQ(*back.threshold, -4.25);
  EXPECT_EQ(back.config.stats, StatsMode::softmax);
  for (const auto& x : probes) {
    EXPECT_EQ(dataset_score(back, feature_groups(back.config, x)).score,
              dataset_score(model, feature_groups(model.config, x)).score);
  }
}

TEST(ModelFile, CorruptionRejected) {
  const auto model = identity_model({Eigen::Vector2d(1, 0)}, 1);
  const auto bytes = encode_model(model);
  EXPECT_THROW(decode_model("HVCX" + bytes.substr(4)), Error);
  EXPECT_THROW(decode_model(bytes.substr(0, bytes.size() - 3)), Error);
  EXPECT_THROW(decode_model(bytes + "z"), Error);
}
