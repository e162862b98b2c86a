#pragma once

// Shared setups for the unit tests and the acceptance runner.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "hvcm/hvcm.hpp"
#include "hvcm/synthetic.hpp"
#include "oracles.hpp"

namespace fixtures {

using namespace hvcm;

/// A small random trainer state with a fixed augmented batch.
struct LossInstance {
  TrainConfig config;
  TrainState state;
  Batch batch;
};

inline LossInstance random_loss_instance(std::uint64_t seed, Objective objective, double alpha,
                                         double beta, int views) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  LossInstance inst;
  auto& cfg = inst.config;
  cfg.objective = objective;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.views = views;
  cfg.groups = 1 + static_cast<int>(rng() % 3);
  cfg.attr_dim = cfg.groups * (2 + static_cast<int>(rng() % 3));
  cfg.hidden = {3 + static_cast<int>(rng() % 3)};
  cfg.tau_s = 0.5;
  cfg.tau_t = 0.25;
  cfg.seed = seed;
  const int input_dim = 2 + static_cast<int>(rng() % 3);
  const int classes = 2 + static_cast<int>(rng() % 2);
  inst.state = init_state(cfg, input_dim, classes);
  // Give the teacher its own parameters so the KD term is not at a symmetric point.
  for (auto* layer : {&inst.state.teacher.hidden.front(), &inst.state.teacher.head}) {
    for (auto& v : layer->weight.reshaped()) v += 0.3 * normal(rng);
    for (auto& v : layer->bias) v += 0.3 * normal(rng);
  }
  for (auto& v : inst.state.bank.weight_head.bias) v = 0.5 * normal(rng);
  for (int k = 0; k < 3; ++k) {
    TrainSample sample;
    sample.label = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
    for (int v = 0; v < views; ++v) {
      Vector x(input_dim);
      for (auto& e : x) e = normal(rng);
      sample.views.push_back(x);
    }
    inst.batch.push_back(sample);
  }
  return inst;
}

/// max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8). The
/// floor only keeps exact-zero entries from dividing finite-difference noise by 0.
inline double gradient_relative_error(const LossInstance& inst, double h = 1e-5) {
  const Vector analytic = total_loss(inst.batch, inst.state, inst.config).gradient;
  TrainState probe = inst.state;
  const Vector base = pack_parameters(probe);
  const auto numeric = oracle::central_differences(
      [&](const oracle::Vec& theta) {
        unpack_parameters(probe, Eigen::Map<const Vector>(theta.data(), static_cast<Eigen::Index>(theta.size())));
        return total_loss(inst.batch, probe, inst.config).terms.total;
      },
      oracle::Vec(base.data(), base.data() + base.size()), h);
  constexpr double floor = 1e-8;
  double worst = 0.0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic[i], n = numeric[static_cast<std::size_t>(i)];
    worst = std::max(worst, std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor}));
  }
  return worst;
}

/// Outcome of the synthetic blob run: train with defaults, export, score a
/// held-out split and an OOD blob.
struct BlobRun {
  std::vector<double> losses;
  double loss_ratio = 0.0;  // mean of the last 10 step losses / first step loss
  double auroc = 0.0;
  double fpr95 = 0.0;
  double accuracy = 0.0;
  std::vector<double> train_scores;
  HvcmModel model;
};

inline BlobRun run_blob_task(std::uint64_t seed, TrainConfig config = {}) {
  config.seed = seed;
  const auto task = synthetic::BlobTask::standard();
  const auto train_ds = task.ind(100, seed * 10 + 1);
  const auto test_ds = task.ind(100, seed * 10 + 2);
  const auto ood_ds = task.ood(300, seed * 10 + 3);

  BlobRun run;
  auto state = init_state(config, 2, 3);
  train(state, train_ds, config, [&](const StepReport& r) { run.losses.push_back(r.loss.total); });
  const std::size_t tail = std::min<std::size_t>(10, run.losses.size());
  double last = 0.0;
  for (std::size_t i = 0; i < tail; ++i) last += run.losses[run.losses.size() - 1 - i];
  run.loss_ratio = last / static_cast<double>(tail) / run.losses.front();

  run.model = export_to_density(state, train_ds);
  const auto& cfg = run.model.config;
  std::vector<double> ind, ood;
  std::vector<Vector> attrs;
  std::vector<int> labels;
  for (std::size_t i = 0; i < test_ds.n; ++i) {
    const Vector z = to_vector(test_ds.row(i));
    ind.push_back(dataset_score(run.model, feature_groups(cfg, z)).score);
    attrs.push_back(cfg.encoder.encode(z));
    labels.push_back(test_ds.labels[i]);
  }
  for (std::size_t i = 0; i < ood_ds.n; ++i) {
    ood.push_back(dataset_score(run.model, feature_groups(cfg, to_vector(ood_ds.row(i)))).score);
  }
  for (std::size_t i = 0; i < train_ds.n; ++i) {
    run.train_scores.push_back(dataset_score(run.model, feature_groups(cfg, to_vector(train_ds.row(i)))).score);
  }
  const auto scores = ScoreSet::from(ind, ood);
  run.auroc = auroc(scores);
  run.fpr95 = fpr_at_tpr(scores);
  run.accuracy = ind_accuracy(run.model, attrs, labels);
  return run;
}

}  // namespace fixtures
