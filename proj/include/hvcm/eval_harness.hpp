#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hvcm/class_density.hpp"
#include "hvcm/error.hpp"

namespace hvcm {

struct ScoreEntry {
  double score = 0.0;
  bool is_ind = false;
};

/// Scores for a mixed InD/OOD population. Higher means more in-distribution.
struct ScoreSet {
  std::vector<ScoreEntry> entries;

  static ScoreSet from(std::span<const double> ind, std::span<const double> ood) {
    ScoreSet s;
    s.entries.reserve(ind.size() + ood.size());
    for (double v : ind) s.entries.push_back({v, true});
    for (double v : ood) s.entries.push_back({v, false});
    return s;
  }

  std::vector<double> ind() const { return collect(true); }
  std::vector<double> ood() const { return collect(false); }

  std::size_t n_ind() const {
    return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(),
                                                  [](const auto& e) { return e.is_ind; }));
  }
  std::size_t n_ood() const { return entries.size() - n_ind(); }

 private:
  std::vector<double> collect(bool want) const {
    std::vector<double> out;
    for (const auto& e : entries) {
      if (e.is_ind == want) out.push_back(e.score);
    }
    return out;
  }
};

namespace detail {

inline void check_populations(const ScoreSet& s) {
  if (s.n_ind() == 0) fail("empty in-distribution population");
  if (s.n_ood() == 0) fail("empty out-of-distribution population");
  for (const auto& e : s.entries) require(std::isfinite(e.score), "non-finite score");
}

// Number of values in a sorted range that are >= threshold.
inline std::size_t count_at_or_above(const std::vector<double>& sorted, double threshold) {
  return static_cast<std::size_t>(sorted.end() -
                                  std::lower_bound(sorted.begin(), sorted.end(), threshold));
}

}  // namespace detail

/// Exact Mann-Whitney statistic: P(InD > OOD) + 0.5 P(tie).
inline double auroc(const ScoreSet& s) {
  detail::check_populations(s);
  auto ood = s.ood();
  std::sort(ood.begin(), ood.end());
  std::uint64_t doubled = 0;  // 2 * (wins + 0.5 ties)
  for (const auto& e : s.entries) {
    if (!e.is_ind) continue;
    const auto lo = std::lower_bound(ood.begin(), ood.end(), e.score);
    const auto hi = std::upper_bound(lo, ood.end(), e.score);
    doubled += 2 * static_cast<std::uint64_t>(lo - ood.begin()) +
               static_cast<std::uint64_t>(hi - lo);
  }
  const double pairs = static_cast<double>(s.n_ind()) * static_cast<double>(s.n_ood());
  return static_cast<double>(doubled) / (2.0 * pairs);
}

struct OperatingPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
};

/// Largest observed InD score whose acceptance rate reaches `tpr_target`
/// under "InD iff score >= threshold", and the OOD acceptance there.
inline OperatingPoint operating_point(const ScoreSet& s, double tpr_target = 0.95) {
  detail::check_populations(s);
  require(tpr_target > 0.0 && tpr_target <= 1.0, "tpr target must lie in (0,1]");
  auto ind = s.ind();
  auto ood = s.ood();
  std::sort(ind.begin(), ind.end());
  std::sort(ood.begin(), ood.end());
  const double n = static_cast<double>(ind.size());

  // Walk candidate thresholds from the largest InD score downwards.
  for (auto it = ind.rbegin(); it != ind.rend(); ++it) {
    if (it != ind.rbegin() && *it == *std::prev(it)) continue;
    const double tpr = static_cast<double>(detail::count_at_or_above(ind, *it)) / n;
    if (tpr >= tpr_target) {
      const double fpr = static_cast<double>(detail::count_at_or_above(ood, *it)) /
                         static_cast<double>(ood.size());
      return {*it, tpr, fpr};
    }
  }
  // Unreachable: the minimum InD score always has tpr = 1.
  return {ind.front(), 1.0, static_cast<double>(ood.size()) / static_cast<double>(ood.size())};
}

inline double fpr_at_tpr(const ScoreSet& s, double tpr_target = 0.95) {
  return operating_point(s, tpr_target).fpr;
}

struct SweepPoint {
  double threshold = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  double accuracy = 0.0;  // balanced: (tpr + 1 - fpr) / 2
};

using SweepCurve = std::vector<SweepPoint>;

/// `steps` evenly spaced thresholds from the maximum score down to the
/// minimum, both endpoints included.
inline SweepCurve sweep(const ScoreSet& s, int steps) {
  detail::check_populations(s);
  require(steps >= 2, "sweep needs at least 2 steps");
  auto ind = s.ind();
  auto ood = s.ood();
  std::sort(ind.begin(), ind.end());
  std::sort(ood.begin(), ood.end());
  const double lo = std::min(ind.front(), ood.front());
  const double hi = std::max(ind.back(), ood.back());

  auto point_at = [&](double threshold) {
    SweepPoint p;
    p.threshold = threshold;
    p.tpr = static_cast<double>(detail::count_at_or_above(ind, threshold)) / ind.size();
    p.fpr = static_cast<double>(detail::count_at_or_above(ood, threshold)) / ood.size();
    p.accuracy = 0.5 * (p.tpr + 1.0 - p.fpr);
    return p;
  };

  if (lo == hi) return {point_at(lo)};
  SweepCurve curve;
  curve.reserve(static_cast<std::size_t>(steps));
  for (int k = 0; k < steps; ++k) {
    const double t = k == steps - 1 ? lo : hi - (hi - lo) * k / (steps - 1);
    curve.push_back(point_at(t));
  }
  return curve;
}

inline constexpr std::size_t kMinCalibrationScores = 20;

/// Lower empirical (1 - tpr_target) quantile of held-out InD scores: the
/// ceil((1 - tpr_target) * n)-th lowest score (the minimum when tpr_target = 1).
inline double calibrate_threshold(std::span<const double> ind_scores, double tpr_target) {
  require(ind_scores.size() >= kMinCalibrationScores,
          "threshold calibration needs at least " + std::to_string(kMinCalibrationScores) +
              " InD scores, got " + std::to_string(ind_scores.size()));
  require(tpr_target > 0.0 && tpr_target <= 1.0, "tpr target must lie in (0,1]");
  std::vector<double> sorted(ind_scores.begin(), ind_scores.end());
  for (double v : sorted) require(std::isfinite(v), "non-finite score");
  std::sort(sorted.begin(), sorted.end());
  const double rank = (1.0 - tpr_target) * static_cast<double>(sorted.size());
  // Guard against representation error such as (1 - 0.95) * 100 = 5.000000000000004.
  const auto k = static_cast<long>(std::ceil(rank - 1e-9));
  const auto idx = std::clamp<long>(k - 1, 0, static_cast<long>(sorted.size()) - 1);
  return sorted[static_cast<std::size_t>(idx)];
}

/// Fraction of attribute vectors whose cosine-classifier output equals the label.
inline double ind_accuracy(const HvcmModel& model, std::span<const Vector> attributes,
                           std::span<const int> labels) {
  require(!attributes.empty(), "accuracy needs at least one sample");
  require(attributes.size() == labels.size(), "attribute and label counts differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < attributes.size(); ++i) {
    require(labels[i] >= 0 && static_cast<std::size_t>(labels[i]) < model.class_count(),
            "label out of range: " + std::to_string(labels[i]));
    if (classify_cosine(model, attributes[i]) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(attributes.size());
}

struct RankedClass {
  int class_id = 0;
  double distance = 0.0;  // mean over InD classes of (1 - cosine)
};

struct OodRanking {
  std::vector<RankedClass> order;     // near -> far
  std::vector<std::vector<int>> bins; // contiguous, equal size, remainder in the last
};

/// Orders candidate classes by mean cosine distance to the InD centers and cuts
/// the ordering into `bins` groups. Equal distances keep class-id order.
inline OodRanking rank_ood_classes(std::span<const Vector> ind_centers,
                                   const std::map<int, Vector>& candidates, int bins) {
  require(bins >= 1, "bin count must be positive");
  require(!ind_centers.empty(), "no in-distribution centers");
  require(static_cast<std::size_t>(bins) <= candidates.size(),
          "more bins (" + std::to_string(bins) + ") than candidate classes (" +
              std::to_string(candidates.size()) + ")");
  std::vector<Vector> unit;
  for (const auto& c : ind_centers) {
    const double n = c.norm();
    require(n > 0.0, "zero-norm in-distribution center");
    unit.push_back(c / n);
  }
  OodRanking out;
  for (const auto& [id, v] : candidates) {
    const double n = v.norm();
    require(n > 0.0, "zero-norm center for candidate class " + std::to_string(id));
    require(v.size() == unit.front().size(), "candidate center length mismatch");
    double total = 0.0;
    for (const auto& u : unit) total += 1.0 - u.dot(v) / n;
    out.order.push_back({id, total / static_cast<double>(unit.size())});
  }
  std::stable_sort(out.order.begin(), out.order.end(),
                   [](const auto& a, const auto& b) { return a.distance < b.distance; });

  const std::size_t per_bin = out.order.size() / static_cast<std::size_t>(bins);
  out.bins.resize(static_cast<std::size_t>(bins));
  for (std::size_t k = 0; k < out.order.size(); ++k) {
    const auto b = std::min(k / per_bin, static_cast<std::size_t>(bins) - 1);
    out.bins[b].push_back(out.order[k].class_id);
  }
  return out;
}

/// Machine-readable metric report.
inline nlohmann::json metric_report(const ScoreSet& s, double tpr_target, int sweep_steps) {
  const auto op = operating_point(s, tpr_target);
  nlohmann::json report;
  report["auroc"] = auroc(s);
  report["fpr95"] = op.fpr;
  report["tpr_target"] = tpr_target;
  report["n_ind"] = s.n_ind();
  report["n_ood"] = s.n_ood();
  report["threshold"] = op.threshold;
  auto curve = nlohmann::json::array();
  if (sweep_steps >= 2) {
    for (const auto& p : sweep(s, sweep_steps)) {
      curve.push_back({{"threshold", p.threshold}, {"tpr", p.tpr}, {"fpr", p.fpr},
                       {"accuracy", p.accuracy}});
    }
  }
  report["sweep"] = curve;
  return report;
}

}  // namespace hvcm
