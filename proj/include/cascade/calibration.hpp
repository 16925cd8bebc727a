#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/math/distributions/gamma.hpp>

#include "cascade/quantifiers.hpp"
#include "cascade/trace.hpp"

namespace cascade {

struct CalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A computed threshold plus the rate it actually achieves on the calibration
/// sample (a false-positive rate or a forwarded fraction, depending on the
/// operation) and the sample size it was computed from.
struct CalibrationResult {
  double threshold = -std::numeric_limits<double>::infinity();
  double achieved = 0.0;
  std::size_t sample_size = 0;

  friend bool operator==(const CalibrationResult&, const CalibrationResult&) = default;
};

namespace detail {

inline void check_rate(double rate, const char* what) {
  if (!(rate >= 0.0 && rate <= 1.0)) {
    throw CalibrationError(std::string(what) + " must lie in [0,1]");
  }
}

}  // namespace detail

/// Conservative quantile rule: the largest threshold in {-inf} U samples whose
/// empirical false-positive rate (correct samples failing the strict `>`
/// acceptance, i.e. confidence <= threshold) stays within the target.
inline CalibrationResult threshold_for_fpr(std::vector<double> correct_confidences,
                                           double target_fpr) {
  detail::check_rate(target_fpr, "target_fpr");
  if (correct_confidences.empty()) throw CalibrationError("threshold_for_fpr: no samples");
  std::sort(correct_confidences.begin(), correct_confidences.end());
  const auto m = correct_confidences.size();
  CalibrationResult result;
  result.sample_size = m;
  std::size_t i = 0;
  while (i < m) {
    const double value = correct_confidences[i];
    std::size_t j = i;
    while (j < m && correct_confidences[j] == value) ++j;  // ties share one candidate
    const double fpr = static_cast<double>(j) / static_cast<double>(m);
    if (fpr > target_fpr) break;
    result.threshold = value;
    result.achieved = fpr;
    i = j;
  }
  return result;
}

/// Threshold forwarding ceil(target * n) records under the strict `>` check
/// (the k-th smallest confidence). Ties in confidence may forward more than k;
/// the achieved fraction reports the realized count.
inline CalibrationResult threshold_for_remote_fraction(std::vector<double> local_confidences,
                                                       double target_fraction) {
  detail::check_rate(target_fraction, "target remote fraction");
  if (local_confidences.empty()) throw CalibrationError("threshold_for_remote_fraction: no samples");
  std::sort(local_confidences.begin(), local_confidences.end());
  const auto m = local_confidences.size();
  // ceil(target * m) with a relative slop so 0.3 * 10 = 2.9999... still counts
  // as 3 while asking for 3 + 4ulp does not become 4.
  const double scaled = target_fraction * static_cast<double>(m);
  const auto k = std::min(m, static_cast<std::size_t>(std::ceil(scaled - scaled * 1e-12)));
  CalibrationResult result;
  result.sample_size = m;
  if (k == 0) {
    result.threshold = -std::numeric_limits<double>::infinity();
    result.achieved = 0.0;
    return result;
  }
  result.threshold = local_confidences[k - 1];
  const auto forwarded = static_cast<std::size_t>(
      std::upper_bound(local_confidences.begin(), local_confidences.end(), result.threshold) -
      local_confidences.begin());
  result.achieved = static_cast<double>(forwarded) / static_cast<double>(m);
  return result;
}

/// Second-level threshold with the first level held fixed. The overall FPR
/// counts rejected system-correct predictions against all system-correct ones
/// (locally accepted correct predictions count in the denominator and can
/// never be rejected). Candidates are the remote confidences of all
/// remote-handled records plus the below-min sentinel, so the result is the
/// most-rejecting threshold that keeps the FPR within target; a target can
/// therefore always be met, and the only error is an undefined FPR.
inline CalibrationResult calibrate_second_level(const TraceDataset& dataset,
                                                const QuantifierConfig& local_quantifier,
                                                const QuantifierConfig& remote_quantifier,
                                                double threshold_local, double target_fpr) {
  detail::check_rate(target_fpr, "target_fpr");
  std::size_t local_accept_correct = 0;
  struct RemoteSample {
    double confidence;
    bool correct;
  };
  std::vector<RemoteSample> remote_handled;
  for (const auto& record : dataset.records) {
    const double conf_local = apply_quantifier(local_quantifier, record.local);
    if (conf_local > threshold_local) {
      if (resolve_observation(record.truth, record.local, record.id)) ++local_accept_correct;
      continue;
    }
    if (!record.remote) {
      throw CalibrationError("record \"" + record.id +
                             "\" fails the first-level check but has no remote observation");
    }
    remote_handled.push_back({apply_quantifier(remote_quantifier, *record.remote),
                              resolve_observation(record.truth, *record.remote, record.id)});
  }
  std::size_t remote_correct = 0;
  for (const auto& s : remote_handled) remote_correct += s.correct ? 1 : 0;
  const std::size_t system_correct = local_accept_correct + remote_correct;
  if (system_correct == 0) {
    throw CalibrationError("calibrate_second_level: no system-correct predictions; FPR undefined");
  }

  std::sort(remote_handled.begin(), remote_handled.end(),
            [](const RemoteSample& a, const RemoteSample& b) { return a.confidence < b.confidence; });
  CalibrationResult result;
  result.threshold = -std::numeric_limits<double>::infinity();
  result.achieved = 0.0;
  result.sample_size = system_correct;
  std::size_t false_alarms = 0;
  std::size_t i = 0;
  while (i < remote_handled.size()) {
    const double value = remote_handled[i].confidence;
    std::size_t j = i;
    std::size_t correct_here = 0;
    while (j < remote_handled.size() && remote_handled[j].confidence == value) {
      correct_here += remote_handled[j].correct ? 1 : 0;
      ++j;
    }
    const double fpr = static_cast<double>(false_alarms + correct_here) /
                       static_cast<double>(system_correct);
    if (fpr > target_fpr) break;
    false_alarms += correct_here;
    result.threshold = value;
    result.achieved = fpr;
    i = j;
  }
  return result;
}

enum class QuantileFit { Empirical, Gamma };

/// Threshold from the score distribution of nominal (correctly handled)
/// inputs. Empirical mode applies the conservative sample-quantile rule; gamma
/// mode inverts a moment-fitted gamma distribution at the target rate.
inline double nominal_quantile_threshold(const std::vector<double>& nominal_scores,
                                         double target_rate, QuantileFit fit) {
  detail::check_rate(target_rate, "target rate");
  if (nominal_scores.size() < 2) {
    throw CalibrationError("nominal_quantile_threshold: need at least 2 samples");
  }
  if (fit == QuantileFit::Empirical) {
    return threshold_for_fpr(nominal_scores, target_rate).threshold;
  }
  double mean = 0.0;
  for (double s : nominal_scores) {
    if (!(s > 0.0)) throw CalibrationError("gamma fit requires strictly positive scores");
    mean += s;
  }
  mean /= static_cast<double>(nominal_scores.size());
  double var = 0.0;
  for (double s : nominal_scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(nominal_scores.size() - 1);
  if (var <= mean * mean * 1e-14) throw CalibrationError("gamma fit: degenerate variance");
  const double shape = mean * mean / var;
  const double scale = var / mean;
  boost::math::gamma_distribution<double> dist(shape, scale);
  return boost::math::quantile(dist, target_rate);
}

/// Youden-optimal separation of nominal from invalid score distributions.
/// `degenerate` flags an (almost) non-separating result.
struct SeparationResult {
  double threshold = 0.0;
  double youden_j = 0.0;
  bool degenerate = false;
};

inline SeparationResult separation_threshold(const std::vector<double>& nominal_scores,
                                             const std::vector<double>& invalid_scores) {
  if (nominal_scores.empty() || invalid_scores.empty()) {
    throw CalibrationError("separation_threshold: both score sets must be non-empty");
  }
  std::vector<double> candidates;
  candidates.reserve(nominal_scores.size() + invalid_scores.size());
  candidates.insert(candidates.end(), nominal_scores.begin(), nominal_scores.end());
  candidates.insert(candidates.end(), invalid_scores.begin(), invalid_scores.end());
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());

  auto rejected_at = [](const std::vector<double>& scores, double threshold) {
    return static_cast<double>(std::count_if(scores.begin(), scores.end(),
                                             [&](double s) { return s <= threshold; })) /
           static_cast<double>(scores.size());
  };
  SeparationResult best;
  best.youden_j = -std::numeric_limits<double>::infinity();
  for (double t : candidates) {
    const double j = rejected_at(invalid_scores, t) - rejected_at(nominal_scores, t);
    if (j >= best.youden_j) {  // ties resolve toward the larger threshold
      best.youden_j = j;
      best.threshold = t;
    }
  }
  best.degenerate = best.youden_j < 1e-12;
  return best;
}

}  // namespace cascade
