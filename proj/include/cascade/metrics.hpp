#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cascade/engine.hpp"
#include "cascade/rng.hpp"
#include "cascade/trace.hpp"

namespace cascade {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Per-record inputs for request-accuracy evaluation: the first-level
/// confidence plus resolved correctness on both sides.
struct RankedRecord {
  double confidence = 0.0;
  bool local_correct = false;
  bool remote_correct = false;
  std::size_t index = 0;
};

inline std::vector<RankedRecord> make_rac_input(const TraceDataset& dataset,
                                                const QuantifierConfig& local_quantifier) {
  std::vector<RankedRecord> input;
  input.reserve(dataset.records.size());
  for (std::size_t i = 0; i < dataset.records.size(); ++i) {
    const auto& record = dataset.records[i];
    if (!record.remote) {
      throw MetricsError("record \"" + record.id + "\" has no remote observation");
    }
    const ResolvedCorrectness correctness = resolve_correctness(record);
    RankedRecord ranked;
    try {
      ranked.confidence = apply_quantifier(local_quantifier, record.local);
    } catch (const QuantifierError& e) {
      throw MetricsError("record \"" + record.id + "\": " + e.what());
    }
    ranked.local_correct = correctness.local;
    ranked.remote_correct = *correctness.remote;
    ranked.index = i;
    input.push_back(ranked);
  }
  if (input.empty()) throw MetricsError("empty dataset");
  return input;
}

namespace detail {

// Forwarding order: lowest confidence first, ties by record index ascending.
inline std::vector<std::size_t> forwarding_order(const std::vector<RankedRecord>& input) {
  std::vector<std::size_t> order(input.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (input[a].confidence != input[b].confidence) {
      return input[a].confidence < input[b].confidence;
    }
    return input[a].index < input[b].index;
  });
  return order;
}

}  // namespace detail

/// System accuracy when exactly the i least-confident records are served by
/// the remote model and the rest locally.
inline double system_accuracy_at(const std::vector<RankedRecord>& input, std::size_t i) {
  const std::size_t n = input.size();
  if (n == 0) throw MetricsError("system_accuracy_at: empty input");
  if (i > n) throw MetricsError("system_accuracy_at: i out of range");
  const auto order = detail::forwarding_order(input);
  std::size_t correct = 0;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const RankedRecord& r = input[order[pos]];
    correct += (pos < i ? r.remote_correct : r.local_correct) ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

struct RacPoint {
  double r = 0.0;
  double accuracy = 0.0;

  friend bool operator==(const RacPoint&, const RacPoint&) = default;
};

/// The (remote fraction, system accuracy) grid: n+1 points at r = i/n.
struct RacCurve {
  std::vector<RacPoint> points;
  std::size_t n = 0;
};

inline RacCurve rac_curve(const std::vector<RankedRecord>& input) {
  const std::size_t n = input.size();
  if (n == 0) throw MetricsError("rac_curve: empty input");
  const auto order = detail::forwarding_order(input);
  std::int64_t correct = 0;
  for (const auto& r : input) correct += r.local_correct ? 1 : 0;
  RacCurve curve;
  curve.n = n;
  curve.points.reserve(n + 1);
  curve.points.push_back({0.0, static_cast<double>(correct) / static_cast<double>(n)});
  for (std::size_t i = 1; i <= n; ++i) {
    const RankedRecord& swapped = input[order[i - 1]];
    correct += (swapped.remote_correct ? 1 : 0) - (swapped.local_correct ? 1 : 0);
    curve.points.push_back({static_cast<double>(i) / static_cast<double>(n),
                            static_cast<double>(correct) / static_cast<double>(n)});
  }
  return curve;
}

inline RacCurve rac_curve(const TraceDataset& dataset, const QuantifierConfig& local_quantifier) {
  return rac_curve(make_rac_input(dataset, local_quantifier));
}

inline double system_accuracy_at(const TraceDataset& dataset,
                                 const QuantifierConfig& local_quantifier, std::size_t i) {
  return system_accuracy_at(make_rac_input(dataset, local_quantifier), i);
}

/// Normalized grid mean of the curve: 0 at all-local accuracy, 1 at all-remote
/// accuracy; 0.5 for random forwarding orders. The mean runs over all n+1 grid
/// points. Undefined when the endpoint accuracies coincide.
inline double auc_rac(const RacCurve& curve) {
  if (curve.points.size() != curve.n + 1 || curve.n == 0) {
    throw MetricsError("auc_rac: malformed curve");
  }
  const double acc_local = curve.points.front().accuracy;
  const double acc_remote = curve.points.back().accuracy;
  if (acc_local == acc_remote) {
    throw MetricsError("auc_rac: degenerate normalization (equal endpoint accuracies)");
  }
  double sum = 0.0;
  for (const auto& p : curve.points) sum += p.accuracy;
  const double mean = sum / static_cast<double>(curve.points.size());
  return (mean - acc_local) / (acc_remote - acc_local);
}

/// Curve landmarks: the cheapest peak, the cheapest point matching standalone
/// remote accuracy, and whether the cascade beats the remote model outright.
struct RacSummary {
  double auc = 0.0;
  double acc_local = 0.0;
  double acc_remote = 0.0;
  double r_peak = 0.0;
  double acc_peak = 0.0;
  double r_remote_even = 0.0;
  bool superaccurate = false;
};

inline RacSummary rac_summary(const RacCurve& curve) {
  if (curve.points.size() != curve.n + 1 || curve.n == 0) {
    throw MetricsError("rac_summary: malformed curve");
  }
  RacSummary summary;
  summary.acc_local = curve.points.front().accuracy;
  summary.acc_remote = curve.points.back().accuracy;
  summary.auc = summary.acc_local == summary.acc_remote ? 0.0 : auc_rac(curve);
  summary.acc_peak = -1.0;
  bool even_found = false;
  for (const auto& p : curve.points) {
    if (p.accuracy > summary.acc_peak) {
      summary.acc_peak = p.accuracy;
      summary.r_peak = p.r;
    }
    if (!even_found && p.accuracy >= summary.acc_remote) {
      summary.r_remote_even = p.r;
      even_found = true;
    }
  }
  summary.superaccurate = summary.acc_peak > summary.acc_remote;
  return summary;
}

// ---------------------------------------------------------------------------
// Supervised (second-level) assessment

/// Fraction of inputs for which some prediction was served.
inline double acceptance_rate(const std::vector<CascadeOutcome>& outcomes) {
  if (outcomes.empty()) throw MetricsError("acceptance_rate: no outcomes");
  std::size_t accepted = 0;
  for (const auto& o : outcomes) accepted += o.decision != Decision::Rejected ? 1 : 0;
  return static_cast<double>(accepted) / static_cast<double>(outcomes.size());
}

/// Accuracy over the accepted (trusted) outcomes only.
inline double supervised_accuracy(const std::vector<CascadeOutcome>& outcomes) {
  std::size_t accepted = 0, correct = 0;
  for (const auto& o : outcomes) {
    if (o.decision == Decision::Rejected) continue;
    ++accepted;
    correct += o.correct.value_or(false) ? 1 : 0;
  }
  if (accepted == 0) throw MetricsError("supervised_accuracy: no accepted outcomes");
  return static_cast<double>(correct) / static_cast<double>(accepted);
}

/// False-alarm rate: rejected outcomes whose would-be-served prediction was
/// correct, over all outcomes whose would-be-served prediction was correct.
/// Degraded rejections with no remote information are excluded.
inline double false_positive_rate(const std::vector<CascadeOutcome>& outcomes) {
  std::size_t would_be_correct = 0, rejected_correct = 0;
  for (const auto& o : outcomes) {
    if (!o.would_be_correct || !*o.would_be_correct) continue;
    ++would_be_correct;
    rejected_correct += o.decision == Decision::Rejected ? 1 : 0;
  }
  if (would_be_correct == 0) {
    throw MetricsError("false_positive_rate: no correct predictions to alarm on");
  }
  return static_cast<double>(rejected_correct) / static_cast<double>(would_be_correct);
}

/// Combined score of supervised accuracy and acceptance rate; beta weights the
/// acceptance rate (beta -> 0 recovers accuracy, beta -> inf acceptance).
/// S(a, a, beta) = a.
inline double s_beta(double supervised_acc, double delta, double beta) {
  if (!(supervised_acc >= 0.0 && supervised_acc <= 1.0) || !(delta >= 0.0 && delta <= 1.0)) {
    throw MetricsError("s_beta: inputs must lie in [0,1]");
  }
  if (!(beta > 0.0)) throw MetricsError("s_beta: beta must be > 0");
  const double b2 = beta * beta;
  const double denominator = b2 * supervised_acc + delta;
  if (denominator == 0.0) return 0.0;
  return (1.0 + b2) * supervised_acc * delta / denominator;
}

/// Delta, supervised accuracy, achieved FPR and the S_beta scores for one
/// cascade configuration.
struct SupervisedReport {
  double delta = 0.0;
  double supervised_acc = 0.0;
  double fpr = 0.0;
  std::map<std::string, double> s_beta;
  double remote_fraction = 0.0;
};

inline SupervisedReport make_supervised_report(const std::vector<CascadeOutcome>& outcomes) {
  SupervisedReport report;
  report.delta = acceptance_rate(outcomes);
  report.supervised_acc = supervised_accuracy(outcomes);
  report.fpr = false_positive_rate(outcomes);
  for (double beta : {0.5, 1.0, 2.0}) {
    std::string key = beta == 0.5 ? "0.5" : beta == 1.0 ? "1" : "2";
    report.s_beta[key] = s_beta(report.supervised_acc, report.delta, beta);
  }
  report.remote_fraction = remote_fraction(outcomes);
  return report;
}

// ---------------------------------------------------------------------------
// Latency and cost

struct LatencyModel {
  double local_s = 0.0;   // average local preprocess + predict + supervise
  double remote_s = 0.0;  // average remote round trip incl. network
};

/// Average per-input latency when a fraction r of inputs goes remote.
inline double mean_latency(double r, const LatencyModel& model) {
  if (!(r >= 0.0 && r <= 1.0)) throw MetricsError("mean_latency: r must lie in [0,1]");
  return model.local_s + r * model.remote_s;
}

/// Remote fraction at which the cascade's mean latency equals the all-remote
/// latency: 1 - local/remote. Below it the cascade is faster.
inline double break_even_fraction(const LatencyModel& model) {
  if (!(model.local_s >= 0.0) || !(model.remote_s > model.local_s)) {
    throw MetricsError("break_even_fraction: requires remote_s > local_s >= 0");
  }
  return 1.0 - model.local_s / model.remote_s;
}

struct CostModel {
  double per_remote_call = 0.0;
};

struct CostReport {
  std::size_t remote_calls = 0;
  double total_cost = 0.0;
  double saved_fraction = 0.0;  // vs querying the remote model for every input
};

inline CostReport cost_report(const std::vector<CascadeOutcome>& outcomes, const CostModel&) {
  if (outcomes.empty()) throw MetricsError("cost_report: no outcomes");
  CostReport report;
  for (const auto& o : outcomes) {
    report.remote_calls += o.remote_called ? 1 : 0;
    report.total_cost += o.cost;
  }
  report.saved_fraction =
      1.0 - static_cast<double>(report.remote_calls) / static_cast<double>(outcomes.size());
  return report;
}

// ---------------------------------------------------------------------------
// Random baseline

struct RandomBaseline {
  double mean = 0.0;
  double stderror = 0.0;
  std::size_t repeats = 0;
};

/// Mean and standard error of the AUC under uniformly random forwarding
/// orders. Repeat i draws from an independent stream of `seed`, so the result
/// does not depend on evaluation order.
inline RandomBaseline random_auc_baseline(const std::vector<RankedRecord>& input,
                                          std::uint64_t seed, std::size_t repeats) {
  const std::size_t n = input.size();
  if (n == 0) throw MetricsError("random_auc_baseline: empty input");
  if (repeats < 1) throw MetricsError("random_auc_baseline: repeats must be >= 1");
  std::int64_t local_total = 0, remote_total = 0;
  for (const auto& r : input) {
    local_total += r.local_correct ? 1 : 0;
    remote_total += r.remote_correct ? 1 : 0;
  }
  if (local_total == remote_total) {
    // The normalization is only degenerate if every ordering yields equal
    // endpoints; endpoints are order-independent, so this is exact.
    throw MetricsError("random_auc_baseline: degenerate endpoints");
  }
  const double acc_local = static_cast<double>(local_total) / static_cast<double>(n);
  const double acc_remote = static_cast<double>(remote_total) / static_cast<double>(n);

  SplitRng root(seed);
  std::vector<std::size_t> order(n);
  std::vector<double> aucs;
  aucs.reserve(repeats);
  for (std::size_t rep = 0; rep < repeats; ++rep) {
    SplitRng rng = root.split(rep);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::int64_t correct = local_total;
    double sum = static_cast<double>(correct) / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const RankedRecord& swapped = input[order[i]];
      correct += (swapped.remote_correct ? 1 : 0) - (swapped.local_correct ? 1 : 0);
      sum += static_cast<double>(correct) / static_cast<double>(n);
    }
    const double mean_acc = sum / static_cast<double>(n + 1);
    aucs.push_back((mean_acc - acc_local) / (acc_remote - acc_local));
  }
  RandomBaseline baseline;
  baseline.repeats = repeats;
  for (double a : aucs) baseline.mean += a;
  baseline.mean /= static_cast<double>(repeats);
  if (repeats > 1) {
    double ss = 0.0;
    for (double a : aucs) ss += (a - baseline.mean) * (a - baseline.mean);
    baseline.stderror = std::sqrt(ss / static_cast<double>(repeats - 1)) /
                        std::sqrt(static_cast<double>(repeats));
  }
  return baseline;
}

inline RandomBaseline random_auc_baseline(const TraceDataset& dataset,
                                          const QuantifierConfig& local_quantifier,
                                          std::uint64_t seed, std::size_t repeats) {
  return random_auc_baseline(make_rac_input(dataset, local_quantifier), seed, repeats);
}

}  // namespace cascade
