#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cascade/quantifiers.hpp"
#include "cascade/trace.hpp"

namespace cascade {

struct CascadeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class RemoteErrorKind {
  Timeout,
  ConnectionFailed,
  UnknownInput,
  MalformedResponse,
  HttpStatus,
  Other,
};

class RemoteError : public std::runtime_error {
 public:
  RemoteError(RemoteErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  RemoteErrorKind kind() const { return kind_; }

 private:
  RemoteErrorKind kind_;
};

/// Acceptance thresholds for the two supervisor levels. Comparisons are
/// strict: conf > threshold accepts, equality forwards/rejects. -inf/+inf are
/// the all-accept / none-accept boundary settings.
struct Thresholds {
  double local = 0.0;
  double remote = 0.0;

  friend bool operator==(const Thresholds&, const Thresholds&) = default;
};

enum class Decision { LocalAccept, RemoteAccept, Rejected };

inline std::string_view decision_name(Decision d) {
  switch (d) {
    case Decision::LocalAccept: return "local_accept";
    case Decision::RemoteAccept: return "remote_accept";
    case Decision::Rejected: return "rejected";
  }
  return "?";
}

enum class FallbackPolicy { Error, ServeLocal, Reject };

inline std::string_view fallback_policy_name(FallbackPolicy p) {
  switch (p) {
    case FallbackPolicy::Error: return "error";
    case FallbackPolicy::ServeLocal: return "serve-local";
    case FallbackPolicy::Reject: return "reject";
  }
  return "?";
}

inline FallbackPolicy fallback_policy_from_name(std::string_view name) {
  for (FallbackPolicy p : {FallbackPolicy::Error, FallbackPolicy::ServeLocal, FallbackPolicy::Reject}) {
    if (fallback_policy_name(p) == name) return p;
  }
  throw CascadeError("unknown fallback policy \"" + std::string(name) + "\"");
}

/// One input's materialized run. `correct` is absent for rejected inputs;
/// `would_be_correct` additionally records the correctness of the prediction
/// that was (or would have been) served, which false-alarm accounting needs.
/// `degraded` marks outcomes produced by a remote-failure fallback.
struct CascadeOutcome {
  std::string id;
  Decision decision = Decision::LocalAccept;
  std::optional<Prediction> served_prediction;
  std::optional<bool> correct;
  std::optional<bool> would_be_correct;
  double conf_local = 0.0;
  std::optional<double> conf_remote;
  double latency_s = 0.0;
  double cost = 0.0;
  bool remote_called = false;
  bool degraded = false;

  friend bool operator==(const CascadeOutcome&, const CascadeOutcome&) = default;
};

/// The two-level decision step. The remote supplier is invoked lazily, at most
/// once, and only when the local confidence fails the strict `>` check.
template <typename RemoteConfSupplier>
Decision decide(double conf_local, const Thresholds& thresholds,
                RemoteConfSupplier&& remote_confidence) {
  if (std::isnan(conf_local)) throw CascadeError("decide: conf_local is NaN");
  if (std::isnan(thresholds.local) || std::isnan(thresholds.remote)) {
    throw CascadeError("decide: thresholds must not be NaN");
  }
  if (conf_local > thresholds.local) return Decision::LocalAccept;
  const double conf_remote = remote_confidence();
  return conf_remote > thresholds.remote ? Decision::RemoteAccept : Decision::Rejected;
}

/// Source of remote observations for a cascade run. Implementations: trace
/// replay (below) and the HTTP client in remote.hpp. Must yield the same
/// observation for the same id.
using RemoteSupplier = std::function<ModelObservation(const TraceRecord&)>;

inline RemoteSupplier replay_remote_supplier() {
  return [](const TraceRecord& record) -> ModelObservation {
    if (!record.remote) {
      throw RemoteError(RemoteErrorKind::UnknownInput,
                        "record \"" + record.id + "\" has no remote observation");
    }
    return *record.remote;
  };
}

struct RunOptions {
  Thresholds thresholds;
  QuantifierConfig local_quantifier;
  QuantifierConfig remote_quantifier;
  // Defaults when an observation carries no latency/cost of its own.
  double default_local_latency_s = 0.0;
  double default_remote_latency_s = 0.0;
  double cost_per_remote_call = 0.0;
  FallbackPolicy fallback = FallbackPolicy::Error;
  // Local-supervisor-only mode: inputs failing the first-level check are
  // rejected outright and the remote side is never consulted.
  bool local_only = false;
};

/// Runs the two-level cascade over every record, in order. The remote source
/// is consulted only for records failing the first-level check, exactly once
/// per record.
inline std::vector<CascadeOutcome> run_cascade(const TraceDataset& dataset,
                                               const RunOptions& options,
                                               const RemoteSupplier& remote) {
  std::vector<CascadeOutcome> outcomes;
  outcomes.reserve(dataset.records.size());
  for (const auto& record : dataset.records) {
    CascadeOutcome out;
    out.id = record.id;
    try {
      out.conf_local = apply_quantifier(options.local_quantifier, record.local);
    } catch (const QuantifierError& e) {
      throw CascadeError("record \"" + record.id + "\": " + e.what());
    }
    out.latency_s = record.local.latency_s.value_or(options.default_local_latency_s);

    if (options.local_only) {
      const bool local_correct = resolve_observation(record.truth, record.local, record.id);
      out.would_be_correct = local_correct;
      if (out.conf_local > options.thresholds.local) {
        out.decision = Decision::LocalAccept;
        out.served_prediction = record.local.prediction;
        out.correct = local_correct;
      } else {
        out.decision = Decision::Rejected;
      }
      outcomes.push_back(std::move(out));
      continue;
    }

    std::optional<ModelObservation> remote_obs;
    std::optional<double> remote_conf;
    bool remote_failed = false;
    auto remote_confidence = [&]() -> double {
      ModelObservation obs = remote(record);
      try {
        const double conf = apply_quantifier(options.remote_quantifier, obs);
        remote_obs = std::move(obs);
        remote_conf = conf;
        return conf;
      } catch (const QuantifierError& e) {
        throw CascadeError("record \"" + record.id + "\": " + e.what());
      }
    };

    Decision decision = Decision::LocalAccept;
    try {
      decision = decide(out.conf_local, options.thresholds, remote_confidence);
    } catch (const RemoteError&) {
      if (options.fallback == FallbackPolicy::Error) throw;
      remote_failed = true;
    }

    if (remote_failed) {
      out.degraded = true;
      if (options.fallback == FallbackPolicy::ServeLocal) {
        out.decision = Decision::LocalAccept;
        out.served_prediction = record.local.prediction;
        out.correct = resolve_observation(record.truth, record.local, record.id);
        out.would_be_correct = out.correct;
      } else {  // FallbackPolicy::Reject
        out.decision = Decision::Rejected;
      }
      outcomes.push_back(std::move(out));
      continue;
    }

    out.decision = decision;
    if (decision == Decision::LocalAccept) {
      out.served_prediction = record.local.prediction;
      out.correct = resolve_observation(record.truth, record.local, record.id);
      out.would_be_correct = out.correct;
    } else {
      out.remote_called = true;
      out.conf_remote = remote_conf;
      out.latency_s += remote_obs->latency_s.value_or(options.default_remote_latency_s);
      out.cost = remote_obs->cost.value_or(options.cost_per_remote_call);
      const bool remote_correct = resolve_observation(record.truth, *remote_obs, record.id);
      out.would_be_correct = remote_correct;
      if (decision == Decision::RemoteAccept) {
        out.served_prediction = remote_obs->prediction;
        out.correct = remote_correct;
      }
    }
    outcomes.push_back(std::move(out));
  }
  return outcomes;
}

/// Replay variant: remote observations come from the trace itself.
inline std::vector<CascadeOutcome> run_cascade(const TraceDataset& dataset,
                                               const RunOptions& options) {
  return run_cascade(dataset, options, replay_remote_supplier());
}

/// Fraction of inputs whose remote model was consulted.
inline double remote_fraction(const std::vector<CascadeOutcome>& outcomes) {
  if (outcomes.empty()) throw CascadeError("remote_fraction: no outcomes");
  std::size_t calls = 0;
  for (const auto& o : outcomes) calls += o.remote_called ? 1 : 0;
  return static_cast<double>(calls) / static_cast<double>(outcomes.size());
}

}  // namespace cascade
