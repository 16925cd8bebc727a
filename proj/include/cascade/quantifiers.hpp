#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "cascade/trace.hpp"

namespace cascade {

// Confidence convention: larger = more trustworthy. Uncertainty measures
// (entropy, Gini impurity, Mahalanobis surprise) enter negated so a single
// comparison direction drives the whole cascade.
using ConfidenceScore = double;

struct QuantifierError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline void validate_probability_vector(std::span<const double> p) {
  if (p.empty()) throw QuantifierError("probability vector is empty");
  double sum = 0.0;
  for (double v : p) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw QuantifierError("probability vector entries must lie in [0,1]");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw QuantifierError("probability vector does not sum to 1");
}

/// Softmax likelihood of the predicted class; in [1/|C|, 1].
inline ConfidenceScore max_softmax(std::span<const double> softmax) {
  validate_probability_vector(softmax);
  return *std::max_element(softmax.begin(), softmax.end());
}

/// Difference between the two highest likelihoods; in [0, 1].
inline ConfidenceScore prediction_confidence_score(std::span<const double> softmax) {
  validate_probability_vector(softmax);
  if (softmax.size() < 2) throw QuantifierError("prediction confidence needs at least 2 classes");
  double best = -1.0, second = -1.0;
  for (double v : softmax) {
    if (v > best) {
      second = best;
      best = v;
    } else if (v > second) {
      second = v;
    }
  }
  return best - second;
}

/// Negated Shannon entropy (natural log, 0*ln 0 = 0); in [-ln|C|, 0].
inline ConfidenceScore negative_entropy(std::span<const double> softmax) {
  validate_probability_vector(softmax);
  double sum = 0.0;
  for (double p : softmax) {
    if (p > 0.0) sum += p * std::log(p);
  }
  return sum;
}

/// Sum of squared likelihoods, an order-reversal of Gini impurity; in [1/|C|, 1].
inline ConfidenceScore negative_gini(std::span<const double> softmax) {
  validate_probability_vector(softmax);
  double sum = 0.0;
  for (double p : softmax) sum += p * p;
  return sum;
}

inline void validate_likelihood_sequence(std::span<const double> likelihoods) {
  if (likelihoods.empty()) throw QuantifierError("token likelihood sequence is empty");
  for (double v : likelihoods) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
      throw QuantifierError("token likelihoods must lie in [0,1]");
    }
  }
}

/// Minimum per-token likelihood of a predicted sequence.
inline ConfidenceScore sequence_confidence_min(std::span<const double> likelihoods) {
  validate_likelihood_sequence(likelihoods);
  return *std::min_element(likelihoods.begin(), likelihoods.end());
}

/// Product of per-token likelihoods, accumulated in log space.
inline ConfidenceScore sequence_confidence_product(std::span<const double> likelihoods) {
  validate_likelihood_sequence(likelihoods);
  double log_sum = 0.0;
  for (double v : likelihoods) log_sum += std::log(v);
  return std::exp(log_sum);
}

/// Named disjoint groups of interchangeable tokens (e.g. "Negative",
/// "negative", "bad"). Matching is exact; no case folding.
class TokenEquivalence {
 public:
  void add_group(std::string name, std::vector<std::string> tokens) {
    for (const auto& token : tokens) {
      if (token_to_group_.count(token)) {
        throw QuantifierError("token \"" + token + "\" appears in more than one group");
      }
    }
    for (const auto& token : tokens) token_to_group_.emplace(token, name);
    groups_.emplace(std::move(name), std::move(tokens));
  }

  const std::vector<std::string>* group_of(const std::string& token) const {
    auto it = token_to_group_.find(token);
    if (it == token_to_group_.end()) return nullptr;
    return &groups_.at(it->second);
  }

  static TokenEquivalence from_json(const json& j) {
    if (!j.is_object()) throw QuantifierError("token equivalence config must be a JSON object");
    TokenEquivalence groups;
    for (const auto& item : j.items()) {
      if (!item.value().is_array()) {
        throw QuantifierError("token group \"" + item.key() + "\" must be an array of strings");
      }
      std::vector<std::string> tokens;
      for (const auto& t : item.value()) {
        if (!t.is_string()) {
          throw QuantifierError("token group \"" + item.key() + "\" must be an array of strings");
        }
        tokens.push_back(t.get<std::string>());
      }
      groups.add_group(item.key(), std::move(tokens));
    }
    return groups;
  }

  static TokenEquivalence load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw QuantifierError("cannot open token equivalence file: " + path.string());
    json j;
    try {
      j = json::parse(in);
    } catch (const json::parse_error& e) {
      throw QuantifierError(path.string() + ": " + e.what());
    }
    return from_json(j);
  }

  bool empty() const { return groups_.empty(); }

 private:
  std::map<std::string, std::vector<std::string>> groups_;
  std::map<std::string, std::string> token_to_group_;
};

/// Total likelihood of the predicted token's equivalence group among the
/// options listed for one sequence position. Tokens outside any configured
/// group count as their own singleton group; group members missing from the
/// list contribute nothing.
inline ConfidenceScore aggregate_equivalent_tokens(std::span<const TokenOption> options,
                                                   const TokenEquivalence& groups,
                                                   const std::string& predicted_token) {
  if (options.empty()) throw QuantifierError("top_tokens position has no options");
  const std::vector<std::string>* group = groups.group_of(predicted_token);
  double sum = 0.0;
  for (const auto& option : options) {
    const bool member = group
                            ? std::find(group->begin(), group->end(), option.token) != group->end()
                            : option.token == predicted_token;
    if (member) sum += std::exp(option.logprob);
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Mahalanobis-distance surprise

struct MdsaClassStats {
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;           // after ridge regularization
  Eigen::LLT<Eigen::MatrixXd> factor;   // Cholesky of `covariance`
  double epsilon = 0.0;
  std::size_t sample_count = 0;
};

/// Per-class Gaussian fit of training activations. Classes with fewer than
/// d+1 samples share the pooled global estimate, which also serves activations
/// of classes never seen during fitting.
class MdsaModel {
 public:
  int dimension() const { return dimension_; }
  double eps_scale() const { return eps_scale_; }

  bool has_own_stats(int class_index) const { return per_class_.count(class_index) > 0; }

  const MdsaClassStats& stats_for(int class_index) const {
    auto it = per_class_.find(class_index);
    if (it != per_class_.end()) return it->second;
    if (!global_) {
      throw QuantifierError("unknown class " + std::to_string(class_index) +
                            " and no global fallback");
    }
    return *global_;
  }

  const MdsaClassStats* global() const { return global_ ? &*global_ : nullptr; }

  friend MdsaModel fit_mdsa(const std::map<int, std::vector<std::vector<double>>>&, double);

 private:
  std::map<int, MdsaClassStats> per_class_;
  std::optional<MdsaClassStats> global_;
  int dimension_ = 0;
  double eps_scale_ = 0.0;
};

namespace detail {

// Ridge-regularized Cholesky: eps = eps_scale * trace/d, escalated x10 on
// factorization failure up to 1e-2 * trace/d.
inline void regularize_and_factor(MdsaClassStats& stats, double eps_scale) {
  const auto d = stats.covariance.rows();
  const double base = stats.covariance.trace() / static_cast<double>(d);
  double eps = eps_scale * base;
  const double max_eps = 1e-2 * base;
  for (;;) {
    Eigen::MatrixXd regularized =
        stats.covariance + eps * Eigen::MatrixXd::Identity(d, d);
    Eigen::LLT<Eigen::MatrixXd> llt(regularized);
    if (llt.info() == Eigen::Success &&
        llt.matrixLLT().diagonal().minCoeff() > 0.0) {
      stats.covariance = std::move(regularized);
      stats.factor = std::move(llt);
      stats.epsilon = eps;
      return;
    }
    if (eps <= 0.0 || eps * 10.0 > max_eps) {
      throw QuantifierError("covariance not positive definite after ridge escalation");
    }
    eps *= 10.0;
  }
}

inline MdsaClassStats gaussian_stats(const std::vector<const std::vector<double>*>& samples,
                                     int dimension) {
  MdsaClassStats stats;
  stats.sample_count = samples.size();
  stats.mean = Eigen::VectorXd::Zero(dimension);
  for (const auto* s : samples) {
    stats.mean += Eigen::Map<const Eigen::VectorXd>(s->data(), dimension);
  }
  stats.mean /= static_cast<double>(samples.size());
  stats.covariance = Eigen::MatrixXd::Zero(dimension, dimension);
  for (const auto* s : samples) {
    Eigen::VectorXd diff = Eigen::Map<const Eigen::VectorXd>(s->data(), dimension) - stats.mean;
    stats.covariance += diff * diff.transpose();
  }
  stats.covariance /= static_cast<double>(samples.size() - 1);
  return stats;
}

}  // namespace detail

inline MdsaModel fit_mdsa(const std::map<int, std::vector<std::vector<double>>>& activations_by_class,
                          double eps_scale = 1e-6) {
  if (activations_by_class.empty()) throw QuantifierError("fit_mdsa: no activations");
  int dimension = -1;
  std::vector<const std::vector<double>*> pooled;
  for (const auto& [class_index, samples] : activations_by_class) {
    for (const auto& s : samples) {
      if (dimension < 0) dimension = static_cast<int>(s.size());
      if (static_cast<int>(s.size()) != dimension || dimension == 0) {
        throw QuantifierError("fit_mdsa: activation dimension mismatch");
      }
      pooled.push_back(&s);
    }
  }
  const bool any_pair = std::any_of(activations_by_class.begin(), activations_by_class.end(),
                                    [](const auto& kv) { return kv.second.size() >= 2; });
  if (!any_pair) throw QuantifierError("fit_mdsa: need at least one class with >= 2 samples");

  MdsaModel model;
  model.dimension_ = dimension;
  model.eps_scale_ = eps_scale;

  if (pooled.size() >= 2) {
    MdsaClassStats global = detail::gaussian_stats(pooled, dimension);
    detail::regularize_and_factor(global, eps_scale);
    model.global_ = std::move(global);
  }

  for (const auto& [class_index, samples] : activations_by_class) {
    if (samples.size() < static_cast<std::size_t>(dimension) + 1) continue;  // global fallback
    std::vector<const std::vector<double>*> ptrs;
    ptrs.reserve(samples.size());
    for (const auto& s : samples) ptrs.push_back(&s);
    MdsaClassStats stats = detail::gaussian_stats(ptrs, dimension);
    detail::regularize_and_factor(stats, eps_scale);
    model.per_class_.emplace(class_index, std::move(stats));
  }
  return model;
}

/// Mahalanobis distance of an activation from the predicted class's training
/// distribution. Larger = more surprising; the cascade uses the negation as
/// its confidence score.
inline double mdsa_score(const MdsaModel& model, std::span<const double> activation,
                         int predicted_class) {
  if (static_cast<int>(activation.size()) != model.dimension()) {
    throw QuantifierError("mdsa_score: activation dimension mismatch");
  }
  const MdsaClassStats& stats = model.stats_for(predicted_class);
  Eigen::VectorXd diff =
      Eigen::Map<const Eigen::VectorXd>(activation.data(), activation.size()) - stats.mean;
  // ||L^-1 diff|| with covariance = L L^T.
  Eigen::VectorXd y = stats.factor.matrixL().solve(diff);
  return std::sqrt(y.squaredNorm());
}

inline ConfidenceScore mdsa_confidence(const MdsaModel& model, std::span<const double> activation,
                                       int predicted_class) {
  return -mdsa_score(model, activation, predicted_class);
}

// ---------------------------------------------------------------------------
// Quantifier selection for cascade runs

enum class QuantifierKind {
  MaxSoftmax,
  PredictionConfidence,
  NegativeEntropy,
  NegativeGini,
  SequenceMin,
  SequenceProduct,
  TokenAggregate,
  Mdsa,
};

inline std::string_view quantifier_name(QuantifierKind kind) {
  switch (kind) {
    case QuantifierKind::MaxSoftmax: return "max_softmax";
    case QuantifierKind::PredictionConfidence: return "pcs";
    case QuantifierKind::NegativeEntropy: return "entropy";
    case QuantifierKind::NegativeGini: return "gini";
    case QuantifierKind::SequenceMin: return "sequence_min";
    case QuantifierKind::SequenceProduct: return "sequence_product";
    case QuantifierKind::TokenAggregate: return "token_aggregate";
    case QuantifierKind::Mdsa: return "mdsa";
  }
  return "?";
}

inline QuantifierKind quantifier_kind_from_name(std::string_view name) {
  for (QuantifierKind kind :
       {QuantifierKind::MaxSoftmax, QuantifierKind::PredictionConfidence,
        QuantifierKind::NegativeEntropy, QuantifierKind::NegativeGini, QuantifierKind::SequenceMin,
        QuantifierKind::SequenceProduct, QuantifierKind::TokenAggregate, QuantifierKind::Mdsa}) {
    if (quantifier_name(kind) == name) return kind;
  }
  throw QuantifierError("unknown quantifier \"" + std::string(name) + "\"");
}

struct QuantifierConfig {
  QuantifierKind kind = QuantifierKind::MaxSoftmax;
  std::shared_ptr<const TokenEquivalence> token_groups;  // TokenAggregate only
  std::shared_ptr<const MdsaModel> mdsa;                 // Mdsa only
};

inline int predicted_class_of(const ModelObservation& obs) {
  if (obs.prediction && std::holds_alternative<int>(*obs.prediction)) {
    return std::get<int>(*obs.prediction);
  }
  if (obs.softmax && !obs.softmax->empty()) {
    return static_cast<int>(softmax_argmax(*obs.softmax));
  }
  throw QuantifierError("observation has no class prediction");
}

/// Reduces one observation to a confidence score. For TokenAggregate each
/// position's predicted token is its highest-logprob option and positions
/// reduce by minimum, matching the sequence-min convention.
inline ConfidenceScore apply_quantifier(const QuantifierConfig& config,
                                        const ModelObservation& obs) {
  switch (config.kind) {
    case QuantifierKind::MaxSoftmax:
    case QuantifierKind::PredictionConfidence:
    case QuantifierKind::NegativeEntropy:
    case QuantifierKind::NegativeGini: {
      if (!obs.softmax) throw QuantifierError("observation lacks softmax");
      switch (config.kind) {
        case QuantifierKind::MaxSoftmax: return max_softmax(*obs.softmax);
        case QuantifierKind::PredictionConfidence: return prediction_confidence_score(*obs.softmax);
        case QuantifierKind::NegativeEntropy: return negative_entropy(*obs.softmax);
        default: return negative_gini(*obs.softmax);
      }
    }
    case QuantifierKind::SequenceMin:
    case QuantifierKind::SequenceProduct: {
      if (!obs.token_likelihoods) throw QuantifierError("observation lacks token_likelihoods");
      return config.kind == QuantifierKind::SequenceMin
                 ? sequence_confidence_min(*obs.token_likelihoods)
                 : sequence_confidence_product(*obs.token_likelihoods);
    }
    case QuantifierKind::TokenAggregate: {
      if (!obs.top_tokens || obs.top_tokens->empty()) {
        throw QuantifierError("observation lacks top_tokens");
      }
      static const TokenEquivalence kNoGroups;
      const TokenEquivalence& groups = config.token_groups ? *config.token_groups : kNoGroups;
      double confidence = std::numeric_limits<double>::infinity();
      for (const auto& position : *obs.top_tokens) {
        if (position.empty()) throw QuantifierError("top_tokens position has no options");
        const auto best = std::max_element(
            position.begin(), position.end(),
            [](const TokenOption& a, const TokenOption& b) { return a.logprob < b.logprob; });
        confidence = std::min(confidence, aggregate_equivalent_tokens(position, groups, best->token));
      }
      return confidence;
    }
    case QuantifierKind::Mdsa: {
      if (!config.mdsa) throw QuantifierError("mdsa quantifier has no fitted model");
      if (!obs.activations) throw QuantifierError("observation lacks activations");
      return mdsa_confidence(*config.mdsa, *obs.activations, predicted_class_of(obs));
    }
  }
  throw QuantifierError("unknown quantifier kind");
}

}  // namespace cascade
