#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cascade/rng.hpp"

namespace cascade {

using json = nlohmann::json;

struct TraceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TargetKind { Class, Answers, Boolean };

inline std::string_view target_kind_name(TargetKind kind) {
  switch (kind) {
    case TargetKind::Class: return "class";
    case TargetKind::Answers: return "answers";
    case TargetKind::Boolean: return "boolean";
  }
  return "?";
}

/// Ground truth for one input. `label` is meaningful for kind=class,
/// `accepted` for kind=answers; kind=boolean carries no reference value and
/// relies on precomputed `correct` flags in the observations.
struct PredictionTarget {
  TargetKind kind = TargetKind::Class;
  int label = 0;
  std::vector<std::string> accepted;

  friend bool operator==(const PredictionTarget&, const PredictionTarget&) = default;
};

using Prediction = std::variant<int, std::string>;

struct TokenOption {
  std::string token;
  double logprob = 0.0;

  friend bool operator==(const TokenOption&, const TokenOption&) = default;
};

/// Everything one model reported for one input. All fields are optional in the
/// trace schema; which ones must be present depends on the quantifier used.
struct ModelObservation {
  std::optional<Prediction> prediction;
  std::optional<std::vector<double>> softmax;
  std::optional<std::vector<double>> token_likelihoods;
  std::optional<std::vector<std::vector<TokenOption>>> top_tokens;
  std::optional<std::vector<double>> activations;
  std::optional<double> latency_s;
  std::optional<double> cost;
  std::optional<bool> correct;

  friend bool operator==(const ModelObservation&, const ModelObservation&) = default;
};

struct TraceRecord {
  std::string id;
  PredictionTarget truth;
  ModelObservation local;
  std::optional<ModelObservation> remote;

  friend bool operator==(const TraceRecord&, const TraceRecord&) = default;
};

struct TraceDataset {
  std::vector<TraceRecord> records;
  TargetKind task_kind = TargetKind::Class;
  std::string source;

  friend bool operator==(const TraceDataset&, const TraceDataset&) = default;
};

namespace detail {

inline void check_keys(const json& object, std::initializer_list<std::string_view> allowed,
                       const std::string& context) {
  for (const auto& item : object.items()) {
    if (std::find(allowed.begin(), allowed.end(), item.key()) == allowed.end()) {
      throw TraceError(context + ": unknown field \"" + item.key() + "\"");
    }
  }
}

inline double number_field(const json& j, const std::string& context) {
  if (!j.is_number()) throw TraceError(context + ": must be a number");
  return j.get<double>();
}

inline std::vector<double> number_array(const json& j, const std::string& context) {
  if (!j.is_array()) throw TraceError(context + ": must be an array of numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (const auto& v : j) out.push_back(number_field(v, context));
  return out;
}

inline void validate_observation(const ModelObservation& obs, const std::string& context) {
  if (obs.softmax) {
    if (obs.softmax->empty()) throw TraceError(context + ".softmax: must be non-empty");
    double sum = 0.0;
    for (double p : *obs.softmax) {
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
        throw TraceError(context + ".softmax: entries must lie in [0,1]");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw TraceError(context + ".softmax: softmax does not sum to 1");
    }
  }
  if (obs.token_likelihoods) {
    for (double p : *obs.token_likelihoods) {
      if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
        throw TraceError(context + ".token_likelihoods: entries must lie in [0,1]");
      }
    }
  }
  if (obs.top_tokens) {
    for (const auto& position : *obs.top_tokens) {
      for (const auto& option : position) {
        if (!std::isfinite(option.logprob) || option.logprob > 0.0) {
          throw TraceError(context + ".top_tokens: logprob must be <= 0");
        }
      }
    }
  }
  if (obs.latency_s && (!std::isfinite(*obs.latency_s) || *obs.latency_s < 0.0)) {
    throw TraceError(context + ".latency_s: must be >= 0");
  }
  if (obs.cost && (!std::isfinite(*obs.cost) || *obs.cost < 0.0)) {
    throw TraceError(context + ".cost: must be >= 0");
  }
}

// The loader rejects observations whose correctness could never be resolved;
// everything downstream may then assume resolve_correctness succeeds.
inline bool correctness_resolvable(const PredictionTarget& truth, const ModelObservation& obs) {
  if (obs.correct) return true;
  switch (truth.kind) {
    case TargetKind::Class:
      return (obs.prediction && std::holds_alternative<int>(*obs.prediction)) ||
             (obs.softmax && !obs.softmax->empty());
    case TargetKind::Answers:
      return obs.prediction && std::holds_alternative<std::string>(*obs.prediction);
    case TargetKind::Boolean:
      return false;
  }
  return false;
}

}  // namespace detail

inline PredictionTarget parse_truth(const json& j, const std::string& context) {
  if (!j.is_object()) throw TraceError(context + ": must be an object");
  if (!j.contains("kind") || !j["kind"].is_string()) {
    throw TraceError(context + ".kind: missing or not a string");
  }
  PredictionTarget truth;
  const std::string kind = j["kind"].get<std::string>();
  if (kind == "class") {
    detail::check_keys(j, {"kind", "label"}, context);
    if (!j.contains("label") || !j["label"].is_number_integer()) {
      throw TraceError(context + ".label: missing or not an integer");
    }
    truth.kind = TargetKind::Class;
    truth.label = j["label"].get<int>();
    if (truth.label < 0) throw TraceError(context + ".label: must be >= 0");
  } else if (kind == "answers") {
    detail::check_keys(j, {"kind", "accepted"}, context);
    if (!j.contains("accepted") || !j["accepted"].is_array() || j["accepted"].empty()) {
      throw TraceError(context + ".accepted: must be a non-empty array");
    }
    truth.kind = TargetKind::Answers;
    for (const auto& a : j["accepted"]) {
      if (!a.is_string()) throw TraceError(context + ".accepted: entries must be strings");
      truth.accepted.push_back(a.get<std::string>());
    }
  } else if (kind == "boolean") {
    detail::check_keys(j, {"kind"}, context);
    truth.kind = TargetKind::Boolean;
  } else {
    throw TraceError(context + ".kind: unknown kind \"" + kind + "\"");
  }
  return truth;
}

inline ModelObservation parse_observation(const json& j, const std::string& context) {
  if (!j.is_object()) throw TraceError(context + ": must be an object");
  detail::check_keys(j,
                     {"prediction", "softmax", "token_likelihoods", "top_tokens", "activations",
                      "latency_s", "cost", "correct"},
                     context);
  ModelObservation obs;
  if (j.contains("prediction")) {
    const auto& p = j["prediction"];
    if (p.is_number_integer()) {
      obs.prediction = Prediction{p.get<int>()};
    } else if (p.is_string()) {
      obs.prediction = Prediction{p.get<std::string>()};
    } else {
      throw TraceError(context + ".prediction: must be an integer or a string");
    }
  }
  if (j.contains("softmax")) obs.softmax = detail::number_array(j["softmax"], context + ".softmax");
  if (j.contains("token_likelihoods")) {
    obs.token_likelihoods = detail::number_array(j["token_likelihoods"], context + ".token_likelihoods");
  }
  if (j.contains("top_tokens")) {
    const auto& positions = j["top_tokens"];
    if (!positions.is_array()) throw TraceError(context + ".top_tokens: must be an array");
    std::vector<std::vector<TokenOption>> parsed;
    for (const auto& position : positions) {
      if (!position.is_array()) throw TraceError(context + ".top_tokens: positions must be arrays");
      std::vector<TokenOption> options;
      for (const auto& o : position) {
        if (!o.is_object() || !o.contains("token") || !o["token"].is_string() ||
            !o.contains("logprob") || !o["logprob"].is_number()) {
          throw TraceError(context + ".top_tokens: options must be {token, logprob}");
        }
        detail::check_keys(o, {"token", "logprob"}, context + ".top_tokens");
        options.push_back({o["token"].get<std::string>(), o["logprob"].get<double>()});
      }
      parsed.push_back(std::move(options));
    }
    obs.top_tokens = std::move(parsed);
  }
  if (j.contains("activations")) {
    obs.activations = detail::number_array(j["activations"], context + ".activations");
  }
  if (j.contains("latency_s")) obs.latency_s = detail::number_field(j["latency_s"], context + ".latency_s");
  if (j.contains("cost")) obs.cost = detail::number_field(j["cost"], context + ".cost");
  if (j.contains("correct")) {
    if (!j["correct"].is_boolean()) throw TraceError(context + ".correct: must be a boolean");
    obs.correct = j["correct"].get<bool>();
  }
  detail::validate_observation(obs, context);
  return obs;
}

inline json truth_to_json(const PredictionTarget& truth) {
  json j;
  j["kind"] = std::string(target_kind_name(truth.kind));
  if (truth.kind == TargetKind::Class) j["label"] = truth.label;
  if (truth.kind == TargetKind::Answers) j["accepted"] = truth.accepted;
  return j;
}

inline json observation_to_json(const ModelObservation& obs) {
  json j = json::object();
  if (obs.prediction) {
    if (std::holds_alternative<int>(*obs.prediction)) {
      j["prediction"] = std::get<int>(*obs.prediction);
    } else {
      j["prediction"] = std::get<std::string>(*obs.prediction);
    }
  }
  if (obs.softmax) j["softmax"] = *obs.softmax;
  if (obs.token_likelihoods) j["token_likelihoods"] = *obs.token_likelihoods;
  if (obs.top_tokens) {
    json positions = json::array();
    for (const auto& position : *obs.top_tokens) {
      json options = json::array();
      for (const auto& o : position) options.push_back({{"token", o.token}, {"logprob", o.logprob}});
      positions.push_back(std::move(options));
    }
    j["top_tokens"] = std::move(positions);
  }
  if (obs.activations) j["activations"] = *obs.activations;
  if (obs.latency_s) j["latency_s"] = *obs.latency_s;
  if (obs.cost) j["cost"] = *obs.cost;
  if (obs.correct) j["correct"] = *obs.correct;
  return j;
}

inline json record_to_json(const TraceRecord& record) {
  json j;
  j["id"] = record.id;
  j["truth"] = truth_to_json(record.truth);
  j["local"] = observation_to_json(record.local);
  if (record.remote) j["remote"] = observation_to_json(*record.remote);
  return j;
}

inline TraceRecord parse_record(const json& j) {
  if (!j.is_object()) throw TraceError("record: must be an object");
  detail::check_keys(j, {"id", "truth", "local", "remote"}, "record");
  if (!j.contains("id") || !j["id"].is_string()) throw TraceError("id: missing or not a string");
  TraceRecord record;
  record.id = j["id"].get<std::string>();
  if (!j.contains("truth")) throw TraceError("truth: missing");
  record.truth = parse_truth(j["truth"], "truth");
  if (!j.contains("local")) throw TraceError("local: missing");
  record.local = parse_observation(j["local"], "local");
  if (j.contains("remote")) record.remote = parse_observation(j["remote"], "remote");

  if (!detail::correctness_resolvable(record.truth, record.local)) {
    throw TraceError("record \"" + record.id + "\": local observation cannot resolve correctness");
  }
  if (record.remote && !detail::correctness_resolvable(record.truth, *record.remote)) {
    throw TraceError("record \"" + record.id + "\": remote observation cannot resolve correctness");
  }
  return record;
}

/// Loads a newline-delimited JSON trace. Order is preserved; every record is
/// validated; duplicate ids and schema violations are reported with the line
/// number.
inline TraceDataset load_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw TraceError("cannot open trace file: " + path.string());
  TraceDataset dataset;
  dataset.source = path.string();
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw TraceError(path.string() + ": line " + std::to_string(line_number) +
                       ": parse error: " + e.what());
    }
    TraceRecord record;
    try {
      record = parse_record(j);
    } catch (const TraceError& e) {
      throw TraceError(path.string() + ": line " + std::to_string(line_number) + ": " + e.what());
    }
    if (!seen_ids.insert(record.id).second) {
      throw TraceError(path.string() + ": line " + std::to_string(line_number) +
                       ": duplicate id \"" + record.id + "\"");
    }
    if (!dataset.records.empty() && record.truth.kind != dataset.task_kind) {
      throw TraceError(path.string() + ": line " + std::to_string(line_number) +
                       ": truth.kind differs from previous records");
    }
    dataset.task_kind = record.truth.kind;
    dataset.records.push_back(std::move(record));
  }
  if (dataset.records.empty()) throw TraceError(path.string() + ": trace is empty");
  return dataset;
}

inline std::string serialize_trace(const TraceDataset& dataset) {
  std::ostringstream out;
  for (const auto& record : dataset.records) out << record_to_json(record).dump() << '\n';
  return out.str();
}

inline void save_trace(const TraceDataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw TraceError("cannot write trace file: " + path.string());
  out << serialize_trace(dataset);
}

/// Strict byte equality against the accepted answers; with normalize=true both
/// sides are ASCII-lowercased and stripped of surrounding whitespace first.
inline bool exact_match(const std::string& prediction, const std::vector<std::string>& accepted,
                        bool normalize = false) {
  if (accepted.empty()) throw TraceError("exact_match: accepted set is empty");
  if (!normalize) {
    return std::find(accepted.begin(), accepted.end(), prediction) != accepted.end();
  }
  auto canonical = [](const std::string& s) {
    std::size_t begin = 0, end = s.size();
    while (begin < end && std::isspace(static_cast<unsigned char>(s[begin]))) ++begin;
    while (end > begin && std::isspace(static_cast<unsigned char>(s[end - 1]))) --end;
    std::string out = s.substr(begin, end - begin);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
  };
  const std::string needle = canonical(prediction);
  return std::any_of(accepted.begin(), accepted.end(),
                     [&](const std::string& a) { return canonical(a) == needle; });
}

/// Index of the maximum softmax entry; ties resolve to the lowest index.
inline std::size_t softmax_argmax(const std::vector<double>& softmax) {
  if (softmax.empty()) throw TraceError("argmax: empty softmax");
  std::size_t best = 0;
  for (std::size_t i = 1; i < softmax.size(); ++i) {
    if (softmax[i] > softmax[best]) best = i;
  }
  return best;
}

/// Correctness of one observation against the ground truth. Precedence: the
/// explicit `correct` flag wins, then class comparison (argmax of softmax when
/// the prediction is absent), then exact match for answer sets.
inline bool resolve_observation(const PredictionTarget& truth, const ModelObservation& obs,
                                const std::string& id) {
  if (obs.correct) return *obs.correct;
  switch (truth.kind) {
    case TargetKind::Class: {
      if (obs.prediction && std::holds_alternative<int>(*obs.prediction)) {
        return std::get<int>(*obs.prediction) == truth.label;
      }
      if (obs.softmax && !obs.softmax->empty()) {
        return static_cast<int>(softmax_argmax(*obs.softmax)) == truth.label;
      }
      break;
    }
    case TargetKind::Answers: {
      if (obs.prediction && std::holds_alternative<std::string>(*obs.prediction)) {
        return exact_match(std::get<std::string>(*obs.prediction), truth.accepted);
      }
      break;
    }
    case TargetKind::Boolean:
      break;
  }
  throw TraceError("record \"" + id + "\": correctness unresolvable");
}

struct ResolvedCorrectness {
  bool local = false;
  std::optional<bool> remote;

  friend bool operator==(const ResolvedCorrectness&, const ResolvedCorrectness&) = default;
};

inline ResolvedCorrectness resolve_correctness(const TraceRecord& record) {
  ResolvedCorrectness out;
  out.local = resolve_observation(record.truth, record.local, record.id);
  if (record.remote) out.remote = resolve_observation(record.truth, *record.remote, record.id);
  return out;
}

/// Parameters for the synthetic trace generator used by tests and demos.
/// `complementarity` is the fraction of locally-correct inputs the remote
/// model gets wrong; when unset, the independence value 1 - remote_accuracy is
/// used (clamped to the feasible range after integer rounding).
struct SynthSpec {
  std::size_t n = 0;
  double local_accuracy = 0.0;
  double remote_accuracy = 0.0;
  std::optional<double> complementarity;
  std::uint64_t seed = 0;
};

inline TraceDataset synthesize_trace(const SynthSpec& spec) {
  if (spec.n < 1) throw TraceError("synthesize_trace: n must be >= 1");
  if (spec.local_accuracy < 0.0 || spec.local_accuracy > 1.0 || spec.remote_accuracy < 0.0 ||
      spec.remote_accuracy > 1.0) {
    throw TraceError("synthesize_trace: accuracies must lie in [0,1]");
  }
  const std::size_t n = spec.n;
  const auto n_local = static_cast<std::size_t>(std::llround(spec.local_accuracy * static_cast<double>(n)));
  const auto n_remote = static_cast<std::size_t>(std::llround(spec.remote_accuracy * static_cast<double>(n)));

  // x = locally-correct records the remote model mispredicts.
  const double lo_x = static_cast<double>(n_local) - static_cast<double>(n_remote);
  const double hi_x = std::min(static_cast<double>(n_local), static_cast<double>(n - n_remote));
  std::size_t x = 0;
  if (spec.complementarity) {
    if (*spec.complementarity < 0.0 || *spec.complementarity > 1.0) {
      throw TraceError("synthesize_trace: complementarity must lie in [0,1]");
    }
    const double requested = *spec.complementarity * static_cast<double>(n_local);
    if (requested < lo_x - 0.5 || requested > hi_x + 0.5) {
      throw TraceError("synthesize_trace: infeasible complementarity for the requested accuracies");
    }
    x = static_cast<std::size_t>(std::llround(std::clamp(requested, std::max(lo_x, 0.0), hi_x)));
  } else {
    const double requested = (1.0 - spec.remote_accuracy) * static_cast<double>(n_local);
    x = static_cast<std::size_t>(std::llround(std::clamp(requested, std::max(lo_x, 0.0), hi_x)));
  }
  const std::size_t remote_correct_among_wrong = n_remote - (n_local - x);

  SplitRng rng(spec.seed);
  constexpr int kClasses = 4;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<bool> local_correct(n, false), remote_correct(n, false);
  std::size_t wrong_seen = 0;
  for (std::size_t pos = 0; pos < n; ++pos) {
    const std::size_t i = order[pos];
    if (pos < n_local) {
      local_correct[i] = true;
      remote_correct[i] = pos >= x;  // first x locally-correct records are remote-wrong
    } else {
      remote_correct[i] = wrong_seen++ < remote_correct_among_wrong;
    }
  }

  auto make_observation = [&](int label, bool correct) {
    const double u = rng.uniform();
    const double span = 1.0 - 1.0 / kClasses;
    const double confidence =
        correct ? 1.0 - span * u * u : 1.0 / kClasses + span * u * u;
    int predicted = label;
    if (!correct) predicted = (label + 1 + static_cast<int>(rng.below(kClasses - 1))) % kClasses;
    ModelObservation obs;
    obs.prediction = Prediction{predicted};
    std::vector<double> softmax(kClasses, (1.0 - confidence) / (kClasses - 1));
    softmax[static_cast<std::size_t>(predicted)] = confidence;
    obs.softmax = std::move(softmax);
    return obs;
  };

  TraceDataset dataset;
  dataset.task_kind = TargetKind::Class;
  dataset.source = "synthetic(seed=" + std::to_string(spec.seed) + ")";
  dataset.records.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    TraceRecord record;
    char buf[24];
    std::snprintf(buf, sizeof buf, "r%06zu", i);
    record.id = buf;
    record.truth.kind = TargetKind::Class;
    record.truth.label = static_cast<int>(rng.below(kClasses));
    record.local = make_observation(record.truth.label, local_correct[i]);
    record.remote = make_observation(record.truth.label, remote_correct[i]);
    dataset.records.push_back(std::move(record));
  }
  return dataset;
}

}  // namespace cascade
