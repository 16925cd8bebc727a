#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <string_view>

#include <json.hpp>

#include "cascade/engine.hpp"
#include "cascade/metrics.hpp"

namespace cascade {

struct ReportError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Write-temp-then-rename so readers never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, std::string_view content) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ReportError("cannot write " + tmp.string());
    out << content;
    if (!out) throw ReportError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ReportError("cannot rename " + tmp.string() + " to " + path.string());
}

/// CSV with header `r,accuracy`, one row per grid point, r at 6 decimals.
inline std::string rac_curve_csv(const RacCurve& curve) {
  std::string out = "r,accuracy\n";
  char buf[64];
  for (const auto& p : curve.points) {
    std::snprintf(buf, sizeof buf, "%.6f,%.10g\n", p.r, p.accuracy);
    out += buf;
  }
  return out;
}

inline json rac_summary_json(const RacSummary& summary) {
  return json{{"auc", summary.auc},
              {"acc_local", summary.acc_local},
              {"acc_remote", summary.acc_remote},
              {"r_peak", summary.r_peak},
              {"acc_peak", summary.acc_peak},
              {"r_remote_even", summary.r_remote_even},
              {"superaccurate", summary.superaccurate}};
}

inline json supervised_report_json(const SupervisedReport& report,
                                   std::optional<double> fpr_target) {
  json s_beta = json::object();
  for (const auto& [key, value] : report.s_beta) s_beta[key] = value;
  json j{{"fpr_achieved", report.fpr},
         {"delta", report.delta},
         {"supervised_accuracy", report.supervised_acc},
         {"s_beta", s_beta},
         {"remote_fraction", report.remote_fraction}};
  if (fpr_target) j["fpr_target"] = *fpr_target;
  return j;
}

inline json latency_json(double mean_s, std::optional<double> break_even) {
  json j{{"mean_s", mean_s}};
  if (break_even) j["break_even_fraction"] = *break_even;
  return j;
}

inline json cost_json(const CostReport& report) {
  return json{{"remote_calls", report.remote_calls},
              {"total_cost", report.total_cost},
              {"saved_fraction", report.saved_fraction}};
}

// JSON has no infinity literal; the +-inf boundary thresholds round-trip as
// the strings "inf"/"-inf".
inline json threshold_value_json(double value) {
  if (std::isfinite(value)) return value;
  return value > 0 ? "inf" : "-inf";
}

inline double threshold_value_from_json(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw ReportError("threshold value must be a number or \"inf\"/\"-inf\"");
}

inline json thresholds_json(const Thresholds& thresholds, const json& achieved) {
  return json{{"threshold_local", threshold_value_json(thresholds.local)},
              {"threshold_remote", threshold_value_json(thresholds.remote)},
              {"achieved", achieved}};
}

inline json prediction_json(const Prediction& prediction) {
  if (std::holds_alternative<int>(prediction)) return std::get<int>(prediction);
  return std::get<std::string>(prediction);
}

inline json outcome_json(const CascadeOutcome& outcome) {
  json j{{"id", outcome.id},
         {"decision", std::string(decision_name(outcome.decision))},
         {"conf_local", outcome.conf_local},
         {"latency_s", outcome.latency_s},
         {"cost", outcome.cost},
         {"remote_called", outcome.remote_called}};
  if (outcome.served_prediction) j["served_prediction"] = prediction_json(*outcome.served_prediction);
  if (outcome.correct) j["correct"] = *outcome.correct;
  if (outcome.would_be_correct) j["would_be_correct"] = *outcome.would_be_correct;
  if (outcome.conf_remote) j["conf_remote"] = *outcome.conf_remote;
  if (outcome.degraded) j["degraded"] = true;
  return j;
}

inline std::string outcomes_jsonl(const std::vector<CascadeOutcome>& outcomes) {
  std::string out;
  for (const auto& o : outcomes) {
    out += outcome_json(o).dump();
    out += '\n';
  }
  return out;
}

}  // namespace cascade
