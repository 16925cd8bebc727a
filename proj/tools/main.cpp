// cascade: replay, calibrate and evaluate a two-level local/remote inference
// cascade over prediction-trace files, plus a deterministic remote stub.

#include <algorithm>
#include <csignal>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cascade/calibration.hpp"
#include "cascade/engine.hpp"
#include "cascade/metrics.hpp"
#include "cascade/remote.hpp"
#include "cascade/report.hpp"
#include "cascade/trace.hpp"

#include <CLI11.hpp>

namespace {

using namespace cascade;

struct QuantifierFlags {
  std::string local_name = "max_softmax";
  std::string remote_name = "max_softmax";
  std::string token_groups_path;
};

void add_quantifier_flags(CLI::App* cmd, QuantifierFlags& flags) {
  cmd->add_option("--quantifier-local", flags.local_name,
                  "Confidence quantifier for the local model (max_softmax, pcs, entropy, gini, "
                  "sequence_min, sequence_product, token_aggregate, mdsa)");
  cmd->add_option("--quantifier-remote", flags.remote_name,
                  "Confidence quantifier for the remote model");
  cmd->add_option("--token-groups", flags.token_groups_path,
                  "JSON file of equivalent-token groups for token_aggregate");
}

// Fits an MDSA model from a trace's activations grouped by class label.
std::shared_ptr<const MdsaModel> fit_mdsa_from_trace(const TraceDataset& dataset, bool remote_side) {
  std::map<int, std::vector<std::vector<double>>> by_class;
  for (const auto& record : dataset.records) {
    if (record.truth.kind != TargetKind::Class) {
      throw QuantifierError("mdsa fitting requires class-kind truth labels");
    }
    const ModelObservation* obs = remote_side
                                      ? (record.remote ? &*record.remote : nullptr)
                                      : &record.local;
    if (!obs) continue;
    if (!obs->activations) {
      throw QuantifierError("record \"" + record.id + "\" has no activations to fit mdsa");
    }
    by_class[record.truth.label].push_back(*obs->activations);
  }
  return std::make_shared<MdsaModel>(fit_mdsa(by_class));
}

QuantifierConfig make_quantifier(const std::string& name, const QuantifierFlags& flags,
                                 const TraceDataset& fit_dataset, bool remote_side) {
  QuantifierConfig config;
  config.kind = quantifier_kind_from_name(name);
  if (config.kind == QuantifierKind::TokenAggregate && !flags.token_groups_path.empty()) {
    config.token_groups =
        std::make_shared<TokenEquivalence>(TokenEquivalence::load(flags.token_groups_path));
  }
  if (config.kind == QuantifierKind::Mdsa) {
    config.mdsa = fit_mdsa_from_trace(fit_dataset, remote_side);
  }
  return config;
}

struct ThresholdFlags {
  std::optional<double> threshold_local;
  std::optional<double> threshold_remote;
  std::optional<double> target_fpr;
  std::optional<double> target_remote_fraction;
  bool baseline = false;
};

void add_threshold_flags(CLI::App* cmd, ThresholdFlags& flags, bool with_baseline) {
  cmd->add_option("--threshold-local", flags.threshold_local,
                  "Explicit 1st-level threshold (accepts inf/-inf)");
  cmd->add_option("--threshold-remote", flags.threshold_remote,
                  "Explicit 2nd-level threshold (accepts inf/-inf)");
  cmd->add_option("--target-fpr", flags.target_fpr,
                  "Calibrate the 2nd-level threshold to this overall false positive rate");
  cmd->add_option("--target-remote-fraction", flags.target_remote_fraction,
                  "Calibrate the 1st-level threshold to forward this fraction of inputs");
  if (with_baseline) {
    cmd->add_flag("--baseline", flags.baseline,
                  "Local-supervisor-only mode: 1st-level rejections become final; --target-fpr "
                  "then calibrates the local threshold");
  }
}

struct ResolvedThresholds {
  Thresholds thresholds{-std::numeric_limits<double>::infinity(),
                        -std::numeric_limits<double>::infinity()};
  json achieved = json::object();
  std::optional<double> fpr_target;
};

ResolvedThresholds resolve_thresholds(const ThresholdFlags& flags, const TraceDataset& calibration,
                                      const QuantifierConfig& local_quantifier,
                                      const QuantifierConfig& remote_quantifier) {
  ResolvedThresholds resolved;
  if (flags.baseline) {
    if (flags.threshold_remote || flags.target_remote_fraction) {
      throw CLI::ValidationError(
          "--baseline uses the local supervisor only; --threshold-remote and "
          "--target-remote-fraction do not apply");
    }
    if (flags.threshold_local.has_value() == flags.target_fpr.has_value()) {
      throw CLI::ValidationError(
          "--baseline needs exactly one of --threshold-local and --target-fpr");
    }
    if (flags.threshold_local) {
      resolved.thresholds.local = *flags.threshold_local;
    } else {
      std::vector<double> correct_confidences;
      for (const auto& record : calibration.records) {
        if (resolve_observation(record.truth, record.local, record.id)) {
          correct_confidences.push_back(apply_quantifier(local_quantifier, record.local));
        }
      }
      const CalibrationResult result = threshold_for_fpr(correct_confidences, *flags.target_fpr);
      resolved.thresholds.local = result.threshold;
      resolved.fpr_target = *flags.target_fpr;
      resolved.achieved["fpr"] = {{"target", *flags.target_fpr},
                                  {"achieved", result.achieved},
                                  {"sample_size", result.sample_size}};
    }
    return resolved;
  }

  if (flags.threshold_local.has_value() == flags.target_remote_fraction.has_value()) {
    throw CLI::ValidationError(
        "need exactly one of --threshold-local and --target-remote-fraction");
  }
  if (flags.threshold_remote.has_value() == flags.target_fpr.has_value()) {
    throw CLI::ValidationError("need exactly one of --threshold-remote and --target-fpr");
  }
  if (flags.threshold_local) {
    resolved.thresholds.local = *flags.threshold_local;
  } else {
    std::vector<double> confidences;
    confidences.reserve(calibration.records.size());
    for (const auto& record : calibration.records) {
      confidences.push_back(apply_quantifier(local_quantifier, record.local));
    }
    const CalibrationResult result =
        threshold_for_remote_fraction(confidences, *flags.target_remote_fraction);
    resolved.thresholds.local = result.threshold;
    resolved.achieved["remote_fraction"] = {{"target", *flags.target_remote_fraction},
                                            {"achieved", result.achieved},
                                            {"sample_size", result.sample_size}};
  }
  if (flags.threshold_remote) {
    resolved.thresholds.remote = *flags.threshold_remote;
  } else {
    const CalibrationResult result = calibrate_second_level(
        calibration, local_quantifier, remote_quantifier, resolved.thresholds.local,
        *flags.target_fpr);
    resolved.thresholds.remote = result.threshold;
    resolved.fpr_target = *flags.target_fpr;
    resolved.achieved["fpr"] = {{"target", *flags.target_fpr},
                                {"achieved", result.achieved},
                                {"sample_size", result.sample_size}};
  }
  return resolved;
}

std::string default_sibling(const std::string& out, const char* suffix) {
  std::filesystem::path path(out);
  path.replace_extension();
  path += suffix;
  return path.string();
}

// ---------------------------------------------------------------------------

void setup_synth(CLI::App& app) {
  auto* cmd = app.add_subcommand("synth", "Generate a synthetic prediction trace");
  auto n = std::make_shared<std::size_t>(1000);
  auto local_acc = std::make_shared<double>(0.7);
  auto remote_acc = std::make_shared<double>(0.9);
  auto complementarity = std::make_shared<std::optional<double>>();
  auto seed = std::make_shared<std::uint64_t>(42);
  auto out = std::make_shared<std::string>();
  cmd->add_option("--n", *n, "Number of records");
  cmd->add_option("--local-accuracy", *local_acc, "Requested local model accuracy");
  cmd->add_option("--remote-accuracy", *remote_acc, "Requested remote model accuracy");
  cmd->add_option("--complementarity", *complementarity,
                  "Fraction of locally-correct records the remote model gets wrong");
  cmd->add_option("--seed", *seed, "RNG seed");
  cmd->add_option("--out", *out, "Output trace path")->required();
  cmd->callback([=] {
    const TraceDataset dataset =
        synthesize_trace({*n, *local_acc, *remote_acc, *complementarity, *seed});
    atomic_write(*out, serialize_trace(dataset));
  });
}

void setup_rac(CLI::App& app) {
  auto* cmd = app.add_subcommand("rac", "Compute the request-accuracy curve and its summary");
  auto trace = std::make_shared<std::string>();
  auto flags = std::make_shared<QuantifierFlags>();
  auto out = std::make_shared<std::string>();
  auto summary_out = std::make_shared<std::string>();
  auto baseline_repeats = std::make_shared<std::size_t>(0);
  auto seed = std::make_shared<std::uint64_t>(42);
  cmd->add_option("--trace", *trace, "Trace file to evaluate")->required();
  add_quantifier_flags(cmd, *flags);
  cmd->add_option("--out", *out, "Output CSV path")->required();
  cmd->add_option("--summary-out", *summary_out,
                  "Summary JSON path (default: <out>.summary.json)");
  cmd->add_option("--baseline-repeats", *baseline_repeats,
                  "Also estimate the random-ordering AUC baseline with this many repeats");
  cmd->add_option("--seed", *seed, "RNG seed for the random baseline");
  cmd->callback([=] {
    const TraceDataset dataset = load_trace(*trace);
    const QuantifierConfig local_quantifier =
        make_quantifier(flags->local_name, *flags, dataset, false);
    const auto input = make_rac_input(dataset, local_quantifier);
    const RacCurve curve = rac_curve(input);
    const RacSummary summary = rac_summary(curve);
    json summary_json{{"rac", rac_summary_json(summary)}};
    if (*baseline_repeats > 0) {
      const RandomBaseline baseline = random_auc_baseline(input, *seed, *baseline_repeats);
      summary_json["random_baseline"] = {{"mean", baseline.mean},
                                         {"stderr", baseline.stderror},
                                         {"repeats", baseline.repeats}};
    }
    atomic_write(*out, rac_curve_csv(curve));
    const std::string summary_path =
        summary_out->empty() ? default_sibling(*out, ".summary.json") : *summary_out;
    atomic_write(summary_path, summary_json.dump(2) + "\n");
  });
}

void setup_calibrate(CLI::App& app) {
  auto* cmd = app.add_subcommand("calibrate", "Compute supervisor thresholds from a trace");
  auto trace = std::make_shared<std::string>();
  auto calibration_trace = std::make_shared<std::string>();
  auto quantifiers = std::make_shared<QuantifierFlags>();
  auto thresholds = std::make_shared<ThresholdFlags>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--trace", *trace, "Trace file (used when --calibration-trace is absent)");
  cmd->add_option("--calibration-trace", *calibration_trace, "Calibration trace file");
  add_quantifier_flags(cmd, *quantifiers);
  add_threshold_flags(cmd, *thresholds, /*with_baseline=*/true);
  cmd->add_option("--out", *out, "Output thresholds JSON path")->required();
  cmd->callback([=] {
    const std::string path = calibration_trace->empty() ? *trace : *calibration_trace;
    if (path.empty()) {
      throw CLI::ValidationError("calibrate needs --calibration-trace or --trace");
    }
    const TraceDataset dataset = load_trace(path);
    const QuantifierConfig local_quantifier =
        make_quantifier(quantifiers->local_name, *quantifiers, dataset, false);
    const QuantifierConfig remote_quantifier =
        make_quantifier(quantifiers->remote_name, *quantifiers, dataset, true);
    const ResolvedThresholds resolved =
        resolve_thresholds(*thresholds, dataset, local_quantifier, remote_quantifier);
    atomic_write(*out, thresholds_json(resolved.thresholds, resolved.achieved).dump(2) + "\n");
  });
}

json evaluation_report(const std::vector<CascadeOutcome>& outcomes,
                       const ResolvedThresholds& resolved, const LatencyModel& latency,
                       const CostModel& cost) {
  const SupervisedReport supervised = make_supervised_report(outcomes);
  json report{{"supervised", supervised_report_json(supervised, resolved.fpr_target)}};
  std::optional<double> break_even;
  if (latency.remote_s > latency.local_s && latency.remote_s > 0.0) {
    break_even = break_even_fraction(latency);
  }
  report["latency"] = latency_json(mean_latency(supervised.remote_fraction, latency), break_even);
  report["cost"] = cost_json(cost_report(outcomes, cost));
  return report;
}

struct ModelFlags {
  double latency_local = 0.0;
  double latency_remote = 0.0;
  double cost_per_call = 0.0;
};

void add_model_flags(CLI::App* cmd, ModelFlags& flags) {
  cmd->add_option("--latency-local", flags.latency_local,
                  "Average local latency in seconds (used when the trace has none)");
  cmd->add_option("--latency-remote", flags.latency_remote,
                  "Average remote latency in seconds (used when the trace has none)");
  cmd->add_option("--cost-per-call", flags.cost_per_call,
                  "Cost per remote call (used when the trace has none)");
}

RunOptions make_run_options(const ResolvedThresholds& resolved, const QuantifierConfig& local,
                            const QuantifierConfig& remote, const ModelFlags& model,
                            FallbackPolicy fallback, bool local_only) {
  RunOptions options;
  options.thresholds = resolved.thresholds;
  options.local_quantifier = local;
  options.remote_quantifier = remote;
  options.default_local_latency_s = model.latency_local;
  options.default_remote_latency_s = model.latency_remote;
  options.cost_per_remote_call = model.cost_per_call;
  options.fallback = fallback;
  options.local_only = local_only;
  return options;
}

void setup_evaluate(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "evaluate", "Run the cascade over a trace and report supervised performance");
  auto trace = std::make_shared<std::string>();
  auto calibration_trace = std::make_shared<std::string>();
  auto quantifiers = std::make_shared<QuantifierFlags>();
  auto thresholds = std::make_shared<ThresholdFlags>();
  auto model = std::make_shared<ModelFlags>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--trace", *trace, "Trace file to evaluate")->required();
  cmd->add_option("--calibration-trace", *calibration_trace,
                  "Trace used for threshold calibration (default: --trace)");
  add_quantifier_flags(cmd, *quantifiers);
  add_threshold_flags(cmd, *thresholds, /*with_baseline=*/true);
  add_model_flags(cmd, *model);
  cmd->add_option("--out", *out, "Output report JSON path")->required();
  cmd->callback([=] {
    const TraceDataset dataset = load_trace(*trace);
    const TraceDataset calibration =
        calibration_trace->empty() ? dataset : load_trace(*calibration_trace);
    const QuantifierConfig local_quantifier =
        make_quantifier(quantifiers->local_name, *quantifiers, calibration, false);
    const QuantifierConfig remote_quantifier =
        make_quantifier(quantifiers->remote_name, *quantifiers, calibration, true);
    const ResolvedThresholds resolved =
        resolve_thresholds(*thresholds, calibration, local_quantifier, remote_quantifier);
    const RunOptions options =
        make_run_options(resolved, local_quantifier, remote_quantifier, *model,
                         FallbackPolicy::Error, thresholds->baseline);
    const auto outcomes = run_cascade(dataset, options);
    json report =
        evaluation_report(outcomes, resolved, {model->latency_local, model->latency_remote},
                          {model->cost_per_call});
    report["thresholds"] = thresholds_json(resolved.thresholds, resolved.achieved);
    atomic_write(*out, report.dump(2) + "\n");
  });
}

void setup_sweep(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "sweep", "Evaluate every target FPR x target remote fraction combination");
  auto trace = std::make_shared<std::string>();
  auto calibration_trace = std::make_shared<std::string>();
  auto quantifiers = std::make_shared<QuantifierFlags>();
  auto fprs = std::make_shared<std::vector<double>>();
  auto fractions = std::make_shared<std::vector<double>>();
  auto model = std::make_shared<ModelFlags>();
  auto out = std::make_shared<std::string>();
  cmd->add_option("--trace", *trace, "Trace file to evaluate")->required();
  cmd->add_option("--calibration-trace", *calibration_trace,
                  "Trace used for threshold calibration (default: --trace)");
  add_quantifier_flags(cmd, *quantifiers);
  cmd->add_option("--target-fpr", *fprs, "Target overall false positive rates")->required();
  cmd->add_option("--target-remote-fraction", *fractions, "Target remote fractions")->required();
  add_model_flags(cmd, *model);
  cmd->add_option("--out", *out, "Output CSV path")->required();
  cmd->callback([=] {
    if (fprs->empty() || fractions->empty()) {
      throw CLI::ValidationError("sweep needs at least one --target-fpr and one "
                                 "--target-remote-fraction");
    }
    const TraceDataset dataset = load_trace(*trace);
    const TraceDataset calibration =
        calibration_trace->empty() ? dataset : load_trace(*calibration_trace);
    const QuantifierConfig local_quantifier =
        make_quantifier(quantifiers->local_name, *quantifiers, calibration, false);
    const QuantifierConfig remote_quantifier =
        make_quantifier(quantifiers->remote_name, *quantifiers, calibration, true);

    std::string csv =
        "target_fpr,target_remote_fraction,threshold_local,threshold_remote,remote_fraction,"
        "delta,supervised_accuracy,fpr_achieved,s_0.5,s_1,s_2\n";
    char row[512];
    for (double fpr : *fprs) {
      for (double fraction : *fractions) {
        ThresholdFlags flags;
        flags.target_fpr = fpr;
        flags.target_remote_fraction = fraction;
        const ResolvedThresholds resolved =
            resolve_thresholds(flags, calibration, local_quantifier, remote_quantifier);
        const RunOptions options = make_run_options(resolved, local_quantifier, remote_quantifier,
                                                    *model, FallbackPolicy::Error, false);
        const SupervisedReport report = make_supervised_report(run_cascade(dataset, options));
        std::snprintf(row, sizeof row,
                      "%g,%g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", fpr,
                      fraction, resolved.thresholds.local, resolved.thresholds.remote,
                      report.remote_fraction, report.delta, report.supervised_acc, report.fpr,
                      report.s_beta.at("0.5"), report.s_beta.at("1"), report.s_beta.at("2"));
        csv += row;
      }
    }
    atomic_write(*out, csv);
  });
}

void setup_replay(CLI::App& app) {
  auto* cmd = app.add_subcommand(
      "replay", "Run the cascade over a trace, in-process or against a remote service");
  auto trace = std::make_shared<std::string>();
  auto calibration_trace = std::make_shared<std::string>();
  auto quantifiers = std::make_shared<QuantifierFlags>();
  auto thresholds = std::make_shared<ThresholdFlags>();
  auto model = std::make_shared<ModelFlags>();
  auto remote_url = std::make_shared<std::string>();
  auto fallback = std::make_shared<std::string>("error");
  auto timeout = std::make_shared<double>(30.0);
  auto out = std::make_shared<std::string>();
  auto report_out = std::make_shared<std::string>();
  cmd->add_option("--trace", *trace, "Trace file to replay")->required();
  cmd->add_option("--calibration-trace", *calibration_trace,
                  "Trace used for threshold calibration (default: --trace)");
  add_quantifier_flags(cmd, *quantifiers);
  add_threshold_flags(cmd, *thresholds, /*with_baseline=*/false);
  add_model_flags(cmd, *model);
  cmd->add_option("--remote-url", *remote_url,
                  "Remote prediction endpoint; omitted = in-process replay");
  cmd->add_option("--fallback", *fallback, "Remote-failure policy: error, serve-local, reject");
  cmd->add_option("--timeout", *timeout, "Remote request timeout in seconds");
  cmd->add_option("--out", *out, "Output outcomes JSONL path")->required();
  cmd->add_option("--report-out", *report_out,
                  "Latency/cost report JSON path (default: <out>.report.json)");
  cmd->callback([=] {
    const TraceDataset dataset = load_trace(*trace);
    const TraceDataset calibration =
        calibration_trace->empty() ? dataset : load_trace(*calibration_trace);
    const QuantifierConfig local_quantifier =
        make_quantifier(quantifiers->local_name, *quantifiers, calibration, false);
    const QuantifierConfig remote_quantifier =
        make_quantifier(quantifiers->remote_name, *quantifiers, calibration, true);
    const ResolvedThresholds resolved =
        resolve_thresholds(*thresholds, calibration, local_quantifier, remote_quantifier);
    const RunOptions options =
        make_run_options(resolved, local_quantifier, remote_quantifier, *model,
                         fallback_policy_from_name(*fallback), false);

    std::vector<CascadeOutcome> outcomes;
    if (remote_url->empty()) {
      outcomes = run_cascade(dataset, options);
    } else {
      HttpRemoteClient client({*remote_url, *timeout, options.fallback});
      outcomes = run_cascade(dataset, options, http_remote_supplier(client));
    }

    const LatencyModel latency{model->latency_local, model->latency_remote};
    json report{{"remote_fraction", remote_fraction(outcomes)}};
    std::optional<double> break_even;
    if (latency.remote_s > latency.local_s && latency.remote_s > 0.0) {
      break_even = break_even_fraction(latency);
    }
    report["latency"] = latency_json(mean_latency(remote_fraction(outcomes), latency), break_even);
    report["cost"] = cost_json(cost_report(outcomes, {model->cost_per_call}));

    atomic_write(*out, outcomes_jsonl(outcomes));
    const std::string report_path =
        report_out->empty() ? default_sibling(*out, ".report.json") : *report_out;
    atomic_write(report_path, report.dump(2) + "\n");
  });
}

StubServer* g_stub = nullptr;

void stop_stub(int) {
  if (g_stub != nullptr) g_stub->stop();
}

void setup_serve_stub(CLI::App& app) {
  auto* cmd = app.add_subcommand("serve-stub",
                                 "Serve a trace's remote observations over HTTP until signalled");
  auto trace = std::make_shared<std::string>();
  auto host = std::make_shared<std::string>("127.0.0.1");
  auto port = std::make_shared<int>(8787);
  auto latency_ms = std::make_shared<double>(0.0);
  auto seed = std::make_shared<std::uint64_t>(0);
  cmd->add_option("--trace", *trace, "Trace file to serve")->required();
  cmd->add_option("--host", *host, "Bind address");
  cmd->add_option("--port", *port, "Bind port")->check(CLI::Range(1, 65535));
  cmd->add_option("--latency-ms", *latency_ms, "Injected per-request latency in milliseconds")
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--seed", *seed, "RNG seed (reserved)");
  cmd->callback([=] {
    StubServer stub({*host, *port, *trace, *latency_ms / 1000.0, *seed});
    g_stub = &stub;
    std::signal(SIGINT, stop_stub);
    std::signal(SIGTERM, stop_stub);
    std::fprintf(stderr, "serving %s on %s:%d\n", trace->c_str(), host->c_str(), *port);
    stub.run();
    g_stub = nullptr;
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised local/remote inference cascade toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Config file (TOML; flags override it)")
      ->envname("CASCADE_CONFIG");

  setup_synth(app);
  setup_rac(app);
  setup_calibrate(app);
  setup_evaluate(app);
  setup_sweep(app);
  setup_replay(app);
  setup_serve_stub(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
