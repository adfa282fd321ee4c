// Command-line front end: generate | train | verify | sweep | report.
// Exit codes: 0 ok, 1 verification failed, 2 config error, 3 I/O error,
// 4 numeric error, 5 regime error, 6 inconclusive.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "signdyn/harness.hpp"

namespace fs = std::filesystem;
using namespace signdyn;

namespace {

struct GlobalFlags {
  bool quiet = false;
  std::optional<uint64_t> seed;
};

void apply_global_seed(RunManifest& manifest, const GlobalFlags& flags) {
  if (flags.seed) {
    manifest.data.seed = *flags.seed;
    manifest.model.init_seed = *flags.seed + 1000;
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Training-dynamics laboratory for sign descent on two-layer attention"};
  app.require_subcommand(1);
  GlobalFlags flags;
  app.add_flag("--quiet", flags.quiet, "suppress progress output");
  uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "override data seed (init seed + 1000)");

  // generate
  auto* gen = app.add_subcommand("generate", "generate a dataset file");
  std::string gen_config, gen_out = "dataset.jsonl";
  gen->add_option("--config", gen_config, "config file")->required();
  gen->add_option("--out", gen_out, "output dataset path");

  // train
  auto* train = app.add_subcommand("train", "run a training experiment");
  std::string train_config, train_out = "out", train_dataset;
  std::optional<std::string> train_optimizer, train_cadence;
  std::optional<long> train_iters;
  std::optional<double> train_eta, train_beta1, train_beta2, train_eps;
  std::optional<int> train_zoom;
  train->add_option("--config", train_config, "config file")->required();
  train->add_option("--out", train_out, "output directory");
  train->add_option("--dataset", train_dataset, "use an existing dataset file");
  train->add_option("--optimizer", train_optimizer, "signgd | gd | gd_momentum | adam");
  train->add_option("--iters", train_iters, "iteration count");
  train->add_option("--probe-cadence", train_cadence, "cadence schedule, e.g. 1:50,10");
  train->add_option("--eta", train_eta, "learning rate");
  train->add_option("--beta1", train_beta1, "beta1");
  train->add_option("--beta2", train_beta2, "beta2");
  train->add_option("--eps", train_eps, "epsilon");
  train->add_option("--zoom", train_zoom, "micro-step segment: eta divisor");

  // verify
  auto* verify = app.add_subcommand("verify", "verify stage predicates on a trace");
  std::string verify_trace, verify_report;
  double verify_eps = 0.01;
  verify->add_option("trace", verify_trace, "trace.jsonl from train")->required();
  verify->add_option("--report", verify_report, "report path prefix (writes .json and .txt)");
  verify->add_option("--epsilon", verify_eps, "convergence target for the training loss");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "run a grid of experiments");
  std::string sweep_file, sweep_out = "sweep_out";
  int sweep_jobs = 1;
  sweep->add_option("sweep", sweep_file, "sweep JSON file")->required();
  sweep->add_option("--out", sweep_out, "output directory");
  sweep->add_option("--jobs", sweep_jobs, "parallel runs");

  // report
  auto* report = app.add_subcommand("report", "render tables from a trace");
  std::string report_trace, report_format = "csv", report_out = "report_out";
  double report_t1 = 0.0, report_t2 = 10.0;
  report->add_option("trace", report_trace, "trace.jsonl from train")->required();
  report->add_option("--format", report_format, "csv | md")->check(CLI::IsMember({"csv", "md"}));
  report->add_option("--out", report_out, "output directory");
  report->add_option("--t-ref", report_t1, "sign table reference iteration");
  report->add_option("--t", report_t2, "sign table comparison iteration");

  CLI11_PARSE(app, argc, argv);
  if (*seed_opt) flags.seed = seed_value;

  if (*gen) {
    RunManifest manifest = parse_config_file(gen_config);
    apply_global_seed(manifest, flags);
    const GenerateSummary summary = run_generate(manifest, gen_out);
    if (!flags.quiet)
      std::printf("wrote %s: n=%d, s=%d, supports disjoint: %s\n", summary.path.c_str(),
                  summary.n, summary.s, summary.disjoint ? "true" : "false");
  } else if (*train) {
    RunManifest manifest = parse_config_file(train_config);
    apply_global_seed(manifest, flags);
    if (!train_dataset.empty()) manifest.dataset_file = train_dataset;
    if (train_optimizer) {
      manifest.optimizer.kind = optimizer_kind_from_string(*train_optimizer);
      if (manifest.optimizer.kind == OptimizerKind::adam && manifest.optimizer.epsilon == 0.0) {
        manifest.optimizer.beta1 = 0.9;
        manifest.optimizer.beta2 = 0.999;
        manifest.optimizer.epsilon = 1e-15;
      }
    }
    if (train_iters) manifest.iters = *train_iters;
    if (train_cadence) manifest.probe_cadence = *train_cadence;
    if (train_eta) manifest.optimizer.eta = *train_eta;
    if (train_beta1) manifest.optimizer.beta1 = *train_beta1;
    if (train_beta2) manifest.optimizer.beta2 = *train_beta2;
    if (train_eps) manifest.optimizer.epsilon = *train_eps;
    if (train_zoom) manifest.zoom = *train_zoom;
    manifest.optimizer.validate();
    const TrainResult result = run_train(manifest, train_out);
    if (!flags.quiet)
      std::printf("trace: %s\nfinal L_S = %.6g, L_D = %.6g (zero-one %.3f), %.1f s\n",
                  result.paths.trace.c_str(), result.final_train_loss, result.final_test_loss,
                  result.final_test_zero_one, result.wall_seconds);
  } else if (*verify) {
    const VerifyResult result = run_verify(verify_trace, verify_eps);
    if (!verify_report.empty()) {
      write_text_file(verify_report + ".json", result.json);
      write_text_file(verify_report + ".txt", result.text);
    }
    if (!flags.quiet) std::fputs(result.text.c_str(), stdout);
    return result.exit_code;
  } else if (*sweep) {
    const SweepResult result = run_sweep(sweep_file, sweep_out, sweep_jobs);
    if (!flags.quiet) {
      for (const SweepRunRow& row : result.rows)
        std::printf("%s: %s%s\n", row.id.c_str(), row.ok ? "ok" : "error: ",
                    row.ok ? "" : row.error.c_str());
      std::printf("summary: %s\n", result.summary_csv_path.c_str());
    }
    return result.any_error ? 1 : 0;
  } else if (*report) {
    auto [manifest, snapshots] = load_trace_file(report_trace);
    fs::create_directories(report_out);
    const std::string ext = report_format == "md" ? ".md" : ".csv";
    const ProbeSnapshot* ref = nullptr;
    const ProbeSnapshot* later = nullptr;
    for (const ProbeSnapshot& s : snapshots) {
      if (!ref && s.t >= report_t1) ref = &s;
      if (!later && s.t >= report_t2) later = &s;
    }
    if (!ref || !later) throw io_error("trace does not cover the requested sign-table times");
    const SignTable table = sign_table(*ref, *later);
    write_text_file((fs::path(report_out) / ("sign_table" + ext)).string(),
                    render_sign_table(table, report_format, ref->t, later->t));
    write_text_file((fs::path(report_out) / "loss.csv").string(), render_loss_csv(snapshots));
    const TraceAnalysis analysis = load_analysis(report_trace);
    const Params init = init_params(manifest.model);
    const BetaStats beta = beta_stats(init, analysis.dataset);
    const PredictedTimes predicted =
        predicted_times(manifest.data, manifest.model, manifest.optimizer.eta, beta);
    const MeasuredTimes measured = detect_transitions(analysis);
    write_text_file((fs::path(report_out) / ("timeline" + ext)).string(),
                    render_timeline(predicted, measured, report_format));
    write_text_file((fs::path(report_out) / "snapshots.csv").string(),
                    render_snapshot_csv(snapshots));
    if (!flags.quiet) std::printf("reports written to %s\n", report_out.c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const io_error& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 3;
  } catch (const numeric_error& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 4;
  } catch (const regime_error& e) {
    std::fprintf(stderr, "regime error: %s\n", e.what());
    return 5;
  } catch (const inconclusive_error& e) {
    std::fprintf(stderr, "inconclusive: %s\n", e.what());
    return 6;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
