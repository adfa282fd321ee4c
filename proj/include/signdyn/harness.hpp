#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "signdyn/theory.hpp"

namespace signdyn {

constexpr const char* kToolVersion = "signdyn 0.1.0";

// Everything that determines a run. Serialized as the first line of the
// trace (volatile wall-clock metadata goes to manifest.json only, so two
// runs of the same manifest produce byte-identical traces).
struct RunManifest {
  std::string experiment_id = "run";
  DataConfig data;
  ModelConfig model;
  OptimizerSpec optimizer;
  long iters = 2000;
  std::string probe_cadence = "1:50,10";
  int test_loss_every = 100;
  int n_test = 500;
  int zoom = 0;          // eta divisor for the micro-step segment; 0 = off
  long zoom_iters = 2000;
  std::string dataset_file;  // optional explicit dataset (else regenerated)
  std::string tool_version = kToolVersion;
};

std::string manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const std::string& text);

// Flat key/value config file (see README for the schema). d, n and s are
// required; everything else falls back to the documented row-(a) style
// defaults derived from d.
RunManifest parse_config_file(const std::string& path);
RunManifest parse_config_text(const std::string& text, const std::string& origin = "<config>");

struct GenerateSummary {
  int n = 0;
  int s = 0;
  bool disjoint = false;
  std::string path;
};

GenerateSummary run_generate(const RunManifest& manifest, const std::string& out_path);

struct RunPaths {
  std::string dir;
  std::string trace;
  std::string zoom_trace;  // empty when zoom is off
  std::string params;
  std::string manifest;
};

struct TrainResult {
  RunPaths paths;
  double final_train_loss = 0.0;
  double final_test_loss = 0.0;
  double final_test_zero_one = 0.0;
  double wall_seconds = 0.0;
};

// Full train pipeline: dataset, init, (optional zoom segment), main run,
// trace + checkpoint + manifest files under out_dir.
TrainResult run_train(const RunManifest& manifest, const std::string& out_dir);

void save_trace(const RunManifest& manifest, const std::vector<ProbeSnapshot>& snapshots,
                const std::string& path);
std::pair<RunManifest, std::vector<ProbeSnapshot>> load_trace_file(const std::string& path);

// Rebuild the full analysis context from a trace file (re-deriving the
// dataset and locating a sibling zoom trace when present).
TraceAnalysis load_analysis(const std::string& trace_path);
RunManifest manifest_of_trace(const std::string& trace_path);

struct VerifyResult {
  StageReport stages;
  ConvergenceVerdict convergence;
  GeneralizationVerdict generalization;
  AttentionSparsityVerdict attention;
  AuditReport audit;
  int exit_code = 0;  // 0 pass, 1 fail, 6 inconclusive
  std::string text;   // human-readable report
  std::string json;   // structured report
};

VerifyResult run_verify(const std::string& trace_path, double epsilon = 0.01,
                        const TheoryConstants& constants = {});

struct SweepRunRow {
  std::string id;
  std::map<std::string, std::string> overrides;
  bool ok = false;
  std::string error;
  double train_loss = 0.0, test_loss = 0.0, test_zero_one = 0.0;
  MeasuredTimes measured;
  bool stages_pass = false;
};

struct SweepResult {
  std::vector<SweepRunRow> rows;
  std::string summary_csv_path;
  bool any_error = false;
};

// Sweep file: JSON {"base": {...config keys...}, "grid": {key: [values]},
// "seeds": [ ... ]}. Runs the cartesian product, one directory per run.
SweepResult run_sweep(const std::string& sweep_path, const std::string& out_dir, int jobs);

// Report renderers.
std::string render_sign_table(const SignTable& table, const std::string& format,
                              double t_ref, double t_later);
std::string render_loss_csv(const std::vector<ProbeSnapshot>& snapshots);
std::string render_timeline(const PredictedTimes& predicted, const MeasuredTimes& measured,
                            const std::string& format);
std::string render_snapshot_csv(const std::vector<ProbeSnapshot>& snapshots);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace signdyn
