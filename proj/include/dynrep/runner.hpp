#pragma once

// Grid runner: one cell per (inferrable, regime, objective, pretrain size,
// finetune size, seed, step gap). Each cell pretrains, finetunes, evaluates
// and probes, then becomes one MetricsRecord row in <output>/metrics.csv.

#include "dynrep/config.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace dynrep {

#ifndef DYNREP_VERSION
#define DYNREP_VERSION "0.0.0"
#endif

inline constexpr const char* kCodeVersion = DYNREP_VERSION;
inline constexpr int kMetricsMajor = 1;
inline constexpr int kMetricsMinor = 0;

struct Cell {
  bool inferrable = false;
  ContextRegime regime = ContextRegime::held_out;
  Objective objective = Objective::id;
  int pretrain_size = 0;  // 0 for Scratch and States
  int finetune_size = 1;
  std::uint64_t seed = 0;
  int step_gap = 1;  // 1 unless the objective looks across time

  std::string coordinates() const;
};

bool uses_pretraining(Objective o);
bool uses_step_gap(Objective o);

/// Cartesian product of the config's axes in a fixed order, with the axes an
/// objective ignores collapsed so every cell appears once.
std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg);

/// Identity of the environment (MDP spec and context family), independent of
/// budgets and grid axes.
std::string environment_label(const ExperimentConfig& cfg);
std::uint64_t environment_hash(const ExperimentConfig& cfg);

std::uint64_t cell_hash(const ExperimentConfig& cfg, const Cell& cell);

struct MetricsRecord {
  std::string cell_hash;
  std::string config_hash;
  std::string env;
  std::string context;
  bool inferrable = false;
  ContextRegime regime = ContextRegime::held_out;
  Objective objective = Objective::id;
  int pretrain_size = 0;
  int finetune_size = 0;
  std::uint64_t seed = 0;
  int step_gap = 1;
  std::string status = "ok";  // ok | error
  std::string message;
  double success_rate = std::nan("");
  double std_error = std::nan("");
  int episodes = 0;
  double finetune_train_mse = std::nan("");
  double finetune_val_mse = std::nan("");
  double probe_train_mse = std::nan("");
  double probe_val_mse = std::nan("");
  double probe_r2 = std::nan("");
  double alignment = std::nan("");
  double pretrain_loss = std::nan("");
  double wall_seconds = 0.0;
  int threads = 1;
  std::string code_version = kCodeVersion;

  bool ok() const { return status == "ok"; }
};

const std::vector<std::string>& metrics_columns();
std::string metrics_version_line();
std::string to_csv_row(const MetricsRecord& r);

/// Throws on a missing or unknown-major version line, a header mismatch or a
/// malformed row. Later rows for the same cell replace earlier ones.
std::vector<MetricsRecord> read_metrics(const std::filesystem::path& store);
std::vector<MetricsRecord> read_metrics(std::istream& in, const std::string& name = "<stream>");

struct RunOptions {
  int workers = 1;
  std::uint64_t seed_offset = 0;
  std::optional<std::filesystem::path> out;  // beats DYNREP_OUT and the config
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::filesystem::path store;
  std::size_t cells = 0;
  std::size_t executed = 0;
  std::size_t skipped = 0;
  std::size_t failed = 0;
};

/// Output directory: --out, else $DYNREP_OUT, else the config's output key.
std::filesystem::path resolve_output(const ExperimentConfig& cfg, const RunOptions& options);

MetricsRecord run_cell(const ExperimentConfig& cfg, const Cell& cell, std::uint64_t seed_offset,
                       const std::filesystem::path* artifacts = nullptr);
RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& options = {});
RunSummary run(const std::filesystem::path& config_path, const RunOptions& options = {});

}  // namespace dynrep
