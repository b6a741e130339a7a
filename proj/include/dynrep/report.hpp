#pragma once

// Tables and plots over metrics stores, and the theory verdict.

#include "dynrep/runner.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dynrep {

struct MeanSe {
  double mean = std::nan("");
  double std_error = std::nan("");  // sample standard deviation / sqrt(n); 0 for n = 1
  std::size_t n = 0;
};

MeanSe mean_se(const std::vector<double>& values);

/// Equal weight per environment: the mean of per-environment means, with
/// the standard error of that average.
MeanSe aggregate_environments(const std::vector<MeanSe>& per_env);

enum class SweepAxis { finetune_size, pretrain_size };
const char* to_string(SweepAxis a);
SweepAxis parse_sweep_axis(const std::string& s);

struct SweepOptions {
  SweepAxis axis = SweepAxis::finetune_size;
  std::optional<int> fixed_pretrain;  // default: the largest size present
  std::optional<int> fixed_finetune;  // default: 2 if present, else the smallest
  bool inferrable = false;
  ContextRegime regime = ContextRegime::held_out;
  int step_gap = 1;
};

struct SweepPoint {
  Objective objective = Objective::id;
  int x = 0;
  MeanSe value;
  std::size_t environments = 0;
  bool baseline = false;  // drawn as a horizontal line in pretrain-size sweeps
};

struct SweepReport {
  SweepAxis axis = SweepAxis::finetune_size;
  int fixed_value = 0;
  std::vector<int> xs;
  std::vector<SweepPoint> points;
  std::vector<std::string> missing;  // "objective x=.. seed=.. env=.."
  std::vector<std::string> warnings;
};

SweepReport sweep_report(const std::vector<MetricsRecord>& records, const SweepOptions& options = {});

struct RegimeRow {
  std::string grouping;  // latent | inferrable
  ContextRegime regime = ContextRegime::held_out;
  Objective objective = Objective::id;
  MeanSe value;
};

struct RegimeReport {
  int pretrain_size = 0;
  int finetune_size = 0;
  std::vector<RegimeRow> rows;
  std::vector<std::string> warnings;  // empty groups
};

RegimeReport regime_report(const std::vector<MetricsRecord>& records);

void write_sweep_csv(const SweepReport& r, const std::filesystem::path& path);
void write_sweep_svg(const SweepReport& r, const std::filesystem::path& path);
void write_regime_csv(const RegimeReport& r, const std::filesystem::path& path);
void write_regime_svg(const RegimeReport& r, const std::filesystem::path& path);

/// Fixed colour per objective; ID is green.
const char* objective_color(Objective o);

inline const std::vector<std::string>& theory_experiments() {
  static const std::vector<std::string> names{"id-recovery", "bc-confounding", "fd-complexity"};
  return names;
}

struct TheoryVerdict {
  int exit_code = 0;  // 0 all pass, 1 a failure, 2 a missing report
  std::string text;
};

/// Reads <dir>/<experiment>.txt for every theory experiment.
TheoryVerdict theory_report(const std::filesystem::path& dir);

}  // namespace dynrep
