#include "dynrep/probes.hpp"
#include "dynrep/report.hpp"
#include "dynrep/runner.hpp"
#include "dynrep/theory.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace dynrep;

namespace {

std::vector<MetricsRecord> load_stores(const std::vector<std::string>& stores) {
  std::vector<MetricsRecord> all;
  for (const auto& s : stores) {
    std::filesystem::path p = s;
    if (std::filesystem::is_directory(p)) p /= "metrics.csv";
    auto rs = read_metrics(p);
    all.insert(all.end(), rs.begin(), rs.end());
  }
  return all;
}

std::filesystem::path report_dir(const std::string& out, const std::vector<std::string>& stores) {
  if (!out.empty()) return out;
  std::filesystem::path p = stores.front();
  return std::filesystem::is_directory(p) ? p : (p.has_parent_path() ? p.parent_path() : ".");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynrep: pretraining objectives on latent linear control problems"};
  app.require_subcommand(1);

  std::string out;
  int workers = 1;
  std::uint64_t seed_offset = 0;

  auto* run_cmd = app.add_subcommand("run", "Run every cell of an experiment config");
  std::string config_path;
  run_cmd->add_option("config", config_path, "Experiment config")->required()->check(CLI::ExistingFile);
  run_cmd->add_option("--out", out, "Output directory (overrides DYNREP_OUT and the config)");
  run_cmd->add_option("--workers", workers, "Parallel cells")->check(CLI::PositiveNumber);
  run_cmd->add_option("--seed-offset", seed_offset, "Added to every seed");

  auto* report_cmd = app.add_subcommand("report", "Tables and plots from metrics stores");
  report_cmd->require_subcommand(1);
  std::vector<std::string> stores;
  std::string axis = "finetune_size";
  std::optional<int> fixed_pretrain, fixed_finetune;
  bool inferrable = false;
  std::string regime = "held-out";
  auto* sweep_cmd = report_cmd->add_subcommand("sweep", "Success against dataset size");
  sweep_cmd->add_option("store", stores, "Metrics stores or run directories")->required();
  sweep_cmd->add_option("--axis", axis, "finetune_size or pretrain_size");
  sweep_cmd->add_option("--pretrain-size", fixed_pretrain, "Fixed pretraining size");
  sweep_cmd->add_option("--finetune-size", fixed_finetune, "Fixed finetuning size");
  sweep_cmd->add_flag("--inferrable", inferrable, "Use the inferrable-context cells");
  sweep_cmd->add_option("--regime", regime, "held-out or in-distribution");
  sweep_cmd->add_option("--out", out, "Report directory (default: next to the first store)");
  auto* regime_cmd = report_cmd->add_subcommand("regime", "Held-out vs in-distribution, latent vs inferrable");
  regime_cmd->add_option("store", stores, "Metrics stores or run directories")->required();
  regime_cmd->add_option("--out", out, "Report directory (default: next to the first store)");
  std::string theory_dir;
  auto* theory_cmd = report_cmd->add_subcommand("theory", "Collate theory reports");
  theory_cmd->add_option("store", theory_dir, "Directory with <experiment>.txt reports")->required();

  auto* probe_cmd = app.add_subcommand("probe", "State probe and alignment of a saved encoder");
  std::string encoder_path, dataset_path;
  long probe_steps = 2000;
  probe_cmd->add_option("encoder", encoder_path, "Saved encoder")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("dataset", dataset_path, "Saved dataset")->required()->check(CLI::ExistingFile);
  probe_cmd->add_option("--steps", probe_steps, "Probe MLP steps");
  probe_cmd->add_option("--seed-offset", seed_offset, "Probe seed");

  auto* verify_cmd = app.add_subcommand("verify", "Run one theory experiment and write its report");
  std::string experiment;
  verify_cmd->add_option("experiment", experiment, "id-recovery, bc-confounding or fd-complexity")
      ->required()
      ->check(CLI::IsMember(theory_experiments()));
  verify_cmd->add_option("--out", out, "Report directory (overrides DYNREP_OUT; default runs/theory)");
  verify_cmd->add_option("--seed-offset", seed_offset, "Experiment seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) {
      RunOptions opt;
      opt.workers = workers;
      opt.seed_offset = seed_offset;
      if (!out.empty()) opt.out = out;
      opt.log = &std::cerr;
      const RunSummary s = run(config_path, opt);
      std::cout << s.store.string() << "\n";
      std::cerr << "executed " << s.executed << ", skipped " << s.skipped << ", failed " << s.failed << "\n";
      return 0;
    }
    if (*sweep_cmd) {
      SweepOptions opt;
      opt.axis = parse_sweep_axis(axis);
      opt.fixed_pretrain = fixed_pretrain;
      opt.fixed_finetune = fixed_finetune;
      opt.inferrable = inferrable;
      opt.regime = parse_regime(regime);
      const SweepReport r = sweep_report(load_stores(stores), opt);
      const auto dir = report_dir(out, stores);
      const std::string stem = std::string("sweep_") + to_string(opt.axis);
      write_sweep_csv(r, dir / (stem + ".csv"));
      write_sweep_svg(r, dir / (stem + ".svg"));
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      for (const auto& m : r.missing) std::cerr << "missing: " << m << "\n";
      std::cout << (dir / (stem + ".csv")).string() << "\n" << (dir / (stem + ".svg")).string() << "\n";
      return 0;
    }
    if (*regime_cmd) {
      const RegimeReport r = regime_report(load_stores(stores));
      const auto dir = report_dir(out, stores);
      write_regime_csv(r, dir / "regimes.csv");
      write_regime_svg(r, dir / "regimes.svg");
      for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
      std::cout << (dir / "regimes.csv").string() << "\n" << (dir / "regimes.svg").string() << "\n";
      return 0;
    }
    if (*theory_cmd) {
      const TheoryVerdict v = theory_report(theory_dir);
      std::cout << v.text;
      return v.exit_code;
    }
    if (*probe_cmd) {
      const Encoder enc = load_encoder(encoder_path);
      const DatasetHandle ds = load_dataset(dataset_path);
      ProbeConfig pc;
      pc.steps = probe_steps;
      pc.seed = seed_offset;
      Rng rng = make_rng(seed_offset, 0x70726f6265);
      const ProbeResult r = probe_state(enc, ds, pc, rng);
      const AlignmentResult a = linear_alignment(enc.embed(observation_rows(ds, Split::all)), latent_rows(ds, Split::all));
      std::cout << "objective " << to_string(enc.objective()) << "\n"
                << "probe_train_mse " << r.train_loss << "\n"
                << "probe_val_mse " << r.val_loss << "\n"
                << "probe_r2 " << r.r_squared << "\n"
                << "alignment " << a.alignment << (a.degenerate ? " (degenerate)" : "") << "\n";
      return 0;
    }
    if (*verify_cmd) {
      std::filesystem::path dir = "runs/theory";
      if (!out.empty()) dir = out;
      else if (const char* env = std::getenv("DYNREP_OUT"); env && *env) dir = env;
      std::filesystem::create_directories(dir);
      const TheoryReport r = run_theory_experiment(experiment, seed_offset, true);
      write_report(r, dir / (experiment + ".txt"), dir / (experiment + ".csv"));
      std::cout << to_text(r);
      return r.pass ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "dynrep: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
