// Acceptance checks A1-A9. One PASS/FAIL line per criterion; exit status is
// the number of failures.

#include "dynrep/finetune.hpp"
#include "dynrep/probes.hpp"
#include "dynrep/report.hpp"
#include "dynrep/runner.hpp"
#include "dynrep/theory.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>
#include <map>
#include <thread>
#include <sys/resource.h>

using namespace dynrep;
namespace fs = std::filesystem;

namespace {

// Tolerances.
constexpr double kGradTol = 1e-4;
constexpr int kGradPoints = 10;
constexpr std::size_t kGradCoords = 120;
constexpr double kIdMatrixTol = 1e-8;
constexpr double kIdAlignTol = 1e-8;
constexpr double kIdProbeR2 = 0.99;
constexpr double kA5Margin = 0.05;
constexpr double kA6Window = 0.05;
constexpr double kAffineTol = 1e-9;
constexpr double kInfoNceTol = 1e-9;
constexpr double kA9Seconds = 30 * 60;
constexpr double kA9Bytes = 2.0 * 1024 * 1024 * 1024;
constexpr double kA1Seconds = 60, kA2Seconds = 120, kA3Seconds = 600, kA4Seconds = 600;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void verdict(const std::string& id, bool pass, const std::string& detail) {
  if (!pass) ++failures;
  std::cout << id << " " << (pass ? "PASS" : "FAIL") << "  " << detail << std::endl;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string failed_checks(const TheoryReport& r) {
  std::string s;
  for (const auto& f : r.failures) s += (s.empty() ? "" : ", ") + f;
  return s.empty() ? "none" : s;
}

fs::path report_dir() {
  const fs::path d = fs::current_path() / "acceptance_reports";
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------- A1

void a1() {
  const auto t0 = Clock::now();
  const LatentMdp mdp = make_mdp(MdpSpec{}, 1);
  Rng data_rng(2);
  const DatasetHandle ds = generate_pretraining(mdp, ExpertPolicy{}, make_goal_family(false), 8, data_rng);
  const EncoderArch arch;  // the default 256-256-64 encoder and 256-256 heads
  double worst = 0.0;
  std::size_t checked = 0;
  for (Objective o : {Objective::id, Objective::bc, Objective::fd_explicit, Objective::fd_implicit,
                      Objective::contrastive}) {
    for (int p = 0; p < kGradPoints; ++p) {
      const int gap = p % 2 == 0 ? 1 : 3;
      const TransitionBatch data = transitions(ds, gap, Split::all);
      Rng rng = make_rng(0xa1, static_cast<std::uint64_t>(o), static_cast<std::uint64_t>(p));
      const AugSpec aug = o == Objective::contrastive ? default_contrastive_aug() : AugSpec{};
      auto model = make_objective_model(o, ds.obs_dim(), ds.action_dim(), gap, arch, aug, rng);
      const MiniBatch b = sample_minibatch(data, 8, rng);
      const GradCheckResult r = gradient_check(*model, b, 100 + p, 1e-5, kGradCoords, 7 + p);
      worst = std::max(worst, r.max_relative_error);
      checked += r.coordinates;
    }
  }
  const double secs = seconds_since(t0);
  verdict("A1", worst < kGradTol && secs < kA1Seconds,
          "gradient exactness: 5 objectives x " + std::to_string(kGradPoints) + " points, " + std::to_string(checked) +
              " coordinates, max rel err " + fmt(worst) + " (< " + fmt(kGradTol) + "), " + fmt(secs) + " s (< " +
              fmt(kA1Seconds) + ")");
}

// ---------------------------------------------------------------- A2

void a2() {
  const auto t0 = Clock::now();
  TheoryReport r = run_theory_experiment("id-recovery", 0);
  write_report(r, report_dir() / "id-recovery.txt", report_dir() / "id-recovery.csv");
  const double matrix_error = r.metric("matrix_error");
  const double alignment = r.metric("alignment");

  MdpSpec spec;
  spec.latent_dim = 4;
  spec.obs_dim = 32;
  spec.action_dim = 2;
  const LatentMdp mdp = make_mdp(spec, 3);
  Rng rng(4);
  const DatasetHandle ds = generate_pretraining(mdp, ExpertPolicy{}, make_goal_family(false), 1000, rng);
  const Mat probe_obs = observation_rows(ds, Split::val);
  const Mat probe_lat = latent_rows(ds, Split::val);
  PretrainConfig pc;  // default budget and architecture
  pc.objective = Objective::id;
  pc.seed = 5;
  double r2 = 0.0;
  long reached = -1;
  pc.monitor_every = 250;
  pc.monitor = [&](const Network& net, long step) {
    r2 = linear_alignment(Encoder::learned(Objective::id, net).embed(probe_obs), probe_lat).alignment;
    if (r2 > kIdProbeR2) reached = step;
    return r2 > kIdProbeR2;
  };
  const Encoder enc = pretrain(ds, pc, rng);
  r2 = linear_alignment(enc.embed(probe_obs), probe_lat).alignment;
  const double secs = seconds_since(t0);
  verdict("A2",
          matrix_error < kIdMatrixTol && alignment > 1.0 - kIdAlignTol && r2 > kIdProbeR2 && secs < kA2Seconds,
          "ID recovery (l=4, d=32, k=2): matrix err " + fmt(matrix_error) + " (< " + fmt(kIdMatrixTol) +
              "), alignment 1-" + fmt(1.0 - alignment) + " (> 1-" + fmt(kIdAlignTol) + "), trained-ID linear R2 " +
              fmt(r2) + " (> " + fmt(kIdProbeR2) + ") at step " + std::to_string(reached) + " of " +
              std::to_string(pc.steps) + ", " + fmt(secs) + " s (< " + fmt(kA2Seconds) + ")");
}

// ---------------------------------------------------------------- A3 / A4

void a3() {
  const auto t0 = Clock::now();
  const TheoryReport r = run_theory_experiment("bc-confounding", 0);
  write_report(r, report_dir() / "bc-confounding.txt", report_dir() / "bc-confounding.csv");
  const double secs = seconds_since(t0);
  verdict("A3", r.pass && secs < kA3Seconds,
          "BC confounding (k=l=2, 500 contexts, 5 seeds): action mean norm " + fmt(r.metric("action_mean_norm")) +
              " (< 0.15), BC plateau " + fmt(r.metric("bc_plateau_ratio")) + " (>= 0.9), median ID-BC gap " +
              fmt(r.metric("success_gap_median")) + " (>= 0.4), |BC - random| " +
              fmt(r.metric("bc_random_distance")) + " (<= 0.1); failed: " + failed_checks(r) + ", " + fmt(secs) +
              " s (< " + fmt(kA3Seconds) + ")");
}

void a4() {
  const auto t0 = Clock::now();
  const TheoryReport r = run_theory_experiment("fd-complexity", 0);
  write_report(r, report_dir() / "fd-complexity.txt", report_dir() / "fd-complexity.csv");
  const double secs = seconds_since(t0);
  verdict("A4", r.pass && secs < kA4Seconds,
          "FD complexity (omega 1, 4, 16): FD-e growth " + fmt(r.metric("fd_e_growth")) + " (>= 2), ID growth " +
              fmt(r.metric("id_growth")) + " (<= 1.5), FD-e/ID at omega 16 " + fmt(r.metric("fd_over_id_at_max")) +
              " (>= 2); failed: " + failed_checks(r) + ", " + fmt(secs) + " s (< " + fmt(kA4Seconds) + ")");
}

// ---------------------------------------------------------------- A5 / A6

const char* kGridEnv = R"(
[mdp]
latent_dim = 4
obs_dim = 32
action_dim = 2
[budget]
pretrain_steps = 2000
finetune_steps = 2000
probe_steps = 200
[arch]
hidden = 128, 128
head_hidden = 128, 128
[eval]
episodes = 100
[]
seeds = 0, 1, 2, 3, 4
pretrain_sizes = 1000
finetune_sizes = 2
)";

std::map<Objective, MeanSe> run_grid(const std::string& extra, const fs::path& out) {
  const ExperimentConfig cfg = ExperimentConfig::from_tree(ConfigTree::parse_string(std::string(kGridEnv) + extra));
  fs::remove_all(out);
  RunOptions opt;
  opt.out = out;
  const RunSummary s = run_experiment(cfg, opt);
  std::map<Objective, std::vector<double>> by;
  for (const auto& r : read_metrics(s.store)) {
    if (!r.ok()) std::cout << "  cell error: " << to_string(r.objective) << " seed " << r.seed << ": " << r.message << "\n";
    else by[r.objective].push_back(r.success_rate);
  }
  std::map<Objective, MeanSe> out_map;
  for (const auto& [o, v] : by) out_map[o] = mean_se(v);
  return out_map;
}

void a5() {
  const auto t0 = Clock::now();
  auto m = run_grid("objectives = ID, Scratch\n", fs::current_path() / "acceptance_runs" / "a5");
  const double id = m[Objective::id].mean, scratch = m[Objective::scratch].mean;
  verdict("A5", id - scratch >= kA5Margin,
          "aggregate ordering (goal contexts, 1000 pretrain / 2 finetune, 5 seeds): ID " + fmt(id) + " +- " +
              fmt(m[Objective::id].std_error) + ", Scratch " + fmt(scratch) + " +- " +
              fmt(m[Objective::scratch].std_error) + ", difference " + fmt(id - scratch) + " (>= " + fmt(kA5Margin) +
              "), " + fmt(seconds_since(t0)) + " s");
}

void a6() {
  const auto t0 = Clock::now();
  auto m = run_grid("objectives = ID, States\ncontext.kind = discrete\ncontext.count = 10\n"
                    "context.regime = in-distribution\n",
                    fs::current_path() / "acceptance_runs" / "a6");
  const double id = m[Objective::id].mean, states = m[Objective::states].mean;
  verdict("A6", std::abs(id - states) <= kA6Window,
          "in-distribution ablation (10 discrete contexts, 5 seeds): ID " + fmt(id) + ", States " + fmt(states) +
              ", |difference| " + fmt(std::abs(id - states)) + " (<= " + fmt(kA6Window) + "), " +
              fmt(seconds_since(t0)) + " s");
}

// ---------------------------------------------------------------- A7

bool same_dataset(const DatasetHandle& a, const DatasetHandle& b) {
  if (a.size() != b.size() || a.provenance().seed != b.provenance().seed ||
      a.provenance().mdp_hash != b.provenance().mdp_hash || a.provenance().policy_family != b.provenance().policy_family ||
      a.provenance().context_spec != b.provenance().context_spec)
    return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Trajectory& x = a.privileged().trajectory(i);
    const Trajectory& y = b.privileged().trajectory(i);
    if (x.context_tag != y.context_tag || x.observations != y.observations || x.actions != y.actions ||
        x.latents != y.latents)
      return false;
  }
  return true;
}

std::vector<std::string> body_without_wall(const fs::path& store) {
  std::vector<std::string> rows;
  for (auto r : read_metrics(store)) {
    r.wall_seconds = 0.0;
    rows.push_back(to_csv_row(r));
  }
  return rows;
}

void a7() {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 7);
  Rng rng(8);
  const ContextFamily fam = make_goal_family(false);
  const DatasetHandle pre = generate_pretraining(mdp, ExpertPolicy{}, fam, 20, rng);
  const Context c = sample_context(fam, mdp, 0, rng);
  const DatasetHandle fine = generate_finetuning(mdp, ExpertPolicy{}, fam, c, 2, rng);

  PretrainConfig pc;
  pc.objective = Objective::id;
  pc.steps = 100;
  pc.arch.hidden = {64, 64};
  pc.arch.head_hidden = {64, 64};
  const Encoder enc = pretrain(pre, pc, rng);
  const Vec before = enc.network().params();
  FinetuneConfig fc;
  fc.steps = 200;
  fc.hidden = {64, 64};
  const PolicyHead head = finetune(enc, fine, fc, rng);
  const bool frozen = enc.network().params() == before && head.encoder().network().params() == before;

  const fs::path dir = fs::current_path() / "acceptance_runs" / "a7";
  fs::remove_all(dir);
  fs::create_directories(dir);
  save_dataset(pre, dir / "pre.impd");
  const bool roundtrip = same_dataset(pre, load_dataset(dir / "pre.impd"));

  const std::string tiny = R"(
[mdp]
horizon = 20
[budget]
pretrain_steps = 30
finetune_steps = 30
probe_steps = 10
probe_trajectories = 10
alignment_samples = 40
[arch]
hidden = 16
head_hidden = 16
embedding_dim = 4
[eval]
episodes = 10
[]
objectives = ID, BC, FD-e, FD-i, Cont, Scratch, States
pretrain_sizes = 10
finetune_sizes = 1
seeds = 0, 1
)";
  const ExperimentConfig cfg = ExperimentConfig::from_tree(ConfigTree::parse_string(tiny));
  RunOptions a, b;
  a.out = dir / "run_a";
  b.out = dir / "run_b";
  const auto body_a = body_without_wall(run_experiment(cfg, a).store);
  const auto body_b = body_without_wall(run_experiment(cfg, b).store);
  const bool reproducible = !body_a.empty() && body_a == body_b;

  Rng arng(9);
  const Mat lat = gaussian_matrix(400, 3, arng);
  const Mat emb = (lat * gaussian_matrix(3, 32, arng)).array().tanh().matrix();
  const Mat map = gaussian_matrix(32, 32, arng) + 6.0 * Mat::Identity(32, 32);
  const Mat moved = (emb * map).rowwise() + gaussian_vector(32, arng).transpose();
  const double affine_gap = std::abs(linear_alignment(emb, lat).alignment - linear_alignment(moved, lat).alignment);

  verdict("A7", frozen && roundtrip && reproducible && affine_gap < kAffineTol,
          std::string("protocol invariants: frozen encoder ") + (frozen ? "bit-identical" : "CHANGED") +
              ", dataset round trip " + (roundtrip ? "bit-exact" : "DIFFERS") + ", run CSV bodies " +
              (reproducible ? "identical (" + std::to_string(body_a.size()) + " rows)" : "DIFFER") +
              ", affine alignment gap " + fmt(affine_gap) + " (< " + fmt(kAffineTol) + ")");
}

// ---------------------------------------------------------------- A8

void a8() {
  Mat same(6, 4);
  for (int i = 0; i < 6; ++i) same.row(i) << 0.5, -1.0, 2.0, 0.25;
  const double uniform = std::abs(infonce_loss(same, same).value);

  const Mat eye = Mat::Identity(2, 2);
  const double closed = -1.0 + std::log((std::exp(1.0) + 1.0) / 2.0);
  const double orth = std::abs(infonce_loss(eye, eye).value - closed);

  Rng rng(10);
  const Mat a = gaussian_matrix(16, 8, rng);
  const Mat p = a + gaussian_matrix(16, 8, rng, 0.5);
  const Mat q = Eigen::HouseholderQR<Mat>(gaussian_matrix(8, 8, rng)).householderQ();
  const double rot = std::abs(infonce_loss(a, p).value - infonce_loss(a * q, p * q).value);

  verdict("A8", uniform < kInfoNceTol && orth < kInfoNceTol && rot < kInfoNceTol,
          "InfoNCE: uniform-energy loss " + fmt(uniform) + ", n=2 orthogonal vs -1+log((e+1)/2) " + fmt(orth) +
              ", rotation invariance " + fmt(rot) + " (all < " + fmt(kInfoNceTol) + ")");
}

}  // namespace

int main() {
  const auto t0 = Clock::now();
  std::cout << "dynrep acceptance (" << std::thread::hardware_concurrency() << " hardware threads)" << std::endl;
  const std::vector<std::pair<const char*, void (*)()>> steps{{"A1", a1}, {"A2", a2}, {"A3", a3}, {"A4", a4},
                                                              {"A5", a5}, {"A6", a6}, {"A7", a7}, {"A8", a8}};
  for (const auto& [id, fn] : steps) {
    try {
      fn();
    } catch (const std::exception& e) {
      verdict(id, false, std::string("exception: ") + e.what());
    }
  }
  rusage usage{};
  getrusage(RUSAGE_SELF, &usage);
  const double peak = static_cast<double>(usage.ru_maxrss) * 1024.0;
  const double secs = seconds_since(t0);
  verdict("A9", secs < kA9Seconds && peak < kA9Bytes,
          "resources: wall " + fmt(secs) + " s (< " + fmt(kA9Seconds) + "), peak RSS " + fmt(peak / (1024.0 * 1024.0)) +
              " MiB (< 2048)");
  std::cout << failures << " of 9 criteria failed" << std::endl;
  return failures;
}
