#pragma once

// Executable checks of the latent linear model's claims: inverse dynamics
// recovers the state, BC is confounded by rotation contexts, and explicit
// forward dynamics suffers when the decoder is harder than the encoder.

#include "dynrep/env.hpp"
#include "dynrep/finetune.hpp"
#include "dynrep/pretrain.hpp"
#include "dynrep/probes.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace dynrep {

struct TheoryReport {
  std::string experiment;  // id-recovery | bc-confounding | fd-complexity
  std::vector<std::pair<std::string, double>> metrics;
  std::vector<std::pair<std::string, double>> thresholds;
  bool pass = false;
  std::vector<std::string> failures;  // names of the checks that did not hold

  double metric(const std::string& name) const;
  double threshold(const std::string& name) const;
  bool has_metric(const std::string& name) const;
  void set_metric(const std::string& name, double value);
  void set_threshold(const std::string& name, double value);
};

/// Recomputes pass/failures from metrics and thresholds only.
void judge(TheoryReport& report);

std::string to_text(const TheoryReport& report);
void write_report(const TheoryReport& report, const std::filesystem::path& text_path,
                  const std::filesystem::path& csv_path);
TheoryReport read_report(const std::filesystem::path& text_path);

// ---------------------------------------------------------------- ID recovery

struct IdRegression {
  Mat w1;  // k x d, coefficient of o
  Mat w2;  // k x d, coefficient of o'
  double w1_error = 0.0;  // relative Frobenius error against the target
  double w2_error = 0.0;
  double alignment = 0.0;  // fraction of |[W1; W2]|_F^2 inside span(Q)
};

/// Random latents in the arena, uniform actions on the clip box and one
/// unprojected linear step. Rows: o, a, o'.
struct IdSamples {
  Mat obs;
  Mat action;
  Mat next_obs;
};
IdSamples draw_id_samples(const LatentMdp& mdp, std::size_t n, double action_clip, Rng& rng);

/// Least squares a ~ W1 o + W2 o' restricted to the span of the observed
/// data. Noise-free data with k < l admits a family of exact fits; the one
/// with the smallest ||W2|| is returned. Throws when the actions are not
/// excited (rank of [o, o'] below rank(o) + k).
IdRegression solve_id_regression(const IdSamples& samples, double rank_tol = 1e-9);

/// Population least-squares targets. Noiseless: W2 = B+ Q^T, W1 = -B+ A Q^T.
/// With noise Sigma and action covariance S_a: K = S_a B^T (B S_a B^T + Sigma)^-1
/// replaces B+.
std::pair<Mat, Mat> id_population_targets(const LatentMdp& mdp, double action_clip);

struct IdRecoveryOptions {
  double action_clip = 1.0;
  std::vector<std::size_t> rate_sizes{1000, 4000, 16000};
  int rate_repetitions = 16;
};

TheoryReport verify_id_recovery(const MdpSpec& spec, std::size_t n_samples, Rng& rng,
                                const IdRecoveryOptions& options = {});
TheoryReport verify_id_recovery(const LatentMdp& mdp, std::size_t n_samples, Rng& rng,
                                const IdRecoveryOptions& options = {});

// ---------------------------------------------------------------- BC confounding

struct ConfoundingOptions {
  int obs_dim = 16;
  int seeds = 5;
  long pretrain_steps = 20000;
  int finetune_trajectories = 100;  // one-step trajectories
  EncoderArch arch;
  FinetuneConfig finetune;
  int eval_episodes = 100;
  bool verbose = false;
};

/// The rotation construction: l = k, A = 0, B = I, noiseless, horizon 1.
LatentMdp rotation_mdp(int k, int obs_dim, std::uint64_t seed);

TheoryReport verify_bc_confounding(int k, int n_contexts, int n_samples_per_context, Rng& rng,
                                   const ConfoundingOptions& options = {});

// ---------------------------------------------------------------- FD complexity

struct FdComplexityOptions {
  int latent_dim = 2;
  int action_dim = 2;
  int trajectories = 1000;
  EncoderArch arch;
  ProbeConfig probe;
  bool verbose = false;
};

TheoryReport verify_fd_complexity(const std::vector<double>& omega_list, long budget, Rng& rng,
                                  const FdComplexityOptions& options = {});

/// The three experiments at the desk-scale budgets used by `dynrep verify`
/// and the acceptance suite: id-recovery (l=4, d=32, k=2, noiseless),
/// bc-confounding (k=2, 500 contexts) and fd-complexity (omega 1, 4, 16).
TheoryReport run_theory_experiment(const std::string& name, std::uint64_t seed, bool verbose = false);

// ---------------------------------------------------------------- Haar check

struct HaarCheck {
  Vec coordinate_means;  // of R e1
  double chi_square = 0.0;
  double p_value = 0.0;
  int bins = 0;
};

/// R e1 over n Haar rotations: coordinate means and a chi-square test of
/// uniformity (angle bins for k = 2, equiprobable bins of the first
/// coordinate's exact marginal otherwise).
HaarCheck haar_uniformity(int k, int n, int bins, Rng& rng);

}  // namespace dynrep
