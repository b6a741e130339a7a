#pragma once

// Contextual MDPs with context-independent latent linear dynamics
//
//   s' = A s + B a + eps,  eps ~ N(0, Sigma),   o = decode(s)
//
// observed through an invertible nonlinear lift. Contexts (goals, discrete
// task ids, rotations) only affect the expert and the initial-state
// distribution, never the transition.

#include "dynrep/common.hpp"

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dynrep {

enum class LiftKind { linear_orthonormal, mlp_bijective, graph_manifold };

const char* to_string(LiftKind kind);
LiftKind parse_lift_kind(const std::string& s);

struct MdpSpec {
  int latent_dim = 2;
  int obs_dim = 16;
  int action_dim = 2;
  LiftKind lift = LiftKind::linear_orthonormal;
  double omega = 8.0;  // graph-manifold frequency
  double noise_std = 0.0;  // Sigma = noise_std^2 I
  double arena_radius = 1.0;
  int horizon = 50;
  double spectral_radius = 0.95;
  double dynamics_perturbation = 0.2;  // A0 = I + p G / sqrt(l) before rescaling
  double control_scale = 0.5;  // geometric mean of B column norms
  double control_spread = 0.25;  // log-normal spread of B column norms
  double condition_bound = 10.0;
  int coupling_width = 16;

  void validate() const;
  std::string canonical() const;
};

/// Invertible map between latent states and observations.
class ObservationLift {
 public:
  static ObservationLift linear(Mat basis);  // basis: d x l, orthonormal columns
  static ObservationLift graph(int latent_dim, double omega);
  static ObservationLift coupling(int latent_dim, int obs_dim, int width, Rng& rng);

  LiftKind kind() const { return kind_; }
  int latent_dim() const { return latent_dim_; }
  int obs_dim() const { return obs_dim_; }
  double omega() const { return omega_; }
  const Mat& basis() const { return basis_; }

  Vec decode(const Vec& s) const;
  /// Throws if o is further than tol from the observation manifold.
  Vec encode(const Vec& o, double tol = 1e-6) const;
  /// Row-wise versions; rows are samples.
  Mat decode_rows(const Mat& s) const;
  Mat encode_rows(const Mat& o, double tol = 1e-6) const;

 private:
  Vec coupling_shift1(const Vec& u) const;
  Vec coupling_shift2(const Vec& v) const;

  LiftKind kind_ = LiftKind::linear_orthonormal;
  int latent_dim_ = 0;
  int obs_dim_ = 0;
  double omega_ = 0.0;
  Mat basis_;  // linear: Q (d x l); coupling: orthogonal mixing M (d x d)
  Mat w1_, w2_, v1_, v2_;
  Vec c1_, c2_;
};

struct LatentMdp {
  MdpSpec spec;
  Mat A;
  Mat B;
  Mat B_pinv;
  Mat noise_chol;  // lower Cholesky factor of Sigma
  ObservationLift lift;

  int latent_dim() const { return spec.latent_dim; }
  int obs_dim() const { return spec.obs_dim; }
  int action_dim() const { return spec.action_dim; }
  Mat noise_cov() const { return noise_chol * noise_chol.transpose(); }
};

/// Draws A, B and the lift deterministically from seed. Throws on invalid
/// specs or when B cannot satisfy the condition bound in 100 draws.
LatentMdp make_mdp(const MdpSpec& spec, std::uint64_t seed);

/// Builds an MDP from explicit matrices (used by the analytic constructions).
LatentMdp make_custom_mdp(const MdpSpec& spec, Mat A, Mat B, ObservationLift lift);

struct StepResult {
  Vec latent;
  Vec observation;
};

StepResult step(const LatentMdp& mdp, const Vec& s, const Vec& a, Rng& rng);
Vec step_latent(const LatentMdp& mdp, const Vec& s, const Vec& a, Rng& rng);

Vec true_encode(const LatentMdp& mdp, const Vec& o);

/// Haar-uniform sample from SO(k) (QR of a Gaussian matrix with sign fix).
Mat haar_rotation(int k, Rng& rng);

enum class ContextKind { goal, discrete, rotation };
const char* to_string(ContextKind kind);
ContextKind parse_context_kind(const std::string& s);

struct Context {
  ContextKind kind = ContextKind::goal;
  Vec goal;  // goal and discrete variants
  int id = -1;  // discrete variant
  Mat rotation;  // rotation variant
  bool inferrable = false;

  std::string tag() const;
};

/// The context distribution P_c together with rho_c.
struct ContextFamily {
  ContextKind kind = ContextKind::goal;
  bool inferrable = false;
  double goal_fraction = 0.8;  // goals lie within goal_fraction * arena_radius
  std::vector<Vec> goal_table;  // discrete variant
  std::vector<int> allowed;  // discrete ids available for sampling
  int trajectories_per_context = 1;
  double init_fraction = 0.8;  // initial states within init_fraction * arena_radius
  double init_spread = 0.1;  // inferrable: spread of s0 around the context anchor
};

ContextFamily make_goal_family(bool inferrable);
ContextFamily make_discrete_family(const LatentMdp& mdp, int n_contexts, bool inferrable,
                                   std::uint64_t seed, double goal_fraction = 0.8);
ContextFamily make_rotation_family();

/// Samples a goal reachable as a steady state whose holding action stays
/// inside half the action clip.
Vec sample_reachable_goal(const LatentMdp& mdp, double radius, double action_clip, Rng& rng);

/// Context for trajectory `index`. Continuous kinds draw from rng; discrete
/// assignment is round-robin over family.allowed.
Context sample_context(const ContextFamily& family, const LatentMdp& mdp, std::size_t index, Rng& rng);
Context discrete_context(const ContextFamily& family, int id);

/// rho_c: identical for all contexts unless the family is inferrable.
Vec sample_initial_state(const ContextFamily& family, const LatentMdp& mdp, const Context& c, Rng& rng);

enum class ExpertFamily { pd_to_goal, rotation_linear };

struct ExpertPolicy {
  ExpertFamily family = ExpertFamily::pd_to_goal;
  double kp = 0.8;
  double kd = 0.2;
  double action_clip = 1.0;
};

/// pd-to-goal: clip(kp B+(g - s) - kd B+ e_dot + B+(I - A) s) with e_dot the
/// passive drift of the goal error (A - I)(s - g); the last term holds the
/// state against passive drift. rotation-linear: R s / |s|.
Vec expert_action(const ExpertPolicy& policy, const LatentMdp& mdp, const Context& c, const Vec& s);

struct EvaluationSpec {
  double success_radius = 0.1;
  int episodes = 100;
  int max_steps = 50;
  double alignment_threshold = 0.95;  // rotation success predicate

  void validate() const;
};

EvaluationSpec default_evaluation(const MdpSpec& spec);

struct Trajectory {
  std::vector<Vec> observations;  // H+1
  std::vector<Vec> actions;  // H
  std::vector<Vec> latents;  // H+1
  std::string context_tag;

  std::size_t length() const { return actions.size(); }
};

/// Anything that maps a batch of observations (and, for experts, latents) to
/// actions. Rows are episodes.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual Mat act(const Mat& observations, const Mat& latents, std::span<Rng> rngs) const = 0;
};

class ExpertAdapter final : public Policy {
 public:
  ExpertAdapter(const LatentMdp& mdp, ExpertPolicy policy, Context c)
      : mdp_(&mdp), policy_(policy), context_(std::move(c)) {}
  Mat act(const Mat& observations, const Mat& latents, std::span<Rng> rngs) const override;

 private:
  const LatentMdp* mdp_;
  ExpertPolicy policy_;
  Context context_;
};

/// Uniform actions on the clip box.
class RandomPolicy final : public Policy {
 public:
  RandomPolicy(int action_dim, double action_clip) : action_dim_(action_dim), clip_(action_clip) {}
  Mat act(const Mat& observations, const Mat& latents, std::span<Rng> rngs) const override;

 private:
  int action_dim_;
  double clip_;
};

class ZeroPolicy final : public Policy {
 public:
  explicit ZeroPolicy(int action_dim) : action_dim_(action_dim) {}
  Mat act(const Mat& observations, const Mat&, std::span<Rng>) const override {
    return Mat::Zero(observations.rows(), action_dim_);
  }

 private:
  int action_dim_;
};

struct RolloutResult {
  Trajectory trajectory;
  bool success = false;
};

/// Runs one episode from s0 for eval.max_steps steps.
/// Rotation contexts are scored against the noiseless rotation-linear expert
/// started from the same s0.
RolloutResult rollout(const LatentMdp& mdp, const Policy& policy, const Context& c, const Vec& s0,
                      const EvaluationSpec& eval, Rng& rng);

/// Lock-step episodes; episode i draws s0 and noise from its own stream
/// seeded by episode_seeds[i], so outcomes do not depend on batching.
std::vector<bool> rollout_episodes(const LatentMdp& mdp, const Policy& policy, const ContextFamily& family,
                                   const Context& c, const EvaluationSpec& eval,
                                   std::span<const std::uint64_t> episode_seeds);

/// Success predicate at one latent state (goal variants).
bool goal_reached(const Context& c, const Vec& s, const EvaluationSpec& eval);

}  // namespace dynrep
