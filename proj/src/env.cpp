#include "dynrep/env.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace dynrep {

namespace {

Mat orthonormal_columns(int rows, int cols, Rng& rng) {
  const Mat g = gaussian_matrix(rows, cols, rng);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(rows, cols);
  // Sign-fix so the draw is Haar and independent of the QR convention.
  const Mat r = qr.matrixQR().topLeftCorner(cols, cols);
  for (int j = 0; j < cols; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  return q;
}

double spectral_radius_of(const Mat& a) {
  Eigen::EigenSolver<Mat> es(a, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

double condition_number(const Mat& m) {
  Eigen::JacobiSVD<Mat> svd(m);
  const Vec& sv = svd.singularValues();
  if (sv(sv.size() - 1) <= 0.0) return std::numeric_limits<double>::infinity();
  return sv(0) / sv(sv.size() - 1);
}

void require_finite(const Vec& v, const char* what) {
  if (!v.allFinite()) throw Error(std::string(what) + " contains non-finite values");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

const char* to_string(LiftKind kind) {
  switch (kind) {
    case LiftKind::linear_orthonormal: return "linear-orthonormal";
    case LiftKind::mlp_bijective: return "mlp-bijective";
    case LiftKind::graph_manifold: return "graph-manifold";
  }
  return "?";
}

LiftKind parse_lift_kind(const std::string& s) {
  if (s == "linear-orthonormal") return LiftKind::linear_orthonormal;
  if (s == "mlp-bijective") return LiftKind::mlp_bijective;
  if (s == "graph-manifold") return LiftKind::graph_manifold;
  throw Error("unknown lift kind '" + s + "'");
}

void MdpSpec::validate() const {
  if (action_dim < 1 || latent_dim < action_dim || obs_dim < latent_dim)
    throw Error("MDP dims must satisfy d >= l >= k >= 1 (got d=" + std::to_string(obs_dim) +
                ", l=" + std::to_string(latent_dim) + ", k=" + std::to_string(action_dim) + ")");
  if (lift == LiftKind::graph_manifold && obs_dim != 2 * latent_dim)
    throw Error("graph-manifold lift requires obs_dim = 2 * latent_dim = " + std::to_string(2 * latent_dim));
  if (lift == LiftKind::mlp_bijective && obs_dim <= latent_dim)
    throw Error("mlp-bijective lift requires obs_dim > latent_dim");
  if (lift == LiftKind::graph_manifold && !(omega > 0.0)) throw Error("graph-manifold omega must be positive");
  if (!(noise_std >= 0.0)) throw Error("noise_std must be non-negative");
  if (!(arena_radius > 0.0)) throw Error("arena_radius must be positive");
  if (horizon < 1) throw Error("horizon must be positive");
  if (!(spectral_radius > 0.0 && spectral_radius <= 1.0)) throw Error("spectral_radius must lie in (0, 1]");
  if (!(control_scale > 0.0)) throw Error("control_scale must be positive");
}

std::string MdpSpec::canonical() const {
  std::ostringstream os;
  os << "l=" << latent_dim << ";d=" << obs_dim << ";k=" << action_dim << ";lift=" << to_string(lift)
     << ";omega=" << fmt_double(omega) << ";noise=" << fmt_double(noise_std) << ";R=" << fmt_double(arena_radius)
     << ";H=" << horizon << ";rho=" << fmt_double(spectral_radius) << ";pert=" << fmt_double(dynamics_perturbation)
     << ";bscale=" << fmt_double(control_scale) << ";bspread=" << fmt_double(control_spread)
     << ";cond=" << fmt_double(condition_bound) << ";cw=" << coupling_width;
  return os.str();
}

// ---------------------------------------------------------------- lifts

ObservationLift ObservationLift::linear(Mat basis) {
  ObservationLift lift;
  lift.kind_ = LiftKind::linear_orthonormal;
  lift.obs_dim_ = static_cast<int>(basis.rows());
  lift.latent_dim_ = static_cast<int>(basis.cols());
  const Mat gram = basis.transpose() * basis;
  if (!gram.isApprox(Mat::Identity(lift.latent_dim_, lift.latent_dim_), 1e-9))
    throw Error("linear lift basis must have orthonormal columns");
  lift.basis_ = std::move(basis);
  return lift;
}

ObservationLift ObservationLift::graph(int latent_dim, double omega) {
  ObservationLift lift;
  lift.kind_ = LiftKind::graph_manifold;
  lift.latent_dim_ = latent_dim;
  lift.obs_dim_ = 2 * latent_dim;
  lift.omega_ = omega;
  return lift;
}

ObservationLift ObservationLift::coupling(int latent_dim, int obs_dim, int width, Rng& rng) {
  ObservationLift lift;
  lift.kind_ = LiftKind::mlp_bijective;
  lift.latent_dim_ = latent_dim;
  lift.obs_dim_ = obs_dim;
  const int extra = obs_dim - latent_dim;
  lift.w1_ = gaussian_matrix(width, latent_dim, rng, 1.5 / std::sqrt(latent_dim));
  lift.c1_ = gaussian_vector(width, rng, 0.5);
  lift.w2_ = gaussian_matrix(extra, width, rng, 1.0 / std::sqrt(width));
  lift.v1_ = gaussian_matrix(width, extra, rng, 1.5 / std::sqrt(extra));
  lift.c2_ = gaussian_vector(width, rng, 0.5);
  lift.v2_ = gaussian_matrix(latent_dim, width, rng, 0.5 / std::sqrt(width));
  lift.basis_ = orthonormal_columns(obs_dim, obs_dim, rng);
  return lift;
}

Vec ObservationLift::coupling_shift1(const Vec& u) const {
  return w2_ * (w1_ * u + c1_).array().tanh().matrix();
}

Vec ObservationLift::coupling_shift2(const Vec& v) const {
  return v2_ * (v1_ * v + c2_).array().tanh().matrix();
}

Vec ObservationLift::decode(const Vec& s) const {
  if (s.size() != latent_dim_) throw Error("decode: latent has wrong dimension");
  switch (kind_) {
    case LiftKind::linear_orthonormal: return basis_ * s;
    case LiftKind::graph_manifold: {
      Vec o(obs_dim_);
      o.head(latent_dim_) = s;
      o.tail(latent_dim_) = (omega_ * s.array()).sin().matrix();
      return o;
    }
    case LiftKind::mlp_bijective: {
      Vec z(obs_dim_);
      const Vec v = coupling_shift1(s);
      z.head(latent_dim_) = s + coupling_shift2(v);
      z.tail(obs_dim_ - latent_dim_) = v;
      return basis_ * z;
    }
  }
  return {};
}

Vec ObservationLift::encode(const Vec& o, double tol) const {
  if (o.size() != obs_dim_) throw Error("encode: observation has wrong dimension");
  Vec s;
  double off = 0.0;
  switch (kind_) {
    case LiftKind::linear_orthonormal:
      s = basis_.transpose() * o;
      off = (o - basis_ * s).norm();
      break;
    case LiftKind::graph_manifold:
      s = o.head(latent_dim_);
      off = (o.tail(latent_dim_) - (omega_ * s.array()).sin().matrix()).norm();
      break;
    case LiftKind::mlp_bijective: {
      const Vec z = basis_.transpose() * o;
      const Vec v = z.tail(obs_dim_ - latent_dim_);
      s = z.head(latent_dim_) - coupling_shift2(v);
      off = (v - coupling_shift1(s)).norm();
      break;
    }
  }
  if (!(off <= tol)) throw Error("observation is off the manifold (distance " + fmt_double(off) + ")");
  return s;
}

Mat ObservationLift::decode_rows(const Mat& s) const {
  if (kind_ == LiftKind::linear_orthonormal) return s * basis_.transpose();
  Mat out(s.rows(), obs_dim_);
  for (Eigen::Index i = 0; i < s.rows(); ++i) out.row(i) = decode(s.row(i).transpose()).transpose();
  return out;
}

Mat ObservationLift::encode_rows(const Mat& o, double tol) const {
  Mat out(o.rows(), latent_dim_);
  for (Eigen::Index i = 0; i < o.rows(); ++i) out.row(i) = encode(o.row(i).transpose(), tol).transpose();
  return out;
}

// ---------------------------------------------------------------- MDP

LatentMdp make_custom_mdp(const MdpSpec& spec, Mat A, Mat B, ObservationLift lift) {
  spec.validate();
  const int l = spec.latent_dim;
  const int k = spec.action_dim;
  if (A.rows() != l || A.cols() != l) throw Error("A must be l x l");
  if (B.rows() != l || B.cols() != k) throw Error("B must be l x k");
  if (lift.latent_dim() != l || lift.obs_dim() != spec.obs_dim) throw Error("lift dims do not match spec");
  if (spectral_radius_of(A) > 1.0 + 1e-12) throw Error("spectral radius of A exceeds 1");
  if (condition_number(B) > spec.condition_bound) throw Error("B exceeds the condition-number bound");
  LatentMdp mdp;
  mdp.spec = spec;
  mdp.A = std::move(A);
  mdp.B = std::move(B);
  mdp.B_pinv = mdp.B.completeOrthogonalDecomposition().pseudoInverse();
  mdp.noise_chol = spec.noise_std * Mat::Identity(l, l);
  mdp.lift = std::move(lift);
  return mdp;
}

LatentMdp make_mdp(const MdpSpec& spec, std::uint64_t seed) {
  spec.validate();
  const int l = spec.latent_dim;
  const int k = spec.action_dim;
  Rng rng = make_rng(seed, 0x6d6470);

  Mat a0 = Mat::Identity(l, l) + gaussian_matrix(l, l, rng, spec.dynamics_perturbation / std::sqrt(l));
  double rho = spectral_radius_of(a0);
  while (rho < 1e-9) {
    a0 += gaussian_matrix(l, l, rng, 1.0 / std::sqrt(l));
    rho = spectral_radius_of(a0);
  }
  Mat A = a0 * (spec.spectral_radius / rho);

  Mat B;
  bool accepted = false;
  for (int attempt = 0; attempt < 100 && !accepted; ++attempt) {
    const Mat q = orthonormal_columns(l, k, rng);
    Vec scales(k);
    for (int j = 0; j < k; ++j) scales(j) = spec.control_scale * std::exp(spec.control_spread * standard_normal(rng));
    B = q * scales.asDiagonal();
    accepted = condition_number(B) <= spec.condition_bound;
  }
  if (!accepted) throw Error("could not draw B within condition bound " + fmt_double(spec.condition_bound) +
                             " after 100 attempts; spec is degenerate");

  ObservationLift lift;
  switch (spec.lift) {
    case LiftKind::linear_orthonormal: lift = ObservationLift::linear(orthonormal_columns(spec.obs_dim, l, rng)); break;
    case LiftKind::graph_manifold: lift = ObservationLift::graph(l, spec.omega); break;
    case LiftKind::mlp_bijective: lift = ObservationLift::coupling(l, spec.obs_dim, spec.coupling_width, rng); break;
  }
  return make_custom_mdp(spec, std::move(A), std::move(B), std::move(lift));
}

Vec step_latent(const LatentMdp& mdp, const Vec& s, const Vec& a, Rng& rng) {
  if (s.size() != mdp.latent_dim() || a.size() != mdp.action_dim()) throw Error("step: dimension mismatch");
  require_finite(s, "step: latent state");
  require_finite(a, "step: action");
  Vec next = mdp.A * s + mdp.B * a;
  if (mdp.spec.noise_std > 0.0) next += mdp.noise_chol * gaussian_vector(mdp.latent_dim(), rng);
  const double norm = next.norm();
  if (norm > mdp.spec.arena_radius) next *= mdp.spec.arena_radius / norm;
  return next;
}

StepResult step(const LatentMdp& mdp, const Vec& s, const Vec& a, Rng& rng) {
  StepResult r;
  r.latent = step_latent(mdp, s, a, rng);
  r.observation = mdp.lift.decode(r.latent);
  return r;
}

Vec true_encode(const LatentMdp& mdp, const Vec& o) { return mdp.lift.encode(o); }

Mat haar_rotation(int k, Rng& rng) {
  if (k < 1) throw Error("rotation dimension must be positive");
  Mat q = orthonormal_columns(k, k, rng);
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

// ---------------------------------------------------------------- contexts

const char* to_string(ContextKind kind) {
  switch (kind) {
    case ContextKind::goal: return "goal";
    case ContextKind::discrete: return "discrete";
    case ContextKind::rotation: return "rotation";
  }
  return "?";
}

ContextKind parse_context_kind(const std::string& s) {
  if (s == "goal") return ContextKind::goal;
  if (s == "discrete") return ContextKind::discrete;
  if (s == "rotation") return ContextKind::rotation;
  throw Error("unknown context kind '" + s + "'");
}

std::string Context::tag() const {
  std::ostringstream os;
  switch (kind) {
    case ContextKind::goal:
      os << "goal";
      for (Eigen::Index i = 0; i < goal.size(); ++i) os << ':' << fmt_double(goal(i));
      break;
    case ContextKind::discrete: os << "task:" << id; break;
    case ContextKind::rotation:
      os << "rot";
      for (Eigen::Index i = 0; i < rotation.size(); ++i) os << ':' << fmt_double(rotation.data()[i]);
      break;
  }
  return os.str();
}

ContextFamily make_goal_family(bool inferrable) {
  ContextFamily f;
  f.kind = ContextKind::goal;
  f.inferrable = inferrable;
  return f;
}

Vec sample_reachable_goal(const LatentMdp& mdp, double radius, double action_clip, Rng& rng) {
  const int l = mdp.latent_dim();
  const int k = mdp.action_dim();
  const Mat I = Mat::Identity(l, l);
  // Steady states with constant action lie in the span of (I - A)^{-1} B.
  const Mat reach = (I - mdp.A).fullPivLu().solve(mdp.B);
  const Mat basis = reach.householderQr().householderQ() * Mat::Identity(l, k);
  for (int attempt = 0; attempt < 10000; ++attempt) {
    const Vec g = basis * uniform_ball_sample(k, radius, rng);
    const Vec hold = mdp.B_pinv * ((I - mdp.A) * g);
    if (hold.cwiseAbs().maxCoeff() <= 0.5 * action_clip) return g;
  }
  throw Error("no reachable goal with a holding action inside the clip box");
}

ContextFamily make_discrete_family(const LatentMdp& mdp, int n_contexts, bool inferrable, std::uint64_t seed,
                                   double goal_fraction) {
  if (n_contexts < 1) throw Error("discrete family needs at least one context");
  ContextFamily f;
  f.kind = ContextKind::discrete;
  f.inferrable = inferrable;
  f.goal_fraction = goal_fraction;
  Rng rng = make_rng(seed, 0x676f616c);
  const ExpertPolicy expert;
  for (int i = 0; i < n_contexts; ++i) {
    f.goal_table.push_back(
        sample_reachable_goal(mdp, goal_fraction * mdp.spec.arena_radius, expert.action_clip, rng));
    f.allowed.push_back(i);
  }
  return f;
}

ContextFamily make_rotation_family() {
  ContextFamily f;
  f.kind = ContextKind::rotation;
  return f;
}

Context discrete_context(const ContextFamily& family, int id) {
  if (family.kind != ContextKind::discrete) throw Error("not a discrete context family");
  if (id < 0 || id >= static_cast<int>(family.goal_table.size())) throw Error("discrete context id out of range");
  Context c;
  c.kind = ContextKind::discrete;
  c.id = id;
  c.goal = family.goal_table[static_cast<std::size_t>(id)];
  c.inferrable = family.inferrable;
  return c;
}

Context sample_context(const ContextFamily& family, const LatentMdp& mdp, std::size_t index, Rng& rng) {
  Context c;
  c.kind = family.kind;
  c.inferrable = family.inferrable;
  switch (family.kind) {
    case ContextKind::goal: {
      const ExpertPolicy expert;
      c.goal = sample_reachable_goal(mdp, family.goal_fraction * mdp.spec.arena_radius, expert.action_clip, rng);
      break;
    }
    case ContextKind::discrete: {
      if (family.allowed.empty()) throw Error("context family excludes all contexts");
      const std::size_t per = static_cast<std::size_t>(std::max(1, family.trajectories_per_context));
      return discrete_context(family, family.allowed[(index / per) % family.allowed.size()]);
    }
    case ContextKind::rotation:
      if (mdp.latent_dim() != mdp.action_dim()) throw Error("rotation contexts require latent_dim = action_dim");
      c.rotation = haar_rotation(mdp.action_dim(), rng);
      break;
  }
  return c;
}

Vec sample_initial_state(const ContextFamily& family, const LatentMdp& mdp, const Context& c, Rng& rng) {
  const int l = mdp.latent_dim();
  if (c.kind == ContextKind::rotation) return unit_sphere_sample(l, rng);
  const double R = mdp.spec.arena_radius;
  if (!family.inferrable) return uniform_ball_sample(l, family.init_fraction * R, rng);
  Vec s0 = -0.5 * c.goal + gaussian_vector(l, rng, family.init_spread * R);
  const double n = s0.norm();
  if (n > R) s0 *= R / n;
  return s0;
}

// ---------------------------------------------------------------- experts

Vec expert_action(const ExpertPolicy& policy, const LatentMdp& mdp, const Context& c, const Vec& s) {
  if (s.size() != mdp.latent_dim()) throw Error("expert_action: latent has wrong dimension");
  require_finite(s, "expert_action: latent state");
  switch (policy.family) {
    case ExpertFamily::pd_to_goal: {
      if (c.kind == ContextKind::rotation) throw Error("pd-to-goal expert needs a goal context");
      const Mat I = Mat::Identity(mdp.latent_dim(), mdp.latent_dim());
      const Vec err = s - c.goal;
      const Vec err_drift = (mdp.A - I) * err;
      const Vec desired = policy.kp * (c.goal - s) - policy.kd * err_drift + (I - mdp.A) * s;
      return (mdp.B_pinv * desired).cwiseMax(-policy.action_clip).cwiseMin(policy.action_clip);
    }
    case ExpertFamily::rotation_linear: {
      if (c.kind != ContextKind::rotation) throw Error("rotation-linear expert needs a rotation context");
      const double n = s.norm();
      if (!(n > 1e-12)) throw Error("rotation-linear expert undefined at the origin");
      return c.rotation * (s / n);
    }
  }
  return {};
}

Mat ExpertAdapter::act(const Mat& /*observations*/, const Mat& latents, std::span<Rng> /*rngs*/) const {
  Mat out(latents.rows(), mdp_->action_dim());
  for (Eigen::Index i = 0; i < latents.rows(); ++i)
    out.row(i) = expert_action(policy_, *mdp_, context_, latents.row(i).transpose()).transpose();
  return out;
}

Mat RandomPolicy::act(const Mat& observations, const Mat& /*latents*/, std::span<Rng> rngs) const {
  Mat out(observations.rows(), action_dim_);
  for (Eigen::Index i = 0; i < observations.rows(); ++i) {
    std::uniform_real_distribution<double> u(-clip_, clip_);
    for (int j = 0; j < action_dim_; ++j) out(i, j) = u(rngs[static_cast<std::size_t>(i)]);
  }
  return out;
}

// ---------------------------------------------------------------- rollouts

void EvaluationSpec::validate() const {
  if (!(success_radius > 0.0)) throw Error("success_radius must be positive");
  if (episodes < 1) throw Error("episodes must be >= 1");
  if (max_steps < 1) throw Error("max_steps must be >= 1");
}

EvaluationSpec default_evaluation(const MdpSpec& spec) {
  EvaluationSpec e;
  e.success_radius = 0.1 * spec.arena_radius;
  e.max_steps = spec.horizon;
  return e;
}

bool goal_reached(const Context& c, const Vec& s, const EvaluationSpec& eval) {
  return (s - c.goal).norm() <= eval.success_radius;
}

namespace {

struct LockstepOutcome {
  std::vector<bool> success;
  std::vector<Trajectory> trajectories;
};

LockstepOutcome run_lockstep(const LatentMdp& mdp, const Policy& policy, const Context& c,
                             const EvaluationSpec& eval, std::vector<Vec> states, std::vector<Rng>& rngs,
                             bool record) {
  eval.validate();
  const std::size_t n = states.size();
  const int l = mdp.latent_dim();
  LockstepOutcome out;
  out.success.assign(n, false);
  if (record) out.trajectories.resize(n);

  std::vector<Vec> targets;
  if (c.kind == ContextKind::rotation) {
    const ExpertPolicy reference{ExpertFamily::rotation_linear};
    for (const Vec& s0 : states) {
      Vec s = s0;
      for (int t = 0; t < eval.max_steps; ++t) {
        s = mdp.A * s + mdp.B * expert_action(reference, mdp, c, s);
        const double nrm = s.norm();
        if (nrm > mdp.spec.arena_radius) s *= mdp.spec.arena_radius / nrm;
      }
      targets.push_back(s.normalized());
    }
  }

  Mat lat(static_cast<Eigen::Index>(n), l);
  Mat obs(static_cast<Eigen::Index>(n), mdp.obs_dim());
  for (int t = 0; t <= eval.max_steps; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      lat.row(row) = states[i].transpose();
      obs.row(row) = mdp.lift.decode(states[i]).transpose();
      if (record) {
        out.trajectories[i].latents.push_back(states[i]);
        out.trajectories[i].observations.push_back(obs.row(row).transpose());
      }
      if (t > 0 && c.kind != ContextKind::rotation && goal_reached(c, states[i], eval)) out.success[i] = true;
    }
    if (t == eval.max_steps) break;
    const Mat actions = policy.act(obs, lat, std::span<Rng>(rngs));
    if (actions.rows() != lat.rows() || actions.cols() != mdp.action_dim())
      throw Error("policy returned actions of the wrong shape");
    for (std::size_t i = 0; i < n; ++i) {
      const Vec a = actions.row(static_cast<Eigen::Index>(i)).transpose();
      if (record) out.trajectories[i].actions.push_back(a);
      states[i] = step_latent(mdp, states[i], a, rngs[i]);
    }
  }
  if (c.kind == ContextKind::rotation) {
    for (std::size_t i = 0; i < n; ++i) {
      const double nrm = states[i].norm();
      out.success[i] = nrm > 1e-12 && states[i].dot(targets[i]) / nrm >= eval.alignment_threshold;
    }
  }
  if (record)
    for (auto& tr : out.trajectories) tr.context_tag = c.tag();
  return out;
}

}  // namespace

RolloutResult rollout(const LatentMdp& mdp, const Policy& policy, const Context& c, const Vec& s0,
                      const EvaluationSpec& eval, Rng& rng) {
  std::vector<Rng> rngs{Rng(fork_seed(rng))};
  auto out = run_lockstep(mdp, policy, c, eval, {s0}, rngs, true);
  return {std::move(out.trajectories.front()), out.success.front()};
}

std::vector<bool> rollout_episodes(const LatentMdp& mdp, const Policy& policy, const ContextFamily& family,
                                   const Context& c, const EvaluationSpec& eval,
                                   std::span<const std::uint64_t> episode_seeds) {
  std::vector<Rng> rngs;
  std::vector<Vec> s0;
  rngs.reserve(episode_seeds.size());
  for (std::uint64_t seed : episode_seeds) {
    rngs.emplace_back(seed);
    s0.push_back(sample_initial_state(family, mdp, c, rngs.back()));
  }
  return run_lockstep(mdp, policy, c, eval, std::move(s0), rngs, false).success;
}

}  // namespace dynrep
