#include <doctest.h>

#include "dynrep/env.hpp"

#include <cmath>
#include <numbers>

using namespace dynrep;

namespace {

MdpSpec small_spec(int l, int d, int k) {
  MdpSpec s;
  s.latent_dim = l;
  s.obs_dim = d;
  s.action_dim = k;
  return s;
}

Mat rot90() {
  Mat r(2, 2);
  r << 0.0, -1.0, 1.0, 0.0;
  return r;
}

LatentMdp identity_mdp(double arena = 10.0) {
  MdpSpec s = small_spec(2, 2, 2);
  s.arena_radius = arena;
  return make_custom_mdp(s, Mat::Identity(2, 2), Mat::Identity(2, 2), ObservationLift::linear(Mat::Identity(2, 2)));
}

}  // namespace

TEST_CASE("linear lift basis is orthonormal and round-trips") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 0);
  const Mat& q = mdp.lift.basis();
  CHECK((q.transpose() * q - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-9);
  Rng rng(1);
  for (int i = 0; i < 10; ++i) {
    const Vec s = uniform_ball_sample(2, 1.0, rng);
    CHECK((true_encode(mdp, q * s) - s).norm() < 1e-9);
  }
}

TEST_CASE("graph manifold requires d = 2l and decodes (s, sin(omega s))") {
  MdpSpec bad = small_spec(4, 32, 2);
  bad.lift = LiftKind::graph_manifold;
  CHECK_THROWS_AS(make_mdp(bad, 0), Error);

  MdpSpec good = small_spec(4, 8, 2);
  good.lift = LiftKind::graph_manifold;
  good.omega = 8.0;
  const LatentMdp mdp = make_mdp(good, 7);
  const Vec e1 = Vec::Unit(4, 0);
  const Vec o = mdp.lift.decode(e1);
  for (int i = 0; i < 4; ++i) {
    CHECK(o(i) == e1(i));
    CHECK(o(4 + i) == std::sin(8.0 * e1(i)));
  }
  CHECK(true_encode(mdp, o) == e1);
}

TEST_CASE("round trip holds for every lift kind") {
  for (LiftKind kind : {LiftKind::linear_orthonormal, LiftKind::graph_manifold, LiftKind::mlp_bijective}) {
    MdpSpec s = small_spec(3, kind == LiftKind::graph_manifold ? 6 : 12, 2);
    s.lift = kind;
    const LatentMdp mdp = make_mdp(s, 3);
    Rng rng(4);
    double worst = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Vec z = uniform_ball_sample(3, s.arena_radius, rng);
      worst = std::max(worst, (true_encode(mdp, mdp.lift.decode(z)) - z).norm());
    }
    CAPTURE(to_string(kind));
    CHECK(worst < 1e-9);
  }
}

TEST_CASE("off-manifold observations are rejected") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 0);
  Vec o = mdp.lift.decode(Vec::Constant(2, 0.3));
  o(0) += 0.01;
  o(1) -= 0.02;
  o(5) += 0.03;
  CHECK_THROWS_AS(true_encode(mdp, o), Error);
}

TEST_CASE("sampled mdps satisfy the structural invariants") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const LatentMdp mdp = make_mdp(small_spec(4, 32, 2), seed);
    Eigen::EigenSolver<Mat> es(mdp.A, false);
    CHECK(es.eigenvalues().cwiseAbs().maxCoeff() == doctest::Approx(0.95).epsilon(1e-9));
    Eigen::JacobiSVD<Mat> svd(mdp.B);
    const Vec sv = svd.singularValues();
    CHECK(sv(1) > 0.0);
    CHECK(sv(0) / sv(1) <= 10.0);
  }
  MdpSpec a = small_spec(4, 32, 2);
  const LatentMdp m1 = make_mdp(a, 9);
  const LatentMdp m2 = make_mdp(a, 9);
  CHECK(m1.A == m2.A);
  CHECK(m1.B == m2.B);
  CHECK(m1.lift.basis() == m2.lift.basis());
}

TEST_CASE("degenerate condition bound exhausts redraws") {
  MdpSpec s = small_spec(3, 6, 3);
  s.condition_bound = 1.0000001;
  s.control_spread = 1.0;
  CHECK_THROWS_AS(make_mdp(s, 0), Error);
}

TEST_CASE("step examples") {
  Rng rng(0);
  const LatentMdp id = identity_mdp();
  Vec s(2), a(2);
  s << 1.0, 0.0;
  a << 0.0, 1.0;
  const Vec next = step(id, s, a, rng).latent;
  CHECK(next(0) == 1.0);
  CHECK(next(1) == 1.0);

  MdpSpec sp = small_spec(2, 2, 2);
  const LatentMdp rot = make_custom_mdp(sp, rot90(), Mat::Identity(2, 2), ObservationLift::linear(Mat::Identity(2, 2)));
  const Vec r = step(rot, s, Vec::Zero(2), rng).latent;
  CHECK(std::abs(r(0)) < 1e-15);
  CHECK(r(1) == 1.0);

  Vec nan_state = s;
  nan_state(0) = std::nan("");
  CHECK_THROWS_AS(step(id, nan_state, a, rng), Error);
}

TEST_CASE("arena projection is radial") {
  Rng rng(0);
  const LatentMdp mdp = identity_mdp(1.0);
  Vec s(2), a(2);
  s << 0.9, 0.0;
  a << 0.9, 0.0;
  const Vec n = step_latent(mdp, s, a, rng);
  CHECK(n.norm() == doctest::Approx(1.0));
  CHECK(n(1) == 0.0);
}

TEST_CASE("step noise has covariance sigma^2 I") {
  MdpSpec sp = small_spec(2, 2, 2);
  sp.noise_std = 0.05;
  sp.arena_radius = 100.0;
  const LatentMdp mdp =
      make_custom_mdp(sp, Mat::Identity(2, 2) * 0.5, Mat::Identity(2, 2), ObservationLift::linear(Mat::Identity(2, 2)));
  Rng rng(42);
  const int n = 100000;
  Mat draws(n, 2);
  for (int i = 0; i < n; ++i) draws.row(i) = step_latent(mdp, Vec::Zero(2), Vec::Zero(2), rng).transpose();
  const Mat centered = draws.rowwise() - draws.colwise().mean();
  const Mat cov = centered.transpose() * centered / (n - 1);
  const double var = 0.05 * 0.05;
  CHECK(std::abs(cov(0, 0) / var - 1.0) < 0.05);
  CHECK(std::abs(cov(1, 1) / var - 1.0) < 0.05);
  CHECK(std::abs(cov(0, 1)) / var < 0.05);
}

TEST_CASE("dynamics do not depend on the context") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 1);
  ContextFamily fam = make_goal_family(false);
  Rng crng(3);
  const Context c1 = sample_context(fam, mdp, 0, crng);
  const Context c2 = sample_context(fam, mdp, 1, crng);
  CHECK(c1.tag() != c2.tag());
  // step() never sees the context: the same stream gives the same successor.
  Rng r1(5), r2(5);
  const Vec s = Vec::Constant(2, 0.2);
  const Vec a = Vec::Constant(2, -0.1);
  CHECK(step_latent(mdp, s, a, r1) == step_latent(mdp, s, a, r2));
}

TEST_CASE("expert action examples") {
  const LatentMdp id = identity_mdp();
  ExpertPolicy pd;
  pd.kp = 1.0;
  pd.kd = 0.0;
  Context g;
  g.kind = ContextKind::goal;
  g.goal = Vec::Constant(2, 0.4);
  CHECK(expert_action(pd, id, g, g.goal).norm() == 0.0);

  ExpertPolicy rot;
  rot.family = ExpertFamily::rotation_linear;
  Context rc;
  rc.kind = ContextKind::rotation;
  rc.rotation = Mat::Identity(2, 2);
  Vec s(2);
  s << 0.0, 3.0;
  const Vec a = expert_action(rot, id, rc, s);
  CHECK(a(0) == 0.0);
  CHECK(a(1) == 1.0);

  rc.rotation = rot90();
  s << 1.0, 0.0;
  const Vec b = expert_action(rot, id, rc, s);
  CHECK(std::abs(b(0)) < 1e-15);
  CHECK(b(1) == 1.0);

  CHECK_THROWS_AS(expert_action(rot, id, rc, Vec::Zero(2)), Error);
  CHECK_THROWS_AS(expert_action(pd, id, rc, s), Error);
}

TEST_CASE("goal is a fixed point of the default expert on drifting dynamics") {
  const LatentMdp mdp = make_mdp(small_spec(4, 32, 2), 2);
  ContextFamily fam = make_goal_family(false);
  Rng rng(6);
  const ExpertPolicy expert;
  for (int i = 0; i < 20; ++i) {
    const Context c = sample_context(fam, mdp, static_cast<std::size_t>(i), rng);
    const Vec a = expert_action(expert, mdp, c, c.goal);
    CHECK((mdp.A * c.goal + mdp.B * a - c.goal).norm() < 1e-9);
    CHECK(c.goal.norm() <= mdp.spec.arena_radius);
  }
}

TEST_CASE("rotation samples are proper orthogonal matrices") {
  Rng rng(10);
  for (int k : {2, 3, 5}) {
    for (int i = 0; i < 20; ++i) {
      const Mat r = haar_rotation(k, rng);
      CHECK((r.transpose() * r - Mat::Identity(k, k)).cwiseAbs().maxCoeff() < 1e-9);
      CHECK(r.determinant() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("marginal rotation-expert action has vanishing mean") {
  MdpSpec sp = small_spec(2, 2, 2);
  const LatentMdp mdp =
      make_custom_mdp(sp, Mat::Zero(2, 2), Mat::Identity(2, 2), ObservationLift::linear(Mat::Identity(2, 2)));
  const ContextFamily fam = make_rotation_family();
  ExpertPolicy rot;
  rot.family = ExpertFamily::rotation_linear;
  Rng rng(12);
  const Vec s = Vec::Unit(2, 0);
  const int n = 2000;
  Vec mean = Vec::Zero(2);
  for (int i = 0; i < n; ++i) mean += expert_action(rot, mdp, sample_context(fam, mdp, 0, rng), s);
  mean /= n;
  CHECK(mean.norm() <= 3.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("pd expert is competent on noiseless mdps") {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const LatentMdp mdp = make_mdp(small_spec(4, 32, 2), seed);
    const ContextFamily fam = make_goal_family(false);
    const EvaluationSpec eval = default_evaluation(mdp.spec);
    Rng rng(seed + 100);
    int successes = 0;
    for (int i = 0; i < 100; ++i) {
      const Context c = sample_context(fam, mdp, static_cast<std::size_t>(i), rng);
      const ExpertAdapter expert(mdp, ExpertPolicy{}, c);
      const Vec s0 = sample_initial_state(fam, mdp, c, rng);
      successes += rollout(mdp, expert, c, s0, eval, rng).success ? 1 : 0;
    }
    CAPTURE(seed);
    CHECK(successes >= 98);
  }
}

TEST_CASE("zero policy never reaches a boundary goal from the origin") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 0);
  Context c;
  c.kind = ContextKind::goal;
  c.goal = Vec::Unit(2, 0) * mdp.spec.arena_radius;
  Rng rng(0);
  const auto r = rollout(mdp, ZeroPolicy(2), c, Vec::Zero(2), default_evaluation(mdp.spec), rng);
  CHECK_FALSE(r.success);
  CHECK(r.trajectory.actions.size() == 50);
  CHECK(r.trajectory.observations.size() == 51);
}

TEST_CASE("lock-step episodes do not depend on batching") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 4);
  const ContextFamily fam = make_goal_family(false);
  Rng rng(1);
  const Context c = sample_context(fam, mdp, 0, rng);
  const RandomPolicy pol(2, 1.0);
  EvaluationSpec eval = default_evaluation(mdp.spec);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t i = 0; i < 40; ++i) seeds.push_back(stream_seed(77, i));
  const auto all = rollout_episodes(mdp, pol, fam, c, eval, seeds);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const std::uint64_t one[] = {seeds[i]};
    CHECK(rollout_episodes(mdp, pol, fam, c, eval, one).front() == all[i]);
  }
}

TEST_CASE("initial state distribution is shared unless inferrable") {
  const LatentMdp mdp = make_mdp(small_spec(2, 16, 2), 0);
  const ContextFamily latent = make_goal_family(false);
  const ContextFamily inferrable = make_goal_family(true);
  Rng crng(2);
  const Context c1 = sample_context(latent, mdp, 0, crng);
  const Context c2 = sample_context(latent, mdp, 1, crng);
  Rng r1(9), r2(9);
  CHECK(sample_initial_state(latent, mdp, c1, r1) == sample_initial_state(latent, mdp, c2, r2));
  Rng r3(9), r4(9);
  CHECK(sample_initial_state(inferrable, mdp, c1, r3) != sample_initial_state(inferrable, mdp, c2, r4));
}
