#include <doctest.h>

#include "dynrep/pretrain.hpp"

#include <cmath>
#include <filesystem>

using namespace dynrep;

namespace {

EncoderArch small_arch(int h = 32, int e = 16) {
  EncoderArch a;
  a.hidden = {h, h};
  a.embedding_dim = e;
  a.head_hidden = {h, h};
  return a;
}

DatasetHandle goal_dataset(const LatentMdp& mdp, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return generate_pretraining(mdp, ExpertPolicy{}, make_goal_family(false), n, rng);
}

// Trajectories on the given MDP with a fixed action at every step.
DatasetHandle constant_action_dataset(const LatentMdp& mdp, const Vec& a, std::size_t n, int horizon) {
  Rng rng(17);
  std::vector<Trajectory> trajs;
  for (std::size_t i = 0; i < n; ++i) {
    Trajectory t;
    Vec s = uniform_ball_sample(mdp.latent_dim(), 0.8 * mdp.spec.arena_radius, rng);
    t.latents.push_back(s);
    t.observations.push_back(mdp.lift.decode(s));
    for (int j = 0; j < horizon; ++j) {
      const StepResult r = step(mdp, s, a, rng);
      s = r.latent;
      t.actions.push_back(a);
      t.latents.push_back(r.latent);
      t.observations.push_back(r.observation);
    }
    t.context_tag = "const";
    trajs.push_back(std::move(t));
  }
  return DatasetHandle(std::move(trajs), DatasetProvenance{mdp_hash(mdp), "constant", "none", 5});
}

PretrainConfig config(Objective o, long steps, const EncoderArch& arch) {
  PretrainConfig c;
  c.objective = o;
  c.steps = steps;
  c.arch = arch;
  c.batch_size = 64;
  if (o == Objective::contrastive) c.aug = default_contrastive_aug();
  return c;
}

}  // namespace

TEST_CASE("objective names parse back") {
  for (Objective o : all_objectives()) CHECK(parse_objective(to_string(o)) == o);
  CHECK(std::string(to_string(Objective::fd_explicit)) == "FD-e");
  CHECK_THROWS_AS(parse_objective("VAE"), Error);
}

TEST_CASE("every objective model has exact gradients") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 2);
  const DatasetHandle ds = goal_dataset(mdp, 4, 3);
  for (int gap : {1, 3}) {
    const TransitionBatch data = transitions(ds, gap, Split::all);
    for (Objective o : {Objective::id, Objective::bc, Objective::fd_explicit, Objective::fd_implicit,
                        Objective::contrastive}) {
      CAPTURE(to_string(o));
      CAPTURE(gap);
      Rng rng(11);
      const AugSpec aug = o == Objective::contrastive ? default_contrastive_aug() : AugSpec{};
      auto model = make_objective_model(o, ds.obs_dim(), ds.action_dim(), gap, small_arch(12, 8), aug, rng);
      const MiniBatch b = sample_minibatch(data, 6, rng);
      const GradCheckResult r = gradient_check(*model, b, 99, 1e-5, 400, 5);
      CHECK(r.coordinates > 0);
      CHECK(r.max_relative_error < 1e-4);
    }
  }
}

TEST_CASE("augmentation adds noise and masks coordinates") {
  Rng rng(1);
  const Mat x = Mat::Ones(200, 50);
  const Mat y = augment(x, AugSpec{0.0, 0.2}, rng);
  const double zero_fraction = (y.array() == 0.0).cast<double>().mean();
  CHECK(zero_fraction > 0.17);
  CHECK(zero_fraction < 0.23);
  const Mat z = augment(x, AugSpec{0.1, 0.0}, rng);
  CHECK(std::abs((z - x).array().square().mean() - 0.01) < 0.001);
  CHECK(augment(x, AugSpec{}, rng) == x);
  CHECK_THROWS_AS(AugSpec({-1.0, 0.0}).validate(), Error);
  CHECK_THROWS_AS(AugSpec({0.0, 1.0}).validate(), Error);
}

TEST_CASE("config validation rejects degenerate setups") {
  PretrainConfig c = config(Objective::contrastive, 10, small_arch());
  c.aug = AugSpec{};
  CHECK_THROWS_AS(c.validate(), Error);
  c = config(Objective::fd_implicit, 10, small_arch());
  c.batch_size = 1;
  CHECK_THROWS_AS(c.validate(), Error);
  c = config(Objective::scratch, 10, small_arch());
  CHECK_THROWS_AS(c.validate(), Error);
  c = config(Objective::id, 0, small_arch());
  CHECK_THROWS_AS(c.validate(), Error);
  c = config(Objective::id, 10, small_arch());
  c.step_gap = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  CHECK(config(Objective::fd_explicit, 10, small_arch()).effective_batch() == 32);
  CHECK(config(Objective::id, 10, small_arch()).effective_batch() == 64);
}

TEST_CASE("wrappers insist on their own objective") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 2);
  const DatasetHandle ds = goal_dataset(mdp, 3, 3);
  Rng rng(1);
  CHECK_THROWS_AS(pretrain_bc(ds, config(Objective::id, 2, small_arch()), rng), Error);
  CHECK(pretrain_id(ds, config(Objective::id, 2, small_arch()), rng).objective() == Objective::id);
}

TEST_CASE("ID converges with one-step and five-step gaps") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  const DatasetHandle ds = goal_dataset(mdp, 50, 5);
  for (int gap : {1, 5}) {
    PretrainConfig c = config(Objective::id, 400, small_arch());
    c.step_gap = gap;
    Rng rng(7);
    const Encoder e = pretrain(ds, c, rng);
    REQUIRE(e.steps() == 400);
    for (double v : e.train_log()) REQUIRE(std::isfinite(v));
    // Five-step moving average at the end beats the one at the start.
    const auto& log = e.train_log();
    double head = 0.0, tail = 0.0;
    for (int i = 0; i < 5; ++i) {
      head += log[static_cast<std::size_t>(i)];
      tail += log[log.size() - 1 - static_cast<std::size_t>(i)];
    }
    CHECK(tail < 0.5 * head);
    CHECK(std::isfinite(e.val_loss()));
  }
}

TEST_CASE("constant actions are fit exactly by ID and BC") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  Vec a(2);
  a << 0.3, -0.2;
  const DatasetHandle ds = constant_action_dataset(mdp, a, 10, 20);
  for (Objective o : {Objective::id, Objective::bc}) {
    CAPTURE(to_string(o));
    PretrainConfig c = config(o, 600, small_arch());
    c.arch.head_dropout = 0.0;
    Rng rng(3);
    const Encoder e = pretrain(ds, c, rng);
    CHECK(e.final_train_loss(50) < 1e-4);
  }
  const DatasetHandle zero = constant_action_dataset(mdp, Vec::Zero(2), 10, 20);
  PretrainConfig c = config(Objective::bc, 600, small_arch());
  c.arch.head_dropout = 0.0;
  Rng rng(3);
  CHECK(pretrain(zero, c, rng).final_train_loss(50) < 1e-5);
}

TEST_CASE("FD-e fits linear dynamics under the identity lift") {
  MdpSpec spec;
  spec.latent_dim = 2;
  spec.obs_dim = 2;
  spec.action_dim = 2;
  LatentMdp base = make_mdp(spec, 3);
  const LatentMdp mdp = make_custom_mdp(spec, base.A, base.B, ObservationLift::linear(Mat::Identity(2, 2)));
  const DatasetHandle ds = goal_dataset(mdp, 100, 5);
  PretrainConfig c = config(Objective::fd_explicit, 3000, small_arch(64, 16));
  c.arch.head_dropout = 0.0;
  c.batch_size = 256;
  Rng rng(3);
  const Encoder e = pretrain(ds, c, rng);
  CHECK(e.final_train_loss(200) < 1e-4);
}

TEST_CASE("FD-i beats uniform energies and Cont trains") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  const DatasetHandle ds = goal_dataset(mdp, 50, 5);
  for (Objective o : {Objective::fd_implicit, Objective::contrastive}) {
    CAPTURE(to_string(o));
    Rng rng(3);
    const Encoder e = pretrain(ds, config(o, 300, small_arch()), rng);
    // Uniform energies score exactly 0 under the 1/n-averaged negatives; log n
    // is the bound for the sum form.
    CHECK(e.final_train_loss(50) < std::log(64.0));
    CHECK(e.final_train_loss(50) < 0.0);
    CHECK(e.output_dim() == 16);
  }
}

TEST_CASE("pretraining is deterministic in seeds") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  const DatasetHandle ds = goal_dataset(mdp, 10, 5);
  Rng r1(3), r2(3);
  const Encoder a = pretrain(ds, config(Objective::fd_implicit, 20, small_arch()), r1);
  const Encoder b = pretrain(ds, config(Objective::fd_implicit, 20, small_arch()), r2);
  CHECK(a.train_log() == b.train_log());
  CHECK(a.network().params() == b.network().params());
}

TEST_CASE("scratch and states encoders") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  Rng rng(1);
  const Encoder s = scratch_encoder(mdp.obs_dim(), small_arch(), rng);
  CHECK(s.objective() == Objective::scratch);
  CHECK(s.steps() == 0);
  CHECK(s.output_dim() == 16);

  const Encoder oracle = states_oracle(mdp);
  CHECK(oracle.objective() == Objective::states);
  CHECK(oracle.output_dim() == mdp.latent_dim());
  CHECK(oracle.is_oracle());
  Mat lat(5, 2);
  for (int i = 0; i < 5; ++i) lat.row(i) = uniform_ball_sample(2, 1.0, rng).transpose();
  CHECK((oracle.embed(mdp.lift.decode_rows(lat)) - lat).cwiseAbs().maxCoeff() < 1e-12);
  CHECK_THROWS_AS(oracle.network(), Error);

  const DatasetHandle ds = goal_dataset(mdp, 10, 5);
  Rng r2(3);
  const Encoder trained = pretrain(ds, config(Objective::id, 50, small_arch()), r2);
  const Mat o = mdp.lift.decode_rows(lat);
  CHECK((trained.embed(o) - s.embed(o)).norm() > 1e-3);
}

TEST_CASE("encoders persist through checkpoints") {
  const LatentMdp mdp = make_mdp(MdpSpec{}, 4);
  const DatasetHandle ds = goal_dataset(mdp, 10, 5);
  Rng rng(3);
  const Encoder e = pretrain(ds, config(Objective::bc, 30, small_arch()), rng);
  const auto p = std::filesystem::temp_directory_path() / "dynrep_test_encoder.impn";
  save_encoder(e, p);
  const Encoder back = load_encoder(p);
  CHECK(back.objective() == Objective::bc);
  CHECK(back.network().params() == e.network().params());
  const Mat o = observation_rows(ds, Split::val);
  CHECK(back.embed(o) == e.embed(o));
  std::filesystem::remove(p);
  CHECK_THROWS_AS(save_encoder(states_oracle(mdp), p), Error);
}
