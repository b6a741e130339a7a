#include "dynrep/finetune.hpp"

#include <cmath>

namespace dynrep {

void FinetuneConfig::validate() const {
  if (steps < 0) throw Error("finetune steps must be >= 0");
  if (batch_size < 1) throw Error("finetune batch size must be >= 1");
  if (!(action_clip > 0.0)) throw Error("action clip must be positive");
  aug.validate();
}

FinetuneConfig finetune_defaults(Objective objective) {
  FinetuneConfig cfg;
  if (objective == Objective::scratch) {
    cfg.joint = true;
    cfg.aug = default_contrastive_aug();
  }
  return cfg;
}

PolicyHead::PolicyHead(Encoder encoder, Network net, double action_clip)
    : encoder_(std::move(encoder)), net_(std::move(net)), clip_(action_clip) {
  if (net_.spec().input_dim() != encoder_.output_dim()) throw Error("policy head input does not match encoder output");
}

Mat PolicyHead::predict(const Mat& obs) const { return net_.forward(encoder_.embed(obs), Mode::eval); }

Mat PolicyHead::act(const Mat& observations, const Mat& /*latents*/, std::span<Rng> /*rngs*/) const {
  return predict(observations).cwiseMax(-clip_).cwiseMin(clip_);
}

namespace {

struct HeadModel final : Trainable {
  Network head;
  std::vector<Network*> networks() override { return {&head}; }
  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    ForwardCache c;
    const Mat pred = head.forward(b.obs, Mode::train, &rng, c);
    const LossValue l = mse_loss(pred, b.target);
    head.backward(c, l.grad, grads[0]);
    return l.value;
  }
};

struct JointModel final : Trainable {
  Network phi;
  Network head;
  AugSpec aug;
  std::vector<Network*> networks() override { return {&phi, &head}; }
  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    ForwardCache ce, ch;
    const Mat e = phi.forward(augment(b.obs, aug, rng), Mode::train, &rng, ce);
    const Mat pred = head.forward(e, Mode::train, &rng, ch);
    const LossValue l = mse_loss(pred, b.target);
    phi.backward(ce, head.backward(ch, l.grad, grads[1]), grads[0]);
    return l.value;
  }
};

MiniBatch sample_pairs(const Mat& x, const Mat& y, int rows, Rng& rng) {
  std::uniform_int_distribution<Eigen::Index> pick(0, x.rows() - 1);
  MiniBatch b;
  b.obs.resize(rows, x.cols());
  b.target.resize(rows, y.cols());
  for (int i = 0; i < rows; ++i) {
    const Eigen::Index r = pick(rng);
    b.obs.row(i) = x.row(r);
    b.target.row(i) = y.row(r);
  }
  return b;
}

}  // namespace

PolicyHead finetune(const Encoder& encoder, const DatasetHandle& ds_fine, const FinetuneConfig& cfg, Rng& rng) {
  cfg.validate();
  if (encoder.input_dim() != ds_fine.obs_dim())
    throw Error("encoder input dimension " + std::to_string(encoder.input_dim()) +
                " does not match finetuning observations of dimension " + std::to_string(ds_fine.obs_dim()));
  if (cfg.joint && encoder.objective() != Objective::scratch)
    throw Error("joint finetuning is reserved for the Scratch baseline");

  const ActionPairs train_pairs = action_pairs(ds_fine, Split::train);
  const ActionPairs val_pairs = action_pairs(ds_fine, Split::val);
  const int E = encoder.output_dim();
  Rng init_rng = make_rng(cfg.seed, 0x68656164);
  Network head = Network::initialized(
      mlp_spec(E, cfg.hidden, ds_fine.action_dim(), cfg.activation, false, cfg.dropout), init_rng);

  AdamConfig adam = cfg.adam;
  adam.total_steps = std::max<long>(cfg.steps, 1);
  std::vector<double> train_log;
  std::vector<LossPoint> val_log;

  if (!cfg.joint) {
    HeadModel model;
    model.head = std::move(head);
    const Mat train_x = encoder.embed(train_pairs.obs);
    const Mat val_x = val_pairs.obs.rows() > 0 ? encoder.embed(val_pairs.obs) : Mat();
    auto cb = [&](long step) {
      if (val_x.rows() > 0)
        val_log.push_back({step, mse_loss(model.head.forward(val_x, Mode::eval), val_pairs.action).value});
      return false;
    };
    TrainLog log = train(
        model, [&](Rng& r) { return sample_pairs(train_x, train_pairs.action, cfg.batch_size, r); }, cfg.steps, adam,
        rng, cb, cfg.val_every);
    train_log = std::move(log.loss);
    if (val_x.rows() > 0 && (val_log.empty() || val_log.back().step != static_cast<long>(train_log.size())))
      cb(static_cast<long>(train_log.size()));
    PolicyHead out(encoder, std::move(model.head), cfg.action_clip);
    out.train_log = std::move(train_log);
    out.val_log = std::move(val_log);
    return out;
  }

  JointModel model;
  model.phi = encoder.network();
  model.head = std::move(head);
  model.aug = cfg.aug;
  auto cb = [&](long step) {
    if (val_pairs.obs.rows() > 0) {
      const Mat pred = model.head.forward(model.phi.forward(val_pairs.obs, Mode::eval), Mode::eval);
      val_log.push_back({step, mse_loss(pred, val_pairs.action).value});
    }
    return false;
  };
  TrainLog log = train(
      model, [&](Rng& r) { return sample_pairs(train_pairs.obs, train_pairs.action, cfg.batch_size, r); }, cfg.steps,
      adam, rng, cb, cfg.val_every);
  train_log = std::move(log.loss);
  if (val_pairs.obs.rows() > 0 && (val_log.empty() || val_log.back().step != static_cast<long>(train_log.size())))
    cb(static_cast<long>(train_log.size()));
  PolicyHead out(Encoder::learned(Objective::scratch, std::move(model.phi), encoder.train_log()), std::move(model.head),
                 cfg.action_clip);
  out.train_log = std::move(train_log);
  out.val_log = std::move(val_log);
  return out;
}

double binomial_std_error(double p, std::size_t n) {
  if (n == 0) return std::nan("");
  return std::sqrt(std::max(0.0, p * (1.0 - p)) / static_cast<double>(n));
}

EvalResult evaluate(const LatentMdp& mdp, const ContextFamily& family, const Context& c_fine, const Policy& policy,
                    const EvaluationSpec& eval, std::uint64_t seed) {
  eval.validate();
  std::vector<std::uint64_t> seeds(static_cast<std::size_t>(eval.episodes));
  for (std::size_t i = 0; i < seeds.size(); ++i) seeds[i] = stream_seed(seed, i, 0x6576616c);
  EvalResult r;
  r.outcomes = rollout_episodes(mdp, policy, family, c_fine, eval, seeds);
  std::size_t wins = 0;
  for (bool b : r.outcomes) wins += b ? 1 : 0;
  r.success_rate = static_cast<double>(wins) / static_cast<double>(r.outcomes.size());
  r.std_error = binomial_std_error(r.success_rate, r.outcomes.size());
  return r;
}

ActionLosses action_losses(const PolicyHead& head) {
  ActionLosses l;
  l.train_mse = head.train_log.empty() ? std::nan("") : head.train_log.back();
  l.val_mse = head.val_log.empty() ? std::nan("") : head.val_log.back().value;
  return l;
}

}  // namespace dynrep
