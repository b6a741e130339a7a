#include "dynrep/pretrain.hpp"

#include "dynrep/binio.hpp"

#include <algorithm>

namespace dynrep {

const char* to_string(Objective o) {
  switch (o) {
    case Objective::id: return "ID";
    case Objective::bc: return "BC";
    case Objective::fd_explicit: return "FD-e";
    case Objective::fd_implicit: return "FD-i";
    case Objective::contrastive: return "Cont";
    case Objective::scratch: return "Scratch";
    case Objective::states: return "States";
  }
  return "?";
}

Objective parse_objective(const std::string& s) {
  for (Objective o : all_objectives())
    if (s == to_string(o)) return o;
  throw Error("unknown objective '" + s + "' (expected ID, BC, FD-e, FD-i, Cont, Scratch or States)");
}

const std::vector<Objective>& all_objectives() {
  static const std::vector<Objective> all{Objective::id,          Objective::bc,          Objective::fd_explicit,
                                          Objective::fd_implicit, Objective::contrastive, Objective::scratch,
                                          Objective::states};
  return all;
}

void AugSpec::validate() const {
  if (!(noise_std >= 0.0)) throw Error("augmentation noise_std must be >= 0");
  if (!(mask_fraction >= 0.0 && mask_fraction < 1.0)) throw Error("augmentation mask_fraction must lie in [0, 1)");
}

AugSpec default_contrastive_aug() { return AugSpec{0.1, 0.2}; }

Mat augment(const Mat& x, const AugSpec& aug, Rng& rng) {
  if (!aug.active()) return x;
  Mat out = x;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      if (aug.noise_std > 0.0) out(i, j) += aug.noise_std * standard_normal(rng);
      if (aug.mask_fraction > 0.0 && u(rng) < aug.mask_fraction) out(i, j) = 0.0;
    }
  }
  return out;
}

NetworkSpec EncoderArch::encoder_spec(int obs_dim) const {
  return mlp_spec(obs_dim, hidden, embedding_dim, activation, normalize, 0.0);
}

NetworkSpec EncoderArch::head_spec(int in, int out, bool normalize_output) const {
  return mlp_spec(in, head_hidden, out, head_activation, normalize_output, head_dropout);
}

void PretrainConfig::validate() const {
  if (steps < 1) throw Error("pretraining steps must be >= 1");
  if (step_gap < 1) throw Error("step gap must be >= 1");
  if (batch_size < 1) throw Error("batch size must be >= 1");
  aug.validate();
  if (objective == Objective::scratch || objective == Objective::states)
    throw Error(std::string(to_string(objective)) + " is not a pretraining objective");
  if (objective == Objective::contrastive && !aug.active())
    throw Error("Cont needs a non-identity augmentation (noise_std or mask_fraction > 0)");
  if ((objective == Objective::fd_implicit || objective == Objective::contrastive) && effective_batch() < 2)
    throw Error("InfoNCE objectives need batch size >= 2");
}

// ---------------------------------------------------------------- encoder

Encoder Encoder::learned(Objective tag, Network net, std::vector<double> train_log, double val_loss) {
  if (tag == Objective::states) throw Error("States encoders are built with states_oracle");
  Encoder e;
  e.tag_ = tag;
  e.net_ = std::move(net);
  e.train_log_ = std::move(train_log);
  e.val_loss_ = val_loss;
  return e;
}

Encoder Encoder::states(const LatentMdp& mdp) {
  Encoder e;
  e.tag_ = Objective::states;
  e.mdp_ = std::make_shared<const LatentMdp>(mdp);
  return e;
}

int Encoder::input_dim() const { return mdp_ ? mdp_->obs_dim() : net_.spec().input_dim(); }
int Encoder::output_dim() const { return mdp_ ? mdp_->latent_dim() : net_.spec().output_dim(); }

const Network& Encoder::network() const {
  if (mdp_) throw Error("the States oracle has no network");
  return net_;
}

Mat Encoder::embed(const Mat& obs) const {
  if (obs.cols() != input_dim())
    throw Error("encoder expects " + std::to_string(input_dim()) + " observation columns, got " +
                std::to_string(obs.cols()));
  if (mdp_) return mdp_->lift.encode_rows(obs);
  constexpr Eigen::Index chunk = 4096;
  if (obs.rows() <= chunk) return net_.forward(obs, Mode::eval);
  Mat out(obs.rows(), output_dim());
  for (Eigen::Index r = 0; r < obs.rows(); r += chunk) {
    const Eigen::Index n = std::min(chunk, obs.rows() - r);
    out.middleRows(r, n) = net_.forward(obs.middleRows(r, n), Mode::eval);
  }
  return out;
}

Encoder scratch_encoder(int obs_dim, const EncoderArch& arch, Rng& rng) {
  return Encoder::learned(Objective::scratch, Network::initialized(arch.encoder_spec(obs_dim), rng));
}

Encoder states_oracle(const LatentMdp& mdp) { return Encoder::states(mdp); }

// ---------------------------------------------------------------- models

namespace {

class ObjectiveModel : public Trainable {
 public:
  Network phi;
  Mode mode = Mode::train;
  AugSpec aug;

  std::vector<Network*> networks() override {
    std::vector<Network*> nets{&phi};
    for (Network* h : heads()) nets.push_back(h);
    return nets;
  }

 protected:
  virtual std::vector<Network*> heads() = 0;

  Mat maybe_augment(const Mat& x, Rng& rng) const { return mode == Mode::train ? augment(x, aug, rng) : x; }
};

Mat hstack(const Mat& a, const Mat& b) {
  Mat out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

Mat vstack(const Mat& a, const Mat& b) {
  Mat out(a.rows() + b.rows(), a.cols());
  out << a, b;
  return out;
}

class InverseDynamicsModel final : public ObjectiveModel {
 public:
  Network head;

  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    const Eigen::Index n = b.obs.rows();
    const Mat both = vstack(maybe_augment(b.obs, rng), maybe_augment(b.next_obs, rng));
    ForwardCache ce, ch;
    const Mat e = phi.forward(both, mode, &rng, ce);
    const Eigen::Index m = e.cols();
    const Mat pred = head.forward(hstack(e.topRows(n), e.bottomRows(n)), mode, &rng, ch);
    const LossValue l = mse_loss(pred, b.action);
    const Mat dz = head.backward(ch, l.grad, grads[1]);
    phi.backward(ce, vstack(dz.leftCols(m), dz.rightCols(m)), grads[0]);
    return l.value;
  }

 protected:
  std::vector<Network*> heads() override { return {&head}; }
};

class BehaviorCloningModel final : public ObjectiveModel {
 public:
  Network head;

  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    ForwardCache ce, ch;
    const Mat e = phi.forward(maybe_augment(b.obs, rng), mode, &rng, ce);
    const Mat pred = head.forward(e, mode, &rng, ch);
    const LossValue l = mse_loss(pred, b.action);
    phi.backward(ce, head.backward(ch, l.grad, grads[1]), grads[0]);
    return l.value;
  }

 protected:
  std::vector<Network*> heads() override { return {&head}; }
};

class ExplicitForwardModel final : public ObjectiveModel {
 public:
  Network decoder;

  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    ForwardCache ce, cd;
    const Mat e = phi.forward(b.obs, mode, &rng, ce);
    const Mat pred = decoder.forward(hstack(e, b.action_window), mode, &rng, cd);
    const LossValue l = mse_loss(pred, b.next_obs);
    const Mat dz = decoder.backward(cd, l.grad, grads[1]);
    phi.backward(ce, dz.leftCols(e.cols()), grads[0]);
    return l.value;
  }

 protected:
  std::vector<Network*> heads() override { return {&decoder}; }
};

class ImplicitForwardModel final : public ObjectiveModel {
 public:
  Network action_encoder;
  Network f1;
  Network f2;

  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    const Eigen::Index n = b.obs.rows();
    const Mat both = vstack(maybe_augment(b.obs, rng), maybe_augment(b.next_obs, rng));
    ForwardCache ce, ca, c1, c2;
    const Mat e = phi.forward(both, mode, &rng, ce);
    const Eigen::Index m = e.cols();
    const Mat ea = action_encoder.forward(b.action_window, mode, &rng, ca);
    const Mat anchor = f1.forward(hstack(e.topRows(n), ea), mode, &rng, c1);
    const Mat positive = f2.forward(e.bottomRows(n), mode, &rng, c2);
    const InfoNceValue l = infonce_loss(anchor, positive);
    const Mat d1 = f1.backward(c1, l.grad_anchor, grads[2]);
    const Mat d2 = f2.backward(c2, l.grad_positive, grads[3]);
    action_encoder.backward(ca, d1.rightCols(ea.cols()), grads[1]);
    phi.backward(ce, vstack(d1.leftCols(m), d2), grads[0]);
    return l.value;
  }

 protected:
  std::vector<Network*> heads() override { return {&action_encoder, &f1, &f2}; }
};

class ContrastiveModel final : public ObjectiveModel {
 public:
  Network f1;
  Network f2;

  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    const Eigen::Index n = b.obs.rows();
    // Both views are always corrupted; identical views would make the loss trivial.
    const Mat both = vstack(augment(b.obs, aug, rng), augment(b.obs, aug, rng));
    ForwardCache ce, c1, c2;
    const Mat e = phi.forward(both, mode, &rng, ce);
    const Mat anchor = f1.forward(e.topRows(n), mode, &rng, c1);
    const Mat positive = f2.forward(e.bottomRows(n), mode, &rng, c2);
    const InfoNceValue l = infonce_loss(anchor, positive);
    const Mat d1 = f1.backward(c1, l.grad_anchor, grads[1]);
    const Mat d2 = f2.backward(c2, l.grad_positive, grads[2]);
    phi.backward(ce, vstack(d1, d2), grads[0]);
    return l.value;
  }

 protected:
  std::vector<Network*> heads() override { return {&f1, &f2}; }
};

std::unique_ptr<ObjectiveModel> build_model(Objective objective, int obs_dim, int action_dim, int step_gap,
                                            const EncoderArch& arch, const AugSpec& aug, Rng& rng) {
  const int E = arch.embedding_dim;
  const int window = action_dim * step_gap;
  std::unique_ptr<ObjectiveModel> model;
  switch (objective) {
    case Objective::id: {
      auto m = std::make_unique<InverseDynamicsModel>();
      m->phi = Network::initialized(arch.encoder_spec(obs_dim), rng);
      m->head = Network::initialized(arch.head_spec(2 * E, action_dim), rng);
      model = std::move(m);
      break;
    }
    case Objective::bc: {
      auto m = std::make_unique<BehaviorCloningModel>();
      m->phi = Network::initialized(arch.encoder_spec(obs_dim), rng);
      m->head = Network::initialized(arch.head_spec(E, action_dim), rng);
      model = std::move(m);
      break;
    }
    case Objective::fd_explicit: {
      auto m = std::make_unique<ExplicitForwardModel>();
      m->phi = Network::initialized(arch.encoder_spec(obs_dim), rng);
      m->decoder = Network::initialized(arch.head_spec(E + window, obs_dim), rng);
      model = std::move(m);
      break;
    }
    case Objective::fd_implicit: {
      auto m = std::make_unique<ImplicitForwardModel>();
      m->phi = Network::initialized(arch.encoder_spec(obs_dim), rng);
      m->action_encoder = Network::initialized(arch.head_spec(window, E, true), rng);
      m->f1 = Network::initialized(arch.head_spec(2 * E, E), rng);
      m->f2 = Network::initialized(arch.head_spec(E, E), rng);
      model = std::move(m);
      break;
    }
    case Objective::contrastive: {
      auto m = std::make_unique<ContrastiveModel>();
      m->phi = Network::initialized(arch.encoder_spec(obs_dim), rng);
      m->f1 = Network::initialized(arch.head_spec(E, E), rng);
      m->f2 = Network::initialized(arch.head_spec(E, E), rng);
      model = std::move(m);
      break;
    }
    case Objective::scratch:
    case Objective::states: throw Error(std::string(to_string(objective)) + " has no pretraining model");
  }
  model->aug = aug;
  return model;
}

MiniBatch head_rows(const TransitionBatch& data, std::size_t rows) {
  const auto n = static_cast<Eigen::Index>(std::min<std::size_t>(rows, static_cast<std::size_t>(data.size())));
  return MiniBatch{data.obs.topRows(n), data.action.topRows(n), data.action_window.topRows(n),
                   data.next_obs.topRows(n), {}};
}

}  // namespace

std::unique_ptr<Trainable> make_objective_model(Objective objective, int obs_dim, int action_dim, int step_gap,
                                                const EncoderArch& arch, const AugSpec& aug, Rng& rng) {
  return build_model(objective, obs_dim, action_dim, step_gap, arch, aug, rng);
}

MiniBatch sample_minibatch(const TransitionBatch& data, int rows, Rng& rng) {
  if (data.size() == 0) throw Error("cannot sample from an empty transition set");
  std::uniform_int_distribution<Eigen::Index> pick(0, data.size() - 1);
  MiniBatch b;
  b.obs.resize(rows, data.obs.cols());
  b.next_obs.resize(rows, data.next_obs.cols());
  b.action.resize(rows, data.action.cols());
  b.action_window.resize(rows, data.action_window.cols());
  for (int i = 0; i < rows; ++i) {
    const Eigen::Index r = pick(rng);
    b.obs.row(i) = data.obs.row(r);
    b.next_obs.row(i) = data.next_obs.row(r);
    b.action.row(i) = data.action.row(r);
    b.action_window.row(i) = data.action_window.row(r);
  }
  return b;
}

Encoder pretrain(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ds.size() == 0) throw Error("pretraining dataset is empty");
  // BC and Cont never look at o', so they use every single-step transition.
  const bool uses_gap = cfg.objective == Objective::id || cfg.objective == Objective::fd_explicit ||
                        cfg.objective == Objective::fd_implicit;
  const int gap = uses_gap ? cfg.step_gap : 1;
  const TransitionBatch train_data = transitions(ds, gap, Split::train);
  if (train_data.size() == 0) throw Error("pretraining dataset has no training transitions");

  Rng init_rng = make_rng(cfg.seed, 0x696e6974, static_cast<std::uint64_t>(cfg.objective));
  auto model = build_model(cfg.objective, ds.obs_dim(), ds.action_dim(), gap, cfg.arch, cfg.aug, init_rng);

  AdamConfig adam = cfg.adam;
  adam.total_steps = cfg.steps;
  const int batch = cfg.effective_batch();
  TrainCallback cb;
  if (cfg.monitor && cfg.monitor_every > 0) {
    ObjectiveModel* m = model.get();
    cb = [m, &cfg](long step) { return cfg.monitor(m->phi, step); };
  }
  TrainLog log = train(
      *model, [&](Rng& r) { return sample_minibatch(train_data, batch, r); }, cfg.steps, adam, rng, cb,
      cfg.monitor_every);

  double val = std::nan("");
  if (!ds.val_indices().empty()) {
    const TransitionBatch val_data = transitions(ds, gap, Split::val);
    if (val_data.size() >= 2) {
      model->mode = Mode::eval;
      std::vector<Vec> scratch = zero_grads(model->networks());
      Rng vr = make_rng(cfg.seed, 0x76616c);
      val = model->loss_and_grad(head_rows(val_data, cfg.val_rows), vr, scratch);
    }
  }
  return Encoder::learned(cfg.objective, std::move(model->phi), std::move(log.loss), val);
}

namespace {
Encoder pretrain_as(Objective o, const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  if (cfg.objective != o)
    throw Error(std::string("config objective is ") + to_string(cfg.objective) + ", expected " + to_string(o));
  return pretrain(ds, cfg, rng);
}
}  // namespace

Encoder pretrain_id(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  return pretrain_as(Objective::id, ds, cfg, rng);
}
Encoder pretrain_bc(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  return pretrain_as(Objective::bc, ds, cfg, rng);
}
Encoder pretrain_fd_explicit(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  return pretrain_as(Objective::fd_explicit, ds, cfg, rng);
}
Encoder pretrain_fd_implicit(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  return pretrain_as(Objective::fd_implicit, ds, cfg, rng);
}
Encoder pretrain_contrastive(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng) {
  return pretrain_as(Objective::contrastive, ds, cfg, rng);
}

void save_encoder(const Encoder& enc, const std::filesystem::path& path) {
  if (enc.is_oracle()) throw Error("the States oracle is not a learned network and cannot be saved");
  save_checkpoint(path, enc.network(), to_string(enc.objective()), enc.steps());
}

Encoder load_encoder(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  return Encoder::learned(parse_objective(ck.tag), std::move(ck.network));
}

}  // namespace dynrep
