#pragma once

// Policy heads on frozen features and rollout evaluation.

#include "dynrep/data.hpp"
#include "dynrep/env.hpp"
#include "dynrep/net.hpp"
#include "dynrep/pretrain.hpp"

#include <vector>

namespace dynrep {

struct FinetuneConfig {
  long steps = 2000;
  int batch_size = 256;
  std::uint64_t seed = 0;
  bool joint = false;  // train the encoder too (Scratch only)
  std::vector<int> hidden{256, 256};
  Activation activation = Activation::gelu;
  double dropout = 0.1;
  AugSpec aug;  // applied to observations on the joint path
  AdamConfig adam;
  long val_every = 100;
  double action_clip = 1.0;

  void validate() const;
};

/// Scratch gets the joint path with the contrastive augmentation; every
/// other encoder stays frozen.
FinetuneConfig finetune_defaults(Objective objective);

struct LossPoint {
  long step = 0;
  double value = 0.0;
};

class PolicyHead final : public Policy {
 public:
  PolicyHead(Encoder encoder, Network net, double action_clip);

  const Encoder& encoder() const { return encoder_; }
  const Network& network() const { return net_; }
  double action_clip() const { return clip_; }

  /// Raw head output (no clipping) for observation rows.
  Mat predict(const Mat& obs) const;
  Mat act(const Mat& observations, const Mat& latents, std::span<Rng> rngs) const override;

  std::vector<double> train_log;
  std::vector<LossPoint> val_log;

 private:
  Encoder encoder_;
  Network net_;
  double clip_;
};

PolicyHead finetune(const Encoder& encoder, const DatasetHandle& ds_fine, const FinetuneConfig& cfg, Rng& rng);

struct EvalResult {
  double success_rate = 0.0;
  double std_error = 0.0;  // sqrt(p (1 - p) / episodes)
  std::vector<bool> outcomes;
};

/// eval.episodes rollouts from rho_c of c_fine; episode i uses the stream
/// stream_seed(seed, i) so results do not depend on batching.
EvalResult evaluate(const LatentMdp& mdp, const ContextFamily& family, const Context& c_fine, const Policy& policy,
                    const EvaluationSpec& eval, std::uint64_t seed);

double binomial_std_error(double p, std::size_t n);

struct ActionLosses {
  double train_mse = 0.0;
  double val_mse = 0.0;  // NaN when the finetuning set has no validation trajectories
};

ActionLosses action_losses(const PolicyHead& head);

}  // namespace dynrep
