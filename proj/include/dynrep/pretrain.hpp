#pragma once

// The representation objectives (ID, BC, FD-e, FD-i, Cont) and the two
// baselines that bypass pretraining (Scratch, States).

#include "dynrep/data.hpp"
#include "dynrep/env.hpp"
#include "dynrep/net.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace dynrep {

enum class Objective { id, bc, fd_explicit, fd_implicit, contrastive, scratch, states };

const char* to_string(Objective o);
Objective parse_objective(const std::string& s);
const std::vector<Objective>& all_objectives();

struct AugSpec {
  double noise_std = 0.0;
  double mask_fraction = 0.0;  // coordinates zeroed independently with this probability

  bool active() const { return noise_std > 0.0 || mask_fraction > 0.0; }
  void validate() const;
};

/// Default contrastive corruption.
AugSpec default_contrastive_aug();

/// Gaussian noise then random coordinate masking, row by row.
Mat augment(const Mat& x, const AugSpec& aug, Rng& rng);

struct EncoderArch {
  std::vector<int> hidden{256, 256};
  int embedding_dim = 64;
  Activation activation = Activation::tanh;
  bool normalize = true;  // layer-norm + tanh tail
  std::vector<int> head_hidden{256, 256};
  Activation head_activation = Activation::gelu;
  double head_dropout = 0.1;

  NetworkSpec encoder_spec(int obs_dim) const;
  NetworkSpec head_spec(int in, int out, bool normalize_output = false) const;
};

struct PretrainConfig {
  Objective objective = Objective::id;
  long steps = 20000;
  int batch_size = 256;  // FD-e uses half, see effective_batch()
  int step_gap = 1;
  AugSpec aug;
  std::uint64_t seed = 0;
  EncoderArch arch;
  AdamConfig adam;
  std::size_t val_rows = 4096;  // cap on validation transitions scored at the end
  /// Optional monitor called every monitor_every steps with the current
  /// encoder network; returning true ends training early.
  std::function<bool(const Network&, long)> monitor;
  long monitor_every = 0;

  int effective_batch() const { return objective == Objective::fd_explicit ? std::max(2, batch_size / 2) : batch_size; }
  void validate() const;
};

/// Frozen observation encoder. Learned encoders expose only evaluation;
/// the States oracle evaluates the ground-truth inverse of the lift.
class Encoder {
 public:
  Encoder() = default;
  static Encoder learned(Objective tag, Network net, std::vector<double> train_log = {}, double val_loss = std::nan(""));
  static Encoder states(const LatentMdp& mdp);

  Objective objective() const { return tag_; }
  int input_dim() const;
  int output_dim() const;
  bool is_oracle() const { return static_cast<bool>(mdp_); }

  /// Eval-mode embedding of observation rows.
  Mat embed(const Mat& obs) const;

  const Network& network() const;
  const std::vector<double>& train_log() const { return train_log_; }
  double final_train_loss(std::size_t window = 100) const { return tail_mean(train_log_, window); }
  double val_loss() const { return val_loss_; }
  long steps() const { return static_cast<long>(train_log_.size()); }

 private:
  Objective tag_ = Objective::scratch;
  Network net_;
  std::shared_ptr<const LatentMdp> mdp_;
  std::vector<double> train_log_;
  double val_loss_ = std::nan("");
};

Encoder pretrain(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);
Encoder pretrain_id(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);
Encoder pretrain_bc(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);
Encoder pretrain_fd_explicit(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);
Encoder pretrain_fd_implicit(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);
Encoder pretrain_contrastive(const DatasetHandle& ds, const PretrainConfig& cfg, Rng& rng);

/// Untrained encoder tagged Scratch; finetuning trains it jointly.
Encoder scratch_encoder(int obs_dim, const EncoderArch& arch, Rng& rng);
Encoder states_oracle(const LatentMdp& mdp);

/// The objective's model (encoder plus heads) exposed for gradient checks.
std::unique_ptr<Trainable> make_objective_model(Objective objective, int obs_dim, int action_dim, int step_gap,
                                                const EncoderArch& arch, const AugSpec& aug, Rng& rng);
/// Minibatch of `rows` transitions drawn uniformly with replacement.
MiniBatch sample_minibatch(const TransitionBatch& data, int rows, Rng& rng);

void save_encoder(const Encoder& enc, const std::filesystem::path& path);
Encoder load_encoder(const std::filesystem::path& path);

}  // namespace dynrep
