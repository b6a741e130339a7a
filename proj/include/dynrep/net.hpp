#pragma once

// Dense MLPs with hand-written reverse-mode gradients.
//
// Parameters of one network live in a single flat vector so that the
// optimizer, finite-difference checker and checkpoint writer can treat every
// network uniformly. Batches are row-major in the sense that each row of an
// input matrix is one sample.

#include "dynrep/common.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace dynrep {

enum class Activation { tanh, gelu };
enum class Mode { train, eval };

const char* to_string(Activation a);
Activation parse_activation(const std::string& s);

struct NetworkSpec {
  std::vector<int> layer_widths;  // input width first, output width last
  Activation activation = Activation::gelu;
  bool output_normalize = false;  // layer-norm then tanh on the output
  double dropout_rate = 0.0;  // hidden layers, train mode only

  void validate() const;
  int input_dim() const { return layer_widths.front(); }
  int output_dim() const { return layer_widths.back(); }
  int layer_count() const { return static_cast<int>(layer_widths.size()) - 1; }
  std::size_t parameter_count() const;
};

/// in -> hidden... -> out with the given hidden widths.
NetworkSpec mlp_spec(int in, std::vector<int> hidden, int out, Activation act, bool normalize = false,
                     double dropout = 0.0);

struct ForwardCache {
  std::vector<Mat> inputs;  // input to each affine layer
  std::vector<Mat> preacts;  // activation derivatives at the hidden pre-activations
  std::vector<Mat> masks;  // dropout masks (scaled), empty in eval mode
  Mat normalized;  // layer-norm output before affine gain
  Vec inv_std;
  Mat output;
};

class Network {
 public:
  Network() = default;
  /// Zero-initialized (layer-norm gain = 1).
  explicit Network(NetworkSpec spec);
  /// LeCun-normal weights, zero biases.
  static Network initialized(NetworkSpec spec, Rng& rng);

  const NetworkSpec& spec() const { return spec_; }
  const Vec& params() const { return params_; }
  Vec& params() { return params_; }
  std::size_t size() const { return static_cast<std::size_t>(params_.size()); }

  Eigen::Map<const Mat> weight(int layer) const;
  Eigen::Map<Mat> weight(int layer);
  Eigen::Map<const Vec> bias(int layer) const;
  Eigen::Map<Vec> bias(int layer);

  Mat forward(const Mat& x, Mode mode = Mode::eval, Rng* rng = nullptr) const;
  Mat forward(const Mat& x, Mode mode, Rng* rng, ForwardCache& cache) const;

  /// Accumulates dL/dparams into grad (same size as params) and returns dL/dx.
  Mat backward(const ForwardCache& cache, const Mat& grad_output, Vec& grad) const;

 private:
  std::size_t weight_offset(int layer) const { return offsets_[static_cast<std::size_t>(layer)]; }
  std::size_t norm_offset() const { return offsets_.back(); }

  NetworkSpec spec_;
  Vec params_;
  std::vector<std::size_t> offsets_;  // per-layer start, then layer-norm start
};

/// Row-wise L2 normalization.
Mat l2_normalize_rows(const Mat& x);

// ---------------------------------------------------------------- losses

struct LossValue {
  double value = 0.0;
  Mat grad;  // dL/dpred
};

/// Mean over batch and coordinates of the squared difference.
LossValue mse_loss(const Mat& pred, const Mat& target);

struct InfoNceValue {
  double value = 0.0;
  Mat grad_anchor;
  Mat grad_positive;
};

/// In-batch InfoNCE with temperature 1 on L2-normalized rows:
/// mean_i [ -<a_i, p_i> + log( (1/n) sum_j exp(<a_i, p_j>) ) ].
InfoNceValue infonce_loss(const Mat& anchor, const Mat& positive);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-4;
  long total_steps = 1;  // cosine decay from learning_rate to 0
};

/// AdamW with decoupled weight decay and a cosine learning-rate schedule.
class AdamW {
 public:
  AdamW(AdamConfig config, const std::vector<Network*>& nets);

  double learning_rate_at(long step) const;
  double current_learning_rate() const { return learning_rate_at(step_); }
  long step_count() const { return step_; }

  void step(const std::vector<Network*>& nets, const std::vector<Vec>& grads);

 private:
  AdamConfig config_;
  std::vector<Vec> m_;
  std::vector<Vec> v_;
  long step_ = 0;
};

// ---------------------------------------------------------------- training

/// Columns used by the objectives; unused members stay empty.
struct MiniBatch {
  Mat obs;
  Mat action;  // a_t
  Mat action_window;  // a_{t:t+k} concatenated
  Mat next_obs;  // o_{t+k}
  Mat target;  // generic regression target
};

/// A model made of several networks with a differentiable minibatch loss.
class Trainable {
 public:
  virtual ~Trainable() = default;
  virtual std::vector<Network*> networks() = 0;
  /// Mean minibatch loss; writes gradients (one per network). Dropout masks
  /// and augmentations are drawn from rng, so a copied rng reproduces them.
  virtual double loss_and_grad(const MiniBatch& batch, Rng& rng, std::vector<Vec>& grads) = 0;
};

std::vector<Vec> zero_grads(const std::vector<Network*>& nets);

/// Throws with a diagnostic if the loss is not finite.
void check_finite_loss(double loss, const char* what, long step);

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
};

/// Central finite differences against the analytic gradient. Checks at most
/// max_coords randomly chosen coordinates per network (0 = all).
GradCheckResult gradient_check(Trainable& model, const MiniBatch& batch, std::uint64_t mask_seed,
                               double h = 1e-5, std::size_t max_coords = 0, std::uint64_t pick_seed = 1);

struct TrainLog {
  std::vector<double> loss;
};

using BatchSampler = std::function<MiniBatch(Rng&)>;
/// Called every `every` steps with the completed step count; return true to stop.
using TrainCallback = std::function<bool(long step)>;

TrainLog train(Trainable& model, const BatchSampler& sampler, long steps, AdamConfig adam, Rng& rng,
               const TrainCallback& callback = {}, long every = 0);

/// Mean of the last `window` entries.
double tail_mean(const std::vector<double>& series, std::size_t window);

// ---------------------------------------------------------------- checkpoints

struct Checkpoint {
  Network network;
  std::string tag;
  long step = 0;
};

/// IMPN file: header, spec, tag, step, parameters, CRC32.
void save_checkpoint(const std::filesystem::path& path, const Network& net, const std::string& tag, long step);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace dynrep
