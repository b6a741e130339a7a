#pragma once

// Representation probes: state prediction, cross-representation prediction
// and linear subspace alignment with the true latent.

#include "dynrep/data.hpp"
#include "dynrep/env.hpp"
#include "dynrep/net.hpp"
#include "dynrep/pretrain.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace dynrep {

struct ProbeConfig {
  long steps = 2000;
  int batch_size = 256;
  std::vector<int> hidden{256, 256};
  Activation activation = Activation::gelu;
  std::uint64_t seed = 0;
  AdamConfig adam;
};

enum class ProbeTarget { state, action, representation };

struct ProbeResult {
  ProbeTarget target = ProbeTarget::state;
  std::string target_tag;  // representation probes: the target encoder's tag
  double train_loss = 0.0;
  double val_loss = 0.0;
  double normalizer = std::nan("");
  double r_squared = std::nan("");  // mean over coordinates, state probes only
  Vec r_squared_per_coord;

  double normalized_val() const { return val_loss / normalizer; }
};

/// Least-squares affine map followed by an MLP trained on its residual.
/// The MLP's output layer starts at zero, so the probe starts from the best
/// linear fit and can only improve on it on the training rows.
class Probe {
 public:
  static Probe fit(const Mat& x, const Mat& y, const ProbeConfig& cfg, Rng& rng);
  Mat predict(const Mat& x) const;

 private:
  Mat linear_;  // (in + 1) x out, last row is the intercept
  Network mlp_;
};

/// R^2 per column of y against predictions, 1 - SSE / SST.
Vec r_squared(const Mat& pred, const Mat& y);

ProbeResult probe_state(const Encoder& encoder, const DatasetHandle& ds, const ProbeConfig& cfg, Rng& rng,
                        double normalizer = std::nan(""));
ProbeResult probe_cross(const Encoder& src, const Encoder& tgt, const DatasetHandle& ds, const ProbeConfig& cfg,
                        Rng& rng);

struct ProbeGrid {
  std::vector<std::string> tags;
  Mat val_loss;  // row = source, column = target
  Mat normalized() const { return val_loss / val_loss.mean(); }
};

ProbeGrid probe_grid(const std::vector<const Encoder*>& encoders, const DatasetHandle& ds, const ProbeConfig& cfg,
                     Rng& rng);
void write_probe_grid_csv(const ProbeGrid& grid, const std::filesystem::path& path, bool normalized = true);

struct AlignmentResult {
  double alignment = 0.0;
  bool degenerate = false;
  int rank = 0;
};

/// Linear-probe R^2 of the affine least-squares map from embeddings to
/// latents (pooled over coordinates).
AlignmentResult linear_alignment(const Mat& embeddings, const Mat& latents);
/// Latents drawn uniformly from the arena, observed through the lift.
AlignmentResult subspace_alignment(const Encoder& encoder, const LatentMdp& mdp, std::size_t n_samples, Rng& rng);

}  // namespace dynrep
