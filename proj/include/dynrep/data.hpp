#pragma once

// Pretraining / finetuning datasets.
//
// Learners only ever see a LearnerView (observations and actions). Latents
// and context tags are reachable solely through PrivilegedView, which flips
// the dataset's audit flag so tests can assert that no learner touched them.

#include "dynrep/common.hpp"
#include "dynrep/env.hpp"

#include <atomic>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dynrep {

enum class Split { train, val, all };

struct DatasetProvenance {
  std::uint64_t mdp_hash = 0;
  std::string policy_family;
  std::string context_spec;
  std::uint64_t seed = 0;
};

struct TransitionBatch {
  Mat obs;  // n x d
  Mat action;  // n x k, a_t
  Mat action_window;  // n x (k * gap), a_t .. a_{t+gap-1}
  Mat next_obs;  // n x d, o_{t+gap}
  int gap = 1;

  Eigen::Index size() const { return obs.rows(); }
};

class DatasetHandle;

class LearnerView {
 public:
  std::size_t size() const;
  std::size_t length(std::size_t i) const;
  const std::vector<Vec>& observations(std::size_t i) const;
  const std::vector<Vec>& actions(std::size_t i) const;

 private:
  friend class DatasetHandle;
  explicit LearnerView(const DatasetHandle& ds) : ds_(&ds) {}
  const DatasetHandle* ds_;
};

class PrivilegedView {
 public:
  std::size_t size() const;
  const Trajectory& trajectory(std::size_t i) const;
  const std::vector<Vec>& latents(std::size_t i) const;
  const std::string& context_tag(std::size_t i) const;

 private:
  friend class DatasetHandle;
  explicit PrivilegedView(const DatasetHandle& ds) : ds_(&ds) {}
  const DatasetHandle* ds_;
};

class DatasetHandle {
 public:
  /// Validates trajectory shapes and derives the split from provenance.seed.
  DatasetHandle(std::vector<Trajectory> trajectories, DatasetProvenance provenance);

  std::size_t size() const { return trajectories_->size(); }
  int latent_dim() const { return latent_dim_; }
  int obs_dim() const { return obs_dim_; }
  int action_dim() const { return action_dim_; }
  /// Shortest trajectory length (number of actions).
  int horizon() const { return horizon_; }
  const DatasetProvenance& provenance() const { return provenance_; }

  const std::vector<std::size_t>& train_indices() const { return train_; }
  const std::vector<std::size_t>& val_indices() const { return val_; }
  std::vector<std::size_t> indices(Split split) const;

  LearnerView learner() const { return LearnerView(*this); }
  PrivilegedView privileged() const;
  bool privileged_accessed() const { return audit_->load(); }
  void reset_audit() const { audit_->store(false); }

 private:
  friend class LearnerView;
  friend class PrivilegedView;

  std::shared_ptr<const std::vector<Trajectory>> trajectories_;
  DatasetProvenance provenance_;
  std::vector<std::size_t> train_;
  std::vector<std::size_t> val_;
  int latent_dim_ = 0;
  int obs_dim_ = 0;
  int action_dim_ = 0;
  int horizon_ = 0;
  std::shared_ptr<std::atomic<bool>> audit_ = std::make_shared<std::atomic<bool>>(false);
};

/// Validation trajectories: floor(n / 10) indices chosen by a keyed hash of
/// (seed, index); independent of iteration order.
std::vector<std::size_t> validation_indices(std::size_t n, std::uint64_t seed);

std::string describe(const ContextFamily& family);
std::string describe(const ExpertPolicy& expert);

/// One fresh context per trajectory (continuous kinds) or round-robin over
/// the allowed ids (discrete kind).
DatasetHandle generate_pretraining(const LatentMdp& mdp, const ExpertPolicy& expert, const ContextFamily& family,
                                   std::size_t n_traj, Rng& rng);

/// All trajectories share c_fine; initial states follow family's rho_c.
DatasetHandle generate_finetuning(const LatentMdp& mdp, const ExpertPolicy& expert, const ContextFamily& family,
                                  const Context& c_fine, std::size_t n_traj, Rng& rng);

/// Every (o_t, a_t, o_{t+gap}) with t + gap <= H from the split, in
/// trajectory then time order.
TransitionBatch transitions(const DatasetHandle& ds, int gap, Split split);

/// Stacked observations (all time steps) and, privileged, the matching latents.
Mat observation_rows(const DatasetHandle& ds, Split split);
Mat latent_rows(const DatasetHandle& ds, Split split);

/// (o_t, a_t) pairs for behaviour cloning and finetuning.
struct ActionPairs {
  Mat obs;
  Mat action;
};
ActionPairs action_pairs(const DatasetHandle& ds, Split split);

std::uint64_t mdp_hash(const LatentMdp& mdp);

void save_dataset(const DatasetHandle& ds, const std::filesystem::path& path);
DatasetHandle load_dataset(const std::filesystem::path& path);

}  // namespace dynrep
