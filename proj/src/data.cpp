#include "dynrep/data.hpp"

#include "dynrep/binio.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace dynrep {

namespace {
constexpr char kDataMagic[5] = "IMPD";
constexpr std::uint16_t kDataVersion = 1;
}  // namespace

// ---------------------------------------------------------------- views

std::size_t LearnerView::size() const { return ds_->size(); }
std::size_t LearnerView::length(std::size_t i) const { return (*ds_->trajectories_)[i].length(); }
const std::vector<Vec>& LearnerView::observations(std::size_t i) const {
  return (*ds_->trajectories_)[i].observations;
}
const std::vector<Vec>& LearnerView::actions(std::size_t i) const { return (*ds_->trajectories_)[i].actions; }

std::size_t PrivilegedView::size() const { return ds_->size(); }
const Trajectory& PrivilegedView::trajectory(std::size_t i) const { return (*ds_->trajectories_)[i]; }
const std::vector<Vec>& PrivilegedView::latents(std::size_t i) const { return (*ds_->trajectories_)[i].latents; }
const std::string& PrivilegedView::context_tag(std::size_t i) const {
  return (*ds_->trajectories_)[i].context_tag;
}

// ---------------------------------------------------------------- handle

std::vector<std::size_t> validation_indices(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [seed](std::size_t a, std::size_t b) {
    const auto ka = stream_seed(seed, a, 0x73706c);
    const auto kb = stream_seed(seed, b, 0x73706c);
    return ka != kb ? ka < kb : a < b;
  });
  idx.resize(n / 10);
  std::sort(idx.begin(), idx.end());
  return idx;
}

DatasetHandle::DatasetHandle(std::vector<Trajectory> trajectories, DatasetProvenance provenance)
    : provenance_(std::move(provenance)) {
  if (trajectories.empty()) throw Error("dataset must contain at least one trajectory");
  const Trajectory& first = trajectories.front();
  if (first.actions.empty()) throw Error("trajectory needs at least one action");
  latent_dim_ = static_cast<int>(first.latents.front().size());
  obs_dim_ = static_cast<int>(first.observations.front().size());
  action_dim_ = static_cast<int>(first.actions.front().size());
  horizon_ = static_cast<int>(first.length());
  for (const Trajectory& t : trajectories) {
    if (t.observations.size() != t.actions.size() + 1 || t.latents.size() != t.observations.size())
      throw Error("trajectory lengths violate |obs| = |actions| + 1 = |latents|");
    for (const Vec& o : t.observations)
      if (o.size() != obs_dim_) throw Error("inconsistent observation dimension");
    for (const Vec& a : t.actions)
      if (a.size() != action_dim_) throw Error("inconsistent action dimension");
    for (const Vec& s : t.latents)
      if (s.size() != latent_dim_) throw Error("inconsistent latent dimension");
    horizon_ = std::min(horizon_, static_cast<int>(t.length()));
  }
  trajectories_ = std::make_shared<const std::vector<Trajectory>>(std::move(trajectories));
  val_ = validation_indices(trajectories_->size(), provenance_.seed);
  std::vector<bool> is_val(trajectories_->size(), false);
  for (std::size_t i : val_) is_val[i] = true;
  for (std::size_t i = 0; i < trajectories_->size(); ++i)
    if (!is_val[i]) train_.push_back(i);
}

std::vector<std::size_t> DatasetHandle::indices(Split split) const {
  switch (split) {
    case Split::train: return train_;
    case Split::val: return val_;
    case Split::all: {
      std::vector<std::size_t> all(size());
      std::iota(all.begin(), all.end(), std::size_t{0});
      return all;
    }
  }
  return {};
}

PrivilegedView DatasetHandle::privileged() const {
  audit_->store(true);
  return PrivilegedView(*this);
}

// ---------------------------------------------------------------- generation

std::string describe(const ContextFamily& family) {
  std::ostringstream os;
  os << to_string(family.kind) << (family.inferrable ? "/inferrable" : "/latent");
  if (family.kind == ContextKind::discrete) {
    os << "/n=" << family.goal_table.size() << "/allowed=";
    for (std::size_t i = 0; i < family.allowed.size(); ++i) os << (i ? "," : "") << family.allowed[i];
  }
  if (family.trajectories_per_context > 1) os << "/per=" << family.trajectories_per_context;
  return os.str();
}

std::string describe(const ExpertPolicy& expert) {
  std::ostringstream os;
  if (expert.family == ExpertFamily::pd_to_goal)
    os << "pd-to-goal/kp=" << expert.kp << "/kd=" << expert.kd << "/clip=" << expert.action_clip;
  else
    os << "rotation-linear";
  return os.str();
}

std::uint64_t mdp_hash(const LatentMdp& mdp) {
  std::uint64_t h = fnv1a64(mdp.spec.canonical());
  auto fold = [&h](const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      const double v = m.data()[i];
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&v), sizeof v), h);
    }
  };
  fold(mdp.A);
  fold(mdp.B);
  return h;
}

namespace {

Trajectory expert_trajectory(const LatentMdp& mdp, const ExpertPolicy& expert, const ContextFamily& family,
                             const Context& c, Rng& rng) {
  Trajectory tr;
  Vec s = sample_initial_state(family, mdp, c, rng);
  const int H = mdp.spec.horizon;
  tr.latents.reserve(static_cast<std::size_t>(H + 1));
  tr.observations.reserve(static_cast<std::size_t>(H + 1));
  tr.actions.reserve(static_cast<std::size_t>(H));
  tr.latents.push_back(s);
  tr.observations.push_back(mdp.lift.decode(s));
  for (int t = 0; t < H; ++t) {
    const Vec a = expert_action(expert, mdp, c, s);
    s = step_latent(mdp, s, a, rng);
    tr.actions.push_back(a);
    tr.latents.push_back(s);
    tr.observations.push_back(mdp.lift.decode(s));
  }
  tr.context_tag = c.tag();
  return tr;
}

}  // namespace

DatasetHandle generate_pretraining(const LatentMdp& mdp, const ExpertPolicy& expert, const ContextFamily& family,
                                   std::size_t n_traj, Rng& rng) {
  if (n_traj < 1) throw Error("generate_pretraining: n_traj must be >= 1");
  if (family.kind == ContextKind::discrete && family.allowed.empty())
    throw Error("context family excludes all contexts");
  const std::uint64_t seed = fork_seed(rng);
  Rng ctx_rng = make_rng(seed, 0x637478);
  const std::size_t per = static_cast<std::size_t>(std::max(1, family.trajectories_per_context));
  std::vector<Trajectory> trajs;
  trajs.reserve(n_traj);
  Context c;
  for (std::size_t i = 0; i < n_traj; ++i) {
    if (i % per == 0 || family.kind == ContextKind::discrete) c = sample_context(family, mdp, i, ctx_rng);
    Rng tr_rng = make_rng(seed, 0x747261, i);
    trajs.push_back(expert_trajectory(mdp, expert, family, c, tr_rng));
  }
  return DatasetHandle(std::move(trajs), {mdp_hash(mdp), describe(expert), describe(family), seed});
}

DatasetHandle generate_finetuning(const LatentMdp& mdp, const ExpertPolicy& expert, const ContextFamily& family,
                                  const Context& c_fine, std::size_t n_traj, Rng& rng) {
  if (n_traj < 1) throw Error("generate_finetuning: n_traj must be >= 1");
  const std::uint64_t seed = fork_seed(rng);
  std::vector<Trajectory> trajs;
  trajs.reserve(n_traj);
  for (std::size_t i = 0; i < n_traj; ++i) {
    Rng tr_rng = make_rng(seed, 0x66696e, i);
    trajs.push_back(expert_trajectory(mdp, expert, family, c_fine, tr_rng));
  }
  return DatasetHandle(std::move(trajs), {mdp_hash(mdp), describe(expert), "fine:" + c_fine.tag(), seed});
}

// ---------------------------------------------------------------- slicing

TransitionBatch transitions(const DatasetHandle& ds, int gap, Split split) {
  if (gap < 1) throw Error("transitions: step gap must be >= 1");
  if (gap > ds.horizon()) throw Error("transitions: step gap exceeds horizon");
  const LearnerView view = ds.learner();
  const auto idx = ds.indices(split);
  std::size_t count = 0;
  for (std::size_t i : idx) count += view.length(i) + 1 - static_cast<std::size_t>(gap);
  const int d = ds.obs_dim();
  const int k = ds.action_dim();
  TransitionBatch b;
  b.gap = gap;
  b.obs.resize(static_cast<Eigen::Index>(count), d);
  b.next_obs.resize(static_cast<Eigen::Index>(count), d);
  b.action.resize(static_cast<Eigen::Index>(count), k);
  b.action_window.resize(static_cast<Eigen::Index>(count), k * gap);
  Eigen::Index row = 0;
  for (std::size_t i : idx) {
    const auto& obs = view.observations(i);
    const auto& act = view.actions(i);
    for (std::size_t t = 0; t + static_cast<std::size_t>(gap) <= view.length(i); ++t, ++row) {
      b.obs.row(row) = obs[t].transpose();
      b.next_obs.row(row) = obs[t + static_cast<std::size_t>(gap)].transpose();
      b.action.row(row) = act[t].transpose();
      for (int j = 0; j < gap; ++j) b.action_window.block(row, j * k, 1, k) = act[t + static_cast<std::size_t>(j)].transpose();
    }
  }
  return b;
}

Mat observation_rows(const DatasetHandle& ds, Split split) {
  const LearnerView view = ds.learner();
  const auto idx = ds.indices(split);
  std::size_t count = 0;
  for (std::size_t i : idx) count += view.observations(i).size();
  Mat out(static_cast<Eigen::Index>(count), ds.obs_dim());
  Eigen::Index row = 0;
  for (std::size_t i : idx)
    for (const Vec& o : view.observations(i)) out.row(row++) = o.transpose();
  return out;
}

Mat latent_rows(const DatasetHandle& ds, Split split) {
  const PrivilegedView view = ds.privileged();
  const auto idx = ds.indices(split);
  std::size_t count = 0;
  for (std::size_t i : idx) count += view.latents(i).size();
  Mat out(static_cast<Eigen::Index>(count), ds.latent_dim());
  Eigen::Index row = 0;
  for (std::size_t i : idx)
    for (const Vec& s : view.latents(i)) out.row(row++) = s.transpose();
  return out;
}

ActionPairs action_pairs(const DatasetHandle& ds, Split split) {
  const LearnerView view = ds.learner();
  const auto idx = ds.indices(split);
  std::size_t count = 0;
  for (std::size_t i : idx) count += view.length(i);
  ActionPairs p;
  p.obs.resize(static_cast<Eigen::Index>(count), ds.obs_dim());
  p.action.resize(static_cast<Eigen::Index>(count), ds.action_dim());
  Eigen::Index row = 0;
  for (std::size_t i : idx) {
    for (std::size_t t = 0; t < view.length(i); ++t, ++row) {
      p.obs.row(row) = view.observations(i)[t].transpose();
      p.action.row(row) = view.actions(i)[t].transpose();
    }
  }
  return p;
}

// ---------------------------------------------------------------- files

void save_dataset(const DatasetHandle& ds, const std::filesystem::path& path) {
  binio::Writer w(kDataMagic, kDataVersion);
  w.u32(static_cast<std::uint32_t>(ds.latent_dim()));
  w.u32(static_cast<std::uint32_t>(ds.obs_dim()));
  w.u32(static_cast<std::uint32_t>(ds.action_dim()));
  w.u64(ds.size());
  const auto& prov = ds.provenance();
  w.u64(prov.mdp_hash);
  w.str(prov.policy_family);
  w.str(prov.context_spec);
  w.u64(prov.seed);
  const PrivilegedView view = ds.privileged();
  for (std::size_t i = 0; i < view.size(); ++i) {
    const Trajectory& t = view.trajectory(i);
    w.u32(static_cast<std::uint32_t>(t.length()));
    for (const Vec& s : t.latents)
      for (Eigen::Index j = 0; j < s.size(); ++j) w.f64(s(j));
    for (const Vec& o : t.observations)
      for (Eigen::Index j = 0; j < o.size(); ++j) w.f64(o(j));
    for (const Vec& a : t.actions)
      for (Eigen::Index j = 0; j < a.size(); ++j) w.f64(a(j));
    w.str(t.context_tag);
  }
  w.finish_to_file(path);
}

DatasetHandle load_dataset(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path, kDataMagic, kDataVersion);
  const int l = static_cast<int>(r.u32());
  const int d = static_cast<int>(r.u32());
  const int k = static_cast<int>(r.u32());
  const std::uint64_t n = r.u64();
  DatasetProvenance prov;
  prov.mdp_hash = r.u64();
  prov.policy_family = r.str();
  prov.context_spec = r.str();
  prov.seed = r.u64();
  if (l < 1 || d < 1 || k < 1 || n < 1) throw binio::FileError(binio::FileErrorCode::malformed, "bad dataset header");
  std::vector<Trajectory> trajs;
  trajs.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(n, 1u << 20)));
  auto read_vecs = [&r](std::size_t count, int dim) {
    std::vector<Vec> out(count, Vec(dim));
    for (auto& v : out)
      for (int j = 0; j < dim; ++j) v(j) = r.f64();
    return out;
  };
  for (std::uint64_t i = 0; i < n; ++i) {
    Trajectory t;
    const std::size_t H = r.u32();
    t.latents = read_vecs(H + 1, l);
    t.observations = read_vecs(H + 1, d);
    t.actions = read_vecs(H, k);
    t.context_tag = r.str();
    trajs.push_back(std::move(t));
  }
  if (!r.at_end()) throw binio::FileError(binio::FileErrorCode::malformed, "trailing data in dataset");
  return DatasetHandle(std::move(trajs), std::move(prov));
}

}  // namespace dynrep
