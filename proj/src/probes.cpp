#include "dynrep/probes.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

namespace dynrep {

namespace {

Mat with_ones(const Mat& x) {
  Mat out(x.rows(), x.cols() + 1);
  out << x, Mat::Ones(x.rows(), 1);
  return out;
}

struct ResidualModel final : Trainable {
  Network mlp;
  std::vector<Network*> networks() override { return {&mlp}; }
  double loss_and_grad(const MiniBatch& b, Rng& rng, std::vector<Vec>& grads) override {
    ForwardCache c;
    const Mat pred = mlp.forward(b.obs, Mode::train, &rng, c);
    const LossValue l = mse_loss(pred, b.target);
    mlp.backward(c, l.grad, grads[0]);
    return l.value;
  }
};

}  // namespace

Probe Probe::fit(const Mat& x, const Mat& y, const ProbeConfig& cfg, Rng& rng) {
  if (x.rows() != y.rows() || x.rows() == 0) throw Error("probe: inputs and targets must have the same nonzero row count");
  Probe p;
  p.linear_ = with_ones(x).completeOrthogonalDecomposition().solve(y);
  const Mat residual = y - with_ones(x) * p.linear_;

  Rng init = make_rng(cfg.seed, 0x70726f62);
  ResidualModel model;
  model.mlp = Network::initialized(mlp_spec(static_cast<int>(x.cols()), cfg.hidden, static_cast<int>(y.cols()),
                                            cfg.activation),
                                   init);
  model.mlp.weight(model.mlp.spec().layer_count() - 1).setZero();
  if (cfg.steps > 0) {
    AdamConfig adam = cfg.adam;
    adam.total_steps = cfg.steps;
    std::uniform_int_distribution<Eigen::Index> pick(0, x.rows() - 1);
    train(
        model,
        [&](Rng& r) {
          MiniBatch b;
          b.obs.resize(cfg.batch_size, x.cols());
          b.target.resize(cfg.batch_size, y.cols());
          for (int i = 0; i < cfg.batch_size; ++i) {
            const Eigen::Index row = pick(r);
            b.obs.row(i) = x.row(row);
            b.target.row(i) = residual.row(row);
          }
          return b;
        },
        cfg.steps, adam, rng);
  }
  p.mlp_ = std::move(model.mlp);
  return p;
}

Mat Probe::predict(const Mat& x) const { return with_ones(x) * linear_ + mlp_.forward(x, Mode::eval); }

Vec r_squared(const Mat& pred, const Mat& y) {
  Vec out(y.cols());
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const double sst = (y.col(j).array() - y.col(j).mean()).square().sum();
    const double sse = (y.col(j) - pred.col(j)).squaredNorm();
    out(j) = sst > 0.0 ? 1.0 - sse / sst : (sse == 0.0 ? 1.0 : 0.0);
  }
  return out;
}

ProbeResult probe_state(const Encoder& encoder, const DatasetHandle& ds, const ProbeConfig& cfg, Rng& rng,
                        double normalizer) {
  const Mat x_train = encoder.embed(observation_rows(ds, Split::train));
  const Mat y_train = latent_rows(ds, Split::train);
  const Mat x_val = encoder.embed(observation_rows(ds, Split::val));
  const Mat y_val = latent_rows(ds, Split::val);
  const Probe probe = Probe::fit(x_train, y_train, cfg, rng);
  ProbeResult r;
  r.target = ProbeTarget::state;
  r.target_tag = "state";
  r.train_loss = mse_loss(probe.predict(x_train), y_train).value;
  r.normalizer = normalizer;
  if (x_val.rows() > 0) {
    const Mat pred = probe.predict(x_val);
    r.val_loss = mse_loss(pred, y_val).value;
    r.r_squared_per_coord = r_squared(pred, y_val);
    r.r_squared = r.r_squared_per_coord.mean();
  } else {
    r.val_loss = std::nan("");
  }
  return r;
}

ProbeResult probe_cross(const Encoder& src, const Encoder& tgt, const DatasetHandle& ds, const ProbeConfig& cfg,
                        Rng& rng) {
  const Mat o_train = observation_rows(ds, Split::train);
  const Mat o_val = observation_rows(ds, Split::val);
  const Mat x_train = src.embed(o_train);
  const Mat y_train = tgt.embed(o_train);
  const Probe probe = Probe::fit(x_train, y_train, cfg, rng);
  ProbeResult r;
  r.target = ProbeTarget::representation;
  r.target_tag = to_string(tgt.objective());
  r.train_loss = mse_loss(probe.predict(x_train), y_train).value;
  r.val_loss = o_val.rows() > 0 ? mse_loss(probe.predict(src.embed(o_val)), tgt.embed(o_val)).value : std::nan("");
  return r;
}

ProbeGrid probe_grid(const std::vector<const Encoder*>& encoders, const DatasetHandle& ds, const ProbeConfig& cfg,
                     Rng& rng) {
  ProbeGrid g;
  const auto n = static_cast<Eigen::Index>(encoders.size());
  g.val_loss.resize(n, n);
  for (const Encoder* e : encoders) g.tags.emplace_back(to_string(e->objective()));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      g.val_loss(i, j) = probe_cross(*encoders[static_cast<std::size_t>(i)], *encoders[static_cast<std::size_t>(j)],
                                     ds, cfg, rng)
                             .val_loss;
  return g;
}

void write_probe_grid_csv(const ProbeGrid& grid, const std::filesystem::path& path, bool normalized) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  const Mat m = normalized ? grid.normalized() : grid.val_loss;
  f << "source";
  for (const auto& t : grid.tags) f << ',' << t;
  f << '\n' << std::setprecision(10);
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    f << grid.tags[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m.cols(); ++j) f << ',' << m(i, j);
    f << '\n';
  }
}

AlignmentResult linear_alignment(const Mat& embeddings, const Mat& latents) {
  if (embeddings.rows() != latents.rows()) throw Error("alignment: row counts differ");
  AlignmentResult r;
  const Mat centered = embeddings.rowwise() - embeddings.colwise().mean();
  const Mat y = latents.rowwise() - latents.colwise().mean();
  const double scale = centered.cwiseAbs().maxCoeff();
  if (!(scale > 0.0)) {
    r.degenerate = true;
    r.rank = 0;
    r.alignment = 0.0;
    return r;
  }
  // Orthonormal basis of the centered embedding column span; the fitted
  // values are the projection of y onto it, independent of the basis.
  Eigen::ColPivHouseholderQR<Mat> qr(centered);
  qr.setThreshold(1e-10);
  r.rank = static_cast<int>(qr.rank());
  r.degenerate = r.rank < std::min(centered.rows(), centered.cols());
  const Mat q = Mat(qr.householderQ()).leftCols(r.rank);
  const Mat fitted = q * (q.transpose() * y);
  const double sst = y.squaredNorm();
  r.alignment = sst > 0.0 ? 1.0 - (y - fitted).squaredNorm() / sst : 0.0;
  return r;
}

AlignmentResult subspace_alignment(const Encoder& encoder, const LatentMdp& mdp, std::size_t n_samples, Rng& rng) {
  const int l = mdp.latent_dim();
  if (n_samples < static_cast<std::size_t>(10 * l)) throw Error("subspace_alignment needs at least 10 l samples");
  Mat s(static_cast<Eigen::Index>(n_samples), l);
  for (Eigen::Index i = 0; i < s.rows(); ++i) s.row(i) = uniform_ball_sample(l, mdp.spec.arena_radius, rng).transpose();
  return linear_alignment(encoder.embed(mdp.lift.decode_rows(s)), s);
}

}  // namespace dynrep
