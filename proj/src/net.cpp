#include "dynrep/net.hpp"

#include "dynrep/binio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace dynrep {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;
constexpr double kNormEps = 1e-6;

// tanh through the vectorized exp; saturates cleanly at +-1.
Eigen::ArrayXXd fast_tanh(const Eigen::ArrayXXd& x) {
  return 1.0 - 2.0 / ((2.0 * x.min(350.0)).exp() + 1.0);
}

// Applies the activation in place; stores its derivative when deriv != nullptr.
void activate(Activation act, Mat& z, Mat* deriv) {
  if (act == Activation::tanh) {
    const Eigen::ArrayXXd t = fast_tanh(z.array());
    if (deriv) *deriv = (1.0 - t.square()).matrix();
    z = t.matrix();
    return;
  }
  const Eigen::ArrayXXd x = z.array();
  const Eigen::ArrayXXd x2 = x.square();
  const Eigen::ArrayXXd t = fast_tanh(kGeluC * x * (1.0 + kGeluA * x2));
  if (deriv) *deriv = (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t.square()) * kGeluC * (1.0 + 3.0 * kGeluA * x2)).matrix();
  z = (0.5 * x * (1.0 + t)).matrix();
}

}  // namespace

const char* to_string(Activation a) { return a == Activation::tanh ? "tanh" : "gelu"; }

Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "gelu") return Activation::gelu;
  throw Error("unknown activation '" + s + "'");
}

void NetworkSpec::validate() const {
  if (layer_widths.size() < 2) throw Error("network needs at least one layer");
  for (int w : layer_widths)
    if (w <= 0) throw Error("layer widths must be positive");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw Error("dropout rate must lie in [0, 1)");
}

std::size_t NetworkSpec::parameter_count() const {
  std::size_t n = 0;
  for (int i = 0; i < layer_count(); ++i)
    n += static_cast<std::size_t>(layer_widths[i] + 1) * static_cast<std::size_t>(layer_widths[i + 1]);
  if (output_normalize) n += 2 * static_cast<std::size_t>(output_dim());
  return n;
}

NetworkSpec mlp_spec(int in, std::vector<int> hidden, int out, Activation act, bool normalize, double dropout) {
  NetworkSpec s;
  s.layer_widths.push_back(in);
  s.layer_widths.insert(s.layer_widths.end(), hidden.begin(), hidden.end());
  s.layer_widths.push_back(out);
  s.activation = act;
  s.output_normalize = normalize;
  s.dropout_rate = dropout;
  s.validate();
  return s;
}

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  params_ = Vec::Zero(static_cast<Eigen::Index>(spec_.parameter_count()));
  std::size_t off = 0;
  for (int i = 0; i < spec_.layer_count(); ++i) {
    offsets_.push_back(off);
    off += static_cast<std::size_t>(spec_.layer_widths[i] + 1) * static_cast<std::size_t>(spec_.layer_widths[i + 1]);
  }
  offsets_.push_back(off);
  if (spec_.output_normalize) params_.segment(static_cast<Eigen::Index>(off), spec_.output_dim()).setOnes();
}

Network Network::initialized(NetworkSpec spec, Rng& rng) {
  Network net(std::move(spec));
  for (int i = 0; i < net.spec_.layer_count(); ++i) {
    auto w = net.weight(i);
    const double scale = 1.0 / std::sqrt(static_cast<double>(w.rows()));
    for (Eigen::Index c = 0; c < w.cols(); ++c)
      for (Eigen::Index r = 0; r < w.rows(); ++r) w(r, c) = scale * standard_normal(rng);
  }
  return net;
}

Eigen::Map<const Mat> Network::weight(int layer) const {
  const auto i = static_cast<std::size_t>(layer);
  return {params_.data() + offsets_[i], spec_.layer_widths[i], spec_.layer_widths[i + 1]};
}
Eigen::Map<Mat> Network::weight(int layer) {
  const auto i = static_cast<std::size_t>(layer);
  return {params_.data() + offsets_[i], spec_.layer_widths[i], spec_.layer_widths[i + 1]};
}
Eigen::Map<const Vec> Network::bias(int layer) const {
  const auto i = static_cast<std::size_t>(layer);
  return {params_.data() + offsets_[i] + static_cast<std::size_t>(spec_.layer_widths[i]) * spec_.layer_widths[i + 1],
          spec_.layer_widths[i + 1]};
}
Eigen::Map<Vec> Network::bias(int layer) {
  const auto i = static_cast<std::size_t>(layer);
  return {params_.data() + offsets_[i] + static_cast<std::size_t>(spec_.layer_widths[i]) * spec_.layer_widths[i + 1],
          spec_.layer_widths[i + 1]};
}

Mat Network::forward(const Mat& x, Mode mode, Rng* rng) const {
  ForwardCache cache;
  return forward(x, mode, rng, cache);
}

Mat Network::forward(const Mat& x, Mode mode, Rng* rng, ForwardCache& cache) const {
  if (x.cols() != spec_.input_dim())
    throw Error("forward: input has " + std::to_string(x.cols()) + " columns, network expects " +
                std::to_string(spec_.input_dim()));
  const bool drop = mode == Mode::train && spec_.dropout_rate > 0.0;
  if (drop && rng == nullptr) throw Error("forward: dropout in train mode needs an rng");
  const int L = spec_.layer_count();
  cache.inputs.assign(static_cast<std::size_t>(L), Mat());
  cache.preacts.assign(static_cast<std::size_t>(L - 1), Mat());
  cache.masks.assign(drop ? static_cast<std::size_t>(L - 1) : 0, Mat());

  Mat h = x;
  for (int i = 0; i < L; ++i) {
    const auto ui = static_cast<std::size_t>(i);
    Mat z(h.rows(), spec_.layer_widths[ui + 1]);
    z.noalias() = h * weight(i);
    z.rowwise() += bias(i).transpose();
    cache.inputs[ui] = std::move(h);
    if (i == L - 1) {
      h = std::move(z);
      break;
    }
    activate(spec_.activation, z, &cache.preacts[ui]);
    if (drop) {
      const double keep = 1.0 - spec_.dropout_rate;
      Mat mask(z.rows(), z.cols());
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (Eigen::Index c = 0; c < mask.cols(); ++c)
        for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = u(*rng) < keep ? 1.0 / keep : 0.0;
      z.array() *= mask.array();
      cache.masks[ui] = std::move(mask);
    }
    h = std::move(z);
  }

  if (spec_.output_normalize) {
    const Eigen::Index m = h.cols();
    const Vec mean = h.rowwise().mean();
    Mat centered = h.colwise() - mean;
    const Vec var = centered.array().square().rowwise().sum() / static_cast<double>(m);
    cache.inv_std = (var.array() + kNormEps).rsqrt().matrix();
    cache.normalized = centered.array().colwise() * cache.inv_std.array();
    const auto off = static_cast<Eigen::Index>(norm_offset());
    const auto gamma = params_.segment(off, m);
    const auto beta = params_.segment(off + m, m);
    Mat u = cache.normalized.array().rowwise() * gamma.transpose().array();
    u.rowwise() += beta.transpose();
    h = fast_tanh(u.array()).matrix();
  }
  cache.output = h;
  return h;
}

Mat Network::backward(const ForwardCache& cache, const Mat& grad_output, Vec& grad) const {
  if (grad.size() != params_.size()) throw Error("backward: gradient buffer has wrong size");
  const int L = spec_.layer_count();
  Mat d = grad_output;
  if (spec_.output_normalize) {
    const Eigen::Index m = d.cols();
    const auto off = static_cast<Eigen::Index>(norm_offset());
    const Mat du = d.array() * (1.0 - cache.output.array().square());
    grad.segment(off, m) += (du.array() * cache.normalized.array()).colwise().sum().transpose().matrix();
    grad.segment(off + m, m) += du.colwise().sum().transpose();
    const auto gamma = params_.segment(off, m);
    const Mat dxhat = du.array().rowwise() * gamma.transpose().array();
    const Vec mean_d = dxhat.rowwise().mean();
    const Vec mean_dx = (dxhat.array() * cache.normalized.array()).rowwise().mean();
    Mat dz = dxhat.colwise() - mean_d;
    dz -= (cache.normalized.array().colwise() * mean_dx.array()).matrix();
    d = dz.array().colwise() * cache.inv_std.array();
  }
  for (int i = L - 1; i >= 0; --i) {
    const auto ui = static_cast<std::size_t>(i);
    const Mat& in = cache.inputs[ui];
    const auto rows = in.cols();
    const auto cols = d.cols();
    Eigen::Map<Mat> gw(grad.data() + offsets_[ui], rows, cols);
    gw.noalias() += in.transpose() * d;
    Eigen::Map<Vec>(grad.data() + offsets_[ui] + static_cast<std::size_t>(rows * cols), cols) +=
        d.colwise().sum().transpose();
    Mat dh(d.rows(), rows);
    dh.noalias() = d * weight(i).transpose();
    if (i == 0) return dh;
    if (!cache.masks.empty()) dh.array() *= cache.masks[ui - 1].array();
    d = dh.array() * cache.preacts[ui - 1].array();
  }
  return d;
}

Mat l2_normalize_rows(const Mat& x) {
  Mat out = x;
  for (Eigen::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (n > 0) out.row(i) /= n;
  }
  return out;
}

// ---------------------------------------------------------------- losses

LossValue mse_loss(const Mat& pred, const Mat& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw Error("mse_loss: shape mismatch (" + std::to_string(pred.rows()) + "x" + std::to_string(pred.cols()) +
                " vs " + std::to_string(target.rows()) + "x" + std::to_string(target.cols()) + ")");
  const double count = static_cast<double>(pred.size());
  LossValue out;
  const Mat diff = pred - target;
  out.value = diff.squaredNorm() / count;
  out.grad = (2.0 / count) * diff;
  return out;
}

InfoNceValue infonce_loss(const Mat& anchor, const Mat& positive) {
  if (anchor.rows() != positive.rows() || anchor.cols() != positive.cols())
    throw Error("infonce_loss: shape mismatch");
  const Eigen::Index n = anchor.rows();
  if (n < 2) throw Error("infonce_loss needs at least 2 rows for in-batch negatives");
  const Vec na = anchor.rowwise().norm();
  const Vec np = positive.rowwise().norm();
  if (na.minCoeff() <= 0.0 || np.minCoeff() <= 0.0) throw Error("infonce_loss: zero embedding row");
  const Mat a = anchor.array().colwise() / na.array();
  const Mat p = positive.array().colwise() / np.array();
  const Mat s = a * p.transpose();

  InfoNceValue out;
  Mat ds(n, n);
  double total = 0.0;
  const double log_n = std::log(static_cast<double>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = s.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (s.row(i).array() - mx).exp().matrix();
    const double z = e.sum();
    total += -s(i, i) + mx + std::log(z) - log_n;
    ds.row(i) = e / z;
    ds(i, i) -= 1.0;
  }
  out.value = total / static_cast<double>(n);
  ds /= static_cast<double>(n);
  const Mat da = ds * p;
  const Mat dp = ds.transpose() * a;
  // Back through x / |x|: (I - x_hat x_hat^T) / |x|.
  const Vec ra = (da.array() * a.array()).rowwise().sum();
  const Vec rp = (dp.array() * p.array()).rowwise().sum();
  out.grad_anchor = ((da - (a.array().colwise() * ra.array()).matrix()).array().colwise() / na.array()).matrix();
  out.grad_positive = ((dp - (p.array().colwise() * rp.array()).matrix()).array().colwise() / np.array()).matrix();
  return out;
}

// ---------------------------------------------------------------- optimizer

AdamW::AdamW(AdamConfig config, const std::vector<Network*>& nets) : config_(config) {
  if (config_.total_steps < 1) throw Error("AdamW: total_steps must be >= 1");
  for (const Network* n : nets) {
    m_.push_back(Vec::Zero(n->params().size()));
    v_.push_back(Vec::Zero(n->params().size()));
  }
}

double AdamW::learning_rate_at(long step) const {
  const double t = static_cast<double>(std::min(step, config_.total_steps)) / static_cast<double>(config_.total_steps);
  return config_.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void AdamW::step(const std::vector<Network*>& nets, const std::vector<Vec>& grads) {
  if (nets.size() != m_.size() || grads.size() != m_.size()) throw Error("AdamW: network count mismatch");
  const double lr = learning_rate_at(step_);
  ++step_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < nets.size(); ++i) {
    Vec& p = nets[i]->params();
    if (grads[i].size() != p.size()) throw Error("AdamW: gradient shape mismatch");
    m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseAbs2();
    const Vec update =
        (m_[i] / c1).array() / ((v_[i] / c2).array().sqrt() + config_.epsilon) + config_.weight_decay * p.array();
    p -= lr * update;
  }
}

// ---------------------------------------------------------------- training

std::vector<Vec> zero_grads(const std::vector<Network*>& nets) {
  std::vector<Vec> g;
  g.reserve(nets.size());
  for (const Network* n : nets) g.push_back(Vec::Zero(n->params().size()));
  return g;
}

void check_finite_loss(double loss, const char* what, long step) {
  if (!std::isfinite(loss)) {
    std::ostringstream os;
    os << what << ": non-finite loss " << loss << " at step " << step;
    throw Error(os.str());
  }
}

GradCheckResult gradient_check(Trainable& model, const MiniBatch& batch, std::uint64_t mask_seed, double h,
                               std::size_t max_coords, std::uint64_t pick_seed) {
  auto nets = model.networks();
  std::vector<Vec> analytic = zero_grads(nets);
  {
    Rng r(mask_seed);
    model.loss_and_grad(batch, r, analytic);
  }
  std::vector<Vec> scratch = zero_grads(nets);
  Rng pick(pick_seed);
  GradCheckResult res;
  for (std::size_t ni = 0; ni < nets.size(); ++ni) {
    Vec& p = nets[ni]->params();
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(p.size()));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (max_coords > 0 && coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), pick);
      coords.resize(max_coords);
    }
    for (Eigen::Index c : coords) {
      const double saved = p(c);
      p(c) = saved + h;
      Rng r1(mask_seed);
      for (auto& g : scratch) g.setZero();
      const double up = model.loss_and_grad(batch, r1, scratch);
      p(c) = saved - h;
      Rng r2(mask_seed);
      for (auto& g : scratch) g.setZero();
      const double down = model.loss_and_grad(batch, r2, scratch);
      p(c) = saved;
      const double fd = (up - down) / (2.0 * h);
      const double an = analytic[ni](c);
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
      res.max_relative_error = std::max(res.max_relative_error, std::abs(fd - an) / denom);
      ++res.coordinates;
    }
  }
  return res;
}

TrainLog train(Trainable& model, const BatchSampler& sampler, long steps, AdamConfig adam, Rng& rng,
               const TrainCallback& callback, long every) {
  auto nets = model.networks();
  adam.total_steps = std::max<long>(adam.total_steps, 1);
  AdamW opt(adam, nets);
  std::vector<Vec> grads = zero_grads(nets);
  TrainLog log;
  log.loss.reserve(static_cast<std::size_t>(std::max<long>(steps, 0)));
  for (long s = 0; s < steps; ++s) {
    const MiniBatch batch = sampler(rng);
    for (auto& g : grads) g.setZero();
    const double loss = model.loss_and_grad(batch, rng, grads);
    check_finite_loss(loss, "train", s);
    opt.step(nets, grads);
    log.loss.push_back(loss);
    if (callback && every > 0 && (s + 1) % every == 0 && callback(s + 1)) break;
  }
  return log;
}

double tail_mean(const std::vector<double>& series, std::size_t window) {
  if (series.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = std::min(window, series.size());
  return std::accumulate(series.end() - static_cast<std::ptrdiff_t>(n), series.end(), 0.0) / static_cast<double>(n);
}

// ---------------------------------------------------------------- checkpoints

namespace {
constexpr char kNetMagic[5] = "IMPN";
constexpr std::uint16_t kNetVersion = 1;
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network& net, const std::string& tag, long step) {
  binio::Writer w(kNetMagic, kNetVersion);
  const NetworkSpec& s = net.spec();
  w.u32(static_cast<std::uint32_t>(s.layer_widths.size()));
  for (int width : s.layer_widths) w.u32(static_cast<std::uint32_t>(width));
  w.u8(s.activation == Activation::tanh ? 0 : 1);
  w.u8(s.output_normalize ? 1 : 0);
  w.f64(s.dropout_rate);
  w.str(tag);
  w.u64(static_cast<std::uint64_t>(step));
  w.vector(net.params());
  w.finish_to_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path, kNetMagic, kNetVersion);
  NetworkSpec s;
  const std::uint32_t n_widths = r.u32();
  if (n_widths < 2 || n_widths > 64) throw binio::FileError(binio::FileErrorCode::malformed, "bad layer count");
  for (std::uint32_t i = 0; i < n_widths; ++i) s.layer_widths.push_back(static_cast<int>(r.u32()));
  s.activation = r.u8() == 0 ? Activation::tanh : Activation::gelu;
  s.output_normalize = r.u8() != 0;
  s.dropout_rate = r.f64();
  Checkpoint ck;
  ck.tag = r.str();
  ck.step = static_cast<long>(r.u64());
  ck.network = Network(s);
  Vec params = r.vector();
  if (params.size() != ck.network.params().size())
    throw binio::FileError(binio::FileErrorCode::malformed, "parameter count does not match spec");
  ck.network.params() = std::move(params);
  if (!r.at_end()) throw binio::FileError(binio::FileErrorCode::malformed, "trailing data in checkpoint");
  return ck;
}

}  // namespace dynrep
