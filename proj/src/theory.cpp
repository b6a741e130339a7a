#include "dynrep/theory.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/beta.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>

namespace dynrep {

// ---------------------------------------------------------------- reports

namespace {

const std::pair<std::string, double>* find(const std::vector<std::pair<std::string, double>>& v,
                                           const std::string& name) {
  for (const auto& kv : v)
    if (kv.first == name) return &kv;
  return nullptr;
}

void upsert(std::vector<std::pair<std::string, double>>& v, const std::string& name, double value) {
  for (auto& kv : v)
    if (kv.first == name) {
      kv.second = value;
      return;
    }
  v.emplace_back(name, value);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::nan("") : s / static_cast<double>(v.size());
}

double relative_error(const Mat& w, const Mat& target) {
  const double t = target.norm();
  const double e = (w - target).norm();
  return t > 0.0 ? e / t : e;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

double TheoryReport::metric(const std::string& name) const {
  const auto* kv = find(metrics, name);
  if (!kv) throw Error("report " + experiment + " has no metric '" + name + "'");
  return kv->second;
}

double TheoryReport::threshold(const std::string& name) const {
  const auto* kv = find(thresholds, name);
  if (!kv) throw Error("report " + experiment + " has no threshold '" + name + "'");
  return kv->second;
}

bool TheoryReport::has_metric(const std::string& name) const { return find(metrics, name) != nullptr; }
void TheoryReport::set_metric(const std::string& name, double value) { upsert(metrics, name, value); }
void TheoryReport::set_threshold(const std::string& name, double value) { upsert(thresholds, name, value); }

// Thresholds are named "max:<metric>" or "min:<metric>".
void judge(TheoryReport& report) {
  report.failures.clear();
  for (const auto& [name, bound] : report.thresholds) {
    const auto colon = name.find(':');
    if (colon == std::string::npos) throw Error("threshold '" + name + "' lacks a max:/min: prefix");
    const std::string kind = name.substr(0, colon);
    const std::string metric = name.substr(colon + 1);
    if (kind != "max" && kind != "min") throw Error("threshold '" + name + "' has unknown kind '" + kind + "'");
    const auto* kv = find(report.metrics, metric);
    bool ok = false;
    if (kv && std::isfinite(kv->second)) ok = kind == "max" ? kv->second <= bound : kv->second >= bound;
    if (!ok) report.failures.push_back(name);
  }
  report.pass = report.failures.empty();
}

std::string to_text(const TheoryReport& report) {
  std::ostringstream os;
  os << "experiment: " << report.experiment << '\n';
  os << "pass: " << (report.pass ? "true" : "false") << '\n';
  for (const auto& [k, v] : report.metrics) os << "metric " << k << " = " << fmt(v) << '\n';
  for (const auto& [k, v] : report.thresholds) os << "threshold " << k << " = " << fmt(v) << '\n';
  for (const auto& f : report.failures) os << "failed " << f << '\n';
  return os.str();
}

void write_report(const TheoryReport& report, const std::filesystem::path& text_path,
                  const std::filesystem::path& csv_path) {
  {
    std::ofstream f(text_path);
    if (!f) throw Error("cannot write " + text_path.string());
    f << to_text(report);
  }
  std::ofstream c(csv_path);
  if (!c) throw Error("cannot write " + csv_path.string());
  c << "experiment,kind,name,value\n";
  for (const auto& [k, v] : report.metrics) c << report.experiment << ",metric," << k << ',' << fmt(v) << '\n';
  for (const auto& [k, v] : report.thresholds) c << report.experiment << ",threshold," << k << ',' << fmt(v) << '\n';
}

TheoryReport read_report(const std::filesystem::path& text_path) {
  std::ifstream f(text_path);
  if (!f) throw Error("cannot read " + text_path.string());
  TheoryReport r;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string head;
    is >> head;
    if (head == "experiment:") {
      is >> r.experiment;
    } else if (head == "pass:") {
      // recomputed by judge() below
    } else if (head == "metric" || head == "threshold") {
      std::string name, eq;
      double v = 0.0;
      if (!(is >> name >> eq) || eq != "=")
        throw Error(text_path.string() + ":" + std::to_string(lineno) + ": malformed line");
      std::string value;
      is >> value;
      v = std::stod(value);
      (head == "metric" ? r.metrics : r.thresholds).emplace_back(name, v);
    } else if (head != "failed") {
      throw Error(text_path.string() + ":" + std::to_string(lineno) + ": unknown entry '" + head + "'");
    }
  }
  if (r.experiment.empty()) throw Error(text_path.string() + ": missing experiment name");
  judge(r);
  return r;
}

// ---------------------------------------------------------------- ID recovery

IdSamples draw_id_samples(const LatentMdp& mdp, std::size_t n, double action_clip, Rng& rng) {
  const int l = mdp.latent_dim();
  const int k = mdp.action_dim();
  const auto rows = static_cast<Eigen::Index>(n);
  Mat s(rows, l), a(rows, k), s_next(rows, l);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const Vec si = uniform_ball_sample(l, mdp.spec.arena_radius, rng);
    Vec ai(k);
    for (int j = 0; j < k; ++j) ai(j) = action_clip * u(rng);
    Vec next = mdp.A * si + mdp.B * ai;
    if (mdp.spec.noise_std > 0.0) next += mdp.noise_chol * gaussian_vector(l, rng);
    s.row(i) = si.transpose();
    a.row(i) = ai.transpose();
    s_next.row(i) = next.transpose();
  }
  return {mdp.lift.decode_rows(s), a, mdp.lift.decode_rows(s_next)};
}

IdRegression solve_id_regression(const IdSamples& samples, double rank_tol) {
  const Eigen::Index n = samples.obs.rows();
  const Eigen::Index d = samples.obs.cols();
  Mat stacked(2 * n, d);
  stacked << samples.obs, samples.next_obs;
  Eigen::JacobiSVD<Mat> svd(stacked, Eigen::ComputeThinV);
  const Vec& sv = svd.singularValues();
  if (sv.size() == 0 || !(sv(0) > 0.0)) throw Error("singular normal equations: observations are all zero");
  Eigen::Index r = 0;
  while (r < sv.size() && sv(r) > rank_tol * sv(0)) ++r;
  const Mat U = svd.matrixV().leftCols(r);

  Mat Z(n, 2 * r);
  Z << samples.obs * U, samples.next_obs * U;
  const Eigen::Index k = samples.action.cols();
  Eigen::JacobiSVD<Mat> zsvd(Z, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vec& zs = zsvd.singularValues();
  Eigen::Index rz = 0;
  while (rz < zs.size() && zs(rz) > rank_tol * zs(0)) ++rz;
  // o' must carry k action directions beyond what o explains.
  if (rz < r + k) throw Error("singular normal equations: insufficient excitation in (o, o')");
  const Mat Vr = zsvd.matrixV().leftCols(rz);
  Mat C = Vr * zs.head(rz).cwiseInverse().asDiagonal() * (zsvd.matrixU().leftCols(rz).transpose() * samples.action);
  if (rz < 2 * r) {
    // Noise-free with k < l: every fit along the null directions is exact.
    // Keep the one with the smallest o' coefficient, whose rows lie in range(B).
    const Mat N = zsvd.matrixV().middleCols(rz, 2 * r - rz);
    const Mat N2 = N.bottomRows(r);
    Eigen::ColPivHouseholderQR<Mat> qr(N2);
    qr.setThreshold(1e-8);
    if (qr.rank() < N2.cols()) throw Error("singular normal equations: o coefficient is not identified");
    C -= N * qr.solve(C.bottomRows(r));
  }

  IdRegression out;
  out.w1 = C.topRows(r).transpose() * U.transpose();
  out.w2 = C.bottomRows(r).transpose() * U.transpose();
  return out;
}

std::pair<Mat, Mat> id_population_targets(const LatentMdp& mdp, double action_clip) {
  if (mdp.lift.kind() != LiftKind::linear_orthonormal)
    throw Error("ID recovery targets need the linear-orthonormal lift");
  const Mat& Q = mdp.lift.basis();
  Mat K = mdp.B_pinv;
  if (mdp.spec.noise_std > 0.0) {
    const int k = mdp.action_dim();
    const Mat Sa = (action_clip * action_clip / 3.0) * Mat::Identity(k, k);
    const Mat M = mdp.B * Sa * mdp.B.transpose() + mdp.noise_cov();
    K = Sa * mdp.B.transpose() * M.inverse();
  }
  return {-K * mdp.A * Q.transpose(), K * Q.transpose()};
}

TheoryReport verify_id_recovery(const MdpSpec& spec, std::size_t n_samples, Rng& rng,
                                const IdRecoveryOptions& options) {
  return verify_id_recovery(make_mdp(spec, fork_seed(rng)), n_samples, rng, options);
}

TheoryReport verify_id_recovery(const LatentMdp& mdp, std::size_t n_samples, Rng& rng,
                                const IdRecoveryOptions& options) {
  if (mdp.lift.kind() != LiftKind::linear_orthonormal)
    throw Error("verify_id_recovery needs the linear-orthonormal lift");
  TheoryReport rep;
  rep.experiment = "id-recovery";
  const auto [t1, t2] = id_population_targets(mdp, options.action_clip);
  const Mat& Q = mdp.lift.basis();

  const IdRegression reg = solve_id_regression(draw_id_samples(mdp, n_samples, options.action_clip, rng));
  Mat W(2 * reg.w1.rows(), reg.w1.cols());
  W << reg.w1, reg.w2;
  const double w1_err = relative_error(reg.w1, t1);
  const double w2_err = relative_error(reg.w2, t2);
  Eigen::JacobiSVD<Mat> bsvd(mdp.B);
  rep.set_metric("n_samples", static_cast<double>(n_samples));
  rep.set_metric("noise_std", mdp.spec.noise_std);
  rep.set_metric("condition_number_B", bsvd.singularValues()(0) / bsvd.singularValues().tail(1)(0));
  rep.set_metric("w1_error", w1_err);
  rep.set_metric("w2_error", w2_err);
  rep.set_metric("matrix_error", std::max(w1_err, w2_err));
  rep.set_metric("alignment", W.squaredNorm() > 0.0 ? (W * Q).squaredNorm() / W.squaredNorm() : 0.0);
  rep.set_threshold("min:alignment", 1.0 - 1e-8);

  if (mdp.spec.noise_std == 0.0) {
    rep.set_threshold("max:matrix_error", 1e-8);
  } else {
    std::vector<double> errors;
    for (std::size_t size : options.rate_sizes) {
      double total = 0.0;
      for (int rep_i = 0; rep_i < options.rate_repetitions; ++rep_i) {
        const IdRegression r = solve_id_regression(draw_id_samples(mdp, size, options.action_clip, rng));
        total += relative_error(r.w2, t2);
      }
      errors.push_back(total / options.rate_repetitions);
      rep.set_metric("w2_error_n" + std::to_string(size), errors.back());
    }
    for (std::size_t i = 1; i < errors.size(); ++i) {
      const std::string name = "rate_ratio_" + std::to_string(i);
      rep.set_metric(name, errors[i] / errors[i - 1]);
      rep.set_threshold("min:" + name, 0.4);
      rep.set_threshold("max:" + name, 0.6);
    }
  }
  judge(rep);
  return rep;
}

// ---------------------------------------------------------------- BC confounding

LatentMdp rotation_mdp(int k, int obs_dim, std::uint64_t seed) {
  MdpSpec spec;
  spec.latent_dim = k;
  spec.action_dim = k;
  spec.obs_dim = obs_dim;
  spec.horizon = 1;
  spec.noise_std = 0.0;
  spec.arena_radius = 1.0;
  spec.condition_bound = 1.0 + 1e-9;
  Rng rng = make_rng(seed, 0x726f74);
  Mat q = gaussian_matrix(obs_dim, k, rng);
  Eigen::HouseholderQR<Mat> qr(q);
  const Mat basis = qr.householderQ() * Mat::Identity(obs_dim, k);
  return make_custom_mdp(spec, Mat::Zero(k, k), Mat::Identity(k, k), ObservationLift::linear(basis));
}

TheoryReport verify_bc_confounding(int k, int n_contexts, int n_samples_per_context, Rng& rng,
                                   const ConfoundingOptions& options) {
  if (k < 2) throw Error("bc confounding needs k >= 2");
  if (n_contexts < 1 || n_samples_per_context < 1) throw Error("bc confounding needs contexts and samples");
  TheoryReport rep;
  rep.experiment = "bc-confounding";

  // Conditional action mean at a fixed observation, marginalizing the context.
  {
    const LatentMdp mdp = rotation_mdp(k, options.obs_dim, fork_seed(rng));
    const ContextFamily fam = make_rotation_family();
    const ExpertPolicy expert{ExpertFamily::rotation_linear};
    const Vec s = Vec::Unit(k, 0);
    Vec m = Vec::Zero(k);
    for (int i = 0; i < n_contexts; ++i)
      m += expert_action(expert, mdp, sample_context(fam, mdp, static_cast<std::size_t>(i), rng), s);
    rep.set_metric("action_mean_norm", (m / n_contexts).norm());
    rep.set_threshold("max:action_mean_norm", 3.0 / std::sqrt(static_cast<double>(n_contexts)));
  }

  std::vector<double> bc_ratio, id_ratio, bc_success, id_success, random_success, gap;
  for (int seed = 0; seed < options.seeds; ++seed) {
    const std::uint64_t base = fork_seed(rng);
    const LatentMdp mdp = rotation_mdp(k, options.obs_dim, base);
    ContextFamily fam = make_rotation_family();
    fam.trajectories_per_context = n_samples_per_context;
    const ExpertPolicy expert{ExpertFamily::rotation_linear};
    Rng data_rng = make_rng(base, 1);
    const DatasetHandle ds = generate_pretraining(
        mdp, expert, fam, static_cast<std::size_t>(n_contexts) * static_cast<std::size_t>(n_samples_per_context),
        data_rng);
    const ActionPairs pairs = action_pairs(ds, Split::train);
    const double mean_sq_norm = pairs.action.rowwise().squaredNorm().mean();

    auto run = [&](Objective o) {
      PretrainConfig cfg;
      cfg.objective = o;
      cfg.steps = options.pretrain_steps;
      cfg.arch = options.arch;
      cfg.seed = base;
      Rng r = make_rng(base, 2, static_cast<std::uint64_t>(o));
      return pretrain(ds, cfg, r);
    };
    const Encoder bc = run(Objective::bc);
    const Encoder id = run(Objective::id);
    const std::size_t window = std::max<std::size_t>(1, static_cast<std::size_t>(options.pretrain_steps / 10));
    // mse_loss averages over the k action coordinates.
    bc_ratio.push_back(tail_mean(bc.train_log(), window) * k / mean_sq_norm);
    id_ratio.push_back(tail_mean(id.train_log(), window) * k / mean_sq_norm);

    Rng ctx_rng = make_rng(base, 3);
    const Context c_fine = sample_context(fam, mdp, 0, ctx_rng);
    Rng fine_rng = make_rng(base, 4);
    const DatasetHandle fine = generate_finetuning(mdp, expert, fam, c_fine,
                                                   static_cast<std::size_t>(options.finetune_trajectories), fine_rng);
    EvaluationSpec eval = default_evaluation(mdp.spec);
    eval.episodes = options.eval_episodes;
    FinetuneConfig fc = options.finetune;
    fc.seed = base;
    Rng ft_rng = make_rng(base, 5);
    const PolicyHead bc_head = finetune(bc, fine, fc, ft_rng);
    const PolicyHead id_head = finetune(id, fine, fc, ft_rng);
    const std::uint64_t eval_seed = stream_seed(base, 6);
    const double sb = evaluate(mdp, fam, c_fine, bc_head, eval, eval_seed).success_rate;
    const double si = evaluate(mdp, fam, c_fine, id_head, eval, eval_seed).success_rate;
    const double sr =
        evaluate(mdp, fam, c_fine, RandomPolicy(k, fc.action_clip), eval, eval_seed).success_rate;
    bc_success.push_back(sb);
    id_success.push_back(si);
    random_success.push_back(sr);
    gap.push_back(si - sb);
    if (options.verbose)
      std::cerr << "bc-confounding seed " << seed << ": BC plateau " << bc_ratio.back() << ", ID plateau "
                << id_ratio.back() << ", success ID " << si << " BC " << sb << " random " << sr << '\n';
  }
  rep.set_metric("bc_plateau_ratio", median(bc_ratio));
  rep.set_metric("id_plateau_ratio", median(id_ratio));
  rep.set_metric("id_success_median", median(id_success));
  rep.set_metric("bc_success_median", median(bc_success));
  rep.set_metric("random_success_mean", mean(random_success));
  rep.set_metric("success_gap_median", median(gap));
  rep.set_metric("bc_random_distance", std::abs(median(bc_success) - mean(random_success)));
  rep.set_threshold("min:bc_plateau_ratio", 0.9);
  rep.set_threshold("max:id_plateau_ratio", 0.1);
  rep.set_threshold("min:success_gap_median", 0.4);
  rep.set_threshold("max:bc_random_distance", 0.1);
  judge(rep);
  return rep;
}

// ---------------------------------------------------------------- FD complexity

TheoryReport verify_fd_complexity(const std::vector<double>& omega_list, long budget, Rng& rng,
                                  const FdComplexityOptions& options) {
  if (omega_list.size() < 2) throw Error("fd complexity needs at least two frequencies");
  TheoryReport rep;
  rep.experiment = "fd-complexity";
  const std::uint64_t base = fork_seed(rng);
  std::vector<double> fd_err, id_err;
  for (double omega : omega_list) {
    MdpSpec spec;
    spec.latent_dim = options.latent_dim;
    spec.action_dim = options.action_dim;
    spec.obs_dim = 2 * options.latent_dim;
    spec.lift = LiftKind::graph_manifold;
    spec.omega = omega;
    const LatentMdp mdp = make_mdp(spec, base);
    Rng data_rng = make_rng(base, 1);
    const DatasetHandle ds = generate_pretraining(mdp, ExpertPolicy{}, make_goal_family(false),
                                                  static_cast<std::size_t>(options.trajectories), data_rng);
    auto run = [&](Objective o) {
      PretrainConfig cfg;
      cfg.objective = o;
      cfg.steps = budget;
      cfg.arch = options.arch;
      cfg.seed = base;
      Rng r = make_rng(base, 2, static_cast<std::uint64_t>(o));
      const Encoder enc = pretrain(ds, cfg, r);
      Rng pr = make_rng(base, 3, static_cast<std::uint64_t>(o));
      return probe_state(enc, ds, options.probe, pr).val_loss;
    };
    fd_err.push_back(run(Objective::fd_explicit));
    id_err.push_back(run(Objective::id));
    std::ostringstream tag;
    tag << omega;
    rep.set_metric("fd_e_probe_mse@" + tag.str(), fd_err.back());
    rep.set_metric("id_probe_mse@" + tag.str(), id_err.back());
    if (options.verbose)
      std::cerr << "fd-complexity omega " << omega << ": FD-e " << fd_err.back() << ", ID " << id_err.back() << '\n';
  }
  const int E = options.arch.embedding_dim;
  const int d = 2 * options.latent_dim;
  rep.set_metric("fd_e_head_params",
                 static_cast<double>(options.arch.head_spec(E + options.action_dim, d).parameter_count()));
  rep.set_metric("id_head_params", static_cast<double>(options.arch.head_spec(2 * E, options.action_dim).parameter_count()));
  rep.set_metric("fd_e_growth", fd_err.back() / fd_err.front());
  rep.set_metric("id_growth", id_err.back() / id_err.front());
  rep.set_metric("fd_over_id_at_max", fd_err.back() / id_err.back());
  rep.set_threshold("min:fd_e_growth", 2.0);
  rep.set_threshold("max:id_growth", 1.5);
  rep.set_threshold("min:fd_over_id_at_max", 2.0);
  judge(rep);
  return rep;
}

// ---------------------------------------------------------------- Haar

HaarCheck haar_uniformity(int k, int n, int bins, Rng& rng) {
  if (k < 2) throw Error("haar check needs k >= 2");
  if (bins < 2 || n < bins) throw Error("haar check needs n >= bins >= 2");
  HaarCheck out;
  out.bins = bins;
  out.coordinate_means = Vec::Zero(k);
  std::vector<double> counts(static_cast<std::size_t>(bins), 0.0);
  for (int i = 0; i < n; ++i) {
    const Vec v = haar_rotation(k, rng).col(0);
    out.coordinate_means += v;
    double u = 0.0;  // probability-integral transform, uniform on [0, 1) under the null
    if (k == 2) {
      u = (std::atan2(v(1), v(0)) + std::numbers::pi) / (2.0 * std::numbers::pi);
    } else {
      // x1^2 ~ Beta(1/2, (k-1)/2) and the sign is symmetric.
      const double half = 0.5 * boost::math::ibeta(0.5, 0.5 * (k - 1), std::min(1.0, v(0) * v(0)));
      u = v(0) >= 0 ? 0.5 + half : 0.5 - half;
    }
    const int b = std::min(bins - 1, static_cast<int>(u * bins));
    counts[static_cast<std::size_t>(b)] += 1.0;
  }
  out.coordinate_means /= n;
  const double expected = static_cast<double>(n) / bins;
  for (double c : counts) out.chi_square += (c - expected) * (c - expected) / expected;
  const boost::math::chi_squared dist(bins - 1);
  out.p_value = boost::math::cdf(boost::math::complement(dist, out.chi_square));
  return out;
}

TheoryReport run_theory_experiment(const std::string& name, std::uint64_t seed, bool verbose) {
  Rng rng = make_rng(seed, fnv1a64(name));
  EncoderArch arch;
  arch.hidden = {128, 128};
  arch.head_hidden = {128, 128};
  if (name == "id-recovery") {
    MdpSpec spec;
    spec.latent_dim = 4;
    spec.obs_dim = 32;
    spec.action_dim = 2;
    return verify_id_recovery(spec, 4000, rng);
  }
  if (name == "bc-confounding") {
    ConfoundingOptions o;
    o.arch = arch;
    o.pretrain_steps = 1000;
    o.finetune.hidden = {128, 128};
    o.finetune.steps = 1000;
    o.finetune_trajectories = 10;
    o.verbose = verbose;
    return verify_bc_confounding(2, 500, 1, rng, o);
  }
  if (name == "fd-complexity") {
    FdComplexityOptions o;
    o.arch = arch;
    o.probe.hidden = {128, 128};
    o.probe.steps = 2000;
    o.verbose = verbose;
    return verify_fd_complexity({1.0, 4.0, 16.0}, 3000, rng, o);
  }
  throw Error("unknown theory experiment '" + name + "' (expected id-recovery, bc-confounding or fd-complexity)");
}

}  // namespace dynrep
