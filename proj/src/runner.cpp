#include "dynrep/runner.hpp"

#include "dynrep/data.hpp"
#include "dynrep/finetune.hpp"
#include "dynrep/probes.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

namespace dynrep {

namespace {

std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += (c == '\n' || c == '\r') ? ' ' : c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

double parse_real_field(const std::string& s) {
  if (s == "nan") return std::nan("");
  if (s == "inf") return INFINITY;
  if (s == "-inf") return -INFINITY;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw Error("bad number '" + s + "'");
  return v;
}

std::string spec_text(const MdpSpec& s) {
  std::ostringstream os;
  os << to_string(s.lift) << ";l=" << s.latent_dim << ";d=" << s.obs_dim << ";k=" << s.action_dim
     << ";omega=" << format_real(s.omega) << ";noise=" << format_real(s.noise_std)
     << ";radius=" << format_real(s.arena_radius) << ";H=" << s.horizon << ";rho=" << format_real(s.spectral_radius)
     << ";pert=" << format_real(s.dynamics_perturbation) << ";scale=" << format_real(s.control_scale)
     << ";spread=" << format_real(s.control_spread) << ";cond=" << format_real(s.condition_bound)
     << ";width=" << s.coupling_width;
  return os.str();
}

// Stream tags for the per-cell random streams.
enum Stream : std::uint64_t { kMdp = 1, kFamily, kFineContext, kPretrainData, kFineData, kEval, kProbeData, kAlign };

}  // namespace

std::string Cell::coordinates() const {
  std::ostringstream os;
  os << "inferrable=" << inferrable << ";regime=" << to_string(regime) << ";objective=" << to_string(objective)
     << ";pretrain=" << pretrain_size << ";finetune=" << finetune_size << ";seed=" << seed << ";gap=" << step_gap;
  return os.str();
}

bool uses_pretraining(Objective o) { return o != Objective::scratch && o != Objective::states; }

bool uses_step_gap(Objective o) {
  return o == Objective::id || o == Objective::fd_explicit || o == Objective::fd_implicit;
}

std::vector<Cell> enumerate_cells(const ExperimentConfig& cfg) {
  std::vector<Cell> cells;
  std::set<std::string> seen;
  for (bool inf : cfg.inferrable)
    for (ContextRegime regime : cfg.regimes)
      for (Objective obj : cfg.objectives)
        for (int np : cfg.pretrain_sizes)
          for (int nf : cfg.finetune_sizes)
            for (std::uint64_t seed : cfg.seeds)
              for (int gap : cfg.step_gaps) {
                Cell c{inf, regime, obj, uses_pretraining(obj) ? np : 0, nf, seed, uses_step_gap(obj) ? gap : 1};
                if (seen.insert(c.coordinates()).second) cells.push_back(c);
              }
  return cells;
}

std::string environment_label(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << to_string(cfg.mdp.lift) << "-l" << cfg.mdp.latent_dim << "-d" << cfg.mdp.obs_dim << "-k" << cfg.mdp.action_dim;
  if (cfg.mdp.lift == LiftKind::graph_manifold) os << "-w" << format_real(cfg.mdp.omega);
  if (cfg.mdp.noise_std > 0.0) os << "-n" << format_real(cfg.mdp.noise_std);
  return os.str();
}

std::uint64_t environment_hash(const ExperimentConfig& cfg) {
  return fnv1a64(spec_text(cfg.mdp) + "|" + to_string(cfg.context_kind) + ":" + std::to_string(cfg.context_count));
}

std::uint64_t cell_hash(const ExperimentConfig& cfg, const Cell& cell) {
  return fnv1a64(cfg.base_canonical + "|" + cell.coordinates());
}

// ---------------------------------------------------------------- CSV store

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{
      "cell_hash",        "config_hash",      "env",           "context",         "inferrable",
      "regime",           "objective",        "pretrain_size", "finetune_size",   "seed",
      "step_gap",         "status",           "message",       "success_rate",    "std_error",
      "episodes",         "finetune_train_mse", "finetune_val_mse", "probe_train_mse", "probe_val_mse",
      "probe_r2",         "alignment",        "pretrain_loss", "wall_seconds",    "threads",
      "code_version"};
  return cols;
}

std::string metrics_version_line() {
  return "# dynrep-metrics " + std::to_string(kMetricsMajor) + "." + std::to_string(kMetricsMinor);
}

std::string to_csv_row(const MetricsRecord& r) {
  const std::vector<std::string> f{r.cell_hash,
                                   r.config_hash,
                                   r.env,
                                   r.context,
                                   r.inferrable ? "true" : "false",
                                   to_string(r.regime),
                                   to_string(r.objective),
                                   std::to_string(r.pretrain_size),
                                   std::to_string(r.finetune_size),
                                   std::to_string(r.seed),
                                   std::to_string(r.step_gap),
                                   r.status,
                                   r.message,
                                   format_real(r.success_rate),
                                   format_real(r.std_error),
                                   std::to_string(r.episodes),
                                   format_real(r.finetune_train_mse),
                                   format_real(r.finetune_val_mse),
                                   format_real(r.probe_train_mse),
                                   format_real(r.probe_val_mse),
                                   format_real(r.probe_r2),
                                   format_real(r.alignment),
                                   format_real(r.pretrain_loss),
                                   format_real(r.wall_seconds),
                                   std::to_string(r.threads),
                                   r.code_version};
  std::string line;
  for (std::size_t i = 0; i < f.size(); ++i) line += (i ? "," : "") + csv_field(f[i]);
  return line;
}

std::vector<MetricsRecord> read_metrics(std::istream& in, const std::string& name) {
  std::string line;
  if (!std::getline(in, line)) throw Error(name + ": empty metrics store");
  const std::string tag = "# dynrep-metrics ";
  if (line.rfind(tag, 0) != 0) throw Error(name + ":1: missing metrics version line");
  const std::string version = line.substr(tag.size());
  int major = -1;
  try {
    major = std::stoi(version.substr(0, version.find('.')));
  } catch (const std::exception&) {
    throw Error(name + ":1: unreadable metrics version '" + version + "'");
  }
  if (major != kMetricsMajor)
    throw Error(name + ":1: unsupported metrics major version " + std::to_string(major) + " (this build reads " +
                std::to_string(kMetricsMajor) + ")");
  if (!std::getline(in, line) || split_csv(line) != metrics_columns())
    throw Error(name + ":2: unexpected metrics header");

  std::vector<MetricsRecord> out;
  std::map<std::string, std::size_t> where;
  int lineno = 2;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != metrics_columns().size())
      throw Error(name + ":" + std::to_string(lineno) + ": expected " + std::to_string(metrics_columns().size()) +
                  " fields, got " + std::to_string(f.size()));
    MetricsRecord r;
    try {
      r.cell_hash = f[0];
      r.config_hash = f[1];
      r.env = f[2];
      r.context = f[3];
      r.inferrable = f[4] == "true";
      r.regime = parse_regime(f[5]);
      r.objective = parse_objective(f[6]);
      r.pretrain_size = std::stoi(f[7]);
      r.finetune_size = std::stoi(f[8]);
      r.seed = std::stoull(f[9]);
      r.step_gap = std::stoi(f[10]);
      r.status = f[11];
      r.message = f[12];
      r.success_rate = parse_real_field(f[13]);
      r.std_error = parse_real_field(f[14]);
      r.episodes = std::stoi(f[15]);
      r.finetune_train_mse = parse_real_field(f[16]);
      r.finetune_val_mse = parse_real_field(f[17]);
      r.probe_train_mse = parse_real_field(f[18]);
      r.probe_val_mse = parse_real_field(f[19]);
      r.probe_r2 = parse_real_field(f[20]);
      r.alignment = parse_real_field(f[21]);
      r.pretrain_loss = parse_real_field(f[22]);
      r.wall_seconds = parse_real_field(f[23]);
      r.threads = std::stoi(f[24]);
      r.code_version = f[25];
    } catch (const std::exception& e) {
      throw Error(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (auto it = where.find(r.cell_hash); it != where.end()) {
      out[it->second] = r;
    } else {
      where[r.cell_hash] = out.size();
      out.push_back(r);
    }
  }
  return out;
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& store) {
  std::ifstream in(store);
  if (!in) throw Error("cannot open metrics store " + store.string());
  return read_metrics(in, store.string());
}

// ---------------------------------------------------------------- cells

std::filesystem::path resolve_output(const ExperimentConfig& cfg, const RunOptions& options) {
  if (options.out) return *options.out;
  if (const char* env = std::getenv("DYNREP_OUT"); env && *env) return env;
  return cfg.output;
}

MetricsRecord run_cell(const ExperimentConfig& cfg, const Cell& cell, std::uint64_t seed_offset,
                       const std::filesystem::path* artifacts) {
  const auto t0 = std::chrono::steady_clock::now();
  MetricsRecord rec;
  rec.cell_hash = hex64(cell_hash(cfg, cell));
  rec.config_hash = hex64(cfg.config_hash);
  rec.env = environment_label(cfg);
  rec.context = to_string(cfg.context_kind);
  rec.inferrable = cell.inferrable;
  rec.regime = cell.regime;
  rec.objective = cell.objective;
  rec.pretrain_size = cell.pretrain_size;
  rec.finetune_size = cell.finetune_size;
  rec.seed = cell.seed;
  rec.step_gap = cell.step_gap;

  try {
    const std::uint64_t env = environment_hash(cfg);
    const std::uint64_t seed = cell.seed + seed_offset;
    const LatentMdp mdp = make_mdp(cfg.mdp, stream_seed(env, seed, kMdp));
    const ExpertPolicy expert;

    ContextFamily family = cfg.context_kind == ContextKind::discrete
                               ? make_discrete_family(mdp, cfg.context_count, cell.inferrable,
                                                      stream_seed(env, seed, kFamily))
                               : make_goal_family(cell.inferrable);
    family.inferrable = cell.inferrable;

    // c_fine and the pretraining family. Held-out discrete families drop
    // c_fine's id from pretraining; continuous goals are held out by
    // construction.
    Rng fine_ctx_rng = make_rng(env, seed, stream_seed(kFineContext, cell.inferrable));
    Context c_fine;
    ContextFamily pre_family = family;
    if (cfg.context_kind == ContextKind::discrete) {
      const int id = static_cast<int>(fine_ctx_rng() % static_cast<std::uint64_t>(cfg.context_count));
      c_fine = discrete_context(family, id);
      if (cell.regime == ContextRegime::held_out)
        pre_family.allowed.erase(std::remove(pre_family.allowed.begin(), pre_family.allowed.end(), id),
                                 pre_family.allowed.end());
    } else {
      c_fine = sample_context(family, mdp, 0, fine_ctx_rng);
    }

    const std::uint64_t data_key =
        stream_seed(cell.inferrable, static_cast<std::uint64_t>(cell.regime), static_cast<std::uint64_t>(cell.pretrain_size));
    const std::uint64_t cell_key = cell_hash(cfg, cell);

    Encoder encoder;
    std::optional<DatasetHandle> pre_ds;
    if (cell.objective == Objective::states) {
      encoder = states_oracle(mdp);
    } else if (cell.objective == Objective::scratch) {
      Rng rng = make_rng(cell_key, 1);
      encoder = scratch_encoder(mdp.obs_dim(), cfg.pretrain.arch, rng);
    } else {
      Rng data_rng = make_rng(env, seed, stream_seed(kPretrainData, data_key));
      pre_ds.emplace(generate_pretraining(mdp, expert, pre_family, static_cast<std::size_t>(cell.pretrain_size), data_rng));
      PretrainConfig pc = cfg.pretrain;
      pc.objective = cell.objective;
      pc.step_gap = cell.step_gap;
      pc.seed = stream_seed(cell_key, 2);
      pc.aug = cell.objective == Objective::contrastive ? cfg.contrastive_aug : AugSpec{};
      Rng rng = make_rng(cell_key, 3);
      encoder = pretrain(*pre_ds, pc, rng);
      rec.pretrain_loss = encoder.final_train_loss();
    }

    Rng fine_rng = make_rng(env, seed,
                            stream_seed(kFineData, data_key, static_cast<std::uint64_t>(cell.finetune_size)));
    const DatasetHandle fine_ds =
        generate_finetuning(mdp, expert, family, c_fine, static_cast<std::size_t>(cell.finetune_size), fine_rng);
    FinetuneConfig fc = cfg.finetune;
    fc.joint = cell.objective == Objective::scratch;
    fc.aug = fc.joint ? cfg.contrastive_aug : AugSpec{};
    fc.seed = stream_seed(cell_key, 4);
    Rng ft_rng = make_rng(cell_key, 5);
    const PolicyHead head = finetune(encoder, fine_ds, fc, ft_rng);
    const ActionLosses losses = action_losses(head);
    rec.finetune_train_mse = losses.train_mse;
    rec.finetune_val_mse = losses.val_mse;

    EvaluationSpec eval = default_evaluation(mdp.spec);
    eval.episodes = cfg.eval_episodes;
    const EvalResult er = evaluate(mdp, family, c_fine, head, eval, stream_seed(env, seed, kEval));
    rec.success_rate = er.success_rate;
    rec.std_error = er.std_error;
    rec.episodes = eval.episodes;

    {
      Rng probe_data_rng = make_rng(env, seed, stream_seed(kProbeData, cell.inferrable));
      const DatasetHandle probe_ds = generate_pretraining(mdp, expert, family,
                                                         static_cast<std::size_t>(cfg.probe_trajectories), probe_data_rng);
      ProbeConfig pc = cfg.probe;
      pc.seed = stream_seed(cell_key, 6);
      Rng probe_rng = make_rng(cell_key, 7);
      const ProbeResult pr = probe_state(head.encoder(), probe_ds, pc, probe_rng);
      rec.probe_train_mse = pr.train_loss;
      rec.probe_val_mse = pr.val_loss;
      rec.probe_r2 = pr.r_squared;
      Rng align_rng = make_rng(env, seed, kAlign);
      rec.alignment =
          subspace_alignment(head.encoder(), mdp, static_cast<std::size_t>(cfg.alignment_samples), align_rng).alignment;
    }

    if (artifacts) {
      std::filesystem::create_directories(*artifacts);
      if (!head.encoder().is_oracle()) save_encoder(head.encoder(), *artifacts / (rec.cell_hash + ".enc"));
      if (pre_ds) {
        const auto target = *artifacts / ("pretrain-" + hex64(stream_seed(env, seed, data_key)) + ".impd");
        if (!std::filesystem::exists(target)) {
          const auto tmp = target.string() + "." + rec.cell_hash + ".tmp";
          save_dataset(*pre_ds, tmp);
          std::filesystem::rename(tmp, target);
        }
      }
    }
  } catch (const std::exception& e) {
    rec.status = "error";
    rec.message = e.what();
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ---------------------------------------------------------------- scheduler

RunSummary run_experiment(const ExperimentConfig& cfg, const RunOptions& options) {
  if (options.workers < 1) throw Error("--workers must be >= 1");
  const std::filesystem::path out = resolve_output(cfg, options);
  std::filesystem::create_directories(out);
  RunSummary summary;
  summary.store = out / "metrics.csv";

  std::set<std::string> done;
  if (std::filesystem::exists(summary.store)) {
    for (const auto& r : read_metrics(summary.store))
      if (r.ok()) done.insert(r.cell_hash);
  } else {
    std::ofstream init(summary.store);
    init << metrics_version_line() << '\n';
    for (std::size_t i = 0; i < metrics_columns().size(); ++i) init << (i ? "," : "") << metrics_columns()[i];
    init << '\n';
    if (!init) throw Error("cannot write " + summary.store.string());
  }
  {
    std::ofstream canon(out / "config.canonical");
    canon << cfg.base_canonical;
  }

  const std::vector<Cell> all = enumerate_cells(cfg);
  std::vector<Cell> todo;
  for (const Cell& c : all)
    if (!done.count(hex64(cell_hash(cfg, c)))) todo.push_back(c);
  summary.cells = all.size();
  summary.skipped = all.size() - todo.size();
  if (options.log)
    *options.log << "run: " << all.size() << " cells, " << summary.skipped << " already complete, " << todo.size()
                 << " to execute\n";

  std::ofstream store(summary.store, std::ios::app);
  if (!store) throw Error("cannot append to " + summary.store.string());
  const std::filesystem::path artifact_dir = out / "artifacts";
  const std::filesystem::path* artifacts = cfg.save_artifacts ? &artifact_dir : nullptr;
  const int workers = std::max(1, std::min<int>(options.workers, static_cast<int>(todo.size())));

  // Workers fill slots; this thread writes them strictly in cell order.
  std::vector<std::optional<MetricsRecord>> slots(todo.size());
  std::mutex mu;
  std::condition_variable ready;
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < todo.size(); i = next++) {
      MetricsRecord r = run_cell(cfg, todo[i], options.seed_offset, artifacts);
      r.threads = options.workers;
      std::lock_guard<std::mutex> lock(mu);
      slots[i] = std::move(r);
      ready.notify_all();
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work);

  for (std::size_t i = 0; i < todo.size(); ++i) {
    MetricsRecord r;
    {
      std::unique_lock<std::mutex> lock(mu);
      ready.wait(lock, [&] { return slots[i].has_value(); });
      r = std::move(*slots[i]);
      slots[i].reset();
    }
    store << to_csv_row(r) << '\n';
    store.flush();
    ++summary.executed;
    if (!r.ok()) ++summary.failed;
    if (options.log) {
      *options.log << "[" << (i + 1) << "/" << todo.size() << "] " << todo[i].coordinates() << " ";
      if (r.ok())
        *options.log << "success=" << format_real(r.success_rate) << " (" << r.wall_seconds << " s)\n";
      else
        *options.log << "error: " << r.message << "\n";
    }
  }
  for (auto& t : pool) t.join();
  return summary;
}

RunSummary run(const std::filesystem::path& config_path, const RunOptions& options) {
  return run_experiment(ExperimentConfig::load(config_path), options);
}

}  // namespace dynrep
