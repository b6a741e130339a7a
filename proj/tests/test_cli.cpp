#include <doctest.h>

#include "dynrep/report.hpp"
#include "dynrep/runner.hpp"
#include "dynrep/theory.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <sys/wait.h>

using namespace dynrep;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("dynrep_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  return lines;
}

const char* kTinyBudget = R"(
[mdp]
latent_dim = 2
obs_dim = 8
action_dim = 2
horizon = 20
[budget]
pretrain_steps = 20
finetune_steps = 20
probe_steps = 10
batch_size = 32
finetune_batch_size = 32
probe_trajectories = 10
alignment_samples = 40
[arch]
hidden = 16
head_hidden = 16
embedding_dim = 4
[eval]
episodes = 5
)";

ExperimentConfig tiny(const std::string& grid) {
  return ExperimentConfig::from_tree(ConfigTree::parse_string(std::string(kTinyBudget) + "[]\n" + grid, "tiny.cfg"));
}

std::string error_of(const std::string& text) {
  try {
    ExperimentConfig::from_tree(ConfigTree::parse_string(text, "bad.cfg"));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

// CSV body with the wall-clock column (and optionally threads) blanked.
std::vector<std::string> comparable_body(const fs::path& store, bool drop_threads) {
  std::vector<std::string> out;
  for (auto r : read_metrics(store)) {
    r.wall_seconds = 0.0;
    if (drop_threads) r.threads = 0;
    out.push_back(to_csv_row(r));
  }
  return out;
}

MetricsRecord record(const std::string& env, Objective obj, int np, int nf, std::uint64_t seed, double success) {
  MetricsRecord r;
  r.env = env;
  r.objective = obj;
  r.pretrain_size = np;
  r.finetune_size = nf;
  r.seed = seed;
  r.success_rate = success;
  r.cell_hash = env + to_string(obj) + std::to_string(np) + std::to_string(nf) + std::to_string(seed);
  return r;
}

int exit_status(const std::string& cmd) {
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

}  // namespace

TEST_CASE("config sections, includes and overrides") {
  TempDir dir("includes");
  write_file(dir.path / "base.cfg", "[mdp]\nlatent_dim = 3\nobs_dim = 24\n");
  write_file(dir.path / "exp.cfg", "# experiment\ninclude base.cfg\n[mdp]\nobs_dim = 32  # override\n[]\nseeds = 7,8\n");
  const ConfigTree t = ConfigTree::parse_file(dir.path / "exp.cfg");
  CHECK(t.at("mdp.latent_dim").text == "3");
  CHECK(t.at("mdp.obs_dim").text == "32");
  CHECK(t.at("mdp.obs_dim").line == 4);
  const ExperimentConfig c = ExperimentConfig::load(dir.path / "exp.cfg");
  CHECK(c.mdp.latent_dim == 3);
  CHECK(c.mdp.obs_dim == 32);
  CHECK(c.seeds == std::vector<std::uint64_t>{7, 8});

  write_file(dir.path / "a.cfg", "include b.cfg\n");
  write_file(dir.path / "b.cfg", "include a.cfg\n");
  CHECK_THROWS_WITH_AS(ConfigTree::parse_file(dir.path / "a.cfg"), doctest::Contains("include cycle"), ConfigError);
}

TEST_CASE("config hash ignores layout but not values") {
  const ConfigTree a = ConfigTree::parse_string("seeds = 0,1, 2\n[mdp]\nlatent_dim = 4\n");
  const ConfigTree b = ConfigTree::parse_string("# same thing\nmdp.latent_dim=4\n\nseeds =0 , 1,2\n");
  const ConfigTree c = ConfigTree::parse_string("seeds = 0, 1, 3\nmdp.latent_dim = 4\n");
  CHECK(a.canonical() == b.canonical());
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(a.hash() == fnv1a64("mdp.latent_dim = 4\nseeds = 0, 1, 2\n"));
}

TEST_CASE("config errors point at the offending line") {
  CHECK(error_of("seeds = 1\nbogus_key = 3\n").find("bad.cfg:2: unknown key 'bogus_key'") != std::string::npos);
  CHECK(error_of("[mdp]\n\nlatent_dim = four\n").find("bad.cfg:3: key 'mdp.latent_dim'") != std::string::npos);
  CHECK(error_of("just words\n").find("bad.cfg:1: expected 'key = value'") != std::string::npos);
  CHECK(error_of("seeds = \n").find("bad.cfg:1") != std::string::npos);
  CHECK(error_of("objectives = ID, Telepathy\n").find("bad.cfg:1") != std::string::npos);
  CHECK(error_of("context.regime = in-distribution\n").find("discrete") != std::string::npos);
  CHECK(error_of("[mdp]\nlatent_dim = 0\n") != "");
  CHECK(error_of("context.kind = discrete\ncontext.regime = in-distribution, held-out\n") == "");
}

TEST_CASE("cell enumeration collapses axes an objective ignores") {
  const ExperimentConfig c = tiny("objectives = ID, BC\npretrain_sizes = 10, 20\nfinetune_sizes = 2\nseeds = 0, 1\n");
  CHECK(enumerate_cells(c).size() == 8);

  const ExperimentConfig d = tiny("objectives = ID, BC, Scratch, States\npretrain_sizes = 10, 20\nfinetune_sizes = 2\nseeds = 0\n"
                                  "step_gaps = 1, 3\n");
  // ID: 2 sizes x 2 gaps, BC: 2 sizes, Scratch and States: 1 each.
  CHECK(enumerate_cells(d).size() == 8);

  std::set<std::uint64_t> hashes;
  for (const Cell& cell : enumerate_cells(d)) hashes.insert(cell_hash(d, cell));
  CHECK(hashes.size() == 8);
}

TEST_CASE("base hash ignores the grid axes and output keys") {
  const ExperimentConfig a = tiny("seeds = 0\noutput = x\n");
  const ExperimentConfig b = tiny("seeds = 0, 1, 2\noutput = y\n");
  const ExperimentConfig c = tiny("seeds = 0\n[budget]\npretrain_steps = 21\n");
  CHECK(a.base_hash == b.base_hash);
  CHECK(a.config_hash != b.config_hash);
  CHECK(a.base_hash != c.base_hash);
  const Cell cell = enumerate_cells(a).front();
  CHECK(cell_hash(a, cell) == cell_hash(b, cell));
}

TEST_CASE("one cell gives one row and a rerun executes nothing") {
  TempDir dir("one");
  const ExperimentConfig c = tiny("objectives = ID\npretrain_sizes = 10\nfinetune_sizes = 1\nseeds = 0\n");
  RunOptions opt;
  opt.out = dir.path;
  const RunSummary s = run_experiment(c, opt);
  CHECK(s.executed == 1);
  CHECK(s.failed == 0);
  const auto lines = read_lines(s.store);
  REQUIRE(lines.size() == 3);
  CHECK(lines[0] == "# dynrep-metrics 1.0");
  CHECK(lines[1].rfind("cell_hash,config_hash,", 0) == 0);
  const auto recs = read_metrics(s.store);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0].ok());
  CHECK(recs[0].code_version == kCodeVersion);
  CHECK(recs[0].success_rate >= 0.0);
  CHECK(recs[0].success_rate <= 1.0);

  const RunSummary again = run_experiment(c, opt);
  CHECK(again.executed == 0);
  CHECK(again.skipped == 1);
  CHECK(read_lines(s.store).size() == 3);
}

TEST_CASE("a 2x2x2 grid gives 8 rows, reproducibly and independent of workers") {
  TempDir dir("grid");
  const ExperimentConfig c = tiny("objectives = ID, BC\npretrain_sizes = 10, 20\nfinetune_sizes = 1\nseeds = 0, 1\n");
  RunOptions one, again, two;
  one.out = dir.path / "a";
  again.out = dir.path / "b";
  two.out = dir.path / "c";
  two.workers = 2;
  const RunSummary sa = run_experiment(c, one);
  const RunSummary sb = run_experiment(c, again);
  const RunSummary sc = run_experiment(c, two);
  CHECK(sa.executed == 8);
  CHECK(read_lines(sa.store).size() == 10);
  CHECK(comparable_body(sa.store, false) == comparable_body(sb.store, false));
  CHECK(comparable_body(sa.store, true) == comparable_body(sc.store, true));
}

TEST_CASE("a failing cell is recorded and the run continues") {
  TempDir dir("fail");
  ExperimentConfig c = tiny("objectives = ID, States\npretrain_sizes = 10\nfinetune_sizes = 1\nseeds = 0\n");
  c.pretrain.steps = 0;  // bypasses validation; pretraining rejects it
  RunOptions opt;
  opt.out = dir.path;
  const RunSummary s = run_experiment(c, opt);
  CHECK(s.executed == 2);
  CHECK(s.failed == 1);
  const auto recs = read_metrics(s.store);
  REQUIRE(recs.size() == 2);
  CHECK(recs[0].status == "error");
  CHECK_FALSE(recs[0].message.empty());
  CHECK(recs[1].ok());
  // Failed cells are retried on resume.
  CHECK(run_experiment(c, opt).executed == 1);
}

TEST_CASE("seed offset changes results") {
  TempDir dir("offset");
  const ExperimentConfig c = tiny("objectives = States\nfinetune_sizes = 1\nseeds = 0\n[eval]\nepisodes = 40\n");
  RunOptions a, b;
  a.out = dir.path / "a";
  b.out = dir.path / "b";
  b.seed_offset = 1000;
  const auto ra = read_metrics(run_experiment(c, a).store);
  const auto rb = read_metrics(run_experiment(c, b).store);
  CHECK(ra[0].cell_hash == rb[0].cell_hash);
  CHECK(ra[0].finetune_train_mse != rb[0].finetune_train_mse);
}

TEST_CASE("output directory precedence") {
  ExperimentConfig c = tiny("output = from_config\n");
  RunOptions opt;
  ::unsetenv("DYNREP_OUT");
  CHECK(resolve_output(c, opt) == fs::path("from_config"));
  ::setenv("DYNREP_OUT", "from_env", 1);
  CHECK(resolve_output(c, opt) == fs::path("from_env"));
  opt.out = "from_flag";
  CHECK(resolve_output(c, opt) == fs::path("from_flag"));
  ::unsetenv("DYNREP_OUT");
}

TEST_CASE("metrics store rejects unknown major versions") {
  std::istringstream ok(metrics_version_line() + "\n" + "cell_hash\n");
  CHECK_THROWS_WITH_AS(read_metrics(ok), doctest::Contains("header"), Error);
  std::string header;
  for (std::size_t i = 0; i < metrics_columns().size(); ++i) header += (i ? "," : "") + metrics_columns()[i];
  std::istringstream future("# dynrep-metrics 2.0\n" + header + "\n");
  CHECK_THROWS_WITH_AS(read_metrics(future), doctest::Contains("major version 2"), Error);
  std::istringstream minor("# dynrep-metrics 1.7\n" + header + "\n");
  CHECK(read_metrics(minor).empty());
  std::istringstream bare(header + "\n");
  CHECK_THROWS_AS(read_metrics(bare), Error);
}

TEST_CASE("csv rows round trip, including quoted messages") {
  MetricsRecord r = record("env", Objective::fd_implicit, 100, 2, 3, 0.25);
  r.status = "error";
  r.message = "bad \"thing\", twice";
  std::ostringstream os;
  os << metrics_version_line() << "\n";
  for (std::size_t i = 0; i < metrics_columns().size(); ++i) os << (i ? "," : "") << metrics_columns()[i];
  os << "\n" << to_csv_row(r) << "\n";
  std::istringstream in(os.str());
  const auto back = read_metrics(in);
  REQUIRE(back.size() == 1);
  CHECK(back[0].message == r.message);
  CHECK(back[0].objective == Objective::fd_implicit);
  CHECK(std::isnan(back[0].alignment));
  CHECK(to_csv_row(back[0]) == to_csv_row(r));
}

TEST_CASE("mean and standard error") {
  const MeanSe m = mean_se({0.4, 0.6});
  CHECK(m.mean == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(m.std_error == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(mean_se({0.3}).std_error == 0.0);
  // Equal weight per environment, regardless of how many cells each has.
  const MeanSe agg = aggregate_environments({mean_se({0.2, 0.2, 0.2}), mean_se({0.6})});
  CHECK(agg.mean == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("sweep report: baselines are horizontal lines and gaps are listed") {
  std::vector<MetricsRecord> rs;
  for (std::uint64_t s = 0; s < 2; ++s) {
    rs.push_back(record("e1", Objective::id, 10, 2, s, 0.4 + 0.2 * s));
    rs.push_back(record("e1", Objective::id, 100, 2, s, 0.8));
    rs.push_back(record("e1", Objective::states, 0, 2, s, 0.9));
    rs.push_back(record("e1", Objective::id, 100, 1, s, 0.1));
  }
  rs.push_back(record("e1", Objective::bc, 10, 2, 0, 0.3));  // seed 1 and size 100 missing
  SweepOptions opt;
  opt.axis = SweepAxis::pretrain_size;
  const SweepReport r = sweep_report(rs, opt);
  CHECK(r.fixed_value == 2);
  CHECK(r.xs == std::vector<int>{10, 100});
  bool saw_states = false;
  for (const auto& p : r.points) {
    if (p.objective == Objective::states) {
      saw_states = true;
      CHECK(p.baseline);
      CHECK(p.x == 0);
      CHECK(p.value.mean == doctest::Approx(0.9));
    }
    if (p.objective == Objective::id && p.x == 10) {
      CHECK(p.value.mean == doctest::Approx(0.5).epsilon(1e-12));
      CHECK(p.value.std_error == doctest::Approx(0.1).epsilon(1e-12));
    }
  }
  CHECK(saw_states);
  CHECK(r.missing.size() == 3);

  TempDir dir("sweep");
  write_sweep_csv(r, dir.path / "s.csv");
  write_sweep_svg(r, dir.path / "s.svg");
  const auto csv = read_lines(dir.path / "s.csv");
  CHECK(csv.front() == "objective,pretrain_size,mean,std_error,n,environments,baseline");
  std::ifstream svg(dir.path / "s.svg");
  std::stringstream body;
  body << svg.rdbuf();
  CHECK(body.str().find(objective_color(Objective::id)) != std::string::npos);
  CHECK(body.str().find("stroke-dasharray") != std::string::npos);
  CHECK(std::string(objective_color(Objective::id)) == "#2ca02c");

  SweepOptions fin;
  const SweepReport f = sweep_report(rs, fin);
  CHECK(f.fixed_value == 100);
  CHECK(f.xs == std::vector<int>{1, 2});
}

TEST_CASE("sweep report averages environments with equal weight") {
  std::vector<MetricsRecord> rs;
  for (std::uint64_t s = 0; s < 3; ++s) rs.push_back(record("e1", Objective::id, 10, 2, s, 0.2));
  rs.push_back(record("e2", Objective::id, 10, 2, 0, 0.6));
  const SweepReport r = sweep_report(rs, {});
  REQUIRE(r.points.size() == 1);
  CHECK(r.points[0].environments == 2);
  CHECK(r.points[0].value.mean == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(r.missing.size() == 2);  // e2 seeds 1 and 2
}

TEST_CASE("regime report groups, filters and warns about empty groups") {
  std::vector<MetricsRecord> rs;
  for (std::uint64_t s = 0; s < 2; ++s) {
    rs.push_back(record("e1", Objective::id, 100, 2, s, 0.5));
    MetricsRecord in = record("e1", Objective::id, 100, 2, s, 0.9);
    in.regime = ContextRegime::in_distribution;
    in.cell_hash += "in";
    rs.push_back(in);
    MetricsRecord inf = record("e1", Objective::id, 100, 2, s, 0.1);
    inf.inferrable = true;
    inf.cell_hash += "inf";
    rs.push_back(inf);
  }
  const RegimeReport r = regime_report(rs);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.warnings.size() == 1);
  CHECK(r.warnings[0].find("inferrable/in-distribution") != std::string::npos);
  for (const auto& row : r.rows) {
    if (row.grouping == "latent" && row.regime == ContextRegime::held_out) CHECK(row.value.mean == doctest::Approx(0.5));
    if (row.grouping == "latent" && row.regime == ContextRegime::in_distribution)
      CHECK(row.value.mean == doctest::Approx(0.9));
    if (row.grouping == "inferrable") CHECK(row.value.mean == doctest::Approx(0.1));
  }
}

TEST_CASE("in-distribution pretraining keeps the finetuning context, held-out drops it") {
  TempDir dir("regime");
  const ExperimentConfig c =
      tiny("context.kind = discrete\ncontext.count = 3\ncontext.regime = held-out, in-distribution\n"
           "objectives = ID\npretrain_sizes = 12\nfinetune_sizes = 1\nseeds = 0\nsave_artifacts = true\n");
  RunOptions opt;
  opt.out = dir.path;
  const RunSummary s = run_experiment(c, opt);
  REQUIRE(s.failed == 0);
  std::vector<std::set<std::string>> tag_sets;
  for (const auto& e : fs::directory_iterator(dir.path / "artifacts")) {
    if (e.path().extension() != ".impd") continue;
    const DatasetHandle ds = load_dataset(e.path());
    std::set<std::string> tags;
    for (std::size_t i = 0; i < ds.size(); ++i) tags.insert(ds.privileged().context_tag(i));
    tag_sets.push_back(tags);
  }
  REQUIRE(tag_sets.size() == 2);
  std::sort(tag_sets.begin(), tag_sets.end(), [](auto& a, auto& b) { return a.size() < b.size(); });
  CHECK(tag_sets[0].size() == 2);
  CHECK(tag_sets[1].size() == 3);
}

TEST_CASE("theory report exit codes") {
  TempDir dir("theory");
  auto write = [&](const std::string& name, bool pass) {
    TheoryReport r;
    r.experiment = name;
    r.set_metric("x", pass ? 0.0 : 1.0);
    r.set_threshold("max:x", 0.5);
    judge(r);
    write_report(r, dir.path / (name + ".txt"), dir.path / (name + ".csv"));
  };
  write("id-recovery", true);
  write("bc-confounding", true);
  CHECK(theory_report(dir.path).exit_code == 2);
  write("fd-complexity", true);
  CHECK(theory_report(dir.path).exit_code == 0);
  write("bc-confounding", false);
  const TheoryVerdict v = theory_report(dir.path);
  CHECK(v.exit_code == 1);
  CHECK(v.text.find("bc-confounding: FAIL") != std::string::npos);

#ifdef DYNREP_CLI_PATH
  const std::string cli = DYNREP_CLI_PATH;
  CHECK(exit_status(cli + " report theory " + dir.path.string() + " > /dev/null") == 1);
  write("bc-confounding", true);
  CHECK(exit_status(cli + " report theory " + dir.path.string() + " > /dev/null") == 0);
  fs::remove(dir.path / "fd-complexity.txt");
  CHECK(exit_status(cli + " report theory " + dir.path.string() + " > /dev/null") == 2);
#endif
}

#ifdef DYNREP_CLI_PATH
TEST_CASE("command line run, resume and sweep") {
  TempDir dir("tool");
  write_file(dir.path / "base.cfg", kTinyBudget);
  write_file(dir.path / "exp.cfg",
             "include base.cfg\n[]\nobjectives = ID, States\npretrain_sizes = 10\nfinetune_sizes = 1, 2\nseeds = 0\n");
  const std::string cli = DYNREP_CLI_PATH;
  const std::string out = (dir.path / "out").string();
  CHECK(exit_status(cli + " run " + (dir.path / "exp.cfg").string() + " --out " + out + " 2> /dev/null > /dev/null") ==
        0);
  CHECK(read_lines(dir.path / "out" / "metrics.csv").size() == 6);
  CHECK(exit_status(cli + " run " + (dir.path / "exp.cfg").string() + " --out " + out + " 2> /dev/null > /dev/null") ==
        0);
  CHECK(read_lines(dir.path / "out" / "metrics.csv").size() == 6);
  CHECK(exit_status(cli + " report sweep " + out + " 2> /dev/null > /dev/null") == 0);
  CHECK(fs::exists(dir.path / "out" / "sweep_finetune_size.svg"));
  write_file(dir.path / "bad.cfg", "objectives = ID\nmystery = 1\n");
  CHECK(exit_status(cli + " run " + (dir.path / "bad.cfg").string() + " --out " + out + " 2> /dev/null") == 3);
}
#endif
