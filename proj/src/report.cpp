#include "dynrep/report.hpp"

#include "dynrep/theory.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace dynrep {

namespace {

std::string num(double v, int digits = 6) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

bool gap_matches(const MetricsRecord& r, int gap) { return r.step_gap == (uses_step_gap(r.objective) ? gap : 1); }

int default_pretrain(const std::vector<MetricsRecord>& rs) {
  int best = 0;
  for (const auto& r : rs) best = std::max(best, r.pretrain_size);
  return best;
}

int default_finetune(const std::vector<MetricsRecord>& rs) {
  std::set<int> sizes;
  for (const auto& r : rs) sizes.insert(r.finetune_size);
  if (sizes.empty()) return 0;
  return sizes.count(2) ? 2 : *sizes.begin();
}

// env -> values over seeds, then the equal-weight aggregate.
MeanSe collapse(const std::map<std::string, std::vector<double>>& by_env, std::size_t* envs = nullptr) {
  std::vector<MeanSe> per_env;
  for (const auto& [env, v] : by_env) per_env.push_back(mean_se(v));
  if (envs) *envs = per_env.size();
  return aggregate_environments(per_env);
}

std::vector<Objective> objectives_in(const std::vector<MetricsRecord>& rs) {
  std::set<Objective> s;
  for (const auto& r : rs) s.insert(r.objective);
  return {s.begin(), s.end()};
}

const char* svg_header(std::ostream& os, int w, int h) {
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" viewBox=\"0 0 " << w
     << " " << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return "</svg>\n";
}

void y_axis(std::ostream& os, double left, double top, double bottom, double right) {
  for (int t = 0; t <= 4; ++t) {
    const double v = t / 4.0;
    const double y = bottom - v * (bottom - top);
    os << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << right << "\" y2=\"" << y
       << "\" stroke=\"#dddddd\"/>\n";
    os << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << num(v, 3) << "</text>\n";
  }
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  os << "<text x=\"16\" y=\"" << (top + bottom) / 2 << "\" transform=\"rotate(-90 16 " << (top + bottom) / 2
     << ")\" text-anchor=\"middle\">success rate</text>\n";
}

}  // namespace

MeanSe mean_se(const std::vector<double>& values) {
  MeanSe m;
  m.n = values.size();
  if (values.empty()) return m;
  double sum = 0.0;
  for (double v : values) sum += v;
  m.mean = sum / static_cast<double>(m.n);
  if (m.n == 1) {
    m.std_error = 0.0;
    return m;
  }
  double ss = 0.0;
  for (double v : values) ss += (v - m.mean) * (v - m.mean);
  m.std_error = std::sqrt(ss / static_cast<double>(m.n - 1)) / std::sqrt(static_cast<double>(m.n));
  return m;
}

MeanSe aggregate_environments(const std::vector<MeanSe>& per_env) {
  MeanSe out;
  if (per_env.empty()) return out;
  if (per_env.size() == 1) return per_env.front();
  double sum = 0.0, var = 0.0;
  for (const auto& e : per_env) {
    sum += e.mean;
    var += e.std_error * e.std_error;
    out.n += e.n;
  }
  const double k = static_cast<double>(per_env.size());
  out.mean = sum / k;
  out.std_error = std::sqrt(var) / k;
  return out;
}

const char* to_string(SweepAxis a) { return a == SweepAxis::finetune_size ? "finetune_size" : "pretrain_size"; }

SweepAxis parse_sweep_axis(const std::string& s) {
  if (s == "finetune_size" || s == "finetune") return SweepAxis::finetune_size;
  if (s == "pretrain_size" || s == "pretrain") return SweepAxis::pretrain_size;
  throw Error("unknown sweep axis '" + s + "' (expected finetune_size or pretrain_size)");
}

const char* objective_color(Objective o) {
  switch (o) {
    case Objective::id: return "#2ca02c";
    case Objective::bc: return "#1f77b4";
    case Objective::fd_explicit: return "#ff7f0e";
    case Objective::fd_implicit: return "#9467bd";
    case Objective::contrastive: return "#8c564b";
    case Objective::scratch: return "#7f7f7f";
    case Objective::states: return "#000000";
  }
  return "#000000";
}

SweepReport sweep_report(const std::vector<MetricsRecord>& records, const SweepOptions& options) {
  SweepReport rep;
  rep.axis = options.axis;
  std::vector<MetricsRecord> rs;
  for (const auto& r : records)
    if (r.ok() && r.inferrable == options.inferrable && r.regime == options.regime && gap_matches(r, options.step_gap))
      rs.push_back(r);
  if (rs.empty()) {
    rep.warnings.push_back("no completed records match the selected regime");
    return rep;
  }

  const bool by_finetune = options.axis == SweepAxis::finetune_size;
  const int fixed = by_finetune ? options.fixed_pretrain.value_or(default_pretrain(rs))
                                : options.fixed_finetune.value_or(default_finetune(rs));
  rep.fixed_value = fixed;

  std::set<int> xs;
  std::set<std::string> envs;
  std::set<std::uint64_t> seeds;
  for (const auto& r : rs) {
    envs.insert(r.env);
    seeds.insert(r.seed);
    if (by_finetune) xs.insert(r.finetune_size);
    else if (uses_pretraining(r.objective)) xs.insert(r.pretrain_size);
  }
  rep.xs.assign(xs.begin(), xs.end());

  for (Objective obj : objectives_in(rs)) {
    const bool baseline = !by_finetune && !uses_pretraining(obj);
    const std::vector<int> obj_xs = baseline ? std::vector<int>{0} : rep.xs;
    for (int x : obj_xs) {
      std::map<std::string, std::vector<double>> by_env;
      std::set<std::pair<std::string, std::uint64_t>> have;
      for (const auto& r : rs) {
        if (r.objective != obj) continue;
        const bool match = by_finetune
                               ? r.finetune_size == x && (!uses_pretraining(obj) || r.pretrain_size == fixed)
                               : r.finetune_size == fixed && r.pretrain_size == x;
        if (!match) continue;
        by_env[r.env].push_back(r.success_rate);
        have.insert({r.env, r.seed});
      }
      for (const auto& env : envs)
        for (std::uint64_t s : seeds)
          if (!have.count({env, s}))
            rep.missing.push_back(std::string(to_string(obj)) + " " + (by_finetune ? "finetune_size" : "pretrain_size") +
                                  "=" + std::to_string(x) + " seed=" + std::to_string(s) + " env=" + env);
      if (by_env.empty()) continue;
      SweepPoint p;
      p.objective = obj;
      p.x = x;
      p.baseline = baseline;
      p.value = collapse(by_env, &p.environments);
      rep.points.push_back(p);
    }
  }
  return rep;
}

RegimeReport regime_report(const std::vector<MetricsRecord>& records) {
  RegimeReport rep;
  std::vector<MetricsRecord> rs;
  for (const auto& r : records)
    if (r.ok() && gap_matches(r, 1)) rs.push_back(r);
  rep.pretrain_size = default_pretrain(rs);
  rep.finetune_size = default_finetune(rs);

  for (bool inf : {false, true})
    for (ContextRegime regime : {ContextRegime::held_out, ContextRegime::in_distribution}) {
      const std::string grouping = inf ? "inferrable" : "latent";
      std::vector<MetricsRecord> group;
      for (const auto& r : rs)
        if (r.inferrable == inf && r.regime == regime && r.finetune_size == rep.finetune_size &&
            (!uses_pretraining(r.objective) || r.pretrain_size == rep.pretrain_size))
          group.push_back(r);
      if (group.empty()) {
        rep.warnings.push_back("group " + grouping + "/" + to_string(regime) + " has no records; omitted");
        continue;
      }
      for (Objective obj : objectives_in(group)) {
        std::map<std::string, std::vector<double>> by_env;
        for (const auto& r : group)
          if (r.objective == obj) by_env[r.env].push_back(r.success_rate);
        rep.rows.push_back(RegimeRow{grouping, regime, obj, collapse(by_env)});
      }
    }
  return rep;
}

void write_sweep_csv(const SweepReport& r, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "objective," << to_string(r.axis) << ",mean,std_error,n,environments,baseline\n";
  for (const auto& p : r.points)
    out << to_string(p.objective) << "," << p.x << "," << num(p.value.mean, 10) << "," << num(p.value.std_error, 10)
        << "," << p.value.n << "," << p.environments << "," << (p.baseline ? "true" : "false") << "\n";
}

void write_sweep_svg(const SweepReport& r, const std::filesystem::path& path) {
  auto out = open_out(path);
  const int w = 720, h = 440;
  const double left = 60, right = 560, top = 30, bottom = 380;
  const char* close = svg_header(out, w, h);
  y_axis(out, left, top, bottom, right);
  const std::size_t nx = std::max<std::size_t>(r.xs.size(), 1);
  auto xpos = [&](int x) {
    const auto it = std::find(r.xs.begin(), r.xs.end(), x);
    const double i = static_cast<double>(it - r.xs.begin());
    return nx == 1 ? (left + right) / 2 : left + 30 + i * (right - left - 60) / static_cast<double>(nx - 1);
  };
  auto ypos = [&](double v) { return bottom - std::clamp(v, 0.0, 1.0) * (bottom - top); };
  for (int x : r.xs)
    out << "<text x=\"" << xpos(x) << "\" y=\"" << bottom + 18 << "\" text-anchor=\"middle\">" << x << "</text>\n";
  out << "<text x=\"" << (left + right) / 2 << "\" y=\"" << bottom + 40 << "\" text-anchor=\"middle\">"
      << (r.axis == SweepAxis::finetune_size ? "finetuning trajectories" : "pretraining trajectories") << " (fixed "
      << (r.axis == SweepAxis::finetune_size ? "pretraining" : "finetuning") << " = " << r.fixed_value
      << ")</text>\n";

  std::map<Objective, std::vector<SweepPoint>> lines;
  for (const auto& p : r.points) lines[p.objective].push_back(p);
  int legend = 0;
  for (const auto& [obj, pts] : lines) {
    const char* color = objective_color(obj);
    if (pts.front().baseline) {
      const double y = ypos(pts.front().value.mean);
      out << "<line x1=\"" << left << "\" y1=\"" << y << "\" x2=\"" << right << "\" y2=\"" << y << "\" stroke=\""
          << color << "\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n";
    } else {
      out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : pts) out << xpos(p.x) << "," << ypos(p.value.mean) << " ";
      out << "\"/>\n";
      for (const auto& p : pts) {
        const double x = xpos(p.x);
        const double se = std::isnan(p.value.std_error) ? 0.0 : p.value.std_error;
        out << "<line x1=\"" << x << "\" y1=\"" << ypos(p.value.mean - se) << "\" x2=\"" << x << "\" y2=\""
            << ypos(p.value.mean + se) << "\" stroke=\"" << color << "\"/>\n";
        out << "<circle cx=\"" << x << "\" cy=\"" << ypos(p.value.mean) << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
      }
    }
    const double ly = top + 10 + 20 * legend++;
    out << "<line x1=\"580\" y1=\"" << ly << "\" x2=\"605\" y2=\"" << ly << "\" stroke=\"" << color
        << "\" stroke-width=\"2\"" << (pts.front().baseline ? " stroke-dasharray=\"6 4\"" : "") << "/>\n";
    out << "<text x=\"612\" y=\"" << ly + 4 << "\">" << to_string(obj) << "</text>\n";
  }
  out << close;
}

void write_regime_csv(const RegimeReport& r, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "grouping,regime,objective,mean,std_error,n\n";
  for (const auto& row : r.rows)
    out << row.grouping << "," << to_string(row.regime) << "," << to_string(row.objective) << ","
        << num(row.value.mean, 10) << "," << num(row.value.std_error, 10) << "," << row.value.n << "\n";
}

void write_regime_svg(const RegimeReport& r, const std::filesystem::path& path) {
  auto out = open_out(path);
  std::vector<std::string> groups;
  std::set<Objective> objs;
  for (const auto& row : r.rows) {
    const std::string g = row.grouping + " / " + to_string(row.regime);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    objs.insert(row.objective);
  }
  const int w = 760, h = 440;
  const double left = 60, right = 600, top = 30, bottom = 380;
  const char* close = svg_header(out, w, h);
  y_axis(out, left, top, bottom, right);
  const double gw = (right - left) / static_cast<double>(std::max<std::size_t>(groups.size(), 1));
  const double bw = (gw - 20) / static_cast<double>(std::max<std::size_t>(objs.size(), 1));
  auto ypos = [&](double v) { return bottom - std::clamp(v, 0.0, 1.0) * (bottom - top); };
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const double gx = left + g * gw + 10;
    out << "<text x=\"" << gx + (gw - 20) / 2 << "\" y=\"" << bottom + 18 << "\" text-anchor=\"middle\">" << groups[g]
        << "</text>\n";
    std::size_t j = 0;
    for (Objective obj : objs) {
      for (const auto& row : r.rows) {
        if (row.objective != obj || row.grouping + " / " + to_string(row.regime) != groups[g]) continue;
        const double x = gx + j * bw;
        const double y = ypos(row.value.mean);
        out << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << bw - 2 << "\" height=\"" << bottom - y
            << "\" fill=\"" << objective_color(obj) << "\"/>\n";
        const double se = std::isnan(row.value.std_error) ? 0.0 : row.value.std_error;
        const double cx = x + (bw - 2) / 2;
        out << "<line x1=\"" << cx << "\" y1=\"" << ypos(row.value.mean - se) << "\" x2=\"" << cx << "\" y2=\""
            << ypos(row.value.mean + se) << "\" stroke=\"black\"/>\n";
      }
      ++j;
    }
  }
  int legend = 0;
  for (Objective obj : objs) {
    const double ly = top + 10 + 20 * legend++;
    out << "<rect x=\"615\" y=\"" << ly - 6 << "\" width=\"14\" height=\"12\" fill=\"" << objective_color(obj)
        << "\"/>\n<text x=\"636\" y=\"" << ly + 4 << "\">" << to_string(obj) << "</text>\n";
  }
  out << close;
}

TheoryVerdict theory_report(const std::filesystem::path& dir) {
  TheoryVerdict v;
  std::ostringstream os;
  bool missing = false, failed = false;
  for (const auto& name : theory_experiments()) {
    const auto path = dir / (name + ".txt");
    if (!std::filesystem::exists(path)) {
      os << name << ": MISSING (" << path.string() << ")\n";
      missing = true;
      continue;
    }
    TheoryReport rep;
    try {
      rep = read_report(path);
    } catch (const std::exception& e) {
      os << name << ": UNREADABLE (" << e.what() << ")\n";
      missing = true;
      continue;
    }
    os << name << ": " << (rep.pass ? "PASS" : "FAIL");
    if (!rep.pass) {
      failed = true;
      os << " (failed:";
      for (const auto& f : rep.failures) os << " " << f;
      os << ")";
    }
    os << "\n";
  }
  v.exit_code = missing ? 2 : failed ? 1 : 0;
  v.text = os.str();
  return v;
}

}  // namespace dynrep
