#include "dynrep/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace dynrep {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
  if (k.empty()) return false;
  return std::all_of(k.begin(), k.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-';
  });
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError(p.string(), "cannot open config file");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, ',')) out.push_back(trim(item));
  if (!s.empty() && s.back() == ',') out.emplace_back();
  return out;
}

const ConfigValue& ConfigTree::at(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("<config>", "missing key '" + key + "'");
  return it->second;
}

void ConfigTree::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw ConfigError("<override>", "invalid key '" + key + "'");
  values_[key] = ConfigValue{trim(value), "<override>", 0};
}

ConfigTree ConfigTree::parse_file(const std::filesystem::path& path) {
  ConfigTree t;
  std::vector<std::string> stack;
  const auto abs = std::filesystem::absolute(path).lexically_normal();
  stack.push_back(abs.string());
  t.parse_into(read_text(abs), path.string(), abs.parent_path(), stack);
  return t;
}

ConfigTree ConfigTree::parse_string(const std::string& text, const std::string& name) {
  ConfigTree t;
  std::vector<std::string> stack;
  t.parse_into(text, name, std::filesystem::current_path(), stack);
  return t;
}

void ConfigTree::parse_into(const std::string& text, const std::string& name, const std::filesystem::path& base_dir,
                            std::vector<std::string>& stack) {
  std::istringstream in(text);
  std::string raw;
  std::string prefix;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string where = name + ":" + std::to_string(line);
    std::string s = raw;
    if (const auto hash = s.find('#'); hash != std::string::npos) s.erase(hash);
    s = trim(s);
    if (s.empty()) continue;

    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(where, "unterminated section header");
      prefix = trim(s.substr(1, s.size() - 2));
      if (!prefix.empty() && !valid_key(prefix)) throw ConfigError(where, "invalid section name '" + prefix + "'");
      continue;
    }

    std::string key, value;
    const auto eq = s.find('=');
    if (s.rfind("include", 0) == 0 && (s.size() == 7 || std::isspace(static_cast<unsigned char>(s[7])) || s[7] == '=')) {
      std::string rest = trim(s.substr(7));
      if (!rest.empty() && rest.front() == '=') rest = trim(rest.substr(1));
      if (rest.size() >= 2 && rest.front() == '"' && rest.back() == '"') rest = rest.substr(1, rest.size() - 2);
      if (rest.empty()) throw ConfigError(where, "include needs a path");
      const auto target = (base_dir / rest).lexically_normal();
      const auto key_path = std::filesystem::absolute(target).lexically_normal().string();
      if (std::find(stack.begin(), stack.end(), key_path) != stack.end())
        throw ConfigError(where, "include cycle through " + rest);
      std::string body;
      try {
        body = read_text(target);
      } catch (const ConfigError&) {
        throw ConfigError(where, "cannot open included file " + target.string());
      }
      stack.push_back(key_path);
      parse_into(body, target.string(), target.parent_path(), stack);
      stack.pop_back();
      continue;
    }
    if (eq == std::string::npos) throw ConfigError(where, "expected 'key = value'");
    key = trim(s.substr(0, eq));
    value = trim(s.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where, "invalid key '" + key + "'");
    if (!prefix.empty()) key = prefix + "." + key;
    values_[key] = ConfigValue{value, name, line};
  }
}

std::string ConfigTree::canonical() const {
  std::ostringstream os;
  for (const auto& [k, v] : values_) {
    os << k << " = ";
    const auto items = split_list(v.text);
    for (std::size_t i = 0; i < items.size(); ++i) os << (i ? ", " : "") << items[i];
    os << '\n';
  }
  return os.str();
}

const char* to_string(ContextRegime r) { return r == ContextRegime::held_out ? "held-out" : "in-distribution"; }

ContextRegime parse_regime(const std::string& s) {
  if (s == "held-out") return ContextRegime::held_out;
  if (s == "in-distribution") return ContextRegime::in_distribution;
  throw Error("unknown context regime '" + s + "' (expected held-out or in-distribution)");
}

// ---------------------------------------------------------------- typed view

namespace {

class Reader {
 public:
  explicit Reader(const ConfigTree& t) : tree_(t) {}

  bool present(const std::string& key) {
    used_.insert(key);
    return tree_.has(key);
  }

  template <class F>
  auto convert(const std::string& key, F&& f) {
    const ConfigValue& v = tree_.at(key);
    try {
      return f(v.text);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(v.where(), "key '" + key + "': " + e.what());
    }
  }

  void integer(const std::string& key, int& out) {
    if (present(key)) out = convert(key, [](const std::string& s) { return parse_int(s); });
  }
  void integer(const std::string& key, long& out) {
    if (present(key)) out = convert(key, [](const std::string& s) { return static_cast<long>(parse_int(s)); });
  }
  void real(const std::string& key, double& out) {
    if (present(key)) out = convert(key, [](const std::string& s) { return parse_real(s); });
  }
  void boolean(const std::string& key, bool& out) {
    if (present(key)) out = convert(key, [](const std::string& s) { return parse_bool(s); });
  }
  void text(const std::string& key, std::string& out) {
    if (present(key)) out = tree_.at(key).text;
  }
  template <class T, class F>
  void list(const std::string& key, std::vector<T>& out, F&& one) {
    if (!present(key)) return;
    out = convert(key, [&](const std::string& s) {
      std::vector<T> v;
      for (const auto& item : split_list(s)) {
        if (item.empty()) throw Error("empty list item");
        v.push_back(one(item));
      }
      if (v.empty()) throw Error("list must not be empty");
      return v;
    });
  }

  void reject_unknown() const {
    for (const auto& [k, v] : tree_.values())
      if (!used_.count(k)) throw ConfigError(v.where(), "unknown key '" + k + "'");
  }

  static long long parse_int(const std::string& s) {
    long long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw Error("expected an integer, got '" + s + "'");
    return v;
  }
  static double parse_real(const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) throw Error("expected a number, got '" + s + "'");
    return v;
  }
  static bool parse_bool(const std::string& s) {
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    throw Error("expected true or false, got '" + s + "'");
  }

 private:
  const ConfigTree& tree_;
  std::set<std::string> used_;
};

const std::set<std::string> kGridKeys{"context.inferrable", "context.regime", "objectives", "pretrain_sizes",
                                      "finetune_sizes",     "seeds",          "step_gaps"};
const std::set<std::string> kOutputKeys{"output", "save_artifacts"};

}  // namespace

ExperimentConfig ExperimentConfig::from_tree(const ConfigTree& tree) {
  ExperimentConfig c;
  Reader r(tree);
  r.text("name", c.name);
  c.output = "runs/" + c.name;

  r.integer("mdp.latent_dim", c.mdp.latent_dim);
  r.integer("mdp.obs_dim", c.mdp.obs_dim);
  r.integer("mdp.action_dim", c.mdp.action_dim);
  if (r.present("mdp.lift")) c.mdp.lift = r.convert("mdp.lift", [](const std::string& s) { return parse_lift_kind(s); });
  r.real("mdp.omega", c.mdp.omega);
  r.real("mdp.noise_std", c.mdp.noise_std);
  r.real("mdp.arena_radius", c.mdp.arena_radius);
  r.integer("mdp.horizon", c.mdp.horizon);
  r.real("mdp.spectral_radius", c.mdp.spectral_radius);
  r.real("mdp.condition_bound", c.mdp.condition_bound);

  if (r.present("context.kind"))
    c.context_kind = r.convert("context.kind", [](const std::string& s) { return parse_context_kind(s); });
  r.integer("context.count", c.context_count);
  r.list("context.inferrable", c.inferrable, [](const std::string& s) { return Reader::parse_bool(s); });
  r.list("context.regime", c.regimes, [](const std::string& s) { return parse_regime(s); });

  r.list("objectives", c.objectives, [](const std::string& s) { return parse_objective(s); });
  r.list("pretrain_sizes", c.pretrain_sizes, [](const std::string& s) { return static_cast<int>(Reader::parse_int(s)); });
  r.list("finetune_sizes", c.finetune_sizes, [](const std::string& s) { return static_cast<int>(Reader::parse_int(s)); });
  r.list("seeds", c.seeds, [](const std::string& s) {
    const long long v = Reader::parse_int(s);
    if (v < 0) throw Error("seeds must be >= 0");
    return static_cast<std::uint64_t>(v);
  });
  r.list("step_gaps", c.step_gaps, [](const std::string& s) { return static_cast<int>(Reader::parse_int(s)); });

  r.integer("budget.pretrain_steps", c.pretrain.steps);
  r.integer("budget.batch_size", c.pretrain.batch_size);
  r.integer("budget.finetune_steps", c.finetune.steps);
  r.integer("budget.finetune_batch_size", c.finetune.batch_size);
  r.integer("budget.probe_steps", c.probe.steps);
  r.integer("budget.probe_trajectories", c.probe_trajectories);
  r.integer("budget.alignment_samples", c.alignment_samples);
  r.real("budget.learning_rate", c.pretrain.adam.learning_rate);
  c.finetune.adam.learning_rate = c.pretrain.adam.learning_rate;
  c.probe.adam.learning_rate = c.pretrain.adam.learning_rate;

  std::vector<int> hidden = c.pretrain.arch.hidden;
  r.list("arch.hidden", hidden, [](const std::string& s) { return static_cast<int>(Reader::parse_int(s)); });
  c.pretrain.arch.hidden = hidden;
  std::vector<int> head = c.pretrain.arch.head_hidden;
  r.list("arch.head_hidden", head, [](const std::string& s) { return static_cast<int>(Reader::parse_int(s)); });
  c.pretrain.arch.head_hidden = head;
  c.finetune.hidden = head;
  c.probe.hidden = head;
  r.integer("arch.embedding_dim", c.pretrain.arch.embedding_dim);
  r.real("aug.noise_std", c.contrastive_aug.noise_std);
  r.real("aug.mask_fraction", c.contrastive_aug.mask_fraction);

  r.integer("eval.episodes", c.eval_episodes);
  if (r.present("output")) c.output = tree.at("output").text;
  r.boolean("save_artifacts", c.save_artifacts);
  r.reject_unknown();

  c.config_hash = tree.hash();
  ConfigTree base;
  for (const auto& [k, v] : tree.values())
    if (!kGridKeys.count(k) && !kOutputKeys.count(k)) base.set(k, v.text);
  c.base_canonical = base.canonical();
  c.base_hash = base.hash();

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("config", e.what());
  }
  return c;
}

void ExperimentConfig::validate() const {
  mdp.validate();
  if (context_kind == ContextKind::rotation) throw Error("rotation contexts are only used by the theory checks");
  if (context_kind == ContextKind::discrete && context_count < 2)
    throw Error("discrete contexts need context.count >= 2");
  for (ContextRegime r : regimes)
    if (r == ContextRegime::in_distribution && context_kind != ContextKind::discrete)
      throw Error("the in-distribution regime needs discrete contexts");
  for (int n : pretrain_sizes)
    if (n < 1) throw Error("pretrain sizes must be >= 1");
  for (int n : finetune_sizes)
    if (n < 1) throw Error("finetune sizes must be >= 1");
  for (int g : step_gaps)
    if (g < 1 || g > mdp.horizon) throw Error("step gaps must lie in [1, horizon]");
  if (pretrain.steps < 1) throw Error("budget.pretrain_steps must be >= 1");
  if (finetune.steps < 0) throw Error("budget.finetune_steps must be >= 0");
  if (probe.steps < 0) throw Error("budget.probe_steps must be >= 0");
  if (eval_episodes < 1) throw Error("eval.episodes must be >= 1");
  if (alignment_samples < 10 * mdp.latent_dim) throw Error("budget.alignment_samples must be >= 10 * latent_dim");
  if (probe_trajectories < 10) throw Error("budget.probe_trajectories must be >= 10 for a validation split");
  contrastive_aug.validate();
  if (!contrastive_aug.active()) throw Error("aug: Cont needs noise_std or mask_fraction > 0");
}

}  // namespace dynrep
