#pragma once

// Flat key-value experiment configs.
//
//   # comment
//   include base.cfg          (path relative to the including file)
//   [mdp]                     (prefix for the following keys: mdp.<key>)
//   latent_dim = 4
//   objectives = ID, BC, Scratch
//
// Later assignments override earlier ones, including those pulled in by an
// include. Every value remembers the file and line it came from so that
// validation errors can point at it.

#include "dynrep/env.hpp"
#include "dynrep/finetune.hpp"
#include "dynrep/pretrain.hpp"
#include "dynrep/probes.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace dynrep {

class ConfigError : public Error {
 public:
  ConfigError(const std::string& where, const std::string& what) : Error(where + ": " + what), where_(where) {}
  const std::string& where() const noexcept { return where_; }

 private:
  std::string where_;
};

struct ConfigValue {
  std::string text;
  std::string file;
  int line = 0;
  std::string where() const { return file + ":" + std::to_string(line); }
};

class ConfigTree {
 public:
  static ConfigTree parse_file(const std::filesystem::path& path);
  static ConfigTree parse_string(const std::string& text, const std::string& name = "<string>");

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const ConfigValue& at(const std::string& key) const;
  void set(const std::string& key, const std::string& value);
  const std::map<std::string, ConfigValue>& values() const { return values_; }

  /// Sorted "key = value" lines, list items normalised to "a, b".
  std::string canonical() const;
  std::uint64_t hash() const { return fnv1a64(canonical()); }

 private:
  void parse_into(const std::string& text, const std::string& name, const std::filesystem::path& base_dir,
                  std::vector<std::string>& stack);
  std::map<std::string, ConfigValue> values_;
};

std::vector<std::string> split_list(const std::string& s);

enum class ContextRegime { held_out, in_distribution };
const char* to_string(ContextRegime r);
ContextRegime parse_regime(const std::string& s);

struct ExperimentConfig {
  std::string name = "experiment";
  MdpSpec mdp;
  ContextKind context_kind = ContextKind::goal;
  int context_count = 10;  // discrete families
  std::vector<bool> inferrable{false};
  std::vector<ContextRegime> regimes{ContextRegime::held_out};
  std::vector<Objective> objectives = all_objectives();
  std::vector<int> pretrain_sizes{10, 100, 1000};
  std::vector<int> finetune_sizes{1, 2, 5, 10};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<int> step_gaps{1};

  PretrainConfig pretrain;  // objective, seed, gap and aug are set per cell
  AugSpec contrastive_aug = default_contrastive_aug();  // Cont pretraining and Scratch finetuning
  FinetuneConfig finetune;  // joint/aug are set per cell from the objective
  ProbeConfig probe;
  int probe_trajectories = 100;
  int alignment_samples = 1000;
  int eval_episodes = 100;

  std::filesystem::path output = "runs/experiment";
  bool save_artifacts = false;

  std::uint64_t config_hash = 0;  // over every key
  std::uint64_t base_hash = 0;    // over everything except the grid axes and output keys
  std::string base_canonical;

  static ExperimentConfig from_tree(const ConfigTree& tree);
  static ExperimentConfig load(const std::filesystem::path& path) { return from_tree(ConfigTree::parse_file(path)); }
  void validate() const;
};

}  // namespace dynrep
