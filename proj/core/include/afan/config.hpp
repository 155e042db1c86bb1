#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "afan/dataset.hpp"
#include "afan/eval.hpp"
#include "afan/model.hpp"
#include "afan/trainer.hpp"

namespace afan {

// Flat key=value configuration with dotted section prefixes; '#' starts a
// comment line. Values keep their literal text; typed getters parse on
// demand and accept p/q fractions for numbers (e.g. 8/255).
class Config {
 public:
  static Config parse_text(const std::string& text, const std::string& origin = "<text>");
  static Config load_file(const std::string& path);

  void set(const std::string& key, const std::string& value);  // insert or overwrite
  bool has(const std::string& key) const;
  std::string get_str(const std::string& key, const std::string& def) const;
  double get_num(const std::string& key, double def) const;
  int64_t get_int(const std::string& key, int64_t def) const;
  bool get_bool(const std::string& key, bool def) const;
  std::vector<int64_t> get_int_list(const std::string& key, std::vector<int64_t> def) const;
  std::vector<std::string> get_str_list(const std::string& key,
                                        std::vector<std::string> def) const;

  std::string serialize() const;  // insertion order, key=value lines
  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

  static double parse_number(const std::string& key, const std::string& text);

 private:
  const std::string* find(const std::string& key) const;
  std::vector<std::pair<std::string, std::string>> entries_;
};

struct DataConfig {
  std::string kind = "blobs";  // blobs | spirals | shapes16 | csv | raw
  int64_t n = 512;
  double test_fraction = 0.25;
  double noise = 0.08;
  int64_t classes = 0;    // 0 = kind default
  std::string path;       // external train file (csv/raw kinds)
  std::string test_path;  // optional external test file
};

// Fully resolved experiment: every command consumes one of these. The master
// seed splits per concern (init, data, shuffle, noise, estimators) via
// derive_seed, so one sweep axis never perturbs another's randomness.
struct ExperimentConfig {
  uint64_t seed = 1;
  std::string out_root = "runs";  // config "out" > env AFAN_OUT > "runs"
  std::string run_name = "run";
  ModelSpec model;
  TrainConfig train;
  AttackConfig attack;
  DataConfig data;

  static ExperimentConfig resolve(const Config& c);  // unknown keys are errors

  std::string out_dir() const { return out_root + "/" + run_name; }
  // Canonical serialization of every effective value; embedded in artifacts.
  Config resolved() const;
  Dataset make_dataset() const;

  // Extra raw keys for command-specific knobs (ablate.*, eval.*, landscape.*).
  Config raw;
};

}  // namespace afan
