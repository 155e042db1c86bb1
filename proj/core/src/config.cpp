#include "afan/config.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "afan/error.hpp"
#include "afan/rng.hpp"

namespace afan {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_plain_number(const std::string& key, const std::string& text) {
  try {
    size_t pos = 0;
    const double v = std::stod(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw DomainError("config: invalid number for " + key + ": '" + text + "'");
  }
}

}  // namespace

Config Config::parse_text(const std::string& text, const std::string& origin) {
  Config c;
  std::stringstream ss(text);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("config: " + origin + " line " + std::to_string(line_no) +
                      ": expected key=value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty())
      throw DataError("config: " + origin + " line " + std::to_string(line_no) + ": empty key");
    c.set(key, trim(line.substr(eq + 1)));
  }
  return c;
}

Config Config::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("config: cannot open '" + path + "'");
  std::stringstream buf;
  buf << is.rdbuf();
  return parse_text(buf.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  for (auto& [k, v] : entries_)
    if (k == key) {
      v = value;
      return;
    }
  entries_.emplace_back(key, value);
}

const std::string* Config::find(const std::string& key) const {
  for (const auto& [k, v] : entries_)
    if (k == key) return &v;
  return nullptr;
}

bool Config::has(const std::string& key) const { return find(key) != nullptr; }

std::string Config::get_str(const std::string& key, const std::string& def) const {
  const std::string* v = find(key);
  return v ? *v : def;
}

double Config::parse_number(const std::string& key, const std::string& text) {
  const size_t slash = text.find('/');
  if (slash != std::string::npos) {
    const double num = parse_plain_number(key, trim(text.substr(0, slash)));
    const double den = parse_plain_number(key, trim(text.substr(slash + 1)));
    if (den == 0.0) throw DomainError("config: zero denominator for " + key + ": '" + text + "'");
    return num / den;
  }
  return parse_plain_number(key, text);
}

double Config::get_num(const std::string& key, double def) const {
  const std::string* v = find(key);
  return v ? parse_number(key, *v) : def;
}

int64_t Config::get_int(const std::string& key, int64_t def) const {
  const std::string* v = find(key);
  if (!v) return def;
  try {
    size_t pos = 0;
    const int64_t r = std::stoll(*v, &pos);
    if (pos != v->size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw DomainError("config: invalid integer for " + key + ": '" + *v + "'");
  }
}

bool Config::get_bool(const std::string& key, bool def) const {
  const std::string* v = find(key);
  if (!v) return def;
  if (*v == "1" || *v == "true" || *v == "on" || *v == "yes") return true;
  if (*v == "0" || *v == "false" || *v == "off" || *v == "no") return false;
  throw DomainError("config: invalid boolean for " + key + ": '" + *v + "'");
}

std::vector<int64_t> Config::get_int_list(const std::string& key, std::vector<int64_t> def) const {
  const std::string* v = find(key);
  if (!v) return def;
  std::vector<int64_t> out;
  std::stringstream ss(*v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    try {
      size_t pos = 0;
      out.push_back(std::stoll(item, &pos));
      if (pos != item.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DomainError("config: invalid integer list for " + key + ": '" + *v + "'");
    }
  }
  return out;
}

std::vector<std::string> Config::get_str_list(const std::string& key,
                                              std::vector<std::string> def) const {
  const std::string* v = find(key);
  if (!v) return def;
  std::vector<std::string> out;
  std::stringstream ss(*v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::string Config::serialize() const {
  std::ostringstream os;
  for (const auto& [k, v] : entries_) os << k << "=" << v << "\n";
  return os.str();
}

// --------------------------------------------------------------------------
// ExperimentConfig
// --------------------------------------------------------------------------

namespace {

const char* kKnownKeys[] = {
    "seed", "out", "run.name",
    "model.arch", "model.hidden", "model.channels", "model.input_dim", "model.input_channels",
    "model.input_height", "model.input_width", "model.classes", "model.split",
    "data.kind", "data.n", "data.test_fraction", "data.noise", "data.classes", "data.path",
    "data.test_path",
    "train.epochs", "train.batch", "train.lr", "train.milestones", "train.decay", "train.warmup",
    "train.momentum", "train.weight_decay", "train.val_fraction",
    "afan.on", "afan.afn", "afan.steps", "afan.alpha_max", "afan.epsilon", "afan.k",
    "afan.schedule", "afan.lambda", "afan.noise_mode", "afan.interpolate",
    "attack.steps", "attack.alpha", "attack.epsilon",
    "ablate.variants", "ablate.seeds", "ablate.spectral", "ablate.robust",
    "eval.checkpoint", "eval.sweep", "eval.flatness", "eval.batch", "eval.spectral_iters",
    "eval.trace_probes",
    "landscape.checkpoints", "landscape.grid", "landscape.span", "landscape.batch",
    "gen.format", "gen.prefix",
    "dump.checkpoint", "dump.samples",
};

}  // namespace

ExperimentConfig ExperimentConfig::resolve(const Config& c) {
  for (const auto& [key, value] : c.entries()) {
    bool known = false;
    for (const char* k : kKnownKeys)
      if (key == k) known = true;
    if (!known) throw DomainError("config: unknown key '" + key + "'");
  }

  ExperimentConfig e;
  e.seed = static_cast<uint64_t>(c.get_int("seed", 1));
  const char* env_out = std::getenv("AFAN_OUT");
  e.out_root = c.get_str("out", env_out ? env_out : "runs");
  e.run_name = c.get_str("run.name", "run");

  e.model.arch = c.get_str("model.arch", "mlp");
  e.model.hidden = c.get_int_list("model.hidden", {32, 32});
  e.model.channels = c.get_int_list("model.channels", {8, 16, 32});
  e.model.input_dim = c.get_int("model.input_dim", 2);
  e.model.input_channels = c.get_int("model.input_channels", 1);
  e.model.input_height = c.get_int("model.input_height", 16);
  e.model.input_width = c.get_int("model.input_width", 16);
  e.model.classes = c.get_int("model.classes", 2);
  e.model.split = c.get_str("model.split", "");
  e.model.validate();

  e.data.kind = c.get_str("data.kind", "blobs");
  e.data.n = c.get_int("data.n", 512);
  e.data.test_fraction = c.get_num("data.test_fraction", 0.25);
  e.data.noise = c.get_num("data.noise", 0.08);
  e.data.classes = c.get_int("data.classes", 0);
  e.data.path = c.get_str("data.path", "");
  e.data.test_path = c.get_str("data.test_path", "");

  e.train.epochs = c.get_int("train.epochs", 20);
  e.train.batch_size = c.get_int("train.batch", 32);
  e.train.lr0 = c.get_num("train.lr", 0.1);
  e.train.milestone_epochs = c.get_int_list("train.milestones", {});
  e.train.decay_factor = c.get_num("train.decay", 0.1);
  e.train.warmup_iters = c.get_int("train.warmup", 200);
  e.train.momentum = c.get_num("train.momentum", 0.9);
  e.train.weight_decay = c.get_num("train.weight_decay", 5e-4);
  e.train.val_fraction = c.get_num("train.val_fraction", 0.1);
  e.train.seed = e.seed;

  e.train.afa_on = c.get_bool("afan.on", true);
  e.train.afn_on = c.get_bool("afan.afn", true);
  e.train.perturb.steps = static_cast<int>(c.get_int("afan.steps", 1));
  e.train.perturb.alpha_max = c.get_num("afan.alpha_max", 0.5 / 255.0);
  e.train.perturb.epsilon = c.get_num("afan.epsilon", 8.0 / 255.0);
  e.train.perturb.k = static_cast<int>(c.get_int("afan.k", 3));
  const std::string sched = c.get_str("afan.schedule", "grid");
  if (sched == "grid") e.train.perturb.schedule = PerturbConfig::Schedule::kGrid;
  else if (sched == "random-uniform") e.train.perturb.schedule = PerturbConfig::Schedule::kRandomUniform;
  else throw DomainError("config: afan.schedule must be grid or random-uniform, got '" + sched + "'");
  e.train.perturb.lambda = c.get_num("afan.lambda", 1.0);
  const std::string noise = c.get_str("afan.noise_mode", "adversarial");
  if (noise == "adversarial") e.train.perturb.noise_mode = PerturbConfig::NoiseMode::kAdversarial;
  else if (noise == "gaussian") e.train.perturb.noise_mode = PerturbConfig::NoiseMode::kGaussian;
  else throw DomainError("config: afan.noise_mode must be adversarial or gaussian, got '" + noise + "'");
  e.train.perturb.interpolate = c.get_bool("afan.interpolate", true);
  e.train.validate();

  e.attack.steps = static_cast<int>(c.get_int("attack.steps", 20));
  e.attack.alpha = c.get_num("attack.alpha", 2.0 / 255.0);
  e.attack.epsilon = c.get_num("attack.epsilon", 8.0 / 255.0);
  e.attack.validate();

  e.raw = c;
  return e;
}

Config ExperimentConfig::resolved() const {
  Config c;
  c.set("seed", std::to_string(seed));
  c.set("out", out_root);
  c.set("run.name", run_name);
  const Config spec_kv = Config::parse_text(model.serialize());
  for (const auto& [k, v] : spec_kv.entries()) c.set(k, v);
  c.set("data.kind", data.kind);
  c.set("data.n", std::to_string(data.n));
  c.set("data.test_fraction", fmt_num(data.test_fraction));
  c.set("data.noise", fmt_num(data.noise));
  c.set("data.classes", std::to_string(data.classes));
  c.set("data.path", data.path);
  c.set("data.test_path", data.test_path);
  c.set("train.epochs", std::to_string(train.epochs));
  c.set("train.batch", std::to_string(train.batch_size));
  c.set("train.lr", fmt_num(train.lr0));
  std::string ms;
  for (size_t i = 0; i < train.milestone_epochs.size(); ++i)
    ms += (i ? "," : "") + std::to_string(train.milestone_epochs[i]);
  c.set("train.milestones", ms);
  c.set("train.decay", fmt_num(train.decay_factor));
  c.set("train.warmup", std::to_string(train.warmup_iters));
  c.set("train.momentum", fmt_num(train.momentum));
  c.set("train.weight_decay", fmt_num(train.weight_decay));
  c.set("train.val_fraction", fmt_num(train.val_fraction));
  c.set("afan.on", train.afa_on ? "1" : "0");
  c.set("afan.afn", train.afn_on ? "1" : "0");
  c.set("afan.steps", std::to_string(train.perturb.steps));
  c.set("afan.alpha_max", fmt_num(train.perturb.alpha_max));
  c.set("afan.epsilon", fmt_num(train.perturb.epsilon));
  c.set("afan.k", std::to_string(train.perturb.k));
  c.set("afan.schedule",
        train.perturb.schedule == PerturbConfig::Schedule::kGrid ? "grid" : "random-uniform");
  c.set("afan.lambda", fmt_num(train.perturb.lambda));
  c.set("afan.noise_mode",
        train.perturb.noise_mode == PerturbConfig::NoiseMode::kAdversarial ? "adversarial"
                                                                           : "gaussian");
  c.set("afan.interpolate", train.perturb.interpolate ? "1" : "0");
  c.set("attack.steps", std::to_string(attack.steps));
  c.set("attack.alpha", fmt_num(attack.alpha));
  c.set("attack.epsilon", fmt_num(attack.epsilon));
  // command-specific knobs ride along verbatim
  for (const auto& [k, v] : raw.entries())
    if (!c.has(k)) c.set(k, v);
  return c;
}

Dataset ExperimentConfig::make_dataset() const {
  if (data.kind == "blobs" || data.kind == "spirals" || data.kind == "shapes16") {
    SyntheticOptions opt;
    opt.test_fraction = data.test_fraction;
    opt.noise = data.noise;
    opt.classes = static_cast<int>(data.classes);
    return gen_synthetic(data.kind, data.n, seed, opt);
  }
  if (data.kind == "csv") {
    if (data.path.empty()) throw DomainError("config: data.path required for kind csv");
    Dataset train_ds = load_csv_vectors(data.path, static_cast<int>(data.classes), Split::kTrain);
    if (data.test_path.empty()) return train_ds;
    Dataset test_ds = load_csv_vectors(data.test_path, train_ds.classes, Split::kTest);
    return concat_as_test(std::move(train_ds), test_ds);
  }
  if (data.kind == "raw") {
    if (data.path.empty()) throw DomainError("config: data.path required for kind raw");
    Dataset train_ds = load_raw_gray(data.path, Split::kTrain);
    if (data.test_path.empty()) return train_ds;
    Dataset test_ds = load_raw_gray(data.test_path, Split::kTest);
    return concat_as_test(std::move(train_ds), test_ds);
  }
  throw DomainError("config: unknown data.kind '" + data.kind + "'");
}

}  // namespace afan
