#include "afan/commands.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "afan/afan.hpp"
#include "afan/error.hpp"
#include "afan/eval.hpp"
#include "afan/rng.hpp"
#include "afan/trainer.hpp"

namespace afan {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

json config_json(const Config& c) {
  json j = json::object();
  for (const auto& [k, v] : c.entries()) j[k] = v;
  return j;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  os << text;
  if (!os) throw DataError("write failed for '" + path + "'");
}

void write_json(const std::string& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<int64_t> train_prefix(const Dataset& data, int64_t count) {
  std::vector<int64_t> idx = data.indices_of(Split::kTrain);
  if (static_cast<int64_t>(idx.size()) > count) idx.resize(static_cast<size_t>(count));
  return idx;
}

SplitModel rebuild_with_state(const ModelSpec& spec, const std::string& split,
                              const StateDict& state) {
  SplitModel m = SplitModel::build(spec, 0);
  m.set_active_split(split);
  m.load_state(state);
  return m;
}

struct Stats {
  double mean = 0.0, stddev = 0.0;
};

Stats mean_std(const std::vector<double>& xs) {
  Stats s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

FlatnessReport measure_flatness(SplitModel& model, const Dataset& data, int64_t batch,
                                int spectral_iters, int trace_probes, uint64_t seed) {
  const std::vector<int64_t> idx = train_prefix(data, batch);
  Tensor x = gather_inputs(data, idx);
  const std::vector<int> y = gather_labels(data, idx);
  GradFn f = model_loss_gradfn(model, x, y);
  const std::vector<double> theta = model.flat_parameters();
  FlatnessReport rep;
  rep.spectral = spectral_norm(f, theta, spectral_iters, 1e-3, derive_seed(seed, SeedDomain::kEstimator, 1));
  rep.trace = trace_hutchinson(f, theta, trace_probes, derive_seed(seed, SeedDomain::kEstimator, 2));
  return rep;
}

}  // namespace

// --------------------------------------------------------------------------
// train
// --------------------------------------------------------------------------

int cmd_train(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const std::string resolved_text = cfg.resolved().serialize();
  write_text(cfg.out_dir() + "/config.resolved.txt", resolved_text);

  Dataset data = cfg.make_dataset();
  SplitModel model = SplitModel::build(cfg.model, derive_seed(cfg.seed, SeedDomain::kInit));

  std::ofstream metrics(cfg.out_dir() + "/metrics.jsonl", std::ios::trunc);
  if (!metrics) throw DataError("cannot open metrics file in '" + cfg.out_dir() + "'");
  metrics << json{{"config", config_json(cfg.resolved())}}.dump() << "\n";

  auto sink = [&](const RunRecord& r) {
    json j = json::object();
    j["iter"] = r.iteration;
    j["l_clean"] = r.l_clean;
    j["l_adv"] = r.l_adv;
    j["total"] = r.total;
    j["train_acc"] = r.train_accuracy;
    metrics << j.dump() << "\n";
  };
  auto epoch_sink = [&](int64_t epoch, int64_t iter, double val_acc) {
    metrics << json{{"epoch", epoch}, {"iter", iter}, {"val_acc", val_acc}}.dump() << "\n";
  };

  TrainResult res = train(model, data, cfg.train, sink, epoch_sink);
  metrics.close();

  SplitModel best = rebuild_with_state(cfg.model, model.active_split(), res.best_state);
  save_checkpoint(best, cfg.out_dir() + "/checkpoint.afan", resolved_text);
  save_checkpoint(model, cfg.out_dir() + "/checkpoint-final.afan", resolved_text);

  std::cout << "train: " << res.iterations << " iterations, best val acc " << res.best_val_accuracy
            << " at iteration " << res.best_iteration;
  if (!data.indices_of(Split::kTest).empty())
    std::cout << ", test acc (best ckpt) " << standard_accuracy(best, data);
  std::cout << "\n  artifacts in " << cfg.out_dir() << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------------
// eval
// --------------------------------------------------------------------------

int cmd_eval(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const std::string ckpt =
      cfg.raw.get_str("eval.checkpoint", cfg.out_dir() + "/checkpoint.afan");
  SplitModel model = load_checkpoint(ckpt);
  Dataset data = cfg.make_dataset();
  const Split eval_split = data.indices_of(Split::kTest).empty() ? Split::kTrain : Split::kTest;

  json out = json::object();
  out["config"] = config_json(cfg.resolved());
  out["checkpoint"] = ckpt;
  const double sa = standard_accuracy(model, data, eval_split);
  out["sa"] = sa;

  json ras = json::array();
  std::vector<double> eps_list{cfg.attack.epsilon};
  if (cfg.raw.get_bool("eval.sweep", false))
    eps_list = {0.0, cfg.attack.epsilon / 2.0, cfg.attack.epsilon};
  for (double eps : eps_list) {
    AttackConfig atk = cfg.attack;
    atk.epsilon = eps;
    const double ra = robust_accuracy(model, data, atk, eval_split);
    ras.push_back({{"epsilon", eps}, {"ra", ra}});
  }
  out["ra"] = ras;

  if (cfg.raw.get_bool("eval.flatness", false)) {
    FlatnessReport rep = measure_flatness(
        model, data, cfg.raw.get_int("eval.batch", 128),
        static_cast<int>(cfg.raw.get_int("eval.spectral_iters", 100)),
        static_cast<int>(cfg.raw.get_int("eval.trace_probes", 64)), cfg.seed);
    out["flatness"] = {{"spectral_norm", rep.spectral.estimate},
                       {"spectral_iters", rep.spectral.iters},
                       {"spectral_residual", rep.spectral.residual},
                       {"spectral_converged", rep.spectral.converged},
                       {"trace", rep.trace.estimate},
                       {"trace_std_error", rep.trace.std_error},
                       {"trace_probes", rep.trace.probes}};
  }

  write_json(cfg.out_dir() + "/eval.json", out);
  std::cout << "eval: sa " << sa;
  for (const auto& r : ras) std::cout << ", ra@" << r["epsilon"].dump() << " " << r["ra"].dump();
  std::cout << "\n  report " << cfg.out_dir() << "/eval.json\n";
  return kExitOk;
}

// --------------------------------------------------------------------------
// ablate
// --------------------------------------------------------------------------

namespace {

TrainConfig variant_config(const TrainConfig& base, const std::string& variant) {
  TrainConfig tc = base;
  if (variant == "baseline") {
    tc.afa_on = false;
  } else if (variant == "afa") {
    tc.afa_on = true;
    tc.afn_on = false;
  } else if (variant == "afan") {
    tc.afa_on = true;
    tc.afn_on = true;
  } else if (variant == "noise") {
    tc.afa_on = true;
    tc.afn_on = true;
    tc.perturb.noise_mode = PerturbConfig::NoiseMode::kGaussian;
  } else {
    throw DomainError("ablate: unknown variant '" + variant +
                      "' (expected baseline, afa, afan, noise)");
  }
  return tc;
}

}  // namespace

int cmd_ablate(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const std::vector<std::string> variants =
      cfg.raw.get_str_list("ablate.variants", {"baseline", "afa", "afan"});
  const auto n_seeds = cfg.raw.get_int("ablate.seeds", 5);
  if (n_seeds < 1) throw DomainError("ablate: ablate.seeds must be >= 1");
  const bool with_spectral = cfg.raw.get_bool("ablate.spectral", false);
  const bool with_robust = cfg.raw.get_bool("ablate.robust", false);

  std::ofstream results(cfg.out_dir() + "/results.jsonl", std::ios::trunc);
  if (!results) throw DataError("cannot open results file in '" + cfg.out_dir() + "'");
  results << json{{"config", config_json(cfg.resolved())}}.dump() << "\n";

  struct Cell {
    std::vector<double> sa, ra, spectral;
  };
  std::vector<Cell> cells(variants.size());

  for (size_t vi = 0; vi < variants.size(); ++vi) {
    for (int64_t run = 0; run < n_seeds; ++run) {
      // One master per run index; the variant never enters seed derivation,
      // so data/init/noise are paired across variants.
      const uint64_t master = derive_seed(cfg.seed, SeedDomain::kRun, static_cast<uint64_t>(run));
      ExperimentConfig ec = cfg;
      ec.seed = master;
      Dataset data = ec.make_dataset();
      SplitModel model = SplitModel::build(cfg.model, derive_seed(master, SeedDomain::kInit));
      TrainConfig tc = variant_config(cfg.train, variants[vi]);
      tc.seed = master;
      TrainResult res = train(model, data, tc);
      SplitModel best = rebuild_with_state(cfg.model, model.active_split(), res.best_state);

      json line = json::object();
      line["variant"] = variants[vi];
      line["run"] = run;
      line["master_seed"] = master;
      const double sa = standard_accuracy(best, data);
      line["sa"] = sa;
      cells[vi].sa.push_back(sa);
      if (with_robust) {
        const double ra = robust_accuracy(best, data, cfg.attack);
        line["ra"] = ra;
        cells[vi].ra.push_back(ra);
      }
      if (with_spectral) {
        FlatnessReport rep = measure_flatness(
            best, data, cfg.raw.get_int("eval.batch", 128),
            static_cast<int>(cfg.raw.get_int("eval.spectral_iters", 100)),
            static_cast<int>(cfg.raw.get_int("eval.trace_probes", 32)), master);
        line["spectral"] = rep.spectral.estimate;
        line["spectral_converged"] = rep.spectral.converged;
        line["trace"] = rep.trace.estimate;
        cells[vi].spectral.push_back(rep.spectral.estimate);
      }
      results << line.dump() << "\n";
      std::cout << "ablate: " << variants[vi] << " run " << run << " sa " << sa << "\n";
    }
  }
  results.close();

  std::ostringstream table;
  table << "# ablation over " << n_seeds << " seeds (mean +- std)\n";
  const Config resolved = cfg.resolved();
  for (const auto& [k, v] : resolved.entries()) table << "# " << k << "=" << v << "\n";
  char buf[128];
  table << "variant      sa";
  if (with_robust) table << "                    ra";
  if (with_spectral) table << "                    spectral";
  table << "\n";
  for (size_t vi = 0; vi < variants.size(); ++vi) {
    Stats sa = mean_std(cells[vi].sa);
    std::snprintf(buf, sizeof(buf), "%-12s %.4f +- %.4f", variants[vi].c_str(), sa.mean, sa.stddev);
    table << buf;
    if (with_robust) {
      Stats ra = mean_std(cells[vi].ra);
      std::snprintf(buf, sizeof(buf), "  %.4f +- %.4f", ra.mean, ra.stddev);
      table << buf;
    }
    if (with_spectral) {
      Stats sp = mean_std(cells[vi].spectral);
      std::snprintf(buf, sizeof(buf), "  %.4f +- %.4f", sp.mean, sp.stddev);
      table << buf;
    }
    table << "\n";
  }
  write_text(cfg.out_dir() + "/table.txt", table.str());
  std::cout << table.str();
  return kExitOk;
}

// --------------------------------------------------------------------------
// landscape
// --------------------------------------------------------------------------

int cmd_landscape(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const std::vector<std::string> checkpoints = cfg.raw.get_str_list(
      "landscape.checkpoints", {cfg.out_dir() + "/checkpoint.afan"});
  const int grid = static_cast<int>(cfg.raw.get_int("landscape.grid", 21));
  const double span = cfg.raw.get_num("landscape.span", 1.0);

  Dataset data = cfg.make_dataset();
  const std::vector<int64_t> idx = train_prefix(data, cfg.raw.get_int("landscape.batch", 128));
  Tensor x = gather_inputs(data, idx);
  const std::vector<int> y = gather_labels(data, idx);

  for (const std::string& ckpt : checkpoints) {
    SplitModel model = load_checkpoint(ckpt);
    LossSlice slice = loss_slice(model, x, y, grid, span, cfg.seed);
    std::string stem = fs::path(ckpt).stem().string();
    std::replace(stem.begin(), stem.end(), '/', '_');
    write_slice_matrix(slice, cfg.out_dir() + "/slice_" + stem + ".mat");
    json j = json::object();
    j["config"] = config_json(cfg.resolved());
    j["checkpoint"] = ckpt;
    j["center"] = slice.center;
    j["a"] = slice.a;
    j["b"] = slice.b;
    j["loss"] = slice.loss;
    write_json(cfg.out_dir() + "/slice_" + stem + ".json", j);
    std::cout << "landscape: " << ckpt << " center loss " << slice.center << " -> slice_" << stem
              << ".{mat,json}\n";
  }
  return kExitOk;
}

// --------------------------------------------------------------------------
// gen-data / dump-features
// --------------------------------------------------------------------------

int cmd_gen_data(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  Dataset data = cfg.make_dataset();
  const bool image = data.inputs.rank() == 4;
  const std::string format = cfg.raw.get_str("gen.format", image ? "raw" : "csv");
  const std::string prefix = cfg.raw.get_str("gen.prefix", cfg.out_dir() + "/" + cfg.data.kind);

  Dataset train_part = subset(data, data.indices_of(Split::kTrain), Split::kTrain);
  Dataset test_part = subset(data, data.indices_of(Split::kTest), Split::kTest);
  std::string train_path, test_path;
  if (format == "csv") {
    train_path = prefix + "_train.csv";
    test_path = prefix + "_test.csv";
    save_csv_vectors(train_part, train_path);
    save_csv_vectors(test_part, test_path);
  } else if (format == "raw") {
    train_path = prefix + "_train.bin";
    test_path = prefix + "_test.bin";
    save_raw_gray(train_part, train_path);
    save_raw_gray(test_part, test_path);
  } else {
    throw DomainError("gen-data: gen.format must be csv or raw, got '" + format + "'");
  }
  write_text(prefix + "_gen.txt", cfg.resolved().serialize());
  std::cout << "gen-data: wrote " << train_path << " (" << train_part.size() << ") and "
            << test_path << " (" << test_part.size() << ")\n";
  return kExitOk;
}

int cmd_dump_features(const ExperimentConfig& cfg) {
  fs::create_directories(cfg.out_dir());
  const std::string ckpt =
      cfg.raw.get_str("dump.checkpoint", cfg.out_dir() + "/checkpoint.afan");
  SplitModel model = load_checkpoint(ckpt);
  Dataset data = cfg.make_dataset();
  const std::vector<int64_t> idx = train_prefix(data, cfg.raw.get_int("dump.samples", 8));
  Tensor x = gather_inputs(data, idx);
  const std::vector<int> y = gather_labels(data, idx);
  Rng noise(derive_seed(cfg.seed, SeedDomain::kNoise));
  AugmentedSet set = build_spectrum(cfg.train.perturb, model, x, y, &noise);
  const std::string dir = cfg.out_dir() + "/features";
  dump_features(set, dir, "batch0");
  write_text(dir + "/config.txt", cfg.resolved().serialize());
  std::cout << "dump-features: " << set.entries.size() << " strengths for " << idx.size()
            << " samples in " << dir << "\n";
  return kExitOk;
}

// --------------------------------------------------------------------------
// CLI
// --------------------------------------------------------------------------

namespace {

Config assemble_config(const std::vector<std::string>& files,
                       const std::vector<std::string>& sets) {
  Config c;
  for (const std::string& path : files) {
    const Config file = Config::load_file(path);
    for (const auto& [k, v] : file.entries()) c.set(k, v);
  }
  for (const std::string& s : sets) {
    const size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw DomainError("--set expects key=value, got '" + s + "'");
    c.set(s.substr(0, eq), s.substr(eq + 1));
  }
  return c;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"A-FAN feature-augmentation training workbench"};
  app.require_subcommand(1);

  struct SubOpts {
    std::vector<std::string> configs;
    std::vector<std::string> sets;
  };
  const std::vector<std::pair<std::string, std::string>> names = {
      {"train", "train a model and write checkpoint + metrics"},
      {"eval", "standard/robust accuracy and flatness of a checkpoint"},
      {"ablate", "variant grid over seeds with a mean +- std table"},
      {"landscape", "2-D loss-landscape slices of checkpoints"},
      {"gen-data", "write a generated dataset to csv or raw files"},
      {"dump-features", "export clean/adversarial/mixed feature arrays"},
  };
  std::vector<SubOpts> opts(names.size());
  std::vector<CLI::App*> subs;
  for (size_t i = 0; i < names.size(); ++i) {
    CLI::App* sub = app.add_subcommand(names[i].first, names[i].second);
    sub->add_option("--config", opts[i].configs, "config file with key=value lines");
    sub->add_option("--set", opts[i].sets, "override a config key, e.g. --set train.lr=0.1");
    subs.push_back(sub);
  }

  std::vector<const char*> argv;
  argv.push_back("afan");
  for (const auto& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    for (size_t i = 0; i < subs.size(); ++i) {
      if (!subs[i]->parsed()) continue;
      ExperimentConfig cfg = ExperimentConfig::resolve(assemble_config(opts[i].configs, opts[i].sets));
      switch (i) {
        case 0: return cmd_train(cfg);
        case 1: return cmd_eval(cfg);
        case 2: return cmd_ablate(cfg);
        case 3: return cmd_landscape(cfg);
        case 4: return cmd_gen_data(cfg);
        case 5: return cmd_dump_features(cfg);
        default: break;
      }
    }
    std::cerr << "afan: no subcommand\n";
    return kExitUsage;
  } catch (const DataError& e) {
    std::cerr << "afan: data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    std::cerr << "afan: numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "afan: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "afan: " << e.what() << "\n";
    return kExitUsage;
  }
}

}  // namespace afan
