#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "effnet/checkpoint.hpp"
#include "effnet/data.hpp"
#include "effnet/errors.hpp"
#include "effnet/gradcheck.hpp"
#include "effnet/metrics.hpp"
#include "effnet/train.hpp"

namespace fs = std::filesystem;
using namespace effnet;

namespace {

// Exit codes.
constexpr int kOk = 0;
constexpr int kDataError = 1;
constexpr int kConfigError = 2;
constexpr int kCheckFailed = 3;

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  f.close();
  if (!f) throw Error("cannot write " + path.string());
}

// "n=2000,pos=0.405,signal=32,seed=1,noise=12"; omitted keys keep defaults.
SynthSpec parse_synth_spec(const std::string& text) {
  SynthSpec spec;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("synthetic spec: expected key=value, got '" + item + "'");
    }
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    try {
      if (key == "n") spec.n = std::stoul(val);
      else if (key == "pos") spec.pos_fraction = std::stod(val);
      else if (key == "signal") spec.signal_strength = std::stod(val);
      else if (key == "seed") spec.seed = std::stoull(val);
      else if (key == "noise") spec.noise_level = std::stod(val);
      else throw ConfigError("synthetic spec: unknown key '" + key + "'");
    } catch (const std::logic_error&) {
      throw ConfigError("synthetic spec: bad value for '" + key + "': '" + val + "'");
    }
  }
  return spec;
}

struct DataSource {
  std::string dir;
  std::string synthetic;

  void add(CLI::App* cmd) {
    auto* d = cmd->add_option("--data", dir, "Dataset directory (labels.csv + PPM files)");
    auto* s = cmd->add_option("--synthetic", synthetic,
                              "Generate in memory: n=,pos=,signal=,seed=,noise=");
    d->excludes(s);
  }

  Dataset load() const {
    if (!dir.empty()) return load_dataset(dir);
    if (!synthetic.empty()) return generate_synthetic(parse_synth_spec(synthetic));
    throw ConfigError("one of --data or --synthetic is required");
  }
};

struct TrainArgs {
  bool rcc = false, rds = false, ff = false, attention = false;
  std::size_t epochs = 12, batch = 32;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double threshold = 0.5;

  void add(CLI::App* cmd, bool with_flags) {
    if (with_flags) {
      cmd->add_flag("--rcc,!--no-rcc", rcc, "Random center cropping");
      cmd->add_flag("--rds,!--no-rds", rds, "Stem stride 1 instead of 2");
      cmd->add_flag("--ff,!--no-ff", ff, "Feature fusion head");
      cmd->add_flag("--attention,!--no-attention", attention, "SE attention on fused taps");
    }
    cmd->add_option("--epochs", epochs, "Training epochs")->capture_default_str();
    cmd->add_option("--batch", batch, "Batch size")->capture_default_str();
    cmd->add_option("--seed", seed, "Seed for split, init, shuffling and augmentation")
        ->capture_default_str();
    cmd->add_option("--train-fraction", train_fraction, "Share of samples used for training")
        ->capture_default_str();
    cmd->add_option("--threshold", threshold, "Score threshold for ACC/SEN/SPE/F")
        ->capture_default_str();
  }

  TrainConfig config() const {
    TrainConfig cfg;
    cfg.model.rcc = rcc;
    cfg.model.rds = rds;
    cfg.model.ff = ff;
    cfg.model.attention = attention;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = seed;
    cfg.threshold = threshold;
    return cfg;
  }
};

int cmd_gen_data(const SynthSpec& spec, const std::string& out) {
  const Dataset ds = generate_synthetic(spec);
  write_dataset(ds, out);
  std::cout << "wrote " << ds.size() << " images (" << ds.positives() << " positive) to " << out
            << "\nmanifest digest " << ds.manifest_digest << "\n";
  return kOk;
}

int cmd_train(const DataSource& src, const TrainArgs& a, const std::string& out) {
  TrainConfig cfg = a.config();
  cfg.validate();
  const Dataset ds = src.load();
  auto [train_set, val_set] = split_dataset(ds, a.train_fraction, a.seed);
  fs::create_directories(out);
  TrainOptions opt;
  opt.checkpoint = fs::path(out) / "checkpoint.efnm";
  opt.log = &std::cerr;
  const TrainResult res = train(cfg, train_set, val_set, opt);
  const RunRecord& run = res.record;

  const std::vector<EvalRecord> final_records{{"train", run.config_label, run.last().train},
                                              {"val", run.config_label, run.last().val}};
  write_text(fs::path(out) / "epochs.csv", epochs_csv(run));
  write_text(fs::path(out) / "epochs.txt", epochs_table(run));
  write_text(fs::path(out) / "report.csv", records_csv(final_records));
  write_text(fs::path(out) / "report.txt", records_table(final_records));
  nlohmann::json meta{{"config", run.config},
                      {"seed", run.seed},
                      {"dataset_digest", run.dataset_digest},
                      {"train_size", train_set.size()},
                      {"val_size", val_set.size()},
                      {"wall_seconds", run.wall_seconds},
                      {"checkpoint", run.checkpoint_path}};
  write_text(fs::path(out) / "run.json", meta.dump(2) + "\n");
  std::cout << epochs_table(run) << "\n" << records_table(final_records);
  std::cout << "wall time " << run.wall_seconds << " s, checkpoint " << run.checkpoint_path
            << "\n";
  return kOk;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data, double threshold,
                 const std::string& scores_out) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(data);
  const EffNetMini model = restore_model(ckpt);
  const std::vector<double> probs = predict(model, ds, checkpoint_norm(ckpt));
  const MetricReport rep = evaluate_scores(probs, ds.labels(), threshold);
  if (!scores_out.empty()) {
    std::ostringstream os;
    os << "filename,score,label\n";
    os.precision(17);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      os << ds.images[i].source_id << ',' << probs[i] << ',' << ds.images[i].label << '\n';
    }
    write_text(scores_out, os.str());
  }
  const std::vector<EvalRecord> rec{{"eval", ckpt.model.flags_label(), rep}};
  std::cout << records_csv(rec) << "\n" << records_table(rec);
  if (!rep.auc_note.empty()) std::cout << rep.auc_note << "\n";
  return kOk;
}

int cmd_ablate(const DataSource& src, const TrainArgs& a, const std::string& grid_arg,
               const std::string& out) {
  std::vector<FlagTuple> grid;
  if (grid_arg == "table2") {
    grid = table2_grid();
  } else {
    std::ifstream f(grid_arg);
    if (!f) throw ConfigError("ablate: cannot read grid file " + grid_arg);
    std::ostringstream ss;
    ss << f.rdbuf();
    grid = parse_grid(ss.str());
  }
  const TrainConfig cfg = a.config();
  // Validate the whole grid before touching the data.
  for (std::size_t i = 0; i < grid.size(); ++i) {
    ModelConfig m = cfg.model;
    m.rcc = grid[i].rcc;
    m.rds = grid[i].rds;
    m.ff = grid[i].ff;
    m.attention = grid[i].attention;
    try {
      m.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("ablate: grid row " + std::to_string(i + 1) + " rejected: " + e.what());
    }
  }
  const Dataset ds = src.load();
  auto [train_set, val_set] = split_dataset(ds, a.train_fraction, a.seed);
  const auto rows = ablate(cfg, grid, train_set, val_set, &std::cerr);
  fs::create_directories(out);
  write_text(fs::path(out) / "ablation.csv", ablation_csv(rows));
  write_text(fs::path(out) / "ablation.txt", ablation_table(rows));
  std::cout << ablation_table(rows);
  return kOk;
}

int cmd_gradcheck(const std::string& op, bool all, std::size_t instances, std::uint64_t seed) {
  if (all == !op.empty()) throw ConfigError("gradcheck: give exactly one of --op or --all");
  const std::vector<std::string> ops = all ? gradcheck_ops() : std::vector<std::string>{op};
  bool ok = true;
  for (const auto& name : ops) {
    const GradCheckResult r = run_gradcheck(name, instances, seed);
    std::printf("%-22s %s  max_rel_err=%.3e  instances=%zu\n", name.c_str(),
                r.passed ? "PASS" : "FAIL", r.max_error, r.instances);
    ok = ok && r.passed;
  }
  return ok ? kOk : kCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EffNet-mini: center-signal patch classifier with ablation tooling"};
  app.require_subcommand(1);

  SynthSpec gen;
  std::string gen_out;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic dataset to disk");
  gen_cmd->add_option("--n", gen.n, "Number of images")->capture_default_str();
  gen_cmd->add_option("--pos-fraction", gen.pos_fraction, "Share of positives")
      ->capture_default_str();
  gen_cmd->add_option("--signal", gen.signal_strength, "Center stripe amplitude")
      ->capture_default_str();
  gen_cmd->add_option("--noise", gen.noise_level, "Speckle standard deviation")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen_out, "Output directory")->required();

  DataSource train_src;
  TrainArgs train_args;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "Train one configuration");
  train_src.add(train_cmd);
  train_args.add(train_cmd, true);
  train_cmd->add_option("--out", train_out, "Output directory")->required();

  std::string eval_ckpt, eval_data, eval_scores;
  double eval_threshold = 0.5;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score a dataset with a checkpoint");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory")->required();
  eval_cmd->add_option("--threshold", eval_threshold, "Score threshold")->capture_default_str();
  eval_cmd->add_option("--dump-scores", eval_scores, "Write filename,score,label CSV here");

  DataSource abl_src;
  TrainArgs abl_args;
  std::string abl_grid = "table2", abl_out;
  auto* abl_cmd = app.add_subcommand("ablate", "Train every row of a flag grid");
  abl_src.add(abl_cmd);
  abl_args.add(abl_cmd, false);
  abl_cmd->add_option("--grid", abl_grid, "'table2' or a CSV file rcc,rds,ff,attention")
      ->capture_default_str();
  abl_cmd->add_option("--out", abl_out, "Output directory")->required();

  std::string gc_op;
  bool gc_all = false;
  std::size_t gc_instances = 100;
  std::uint64_t gc_seed = 0;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--op", gc_op, "One op name");
  gc_cmd->add_flag("--all", gc_all, "Every registered op");
  gc_cmd->add_option("--instances", gc_instances, "Random instances per op")
      ->capture_default_str();
  gc_cmd->add_option("--seed", gc_seed, "Instance seed")->capture_default_str();
  gc_cmd->add_flag_callback("--list", [] {
    for (const auto& n : gradcheck_ops()) std::cout << n << "\n";
    std::exit(kOk);
  }, "List op names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, gen_out);
    if (*train_cmd) return cmd_train(train_src, train_args, train_out);
    if (*eval_cmd) return cmd_evaluate(eval_ckpt, eval_data, eval_threshold, eval_scores);
    if (*abl_cmd) return cmd_ablate(abl_src, abl_args, abl_grid, abl_out);
    if (*gc_cmd) return cmd_gradcheck(gc_op, gc_all, gc_instances, gc_seed);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfigError;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kConfigError;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kOk;
}
