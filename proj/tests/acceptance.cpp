// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
// stderr. The learnability and ablation criteria train 16 full-size models
// and take over an hour on one core.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/resource.h>
#include <sys/wait.h>

#include "effnet/augment.hpp"
#include "effnet/checkpoint.hpp"
#include "effnet/data.hpp"
#include "effnet/errors.hpp"
#include "effnet/gradcheck.hpp"
#include "effnet/metrics.hpp"
#include "effnet/model.hpp"
#include "effnet/train.hpp"

using namespace effnet;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const fs::path& work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::current_path() / "acceptance_work";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct CliRun {
  int exit_code = -1;
  std::string output;
};

CliRun cli(const std::string& args) {
  const fs::path log = work_dir() / "cli.log";
  const std::string cmd = std::string(EFFNET_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  CliRun r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream f(log);
  std::ostringstream os;
  os << f.rdbuf();
  r.output = os.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

double child_cpu_seconds() {
  rusage u{};
  getrusage(RUSAGE_CHILDREN, &u);
  return static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
         1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
}

// --- 1 -------------------------------------------------------------------

Verdict gradient_integrity() {
  const double cpu0 = child_cpu_seconds();
  const auto t0 = Clock::now();
  const CliRun r = cli("gradcheck --all");
  const double cpu = child_cpu_seconds() - cpu0;
  const double wall = seconds_since(t0);
  std::size_t pass = 0, fail = 0;
  double worst = 0;
  std::istringstream lines(r.output);
  for (std::string line; std::getline(lines, line);) {
    if (line.find(" PASS ") != std::string::npos) ++pass;
    if (line.find(" FAIL ") != std::string::npos) ++fail;
    const auto at = line.find("max_rel_err=");
    if (at != std::string::npos) worst = std::max(worst, std::atof(line.c_str() + at + 12));
  }
  const std::size_t expected = gradcheck_ops().size();
  Verdict v;
  v.pass = r.exit_code == 0 && fail == 0 && pass == expected && cpu < 60.0;
  v.detail = std::to_string(pass) + "/" + std::to_string(expected) + " ops pass, worst " +
             fmt("%.2e", worst) + ", cpu " + fmt("%.1f", cpu) + " s (wall " +
             fmt("%.1f", wall) + " s)";
  return v;
}

// --- 2 -------------------------------------------------------------------

Verdict rcc_preservation() {
  const AugmentConfig cfg;  // pad 8, crop 96
  std::size_t failures = 0;
  const std::size_t trials = 10000;
  CounterRng root(20240501);
  for (std::size_t t = 0; t < trials; ++t) {
    CounterRng rng = root.split(t);
    ImagePatch img = ImagePatch::blank(96, 96);
    for (float& p : img.pixels) p = static_cast<float>(rng.uniform(0.0, 255.0));
    CropOffsets off;
    const ImagePatch out = random_center_crop(img, cfg, rng, &off);
    const std::size_t r0 = 40 - off.row, c0 = 40 - off.col;
    bool ok = out.height == 96 && out.width == 96;
    for (std::size_t r = 0; ok && r < 32; ++r)
      for (std::size_t c = 0; ok && c < 32; ++c)
        for (std::size_t ch = 0; ch < 3; ++ch)
          ok = ok && out.at(r0 + r, c0 + c, ch) == img.at(32 + r, 32 + c, ch);
    failures += !ok;
  }
  return {failures == 0,
          std::to_string(trials) + " crops, " + std::to_string(failures) + " failures"};
}

// --- 3 -------------------------------------------------------------------

Verdict rds_shapes() {
  std::string detail;
  bool ok = true;
  for (bool rds : {false, true}) {
    ModelConfig cfg;
    cfg.rds = rds;
    const EffNetMini m = build_model(cfg);
    const FeatureMaps fm = m.features(Tensor::zeros({1, 3, 96, 96}));
    const std::size_t h = fm.final_map.dim(2), w = fm.final_map.dim(3);
    const std::size_t want = rds ? 6 : 3;
    ok = ok && h == want && w == want;
    detail += std::string(rds ? "rds on " : "rds off ") + std::to_string(h) + "x" +
              std::to_string(w) + (rds ? "" : ", ");
  }
  return {ok, detail};
}

// --- 4 -------------------------------------------------------------------

bool same_metric(const Metric& m, bool defined, double value) {
  return defined ? (m.has_value() && *m == value) : !m.has_value();
}

Verdict metric_fidelity() {
  CounterRng rng(4);
  std::size_t mismatches = 0, tie_heavy = 0;
  double worst_auc = 0;
  for (int set = 0; set < 1000; ++set) {
    const std::size_t n = 1 + rng.below(set % 10 == 0 ? 2000 : 200);
    const bool ties = set % 2 == 0;
    const std::uint64_t levels = ties ? 2 + rng.below(6) : 0;
    tie_heavy += ties;
    std::vector<double> s(n);
    std::vector<int> y(n);
    const double prevalence = rng.uniform(0.05, 0.95);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = ties ? static_cast<double>(rng.below(levels)) / static_cast<double>(levels - 1)
                  : rng.uniform();
      y[i] = rng.bernoulli(prevalence) ? 1 : 0;
    }
    const double thr = ties ? static_cast<double>(rng.below(levels)) / (levels - 1)
                            : rng.uniform();
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (s[i] >= thr) (y[i] ? tp : fp) += 1;
      else (y[i] ? fn : tn) += 1;
    }
    const MetricReport r = evaluate_scores(s, y, thr);
    bool ok = same_metric(r.acc, true, (tp + tn) / (tp + fp + tn + fn));
    ok = ok && same_metric(r.sen, tp + fn > 0, tp / (tp + fn));
    ok = ok && same_metric(r.spe, tn + fp > 0, tn / (tn + fp));
    ok = ok && same_metric(r.f, tp + fn > 0, 2 * tp / (2 * tp + fn + fp));

    double wins = 0, pairs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!y[i]) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (y[j]) continue;
        pairs += 1;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
    if (pairs > 0) {
      const double err = r.auc ? std::abs(*r.auc - wins / pairs) : INFINITY;
      worst_auc = std::max(worst_auc, err);
      ok = ok && err <= 1e-12;
    } else {
      ok = ok && !r.auc;
    }
    mismatches += !ok;
  }
  return {mismatches == 0, "1000 sets (" + std::to_string(tie_heavy) + " tie-heavy), " +
                               std::to_string(mismatches) + " mismatches, worst AUC error " +
                               fmt("%.1e", worst_auc)};
}

// --- 5 / 6 -----------------------------------------------------------------

struct RunOutcome {
  double val_auc = NAN;
  double seconds = 0;
};

TrainConfig flag_config(bool rcc, bool rds, bool ff, bool attention, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 12;
  cfg.batch_size = 32;
  cfg.seed = seed;
  cfg.model.rcc = rcc;
  cfg.model.rds = rds;
  cfg.model.ff = ff;
  cfg.model.attention = attention;
  return cfg;
}

// Generation, split and training, timed together.
RunOutcome desk_run(const TrainConfig& cfg, double signal, std::uint64_t data_seed) {
  const auto t0 = Clock::now();
  SynthSpec spec;
  spec.seed = data_seed;
  if (signal >= 0) spec.signal_strength = signal;
  const Dataset ds = generate_synthetic(spec);
  const auto [tr, va] = split_dataset(ds, 0.8, data_seed);
  const TrainResult res = train(cfg, tr, va, {{}, &std::cerr});
  RunOutcome out;
  out.seconds = seconds_since(t0);
  const auto& auc = res.record.last().val.auc;
  out.val_auc = auc ? *auc : NAN;
  std::cerr << "  " << res.record.config_label << " seed " << cfg.seed << " signal "
            << spec.signal_strength << ": val AUC " << fmt("%.4f", out.val_auc) << " in "
            << fmt("%.0f", out.seconds) << " s\n";
  return out;
}

RunOutcome& all_flags_seed1() {
  static RunOutcome r = desk_run(flag_config(true, true, true, true, 1), -1, 1);
  return r;
}

Verdict learnability() {
  const RunOutcome& run = all_flags_seed1();
  const RunOutcome null = desk_run(flag_config(true, true, true, true, 1), 0.0, 1);
  Verdict v;
  v.pass = run.val_auc >= 0.95 && run.seconds <= 600.0 && null.val_auc >= 0.40 &&
           null.val_auc <= 0.60;
  v.detail = "all flags val AUC " + fmt("%.4f", run.val_auc) + " in " +
             fmt("%.0f", run.seconds) + " s (need >= 0.95, <= 600 s); null signal AUC " +
             fmt("%.4f", null.val_auc) + " (need [0.40, 0.60])";
  return v;
}

Verdict ablation_direction() {
  double base = 0, rcc = 0, all = 0;
  const int seeds = 5;
  for (int s = 1; s <= seeds; ++s) {
    base += desk_run(flag_config(false, false, false, false, s), -1, s).val_auc;
    rcc += desk_run(flag_config(true, false, false, false, s), -1, s).val_auc;
    all += s == 1 ? all_flags_seed1().val_auc
                  : desk_run(flag_config(true, true, true, true, s), -1, s).val_auc;
  }
  base /= seeds;
  rcc /= seeds;
  all /= seeds;
  return {all >= base && rcc >= base, "mean val AUC over 5 seeds: baseline " +
                                           fmt("%.4f", base) + ", RCC " + fmt("%.4f", rcc) +
                                           ", all flags " + fmt("%.4f", all)};
}

// --- 7 -------------------------------------------------------------------

Tensor batch_of(const Dataset& ds, const ChannelStats& norm) {
  const std::size_t n = ds.size(), plane = 3 * 96 * 96;
  std::vector<double> v(n * plane);
  for (std::size_t i = 0; i < n; ++i) {
    normalize_into(ds.images[i], norm.mean, norm.std,
                   std::span<double>(v.data() + i * plane, plane));
  }
  return Tensor::from({n, 3, 96, 96}, std::move(v));
}

Verdict determinism() {
  const std::string args =
      "train --synthetic n=200,seed=3 --rcc --rds --ff --attention --epochs 2 --seed 3 --out ";
  const fs::path a = work_dir() / "det_a", b = work_dir() / "det_b";
  const int ea = cli(args + a.string()).exit_code;
  const int eb = cli(args + b.string()).exit_code;
  bool same = ea == 0 && eb == 0;
  for (const char* f : {"checkpoint.efnm", "epochs.csv", "report.csv"}) {
    same = same && fs::exists(a / f) && slurp(a / f) == slurp(b / f);
  }

  // Full-precision weights against the 32-bit checkpoint, same inputs.
  SynthSpec spec;
  spec.n = 200;
  spec.seed = 3;
  const auto [tr, va] = split_dataset(generate_synthetic(spec), 0.8, 3);
  TrainConfig cfg = flag_config(true, true, true, true, 3);
  cfg.epochs = 2;
  const TrainResult res = train(cfg, tr, va);
  const bool cli_match = slurp(a / "checkpoint.efnm") == serialize_checkpoint(res.checkpoint);
  const Checkpoint loaded = load_checkpoint(a / "checkpoint.efnm");
  const EffNetMini restored = restore_model(loaded);
  const Tensor x = batch_of(va, checkpoint_norm(loaded));
  Tensor l64, l32;
  {
    NoGradGuard guard;
    l64 = res.model->forward(x);
    l32 = restored.forward(x);
  }
  double num = 0, den = 0;
  for (std::size_t i = 0; i < l64.numel(); ++i) {
    num += (l32.at(i) - l64.at(i)) * (l32.at(i) - l64.at(i));
    den += l64.at(i) * l64.at(i);
  }
  const double rel = std::sqrt(num / den);
  Verdict v;
  v.pass = same && cli_match && rel <= 1e-6;
  v.detail = std::string("repeat runs ") + (same ? "bitwise identical" : "DIFFER") +
             ", in-process checkpoint " + (cli_match ? "identical" : "DIFFERS") +
             ", 32-bit round-trip logit relative error " + fmt("%.2e", rel);
  return v;
}

// --- 8 -------------------------------------------------------------------

Verdict schedule_fidelity() {
  TrainConfig cfg;
  cfg.epochs = 30;
  std::vector<double> got;
  for (std::size_t e = 0; e < 30; ++e) got.push_back(lr_at(e, cfg));
  std::vector<double> want(15, 0.003);
  want.insert(want.end(), 8, 0.0003);
  want.insert(want.end(), 7, 0.00003);
  std::map<double, int> runs;
  for (double lr : got) ++runs[lr];
  std::string detail;
  for (auto it = runs.rbegin(); it != runs.rend(); ++it) {
    if (!detail.empty()) detail += ", ";
    detail += fmt("%g", it->first) + " x" + std::to_string(it->second);
  }
  return {got == want, detail};
}

// --- 9 -------------------------------------------------------------------

Verdict config_guard() {
  ModelConfig bad;
  bad.attention = true;
  bad.ff = false;
  bool rejected = false;
  try {
    bad.validate();
  } catch (const ConfigError&) {
    rejected = true;
  }
  const fs::path att = work_dir() / "att";
  const int exit_att =
      cli("train --synthetic n=40 --attention --no-ff --epochs 1 --out " + att.string())
          .exit_code;
  rejected = rejected && exit_att == 2 && !fs::exists(att / "checkpoint.efnm");

  const fs::path out = work_dir() / "table2";
  const CliRun r = cli("ablate --synthetic n=40,seed=2 --epochs 1 --batch 16 --grid table2 --out " +
                       out.string());
  // rcc, rds, ff, attention per published row
  const std::vector<std::string> table2 = {"0,0,0,0", "1,0,0,0", "0,1,0,0", "0,0,1,0",
                                           "0,0,1,1", "1,1,0,0", "1,1,1,0", "1,1,1,1",
                                           "1,0,1,0", "1,0,1,1"};
  std::vector<std::string> rows;
  std::istringstream csv(slurp(out / "ablation.csv"));
  std::string line;
  std::getline(csv, line);
  const bool header = line.rfind("rcc,rds,ff,attention", 0) == 0;
  while (std::getline(csv, line)) {
    if (line.empty()) continue;
    rows.push_back(line.substr(0, 7));
  }
  const bool grid_ok = r.exit_code == 0 && header && rows == table2;
  Verdict v;
  v.pass = rejected && grid_ok;
  v.detail = std::string("attention without ff ") + (rejected ? "rejected (exit 2)" : "ACCEPTED") +
             "; table2 grid emitted " + std::to_string(rows.size()) + " rows" +
             (grid_ok ? " matching the table" : " NOT matching the table");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  // Cheap checks first; the training criteria run last.
  const std::vector<Criterion> criteria = {
      {1, "gradient integrity", gradient_integrity},
      {2, "RCC center preservation", rcc_preservation},
      {3, "RDS final map shapes", rds_shapes},
      {4, "metric fidelity", metric_fidelity},
      {7, "determinism and 32-bit round trip", determinism},
      {8, "learning-rate schedule", schedule_fidelity},
      {9, "configuration guard and table2 grid", config_guard},
      {5, "learnability at desk scale", learnability},
      {6, "ablation direction", ablation_direction},
  };
  std::map<int, std::string> lines;
  bool all = true;
  // Optional arguments pick a subset of criterion ids.
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    std::cerr << "criterion " << c.id << ": " << c.name << " ...\n";
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    std::string line = std::string(v.pass ? "PASS" : "FAIL") + "  criterion " +
                       std::to_string(c.id) + " (" + c.name + "): " + v.detail;
    std::cerr << line << "  [" << fmt("%.0f", seconds_since(t0)) << " s]\n";
    lines[c.id] = std::move(line);
    all = all && v.pass;
  }
  for (const auto& [id, line] : lines) std::cout << line << "\n";
  return all ? 0 : 1;
}
