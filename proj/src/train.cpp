#include "effnet/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ostream>
#include <sstream>

#include "effnet/errors.hpp"
#include "effnet/ops.hpp"

namespace effnet {

using nlohmann::json;

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348'5546'0000'0000ULL;

double round_sig15(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.15g", x);
  return std::strtod(buf, nullptr);
}

// Copies normalized images ds[order[begin..end)] into a [B,3,H,W] buffer.
Tensor make_batch(const std::vector<ImagePatch>& images, const ChannelStats& norm) {
  const std::size_t h = images.front().height, w = images.front().width;
  const std::size_t per = 3 * h * w;
  std::vector<double> buf(images.size() * per);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != h || images[i].width != w) {
      throw ShapeError("batch: image " + images[i].source_id + " is " +
                       std::to_string(images[i].width) + "x" +
                       std::to_string(images[i].height) + ", batch uses " +
                       std::to_string(w) + "x" + std::to_string(h));
    }
    normalize_into(images[i], norm.mean, norm.std,
                   std::span<double>(buf.data() + i * per, per));
  }
  return Tensor::from({images.size(), 3, h, w}, std::move(buf));
}

json norm_json(const ChannelStats& s) { return {{"mean", s.mean}, {"std", s.std}}; }

std::string flag_mark(bool on) { return on ? "✓" : ""; }

ModelConfig with_flags(ModelConfig m, const FlagTuple& f) {
  m.rcc = f.rcc;
  m.rds = f.rds;
  m.ff = f.ff;
  m.attention = f.attention;
  return m;
}

// Left-aligned columns padded by display width.
std::string align(const std::vector<std::vector<std::string>>& rows) {
  auto shown = [](const std::string& s) {
    std::size_t n = 0;
    for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;
    return n;
  };
  std::vector<std::size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], shown(r[c]));
  }
  std::ostringstream os;
  for (const auto& r : rows) {
    std::string line;
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (c) line += "  ";
      line += r[c];
      if (c + 1 < r.size()) line += std::string(width[c] - shown(r[c]), ' ');
    }
    os << line << '\n';
  }
  return os.str();
}

std::string csv_num(const Metric& m) {
  if (!m) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", *m);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch size must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("train: base learning rate must be positive");
  if (!(lr_decay_factor >= 1.0)) throw ConfigError("train: decay factor must be >= 1");
  for (std::size_t i = 0; i < milestone_fractions.size(); ++i) {
    const double f = milestone_fractions[i];
    if (!(f > 0.0 && f < 1.0)) {
      throw ConfigError("train: milestone fraction " + std::to_string(f) + " outside (0, 1)");
    }
    if (i > 0 && !(f > milestone_fractions[i - 1])) {
      throw ConfigError("train: milestone fractions must be strictly increasing");
    }
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("train: Adam epsilon must be positive");
}

std::vector<std::size_t> TrainConfig::milestones() const {
  std::vector<std::size_t> out;
  for (double f : milestone_fractions) {
    out.push_back(static_cast<std::size_t>(std::llround(f * static_cast<double>(epochs))));
  }
  return out;
}

json to_json(const TrainConfig& cfg) {
  const auto& a = cfg.augment;
  return {{"model", to_json(cfg.model)},
          {"epochs", cfg.epochs},
          {"batch_size", cfg.batch_size},
          {"base_lr", cfg.base_lr},
          {"lr_decay_factor", cfg.lr_decay_factor},
          {"milestone_fractions", cfg.milestone_fractions},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"adam_epsilon", cfg.adam_epsilon},
          {"seed", cfg.seed},
          {"threshold", cfg.threshold},
          {"augment",
           {{"pad", a.pad},
            {"crop", a.crop},
            {"center", a.center},
            {"fill", a.fill == PadFill::reflect ? "reflect" : "constant"},
            {"fill_value", a.fill_value},
            {"h_flip_prob", a.h_flip_prob},
            {"v_flip_prob", a.v_flip_prob}}}};
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  if (epoch >= cfg.epochs) {
    throw UsageError("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                     std::to_string(cfg.epochs) + ")");
  }
  int passed = 0;
  for (auto m : cfg.milestones()) passed += epoch >= m;
  return round_sig15(cfg.base_lr / std::pow(cfg.lr_decay_factor, passed));
}

Adam::Adam(ParameterList params, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), b1_(beta1), b2_(beta2), eps_(epsilon) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (!params_[k].tensor.has_grad()) continue;
    for (double g : params_[k].tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("Adam: non-finite gradient in " + params_[k].name);
      }
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor t = params_[k].tensor;
    if (!t.has_grad()) continue;
    auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1_ * m[i] + (1.0 - b1_) * g[i];
      v[i] = b2_ * v[i] + (1.0 - b2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    Tensor t = p.tensor;
    t.zero_grad();
  }
}

std::vector<TensorRecord> Adam::state_records() const {
  std::vector<TensorRecord> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (int which = 0; which < 2; ++which) {
      TensorRecord r;
      r.name = (which == 0 ? "adam.m." : "adam.v.") + params_[k].name;
      r.shape = params_[k].tensor.shape();
      const auto& src = which == 0 ? m_[k] : v_[k];
      r.values.assign(src.begin(), src.end());
      out.push_back(std::move(r));
    }
  }
  return out;
}

void Adam::load_state(const Checkpoint& ckpt, std::uint64_t steps) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    for (int which = 0; which < 2; ++which) {
      const std::string name = (which == 0 ? "adam.m." : "adam.v.") + params_[k].name;
      const TensorRecord* r = ckpt.find(name);
      if (!r || r->values.size() != params_[k].tensor.numel()) {
        throw DataError("checkpoint: missing or mis-sized optimizer record " + name);
      }
      auto& dst = which == 0 ? m_[k] : v_[k];
      dst.assign(r->values.begin(), r->values.end());
    }
  }
  t_ = steps;
}

std::vector<double> predict(const EffNetMini& model, const Dataset& ds,
                            const ChannelStats& norm, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<double> probs;
  probs.reserve(ds.size());
  for (std::size_t start = 0; start < ds.size(); start += batch_size) {
    const std::size_t end = std::min(ds.size(), start + batch_size);
    std::vector<ImagePatch> chunk(ds.images.begin() + static_cast<long>(start),
                                  ds.images.begin() + static_cast<long>(end));
    Tensor logits = model.forward(make_batch(chunk, norm));
    for (double z : logits.data()) probs.push_back(sigmoid_scalar(z));
  }
  return probs;
}

TrainResult train(const TrainConfig& cfg_in, const Dataset& train_set, const Dataset& val_set,
                  const TrainOptions& options) {
  TrainConfig cfg = cfg_in;
  cfg.model.seed = cfg.seed;
  cfg.validate();
  if (train_set.size() == 0) throw UsageError("train: empty training set");
  if (val_set.size() == 0) throw UsageError("train: empty validation set");
  const auto t0 = std::chrono::steady_clock::now();

  const ChannelStats norm = channel_stats(train_set.images);
  AugmentConfig aug = cfg.augment;
  aug.channel_mean = norm.mean;
  aug.channel_std = norm.std;
  aug.seed = cfg.seed;
  if (cfg.model.rcc) aug.validate(train_set.images.front().height);

  EffNetMini model(cfg.model);
  Adam adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_epsilon);

  RunRecord run;
  run.config_label = cfg.model.flags_label();
  run.config = to_json(cfg);
  run.seed = cfg.seed;
  run.dataset_digest = train_set.manifest_digest;
  run.norm = norm;

  const std::size_t n = train_set.size();
  const std::vector<int> val_labels = val_set.labels();
  std::uint64_t global_step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochStats st;
    st.epoch = epoch;
    st.lr = lr_at(epoch, cfg);

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    CounterRng shuffle = CounterRng(cfg.seed).split(kShuffleStream).split(epoch);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    std::vector<double> scores;
    std::vector<int> labels;
    double loss_sum = 0.0;
    std::size_t step_in_epoch = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step_in_epoch) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::vector<ImagePatch> batch;
      std::vector<double> targets;
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t idx = order[j];
        CounterRng rng = augmentation_stream(cfg.seed, epoch, idx);
        batch.push_back(augment_training(train_set.images[idx], aug, cfg.model.rcc, rng));
        targets.push_back(train_set.images[idx].label);
        labels.push_back(train_set.images[idx].label);
      }
      try {
        Tensor logits = model.forward(make_batch(batch, norm));
        Tensor loss = bce_with_logits(logits, targets);
        for (double z : logits.data()) scores.push_back(sigmoid_scalar(z));
        loss_sum += loss.item() * static_cast<double>(end - start);
        loss.backward();
        adam.step(st.lr);
        adam.zero_grad();
      } catch (const NumericError& e) {
        throw NumericError("training diverged at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step_in_epoch) + " (global step " +
                           std::to_string(global_step) + "): " + e.what());
      }
      ++global_step;
    }
    st.train_loss = loss_sum / static_cast<double>(n);
    st.train = evaluate_scores(scores, labels, cfg.threshold);
    st.val = evaluate_scores(predict(model, val_set, norm, cfg.batch_size), val_labels,
                             cfg.threshold);
    if (options.log) {
      *options.log << run.config_label << " epoch " << epoch + 1 << "/" << cfg.epochs
                   << " lr " << st.lr << " loss " << st.train_loss << " train_auc "
                   << format_metric(st.train.auc) << " val_acc " << format_metric(st.val.acc)
                   << " val_auc " << format_metric(st.val.auc) << std::endl;
    }
    run.epochs.push_back(std::move(st));
  }

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  ckpt.model = cfg.model;
  ckpt.state = {{"train_config", run.config},
                {"epochs_completed", cfg.epochs},
                {"adam_steps", adam.steps()},
                {"normalization", norm_json(norm)},
                {"dataset_digest", train_set.manifest_digest}};
  ckpt.records = tensor_records(model.parameters());
  for (auto& r : adam.state_records()) ckpt.records.push_back(std::move(r));
  if (!options.checkpoint.empty()) {
    save_checkpoint(options.checkpoint, ckpt);
    run.checkpoint_path = options.checkpoint.string();
  }
  run.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.record = std::move(run);
  result.model.emplace(std::move(model));
  return result;
}

std::string epochs_csv(const RunRecord& run) {
  std::ostringstream os;
  os << "config,seed,epoch,lr,train_loss,train_acc,train_auc,val_acc,val_auc,val_sen,"
        "val_spe,val_f\n";
  for (const auto& e : run.epochs) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", e.train_loss);
    os << run.config_label << ',' << run.seed << ',' << e.epoch + 1 << ',' << csv_num(e.lr)
       << ',' << buf << ',' << csv_num(e.train.acc) << ',' << csv_num(e.train.auc) << ','
       << csv_num(e.val.acc) << ',' << csv_num(e.val.auc) << ',' << csv_num(e.val.sen) << ','
       << csv_num(e.val.spe) << ',' << csv_num(e.val.f) << '\n';
  }
  return os.str();
}

std::string epochs_table(const RunRecord& run) {
  std::vector<std::vector<std::string>> rows{
      {"Epoch", "LR", "Loss", "Train ACC(%)", "Train AUC(%)", "Val ACC(%)", "Val AUC(%)"}};
  for (const auto& e : run.epochs) {
    char lr[32], loss[32];
    std::snprintf(lr, sizeof lr, "%g", e.lr);
    std::snprintf(loss, sizeof loss, "%.4f", e.train_loss);
    rows.push_back({std::to_string(e.epoch + 1), lr, loss, format_metric(e.train.acc, 2, 100),
                    format_metric(e.train.auc, 2, 100), format_metric(e.val.acc, 2, 100),
                    format_metric(e.val.auc, 2, 100)});
  }
  return align(rows);
}

ChannelStats checkpoint_norm(const Checkpoint& ckpt) {
  try {
    const auto& n = ckpt.state.at("normalization");
    ChannelStats s;
    s.mean = n.at("mean").get<std::array<double, 3>>();
    s.std = n.at("std").get<std::array<double, 3>>();
    return s;
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: no normalization statistics: ") + e.what());
  }
}

MetricReport evaluate(const Checkpoint& ckpt, const Dataset& ds, double threshold) {
  const EffNetMini model = restore_model(ckpt);
  return evaluate_scores(predict(model, ds, checkpoint_norm(ckpt)), ds.labels(), threshold);
}

std::vector<FlagTuple> table2_grid() {
  //      rcc    rds    ff     attention
  return {{false, false, false, false}, {true, false, false, false},
          {false, true, false, false},  {false, false, true, false},
          {false, false, true, true},   {true, true, false, false},
          {true, true, true, false},    {true, true, true, true},
          {true, false, true, false},   {true, false, true, true}};
}

std::vector<FlagTuple> parse_grid(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  std::vector<FlagTuple> out;
  bool header = false;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line != "rcc,rds,ff,attention") {
        throw ConfigError("grid: header must be 'rcc,rds,ff,attention', got '" + line + "'");
      }
      header = true;
      continue;
    }
    std::array<bool, 4> v{};
    std::istringstream cells(line);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(cells, cell, ',')) {
      if (k >= 4 || (cell != "0" && cell != "1")) {
        throw ConfigError("grid row " + std::to_string(row) + ": expected four 0/1 cells, got '" +
                          line + "'");
      }
      v[k++] = cell == "1";
    }
    if (k != 4) {
      throw ConfigError("grid row " + std::to_string(row) + ": expected four 0/1 cells, got '" +
                        line + "'");
    }
    out.push_back({v[0], v[1], v[2], v[3]});
  }
  if (out.empty()) throw ConfigError("grid: no rows");
  return out;
}

std::vector<AblationRow> ablate(const TrainConfig& base, const std::vector<FlagTuple>& grid,
                                const Dataset& train_set, const Dataset& val_set,
                                std::ostream* log) {
  if (grid.empty()) throw ConfigError("ablate: empty grid");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    try {
      with_flags(base.model, grid[i]).validate();
    } catch (const ConfigError& e) {
      throw ConfigError("ablate: grid row " + std::to_string(i + 1) + " rejected: " + e.what());
    }
  }
  std::vector<AblationRow> rows;
  for (const auto& flags : grid) {
    TrainConfig cfg = base;
    cfg.model = with_flags(base.model, flags);
    TrainOptions opt;
    opt.log = log;
    rows.push_back({flags, train(cfg, train_set, val_set, opt).record});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "rcc,rds,ff,attention,acc,auc,seed\n";
  for (const auto& r : rows) {
    const auto& v = r.run.last().val;
    os << r.flags.rcc << ',' << r.flags.rds << ',' << r.flags.ff << ',' << r.flags.attention
       << ',' << csv_num(v.acc) << ',' << csv_num(v.auc) << ',' << r.run.seed << '\n';
  }
  return os.str();
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::vector<std::vector<std::string>> cells{
      {"RCC", "RDS", "FF", "Attention", "ACC(%)", "AUC(%)"}};
  for (const auto& r : rows) {
    const auto& v = r.run.last().val;
    cells.push_back({flag_mark(r.flags.rcc), flag_mark(r.flags.rds), flag_mark(r.flags.ff),
                     flag_mark(r.flags.attention), format_metric(v.acc, 2, 100),
                     format_metric(v.auc, 2, 100)});
  }
  return align(cells);
}

}  // namespace effnet
