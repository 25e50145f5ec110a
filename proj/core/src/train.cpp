#include "eqprune/train.hpp"

#include <chrono>
#include <cstdio>
#include <limits>
#include <numeric>

#include "eqprune/compression.hpp"
#include "eqprune/losses.hpp"
#include "eqprune/random.hpp"

namespace eqprune {
namespace {

constexpr std::uint64_t kShuffleTag = 0x5eed;
constexpr std::uint64_t kDropoutTag = 0xd509;

template <typename T>
std::size_t argmax_row(const T* row, std::size_t n) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < n; ++c) {
    if (row[c] > row[best]) best = c;
  }
  return best;
}

void require_nonempty(const Split& s, const char* what) {
  if (s.empty()) throw DataError(std::string(what) + " split is empty");
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
  if (stop_patience == 0) throw ConfigError("stop_patience must be >= 1");
  if (device != "cpu") throw ConfigError("unsupported device '" + device + "'");
}

void FineTuneConfig::validate() const {
  if (!(excellent_drop > 0.0 && excellent_drop <= acceptable_drop)) {
    throw ConfigError("need 0 < excellent_drop <= acceptable_drop");
  }
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) {
    throw ConfigError("plateau_factor must be in (0,1)");
  }
  if (!(trigger_drop >= 0.0)) throw ConfigError("trigger_drop must be >= 0");
  if (!(ft_lr > 0.0)) throw ConfigError("ft_lr must be > 0");
  if (!(plateau_threshold >= 0.0)) throw ConfigError("plateau_threshold must be >= 0");
  if (plateau_patience == 0 || max_epochs == 0 || stop_patience == 0 || batch_size == 0) {
    throw ConfigError("fine-tune patience, epochs and batch size must be >= 1");
  }
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
}

std::string metrics_jsonl(const RunMetrics& m) {
  std::string out;
  for (const auto& e : m.epochs) {
    const nlohmann::json j = {{"epoch", e.epoch},         {"train_loss", e.train_loss},
                              {"train_acc", e.train_acc}, {"val_acc", e.val_acc},
                              {"lr", e.lr}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

nlohmann::json metrics_summary(const RunMetrics& m) {
  nlohmann::json j = {{"epochs", m.epochs.size()},      {"best_epoch", m.best_epoch},
                      {"best_val_acc", m.best_val_acc}, {"stopped_early", m.stopped_early},
                      {"config_hash", m.config_hash},   {"seed", m.seed}};
  j["test_acc"] = m.test_acc ? nlohmann::json(*m.test_acc) : nlohmann::json(nullptr);
  return j;
}

std::string config_hash(const nlohmann::json& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : config.dump()) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"lr", cfg.lr},
          {"weight_decay", cfg.weight_decay},
          {"batch_size", cfg.batch_size},
          {"max_epochs", cfg.max_epochs},
          {"stop_patience", cfg.stop_patience},
          {"seed", cfg.seed},
          {"device", cfg.device}};
}

nlohmann::json to_json(const FineTuneConfig& cfg) {
  return {{"trigger_drop", cfg.trigger_drop},
          {"ft_lr", cfg.ft_lr},
          {"plateau_factor", cfg.plateau_factor},
          {"plateau_patience", cfg.plateau_patience},
          {"plateau_threshold", cfg.plateau_threshold},
          {"excellent_drop", cfg.excellent_drop},
          {"acceptable_drop", cfg.acceptable_drop},
          {"max_epochs", cfg.max_epochs},
          {"stop_patience", cfg.stop_patience},
          {"batch_size", cfg.batch_size},
          {"weight_decay", cfg.weight_decay},
          {"seed", cfg.seed}};
}

template <typename T>
Trainer<T>::Trainer(Model<T>& model, std::uint64_t seed, std::size_t batch_size,
                    double weight_decay, LossSpec<T> loss)
    : model_(model), seed_(seed), batch_size_(batch_size), weight_decay_(weight_decay),
      loss_(loss) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (loss.kind == LossKind::distill && loss.teacher == nullptr) {
    throw ConfigError("distillation needs a teacher model");
  }
}

template <typename T>
EpochStats Trainer<T>::run_epoch(const Split& data, double lr) {
  require_nonempty(data, "training");
  ++epoch_;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(derive_seed(seed_, kShuffleTag), epoch_));
  rng.shuffle(order.begin(), order.end());
  model_.reseed_dropout(derive_seed(derive_seed(seed_, kDropoutTag), epoch_));

  auto params = model_.params();
  if (adam_.size() != params.size()) adam_.assign(params.size(), AdamState<T>{});
  const AdamHyper hyper{.lr = lr, .weight_decay = weight_decay_};

  double loss_sum = 0;
  std::size_t correct = 0;
  std::vector<std::int32_t> labels;
  for (std::size_t first = 0; first < order.size(); first += batch_size_) {
    const std::size_t count = std::min(batch_size_, order.size() - first);
    const std::span<const std::size_t> idx(order.data() + first, count);
    const Tensor<T> x = data.gather<T>(idx);
    labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = data.labels[idx[i]];

    model_.zero_grad();
    const Tensor<T> logits = model_.forward(x, Mode::train);
    LossResult<T> loss;
    if (loss_.kind == LossKind::ce) {
      loss = softmax_cross_entropy(logits, labels);
    } else {
      const Tensor<T> teacher = loss_.teacher->forward(x, Mode::eval);
      loss = distill_loss(logits, teacher, labels, loss_.temperature, loss_.alpha);
    }
    model_.backward(loss.grad);
    for (std::size_t p = 0; p < params.size(); ++p) {
      adam_step(*params[p].value, *params[p].grad, adam_[p], hyper);
    }
    loss_sum += static_cast<double>(loss.loss) * static_cast<double>(count);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      if (argmax_row(logits.data() + i * classes, classes) == static_cast<std::size_t>(labels[i])) {
        ++correct;
      }
    }
  }
  model_.zero_grad();
  const double n = static_cast<double>(data.size());
  return {loss_sum / n, static_cast<double>(correct) / n};
}

template <typename T>
std::vector<std::int32_t> predict(Model<T>& model, const Split& data, std::size_t batch_size) {
  require_nonempty(data, "evaluation");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::int32_t> out;
  out.reserve(data.size());
  for (std::size_t first = 0; first < data.size(); first += batch_size) {
    const std::size_t count = std::min(batch_size, data.size() - first);
    const Tensor<T> logits = model.forward(data.batch<T>(first, count), Mode::eval);
    const std::size_t classes = logits.dim(1);
    for (std::size_t i = 0; i < count; ++i) {
      out.push_back(static_cast<std::int32_t>(argmax_row(logits.data() + i * classes, classes)));
    }
  }
  return out;
}

template <typename T>
double evaluate(Model<T>& model, const Split& data, std::size_t batch_size) {
  const auto pred = predict(model, data, batch_size);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

template <typename T>
RunMetrics train(Model<T>& model, const RotatedDataset& dataset, const TrainConfig& cfg,
                 LossSpec<T> loss) {
  cfg.validate();
  require_nonempty(dataset.train, "training");
  require_nonempty(dataset.val, "validation");
  const auto start = std::chrono::steady_clock::now();
  RunMetrics m;
  m.seed = cfg.seed;
  m.config_hash = config_hash(to_json(cfg));
  m.best_val_acc = -1;

  Trainer<T> trainer(model, cfg.seed, cfg.batch_size, cfg.weight_decay, loss);
  StateDict best = model.state();
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const EpochStats s = trainer.run_epoch(dataset.train, cfg.lr);
    const double val = evaluate(model, dataset.val);
    m.epochs.push_back({epoch, s.loss, s.acc, val, cfg.lr});
    if (val > m.best_val_acc) {
      m.best_val_acc = val;
      m.best_epoch = epoch;
      best = model.state();
    }
    if (epoch - m.best_epoch >= cfg.stop_patience && epoch < cfg.max_epochs) {
      m.stopped_early = true;
      break;
    }
  }
  model.load_state(best);
  m.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return m;
}

PlateauScheduler::PlateauScheduler(double lr, double factor, std::size_t patience,
                                   double threshold)
    : lr_(lr), factor_(factor), threshold_(threshold), patience_(patience),
      best_(-std::numeric_limits<double>::infinity()) {
  if (!(factor > 0.0 && factor < 1.0)) throw ConfigError("plateau factor must be in (0,1)");
  if (patience == 0) throw ConfigError("plateau patience must be >= 1");
}

double PlateauScheduler::step(double metric) {
  if (metric > best_ + threshold_) {
    best_ = metric;
    num_bad_ = 0;
  } else {
    ++num_bad_;
  }
  if (num_bad_ >= patience_) {
    lr_ *= factor_;
    ++reductions_;
    num_bad_ = 0;
  }
  return lr_;
}

std::string_view verdict_name(Verdict v) {
  switch (v) {
    case Verdict::skip: return "skip";
    case Verdict::excellent: return "excellent";
    case Verdict::acceptable: return "acceptable";
    case Verdict::degraded: return "degraded";
  }
  return "?";
}

FineTuneController::FineTuneController(const FineTuneConfig& cfg, double baseline_acc)
    : cfg_(cfg), baseline_(baseline_acc),
      scheduler_(cfg.ft_lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_threshold) {
  cfg.validate();
}

bool FineTuneController::begin(double initial_acc) {
  if (started_) throw StateError("fine-tune controller already started");
  started_ = true;
  best_acc_ = initial_acc;
  triggered_ = drop(initial_acc) > cfg_.trigger_drop;
  if (!triggered_) {
    finished_ = true;
    verdict_ = Verdict::skip;
  }
  return triggered_;
}

bool FineTuneController::observe(double val_acc) {
  if (!started_ || finished_) throw StateError("fine-tune controller is not running");
  ++epochs_;
  improved_last_ = val_acc > best_acc_;
  if (improved_last_) {
    best_acc_ = val_acc;
    best_epoch_ = epochs_;
  }
  if (drop(val_acc) < cfg_.excellent_drop) {
    finished_ = true;
    verdict_ = Verdict::excellent;
    return false;
  }
  scheduler_.step(val_acc);
  if (epochs_ >= cfg_.max_epochs || epochs_ - best_epoch_ >= cfg_.stop_patience) {
    finished_ = true;
    verdict_ = drop(best_acc_) < cfg_.acceptable_drop ? Verdict::acceptable : Verdict::degraded;
    return false;
  }
  return true;
}

Verdict FineTuneController::verdict() const {
  if (!verdict_) throw StateError("fine-tune verdict requested before the run finished");
  return *verdict_;
}

template <typename T>
FineTuneResult adaptive_finetune(Model<T>& model, double baseline_acc,
                                 const RotatedDataset& dataset, const FineTuneConfig& cfg) {
  require_nonempty(dataset.train, "training");
  const auto start = std::chrono::steady_clock::now();
  FineTuneController ctl(cfg, baseline_acc);
  FineTuneResult r;
  r.metrics.seed = cfg.seed;
  r.metrics.config_hash = config_hash(to_json(cfg));
  r.initial_val_acc = evaluate(model, dataset.val);
  r.triggered = ctl.begin(r.initial_val_acc);
  if (r.triggered) {
    Trainer<T> trainer(model, cfg.seed, cfg.batch_size, cfg.weight_decay);
    StateDict best = model.state();
    bool more = true;
    while (more) {
      const double lr = ctl.lr();
      r.lr_schedule.push_back(lr);
      const EpochStats s = trainer.run_epoch(dataset.train, lr);
      const double val = evaluate(model, dataset.val);
      r.metrics.epochs.push_back({trainer.epochs_run(), s.loss, s.acc, val, lr});
      more = ctl.observe(val);
      if (ctl.improved_last()) best = model.state();
    }
    model.load_state(best);
    r.metrics.stopped_early = ctl.epochs() < cfg.max_epochs;
  }
  r.verdict = ctl.verdict();
  r.metrics.best_epoch = ctl.best_epoch();
  r.metrics.best_val_acc = ctl.best_acc();
  r.final_val_acc = ctl.best_acc();
  r.metrics.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

#define EQPRUNE_INSTANTIATE(T)                                                                  \
  template class Trainer<T>;                                                                    \
  template double evaluate(Model<T>&, const Split&, std::size_t);                               \
  template std::vector<std::int32_t> predict(Model<T>&, const Split&, std::size_t);             \
  template RunMetrics train(Model<T>&, const RotatedDataset&, const TrainConfig&, LossSpec<T>); \
  template FineTuneResult adaptive_finetune(Model<T>&, double, const RotatedDataset&,           \
                                            const FineTuneConfig&);
EQPRUNE_INSTANTIATE(float)
EQPRUNE_INSTANTIATE(double)
#undef EQPRUNE_INSTANTIATE

}  // namespace eqprune
