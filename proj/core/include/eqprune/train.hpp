#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "eqprune/dataset.hpp"
#include "eqprune/model.hpp"
#include "eqprune/optim.hpp"

namespace eqprune {

struct TrainConfig {
  double lr = 0.01;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t max_epochs = 50;
  std::size_t stop_patience = 15;  // epochs without a new best val accuracy
  std::uint64_t seed = 0;
  std::string device = "cpu";

  /// ConfigError on a negative lr, zero batch size or epoch count, or a
  /// device other than cpu. lr = 0 is accepted (a frozen run).
  void validate() const;
};

struct FineTuneConfig {
  double trigger_drop = 0.02;
  double ft_lr = 0.001;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 10;
  double plateau_threshold = 1e-4;
  double excellent_drop = 0.01;
  double acceptable_drop = 0.02;
  std::size_t max_epochs = 50;
  std::size_t stop_patience = 20;
  std::size_t batch_size = 128;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0;
  double train_acc = 0;
  double val_acc = 0;
  double lr = 0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::size_t best_epoch = 0;  // 0 when the initial model was never beaten
  double best_val_acc = 0;
  std::optional<double> test_acc;
  double wall_seconds = 0;
  std::string config_hash;
  std::uint64_t seed = 0;
  bool stopped_early = false;
};

/// One JSON object per epoch, newline separated.
std::string metrics_jsonl(const RunMetrics& m);
/// Everything but wall time, so equal runs serialize identically.
nlohmann::json metrics_summary(const RunMetrics& m);

/// FNV-1a of the canonical JSON dump, as 16 hex digits.
std::string config_hash(const nlohmann::json& config);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const FineTuneConfig& cfg);

enum class LossKind { ce, distill };

template <typename T>
struct LossSpec {
  LossKind kind = LossKind::ce;
  Model<T>* teacher = nullptr;  // required for distill, run in eval mode
  double temperature = 4.0;
  double alpha = 0.5;
};

struct EpochStats {
  double loss = 0;
  double acc = 0;
};

/// Adam optimizer state plus the per-epoch shuffle, for driving epochs one at
/// a time. Sample order for epoch e depends only on (seed, e).
template <typename T>
class Trainer {
 public:
  Trainer(Model<T>& model, std::uint64_t seed, std::size_t batch_size, double weight_decay,
          LossSpec<T> loss = {});

  EpochStats run_epoch(const Split& data, double lr);
  std::size_t epochs_run() const { return epoch_; }

 private:
  Model<T>& model_;
  std::uint64_t seed_;
  std::size_t batch_size_;
  double weight_decay_;
  LossSpec<T> loss_;
  std::vector<AdamState<T>> adam_;
  std::size_t epoch_ = 0;
};

/// Top-1 accuracy over `data` in order; argmax ties go to the lower class.
/// DataError on an empty split.
template <typename T>
double evaluate(Model<T>& model, const Split& data, std::size_t batch_size = 256);

/// Predicted class of every sample, in order.
template <typename T>
std::vector<std::int32_t> predict(Model<T>& model, const Split& data, std::size_t batch_size = 256);

/// Trains on dataset.train, selects on dataset.val. The returned model holds
/// the best-val state (earliest epoch on ties) and early stopping fires after
/// `stop_patience` epochs without a new best. test_acc is left unset.
template <typename T>
RunMetrics train(Model<T>& model, const RotatedDataset& dataset, const TrainConfig& cfg,
                 LossSpec<T> loss = {});

/// Multiplies lr by `factor` once `patience` consecutive steps have failed to
/// beat the best metric by more than `threshold`, then restarts the count.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, double factor, std::size_t patience, double threshold = 1e-4);

  double step(double metric);
  double lr() const { return lr_; }
  std::size_t reductions() const { return reductions_; }
  std::size_t num_bad() const { return num_bad_; }

 private:
  double lr_, factor_, threshold_;
  std::size_t patience_;
  double best_;
  std::size_t num_bad_ = 0;
  std::size_t reductions_ = 0;
};

enum class Verdict { skip, excellent, acceptable, degraded };

std::string_view verdict_name(Verdict v);

/// Control logic of adaptive fine-tuning, fed one val accuracy per epoch.
class FineTuneController {
 public:
  FineTuneController(const FineTuneConfig& cfg, double baseline_acc);

  /// Val accuracy of the pruned model; returns whether fine-tuning runs.
  bool begin(double initial_acc);
  /// Val accuracy after an epoch; returns whether another epoch follows.
  bool observe(double val_acc);

  bool triggered() const { return triggered_; }
  bool finished() const { return finished_; }
  Verdict verdict() const;
  /// Learning rate for the next epoch.
  double lr() const { return scheduler_.lr(); }
  std::size_t epochs() const { return epochs_; }
  /// Epoch holding the best val accuracy so far (0 = the initial model).
  std::size_t best_epoch() const { return best_epoch_; }
  double best_acc() const { return best_acc_; }
  bool improved_last() const { return improved_last_; }
  double drop(double acc) const { return baseline_ - acc; }

 private:
  FineTuneConfig cfg_;
  double baseline_;
  PlateauScheduler scheduler_;
  bool triggered_ = false, finished_ = false, started_ = false, improved_last_ = false;
  std::optional<Verdict> verdict_;
  std::size_t epochs_ = 0, best_epoch_ = 0;
  double best_acc_ = 0;
};

struct FineTuneResult {
  RunMetrics metrics;
  Verdict verdict = Verdict::skip;
  bool triggered = false;
  double initial_val_acc = 0;
  double final_val_acc = 0;
  std::vector<double> lr_schedule;
};

/// Runs the controller against real training. The model ends at the best val
/// checkpoint seen (including the untouched pruned model).
template <typename T>
FineTuneResult adaptive_finetune(Model<T>& model, double baseline_acc,
                                 const RotatedDataset& dataset, const FineTuneConfig& cfg);

}  // namespace eqprune
