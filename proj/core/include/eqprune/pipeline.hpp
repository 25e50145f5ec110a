#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eqprune/checkpoint.hpp"
#include "eqprune/dataset.hpp"
#include "eqprune/train.hpp"

namespace eqprune {

inline constexpr int kSummarySchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;

struct DataConfig {
  std::filesystem::path root;  // empty: EQPRUNE_DATA_ROOT
  RotationMode mode = RotationMode::exact90;
  SplitSizes sizes;
};

struct DistillConfig {
  bool enabled = true;
  double temperature = 4.0;
  double alpha = 0.5;
};

struct EquicheckConfig {
  std::size_t samples = 32;
  double tol = 1e-4;
};

struct PipelineConfig {
  DataConfig data;
  Arch teacher = Arch::base_cnn;
  Arch student = Arch::efficient_eq;
  TrainConfig train;
  DistillConfig distill;
  FineTuneConfig finetune;
  std::vector<double> prune_ratios{0.3, 0.5};
  bool quantize = true;
  EquicheckConfig equicheck;
  std::filesystem::path out = "runs/desk";
  std::uint64_t seed = 42;

  /// Distillation runs only with a distinct teacher.
  bool uses_teacher() const { return distill.enabled && teacher != student; }
  /// ConfigError on bad values, a data root that does not exist, or ratios
  /// outside (0,1).
  void validate() const;
  std::filesystem::path data_root() const;
};

/// Unknown keys are rejected; missing keys keep their defaults.
PipelineConfig parse_pipeline_config(const nlohmann::json& j);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
nlohmann::json to_json(const PipelineConfig& cfg);

/// "p30" for 0.3, "p12_5" for 0.125: the ratio in percent.
std::string ratio_tag(double ratio);

struct Footprint {
  std::size_t params = 0;
  std::size_t float_bytes = 0;  // 4 bytes per parameter
  std::size_t int8_bytes = 0;   // linear weights at 1 byte, everything else at 4
};

template <typename T>
Footprint footprint(const Model<T>& model);

/// Runs pipeline stages against one output directory. Every stage reloads its
/// inputs from checkpoints there, so stages can run one per process.
/// Layout under `out`:
///   config.json, manifest.json, summary.json, timing.json
///   checkpoints/<name>.eqcp, stages/<stage>.json, metrics/<stage>.jsonl
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig cfg);

  /// All stages in order, then summary.json. ValidationError when the
  /// equivariance check fails (after the summary is written).
  void run_all();

  void stage_train();
  void stage_distill();
  void stage_prune(double ratio);
  void stage_finetune(double ratio);
  void stage_quantize();
  /// Writes the stage file either way; returns whether every model passed.
  bool stage_equicheck();

  /// Collects every stage file into summary.json and returns it.
  nlohmann::json write_summary();

  const PipelineConfig& config() const { return cfg_; }
  const RotatedDataset& dataset();
  std::filesystem::path checkpoint_path(const std::string& name) const;
  std::filesystem::path stage_path(const std::string& stage) const;

 private:
  template <typename F>
  void run_stage(const std::string& name, F&& body);
  void write_stage(const std::string& stage, nlohmann::json row);
  Model<float> load(const std::string& name) const;
  void save(const Model<float>& model, const std::string& name) const;
  /// Name of the checkpoint that prune and quantize start from.
  std::string reference_model() const;
  nlohmann::json model_row(Model<float>& model, const std::string& name);

  PipelineConfig cfg_;
  std::optional<RotatedDataset> data_;
  std::optional<MnistPaths> paths_;
  std::map<std::string, double> timing_;
};

/// Per-stage comparison table built from the stage files in `run_dir`. Rows
/// cover every stage present plus every stage the run's config.json expects;
/// missing values render as "absent".
nlohmann::json build_report(const std::filesystem::path& run_dir);
std::string render_report_markdown(const nlohmann::json& report);

/// Percentage points regained by fine-tuning, rounded to 2 decimals.
double recovery_pp(double pruned_pct, double finetuned_pct);

}  // namespace eqprune
