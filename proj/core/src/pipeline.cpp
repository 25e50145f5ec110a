#include "eqprune/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "eqprune/compression.hpp"
#include "eqprune/random.hpp"

namespace eqprune {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr std::uint64_t kTeacherInitTag = 0x7eac;
constexpr std::uint64_t kStudentInitTag = 0x57d0;
constexpr std::uint64_t kTeacherTrainTag = 0x7ea1;
constexpr std::uint64_t kStudentTrainTag = 0x57d1;
constexpr std::uint64_t kFineTuneTag = 0xf17e;

void check_keys(const json& j, const char* where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError(std::string("unknown key '") + key + "' in " + where);
    }
  }
}

template <typename V>
void read(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

double pct(double acc) { return 100.0 * acc; }

// Canonical stage order: train, distill, prune/finetune by ratio, quantize,
// equicheck, then anything else by name.
std::pair<int, std::string> stage_rank(const std::string& stage) {
  if (stage == "train") return {0, ""};
  if (stage == "distill") return {1, ""};
  for (const char* prefix : {"prune_p", "finetune_p"}) {
    const std::string p(prefix);
    if (stage.rfind(p, 0) == 0) {
      char key[32];
      std::string num = stage.substr(p.size());
      std::replace(num.begin(), num.end(), '_', '.');
      std::snprintf(key, sizeof key, "%012.6f%c", std::atof(num.c_str()), p[0] == 'p' ? 'a' : 'b');
      return {2, key};
    }
  }
  if (stage == "quantize") return {3, ""};
  if (stage == "equicheck") return {4, ""};
  return {5, stage};
}

void sort_stages(std::vector<std::string>& stages) {
  std::sort(stages.begin(), stages.end(),
            [](const std::string& a, const std::string& b) { return stage_rank(a) < stage_rank(b); });
  stages.erase(std::unique(stages.begin(), stages.end()), stages.end());
}

std::vector<std::string> expected_stages(const PipelineConfig& cfg) {
  std::vector<std::string> out{"train"};
  if (cfg.uses_teacher()) out.push_back("distill");
  for (double p : cfg.prune_ratios) {
    out.push_back("prune_" + ratio_tag(p));
    out.push_back("finetune_" + ratio_tag(p));
  }
  if (cfg.quantize) out.push_back("quantize");
  if (is_equivariant_arch(cfg.student)) out.push_back("equicheck");
  return out;
}

json hashed_config(const PipelineConfig& cfg) {
  json j = to_json(cfg);
  j.erase("out");
  j["data"].erase("root");
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void PipelineConfig::validate() const {
  train.validate();
  finetune.validate();
  if (prune_ratios.empty()) throw ConfigError("prune_ratios is empty");
  std::set<std::string> tags;
  for (double p : prune_ratios) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("prune ratio " + std::to_string(p) + " not in (0,1)");
    if (!tags.insert(ratio_tag(p)).second) throw ConfigError("duplicate prune ratio " + ratio_tag(p));
  }
  if (!(distill.temperature > 0.0)) throw ConfigError("distill.temperature must be > 0");
  if (!(distill.alpha >= 0.0 && distill.alpha <= 1.0)) throw ConfigError("distill.alpha not in [0,1]");
  if (equicheck.samples == 0) throw ConfigError("equicheck.samples must be >= 1");
  if (!(equicheck.tol >= 0.0)) throw ConfigError("equicheck.tol must be >= 0");
  if (out.empty()) throw ConfigError("out is empty");
  const fs::path root = data_root();
  if (!fs::is_directory(root)) throw ConfigError("data root " + root.string() + " is not a directory");
}

fs::path PipelineConfig::data_root() const {
  if (!data.root.empty()) return data.root;
  if (auto env = data_root_from_env()) return *env;
  throw ConfigError("no data root: set data.root or EQPRUNE_DATA_ROOT");
}

PipelineConfig parse_pipeline_config(const json& j) {
  PipelineConfig c;
  try {
    check_keys(j, "config", {"data", "teacher", "student", "train", "distill", "finetune",
                             "prune_ratios", "quantize", "equicheck", "out", "seed"});
    if (j.contains("data")) {
      const json& d = j.at("data");
      check_keys(d, "data", {"root", "mode", "train", "val", "test"});
      if (d.contains("root")) c.data.root = d.at("root").get<std::string>();
      if (d.contains("mode")) c.data.mode = parse_rotation_mode(d.at("mode").get<std::string>());
      read(d, "train", c.data.sizes.train);
      read(d, "val", c.data.sizes.val);
      read(d, "test", c.data.sizes.test);
    }
    if (j.contains("teacher")) c.teacher = parse_arch(j.at("teacher").get<std::string>());
    if (j.contains("student")) c.student = parse_arch(j.at("student").get<std::string>());
    if (j.contains("train")) {
      const json& t = j.at("train");
      check_keys(t, "train", {"lr", "weight_decay", "batch_size", "max_epochs", "stop_patience",
                              "device"});
      read(t, "lr", c.train.lr);
      read(t, "weight_decay", c.train.weight_decay);
      read(t, "batch_size", c.train.batch_size);
      read(t, "max_epochs", c.train.max_epochs);
      read(t, "stop_patience", c.train.stop_patience);
      read(t, "device", c.train.device);
    }
    if (j.contains("distill")) {
      const json& d = j.at("distill");
      check_keys(d, "distill", {"enabled", "temperature", "alpha"});
      read(d, "enabled", c.distill.enabled);
      read(d, "temperature", c.distill.temperature);
      read(d, "alpha", c.distill.alpha);
    }
    if (j.contains("finetune")) {
      const json& f = j.at("finetune");
      check_keys(f, "finetune", {"trigger_drop", "ft_lr", "plateau_factor", "plateau_patience",
                                 "plateau_threshold", "excellent_drop", "acceptable_drop",
                                 "max_epochs", "stop_patience", "batch_size", "weight_decay"});
      read(f, "trigger_drop", c.finetune.trigger_drop);
      read(f, "ft_lr", c.finetune.ft_lr);
      read(f, "plateau_factor", c.finetune.plateau_factor);
      read(f, "plateau_patience", c.finetune.plateau_patience);
      read(f, "plateau_threshold", c.finetune.plateau_threshold);
      read(f, "excellent_drop", c.finetune.excellent_drop);
      read(f, "acceptable_drop", c.finetune.acceptable_drop);
      read(f, "max_epochs", c.finetune.max_epochs);
      read(f, "stop_patience", c.finetune.stop_patience);
      read(f, "batch_size", c.finetune.batch_size);
      read(f, "weight_decay", c.finetune.weight_decay);
    }
    read(j, "prune_ratios", c.prune_ratios);
    read(j, "quantize", c.quantize);
    if (j.contains("equicheck")) {
      const json& e = j.at("equicheck");
      check_keys(e, "equicheck", {"samples", "tol"});
      read(e, "samples", c.equicheck.samples);
      read(e, "tol", c.equicheck.tol);
    }
    if (j.contains("out")) c.out = j.at("out").get<std::string>();
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  try {
    return parse_pipeline_config(json::parse(in));
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json to_json(const PipelineConfig& cfg) {
  json train = to_json(cfg.train);
  train.erase("seed");
  json finetune = to_json(cfg.finetune);
  finetune.erase("seed");
  return {{"data",
           {{"root", cfg.data.root.string()},
            {"mode", rotation_mode_name(cfg.data.mode)},
            {"train", cfg.data.sizes.train},
            {"val", cfg.data.sizes.val},
            {"test", cfg.data.sizes.test}}},
          {"teacher", arch_name(cfg.teacher)},
          {"student", arch_name(cfg.student)},
          {"train", train},
          {"distill",
           {{"enabled", cfg.distill.enabled},
            {"temperature", cfg.distill.temperature},
            {"alpha", cfg.distill.alpha}}},
          {"finetune", finetune},
          {"prune_ratios", cfg.prune_ratios},
          {"quantize", cfg.quantize},
          {"equicheck", {{"samples", cfg.equicheck.samples}, {"tol", cfg.equicheck.tol}}},
          {"out", cfg.out.string()},
          {"seed", cfg.seed}};
}

std::string ratio_tag(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", ratio * 100.0);
  std::string s(buf);
  s.erase(s.find_last_not_of('0') + 1);
  if (s.back() == '.') s.pop_back();
  std::replace(s.begin(), s.end(), '.', '_');
  return "p" + s;
}

template <typename T>
Footprint footprint(const Model<T>& model) {
  Footprint f;
  f.params = count_params(model);
  f.float_bytes = 4 * f.params;
  f.int8_bytes = quantize_model(model).second.effective_bytes;
  return f;
}

template Footprint footprint(const Model<float>&);
template Footprint footprint(const Model<double>&);

double recovery_pp(double pruned_pct, double finetuned_pct) {
  return std::round((finetuned_pct - pruned_pct) * 100.0) / 100.0;
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  fs::create_directories(cfg_.out);
  write_json(cfg_.out / "config.json", to_json(cfg_));
}

const RotatedDataset& Pipeline::dataset() {
  if (!data_) {
    paths_ = locate_mnist(cfg_.data_root());
    const ImagePool fit = load_pool(paths_->train_images, paths_->train_labels);
    const ImagePool test = load_pool(paths_->test_images, paths_->test_labels);
    data_ = make_rotated(fit, test, cfg_.data.mode, cfg_.seed, cfg_.data.sizes);
    write_json(cfg_.out / "manifest.json", dataset_manifest(*data_, *paths_));
  }
  return *data_;
}

fs::path Pipeline::checkpoint_path(const std::string& name) const {
  return cfg_.out / "checkpoints" / (name + ".eqcp");
}

fs::path Pipeline::stage_path(const std::string& stage) const {
  return cfg_.out / "stages" / (stage + ".json");
}

Model<float> Pipeline::load(const std::string& name) const {
  const fs::path p = checkpoint_path(name);
  if (!fs::exists(p)) throw DataError("missing checkpoint " + p.string() + " (run the earlier stage)");
  return load_checkpoint<float>(p);
}

void Pipeline::save(const Model<float>& model, const std::string& name) const {
  save_checkpoint(model, checkpoint_path(name));
}

std::string Pipeline::reference_model() const { return "student"; }

template <typename F>
void Pipeline::run_stage(const std::string& name, F&& body) {
  const auto start = std::chrono::steady_clock::now();
  try {
    body();
  } catch (const Error& e) {
    throw Error(e.category(), "stage " + name + ": " + e.what());
  }
  timing_[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  json timing = fs::exists(cfg_.out / "timing.json") ? read_json(cfg_.out / "timing.json") : json::object();
  timing[name] = timing_[name];
  write_json(cfg_.out / "timing.json", timing);
}

void Pipeline::write_stage(const std::string& stage, json row) {
  row["stage"] = stage;
  row["schema_version"] = kSummarySchemaVersion;
  write_json(stage_path(stage), row);
}

json Pipeline::model_row(Model<float>& model, const std::string& name) {
  const Footprint f = footprint(model);
  const auto& d = dataset();
  return {{"model", name},
          {"arch", arch_name(model.arch())},
          {"params", f.params},
          {"float_bytes", f.float_bytes},
          {"int8_bytes", f.int8_bytes},
          {"val_acc", evaluate(model, d.val)},
          {"test_acc", evaluate(model, d.test)}};
}

void Pipeline::run_all() {
  stage_train();
  if (cfg_.uses_teacher()) stage_distill();
  for (double p : cfg_.prune_ratios) {
    stage_prune(p);
    stage_finetune(p);
  }
  if (cfg_.quantize) stage_quantize();
  const bool invariant = !is_equivariant_arch(cfg_.student) || stage_equicheck();
  write_summary();
  if (!invariant) throw ValidationError("equivariance check failed, see " + stage_path("equicheck").string());
}

void Pipeline::stage_train() {
  run_stage("train", [&] {
    const bool teacher = cfg_.uses_teacher();
    const Arch arch = teacher ? cfg_.teacher : cfg_.student;
    const std::string name = teacher ? "teacher" : "student";
    Model<float> model =
        build_model<float>(arch, derive_seed(cfg_.seed, teacher ? kTeacherInitTag : kStudentInitTag));
    TrainConfig tc = cfg_.train;
    tc.seed = derive_seed(cfg_.seed, teacher ? kTeacherTrainTag : kStudentTrainTag);
    RunMetrics m = train(model, dataset(), tc);
    save(model, name);
    write_text(cfg_.out / "metrics" / "train.jsonl", metrics_jsonl(m));
    json row = model_row(model, name);
    m.test_acc = row["test_acc"].get<double>();
    row["run"] = metrics_summary(m);
    row["reduction_pct"] = 0.0;
    write_stage("train", row);
  });
}

void Pipeline::stage_distill() {
  run_stage("distill", [&] {
    if (!cfg_.uses_teacher()) throw ConfigError("distillation needs a teacher distinct from the student");
    Model<float> teacher = load("teacher");
    Model<float> student = build_model<float>(cfg_.student, derive_seed(cfg_.seed, kStudentInitTag));
    TrainConfig tc = cfg_.train;
    tc.seed = derive_seed(cfg_.seed, kStudentTrainTag);
    LossSpec<float> loss{LossKind::distill, &teacher, cfg_.distill.temperature, cfg_.distill.alpha};
    RunMetrics m = train(student, dataset(), tc, loss);
    save(student, "student");
    write_text(cfg_.out / "metrics" / "distill.jsonl", metrics_jsonl(m));
    json row = model_row(student, "student");
    m.test_acc = row["test_acc"].get<double>();
    row["run"] = metrics_summary(m);
    const std::size_t teacher_params = count_params(teacher);
    row["teacher_params"] = teacher_params;
    row["reduction_pct"] = reduction_pct(teacher_params, row["params"].get<std::size_t>());
    row["temperature"] = cfg_.distill.temperature;
    row["alpha"] = cfg_.distill.alpha;
    write_stage("distill", row);
  });
}

void Pipeline::stage_prune(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("prune ratio " + std::to_string(ratio) + " not in (0,1)");
  const std::string tag = ratio_tag(ratio);
  run_stage("prune_" + tag, [&] {
    Model<float> ref = load(reference_model());
    const auto& d = dataset();
    const double base_val = evaluate(ref, d.val), base_test = evaluate(ref, d.test);
    auto [pruned, report] = prune_model(ref, ratio);
    save(pruned, "pruned_" + tag);
    json row = model_row(pruned, "pruned_" + tag);
    json layers = json::array();
    for (const auto& l : report.layers) {
      layers.push_back({{"layer", l.layer}, {"out_before", l.out_before}, {"kept", l.kept.size()}});
    }
    row["ratio"] = ratio;
    row["layers"] = layers;
    row["params_before"] = report.params_before;
    row["params_after"] = report.params_after;
    row["reduction_pct"] = report.reduction_pct;
    row["baseline_val_acc"] = base_val;
    row["baseline_test_acc"] = base_test;
    row["val_drop"] = base_val - row["val_acc"].get<double>();
    write_stage("prune_" + tag, row);
  });
}

void Pipeline::stage_finetune(double ratio) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("prune ratio " + std::to_string(ratio) + " not in (0,1)");
  const std::string tag = ratio_tag(ratio);
  run_stage("finetune_" + tag, [&] {
    Model<float> ref = load(reference_model());
    Model<float> model = load("pruned_" + tag);
    const auto& d = dataset();
    const double base_val = evaluate(ref, d.val), base_test = evaluate(ref, d.test);
    const double pruned_test = evaluate(model, d.test);
    FineTuneConfig fc = cfg_.finetune;
    fc.seed = derive_seed(derive_seed(cfg_.seed, kFineTuneTag), static_cast<std::uint64_t>(std::llround(ratio * 1e6)));
    FineTuneResult r = adaptive_finetune(model, base_val, d, fc);
    save(model, "finetuned_" + tag);
    write_text(cfg_.out / "metrics" / ("finetune_" + tag + ".jsonl"), metrics_jsonl(r.metrics));
    json row = model_row(model, "finetuned_" + tag);
    r.metrics.test_acc = row["test_acc"].get<double>();
    row["ratio"] = ratio;
    row["triggered"] = r.triggered;
    row["trigger_split"] = "val";
    row["verdict"] = verdict_name(r.verdict);
    row["epochs"] = r.metrics.epochs.size();
    row["initial_val_acc"] = r.initial_val_acc;
    row["baseline_val_acc"] = base_val;
    row["baseline_test_acc"] = base_test;
    row["pruned_test_acc"] = pruned_test;
    row["recovery_pp"] = recovery_pp(pct(pruned_test), pct(row["test_acc"].get<double>()));
    row["gap_to_baseline_pp"] = pct(base_test) - pct(row["test_acc"].get<double>());
    row["lr_schedule"] = r.lr_schedule;
    row["run"] = metrics_summary(r.metrics);
    row["reduction_pct"] = reduction_pct(count_params(ref), row["params"].get<std::size_t>());
    write_stage("finetune_" + tag, row);
  });
}

void Pipeline::stage_quantize() {
  run_stage("quantize", [&] {
    std::vector<std::string> sources{reference_model()};
    for (double p : cfg_.prune_ratios) {
      const std::string name = "finetuned_" + ratio_tag(p);
      if (fs::exists(checkpoint_path(name))) sources.push_back(name);
    }
    const auto& d = dataset();
    json rows = json::array();
    for (const auto& src : sources) {
      Model<float> model = load(src);
      auto [q, report] = quantize_model(model);
      save(q, "quantized_" + src);
      json row = model_row(q, "quantized_" + src);
      const double float_test = evaluate(model, d.test);
      double worst = 0;
      for (const auto& l : report.layers) worst = std::max(worst, l.max_roundtrip_ratio);
      row["source"] = src;
      row["float_test_acc"] = float_test;
      row["gap_pp"] = pct(row["test_acc"].get<double>()) - pct(float_test);
      row["max_roundtrip_over_scale"] = worst;
      row["linear_weight_bytes_f32"] = report.linear_weight_bytes_f32;
      row["linear_weight_bytes_i8"] = report.linear_weight_bytes_i8;
      row["reduction_pct"] = reduction_pct(report.float_bytes, report.effective_bytes);
      rows.push_back(row);
    }
    write_stage("quantize", {{"rows", rows}});
  });
}

bool Pipeline::stage_equicheck() {
  bool all = true;
  run_stage("equicheck", [&] {
    std::vector<std::string> names{reference_model()};
    for (double p : cfg_.prune_ratios) names.push_back("finetuned_" + ratio_tag(p));
    const std::size_t n = names.size();
    for (std::size_t i = 0; i < n; ++i) names.push_back("quantized_" + names[i]);
    const auto& d = dataset();
    const std::size_t count = std::min(cfg_.equicheck.samples, d.test.size());
    const Tensor<float> x = d.test.batch<float>(0, count);
    json rows = json::array();
    for (const auto& name : names) {
      if (!fs::exists(checkpoint_path(name))) continue;
      Model<float> model = load(name);
      json row = {{"model", name}, {"arch", arch_name(model.arch())}};
      if (!is_equivariant_arch(model.arch())) {
        row["skipped"] = "not equivariant";
      } else {
        const InvarianceReport rep = check_invariance(model, x, cfg_.equicheck.tol);
        row["max_logit_diff"] = rep.max_logit_diff;
        row["passed"] = rep.passed;
        all = all && rep.passed;
      }
      rows.push_back(row);
    }
    write_stage("equicheck", {{"rows", rows}, {"samples", count}, {"tol", cfg_.equicheck.tol}, {"passed", all}});
  });
  return all;
}

json Pipeline::write_summary() {
  json stages = json::array();
  for (const auto& s : expected_stages(cfg_)) {
    if (fs::exists(stage_path(s))) stages.push_back(read_json(stage_path(s)));
  }
  json manifest = fs::exists(cfg_.out / "manifest.json") ? read_json(cfg_.out / "manifest.json") : json(nullptr);
  json summary = {{"schema", "eqprune.summary"},
                  {"schema_version", kSummarySchemaVersion},
                  {"config_hash", config_hash(hashed_config(cfg_))},
                  {"seed", cfg_.seed},
                  {"teacher", cfg_.uses_teacher() ? json(arch_name(cfg_.teacher)) : json(nullptr)},
                  {"student", arch_name(cfg_.student)},
                  {"trigger_split", "val"},
                  {"data", manifest},
                  {"stages", stages}};
  write_json(cfg_.out / "summary.json", summary);
  return summary;
}

// ---------------------------------------------------------------------------
// Report

namespace {

json cell(const json& row, const char* key) {
  return row.contains(key) ? row.at(key) : json(nullptr);
}

json report_row(const std::string& stage, const json& row) {
  json r = {{"stage", stage},
            {"status", "present"},
            {"model", cell(row, "model")},
            {"test_acc_pct", row.contains("test_acc") ? json(pct(row.at("test_acc").get<double>())) : json(nullptr)},
            {"params", cell(row, "params")},
            {"float_bytes", cell(row, "float_bytes")},
            {"int8_bytes", cell(row, "int8_bytes")},
            {"reduction_pct", cell(row, "reduction_pct")},
            {"recovery_pp", nullptr},
            {"note", nullptr}};
  if (row.contains("verdict")) r["note"] = row.at("verdict");
  return r;
}

json absent_row(const std::string& stage) {
  json r = {{"stage", stage}, {"status", "absent"}};
  for (const char* k : {"model", "test_acc_pct", "params", "float_bytes", "int8_bytes",
                        "reduction_pct", "recovery_pp", "note"}) {
    r[k] = "absent";
  }
  return r;
}

std::string fmt_cell(const json& v, int decimals) {
  if (v.is_null()) return "-";
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "yes" : "no";
  if (v.is_number_integer() || v.is_number_unsigned()) return v.dump();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v.get<double>());
  return buf;
}

}  // namespace

json build_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw DataError("run dir " + run_dir.string() + " does not exist");
  std::vector<std::string> stages;
  const fs::path stage_dir = run_dir / "stages";
  if (fs::is_directory(stage_dir)) {
    for (const auto& e : fs::directory_iterator(stage_dir)) {
      if (e.path().extension() == ".json") stages.push_back(e.path().stem().string());
    }
  }
  if (fs::exists(run_dir / "config.json")) {
    const auto expected = expected_stages(parse_pipeline_config(read_json(run_dir / "config.json")));
    stages.insert(stages.end(), expected.begin(), expected.end());
  }
  sort_stages(stages);

  json rows = json::array();
  std::map<std::string, double> pruned_acc;
  for (const auto& stage : stages) {
    const fs::path p = stage_dir / (stage + ".json");
    if (!fs::exists(p)) {
      rows.push_back(absent_row(stage));
      continue;
    }
    const json row = read_json(p);
    if (row.contains("rows") && stage == "quantize") {
      for (const auto& sub : row.at("rows")) {
        json r = report_row(stage, sub);
        r["note"] = "gap " + fmt_cell(sub.at("gap_pp"), 2) + " pp vs float";
        rows.push_back(r);
      }
      continue;
    }
    if (row.contains("rows") && stage == "equicheck") {
      for (const auto& sub : row.at("rows")) {
        json r = report_row(stage, sub);
        r["note"] = sub.contains("passed") ? json(sub.at("passed").get<bool>() ? "invariant" : "NOT invariant")
                                           : cell(sub, "skipped");
        rows.push_back(r);
      }
      continue;
    }
    json r = report_row(stage, row);
    if (stage.rfind("prune_", 0) == 0 && r["test_acc_pct"].is_number()) {
      pruned_acc[stage.substr(6)] = r["test_acc_pct"].get<double>();
    }
    if (stage.rfind("finetune_", 0) == 0) {
      const auto it = pruned_acc.find(stage.substr(9));
      if (it == pruned_acc.end()) {
        r["recovery_pp"] = "absent";
      } else if (r["test_acc_pct"].is_number()) {
        r["recovery_pp"] = recovery_pp(it->second, r["test_acc_pct"].get<double>());
      }
    }
    rows.push_back(r);
  }
  return {{"schema", "eqprune.report"}, {"schema_version", kReportSchemaVersion}, {"rows", rows}};
}

std::string render_report_markdown(const json& report) {
  std::ostringstream md;
  md << "| Stage | Model | Test acc (%) | Params | Float bytes | INT8 bytes | Reduction (%) | "
        "Recovery (pp) | Note |\n";
  md << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : report.at("rows")) {
    md << "| " << fmt_cell(r.at("stage"), 0) << " | " << fmt_cell(r.at("model"), 0) << " | "
       << fmt_cell(r.at("test_acc_pct"), 2) << " | " << fmt_cell(r.at("params"), 0) << " | "
       << fmt_cell(r.at("float_bytes"), 0) << " | " << fmt_cell(r.at("int8_bytes"), 0) << " | "
       << fmt_cell(r.at("reduction_pct"), 1) << " | " << fmt_cell(r.at("recovery_pp"), 2) << " | "
       << fmt_cell(r.at("note"), 0) << " |\n";
  }
  return md.str();
}

}  // namespace eqprune
