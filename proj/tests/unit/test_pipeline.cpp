#include <gtest/gtest.h>

#include <fstream>

#include "eqprune/pipeline.hpp"
#include "testing.hpp"

namespace eqprune {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("eqprune_pipe_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << j.dump(2);
}

json read(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

TEST(PipelineConfigTest, Defaults) {
  const auto c = parse_pipeline_config(json::object());
  EXPECT_EQ(c.prune_ratios, (std::vector<double>{0.3, 0.5}));
  EXPECT_EQ(c.student, Arch::efficient_eq);
  EXPECT_TRUE(c.quantize);
  EXPECT_DOUBLE_EQ(c.distill.temperature, 4.0);
  EXPECT_DOUBLE_EQ(c.distill.alpha, 0.5);
  EXPECT_EQ(c.data.mode, RotationMode::exact90);
  EXPECT_EQ(c.data.sizes.train, 10000u);
}

TEST(PipelineConfigTest, ParsesNestedValues) {
  const auto c = parse_pipeline_config(json::parse(R"({
    "data": {"root": "/tmp", "mode": "continuous", "train": 100, "val": 20, "test": 30},
    "teacher": "base_cnn", "student": "ultra_efficient_eq",
    "train": {"lr": 0.001, "max_epochs": 3},
    "finetune": {"max_epochs": 7, "plateau_patience": 4},
    "distill": {"enabled": false},
    "prune_ratios": [0.25], "quantize": false, "out": "x/y", "seed": 9
  })"));
  EXPECT_EQ(c.data.root, "/tmp");
  EXPECT_EQ(c.data.mode, RotationMode::continuous);
  EXPECT_EQ(c.data.sizes.test, 30u);
  EXPECT_EQ(c.student, Arch::ultra_efficient_eq);
  EXPECT_DOUBLE_EQ(c.train.lr, 0.001);
  EXPECT_EQ(c.train.max_epochs, 3u);
  EXPECT_EQ(c.finetune.plateau_patience, 4u);
  EXPECT_FALSE(c.uses_teacher());
  EXPECT_EQ(c.prune_ratios, (std::vector<double>{0.25}));
  EXPECT_EQ(c.seed, 9u);
}

TEST(PipelineConfigTest, JsonRoundTrip) {
  auto c = parse_pipeline_config(json::parse(R"({"seed": 3, "prune_ratios": [0.1, 0.7]})"));
  const auto again = parse_pipeline_config(to_json(c));
  EXPECT_EQ(to_json(again), to_json(c));
}

TEST(PipelineConfigTest, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(parse_pipeline_config(json::parse(R"({"epochs": 3})")), ConfigError);
  EXPECT_THROW(parse_pipeline_config(json::parse(R"({"train": {"momentum": 0.9}})")), ConfigError);
  EXPECT_THROW(parse_pipeline_config(json::parse(R"({"student": "vgg"})")), ConfigError);
  EXPECT_THROW(parse_pipeline_config(json::parse(R"({"train": {"lr": "fast"}})")), ConfigError);
}

TEST(PipelineConfigTest, Validation) {
  PipelineConfig c;
  c.data.root = fs::temp_directory_path();
  EXPECT_NO_THROW(c.validate());
  c.prune_ratios = {1.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c.prune_ratios = {0.0};
  EXPECT_THROW(c.validate(), ConfigError);
  c.prune_ratios = {0.5, 0.5};
  EXPECT_THROW(c.validate(), ConfigError);
  c.prune_ratios = {0.5};
  c.data.root = "/definitely/not/here";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(PipelineConfigTest, LoadMissingFile) {
  EXPECT_THROW(load_pipeline_config("/no/such/config.json"), ConfigError);
}

TEST(RatioTag, Format) {
  EXPECT_EQ(ratio_tag(0.3), "p30");
  EXPECT_EQ(ratio_tag(0.5), "p50");
  EXPECT_EQ(ratio_tag(0.125), "p12_5");
  EXPECT_EQ(ratio_tag(0.0125), "p1_25");
  EXPECT_NE(ratio_tag(0.125), ratio_tag(0.0125));
}

TEST(Recovery, PublishedArithmetic) {
  EXPECT_DOUBLE_EQ(recovery_pp(23.22, 93.85), 70.63);
}

TEST(Report, SingleStageDirectory) {
  const auto dir = fresh_dir("single");
  write(dir / "stages" / "train.json",
        {{"stage", "train"}, {"model", "student"}, {"test_acc", 0.5}, {"params", 10},
         {"float_bytes", 40}, {"int8_bytes", 40}, {"reduction_pct", 0.0}});
  const auto report = build_report(dir);
  ASSERT_EQ(report.at("rows").size(), 1u);
  EXPECT_EQ(report.at("rows")[0].at("stage"), "train");
  EXPECT_DOUBLE_EQ(report.at("rows")[0].at("test_acc_pct").get<double>(), 50.0);
  const auto md = render_report_markdown(report);
  EXPECT_NE(md.find("| train | student | 50.00 |"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Report, MissingStageIsAbsent) {
  const auto dir = fresh_dir("absent");
  PipelineConfig c;
  c.prune_ratios = {0.5};
  c.distill.enabled = false;
  write(dir / "config.json", to_json(c));
  write(dir / "stages" / "prune_p50.json",
        {{"stage", "prune_p50"}, {"model", "pruned_p50"}, {"test_acc", 0.2322}, {"params", 5}});
  write(dir / "stages" / "finetune_p50.json",
        {{"stage", "finetune_p50"}, {"model", "finetuned_p50"}, {"test_acc", 0.9385}, {"params", 5},
         {"verdict", "acceptable"}});
  const auto report = build_report(dir);
  std::map<std::string, json> by_stage;
  for (const auto& r : report.at("rows")) by_stage[r.at("stage").get<std::string>()] = r;
  ASSERT_TRUE(by_stage.count("train"));
  EXPECT_EQ(by_stage["train"].at("status"), "absent");
  EXPECT_EQ(by_stage["train"].at("test_acc_pct"), "absent");
  EXPECT_EQ(by_stage["quantize"].at("status"), "absent");
  EXPECT_DOUBLE_EQ(by_stage["finetune_p50"].at("recovery_pp").get<double>(), 70.63);
  const auto md = render_report_markdown(report);
  EXPECT_NE(md.find("absent"), std::string::npos);
  // Rows follow pipeline order.
  EXPECT_LT(md.find("| train |"), md.find("| prune_p50 |"));
  EXPECT_LT(md.find("| prune_p50 |"), md.find("| finetune_p50 |"));
  fs::remove_all(dir);
}

TEST(Report, MissingDirectory) {
  EXPECT_THROW(build_report("/no/such/run"), DataError);
}

PipelineConfig tiny_config(const fs::path& out, const fs::path& root) {
  PipelineConfig c;
  c.data.root = root;
  c.data.sizes = {256, 128, 128};
  c.distill.enabled = false;
  c.train.max_epochs = 1;
  c.train.batch_size = 64;
  c.finetune.max_epochs = 2;
  c.finetune.batch_size = 64;
  c.prune_ratios = {0.5};
  c.equicheck.samples = 8;
  c.out = out;
  c.seed = 7;
  return c;
}

TEST(PipelineRun, TinyRunIsComplete) {
  const auto root = testing::mnist_root();
  if (!root) GTEST_SKIP() << "EQPRUNE_DATA_ROOT not set";
  const auto dir = fresh_dir("tiny");
  Pipeline p(tiny_config(dir, *root));
  p.run_all();
  for (const char* f : {"config.json", "manifest.json", "summary.json", "timing.json",
                        "checkpoints/student.eqcp", "checkpoints/pruned_p50.eqcp",
                        "checkpoints/finetuned_p50.eqcp", "checkpoints/quantized_student.eqcp",
                        "checkpoints/quantized_finetuned_p50.eqcp", "stages/equicheck.json",
                        "metrics/train.jsonl"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  const auto summary = read(dir / "summary.json");
  EXPECT_EQ(summary.at("schema_version"), kSummarySchemaVersion);
  EXPECT_EQ(summary.at("trigger_split"), "val");
  EXPECT_EQ(summary.at("stages").size(), 5u);
  EXPECT_TRUE(read(dir / "stages" / "equicheck.json").at("passed").get<bool>());
  fs::remove_all(dir);
}

TEST(PipelineRun, RerunGivesIdenticalArtifacts) {
  const auto root = testing::mnist_root();
  if (!root) GTEST_SKIP() << "EQPRUNE_DATA_ROOT not set";
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  Pipeline(tiny_config(a, *root)).run_all();
  Pipeline(tiny_config(b, *root)).run_all();
  // The output directory is not part of the hashed config.
  EXPECT_EQ(read(a / "summary.json"), read(b / "summary.json"));
  for (const auto& e : fs::directory_iterator(a / "checkpoints")) {
    EXPECT_EQ(read_file(e.path()), read_file(b / "checkpoints" / e.path().filename())) << e.path();
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(PipelineRun, StageNeedsEarlierCheckpoint) {
  const auto root = testing::mnist_root();
  if (!root) GTEST_SKIP() << "EQPRUNE_DATA_ROOT not set";
  const auto dir = fresh_dir("order");
  Pipeline p(tiny_config(dir, *root));
  try {
    p.stage_prune(0.5);
    ADD_FAILURE() << "prune ran without a student checkpoint";
  } catch (const Error& e) {
    // Stage errors keep their category and gain the stage name.
    EXPECT_EQ(e.category(), ErrorCategory::data);
    EXPECT_NE(std::string(e.what()).find("prune_p50"), std::string::npos);
  }
  EXPECT_THROW(p.stage_prune(1.5), ConfigError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace eqprune
