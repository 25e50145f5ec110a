#include "cli.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eqprune/checkpoint.hpp"
#include "eqprune/pipeline.hpp"
#include "eqprune/random.hpp"

namespace eqprune::cli {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<double> ratios;
  double tol = 1e-4;
  std::size_t samples = 32;
  std::string target;  // checkpoint or run dir
};

PipelineConfig resolve_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("--config is required");
  PipelineConfig cfg = load_pipeline_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.out.empty()) cfg.out = o.out;
  return cfg;
}

std::vector<double> ratios_of(const Options& o, const PipelineConfig& cfg) {
  return o.ratios.empty() ? cfg.prune_ratios : o.ratios;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

template <typename T>
json eval_checkpoint(const fs::path& path, const RotatedDataset& data) {
  Model<T> model = load_checkpoint<T>(path);
  return {{"checkpoint", path.filename().string()},
          {"arch", arch_name(model.arch())},
          {"params", count_params(model)},
          {"val_acc", evaluate(model, data.val)},
          {"test_acc", evaluate(model, data.test)}};
}

template <typename T>
json equicheck_checkpoint(const fs::path& path, const Options& o, const RotatedDataset* data) {
  Model<T> model = load_checkpoint<T>(path);
  Tensor<T> x;
  std::string source;
  if (data) {
    x = data->test.batch<T>(0, std::min(o.samples, data->test.size()));
    source = "test split";
  } else {
    const Shape& in = model.input_shape();
    x = Tensor<T>({o.samples, in[0], in[1], in[2]});
    Rng rng(o.seed.value_or(0));
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<T>(rng.normal());
    source = "gaussian";
  }
  const InvarianceReport rep = check_invariance(model, x, o.tol);
  return {{"checkpoint", path.filename().string()},
          {"arch", arch_name(model.arch())},
          {"input", source},
          {"samples", x.dim(0)},
          {"max_logit_diff", rep.max_logit_diff},
          {"tol", rep.tol},
          {"passed", rep.passed}};
}

Precision checkpoint_precision(const fs::path& path) {
  return read_checkpoint_info(read_file(path)).precision;
}

int dispatch(const std::string& cmd, const Options& o, std::ostream& out) {
  if (cmd == "report") {
    fs::path dir = !o.target.empty() ? fs::path(o.target) : fs::path(o.out);
    if (dir.empty() && !o.config.empty()) dir = load_pipeline_config(o.config).out;
    if (dir.empty()) throw ConfigError("report needs a run directory");
    const json report = build_report(dir);
    const std::string md = render_report_markdown(report);
    std::ofstream(dir / "report.json") << report.dump(2) << "\n";
    std::ofstream(dir / "report.md") << md;
    out << md;
    return kOk;
  }

  if (cmd == "eval" || cmd == "equicheck") {
    if (o.target.empty()) throw ConfigError(cmd + " needs a checkpoint path");
    const fs::path ckpt = o.target;
    std::optional<Pipeline> pipe;
    if (!o.config.empty()) pipe.emplace(resolve_config(o));
    if (cmd == "eval") {
      if (!pipe) throw ConfigError("eval needs --config for its data splits");
      const json r = checkpoint_precision(ckpt) == Precision::f32
                         ? eval_checkpoint<float>(ckpt, pipe->dataset())
                         : eval_checkpoint<double>(ckpt, pipe->dataset());
      out << r.dump(2) << "\n";
      return kOk;
    }
    const RotatedDataset* data = pipe ? &pipe->dataset() : nullptr;
    const json r = checkpoint_precision(ckpt) == Precision::f32
                       ? equicheck_checkpoint<float>(ckpt, o, data)
                       : equicheck_checkpoint<double>(ckpt, o, data);
    out << r.dump(2) << "\n";
    return r.at("passed").get<bool>() ? kOk : kValidation;
  }

  Pipeline pipe(resolve_config(o));
  const PipelineConfig& cfg = pipe.config();
  std::vector<std::string> stages;
  if (cmd == "pipeline") {
    try {
      pipe.run_all();
    } catch (const ValidationError&) {
      out << render_report_markdown(build_report(cfg.out));
      throw;
    }
    out << render_report_markdown(build_report(cfg.out));
    return kOk;
  } else if (cmd == "train") {
    pipe.stage_train();
    stages.push_back("train");
  } else if (cmd == "distill") {
    pipe.stage_distill();
    stages.push_back("distill");
  } else if (cmd == "prune") {
    for (double p : ratios_of(o, cfg)) {
      pipe.stage_prune(p);
      stages.push_back("prune_" + ratio_tag(p));
    }
  } else if (cmd == "finetune") {
    for (double p : ratios_of(o, cfg)) {
      pipe.stage_finetune(p);
      stages.push_back("finetune_" + ratio_tag(p));
    }
  } else if (cmd == "quantize") {
    pipe.stage_quantize();
    stages.push_back("quantize");
  }
  pipe.write_summary();
  for (const auto& s : stages) out << read_json_file(pipe.stage_path(s)).dump(2) << "\n";
  return kOk;
}

}  // namespace

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::config: return kConfig;
    case ErrorCategory::data: return kData;
    case ErrorCategory::numeric: return kNumeric;
    case ErrorCategory::validation: return kValidation;
  }
  return kOther;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Equivariant CNN compression toolkit: train, distill, prune, fine-tune, quantize"};
  app.require_subcommand(1);
  Options o;

  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "pipeline config JSON");
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "override the output directory");
  };
  struct Sub {
    const char* name;
    const char* help;
  };
  const Sub subs[] = {
      {"train", "train the first model (teacher, or student without distillation)"},
      {"distill", "train the student against the saved teacher"},
      {"prune", "structured pruning of the student's hidden linear layers"},
      {"finetune", "adaptive fine-tuning of pruned checkpoints"},
      {"quantize", "INT8 dynamic quantization of the student and fine-tuned models"},
      {"eval", "accuracy of a checkpoint on the val and test splits"},
      {"equicheck", "rotation invariance of a checkpoint's logits"},
      {"pipeline", "every stage in order, then summary and report"},
      {"report", "comparison table of a run directory"},
  };
  for (const Sub& s : subs) {
    CLI::App* sub = app.add_subcommand(s.name, s.help);
    add_common(sub);
    const std::string name = s.name;
    if (name == "prune" || name == "finetune") {
      sub->add_option("--ratio", o.ratios, "pruning ratio in (0,1); default: config list");
    }
    if (name == "eval" || name == "equicheck") {
      sub->add_option("checkpoint", o.target, "checkpoint file")->required();
    }
    if (name == "equicheck") {
      sub->add_option("--tol", o.tol, "max logit difference");
      sub->add_option("--samples", o.samples, "number of inputs")->check(CLI::PositiveNumber);
    }
    if (name == "report") sub->add_option("run_dir", o.target, "run directory");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kConfig;
  }

  try {
    return dispatch(app.get_subcommands().front()->get_name(), o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kOther;
  }
}

}  // namespace eqprune::cli
