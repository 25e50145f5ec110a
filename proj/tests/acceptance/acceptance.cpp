// Runs acceptance criteria 1-10 and prints one PASS/FAIL line per criterion.
// Usage: acceptance [work_dir] [--only N,M,...]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "eqprune/checkpoint.hpp"
#include "eqprune/compression.hpp"
#include "eqprune/equivariant.hpp"
#include "eqprune/idx.hpp"
#include "eqprune/pipeline.hpp"
#include "testing.hpp"

namespace {

using namespace eqprune;
using testing::randn;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) {
  return std::chrono::duration<double>(Clock::now() - t).count();
}

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      if (!detail.empty()) detail += "; ";
      detail += what;
    }
  }
};

std::string fmt(const char* f, double v) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

template <typename T>
void randomize(Layer<T>& layer, std::uint64_t seed) {
  std::uint64_t k = 0;
  for (auto& p : layer.params()) *p.value = randn<T>(p.value->shape(), seed + 17 * ++k, 0.5);
}

// 1 -------------------------------------------------------------------------

Outcome equivariance_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto layer_case = [&](const std::string& name, const std::function<std::unique_ptr<Layer<float>>()>& make,
                              const Shape& in, bool invariant, Mode mode) {
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
      auto layer = make();
      randomize(*layer, 1000 + trial);
      const auto x = randn<float>(in, 2000 + trial);
      const auto y = layer->forward(x, mode);
      for (int r = 1; r < 4; ++r) {
        const C4Element g(r);
        const auto lhs = layer->forward(rot90(x, g), mode);
        worst = std::max(worst, static_cast<double>(max_abs_diff(lhs, invariant ? y : rot90(y, g))));
      }
    }
    o.require(worst <= 1e-5, name + fmt(" max diff %.3g", worst));
  };
  layer_case("lift_conv", [] { return std::make_unique<LiftConv<float>>(2, 3, 5); }, {2, 2, 9, 9}, false, Mode::eval);
  layer_case("group_conv", [] { return std::make_unique<GroupConv<float>>(3, 2, 3); }, {2, 3, 4, 7, 7}, false, Mode::eval);
  layer_case("batch_norm/train", [] { return std::make_unique<BatchNorm<float>>(3, true); }, {2, 3, 4, 5, 5}, false, Mode::train);
  layer_case("batch_norm/eval", [] { return std::make_unique<BatchNorm<float>>(3, true); }, {2, 3, 4, 5, 5}, false, Mode::eval);
  layer_case("relu", [] { return std::make_unique<ReLU<float>>(); }, {2, 3, 4, 5, 5}, false, Mode::eval);
  layer_case("group_pool", [] { return std::make_unique<GroupPool<float>>(); }, {2, 3, 4, 6, 6}, false, Mode::eval);
  layer_case("spatial_pool", [] { return std::make_unique<SpatialPool<float>>(); }, {2, 3, 12, 12}, true, Mode::eval);

  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = build_model<float>(Arch::efficient_eq, 300 + trial);
    const auto x = randn<float>({4, 1, 28, 28}, 400 + trial);
    const auto rep = check_invariance(m, x, 1e-4);
    for (double d : rep.max_logit_diff) worst = std::max(worst, d);
  }
  o.require(worst <= 1e-4, fmt("model logit diff %.3g", worst));
  const double secs = seconds_since(t0);
  o.require(secs < 60, fmt("took %.1f s", secs));
  if (o.pass) o.detail = "7 layer cases and the model over 20 trials x r in {1,2,3}; model max diff " + fmt("%.3g", worst) + fmt(", %.1f s", secs);
  return o;
}

// 2 -------------------------------------------------------------------------

Outcome gradient_suite() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0;
  const auto check = [&](const std::string& name, Layer<double>& layer, const Tensor<double>& x, double tol,
                         Mode mode = Mode::train) {
    randomize(layer, 50);
    const double err = grad_check(layer, x, 1e-5, mode);
    worst = std::max(worst, err);
    o.require(err <= tol, name + fmt(" rel err %.3g", err));
  };
  auto relu_input = randn<double>({2, 3, 4, 4}, 5);
  for (std::size_t i = 0; i < relu_input.size(); ++i)
    if (std::abs(relu_input[i]) < 1e-3) relu_input[i] = 0.5;

  Linear<double> linear(7, 5);
  check("linear", linear, randn<double>({3, 7}, 1), 1e-6);
  Conv2d<double> conv(2, 3, 3);
  check("conv2d", conv, randn<double>({2, 2, 5, 5}, 2), 1e-6);
  ReLU<double> relu;
  check("relu", relu, relu_input, 1e-6);
  Dropout<double> dropout(0.3, 3);
  check("dropout", dropout, randn<double>({3, 10}, 3), 1e-6);
  Flatten<double> flatten;
  check("flatten", flatten, randn<double>({2, 3, 4, 4}, 4), 1e-6);
  MaxPool2d<double> maxpool;
  check("maxpool", maxpool, randn<double>({2, 2, 6, 6}, 5), 1e-6);
  BatchNorm<double> bn(2, false);
  check("batch_norm", bn, randn<double>({3, 2, 3, 3}, 6), 1e-5);
  BatchNorm<double> bn_reg(2, true);
  check("batch_norm/regular", bn_reg, randn<double>({2, 2, 4, 3, 3}, 17), 1e-5);
  BatchNorm<double> bn_eval(2, true);
  check("batch_norm/eval", bn_eval, randn<double>({2, 2, 4, 3, 3}, 8), 1e-5, Mode::eval);
  LiftConv<double> lift(2, 3, 3);
  check("lift_conv", lift, randn<double>({2, 2, 5, 5}, 9), 1e-6);
  GroupConv<double> gconv(2, 2, 3);
  check("group_conv", gconv, randn<double>({2, 2, 4, 5, 5}, 10), 1e-6);
  GroupPool<double> gpool;
  check("group_pool", gpool, randn<double>({2, 2, 4, 3, 3}, 11), 1e-6);
  SpatialPool<double> spool;
  check("spatial_pool", spool, randn<double>({2, 2, 8, 8}, 12), 1e-6);

  const double secs = seconds_since(t0);
  o.require(secs < 120, fmt("took %.1f s", secs));
  if (o.pass) o.detail = "13 layer cases, worst rel err " + fmt("%.3g", worst) + fmt(", %.1f s", secs);
  return o;
}

// 3 -------------------------------------------------------------------------

Model<double> masked_original(const Model<double>& m, const PruneReport& rep) {
  Model<double> masked = m;
  for (const auto& rec : rep.layers) {
    std::size_t next = rec.layer + 1;
    while (masked.layer(next).kind() != LayerKind::linear) ++next;
    auto& head = dynamic_cast<Linear<double>&>(masked.layer(next));
    std::vector<bool> keep(rec.out_before, false);
    for (std::size_t k : rec.kept) keep[k] = true;
    for (std::size_t o = 0; o < head.out_features(); ++o)
      for (std::size_t i = 0; i < rec.out_before; ++i)
        if (!keep[i]) head.weight().at(o, i) = 0;
  }
  return masked;
}

Outcome pruning_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    auto m = build_model<double>(Arch::efficient_eq, 100 + trial, 8);
    for (auto& p : m.params())
      if (p.name.find("bias") != std::string::npos) *p.value = randn<double>(p.value->shape(), 500 + trial, 0.1);
    const auto x = randn<double>({4, 1, 8, 8}, 200 + trial);
    for (double p : {0.3, 0.5}) {
      auto [pruned, rep] = prune_model(m, p);
      auto masked = masked_original(m, rep);
      worst = std::max(worst, max_abs_diff(pruned.forward(x, Mode::eval), masked.forward(x, Mode::eval)));
      std::set<std::string> touched;
      for (const auto& l : rep.layers) {
        touched.insert("l" + std::to_string(l.layer) + ".");
        std::size_t next = l.layer + 1;
        while (m.layer(next).kind() != LayerKind::linear) ++next;
        touched.insert("l" + std::to_string(next) + ".");
      }
      const auto after = pruned.state();
      for (const auto& e : m.state()) {
        const std::string prefix = e.name.substr(0, e.name.find('.') + 1);
        if (touched.count(prefix)) continue;
        const auto* a = find_entry(after, e.name);
        o.require(a && *a == e, e.name + " changed by pruning");
      }
    }
  }
  o.require(worst <= 1e-6, fmt("max diff %.3g", worst));
  const double secs = seconds_since(t0);
  o.require(secs < 60, fmt("took %.1f s", secs));
  if (o.pass) o.detail = "20 models x p in {0.3,0.5}, max diff " + fmt("%.3g", worst) + "; conv/BN tensors bit-identical";
  return o;
}

// 4 -------------------------------------------------------------------------

Outcome reduction_arithmetic() {
  Outcome o;
  const double r = reduction_pct(532066, 376000);
  o.require(std::abs(r - 29.3) <= 0.05, fmt("got %.4f", r));
  if (o.pass) o.detail = fmt("reduction(532066, 376000) = %.4f%%", r);
  return o;
}

// 5-8 -----------------------------------------------------------------------

json read_json(const fs::path& p) {
  std::ifstream in(p);
  return json::parse(in);
}

json find_stage(const json& summary, const std::string& name) {
  for (const auto& s : summary.at("stages"))
    if (s.at("stage") == name) return s;
  throw DataError("stage " + name + " missing from summary");
}

PipelineConfig desk_config(const fs::path& root, const fs::path& out) {
  PipelineConfig c;
  c.data.root = root;
  c.data.mode = RotationMode::exact90;
  c.data.sizes = {10000, 2000, 2000};
  c.student = Arch::efficient_eq;
  c.distill.enabled = false;
  c.train.lr = 0.001;
  c.train.max_epochs = 15;
  c.prune_ratios = {0.5};
  c.quantize = true;
  c.out = out;
  c.seed = 42;
  return c;
}

struct DeskRuns {
  bool ok = false;
  std::string error;
  fs::path a, b;
  json summary;
  json timing;
};

DeskRuns desk_runs(const fs::path& work) {
  DeskRuns r;
  const auto root = testing::mnist_root();
  if (!root) {
    r.error = "EQPRUNE_DATA_ROOT not set";
    return r;
  }
  r.a = work / "desk_a";
  r.b = work / "desk_b";
  try {
    for (const auto& dir : {r.a, r.b}) {
      fs::remove_all(dir);
      std::fprintf(stderr, "acceptance: pipeline run in %s\n", dir.c_str());
      Pipeline(desk_config(*root, dir)).run_all();
    }
    r.summary = read_json(r.a / "summary.json");
    r.timing = read_json(r.a / "timing.json");
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

Outcome desk_accuracy(const DeskRuns& d) {
  Outcome o;
  if (!d.ok) {
    o.require(false, d.error);
    return o;
  }
  const json train = find_stage(d.summary, "train");
  const double acc = train.at("test_acc").get<double>();
  const double secs = d.timing.at("train").get<double>();
  const auto epochs = train.at("run").at("epochs").get<std::size_t>();
  o.require(acc >= 0.95, fmt("test acc %.2f%% < 95%%", 100 * acc));
  o.require(epochs <= 15, "more than 15 epochs");
  o.require(secs < 1200, fmt("training took %.0f s", secs));
  o.detail = (o.pass ? "" : o.detail + " | ") + fmt("efficient_eq test acc %.2f%%", 100 * acc) +
             fmt(" after %.0f epochs", static_cast<double>(epochs)) + fmt(" in %.0f s", secs);
  return o;
}

Outcome recovery(const DeskRuns& d) {
  Outcome o;
  if (!d.ok) {
    o.require(false, d.error);
    return o;
  }
  const json ft = find_stage(d.summary, "finetune_p50");
  const double base = ft.at("baseline_test_acc").get<double>();
  const double pruned = ft.at("pruned_test_acc").get<double>();
  const double after = ft.at("test_acc").get<double>();
  const auto epochs = ft.at("epochs").get<std::size_t>();
  const double secs = d.timing.at("finetune_p50").get<double>();
  o.require(ft.at("triggered").get<bool>(),
            fmt("pruning did not cross the trigger (val drop %.4f)",
                ft.at("baseline_val_acc").get<double>() - ft.at("initial_val_acc").get<double>()));
  o.require(100 * (base - after) <= 2.0, fmt("gap to pre-prune %.2f pp", 100 * (base - after)));
  o.require(epochs <= 50, "more than 50 epochs");
  o.require(secs < 1500, fmt("fine-tuning took %.0f s", secs));
  o.detail = (o.pass ? "" : o.detail + " | ") + fmt("test %.2f%%", 100 * base) + fmt(" -> pruned %.2f%%", 100 * pruned) +
             fmt(" -> fine-tuned %.2f%%", 100 * after) + fmt(" in %.0f epochs (", static_cast<double>(epochs)) +
             ft.at("verdict").get<std::string>() + ")";
  return o;
}

Outcome quantization(const DeskRuns& d) {
  Outcome o;
  if (!d.ok) {
    o.require(false, d.error);
    return o;
  }
  const json q = find_stage(d.summary, "quantize");
  std::string parts;
  for (const auto& row : q.at("rows")) {
    const double gap = row.at("gap_pp").get<double>();
    const double rt = row.at("max_roundtrip_over_scale").get<double>();
    const std::string src = row.at("source").get<std::string>();
    o.require(std::abs(gap) <= 1.0, src + fmt(" gap %.2f pp", gap));
    o.require(rt <= 0.5, src + fmt(" round-trip %.4f scale", rt));
    parts += (parts.empty() ? "" : ", ") + src + fmt(" gap %+.2f pp", gap) + fmt(" (round-trip <= %.3f scale)", rt);
  }
  const double secs = d.timing.at("quantize").get<double>();
  o.require(secs < 300, fmt("took %.0f s", secs));
  o.detail = (o.pass ? "" : o.detail + " | ") + parts;
  return o;
}

Outcome determinism(const DeskRuns& d) {
  Outcome o;
  if (!d.ok) {
    o.require(false, d.error);
    return o;
  }
  o.require(read_file(d.a / "summary.json") == read_file(d.b / "summary.json"), "summary.json differs");
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(d.a / "checkpoints")) {
    const fs::path other = d.b / "checkpoints" / e.path().filename();
    o.require(fs::exists(other) && read_file(e.path()) == read_file(other), e.path().filename().string() + " differs");
    ++n;
  }
  std::size_t m = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(d.b / "checkpoints")) ++m;
  o.require(n == m, "checkpoint sets differ");
  if (o.pass) o.detail = "summary.json and " + std::to_string(n) + " checkpoints bit-identical across two runs";
  return o;
}

// 9 -------------------------------------------------------------------------

Outcome controller_suite() {
  Outcome o;
  {
    FineTuneController c(FineTuneConfig{}, 0.95);
    o.require(!c.begin(0.94) && c.verdict() == Verdict::skip, "skip");
  }
  {
    FineTuneController c(FineTuneConfig{}, 0.95);
    c.begin(0.40);
    const std::vector<double> seq{0.6, 0.8, 0.9, 0.93, 0.945, 0.95};
    std::size_t k = 0;
    while (c.observe(seq[k])) ++k;
    o.require(c.verdict() == Verdict::excellent && c.epochs() == 5, "excellent");
  }
  {
    FineTuneController c(FineTuneConfig{}, 0.95);
    c.begin(0.5);
    while (c.observe(0.935)) {
    }
    o.require(c.verdict() == Verdict::acceptable && c.epochs() == 21, "acceptable");
  }
  {
    FineTuneConfig cfg;
    cfg.stop_patience = 100;
    FineTuneController c(cfg, 0.95);
    c.begin(0.5);
    double v = 0.6;
    while (c.observe(v)) v += 0.001;
    o.require(c.verdict() == Verdict::degraded && c.epochs() == 50, "degraded");
  }
  {
    FineTuneController c(FineTuneConfig{}, 0.95);
    c.begin(0.5);
    std::vector<double> lrs;
    for (int e = 0; e < 21; ++e) {
      lrs.push_back(c.lr());
      if (!c.observe(0.7)) break;
    }
    bool ok = lrs.size() == 21 && c.lr() == 0.00025;
    for (std::size_t e = 0; e < lrs.size() && ok; ++e) ok = lrs[e] == (e < 11 ? 0.001 : 0.0005);
    o.require(ok, "halving schedule");
  }
  if (o.pass) o.detail = "skip / excellent / acceptable / degraded verdicts; lr 0.001 x11, 0.0005 x10, then 0.00025";
  return o;
}

// 10 ------------------------------------------------------------------------

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols) {
  std::vector<std::uint8_t> b;
  const auto be32 = [&](std::uint32_t v) {
    for (int k = 3; k >= 0; --k) b.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
  };
  be32(0x00000803);
  be32(n);
  be32(rows);
  be32(cols);
  for (std::uint32_t i = 0; i < n * rows * cols; ++i) b.push_back(static_cast<std::uint8_t>(i * 7));
  return b;
}

Outcome format_suite() {
  Outcome o;
  const auto t0 = Clock::now();

  const auto good = idx_images(3, 4, 5);
  Rng rng(2024);
  std::size_t rejected = 0, accepted = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto b = good;
    if (rng.below(2)) {
      b[rng.below(16)] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    } else {
      b.resize(rng.below(b.size()));
    }
    try {
      const auto img = parse_idx_images(b);
      // Legal only if the header still matches the payload exactly.
      o.require(img.count * img.rows * img.cols == img.pixels.size() && b.size() == 16 + img.pixels.size(),
                "fuzzed IDX accepted inconsistently");
      ++accepted;
    } catch (const FormatError&) {
      ++rejected;
    } catch (const LengthError&) {
      ++rejected;
    }
  }
  o.require(rejected + accepted == 200, "fuzz raised an unexpected error");

  std::size_t archs = 0;
  for (Arch a : {Arch::base_cnn, Arch::efficient_eq, Arch::ultra_efficient_eq}) {
    const auto m = build_model<float>(a, 9);
    const auto bytes = encode_checkpoint(m);
    const auto again = encode_checkpoint(decode_checkpoint<float>(bytes));
    o.require(bytes == again, std::string(arch_name(a)) + " round trip not bit-exact");
    ++archs;
  }
  auto [q, qrep] = quantize_model(prune_model(build_model<float>(Arch::efficient_eq, 9), 0.5).first);
  const auto qbytes = encode_checkpoint(q);
  o.require(encode_checkpoint(decode_checkpoint<float>(qbytes)) == qbytes, "quantized round trip not bit-exact");

  std::size_t caught = 0;
  const std::size_t flips = 100;
  for (std::size_t i = 0; i < flips; ++i) {
    auto b = qbytes;
    const std::size_t pos = 8 + rng.below(b.size() - 12);
    b[pos] ^= static_cast<std::uint8_t>(1u << rng.below(8));
    try {
      decode_checkpoint<float>(b);
    } catch (const CorruptionError&) {
      ++caught;
    } catch (const Error&) {
    }
  }
  o.require(caught == flips, std::to_string(flips - caught) + " payload flips missed by CRC");

  const double secs = seconds_since(t0);
  o.require(secs < 60, fmt("took %.1f s", secs));
  if (o.pass) {
    o.detail = std::to_string(rejected) + "/200 fuzzed IDX rejected, rest consistent; " + std::to_string(archs + 1) +
               " checkpoints round-trip bit-exact; " + std::to_string(caught) + "/" + std::to_string(flips) +
               " CRC flips caught";
  }
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::temp_directory_path() / "eqprune_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
    } else {
      work = a;
    }
  }
  const auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };
  fs::create_directories(work);

  int failed = 0;
  const auto report = [&](int n, const char* name, const Outcome& o) {
    std::printf("[%s] %2d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failed;
  };
  const auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      Outcome o;
      o.require(false, std::string("error: ") + e.what());
      return o;
    }
  };

  if (wanted(1)) report(1, "equivariance", guarded(equivariance_suite));
  if (wanted(2)) report(2, "gradients", guarded(gradient_suite));
  if (wanted(3)) report(3, "pruning oracle", guarded(pruning_oracle));
  if (wanted(4)) report(4, "reduction arithmetic", guarded(reduction_arithmetic));
  if (wanted(5) || wanted(6) || wanted(7) || wanted(8)) {
    const DeskRuns d = desk_runs(work);
    if (wanted(5)) report(5, "desk accuracy", guarded([&] { return desk_accuracy(d); }));
    if (wanted(6)) report(6, "prune recovery", guarded([&] { return recovery(d); }));
    if (wanted(7)) report(7, "quantization", guarded([&] { return quantization(d); }));
    if (wanted(8)) report(8, "determinism", guarded([&] { return determinism(d); }));
  }
  if (wanted(9)) report(9, "controller", guarded(controller_suite));
  if (wanted(10)) report(10, "formats", guarded(format_suite));
  return failed == 0 ? 0 : 1;
}
