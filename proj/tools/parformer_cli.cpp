#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "parformer/analysis.hpp"
#include "parformer/arch.hpp"
#include "parformer/bench.hpp"
#include "parformer/checkpoint.hpp"
#include "parformer/cli.hpp"
#include "parformer/config_io.hpp"
#include "parformer/data.hpp"
#include "parformer/gradcheck.hpp"
#include "parformer/train.hpp"

namespace fs = std::filesystem;
using namespace parformer;

namespace {

struct ModelSource {
  std::string variant;
  std::string config;

  void add_to(CLI::App* cmd) {
    auto* v = cmd->add_option("--variant", variant, "Preset: T, S, M, L or micro");
    auto* c = cmd->add_option("--config", config, "JSON config file");
    v->excludes(c);
  }

  ModelConfig resolve(const std::string& fallback = "") const {
    if (!config.empty()) return load_config(config).model;
    if (!variant.empty()) return preset(variant);
    if (!fallback.empty()) return preset(fallback);
    throw Error("config", "pass --variant or --config");
  }
};

Dataset load_data(const DataConfig& d, const std::string& split, std::uint64_t seed) {
  Dataset ds;
  if (d.source == "synth") {
    if (split != "train" && split != "test") throw Error("data", "unknown split '" + split + "' (train or test)");
    SynthOptions o;
    o.classes = d.classes;
    o.per_class = d.per_class;
    o.size = d.size;
    o.noise = d.noise;
    o.seed = split == "test" ? seed + 1 : seed;
    ds = synth_dataset(o);
  } else {
    ds = load_cifar10_binary(d.source, split);
  }
  if (!d.mean.empty()) {
    if (d.mean.size() != static_cast<std::size_t>(ds.channels())) {
      throw Error("data", "stored normalization has " + std::to_string(d.mean.size()) + " channels, data has " +
                              std::to_string(ds.channels()));
    }
    ds.mean = d.mean;
    ds.stddev = d.stddev;
  }
  return ds;
}

void print_accuracy(const EvalResult& r) {
  std::printf("accuracy: %.4f (%zu/%zu)\n", r.accuracy(), r.correct, r.total);
  std::printf("ties: %zu\n", r.ties);
}

void make_parent_dir(const fs::path& file) {
  std::error_code ec;
  if (file.has_parent_path()) fs::create_directories(file.parent_path(), ec);
  if (ec) throw Error("io", "cannot create directory " + file.parent_path().string() + ": " + ec.message());
}

template <typename T>
void run_train(const ConfigFile& cfg, const Dataset& ds, const TrainConfig& tc, std::uint64_t seed,
               const fs::path& out, const fs::path& curve_path) {
  make_parent_dir(out);
  make_parent_dir(curve_path);
  auto g = build_model<T>(cfg.model, seed);
  const auto res = train(g, ds, tc, [&](const StepRecord& r) {
    if (r.step == 1 || r.step % 50 == 0 || r.step == tc.steps) {
      std::printf("step %5d  loss %.6f  acc %.4f\n", r.step, r.loss, r.acc);
      std::fflush(stdout);
    }
  });
  g.mode = BnMode::infer;
  to_checkpoint(g).save(out);
  save_config(cli::sidecar_path(out), cfg);
  write_curve_csv(curve_path, res.curve);
  print_accuracy(evaluate(g, ds));
  std::printf("checkpoint: %s\n", out.string().c_str());
  std::printf("config: %s\n", cli::sidecar_path(out).string().c_str());
  std::printf("curve: %s\n", curve_path.string().c_str());
}

template <typename T>
EvalResult run_eval(const ModelConfig& model, const Checkpoint& ck, const Dataset& ds, int batch) {
  const auto g = cli::restore_graph<T>(model, ck);
  return evaluate(g, ds, batch);
}

template <typename T>
std::pair<std::size_t, std::size_t> run_fold(const ModelConfig& model, const Checkpoint& ck, const fs::path& out) {
  const auto g = cli::restore_graph<T>(model, ck);
  if (g.folded) throw Error("state", "checkpoint is already folded");
  make_parent_dir(out);
  const auto f = fold_batchnorm(g);
  to_checkpoint(f).save(out);
  return {g.layers.size(), f.layers.size()};
}

ConfigFile load_sidecar(const fs::path& ckpt, const std::string& override_config) {
  const fs::path p = override_config.empty() ? cli::sidecar_path(ckpt) : fs::path(override_config);
  return load_config(p);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ParFormer: build, analyse, train and benchmark the model family"};
  app.require_subcommand(1);
  std::optional<std::uint64_t> seed_flag;
  app.add_option("--seed", seed_flag, "Seed for weights, data and batch order (PARFORMER_SEED overrides)");

  ModelSource describe_src;
  std::int64_t describe_input = 224;
  auto* describe = app.add_subcommand("describe", "Print the stage table and shape trace");
  describe_src.add_to(describe);
  describe->add_option("--input", describe_input, "Square input side")->check(CLI::PositiveNumber);

  ModelSource params_src;
  bool params_csv = false;
  auto* params = app.add_subcommand("params", "Per-module parameter counts");
  params_src.add_to(params);
  params->add_flag("--csv", params_csv, "CSV output");

  ModelSource flops_src;
  bool flops_csv = false;
  std::int64_t flops_input = 224;
  auto* flops = app.add_subcommand("flops", "Per-module multiply-accumulate counts");
  flops_src.add_to(flops);
  flops->add_flag("--csv", flops_csv, "CSV output");
  flops->add_option("--input", flops_input, "Square input side")->check(CLI::PositiveNumber);

  ModelSource grad_src;
  GradcheckOptions grad_opt;
  GradcheckSetup grad_setup;
  bool grad_quiet = false;
  auto* gradcheck_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient (f64)");
  grad_src.add_to(gradcheck_cmd);
  gradcheck_cmd->add_option("--tol", grad_opt.tol, "Pass threshold on max relative error")->capture_default_str();
  gradcheck_cmd->add_option("--batch", grad_setup.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  gradcheck_cmd->add_option("--input", grad_setup.input, "Square input side")->capture_default_str()->check(CLI::PositiveNumber);
  gradcheck_cmd->add_flag("--quiet", grad_quiet, "No progress on stderr");

  std::string train_config, train_data, train_out, train_curve;
  std::optional<int> train_steps;
  auto* train_cmd = app.add_subcommand("train", "Train on synthetic data or CIFAR-10 binaries");
  train_cmd->add_option("--config", train_config, "JSON config file")->required();
  train_cmd->add_option("--data", train_data, "'synth' or a CIFAR-10 binary directory (default: config data.source)");
  train_cmd->add_option("--out", train_out, "Checkpoint path")->required();
  train_cmd->add_option("--curve", train_curve, "Loss curve CSV (default: <out>.csv)");
  train_cmd->add_option("--steps", train_steps, "Override train.steps")->check(CLI::NonNegativeNumber);

  std::string eval_ckpt, eval_config, eval_data, eval_split = "test";
  int eval_batch = 64;
  auto* eval_cmd = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint");
  eval_cmd->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval_cmd->add_option("--config", eval_config, "Config file (default: <ckpt>.json)");
  eval_cmd->add_option("--data", eval_data, "'synth' or a CIFAR-10 binary directory (default: config data.source)");
  eval_cmd->add_option("--split", eval_split, "train or test")->capture_default_str();
  eval_cmd->add_option("--batch", eval_batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);

  std::string fold_ckpt, fold_out;
  auto* fold_cmd = app.add_subcommand("fold-bn", "Fold batchnorm into the preceding convolutions");
  fold_cmd->add_option("--ckpt", fold_ckpt, "Input checkpoint")->required();
  fold_cmd->add_option("--out", fold_out, "Output checkpoint")->required();

  ModelSource bench_src;
  BenchOptions bench_opt;
  auto* bench_cmd = app.add_subcommand("bench", "Inference throughput, unfolded vs folded batchnorm");
  bench_src.add_to(bench_cmd);
  bench_cmd->add_option("--batch", bench_opt.batch, "Batch size")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--repeats", bench_opt.repeats, "Timed repeats per graph")->capture_default_str()->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", bench_opt.warmup, "Untimed runs per graph")->capture_default_str()->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--input", bench_opt.input, "Square input side")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", e.what());
    return 2;
  }

  try {
    if (*describe) {
      std::cout << cli::format_describe(describe_src.resolve(), describe_input);
    } else if (*params) {
      const auto g = build_model<float>(params_src.resolve(), 0, WeightInit::zeros);
      const auto rep = count_params(g);
      std::cout << (params_csv ? format_csv(rep) : format_text(rep));
    } else if (*flops) {
      const auto cfg = flops_src.resolve();
      const auto g = build_model<float>(cfg, 0, WeightInit::zeros);
      const auto rep = count_flops(g, {1, cfg.in_channels, flops_input, flops_input});
      std::cout << (flops_csv ? format_csv(rep) : format_text(rep));
    } else if (*gradcheck_cmd) {
      grad_setup.config = grad_src.resolve("micro");
      grad_setup.seed = cli::resolve_seed(seed_flag, 0);
      if (!grad_quiet) {
        grad_opt.progress = [](std::size_t done, std::size_t total) {
          std::fprintf(stderr, "\rchecked %zu/%zu", done, total);
          if (done == total) std::fprintf(stderr, "\n");
        };
      }
      const auto rep = gradcheck_model(grad_setup, grad_opt);
      std::printf("model: %s  batch: %lld  input: %lldx%lld  dtype: f64\n", grad_setup.config.name.c_str(),
                  static_cast<long long>(grad_setup.batch), static_cast<long long>(grad_setup.input),
                  static_cast<long long>(grad_setup.input));
      std::printf("checked: %zu parameters\n", rep.checked);
      std::printf("max rel err: %.3e (worst: %s)\n", rep.max_rel_err, rep.worst.c_str());
      std::printf("max abs err: %.3e\n", rep.max_abs_err);
      std::printf("time: %.1f s\n", rep.seconds);
      std::printf("gradcheck: %s (tol %.1e)\n", rep.passed() ? "PASS" : "FAIL", rep.tol);
      return rep.passed() ? 0 : 1;
    } else if (*train_cmd) {
      auto cfg = load_config(train_config);
      auto tc = cfg.train.value_or(TrainConfig{});
      auto data = cfg.data.value_or(DataConfig{});
      if (!train_data.empty()) data.source = train_data;
      if (train_steps) tc.steps = *train_steps;
      tc.seed = cli::resolve_seed(seed_flag, tc.seed);
      data.mean.clear();
      data.stddev.clear();
      validate(data);
      auto ds = load_data(data, "train", tc.seed);
      data.mean = ds.mean;
      data.stddev = ds.stddev;
      cfg.train = tc;
      cfg.data = data;
      const fs::path out = train_out;
      const fs::path curve = train_curve.empty() ? fs::path(train_out + ".csv") : fs::path(train_curve);
      std::printf("model: %s  data: %s (%zu images, %d classes)  steps: %d  seed: %llu\n", cfg.model.name.c_str(),
                  data.source.c_str(), ds.size(), ds.num_classes, tc.steps, static_cast<unsigned long long>(tc.seed));
      if (tc.dtype == DType::f32) {
        run_train<float>(cfg, ds, tc, tc.seed, out, curve);
      } else {
        run_train<double>(cfg, ds, tc, tc.seed, out, curve);
      }
    } else if (*eval_cmd) {
      const auto cfg = load_sidecar(eval_ckpt, eval_config);
      auto data = cfg.data.value_or(DataConfig{});
      if (!eval_data.empty()) data.source = eval_data;
      const auto seed = cli::resolve_seed(seed_flag, cfg.train ? cfg.train->seed : 0);
      const auto ds = load_data(data, eval_split, seed);
      const auto ck = Checkpoint::load(eval_ckpt);
      const auto r = cli::checkpoint_dtype(ck) == DType::f32 ? run_eval<float>(cfg.model, ck, ds, eval_batch)
                                                               : run_eval<double>(cfg.model, ck, ds, eval_batch);
      std::printf("data: %s  split: %s  images: %zu\n", data.source.c_str(), eval_split.c_str(), ds.size());
      print_accuracy(r);
    } else if (*fold_cmd) {
      const auto cfg = load_sidecar(fold_ckpt, "");
      const auto ck = Checkpoint::load(fold_ckpt);
      const auto [before, after] = cli::checkpoint_dtype(ck) == DType::f32 ? run_fold<float>(cfg.model, ck, fold_out)
                                                                           : run_fold<double>(cfg.model, ck, fold_out);
      save_config(cli::sidecar_path(fold_out), cfg);
      std::printf("layers: %zu -> %zu (-%zu batchnorm)\n", before, after, before - after);
      std::printf("checkpoint: %s\n", fold_out.c_str());
    } else if (*bench_cmd) {
      const auto cfg = bench_src.resolve();
      bench_opt.seed = cli::resolve_seed(seed_flag, 0);
      const auto g = build_model<float>(cfg, bench_opt.seed);
      std::cout << cli::format_bench(bench(g, bench_opt));
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s: %s\n", e.code().c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
