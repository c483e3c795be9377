// meas: train, restore, evaluate and inspect the multi-expert restoration
// network.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "meas/cli/gradsuite.hpp"
#include "meas/cli/inspect.hpp"
#include "meas/cli/run_config.hpp"
#include "meas/metrics/metrics.hpp"
#include "meas/numerics/errors.hpp"
#include "meas/training/training.hpp"

namespace fs = std::filesystem;
using namespace meas;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

void configure_threads() {
  const char* env = std::getenv("MEAS_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError(std::string("MEAS_THREADS must be a positive integer, got '") + env + "'");
  training::set_worker_threads(std::size_t(n));
}

model::Model<float> load_model(const std::string& path, model::Checkpoint* out = nullptr) {
  auto ck = model::load_checkpoint(path);
  model::Model<float> m(ck.config);
  m.load_state(ck.tensors);
  if (out) *out = std::move(ck);
  return m;
}

void print_table(const training::EvalTable& table) {
  std::printf("%-9s %5s %9s %7s %9s %7s\n", "task", "n", "psnr", "ssim", "psnr_in", "ssim_in");
  for (const auto& [task, s] : table) {
    std::printf("%-9s %5zu %9.3f %7.4f %9.3f %7.4f\n", degrade::task_name(task), s.count, s.psnr, s.ssim,
                s.psnr_degraded, s.ssim_degraded);
  }
}

int cmd_train(const std::string& config_path, const cli::Overrides& overrides) {
  auto cfg = cli::load_run_config(config_path);
  cli::apply_overrides(cfg, overrides);
  if (cfg.train.out_dir.empty()) cfg.train.out_dir = "meas_run";
  cfg.validate();
  fs::create_directories(cfg.train.out_dir);
  std::ofstream(fs::path(cfg.train.out_dir) / "config.ini") << cfg.to_text();

  model::Model<float> m(cfg.model);
  std::printf("model: %zu parameters, %zu steps, batch %zu -> %s\n", m.parameter_count(), cfg.train.total_steps,
              cfg.train.batch_size, cfg.train.out_dir.c_str());
  const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
  training::Callbacks cb;
  cb.on_step = [&](const training::LogRow& r) {
    if (r.step % every == 0 || r.step + 1 == cfg.train.total_steps || !r.eval.empty()) {
      std::printf("step %6zu  lr %.3e  l1 %.5f  balance %.5f  |g| %.3f%s\n", r.step, r.lr, r.l1, r.balance,
                  r.grad_norm, r.clipped ? " (clipped)" : "");
      if (!r.eval.empty()) print_table(r.eval);
      std::fflush(stdout);
    }
  };
  const auto result = training::fit(m, cfg.data, cfg.eval_spec(), cfg.train, cb);
  if (!result.log.empty()) {
    std::printf("total loss %.5f -> %.5f\n", result.log.front().total, result.log.back().total);
  }
  return kOk;
}

int cmd_restore(const std::string& checkpoint, const std::string& input, const std::string& output) {
  auto m = load_model(checkpoint);
  const auto image = degrade::load_image(input);
  const auto restored = m.restore(degrade::to_tensor<float>(image));
  degrade::save_image(degrade::from_tensor(restored), output);
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path, const cli::Overrides& overrides) {
  auto m = load_model(checkpoint);
  cli::RunConfig cfg = config_path.empty() ? cli::RunConfig{} : cli::load_run_config(config_path);
  cli::apply_overrides(cfg, overrides);
  const auto spec = cfg.eval_spec();
  spec.validate();
  const auto table = training::evaluate(m, spec);
  print_table(table);
  if (overrides.out) {
    fs::create_directories(*overrides.out);
    training::write_eval_csv((fs::path(*overrides.out) / "eval.csv").string(), table);
  }
  return kOk;
}

int cmd_gradcheck(const std::string& config_path, const cli::Overrides& overrides, const std::string& corrupt) {
  auto config = model::tiny_config();
  if (!config_path.empty()) config = cli::load_run_config(config_path).model;
  if (overrides.seed) config.seed = *overrides.seed;
  config.validate();
  meas::testing::set_corrupted_op(corrupt);
  const auto suite = cli::run_gradient_suite(config, 6, config.seed);
  meas::testing::set_corrupted_op("");

  std::map<std::string, double> worst;
  bool ok = true;
  for (const auto& e : suite) {
    std::printf("%-4s %-9s %-28s tol %.0e  %s\n", e.report.passed ? "ok" : "FAIL", e.module.c_str(),
                e.check.c_str(), e.tolerance, e.report.summary().c_str());
    worst[e.module] = std::max(worst[e.module], e.report.worst_rel_error);
    ok = ok && e.report.passed;
  }
  std::printf("worst relative error per module:\n");
  for (const auto& [module, w] : worst) std::printf("  %-9s %.3e\n", module.c_str(), w);
  if (!ok) {
    std::printf("gradient check FAILED%s\n", corrupt.empty() ? "" : (" (gradient of op '" + corrupt + "' corrupted)").c_str());
    return kNumerical;
  }
  std::printf("gradient check passed\n");
  return kOk;
}

int cmd_inspect(const std::string& checkpoint, const std::string& input, const std::string& out) {
  auto m = load_model(checkpoint);
  const auto image = degrade::load_image(input);
  const auto report = cli::inspect(m, image);
  cli::write_inspect(report, out);
  for (std::size_t s = 0; s < report.stages.size(); ++s) {
    const auto& st = report.stages[s];
    std::printf("stage %zu usage:", s);
    for (auto u : st.usage) std::printf(" %zu", u);
    double lo = 0, hi = 0;
    for (std::size_t c = 0; c < st.low_energy.size(); ++c) {
      lo += st.low_energy[c];
      hi += st.high_energy[c];
    }
    std::printf("  | high-frequency energy share %.4f\n", lo + hi > 0 ? hi / (lo + hi) : 0.0);
  }
  std::printf("wrote diagnostics to %s\n", out.c_str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-expert all-in-one image restoration"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, input, output, corrupt;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::string out;

  auto add_common = [&](CLI::App* sub, bool with_steps) {
    sub->add_option("--seed", seed, "Model and data seed");
    if (with_steps) sub->add_option("--steps", steps, "Training steps");
    sub->add_option("--out", out, "Output directory");
  };

  auto* train = app.add_subcommand("train", "Train from a config file");
  train->add_option("--config", config_path, "Run configuration")->required();
  add_common(train, true);

  auto* restore = app.add_subcommand("restore", "Restore one PNG");
  restore->add_option("--checkpoint", checkpoint)->required();
  restore->add_option("--input", input)->required();
  restore->add_option("--output", output)->required();

  auto* eval = app.add_subcommand("eval", "Per-task PSNR/SSIM on the held-out stream");
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--config", config_path, "Run configuration ([data] and [train] eval_count)");
  add_common(eval, false);

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite (64-bit)");
  grad->add_option("--config", config_path, "Run configuration ([model] section); tiny model by default");
  grad->add_option("--seed", seed);
  grad->add_option("--corrupt-op", corrupt, "Test hook: corrupt the gradient of this op");

  auto* insp = app.add_subcommand("inspect", "Routing and frequency diagnostics of one PNG");
  insp->add_option("--checkpoint", checkpoint)->required();
  insp->add_option("--input", input)->required();
  insp->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  cli::Overrides overrides;
  auto collect = [&](CLI::App* sub) {
    if (sub->get_option_no_throw("--seed") && sub->count("--seed")) overrides.seed = seed;
    if (sub->get_option_no_throw("--steps") && sub->count("--steps")) overrides.steps = steps;
    if (sub->get_option_no_throw("--out") && sub->count("--out")) overrides.out = out;
  };

  try {
    configure_threads();
    if (*train) {
      collect(train);
      return cmd_train(config_path, overrides);
    }
    if (*restore) return cmd_restore(checkpoint, input, output);
    if (*eval) {
      collect(eval);
      return cmd_eval(checkpoint, config_path, overrides);
    }
    if (*grad) {
      collect(grad);
      return cmd_gradcheck(config_path, overrides, corrupt);
    }
    if (*insp) return cmd_inspect(checkpoint, input, out);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
