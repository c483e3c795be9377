#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "meas/degrade/synth.hpp"
#include "meas/model/model.hpp"

namespace meas::training {

/// Mean absolute difference over all elements.
template <typename T>
Tensor<T> l1_loss(const Tensor<T>& restored, const Tensor<T>& clean);

/// l1 + lambda * balance.
template <typename T>
Tensor<T> total_loss(const Tensor<T>& l1, const Tensor<T>& balance, double lambda);

/// lr0 * 0.5 * (1 + cos(pi * t / T)); lr0 for T == 0.
double cosine_lr(double lr0, std::size_t step, std::size_t total_steps);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm);

template <typename T>
class Adam {
 public:
  using Named = std::vector<std::pair<std::string, Tensor<T>>>;

  explicit Adam(Named params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  /// One bias-corrected update from the current gradients.
  void step(double lr);
  std::uint64_t steps() const { return t_; }

  /// Moments as arrays named adam.m.<param> / adam.v.<param>.
  std::vector<model::NamedArray> state() const;
  void load_state(const std::vector<model::NamedArray>& arrays, std::uint64_t steps);

 private:
  Named params_;
  double beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

struct TrainConfig {
  double lr0 = 2e-4;
  std::size_t total_steps = 1000;
  std::size_t batch_size = 4;
  double clip_norm = 1.0;  // 0 disables
  std::size_t eval_every = 0;
  std::size_t eval_count = 8;  // samples per task
  std::size_t checkpoint_every = 0;
  std::string out_dir;  // empty: nothing written

  void validate() const;
  std::string to_json() const;
};

struct TaskScore {
  std::size_t count = 0;
  double psnr = 0, ssim = 0;                    // restored vs clean
  double psnr_degraded = 0, ssim_degraded = 0;  // input vs clean
};

using EvalTable = std::map<degrade::Task, TaskScore>;

struct LogRow {
  std::size_t step = 0;
  double lr = 0, l1 = 0, balance = 0, total = 0;
  double grad_norm = 0;
  bool clipped = false;
  EvalTable eval;  // filled on evaluation steps
};

/// Upper bound on worker threads used for sample generation (default 1).
/// Samples are pure functions of their index, so results do not depend on it.
void set_worker_threads(std::size_t count);
std::size_t worker_threads();

/// Mean PSNR/SSIM per task over `spec.count` samples of every task in the
/// spec (eval mode, clamped output).
EvalTable evaluate(model::Model<float>& model, const degrade::DatasetSpec& spec);

struct Callbacks {
  std::function<void(const LogRow&)> on_step;
};

struct FitResult {
  std::vector<LogRow> log;
  model::Checkpoint checkpoint;
};

/// Trains on the sample stream of `train`; batch i at step t holds samples
/// t*B .. t*B+B-1 (modulo train.count when it is nonzero). Evaluates on
/// `eval` every eval_every steps when eval.count > 0. Deterministic per
/// configuration.
FitResult fit(model::Model<float>& model, const degrade::DatasetSpec& train, const degrade::DatasetSpec& eval,
              const TrainConfig& config, const Callbacks& callbacks = {});

/// Checkpoint of the current model without optimizer state.
model::Checkpoint snapshot(const model::Model<float>& model, std::uint64_t step = 0);

void write_log_csv(const std::string& path, const std::vector<LogRow>& log, const std::vector<degrade::Task>& tasks);
void write_eval_csv(const std::string& path, const EvalTable& table);

}  // namespace meas::training
