#include "meas/training/training.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numbers>
#include <sstream>
#include <thread>

#include "meas/metrics/metrics.hpp"
#include "meas/numerics/errors.hpp"
#include "meas/numerics/ops.hpp"

namespace meas::training {

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& restored, const Tensor<T>& clean) {
  return mean(abs(sub(restored, clean)));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& l1, const Tensor<T>& balance, double lambda) {
  if (lambda == 0.0) return l1;
  return add(l1, scale(balance, T(lambda)));
}

double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return lr0;
  const double t = double(std::min(step, total_steps)) / double(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

template <typename T>
double clip_grad_norm(const std::vector<Tensor<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (T g : p.grad()) sq += double(g) * double(g);
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = T(max_norm / norm);
    for (const auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.grad_mut()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
Adam<T>::Adam(Named params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& [name, p] : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, double(t_));
  const double c2 = 1.0 - std::pow(beta2_, double(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto values = p.data_mut();
    const auto grads = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
      const double update = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
      values[j] = T(double(values[j]) - update);
    }
  }
}

template <typename T>
std::vector<model::NamedArray> Adam<T>::state() const {
  std::vector<model::NamedArray> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    out.push_back({"adam.m." + name, p.shape(), std::vector<float>(m_[i].begin(), m_[i].end())});
    out.push_back({"adam.v." + name, p.shape(), std::vector<float>(v_[i].begin(), v_[i].end())});
  }
  return out;
}

template <typename T>
void Adam<T>::load_state(const std::vector<model::NamedArray>& arrays, std::uint64_t steps) {
  std::map<std::string, const model::NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& [name, p] = params_[i];
    for (auto* target : {&m_[i], &v_[i]}) {
      const std::string key = (target == &m_[i] ? "adam.m." : "adam.v.") + name;
      const auto it = by_name.find(key);
      if (it == by_name.end() || it->second->values.size() != p.numel()) {
        throw model::CheckpointError("optimizer state lacks a matching '" + key + "'");
      }
      target->assign(it->second->values.begin(), it->second->values.end());
    }
  }
  t_ = steps;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw UsageError("train: lr must be positive");
  if (batch_size < 2) throw UsageError("train: batch_size must be >= 2 (the filter generator's batch norm needs it)");
  if (clip_norm < 0.0) throw UsageError("train: clip_norm must be >= 0");
}

std::string TrainConfig::to_json() const {
  nlohmann::ordered_json j;
  j["lr0"] = lr0;
  j["total_steps"] = total_steps;
  j["batch_size"] = batch_size;
  j["clip_norm"] = clip_norm;
  j["eval_every"] = eval_every;
  j["eval_count"] = eval_count;
  j["checkpoint_every"] = checkpoint_every;
  return j.dump();
}

namespace {

std::size_t g_worker_threads = 1;

// Fills out[i] = make(i) for i < n on up to worker_threads() threads.
template <typename F>
std::vector<degrade::ImagePair> generate(std::size_t n, F make) {
  std::vector<degrade::ImagePair> out(n);
  const std::size_t workers = std::min(g_worker_threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = make(i);
    return out;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) out[i] = make(i);
    });
  }
  for (auto& t : pool) t.join();
  return out;
}

}  // namespace

void set_worker_threads(std::size_t count) { g_worker_threads = std::max<std::size_t>(1, count); }
std::size_t worker_threads() { return g_worker_threads; }

EvalTable evaluate(model::Model<float>& model, const degrade::DatasetSpec& spec) {
  if (spec.count == 0) throw DataError("evaluation set is empty (count = 0)");
  const degrade::SampleSource source(spec);
  constexpr std::size_t kChunk = 8;
  EvalTable table;
  for (auto task : spec.tasks) {
    TaskScore& score = table[task];
    for (std::size_t start = 0; start < spec.count; start += kChunk) {
      const std::size_t n = std::min(spec.count, start + kChunk) - start;
      std::vector<degrade::Image> inputs, targets;
      for (auto& pair : generate(n, [&](std::size_t i) { return source.sample(start + i, task); })) {
        inputs.push_back(std::move(pair.degraded));
        targets.push_back(std::move(pair.clean));
      }
      const auto restored = model.restore(degrade::to_tensor<float>(std::span<const degrade::Image>(inputs)));
      for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto out = degrade::from_tensor(restored, i);
        score.psnr += metrics::psnr(out, targets[i]);
        score.ssim += metrics::ssim(out, targets[i]);
        score.psnr_degraded += metrics::psnr(inputs[i], targets[i]);
        score.ssim_degraded += metrics::ssim(inputs[i], targets[i]);
        ++score.count;
      }
    }
    const double n = double(score.count);
    score.psnr /= n;
    score.ssim /= n;
    score.psnr_degraded /= n;
    score.ssim_degraded /= n;
  }
  return table;
}

model::Checkpoint snapshot(const model::Model<float>& model, std::uint64_t step) {
  model::Checkpoint ck;
  ck.config = model.config();
  ck.tensors = model.state();
  ck.step = step;
  return ck;
}

namespace {

std::string stream_state(const degrade::DatasetSpec& spec, std::size_t cursor) {
  nlohmann::ordered_json j;
  j["data_seed"] = spec.seed;
  j["next_sample"] = cursor;
  return j.dump();
}

}  // namespace

FitResult fit(model::Model<float>& model, const degrade::DatasetSpec& train, const degrade::DatasetSpec& eval,
              const TrainConfig& config, const Callbacks& callbacks) {
  config.validate();
  const degrade::SampleSource source(train);
  Adam<float>::Named named;
  for (const auto& e : model.registry().entries()) {
    if (e.trainable) named.emplace_back(e.name, e.tensor);
  }
  Adam<float> optimizer(named);
  const auto params = model.registry().trainable();
  const double lambda = model.config().lambda;

  auto make_checkpoint = [&](std::size_t step) {
    auto ck = snapshot(model, step);
    ck.optimizer = optimizer.state();
    ck.rng_state = stream_state(train, step * config.batch_size);
    ck.train_config = config.to_json();
    return ck;
  };
  auto save = [&](const model::Checkpoint& ck, const std::string& name) {
    if (config.out_dir.empty()) return;
    std::filesystem::create_directories(config.out_dir);
    model::save_checkpoint(ck, (std::filesystem::path(config.out_dir) / name).string());
  };

  FitResult result;
  for (std::size_t step = 0; step < config.total_steps; ++step) {
    std::vector<degrade::Image> inputs, targets;
    const auto batch = generate(config.batch_size, [&](std::size_t i) {
      std::size_t index = step * config.batch_size + i;
      if (train.count > 0) index %= train.count;
      return source.sample(index);
    });
    for (auto& pair : batch) {
      inputs.push_back(pair.degraded);
      targets.push_back(pair.clean);
    }
    const auto x = degrade::to_tensor<float>(std::span<const degrade::Image>(inputs));
    const auto y = degrade::to_tensor<float>(std::span<const degrade::Image>(targets));

    LogRow row;
    row.step = step;
    row.lr = cosine_lr(config.lr0, step, config.total_steps);
    try {
      model.registry().zero_grad();
      const auto out = model.forward(x, true);
      const auto l1 = l1_loss(out.output, y);
      const auto loss = total_loss(l1, out.balance, lambda);
      row.l1 = l1.item();
      row.balance = out.balance.item();
      row.total = loss.item();
      backward(loss);
    } catch (const NumericalError& e) {
      throw NumericalError(e.op(), "training step " + std::to_string(step) + ": " + e.what());
    }
    row.grad_norm = clip_grad_norm(params, config.clip_norm);
    row.clipped = config.clip_norm > 0.0 && row.grad_norm > config.clip_norm;
    if (!std::isfinite(row.grad_norm)) {
      throw NumericalError("clip_grad_norm", "training step " + std::to_string(step) + ": non-finite gradient norm");
    }
    optimizer.step(row.lr);

    const std::size_t done = step + 1;
    if (config.eval_every > 0 && eval.count > 0 && (done % config.eval_every == 0 || done == config.total_steps)) {
      row.eval = evaluate(model, eval);
    }
    if (config.checkpoint_every > 0 && done % config.checkpoint_every == 0) {
      save(make_checkpoint(done), "step_" + std::to_string(done) + ".ckpt");
    }
    if (callbacks.on_step) callbacks.on_step(row);
    result.log.push_back(std::move(row));
  }
  result.checkpoint = make_checkpoint(config.total_steps);
  save(result.checkpoint, "final.ckpt");
  if (!config.out_dir.empty()) {
    write_log_csv((std::filesystem::path(config.out_dir) / "metrics.csv").string(), result.log, eval.tasks);
  }
  return result;
}

void write_log_csv(const std::string& path, const std::vector<LogRow>& log, const std::vector<degrade::Task>& tasks) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write metric log '" + path + "'");
  f << "step,lr,l1,balance,total,grad_norm,clipped";
  for (auto t : tasks) f << ",psnr_" << degrade::task_name(t) << ",ssim_" << degrade::task_name(t);
  f << "\n" << std::setprecision(9);
  for (const auto& r : log) {
    f << r.step << ',' << r.lr << ',' << r.l1 << ',' << r.balance << ',' << r.total << ',' << r.grad_norm << ','
      << (r.clipped ? 1 : 0);
    for (auto t : tasks) {
      const auto it = r.eval.find(t);
      if (it == r.eval.end()) {
        f << ",,";
      } else {
        f << ',' << it->second.psnr << ',' << it->second.ssim;
      }
    }
    f << "\n";
  }
}

void write_eval_csv(const std::string& path, const EvalTable& table) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write evaluation table '" + path + "'");
  f << "task,count,psnr,ssim,psnr_input,ssim_input\n" << std::setprecision(9);
  for (const auto& [task, s] : table) {
    f << degrade::task_name(task) << ',' << s.count << ',' << s.psnr << ',' << s.ssim << ',' << s.psnr_degraded << ','
      << s.ssim_degraded << "\n";
  }
}

template Tensor<float> l1_loss<float>(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> l1_loss<double>(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> total_loss<float>(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> total_loss<double>(const Tensor<double>&, const Tensor<double>&, double);
template double clip_grad_norm<float>(const std::vector<Tensor<float>>&, double);
template double clip_grad_norm<double>(const std::vector<Tensor<double>>&, double);
template class Adam<float>;
template class Adam<double>;

}  // namespace meas::training
