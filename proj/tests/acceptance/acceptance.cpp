// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// nonzero when any selected criterion fails.
//
//   meas_acceptance [AC1 AC2 ...]     (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "meas/cli/gradsuite.hpp"
#include "meas/degrade/synth.hpp"
#include "meas/experts/experts.hpp"
#include "meas/fdmee/fdmee.hpp"
#include "meas/mese/mese.hpp"
#include "meas/metrics/metrics.hpp"
#include "meas/model/checkpoint.hpp"
#include "meas/model/model.hpp"
#include "meas/numerics/errors.hpp"
#include "meas/numerics/ops.hpp"
#include "meas/training/training.hpp"

using namespace meas;
namespace fs = std::filesystem;
using TD = Tensor<double>;
using TF = Tensor<float>;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = T(dist(rng));
  return Tensor<T>::from_data(std::move(shape), std::move(v));
}

std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    auto p = fs::temp_directory_path() / ("meas_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

double gelu_ref(double u) { return 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0))); }

std::vector<double> expert_ref(const MlpParams<double>& e, const std::vector<double>& x) {
  const std::size_t C = x.size(), hid = e.b1.numel();
  const auto w1 = e.w1.data(), b1 = e.b1.data(), w2 = e.w2.data(), b2 = e.b2.data();
  std::vector<double> out(C);
  for (std::size_t o = 0; o < C; ++o) {
    double acc = b2[o];
    for (std::size_t h = 0; h < hid; ++h) {
      double u = b1[h];
      for (std::size_t i = 0; i < C; ++i) u += w1[h * C + i] * x[i];
      acc += w2[o * hid + h] * gelu_ref(u);
    }
    out[o] = acc;
  }
  return out;
}

std::vector<double> pixel_of(const TD& t, std::size_t b, std::size_t p) {
  const std::size_t C = t.dim(1), HW = t.dim(2) * t.dim(3);
  const auto d = t.data();
  std::vector<double> v(C);
  for (std::size_t c = 0; c < C; ++c) v[c] = d[(b * C + c) * HW + p];
  return v;
}

// ---------------------------------------------------------------- AC1

Outcome ac1_gradients() {
  const auto t0 = Clock::now();
  const auto suite = cli::run_gradient_suite(model::tiny_config(), 6, 0);
  const double elapsed = seconds_since(t0);
  bool ok = true;
  std::size_t failed = 0, entries = 0;
  double worst_module = 0, worst_model = 0;
  std::string first_failure;
  for (const auto& e : suite) {
    entries += e.report.entries_checked;
    (e.tolerance < 1e-3 ? worst_module : worst_model) =
        std::max(e.tolerance < 1e-3 ? worst_module : worst_model, e.report.worst_rel_error);
    if (!e.report.passed) {
      ok = false;
      ++failed;
      if (first_failure.empty()) first_failure = " first failure: " + e.module + "/" + e.check;
    }
  }
  ok = ok && elapsed < 120.0;
  return {ok, fmt("%zu checks, %zu entries, %zu failed; worst rel err module %.2e (tol 1e-4), full model %.2e "
                  "(tol 1e-3); %.1f s (limit 120 s)%s",
                  suite.size(), entries, failed, worst_module, worst_model, elapsed, first_failure.c_str())};
}

// ---------------------------------------------------------------- AC2

Outcome ac2_routing() {
  std::mt19937_64 rng(2002);
  double worst_simplex = 0, worst_s = 0;
  std::size_t bad_mask = 0, bad_counts = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = pick(rng, 1, 2), C = pick(rng, 1, 8), N = pick(rng, 1, 6), K = pick(rng, 1, N);
    const std::size_t H = pick(rng, 1, 8), W = pick(rng, 1, 8), HW = H * W;
    const double scale = std::uniform_real_distribution<double>(0.1, 4.0)(rng);
    const auto prompt = random_tensor<double>({B, C, H, W}, rng, -scale, scale);
    const auto feat = random_tensor<double>({B, C, H, W}, rng, -scale, scale);
    const auto pe = random_tensor<double>({2 * C, N}, rng, -scale, scale);
    const auto routing = mese::route_pixels(mese::fuse_task_content(prompt, feat), pe);
    const auto sel = mese::select_topk_pixels(routing, K);
    const auto S = mese::expert_importance(routing);
    const auto St = mese::expert_counts(sel);

    const auto w = routing.data();
    const auto m = sel.mask.data();
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t p = 0; p < HW; ++p) {
        double total = 0;
        std::size_t chosen = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const double v = w[(b * N + n) * HW + p];
          if (v < 0) worst_simplex = std::max(worst_simplex, -v);
          total += v;
          const double mk = m[(b * N + n) * HW + p];
          if (mk != 0.0 && mk != 1.0) ++bad_mask;
          chosen += mk == 1.0;
        }
        worst_simplex = std::max(worst_simplex, std::abs(total - 1.0));
        if (chosen != K) ++bad_mask;
      }
      double sum_s = 0, sum_st = 0;
      for (std::size_t n = 0; n < N; ++n) {
        sum_s += S.data()[b * N + n];
        sum_st += St.data()[b * N + n];
      }
      worst_s = std::max(worst_s, std::abs(sum_s - double(HW)) / double(HW));
      if (sum_st != double(K * HW)) ++bad_counts;
    }
  }
  const bool ok = worst_simplex <= 1e-6 && bad_mask == 0 && worst_s <= 1e-9 && bad_counts == 0;
  return {ok, fmt("1000 inputs: simplex dev %.2e (tol 1e-6), mask cardinality violations %zu, "
                  "rel |sum S - HW| %.2e, sum S~ != K*HW in %zu images",
                  worst_simplex, bad_mask, worst_s, bad_counts)};
}

// ---------------------------------------------------------------- AC3

Outcome ac3_oracles() {
  std::mt19937_64 rng(3003);
  const std::size_t B = 2, C = 3, hidden = 5;
  double worst_pixel = 0, worst_global = 0;
  std::size_t configs = 0;
  for (std::size_t H = 1; H <= 4; ++H)
    for (std::size_t W = 1; W <= 4; ++W)
      for (std::size_t N = 1; N <= 4; ++N)
        for (std::size_t K = 1; K <= N; ++K) {
          ++configs;
          const std::size_t HW = H * W;
          const auto bank = experts::make_bank<double>(N, C, hidden, 100 + configs);
          const auto f = random_tensor<double>({B, C, H, W}, rng, -1, 1);
          const auto routing = softmax(random_tensor<double>({B, N, H, W}, rng, -2, 2), 1);
          const auto sel = mese::select_topk_pixels(routing, K);
          const auto out = mese::apply_pixel_experts(f, routing, sel, bank);

          const auto scores = softmax(random_tensor<double>({B, N}, rng, -2, 2), 1);
          const auto gout = fdmee::ensemble_global(f, scores, K, bank);

          for (std::size_t b = 0; b < B; ++b) {
            // global ranking for this sample
            std::vector<std::pair<double, std::size_t>> granked;
            for (std::size_t n = 0; n < N; ++n) granked.push_back({-scores.data()[b * N + n], n});
            std::sort(granked.begin(), granked.end());
            for (std::size_t p = 0; p < HW; ++p) {
              const auto x = pixel_of(f, b, p);
              std::vector<std::pair<double, std::size_t>> ranked;
              for (std::size_t n = 0; n < N; ++n) ranked.push_back({-routing.data()[(b * N + n) * HW + p], n});
              std::sort(ranked.begin(), ranked.end());
              std::vector<double> expect(C, 0.0), gexpect(C, 0.0);
              for (std::size_t k = 0; k < K; ++k) {
                const auto y = expert_ref(bank.experts[ranked[k].second], x);
                for (std::size_t c = 0; c < C; ++c) expect[c] += -ranked[k].first * y[c];
                const auto g = expert_ref(bank.experts[granked[k].second], x);
                for (std::size_t c = 0; c < C; ++c) gexpect[c] += -granked[k].first * g[c];
              }
              const auto got = pixel_of(out, b, p), ggot = pixel_of(gout, b, p);
              for (std::size_t c = 0; c < C; ++c) {
                worst_pixel = std::max(worst_pixel, std::abs(got[c] - expect[c]));
                worst_global = std::max(worst_global, std::abs(ggot[c] - gexpect[c]));
              }
            }
          }
        }
  const bool ok = worst_pixel <= 1e-10 && worst_global <= 1e-10;
  return {ok, fmt("%zu configs (H,W<=4, K<=N<=4): apply_pixel_experts max diff %.2e, ensemble_global %.2e "
                  "(tol 1e-10)",
                  configs, worst_pixel, worst_global)};
}

// ---------------------------------------------------------------- AC4

double count_entropy(const TD& counts) {
  const std::size_t B = counts.dim(0), N = counts.dim(1);
  std::vector<double> tot(N, 0.0);
  double all = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      tot[n] += counts.data()[b * N + n];
      all += counts.data()[b * N + n];
    }
  double h = 0;
  for (double t : tot)
    if (t > 0) h -= t / all * std::log(t / all);
  return h;
}

Outcome ac4_balance() {
  const std::size_t B = 2, C = 8, N = 4, K = 2, H = 8, W = 8;
  std::mt19937_64 rng(4004);
  const auto prompt = random_tensor<double>({B, C, H, W}, rng, 0, 1);
  const auto feat = random_tensor<double>({B, C, H, W}, rng, 0, 1);
  const auto fused = mese::fuse_task_content(prompt, feat);
  // start skewed: positive inputs let the offsets favour experts 0 and 1
  auto pe = random_tensor<double>({2 * C, N}, rng, -0.3, 0.3);
  for (std::size_t i = 0; i < 2 * C; ++i) pe.data_mut()[i * N] += 1.0;
  for (std::size_t i = 0; i < 2 * C; ++i) pe.data_mut()[i * N + 1] += 0.5;
  pe.set_requires_grad(true);

  auto counts_now = [&] { return mese::expert_counts(mese::select_topk_pixels(mese::route_pixels(fused, pe), K)); };
  const double h0 = count_entropy(counts_now());
  training::Adam<double> opt({{"p_e", pe}});
  double loss0 = 0, loss = 0;
  for (int step = 0; step < 500; ++step) {
    pe.zero_grad();
    const auto routing = mese::route_pixels(fused, pe);
    const auto sel = mese::select_topk_pixels(routing, K);
    const auto l = mese::balance_loss(mese::expert_importance(routing), mese::expert_counts(sel));
    loss = l.item();
    if (step == 0) loss0 = loss;
    backward(l);
    opt.step(1e-2);
  }
  const double h = count_entropy(counts_now()), target = std::log(double(N));

  // uniform loads
  bool uniform_zero = true;
  for (auto variant : {mese::BalanceVariant::paper, mese::BalanceVariant::cv2})
    for (double c : {1.0, 7.0, 16.0, 1e3}) {
      const auto s = TD::full({B, N}, c), st = TD::full({B, N}, 2 * c);
      uniform_zero = uniform_zero && mese::balance_loss(s, st, variant).item() == 0.0;
    }
  const bool ok = h >= 0.95 * target && uniform_zero;
  return {ok, fmt("count entropy %.4f -> %.4f after 500 steps (log N = %.4f, need >= %.4f); loss %.4g -> %.4g; "
                  "uniform loads give 0 exactly: %s",
                  h0, h, target, 0.95 * target, loss0, loss, uniform_zero ? "yes" : "no")};
}

// ---------------------------------------------------------------- AC5

Outcome ac5_frequency() {
  std::mt19937_64 rng(5005);
  double worst_rec = 0, worst_const = 0, worst_sum = 0, most_negative = 0;
  std::size_t interior_pixels = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t B = 2, C = pick(rng, 1, 6), H = pick(rng, 1, 9), W = pick(rng, 1, 9);
    const std::size_t k = trial % 3 == 0 ? 5 : 3, r = k / 2;
    Initializer init(std::uint64_t(trial) + 1);
    auto gen = fdmee::make_filter_generator<float>(C, k, init);
    const bool training = trial % 2 == 0;
    const auto F = random_tensor<float>({B, C, H, W}, rng, -1, 1);
    const auto taps = fdmee::make_lowpass_filter(F, gen, training);
    const auto pair = fdmee::split_frequencies(F, taps);
    for (std::size_t i = 0; i < F.numel(); ++i)
      worst_rec = std::max(worst_rec, std::abs(double(pair.low.data()[i]) + pair.high.data()[i] - F.data()[i]));
    const auto t = taps.data();
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      double s = 0;
      for (std::size_t j = 0; j < k * k; ++j) {
        most_negative = std::min(most_negative, double(t[bc * k * k + j]));
        s += t[bc * k * k + j];
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }

    // constant channels: high vanishes away from the zero-padded border
    std::vector<float> cv(B * C * H * W);
    for (std::size_t bc = 0; bc < B * C; ++bc) {
      const float v = float(std::uniform_real_distribution<double>(-1, 1)(rng));
      std::fill(cv.begin() + long(bc * H * W), cv.begin() + long((bc + 1) * H * W), v);
    }
    const auto Fc = TF::from_data({B, C, H, W}, cv);
    const auto pc = fdmee::split_frequencies(Fc, fdmee::make_lowpass_filter(Fc, gen, training));
    for (std::size_t bc = 0; bc < B * C; ++bc)
      for (std::size_t y = r; y + r < H; ++y)
        for (std::size_t x = r; x + r < W; ++x) {
          worst_const = std::max(worst_const, double(std::abs(pc.high.data()[(bc * H + y) * W + x])));
          ++interior_pixels;
        }
  }
  const bool ok = worst_rec <= 1e-6 && worst_const <= 1e-6 && worst_sum <= 1e-6 && most_negative >= 0;
  return {ok, fmt("1000 maps (fp32): |low+high-F| %.2e; constant-interior |high| %.2e over %zu px; taps min %.2e, "
                  "|sum-1| %.2e (tol 1e-6)",
                  worst_rec, worst_const, interior_pixels, most_negative, worst_sum)};
}

// ---------------------------------------------------------------- AC8

double naive_ssim(const degrade::Image& a, const degrade::Image& b) {
  const std::size_t n = 11;
  double win[11][11], total = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double di = double(i) - 5, dj = double(j) - 5;
      total += win[i][j] = std::exp(-(di * di + dj * dj) / (2 * 1.5 * 1.5));
    }
  const double c1 = 1e-4, c2 = 9e-4;
  double acc = 0;
  for (std::size_t c = 0; c < 3; ++c) {
    double plane = 0;
    std::size_t count = 0;
    for (std::size_t y = 0; y + n <= a.height; ++y)
      for (std::size_t x = 0; x + n <= a.width; ++x) {
        double mx = 0, my = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            mx += win[i][j] / total * a.at(c, y + i, x + j);
            my += win[i][j] / total * b.at(c, y + i, x + j);
          }
        double vx = 0, vy = 0, cov = 0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double w = win[i][j] / total, dx = a.at(c, y + i, x + j) - mx, dy = b.at(c, y + i, x + j) - my;
            vx += w * dx * dx;
            vy += w * dy * dy;
            cov += w * dx * dy;
          }
        plane += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        ++count;
      }
    acc += plane / double(count);
  }
  return acc / 3.0;
}

degrade::Image random_image(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  degrade::Image im(h, w);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : im.data) v = u(rng);
  return im;
}

Outcome ac8_metrics() {
  // PSNR: constant offset d gives exactly -20 log10(d)
  double worst_psnr = 0;
  std::mt19937_64 rng(8008);
  for (double d : {0.1, 0.01, 0.05, 0.25, 1.0 / std::sqrt(10.0), 0.003}) {
    std::vector<double> a(3 * 16 * 16), b(a.size());
    std::uniform_real_distribution<double> u(0, 1);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a[i] = u(rng);
      b[i] = a[i] + (i % 2 ? d : -d);
    }
    // the offset is recovered from the stored values, so the closed form is exact
    double mse = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]);
    mse /= double(a.size());
    worst_psnr = std::max(worst_psnr, std::abs(metrics::psnr(a, b) - (-20.0 * std::log10(d))));
    worst_psnr = std::max(worst_psnr, std::abs(metrics::psnr(a, b) - 10.0 * std::log10(1.0 / mse)));
  }
  const auto same = random_image(16, 16, rng);
  const bool inf_ok = std::isinf(metrics::psnr(same, same));

  double worst_ssim = 0;
  for (int i = 0; i < 4; ++i) {
    const auto a = random_image(16, 16, rng);
    auto b = a;
    std::normal_distribution<float> noise(0.0f, 0.05f + 0.1f * float(i));
    for (auto& v : b.data) v += noise(rng);
    worst_ssim = std::max(worst_ssim, std::abs(metrics::ssim(a, b) - naive_ssim(a, b)));
    const auto c = random_image(16, 16, rng);
    worst_ssim = std::max(worst_ssim, std::abs(metrics::ssim(a, c) - naive_ssim(a, c)));
  }

  double worst_const = 0;
  for (auto [x, y] : {std::pair{0.2f, 0.6f}, {0.0f, 1.0f}, {0.5f, 0.5f}, {0.9f, 0.1f}}) {
    const degrade::Image a(16, 16, x), b(16, 16, y);
    const double mx = x, my = y, c1 = metrics::kSsimC1;
    const double closed = (2 * mx * my + c1) / (mx * mx + my * my + c1);
    worst_const = std::max(worst_const, std::abs(metrics::ssim(a, b) - closed));
  }
  const bool ok = worst_psnr <= 1e-9 && inf_ok && worst_ssim <= 1e-8 && worst_const <= 1e-6;
  return {ok, fmt("PSNR closed form max err %.2e dB (tol 1e-9), identical -> inf: %s; SSIM vs naive %.2e (tol 1e-8); "
                  "constant-image closed form %.2e (tol 1e-6)",
                  worst_psnr, inf_ok ? "yes" : "no", worst_ssim, worst_const)};
}

// ---------------------------------------------------------------- AC10

std::vector<char> read_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& bytes) {
  std::ofstream(p, std::ios::binary).write(bytes.data(), long(bytes.size()));
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

bool same_log(const std::vector<training::LogRow>& a, const std::vector<training::LogRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto &x = a[i], &y = b[i];
    if (x.step != y.step || !same_bits(x.lr, y.lr) || !same_bits(x.l1, y.l1) || !same_bits(x.balance, y.balance) ||
        !same_bits(x.total, y.total) || !same_bits(x.grad_norm, y.grad_norm) || x.clipped != y.clipped ||
        x.eval.size() != y.eval.size())
      return false;
    for (const auto& [task, s] : x.eval) {
      const auto it = y.eval.find(task);
      if (it == y.eval.end() || !same_bits(s.psnr, it->second.psnr) || !same_bits(s.ssim, it->second.ssim))
        return false;
    }
  }
  return true;
}

Outcome ac10_determinism() {
  auto cfg = model::tiny_config();
  cfg.seed = 10;
  degrade::DatasetSpec data;
  data.tasks = {degrade::Task::noise, degrade::Task::blur, degrade::Task::rain};
  data.image_size = 20;
  data.crop_size = 12;
  data.seed = 11;
  degrade::DatasetSpec held = data;
  held.seed = 12;
  held.flip = false;
  held.count = 2;
  training::TrainConfig tc;
  tc.lr0 = 1e-3;
  tc.total_steps = 6;
  tc.batch_size = 2;
  tc.eval_every = 3;
  tc.checkpoint_every = 3;

  std::vector<std::vector<training::LogRow>> logs;
  std::vector<std::vector<char>> finals, csvs;
  for (int run = 0; run < 2; ++run) {
    tc.out_dir = (scratch_dir() / ("run" + std::to_string(run))).string();
    model::Model<float> m(cfg);
    logs.push_back(training::fit(m, data, held, tc).log);
    finals.push_back(read_bytes(fs::path(tc.out_dir) / "final.ckpt"));
    csvs.push_back(read_bytes(fs::path(tc.out_dir) / "metrics.csv"));
  }
  const bool logs_same = same_log(logs[0], logs[1]) && !logs[0].empty() && csvs[0] == csvs[1] && !csvs[0].empty();
  const bool ckpt_same = finals[0] == finals[1] && !finals[0].empty();

  // save -> load -> forward, bitwise
  const fs::path ck = fs::path(scratch_dir()) / "run0" / "final.ckpt";
  const auto loaded = model::load_checkpoint(ck.string());
  model::Model<float> a(loaded.config), b(loaded.config);
  a.load_state(loaded.tensors);
  degrade::SampleSource src(held);
  const auto x = degrade::to_tensor<float>(src.sample(0).degraded);
  const auto ya = a.restore(x);
  const fs::path resaved = scratch_dir() / "resaved.ckpt";
  model::save_checkpoint(loaded, resaved.string());
  b.load_state(model::load_checkpoint(resaved.string()).tensors);
  const auto yb = b.restore(x);
  const bool forward_same = std::memcmp(ya.data().data(), yb.data().data(), ya.numel() * sizeof(float)) == 0 &&
                            read_bytes(resaved) == finals[0];

  // corruptions
  const auto good = finals[0];
  std::vector<std::pair<std::string, std::vector<char>>> bad;
  bad.push_back({"truncated payload", {good.begin(), good.end() - 7}});
  bad.push_back({"truncated preamble", {good.begin(), good.begin() + 6}});
  bad.push_back({"trailing byte", good});
  bad.back().second.push_back('x');
  bad.push_back({"bad magic", good});
  bad.back().second[0] = 'X';
  bad.push_back({"header byte", good});
  bad.back().second[12] = '#';
  bad.push_back({"header length", good});
  bad.back().second[5] = char(0xff);
  bad.push_back({"empty file", {}});
  std::size_t caught = 0;
  std::string missed;
  for (const auto& [name, bytes] : bad) {
    const auto p = scratch_dir() / "corrupt.ckpt";
    write_bytes(p, bytes);
    try {
      model::load_checkpoint(p.string());
      missed += " " + name;
    } catch (const model::CheckpointError& e) {
      if (std::string(e.what()).empty()) missed += " " + name + "(no message)";
      else ++caught;
    }
  }
  bool version_ok = false;
  {
    auto bytes = good;
    bytes[4] = char(model::kCheckpointVersion + 1);
    const auto p = scratch_dir() / "future.ckpt";
    write_bytes(p, bytes);
    try {
      model::load_checkpoint(p.string());
    } catch (const model::CheckpointVersionError&) {
      version_ok = true;
    }
  }
  bool missing_ok = false;
  try {
    model::load_checkpoint((scratch_dir() / "does_not_exist.ckpt").string());
  } catch (const DataError&) {
    missing_ok = true;
  }
  const bool corrupt_ok = caught == bad.size() && version_ok && missing_ok;
  const bool ok = logs_same && ckpt_same && forward_same && corrupt_ok;
  return {ok, fmt("logs+csv bit-identical: %s; final checkpoints identical: %s; save/load/forward bitwise: %s; "
                  "corruptions rejected %zu/%zu, future version: %s, missing file: %s%s",
                  logs_same ? "yes" : "no", ckpt_same ? "yes" : "no", forward_same ? "yes" : "no", caught, bad.size(),
                  version_ok ? "yes" : "no", missing_ok ? "yes" : "no",
                  missed.empty() ? "" : (" missed:" + missed).c_str())};
}

// ---------------------------------------------------------------- learning checks

model::ModelConfig small_config(std::uint64_t seed) {
  model::ModelConfig c;
  c.channels = 16;
  c.experts = 4;
  c.top_k = 2;
  c.heads = 4;
  c.seed = seed;
  return c;
}

double mean_psnr(model::Model<float>& m, const std::vector<degrade::ImagePair>& pairs) {
  std::vector<degrade::Image> in;
  for (const auto& p : pairs) in.push_back(p.degraded);
  const auto out = m.restore(degrade::to_tensor<float>(std::span<const degrade::Image>(in)));
  double acc = 0;
  for (std::size_t i = 0; i < pairs.size(); ++i) acc += metrics::psnr(degrade::from_tensor(out, i), pairs[i].clean);
  return acc / double(pairs.size());
}

// Overfit: four fixed noisy/clean pairs, batch 4 so every step sees all of them.
constexpr double kOverfitSigma = 25.0;
constexpr double kOverfitLr = 1e-2;

Outcome ac6_overfit() {
  degrade::DatasetSpec spec;
  spec.tasks = {degrade::Task::noise};
  spec.params.noise_sigmas = {kOverfitSigma};
  spec.image_size = 32;
  spec.crop_size = 32;
  spec.flip = false;
  spec.count = 4;
  spec.seed = 5;
  degrade::DatasetSpec none = spec;
  none.count = 0;
  training::TrainConfig tc;
  tc.lr0 = kOverfitLr;
  tc.total_steps = 2000;
  tc.batch_size = 4;

  degrade::SampleSource src(spec);
  std::vector<degrade::ImagePair> pairs;
  double input = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    pairs.push_back(src.sample(i));
    input += metrics::psnr(pairs.back().degraded, pairs.back().clean) / 4;
  }
  model::Model<float> m(small_config(1));
  const auto t0 = Clock::now();
  double best = -1e9;
  std::size_t reached = 0;
  training::Callbacks cb;
  cb.on_step = [&](const training::LogRow& r) {
    if ((r.step + 1) % 100 == 0) {
      const double p = mean_psnr(m, pairs);
      best = std::max(best, p);
      if (p >= 40.0 && reached == 0) reached = r.step + 1;
    }
  };
  training::fit(m, spec, none, tc, cb);
  const double elapsed = seconds_since(t0), final_psnr = mean_psnr(m, pairs);
  const bool ok = (final_psnr >= 40.0 || reached > 0) && elapsed < 600.0;

  // reported only: the same pairs with batch statistics in the filter norm
  double batch_stats = 0;
  {
    NoGradGuard guard;
    std::vector<degrade::Image> in;
    for (const auto& p : pairs) in.push_back(p.degraded);
    const auto out = m.forward(degrade::to_tensor<float>(std::span<const degrade::Image>(in)), true).output;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      auto im = degrade::from_tensor(out, i);
      im.clamp01();
      batch_stats += metrics::psnr(im, pairs[i].clean) / double(pairs.size());
    }
  }
  return {ok, fmt("sigma %.0f, lr %.0e: train PSNR %.2f dB after 2000 steps (best %.2f, input %.2f, target 40)%s; "
                  "with batch statistics %.2f dB; %.0f s (limit 600 s)",
                  kOverfitSigma, kOverfitLr, final_psnr, best, input,
                  reached ? fmt(", first >= 40 dB at step %zu", reached).c_str() : "", batch_stats, elapsed)};
}

struct SmokeRun {
  training::EvalTable table;
  double seconds = 0;
};

degrade::DatasetSpec smoke_data() {
  degrade::DatasetSpec d;
  d.tasks = {degrade::Task::noise, degrade::Task::blur};
  d.params.noise_sigmas = {25.0};
  d.image_size = 48;
  d.crop_size = 32;
  d.seed = 7;
  return d;
}

degrade::DatasetSpec smoke_heldout() {
  auto d = smoke_data();
  d.seed = 7007;
  d.flip = false;
  d.count = 32;
  return d;
}

constexpr std::size_t kSmokeSteps = 5000;
constexpr double kSmokeLr = 2e-3;

SmokeRun smoke_run(const model::ModelConfig& cfg) {
  training::TrainConfig tc;
  tc.lr0 = kSmokeLr;
  tc.total_steps = kSmokeSteps;
  tc.batch_size = 4;
  model::Model<float> m(cfg);
  degrade::DatasetSpec none = smoke_data();
  none.count = 0;
  const auto t0 = Clock::now();
  training::fit(m, smoke_data(), none, tc);
  SmokeRun r;
  r.table = training::evaluate(m, smoke_heldout());
  r.seconds = seconds_since(t0);
  return r;
}

std::optional<SmokeRun> g_all_on;

const SmokeRun& all_on_run() {
  if (!g_all_on) g_all_on = smoke_run(small_config(3));
  return *g_all_on;
}

double mean_restored(const training::EvalTable& t) {
  double acc = 0;
  for (const auto& [task, s] : t) acc += s.psnr;
  return acc / double(t.size());
}

Outcome ac7_smoke() {
  const auto& r = all_on_run();
  const auto& noise = r.table.at(degrade::Task::noise);
  const auto& blur = r.table.at(degrade::Task::blur);
  const double gn = noise.psnr - noise.psnr_degraded, gb = blur.psnr - blur.psnr_degraded;
  const bool ok = gn >= 1.0 && gb >= 1.0;
  return {ok, fmt("%zu steps, held-out %zu/task: noise %.2f -> %.2f dB (%+.2f), blur %.2f -> %.2f dB (%+.2f); "
                  "need >= +1.00 on both; %.0f s",
                  kSmokeSteps, noise.count, noise.psnr_degraded, noise.psnr, gn, blur.psnr_degraded, blur.psnr, gb,
                  r.seconds)};
}

Outcome ac9_ablation() {
  // each toggle off on its own, and all off: short runs must train and stay finite
  struct Variant {
    const char* name;
    std::function<void(model::ModelConfig&)> apply;
  };
  const std::vector<Variant> variants = {
      {"-tspg", [](auto& c) { c.use_tspg = false; }},
      {"-mese", [](auto& c) { c.use_mese = false; }},
      {"-fd", [](auto& c) { c.use_fd = false; }},
      {"-mee", [](auto& c) { c.use_mee = false; }},
      {"none", [](auto& c) { c.use_tspg = c.use_mese = c.use_fd = c.use_mee = false; }},
  };
  std::string toggles;
  bool clean = true;
  const std::size_t params_all = model::Model<float>(small_config(3)).parameter_count();
  for (const auto& v : variants) {
    auto cfg = small_config(3);
    v.apply(cfg);
    bool ok = true;
    try {
      model::Model<float> m(cfg);
      ok = m.parameter_count() == params_all;
      auto data = smoke_data();
      data.crop_size = 16;
      auto none = data;
      none.count = 0;
      training::TrainConfig tc;
      tc.lr0 = 1e-3;
      tc.total_steps = 3;
      tc.batch_size = 2;
      const auto log = training::fit(m, data, none, tc).log;
      for (const auto& r : log) ok = ok && std::isfinite(r.total) && std::isfinite(r.grad_norm);
      const auto y = m.restore(degrade::to_tensor<float>(degrade::SampleSource(data).sample(0).degraded));
      ok = ok && y.shape() == Shape({1, 3, 16, 16});
    } catch (const std::exception& e) {
      ok = false;
    }
    clean = clean && ok;
    toggles += std::string(" ") + v.name + (ok ? ":ok" : ":FAIL");
  }

  auto off = small_config(3);
  off.use_tspg = off.use_mese = off.use_fd = off.use_mee = false;
  const auto base = smoke_run(off);
  const auto& full = all_on_run();
  const double p_on = mean_restored(full.table), p_off = mean_restored(base.table);
  const bool ok = clean && p_on >= p_off;
  return {ok, fmt("toggles%s; smoke held-out mean PSNR all-on %.2f dB vs all-off %.2f dB (%+.2f); %.0f s",
                  toggles.c_str(), p_on, p_off, p_on - p_off, base.seconds)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"AC1", ac1_gradients}, {"AC2", ac2_routing},  {"AC3", ac3_oracles},  {"AC4", ac4_balance},
      {"AC5", ac5_frequency}, {"AC6", ac6_overfit},  {"AC7", ac7_smoke},    {"AC8", ac8_metrics},
      {"AC9", ac9_ablation},  {"AC10", ac10_determinism},
  };
  std::set<std::string> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(argv[i]);
  for (const auto& w : wanted) {
    if (std::none_of(criteria.begin(), criteria.end(), [&](const auto& c) { return c.first == w; })) {
      std::fprintf(stderr, "unknown criterion '%s'\n", w.c_str());
      return 2;
    }
  }

  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%-4s %s  %s\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::error_code ec;
  fs::remove_all(scratch_dir(), ec);
  return failures == 0 ? 0 : 1;
}
