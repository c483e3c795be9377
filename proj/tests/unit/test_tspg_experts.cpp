#include <gtest/gtest.h>

#include <cmath>

#include "meas/experts/experts.hpp"
#include "meas/numerics/errors.hpp"
#include "meas/numerics/grad_check.hpp"
#include "meas/tspg/tspg.hpp"
#include "test_util.hpp"

using namespace meas;
using meas::test::max_abs_diff;
using meas::test::probe;
using meas::test::random_tensor;
using TD = Tensor<double>;

namespace {

tspg::TspgParams<double> random_tspg(std::size_t c, std::mt19937_64& rng) {
  return {random_tensor({c, 3, 3, 3}, rng), random_tensor({c}, rng), random_tensor({c, c}, rng)};
}

}  // namespace

TEST(Tspg, ZeroConvGivesUniformQuery) {
  std::mt19937_64 rng(1);
  auto p = random_tspg(4, rng);
  p.conv_w = TD::zeros({4, 3, 3, 3});
  p.conv_b = TD::zeros({4});
  const auto q = tspg::generate_task_query(random_tensor({2, 3, 4, 4}, rng, 0, 1), p);
  for (double v : q.data()) EXPECT_NEAR(v, 0.25, 1e-15);
}

TEST(Tspg, QueryMatchesHandSteppedPipeline) {
  std::mt19937_64 rng(2);
  const std::size_t C = 4, H = 4, W = 4;
  const auto p = random_tspg(C, rng);
  const auto img = random_tensor({1, 3, H, W}, rng, 0, 1, false);
  const auto q = tspg::generate_task_query(img, p);
  // conv with zero padding, then mean, then softmax, all as explicit loops
  std::vector<double> logits(C, 0.0);
  for (std::size_t o = 0; o < C; ++o) {
    double total = 0.0;
    for (long y = 0; y < long(H); ++y)
      for (long x = 0; x < long(W); ++x) {
        double acc = p.conv_b.data()[o];
        for (std::size_t i = 0; i < 3; ++i)
          for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
              const long sy = y + dy, sx = x + dx;
              if (sy < 0 || sx < 0 || sy >= long(H) || sx >= long(W)) continue;
              acc += p.conv_w.data()[((o * 3 + i) * 3 + std::size_t(dy + 1)) * 3 + std::size_t(dx + 1)] *
                     img.data()[(i * H + std::size_t(sy)) * W + std::size_t(sx)];
            }
        total += acc;
      }
    logits[o] = total / double(H * W);
  }
  double z = 0.0;
  for (double l : logits) z += std::exp(l);
  for (std::size_t o = 0; o < C; ++o) EXPECT_NEAR(q.data()[o], std::exp(logits[o]) / z, 1e-14);
  // identical images, identical queries
  EXPECT_EQ(max_abs_diff(q.data(), tspg::generate_task_query(img, p).data()), 0.0);
}

TEST(Tspg, ComposeSelectsAveragesAndIsLinear) {
  std::mt19937_64 rng(3);
  const std::size_t C = 4;
  const auto P = random_tensor({C, C}, rng, -1, 1, false);
  auto onehot = TD::zeros({1, C});
  onehot.data_mut()[2] = 1.0;
  const auto row = tspg::compose_prompt(onehot, P);
  for (std::size_t m = 0; m < C; ++m) EXPECT_DOUBLE_EQ(row.data()[m], P.data()[2 * C + m]);

  const auto uniform = tspg::compose_prompt(TD::full({1, C}, 0.25), P);
  for (std::size_t m = 0; m < C; ++m) {
    double mean = 0.0;
    for (std::size_t r = 0; r < C; ++r) mean += P.data()[r * C + m] / double(C);
    EXPECT_NEAR(uniform.data()[m], mean, 1e-15);
  }

  const auto q1 = random_tensor({1, C}, rng, 0, 1, false), q2 = random_tensor({1, C}, rng, 0, 1, false);
  const double a = 0.3;
  const auto lhs = tspg::compose_prompt(add(scale(q1, a), scale(q2, 1 - a)), P);
  const auto rhs = add(scale(tspg::compose_prompt(q1, P), a), scale(tspg::compose_prompt(q2, P), 1 - a));
  EXPECT_LT(max_abs_diff(lhs.data(), rhs.data()), 1e-14);
  EXPECT_THROW(tspg::compose_prompt(TD::zeros({1, 3}), P), ShapeError);
}

TEST(Tspg, PromptInsideConvexHullOfRows) {
  std::mt19937_64 rng(4);
  const std::size_t C = 6;
  const auto p = random_tspg(C, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = tspg::generate_task_query(random_tensor({1, 3, 5, 5}, rng, 0, 1, false), p);
    double total = 0.0;
    for (double v : q.data()) {
      EXPECT_GE(v, 0.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    const auto pt = tspg::compose_prompt(q, p.prompts);
    for (std::size_t m = 0; m < C; ++m) {
      double lo = 1e9, hi = -1e9;
      for (std::size_t r = 0; r < C; ++r) {
        lo = std::min(lo, p.prompts.data()[r * C + m]);
        hi = std::max(hi, p.prompts.data()[r * C + m]);
      }
      EXPECT_GE(pt.data()[m], lo - 1e-12);
      EXPECT_LE(pt.data()[m], hi + 1e-12);
    }
  }
}

TEST(Tspg, BroadcastAndGradients) {
  std::mt19937_64 rng(5);
  auto pt = random_tensor({1, 3}, rng);
  const auto one = tspg::broadcast_prompt(pt, 1, 1);
  EXPECT_EQ(one.shape(), (Shape{1, 3, 1, 1}));
  EXPECT_EQ(max_abs_diff(one.data(), pt.data()), 0.0);
  const auto map = tspg::broadcast_prompt(pt, 3, 4);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(map.data()[c * 12 + i], pt.data()[c]);
  const auto report = grad_check([&] { return sum(tspg::broadcast_prompt(pt, 3, 4)); }, {{"p", pt}});
  EXPECT_TRUE(report.passed) << report.summary();
  EXPECT_NEAR(report.worst_numeric, 12.0, 1e-6);

  // end to end: downstream scalar through P̃ into P_t and the conv
  auto p = random_tspg(4, rng);
  p.conv_w.set_requires_grad(true);
  p.prompts.set_requires_grad(true);
  const auto img = random_tensor({2, 3, 4, 4}, rng, 0, 1, false);
  const auto e2e = grad_check(
      [&] {
        const auto prompt = tspg::compose_prompt(tspg::generate_task_query(img, p), p.prompts);
        return probe(tspg::broadcast_prompt(prompt, 4, 4));
      },
      {{"P_t", p.prompts}, {"conv_w", p.conv_w}});
  EXPECT_TRUE(e2e.passed) << e2e.summary();
}

TEST(Tspg, RegistryNames) {
  Initializer init(1);
  ParamRegistry<double> reg;
  tspg::make_tspg<double>(4, init).register_into(reg);
  EXPECT_TRUE(reg.contains("tspg.conv.weight"));
  EXPECT_TRUE(reg.contains("tspg.conv.bias"));
  EXPECT_TRUE(reg.contains("tspg.P_t"));
  EXPECT_EQ(reg.get("tspg.P_t").shape(), (Shape{4, 4}));
}

TEST(Experts, BankDeterminismAndCount) {
  const auto a = experts::make_bank<double>(3, 4, 8, 11);
  const auto b = experts::make_bank<double>(3, 4, 8, 11);
  const auto c = experts::make_bank<double>(3, 4, 8, 12);
  EXPECT_EQ(a.parameter_count(), 3u * (4 * 8 + 8 + 8 * 4 + 4));
  double diff_same = 0, diff_other = 0;
  for (std::size_t j = 0; j < 3; ++j) {
    diff_same += max_abs_diff(a.experts[j].w1.data(), b.experts[j].w1.data());
    diff_other += max_abs_diff(a.experts[j].w1.data(), c.experts[j].w1.data());
  }
  EXPECT_EQ(diff_same, 0.0);
  EXPECT_GT(diff_other, 0.0);
  // experts within a bank differ
  EXPECT_GT(max_abs_diff(a.experts[0].w1.data(), a.experts[1].w1.data()), 0.0);
  ParamRegistry<double> reg;
  a.register_into(reg);
  EXPECT_TRUE(reg.contains("experts.pixel.2.w2"));
  EXPECT_EQ(reg.trainable_count(), a.parameter_count());
}

TEST(Experts, ZeroAndIdentityConfigurations) {
  std::mt19937_64 rng(6);
  const std::size_t C = 3;
  auto bank = experts::make_bank<double>(2, C, C, 1);
  const auto x = random_tensor({1, C, 2, 2}, rng, 0.1, 1.0, false);
  for (auto* t : {&bank.experts[0].w1, &bank.experts[0].b1, &bank.experts[0].w2, &bank.experts[0].b2}) {
    for (auto& v : t->data_mut()) v = 0.0;
  }
  const auto zero = experts::apply_expert(bank, 0, x);
  for (double v : zero.data()) EXPECT_EQ(v, 0.0);

  // Identity layers; GELU(u) for large positive u is u, so shift into that
  // region with b1 and back with b2.
  const double shift = 20.0;
  auto& e = bank.experts[1];
  for (std::size_t i = 0; i < C; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      e.w1.data_mut()[i * C + j] = i == j ? 1.0 : 0.0;
      e.w2.data_mut()[i * C + j] = i == j ? 1.0 : 0.0;
    }
  for (auto& v : e.b1.data_mut()) v = shift;
  for (auto& v : e.b2.data_mut()) v = -shift;
  EXPECT_LT(max_abs_diff(experts::apply_expert(bank, 1, x).data(), x.data()), 1e-12);
  EXPECT_THROW(experts::apply_expert(bank, 2, x), ArgumentError);
}

TEST(Experts, MatchesTwoMatmulOracleAndIsPositionWise) {
  std::mt19937_64 rng(7);
  const std::size_t C = 4, hid = 8;
  const auto bank = experts::make_bank<double>(2, C, hid, 3);
  const auto x = random_tensor({1, C, 1, 1}, rng, -1, 1, false);
  const auto y = experts::apply_expert(bank, 1, x);
  const auto& e = bank.experts[1];
  for (std::size_t o = 0; o < C; ++o) {
    double acc = e.b2.data()[o];
    for (std::size_t h = 0; h < hid; ++h) {
      double u = e.b1.data()[h];
      for (std::size_t i = 0; i < C; ++i) u += e.w1.data()[h * C + i] * x.data()[i];
      acc += e.w2.data()[o * hid + h] * 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    }
    EXPECT_NEAR(y.data()[o], acc, 1e-14);
  }
  // permuting positions commutes with application
  const auto m = random_tensor({1, C, 1, 5}, rng, -1, 1, false);
  auto perm = TD::zeros(m.shape());
  const std::size_t order[5] = {3, 0, 4, 1, 2};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < 5; ++p) perm.data_mut()[c * 5 + p] = m.data()[c * 5 + order[p]];
  const auto ym = experts::apply_expert(bank, 0, m), yp = experts::apply_expert(bank, 0, perm);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < 5; ++p) EXPECT_EQ(yp.data()[c * 5 + p], ym.data()[c * 5 + order[p]]);
}

TEST(Experts, GradCheckThroughWeightedSumOfTwoExperts) {
  std::mt19937_64 rng(8);
  auto bank = experts::make_bank<double>(2, 3, 6, 4);
  NamedTensors params;
  for (std::size_t j = 0; j < 2; ++j) {
    auto& e = bank.experts[j];
    for (auto* t : {&e.w1, &e.b1, &e.w2, &e.b2}) t->set_requires_grad(true);
    params.push_back({"e" + std::to_string(j) + ".w1", e.w1});
    params.push_back({"e" + std::to_string(j) + ".b1", e.b1});
    params.push_back({"e" + std::to_string(j) + ".w2", e.w2});
    params.push_back({"e" + std::to_string(j) + ".b2", e.b2});
  }
  auto x = random_tensor({1, 3, 2, 2}, rng);
  params.push_back({"x", x});
  const auto report = grad_check(
      [&] {
        return probe(add(scale(experts::apply_expert(bank, 0, x), 0.7), scale(experts::apply_expert(bank, 1, x), 0.2)));
      },
      params);
  EXPECT_TRUE(report.passed) << report.summary();
}
