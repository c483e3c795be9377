#include "meas/cli/gradsuite.hpp"

#include <random>

#include "meas/experts/experts.hpp"
#include "meas/fdmee/fdmee.hpp"
#include "meas/mese/mese.hpp"
#include "meas/model/model.hpp"
#include "meas/numerics/ops.hpp"
#include "meas/tspg/tspg.hpp"

namespace meas::cli {

namespace {

using TD = Tensor<double>;

class Rand {
 public:
  explicit Rand(std::uint64_t seed) : rng_(seed) {}
  TD tensor(Shape shape, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = dist(rng_);
    return TD::from_data(std::move(shape), std::move(v), true);
  }

 private:
  std::mt19937_64 rng_;
};

// Fixed random read-out so every output entry receives its own gradient.
TD readout(const TD& y, std::uint64_t seed) {
  Rand r(seed);
  auto w = r.tensor(y.shape());
  w.set_requires_grad(false);
  return sum(mul(y, w));
}

void require_grad(std::initializer_list<const TD*> ts) {
  for (const auto* t : ts) t->set_requires_grad(true);
}

}  // namespace

std::vector<SuiteEntry> run_gradient_suite(const model::ModelConfig& config, std::size_t size, std::uint64_t seed) {
  const std::size_t C = config.channels, N = config.experts, K = config.top_k, B = 2, S = size;
  Rand r(seed);
  GradCheckOptions module_opts;
  module_opts.tolerance = 1e-4;
  module_opts.max_entries_per_tensor = 24;
  GradCheckOptions model_opts = module_opts;
  model_opts.tolerance = 1e-3;
  model_opts.max_entries_per_tensor = 8;

  std::vector<SuiteEntry> out;
  auto run = [&](const std::string& module, const std::string& check, auto&& f, const NamedTensors& params,
                 const GradCheckOptions& opts) {
    out.push_back({module, check, opts.tolerance, grad_check(f, params, opts)});
  };

  // ---- numerics ----
  {
    auto x = r.tensor({B, C, S, S});
    auto w = r.tensor({C, C, 3, 3}, -0.3, 0.3), b = r.tensor({C});
    run("numerics", "conv2d", [&] { return readout(conv2d(x, w, b), 1); }, {{"x", x}, {"w", w}, {"b", b}},
        module_opts);
    auto dw = r.tensor({B, C, 3, 3});
    run("numerics", "depthwise_conv2d", [&] { return readout(depthwise_conv2d(x, dw, TD()), 2); },
        {{"x", x}, {"w", dw}}, module_opts);
    run("numerics", "softmax", [&] { return readout(softmax(x, 1), 3); }, {{"x", x}}, module_opts);
    auto g = r.tensor({C}, 0.5, 1.5), be = r.tensor({C});
    run("numerics", "layer_norm", [&] { return readout(layer_norm_channels(x, g, be), 4); },
        {{"x", x}, {"gamma", g}, {"beta", be}}, module_opts);
    BatchNormStats<double> stats{TD::zeros({C}), TD::full({C}, 1.0)};
    run("numerics", "batch_norm", [&] { return readout(batch_norm(x, g, be, stats, true), 5); },
        {{"x", x}, {"gamma", g}}, module_opts);
    auto qkv = r.tensor({3 * C, C}, -0.5, 0.5), bq = r.tensor({3 * C}), wo = r.tensor({C, C}), bo = r.tensor({C});
    run("numerics", "self_attention",
        [&] { return readout(self_attention(x, qkv, bq, wo, bo, config.heads), 6); },
        {{"x", x}, {"w_qkv", qkv}, {"w_out", wo}}, module_opts);
    auto v = r.tensor({B, N}, 0.2, 2.0);
    run("numerics", "std_pop/div", [&] { return div(std_pop(v), mul(mean(v), mean(v))); }, {{"v", v}},
        module_opts);
  }

  // ---- tspg ----
  {
    Initializer init(seed + 11);
    auto p = tspg::make_tspg<double>(C, init);
    require_grad({&p.conv_w, &p.conv_b, &p.prompts});
    auto img = r.tensor({B, 3, S, S}, 0.0, 1.0);
    run("tspg", "query->prompt->broadcast",
        [&] {
          const auto q = tspg::generate_task_query(img, p);
          return readout(tspg::broadcast_prompt(tspg::compose_prompt(q, p.prompts), S, S), 7);
        },
        {{"image", img}, {"conv_w", p.conv_w}, {"conv_b", p.conv_b}, {"P_t", p.prompts}}, module_opts);
  }

  // ---- experts ----
  {
    auto bank = experts::make_bank<double>(N, C, config.hidden(), seed + 12);
    auto& e = bank.experts[0];
    require_grad({&e.w1, &e.b1, &e.w2, &e.b2});
    auto x = r.tensor({B, C, S, S});
    run("experts", "apply_expert", [&] { return readout(experts::apply_expert(bank, 0, x), 8); },
        {{"x", x}, {"w1", e.w1}, {"b1", e.b1}, {"w2", e.w2}, {"b2", e.b2}}, module_opts);
  }

  // ---- mese ----
  {
    auto bank = experts::make_bank<double>(N, C, config.hidden(), seed + 13);
    for (auto& e : bank.experts) require_grad({&e.w1, &e.w2});
    auto prompt = r.tensor({B, C, S, S}), feat = r.tensor({B, C, S, S});
    auto pe = r.tensor({2 * C, N}, -0.5, 0.5);
    auto routing = [&] { return mese::route_pixels(mese::fuse_task_content(prompt, feat), pe); };
    // the discrete choice is frozen; finite differences cannot see through it
    const auto sel = mese::select_topk_pixels(routing(), K);
    run("mese", "route+pixel experts",
        [&] { return readout(mese::apply_pixel_experts(feat, routing(), sel, bank), 9); },
        {{"prompt", prompt}, {"features", feat}, {"p_e", pe}, {"E0.w1", bank.experts[0].w1},
         {"E1.w2", bank.experts[1].w2}},
        module_opts);
    const auto counts = mese::expert_counts(sel);
    for (auto variant : {mese::BalanceVariant::paper, mese::BalanceVariant::cv2}) {
      run("mese", std::string("balance_loss/") + mese::variant_name(variant),
          [&] { return mese::balance_loss(mese::expert_importance(routing()), counts, variant); },
          {{"features", feat}, {"p_e", pe}}, module_opts);
    }
  }

  // ---- fdmee ----
  {
    Initializer init(seed + 14);
    auto gen = fdmee::make_filter_generator<double>(C, config.filter_size, init);
    require_grad({&gen.conv_w, &gen.conv_b, &gen.bn_gamma, &gen.bn_beta});
    auto x = r.tensor({B, C, S, S});
    for (bool training : {true, false}) {
      NamedTensors params{{"x", x}, {"conv_w", gen.conv_w}, {"bn_gamma", gen.bn_gamma}, {"bn_beta", gen.bn_beta}};
      // batch statistics cancel the conv bias exactly; it only matters in eval mode
      if (!training) params.push_back({"conv_b", gen.conv_b});
      run("fdmee", std::string("dynamic filter+split/") + (training ? "train" : "eval"),
          [&] {
            const auto taps = fdmee::make_lowpass_filter(x, gen, training);
            const auto pair = fdmee::split_frequencies(x, taps);
            return add(readout(pair.low, 10), readout(pair.high, 11));
          },
          params, module_opts);
    }

    auto br = fdmee::make_branch<double>(C, N, init);
    require_grad({&br.ln_gamma, &br.ln_beta, &br.dconv_up_w, &br.linear_w, &br.linear_b, &br.dconv_low_w,
                  &br.pconv_w});
    auto bank = experts::make_bank<double>(N, C, config.hidden(), seed + 15, experts::Scope::low);
    for (auto& e : bank.experts) require_grad({&e.w1});
    const auto sel = fdmee::select_global(fdmee::global_expert_scores(x, br).scores, K);
    run("fdmee", "branch+global ensemble",
        [&] {
          const auto gs = fdmee::global_expert_scores(x, br);
          const auto pd = fdmee::interact(fdmee::lower_path(gs.normalized, br), gs.dconv);
          return readout(fdmee::ensemble_global(pd, gs.scores, sel, bank), 12);
        },
        {{"x", x}, {"ln_gamma", br.ln_gamma}, {"ln_beta", br.ln_beta}, {"dconv_up", br.dconv_up_w},
         {"linear_w", br.linear_w}, {"linear_b", br.linear_b}, {"dconv_low", br.dconv_low_w},
         {"pconv", br.pconv_w}, {"E.w1", bank.experts[std::size_t(sel.indices[0])].w1}},
        module_opts);
  }

  // ---- model ----
  {
    Initializer init(seed + 16);
    auto t = model::make_transformer<double>(C, config.heads, init);
    require_grad({&t.ln1_gamma, &t.w_qkv, &t.w_out, &t.mlp.w1});
    auto x = r.tensor({B, C, S, S});
    run("model", "transformer_block", [&] { return readout(model::transformer_block(x, t), 13); },
        {{"x", x}, {"ln1", t.ln1_gamma}, {"qkv", t.w_qkv}, {"out", t.w_out}, {"mlp.w1", t.mlp.w1}},
        module_opts);

    auto cfg = config;
    cfg.seed = seed;
    model::Model<double> net(cfg);
    auto img = r.tensor({B, 3, S, S}, 0.0, 1.0);
    NamedTensors params{{"input", img}};
    for (const auto& e : net.registry().entries()) {
      if (e.trainable) params.push_back({e.name, e.tensor});
    }
    run("model", "full network",
        [&] {
          const auto res = net.forward(img, true);
          return add(readout(res.output, 14), res.balance);
        },
        params, model_opts);
  }
  return out;
}

}  // namespace meas::cli
