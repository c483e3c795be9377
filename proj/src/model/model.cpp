#include "meas/model/model.hpp"

#include <algorithm>
#include <map>

#include "meas/numerics/errors.hpp"
#include "meas/numerics/ops.hpp"

namespace meas::model {

template <typename T>
void TransformerParams<T>::register_into(ParamRegistry<T>& registry, const std::string& prefix) const {
  registry.add(prefix + "ln1.weight", ln1_gamma);
  registry.add(prefix + "ln1.bias", ln1_beta);
  registry.add(prefix + "attn.qkv.weight", w_qkv);
  registry.add(prefix + "attn.qkv.bias", b_qkv);
  registry.add(prefix + "attn.out.weight", w_out);
  registry.add(prefix + "attn.out.bias", b_out);
  registry.add(prefix + "ln2.weight", ln2_gamma);
  registry.add(prefix + "ln2.bias", ln2_beta);
  registry.add(prefix + "mlp.w1", mlp.w1);
  registry.add(prefix + "mlp.b1", mlp.b1);
  registry.add(prefix + "mlp.w2", mlp.w2);
  registry.add(prefix + "mlp.b2", mlp.b2);
}

template <typename T>
TransformerParams<T> make_transformer(std::size_t channels, std::size_t heads, Initializer& init) {
  if (heads == 0 || channels % heads != 0) {
    throw ArgumentError("transformer: channels " + std::to_string(channels) + " not divisible by heads " +
                        std::to_string(heads));
  }
  const std::size_t hidden = 2 * channels;
  TransformerParams<T> p;
  p.heads = heads;
  p.ln1_gamma = Tensor<T>::full({channels}, T(1));
  p.ln1_beta = Tensor<T>::zeros({channels});
  p.w_qkv = init.fan_in_uniform<T>({3 * channels, channels}, channels);
  p.b_qkv = Tensor<T>::zeros({3 * channels});
  p.w_out = init.fan_in_uniform<T>({channels, channels}, channels);
  p.b_out = Tensor<T>::zeros({channels});
  p.ln2_gamma = Tensor<T>::full({channels}, T(1));
  p.ln2_beta = Tensor<T>::zeros({channels});
  p.mlp.w1 = init.fan_in_uniform<T>({hidden, channels}, channels);
  p.mlp.b1 = Tensor<T>::zeros({hidden});
  p.mlp.w2 = init.fan_in_uniform<T>({channels, hidden}, hidden);
  p.mlp.b2 = Tensor<T>::zeros({channels});
  return p;
}

template <typename T>
Tensor<T> transformer_block(const Tensor<T>& x, const TransformerParams<T>& p) {
  if (x.rank() != 4 || x.dim(2) * x.dim(3) == 0) {
    throw ShapeError("transformer_block: expected a non-empty [B,C,H,W], got " + shape_str(x.shape()));
  }
  const auto attended = self_attention(layer_norm_channels(x, p.ln1_gamma, p.ln1_beta), p.w_qkv, p.b_qkv, p.w_out,
                                       p.b_out, p.heads);
  const auto h = add(x, attended);
  return add(h, channel_mlp(layer_norm_channels(h, p.ln2_gamma, p.ln2_beta), p.mlp));
}

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Initializer init(config_.seed);
  const std::size_t c = config_.channels, n = config_.experts;

  encoder_w_ = registry_.add("encoder.weight", init.fan_in_uniform<T>({c, 3, 3, 3}, 27));
  encoder_b_ = registry_.add("encoder.bias", Tensor<T>::zeros({c}));
  tspg_ = tspg::make_tspg<T>(c, init);
  tspg_.register_into(registry_);

  for (std::size_t s = 0; s < config_.stages; ++s) {
    const std::string prefix = s == 0 ? "" : "stage" + std::to_string(s) + ".";
    StageParams<T> st;
    if (s > 0) {
      st.proj_w = registry_.add(prefix + "proj.weight", init.fan_in_uniform<T>({c, 2 * c}, 2 * c));
      st.proj_b = registry_.add(prefix + "proj.bias", Tensor<T>::zeros({c}));
    }
    st.expert_prompts = registry_.add(prefix + "mese.p_e", init.normal_tensor<T>({2 * c, n}, 0.02));
    st.pixel = experts::make_bank<T>(experts::Scope::pixel, n, c, config_.hidden(), init);
    st.pixel.register_into(registry_, prefix + "experts.");
    st.mixer = make_transformer<T>(c, config_.heads, init);
    st.mixer.register_into(registry_, prefix + "mese.transformer.");
    st.filter = fdmee::make_filter_generator<T>(c, config_.filter_size, init);
    st.filter.register_into(registry_, prefix + "fd.");
    st.low_branch = fdmee::make_branch<T>(c, n, init);
    st.low_branch.register_into(registry_, prefix + "fdmee.low.");
    st.high_branch = fdmee::make_branch<T>(c, n, init);
    st.high_branch.register_into(registry_, prefix + "fdmee.high.");
    st.low = experts::make_bank<T>(experts::Scope::low, n, c, config_.hidden(), init);
    st.low.register_into(registry_, prefix + "experts.");
    st.high = experts::make_bank<T>(experts::Scope::high, n, c, config_.hidden(), init);
    st.high.register_into(registry_, prefix + "experts.");
    stages_.push_back(std::move(st));
  }

  decoder_w1_ = registry_.add("decoder.conv1.weight", init.fan_in_uniform<T>({c, 2 * c, 3, 3}, 2 * c * 9));
  decoder_b1_ = registry_.add("decoder.conv1.bias", Tensor<T>::zeros({c}));
  decoder_mixer_ = make_transformer<T>(c, config_.heads, init);
  decoder_mixer_.register_into(registry_, "decoder.transformer.");
  // a tenth of the usual range, so the residual starts close to the input
  decoder_w2_ = registry_.add("decoder.conv2.weight", init.fan_in_uniform<T>({3, c, 3, 3}, c * 9 * 100));
  decoder_b2_ = registry_.add("decoder.conv2.bias", Tensor<T>::zeros({3}));
}

namespace {

// Balance term over the batch axis of branch scores [B,N].
template <typename T>
Tensor<T> global_balance(const Tensor<T>& scores, const fdmee::GlobalSelection& sel, mese::BalanceVariant variant) {
  const std::size_t batch = scores.dim(0), n = scores.dim(1);
  const auto importance = matmul(Tensor<T>::full({1, batch}, T(1)), scores);
  std::vector<T> counts(n, T(0));
  for (auto j : sel.indices) counts[std::size_t(j)] += T(1);
  return mese::balance_loss(importance, Tensor<T>::from_data({1, n}, std::move(counts)), variant);
}

template <typename T>
Tensor<T> one_hot_scores(std::size_t batch, std::size_t n) {
  std::vector<T> v(batch * n, T(0));
  for (std::size_t b = 0; b < batch; ++b) v[b * n] = T(1);
  return Tensor<T>::from_data({batch, n}, std::move(v));
}

}  // namespace

template <typename T>
ForwardResult<T> Model<T>::forward(const Tensor<T>& degraded, bool training) {
  if (degraded.rank() != 4 || degraded.dim(1) != 3) {
    throw ShapeError("model forward: expected [B,3,H,W], got " + shape_str(degraded.shape()));
  }
  const std::size_t batch = degraded.dim(0), h = degraded.dim(2), w = degraded.dim(3);
  if (h < config_.filter_size || w < config_.filter_size) {
    throw ShapeError("model forward: input " + std::to_string(h) + "x" + std::to_string(w) +
                     " smaller than the filter size " + std::to_string(config_.filter_size));
  }
  const std::size_t c = config_.channels, n = config_.experts, k = config_.top_k;

  ForwardResult<T> result;
  Tensor<T> prompt_map;
  if (config_.use_tspg) {
    result.query = tspg::generate_task_query(degraded, tspg_);
    result.prompt = tspg::compose_prompt(result.query, tspg_.prompts);
    prompt_map = tspg::broadcast_prompt(result.prompt, h, w);
  } else {
    prompt_map = Tensor<T>::zeros({batch, c, h, w});
  }

  Tensor<T> features = conv2d(degraded, encoder_w_, encoder_b_);
  Tensor<T> balance;
  auto add_balance = [&balance](const Tensor<T>& term) { balance = balance.defined() ? add(balance, term) : term; };

  for (std::size_t s = 0; s < stages_.size(); ++s) {
    StageParams<T>& st = stages_[s];
    StageAux<T> aux;
    if (s > 0) features = pointwise_conv2d(features, st.proj_w, st.proj_b);

    Tensor<T> mixed;
    if (config_.use_mese) {
      aux.routing = mese::route_pixels(mese::fuse_task_content(prompt_map, features), st.expert_prompts);
      aux.selection = mese::select_topk_pixels(aux.routing, k);
      aux.importance = mese::expert_importance(aux.routing);
      aux.counts = mese::expert_counts(aux.selection);
      add_balance(mese::balance_loss(aux.importance, aux.counts, config_.balance_variant));
      mixed = mese::apply_pixel_experts(features, aux.routing, aux.selection, st.pixel);
    } else {
      mixed = add(features, prompt_map);
    }
    const auto transformed = transformer_block(mixed, st.mixer);

    if (config_.use_fd) {
      aux.filter = fdmee::make_lowpass_filter(transformed, st.filter, training);
      aux.frequencies = fdmee::split_frequencies(transformed, aux.filter);
    } else {
      aux.frequencies = {transformed, Tensor<T>::zeros(transformed.shape())};
    }

    auto branch = [&](const Tensor<T>& input, const fdmee::BranchParams<T>& params,
                      const experts::ExpertBank<T>& bank, Tensor<T>& scores_out,
                      fdmee::GlobalSelection& sel_out) {
      const auto scored = fdmee::global_expert_scores(input, params);
      const auto combined = fdmee::interact(fdmee::lower_path(scored.normalized, params), scored.dconv);
      if (config_.use_mee) {
        scores_out = scored.scores;
        sel_out = fdmee::select_global(scored.scores, k);
        if (config_.global_balance) add_balance(global_balance(scored.scores, sel_out, config_.balance_variant));
        return fdmee::ensemble_global(combined, scored.scores, sel_out, bank);
      }
      scores_out = one_hot_scores<T>(batch, n);
      sel_out = fdmee::select_global(scores_out, 1);
      return fdmee::ensemble_global(combined, scores_out, sel_out, bank);
    };
    const auto low_out = branch(aux.frequencies.low, st.low_branch, st.low, aux.low_scores, aux.low_selection);
    const auto high_out = branch(aux.frequencies.high, st.high_branch, st.high, aux.high_scores, aux.high_selection);
    features = concat_channels<T>({low_out, high_out});
    result.stages.push_back(std::move(aux));
  }

  auto decoded = conv2d(features, decoder_w1_, decoder_b1_);
  decoded = transformer_block(decoded, decoder_mixer_);
  decoded = conv2d(decoded, decoder_w2_, decoder_b2_);
  result.output = add(degraded, decoded);
  result.balance = balance.defined() ? balance : Tensor<T>::scalar(T(0));
  return result;
}

template <typename T>
Tensor<T> Model<T>::restore(const Tensor<T>& degraded) {
  NoGradGuard guard;
  const auto out = forward(degraded, false).output;
  std::vector<T> values(out.data().begin(), out.data().end());
  for (auto& v : values) v = std::clamp(v, T(0), T(1));
  return Tensor<T>::from_data(out.shape(), std::move(values));
}

template <typename T>
std::vector<NamedArray> Model<T>::state() const {
  std::vector<NamedArray> out;
  for (const auto& e : registry_.entries()) {
    NamedArray a{e.name, e.tensor.shape(), {}};
    a.values.assign(e.tensor.data().begin(), e.tensor.data().end());
    out.push_back(std::move(a));
  }
  return out;
}

template <typename T>
void Model<T>::load_state(const std::vector<NamedArray>& arrays) {
  std::map<std::string, const NamedArray*> given;
  for (const auto& a : arrays) given[a.name] = &a;
  std::vector<std::string> missing, unexpected, mismatched;
  for (const auto& e : registry_.entries()) {
    const auto it = given.find(e.name);
    if (it == given.end()) {
      missing.push_back(e.name);
    } else if (it->second->shape != e.tensor.shape()) {
      mismatched.push_back(e.name + " " + shape_str(it->second->shape) + " vs " + shape_str(e.tensor.shape()));
    }
  }
  for (const auto& [name, a] : given) {
    if (!registry_.contains(name)) unexpected.push_back(name);
  }
  if (!missing.empty() || !unexpected.empty() || !mismatched.empty()) {
    auto join = [](const std::vector<std::string>& v) {
      std::string s;
      for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
      return s.empty() ? std::string("none") : s;
    };
    throw model::CheckpointError("checkpoint does not match the model: missing [" + join(missing) + "]; unexpected [" +
                                 join(unexpected) + "]; shape mismatch [" + join(mismatched) + "]");
  }
  for (const auto& e : registry_.entries()) {
    const auto& src = given.at(e.name)->values;
    auto dst = e.tensor.data_mut();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = T(src[i]);
  }
}

#define MEAS_INSTANTIATE_MODEL(T)                                                                 \
  template struct TransformerParams<T>;                                                           \
  template TransformerParams<T> make_transformer<T>(std::size_t, std::size_t, Initializer&);      \
  template Tensor<T> transformer_block<T>(const Tensor<T>&, const TransformerParams<T>&);         \
  template class Model<T>;

MEAS_INSTANTIATE_MODEL(float)
MEAS_INSTANTIATE_MODEL(double)

}  // namespace meas::model
