#include "meas/cli/run_config.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <sstream>

#include "meas/numerics/errors.hpp"

namespace meas::cli {

degrade::DatasetSpec RunConfig::eval_spec() const {
  degrade::DatasetSpec spec = data;
  spec.seed = eval_seed ? *eval_seed : degrade::hash64(data.seed, 0xE7A1);
  spec.flip = false;
  spec.count = train.eval_count;
  return spec;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (data.crop_size < model.filter_size) {
    throw UsageError("data: crop_size " + std::to_string(data.crop_size) + " is below the filter size");
  }
}

namespace {

struct Scratch {
  std::string variant;
  std::vector<std::string> tasks;
  std::uint64_t eval_seed = 0;
};

void bind(CLI::App& app, RunConfig& c, Scratch& s) {
  app.allow_config_extras(CLI::config_extras_mode::error);
  auto section = [&app](const char* name) {
    auto* sub = app.add_subcommand(name)->configurable();
    sub->allow_config_extras(CLI::config_extras_mode::error);
    return sub;
  };

  auto* m = section("model");
  m->add_option("--channels", c.model.channels);
  m->add_option("--experts", c.model.experts);
  m->add_option("--top_k", c.model.top_k);
  m->add_option("--filter_size", c.model.filter_size);
  m->add_option("--heads", c.model.heads);
  m->add_option("--stages", c.model.stages);
  m->add_option("--expert_hidden", c.model.expert_hidden);
  m->add_option("--balance_variant", s.variant);
  m->add_option("--lambda", c.model.lambda);
  m->add_option("--global_balance", c.model.global_balance);
  m->add_option("--seed", c.model.seed);
  m->add_option("--use_tspg", c.model.use_tspg);
  m->add_option("--use_mese", c.model.use_mese);
  m->add_option("--use_fd", c.model.use_fd);
  m->add_option("--use_mee", c.model.use_mee);

  auto* t = section("train");
  t->add_option("--lr", c.train.lr0);
  t->add_option("--steps", c.train.total_steps);
  t->add_option("--batch_size", c.train.batch_size);
  t->add_option("--clip_norm", c.train.clip_norm);
  t->add_option("--eval_every", c.train.eval_every);
  t->add_option("--eval_count", c.train.eval_count);
  t->add_option("--checkpoint_every", c.train.checkpoint_every);
  t->add_option("--out_dir", c.train.out_dir);

  auto& p = c.data.params;
  auto* d = section("data");
  d->add_option("--source", c.data.source);
  d->add_option("--tasks", s.tasks)->delimiter(',');
  d->add_option("--image_size", c.data.image_size);
  d->add_option("--crop_size", c.data.crop_size);
  d->add_option("--flip", c.data.flip);
  d->add_option("--seed", c.data.seed);
  d->add_option("--count", c.data.count);
  d->add_option("--eval_seed", s.eval_seed);
  d->add_option("--noise_sigmas", p.noise_sigmas)->delimiter(',');
  d->add_option("--rain_streaks_min", p.rain_streaks_min);
  d->add_option("--rain_streaks_max", p.rain_streaks_max);
  d->add_option("--rain_angle_min", p.rain_angle_min);
  d->add_option("--rain_angle_max", p.rain_angle_max);
  d->add_option("--rain_intensity", p.rain_intensity);
  d->add_option("--rain_length_min", p.rain_length_min);
  d->add_option("--rain_length_max", p.rain_length_max);
  d->add_option("--haze_t_min", p.haze_t_min);
  d->add_option("--haze_t_max", p.haze_t_max);
  d->add_option("--airlight_min", p.airlight_min);
  d->add_option("--airlight_max", p.airlight_max);
  d->add_option("--blur_sigma_min", p.blur_sigma_min);
  d->add_option("--blur_sigma_max", p.blur_sigma_max);
  d->add_option("--lowlight_gamma_min", p.lowlight_gamma_min);
  d->add_option("--lowlight_gamma_max", p.lowlight_gamma_max);
  d->add_option("--lowlight_scale_min", p.lowlight_scale_min);
  d->add_option("--lowlight_scale_max", p.lowlight_scale_max);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

template <typename V>
std::string join(const std::vector<V>& values) {
  std::ostringstream os;
  for (std::size_t i = 0; i < values.size(); ++i) os << (i ? ", " : "") << values[i];
  return os.str();
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  RunConfig c;
  Scratch s;
  s.variant = mese::variant_name(c.model.balance_variant);
  CLI::App app;
  bind(app, c, s);
  std::istringstream in(text);
  try {
    app.parse_from_stream(in);
  } catch (const CLI::ParseError& e) {
    throw UsageError(origin + ": " + e.what());
  }
  auto* data = app.get_subcommand("data");
  if (data->count("--eval_seed") > 0) c.eval_seed = s.eval_seed;
  if (data->count("--tasks") > 0) {
    c.data.tasks.clear();
    for (const auto& name : s.tasks) {
      const auto t = trim(name);
      if (!t.empty()) c.data.tasks.push_back(degrade::parse_task(t));
    }
  }
  c.model.balance_variant = mese::parse_variant(trim(s.variant));
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read config file '" + path + "'");
  std::ostringstream text;
  text << f.rdbuf();
  return parse_run_config(text.str(), path);
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  auto b = [](bool v) { return v ? "true" : "false"; };
  const auto& m = model;
  os << "[model]\n"
     << "channels = " << m.channels << "\nexperts = " << m.experts << "\ntop_k = " << m.top_k
     << "\nfilter_size = " << m.filter_size << "\nheads = " << m.heads << "\nstages = " << m.stages
     << "\nexpert_hidden = " << m.expert_hidden << "\nbalance_variant = " << mese::variant_name(m.balance_variant)
     << "\nlambda = " << m.lambda << "\nglobal_balance = " << b(m.global_balance) << "\nseed = " << m.seed
     << "\nuse_tspg = " << b(m.use_tspg) << "\nuse_mese = " << b(m.use_mese) << "\nuse_fd = " << b(m.use_fd)
     << "\nuse_mee = " << b(m.use_mee) << "\n\n";
  const auto& t = train;
  os << "[train]\n"
     << "lr = " << t.lr0 << "\nsteps = " << t.total_steps << "\nbatch_size = " << t.batch_size
     << "\nclip_norm = " << t.clip_norm << "\neval_every = " << t.eval_every << "\neval_count = " << t.eval_count
     << "\ncheckpoint_every = " << t.checkpoint_every << "\n";
  if (!t.out_dir.empty()) os << "out_dir = \"" << t.out_dir << "\"\n";
  const auto& d = data;
  const auto& p = d.params;
  std::vector<std::string> tasks;
  for (auto task : d.tasks) tasks.push_back(degrade::task_name(task));
  os << "\n[data]\n"
     << "source = \"" << d.source << "\"\ntasks = \"" << join(tasks) << "\"\nimage_size = " << d.image_size
     << "\ncrop_size = " << d.crop_size << "\nflip = " << b(d.flip) << "\nseed = " << d.seed << "\ncount = " << d.count
     << "\n";
  if (eval_seed) os << "eval_seed = " << *eval_seed << "\n";
  os << "noise_sigmas = \"" << join(p.noise_sigmas) << "\"\nrain_streaks_min = " << p.rain_streaks_min
     << "\nrain_streaks_max = " << p.rain_streaks_max << "\nrain_angle_min = " << p.rain_angle_min
     << "\nrain_angle_max = " << p.rain_angle_max << "\nrain_intensity = " << p.rain_intensity
     << "\nrain_length_min = " << p.rain_length_min << "\nrain_length_max = " << p.rain_length_max
     << "\nhaze_t_min = " << p.haze_t_min << "\nhaze_t_max = " << p.haze_t_max << "\nairlight_min = " << p.airlight_min
     << "\nairlight_max = " << p.airlight_max << "\nblur_sigma_min = " << p.blur_sigma_min
     << "\nblur_sigma_max = " << p.blur_sigma_max << "\nlowlight_gamma_min = " << p.lowlight_gamma_min
     << "\nlowlight_gamma_max = " << p.lowlight_gamma_max << "\nlowlight_scale_min = " << p.lowlight_scale_min
     << "\nlowlight_scale_max = " << p.lowlight_scale_max << "\n";
  return os.str();
}

void apply_overrides(RunConfig& config, const Overrides& o) {
  if (o.seed) {
    config.model.seed = *o.seed;
    config.data.seed = *o.seed;
  }
  if (o.steps) config.train.total_steps = *o.steps;
  if (o.out) config.train.out_dir = *o.out;
}

}  // namespace meas::cli
