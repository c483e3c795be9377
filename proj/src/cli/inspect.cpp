#include "meas/cli/inspect.hpp"

#include <filesystem>
#include <fstream>
#include <iomanip>

#include "meas/numerics/errors.hpp"

namespace meas::cli {

namespace {

std::vector<double> channel_energy(const Tensor<float>& map) {
  const std::size_t C = map.dim(1), hw = map.dim(2) * map.dim(3);
  std::vector<double> e(C, 0.0);
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = map.data()[c * hw + i];
      e[c] += v * v;
    }
    e[c] /= double(hw);
  }
  return e;
}

std::ofstream open_csv(const std::filesystem::path& p) {
  std::ofstream f(p);
  if (!f) throw DataError("cannot write '" + p.string() + "'");
  f << std::setprecision(9);
  return f;
}

}  // namespace

InspectReport inspect(model::Model<float>& model, const degrade::Image& image) {
  NoGradGuard guard;
  const auto result = model.forward(degrade::to_tensor<float>(image), false);
  const auto& cfg = model.config();
  InspectReport report;
  if (result.query.defined()) report.query.assign(result.query.data().begin(), result.query.data().end());
  for (const auto& aux : result.stages) {
    StageReport s;
    s.height = image.height;
    s.width = image.width;
    s.experts = cfg.experts;
    s.k = cfg.top_k;
    if (aux.routing.defined()) {
      const auto& sel = aux.selection;
      s.winners.resize(sel.pixels());
      for (std::size_t p = 0; p < sel.pixels(); ++p) s.winners[p] = std::uint8_t(sel.indices[p * sel.k]);
      for (double v : aux.counts.data()) s.usage.push_back(std::size_t(v));
      s.importance.assign(aux.importance.data().begin(), aux.importance.data().end());
    }
    s.low_scores.assign(aux.low_scores.data().begin(), aux.low_scores.data().end());
    s.high_scores.assign(aux.high_scores.data().begin(), aux.high_scores.data().end());
    s.low_selected = aux.low_selection.indices;
    s.high_selected = aux.high_selection.indices;
    s.low_energy = channel_energy(aux.frequencies.low);
    s.high_energy = channel_energy(aux.frequencies.high);
    report.stages.push_back(std::move(s));
  }
  return report;
}

void write_inspect(const InspectReport& report, const std::string& dir) {
  const std::filesystem::path root(dir);
  std::filesystem::create_directories(root);

  auto usage = open_csv(root / "usage.csv");
  usage << "stage,expert,count,importance\n";
  auto scores = open_csv(root / "global_scores.csv");
  scores << "stage,branch,expert,score,selected\n";
  auto spectrum = open_csv(root / "spectrum.csv");
  spectrum << "stage,channel,low_energy,high_energy,high_fraction\n";

  for (std::size_t s = 0; s < report.stages.size(); ++s) {
    const auto& st = report.stages[s];
    if (!st.winners.empty()) {
      degrade::save_indexed_png(st.winners, st.height, st.width, st.experts,
                                (root / ("stage" + std::to_string(s) + "_experts.png")).string());
    }
    for (std::size_t n = 0; n < st.usage.size(); ++n) {
      usage << s << ',' << n << ',' << st.usage[n] << ',' << st.importance[n] << "\n";
    }
    auto write_branch = [&](const char* name, const std::vector<double>& w, const std::vector<std::int32_t>& sel) {
      for (std::size_t n = 0; n < w.size(); ++n) {
        const bool chosen = std::find(sel.begin(), sel.end(), std::int32_t(n)) != sel.end();
        scores << s << ',' << name << ',' << n << ',' << w[n] << ',' << (chosen ? 1 : 0) << "\n";
      }
    };
    write_branch("low", st.low_scores, st.low_selected);
    write_branch("high", st.high_scores, st.high_selected);
    for (std::size_t c = 0; c < st.low_energy.size(); ++c) {
      const double total = st.low_energy[c] + st.high_energy[c];
      spectrum << s << ',' << c << ',' << st.low_energy[c] << ',' << st.high_energy[c] << ','
               << (total > 0 ? st.high_energy[c] / total : 0.0) << "\n";
    }
  }
  auto query = open_csv(root / "query.csv");
  query << "channel,weight\n";
  for (std::size_t c = 0; c < report.query.size(); ++c) query << c << ',' << report.query[c] << "\n";
}

}  // namespace meas::cli
