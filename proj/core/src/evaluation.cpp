#include "pgdiffseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <torch/torch.h>

#include "pgdiffseg/errors.hpp"
#include "pgdiffseg/logging.hpp"

namespace fs = std::filesystem;

namespace pgdiffseg {

double dsc(const torch::Tensor& pred, const torch::Tensor& truth) {
  if (!pred.sizes().equals(truth.sizes())) throw InvalidArgument("dsc: shape mismatch");
  auto a = pred != 0;
  auto b = truth != 0;
  const double na = a.sum().item<double>(), nb = b.sum().item<double>();
  if (na + nb == 0.0) return 1.0;
  const double inter = (a & b).sum().item<double>();
  return 2.0 * inter / (na + nb);
}

nlohmann::json to_json(const RunMetrics& m) {
  return {{"kind", to_string(m.kind)},
          {"nfe", m.nfe},
          {"effective_nfe", m.effective_nfe},
          {"repeats", m.repeats},
          {"seeds", m.seeds},
          {"repeat_mean_dsc", m.repeat_mean_dsc},
          {"mean_dsc", m.mean_dsc},
          {"var_dsc", m.var_dsc},
          {"per_image_dsc", m.per_image_dsc}};
}

namespace {

int effective_nfe(const SamplerConfig& c, const NoiseSchedule& schedule) {
  return c.kind == SamplerKind::ancestral ? schedule.steps() : c.nfe;
}

}  // namespace

torch::Tensor predict_masks(const Denoiser& denoiser, const std::vector<Sample>& split,
                            const NoiseSchedule& schedule, const SamplerConfig& sampler,
                            std::uint64_t seed, int batch_size) {
  if (split.empty()) throw InvalidArgument("cannot evaluate an empty split");
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  const auto cfg = sampler.resolved(schedule);
  std::vector<torch::Tensor> preds;
  for (std::size_t begin = 0; begin < split.size(); begin += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(split.size(), begin + static_cast<std::size_t>(batch_size));
    const auto batch = collate(split, begin, end);
    const auto seeds = item_seeds(seed, begin, end - begin);
    auto x0 = sample(denoiser, batch.images, schedule, cfg, seeds);
    preds.push_back(binarize(x0, cfg.binarize_threshold).squeeze(1));
  }
  return torch::cat(preds);
}

RunMetrics evaluate(const Denoiser& denoiser, const std::vector<Sample>& split,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    const EvalOptions& options) {
  if (split.empty()) throw InvalidArgument("cannot evaluate an empty split");
  if (options.repeats < 1) throw InvalidArgument("repeats must be >= 1");
  const auto cfg = sampler.resolved(schedule);
  RunMetrics m;
  m.kind = cfg.kind;
  m.nfe = cfg.nfe;
  m.effective_nfe = effective_nfe(cfg, schedule);
  m.repeats = options.repeats;
  for (int r = 0; r < options.repeats; ++r) {
    const auto rseed = derive_seed(options.seed, static_cast<std::uint64_t>(r));
    m.seeds.push_back(rseed);
    auto preds = predict_masks(denoiser, split, schedule, cfg, rseed, options.batch_size);
    std::vector<double> scores;
    scores.reserve(split.size());
    for (std::size_t i = 0; i < split.size(); ++i) {
      scores.push_back(dsc(preds[static_cast<int64_t>(i)], split[i].mask));
    }
    m.repeat_mean_dsc.push_back(std::accumulate(scores.begin(), scores.end(), 0.0) /
                                static_cast<double>(scores.size()));
    m.per_image_dsc.push_back(std::move(scores));
  }
  const double n = static_cast<double>(m.repeat_mean_dsc.size());
  m.mean_dsc = std::accumulate(m.repeat_mean_dsc.begin(), m.repeat_mean_dsc.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : m.repeat_mean_dsc) ss += (v - m.mean_dsc) * (v - m.mean_dsc);
  m.var_dsc = ss / n;
  return m;
}

Denoiser make_oracle_denoiser(const std::vector<Sample>& split, const NoiseSchedule& schedule) {
  std::vector<torch::Tensor> images, signals;
  for (const auto& s : split) {
    images.push_back(s.image);
    signals.push_back(mask_to_signal(s.mask));
  }
  return [images, signals, schedule](const torch::Tensor& x_t, const torch::Tensor& image, int t) {
    std::vector<torch::Tensor> x0;
    for (int64_t b = 0; b < image.size(0); ++b) {
      const auto query = image[b][0].to(torch::kFloat32);
      std::size_t hit = images.size();
      for (std::size_t i = 0; i < images.size(); ++i) {
        if (torch::equal(images[i], query)) {
          hit = i;
          break;
        }
      }
      if (hit == images.size()) throw ContractViolation("oracle denoiser: unknown image");
      x0.push_back(signals[hit].unsqueeze(0));
    }
    return eps_from_x0(x_t, t, torch::stack(x0).to(x_t.dtype()), schedule);
  };
}

SweepResult nfe_sweep(const Denoiser& denoiser, const std::vector<Sample>& split,
                      const NoiseSchedule& schedule, const SweepConfig& config) {
  if (split.empty()) throw InvalidArgument("cannot sweep an empty split");
  if (config.kinds.empty() || config.nfes.empty()) {
    throw InvalidArgument("sweep needs at least one sampler kind and one nfe");
  }
  SweepResult out;
  const EvalOptions opts{config.repeats, config.seed, config.batch_size};
  const auto warn = [&](std::string msg) {
    log_warn(msg);
    out.warnings.push_back(std::move(msg));
  };

  std::vector<int> nfes;
  for (int n : config.nfes) {
    if (n < 1 || n > schedule.steps()) {
      warn("dropping nfe " + std::to_string(n) + ": outside [1, T = " +
           std::to_string(schedule.steps()) + "]");
    } else {
      nfes.push_back(n);
    }
  }

  SamplerConfig ref;
  ref.kind = SamplerKind::ancestral;
  out.reference = evaluate(denoiser, split, schedule, ref, opts);
  log_info("ancestral reference: mean DSC " + std::to_string(out.reference.mean_dsc));

  for (auto kind : config.kinds) {
    if (kind == SamplerKind::ancestral) {
      warn("ancestral sampling has a fixed nfe; it is reported as the reference only");
      continue;
    }
    for (int n : nfes) {
      SamplerConfig c;
      c.kind = kind;
      c.nfe = n;
      c.eta = config.eta;
      if (kind == SamplerKind::dpm2 && n % 2 != 0) {
        if (n < 2) {
          warn("dropping dpm2 nfe 1: needs at least two evaluations");
          continue;
        }
        c.nfe = n - 1;
        warn("dpm2 nfe " + std::to_string(n) + " is odd; running " + std::to_string(c.nfe));
      }
      auto m = evaluate(denoiser, split, schedule, c, opts);
      m.nfe = n;
      log_info(to_string(kind) + " nfe " + std::to_string(n) + ": mean DSC " +
               std::to_string(m.mean_dsc) + " var " + std::to_string(m.var_dsc));
      out.rows.push_back(std::move(m));
    }
  }
  return out;
}

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(10);
  return out;
}

cv::Point to_px(double x, double y, const cv::Rect& area, double x0, double x1, double y0,
                double y1) {
  const double fx = x1 > x0 ? (x - x0) / (x1 - x0) : 0.5;
  const double fy = y1 > y0 ? (y - y0) / (y1 - y0) : 0.5;
  return {area.x + static_cast<int>(std::lround(fx * area.width)),
          area.y + area.height - static_cast<int>(std::lround(fy * area.height))};
}

void dashed_line(cv::Mat& img, cv::Point a, cv::Point b, const cv::Scalar& color, int dash = 8) {
  const double len = std::hypot(b.x - a.x, b.y - a.y);
  const int pieces = std::max(1, static_cast<int>(len / dash));
  for (int i = 0; i < pieces; i += 2) {
    const double f0 = static_cast<double>(i) / pieces;
    const double f1 = std::min(1.0, static_cast<double>(i + 1) / pieces);
    cv::line(img, a + (b - a) * f0, a + (b - a) * f1, color, 2, cv::LINE_AA);
  }
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

}  // namespace

void plot_sweep(const std::vector<RunMetrics>& rows, double reference_mean,
                const std::string& title, const fs::path& path) {
  if (rows.empty()) throw InvalidArgument("plot_sweep: nothing to plot");
  cv::Mat img(480, 720, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Rect area(80, 50, 560, 360);
  const cv::Scalar black(0, 0, 0), blue(180, 90, 20), red(40, 40, 200), yellow(0, 200, 255);

  std::vector<double> xs, means, vars;
  for (const auto& r : rows) {
    xs.push_back(std::log10(static_cast<double>(r.nfe)));
    means.push_back(r.mean_dsc);
    vars.push_back(r.var_dsc);
  }
  const auto [xmin, xmax] = std::minmax_element(xs.begin(), xs.end());
  const double x0 = *xmin - 0.05, x1 = *xmax + 0.05;
  double ylo = std::min(*std::min_element(means.begin(), means.end()), reference_mean) - 0.05;
  double yhi = std::max(*std::max_element(means.begin(), means.end()), reference_mean) + 0.05;
  ylo = std::max(0.0, ylo);
  yhi = std::min(1.05, yhi);
  const double vmax = std::max(1e-6, *std::max_element(vars.begin(), vars.end()) * 1.2);

  cv::rectangle(img, area, black, 1);
  for (int k = 0; k <= 4; ++k) {
    const double yv = ylo + (yhi - ylo) * k / 4.0;
    const auto p = to_px(x0, yv, area, x0, x1, ylo, yhi);
    cv::line(img, p, {p.x - 5, p.y}, black, 1);
    cv::putText(img, fmt(yv, 2), {p.x - 55, p.y + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, blue, 1,
                cv::LINE_AA);
    const auto q = to_px(x1, yv, area, x0, x1, ylo, yhi);
    cv::putText(img, fmt(vmax * k / 4.0 * 1e3, 2), {q.x + 6, q.y + 5}, cv::FONT_HERSHEY_SIMPLEX,
                0.45, red, 1, cv::LINE_AA);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto p = to_px(xs[i], ylo, area, x0, x1, ylo, yhi);
    cv::line(img, p, {p.x, p.y + 5}, black, 1);
    cv::putText(img, std::to_string(rows[i].nfe), {p.x - 10, p.y + 22}, cv::FONT_HERSHEY_SIMPLEX,
                0.45, black, 1, cv::LINE_AA);
  }

  const auto r0 = to_px(x0, reference_mean, area, x0, x1, ylo, yhi);
  const auto r1 = to_px(x1, reference_mean, area, x0, x1, ylo, yhi);
  cv::line(img, r0, r1, yellow, 2, cv::LINE_AA);

  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto p = to_px(xs[i], means[i], area, x0, x1, ylo, yhi);
    const auto q = to_px(xs[i], vars[i], area, x0, x1, 0.0, vmax);
    if (i > 0) {
      cv::line(img, to_px(xs[i - 1], means[i - 1], area, x0, x1, ylo, yhi), p, blue, 2,
               cv::LINE_AA);
      dashed_line(img, to_px(xs[i - 1], vars[i - 1], area, x0, x1, 0.0, vmax), q, red);
    }
    cv::circle(img, p, 4, blue, cv::FILLED, cv::LINE_AA);
    cv::circle(img, q, 3, red, cv::FILLED, cv::LINE_AA);
  }

  cv::putText(img, title, {area.x, 32}, cv::FONT_HERSHEY_SIMPLEX, 0.6, black, 1, cv::LINE_AA);
  cv::putText(img, "NFE (log scale)", {area.x + area.width / 2 - 60, 460},
              cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1, cv::LINE_AA);
  cv::putText(img, "mean DSC", {8, 32}, cv::FONT_HERSHEY_SIMPLEX, 0.45, blue, 1, cv::LINE_AA);
  cv::putText(img, "var x1e-3", {644, 32}, cv::FONT_HERSHEY_SIMPLEX, 0.45, red, 1, cv::LINE_AA);
  cv::putText(img, "ancestral " + fmt(reference_mean), {area.x + 8, area.y + 18},
              cv::FONT_HERSHEY_SIMPLEX, 0.45, cv::Scalar(0, 150, 200), 1, cv::LINE_AA);

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw IoError("cannot write " + path.string());
}

SweepFiles write_sweep_outputs(const SweepResult& result, const fs::path& dir) {
  SweepFiles files{dir / "sweep.csv", dir / "sweep_summary.csv", dir / "sweep_summary.json", {}};
  {
    auto out = open_out(files.csv);
    out << "kind,nfe,effective_nfe,repeat,mean_dsc\n";
    auto rows = result.rows;
    rows.insert(rows.begin(), result.reference);
    for (const auto& m : rows) {
      for (std::size_t r = 0; r < m.repeat_mean_dsc.size(); ++r) {
        out << to_string(m.kind) << ',' << m.nfe << ',' << m.effective_nfe << ',' << r << ','
            << m.repeat_mean_dsc[r] << '\n';
      }
    }
  }
  {
    auto out = open_out(files.summary_csv);
    out << "kind,nfe,effective_nfe,repeats,mean_dsc,var_dsc\n";
    for (const auto& m : result.rows) {
      out << to_string(m.kind) << ',' << m.nfe << ',' << m.effective_nfe << ',' << m.repeats
          << ',' << m.mean_dsc << ',' << m.var_dsc << '\n';
    }
  }
  {
    nlohmann::json j;
    j["reference"] = to_json(result.reference);
    j["rows"] = nlohmann::json::array();
    for (const auto& m : result.rows) {
      auto row = to_json(m);
      row.erase("per_image_dsc");
      j["rows"].push_back(row);
    }
    j["warnings"] = result.warnings;
    open_out(files.summary_json) << j.dump(2) << '\n';
  }
  std::vector<SamplerKind> kinds;
  for (const auto& m : result.rows) {
    if (std::find(kinds.begin(), kinds.end(), m.kind) == kinds.end()) kinds.push_back(m.kind);
  }
  for (auto k : kinds) {
    std::vector<RunMetrics> rows;
    std::copy_if(result.rows.begin(), result.rows.end(), std::back_inserter(rows),
                 [&](const RunMetrics& m) { return m.kind == k; });
    const auto path = dir / ("sweep_" + to_string(k) + ".png");
    plot_sweep(rows, result.reference.mean_dsc, to_string(k) + ": DSC vs NFE", path);
    files.plots.push_back(path);
  }
  return files;
}

void write_eval_csv(const RunMetrics& m, const std::vector<Sample>& split, const fs::path& path) {
  auto out = open_out(path);
  out << "image,source_id,repeat,seed,dsc\n";
  for (std::size_t r = 0; r < m.per_image_dsc.size(); ++r) {
    for (std::size_t i = 0; i < m.per_image_dsc[r].size(); ++i) {
      out << i << ',' << (i < split.size() ? split[i].source_id : "") << ',' << r << ','
          << derive_seed(m.seeds[r], i) << ',' << m.per_image_dsc[r][i] << '\n';
    }
  }
}

}  // namespace pgdiffseg
