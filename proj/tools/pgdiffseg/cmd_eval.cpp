#include <iomanip>
#include <iostream>
#include <memory>

#include "commands.hpp"
#include "common.hpp"
#include "pgdiffseg/evaluation.hpp"
#include "pgdiffseg/logging.hpp"

namespace pgdiffseg::cli {

namespace {

struct EvalCliOptions {
  CommonOptions common;
  DataOptions data;
  SamplerOptions sampler;
  std::string checkpoint;
  std::optional<int> repeats, batch_size;
};

struct SweepCliOptions {
  CommonOptions common;
  DataOptions data;
  std::string checkpoint;
  std::vector<int> nfes;
  std::vector<std::string> kinds;
  std::optional<int> repeats, batch_size;
  std::optional<double> eta;
};

int run_eval(const EvalCliOptions& o) {
  apply_log_level(o.common.log_level);
  auto inf = open_inference(o.checkpoint, o.common, o.data, o.sampler);
  auto opts = inf.cfg.eval.options;
  if (o.repeats) opts.repeats = *o.repeats;
  if (o.batch_size) opts.batch_size = *o.batch_size;
  opts.seed = inf.cfg.sampler.seed;
  const auto dir = run_dir(o.common, "eval", inf.cfg);

  const auto m = evaluate(model_denoiser(inf.loaded.model), inf.items, inf.loaded.schedule,
                          inf.cfg.sampler, opts);
  write_eval_csv(m, inf.items, dir / "eval.csv");
  auto summary = to_json(m);
  summary["checkpoint"] = o.checkpoint;
  summary["split"] = o.data.split;
  summary["images"] = inf.items.size();
  write_text(dir / "eval_summary.json", summary.dump(2) + "\n");

  std::cout << std::fixed << std::setprecision(4);
  std::cout << "sampler " << to_string(m.kind) << " nfe " << m.effective_nfe << ", "
            << inf.items.size() << " images x " << m.repeats << " repeats\n";
  for (std::size_t r = 0; r < m.repeat_mean_dsc.size(); ++r) {
    std::cout << "  repeat " << r << ": mean DSC " << m.repeat_mean_dsc[r] << "\n";
  }
  std::cout << "mean DSC " << m.mean_dsc << "  variance " << std::setprecision(6) << m.var_dsc
            << "\n";
  std::cout << "wrote " << (dir / "eval.csv").string() << "\n";
  return 0;
}

int run_sweep(const SweepCliOptions& o) {
  apply_log_level(o.common.log_level);
  auto inf = open_inference(o.checkpoint, o.common, o.data, {});
  auto sc = inf.cfg.eval.sweep;
  if (!o.nfes.empty()) sc.nfes = o.nfes;
  if (!o.kinds.empty()) {
    sc.kinds.clear();
    for (const auto& k : o.kinds) sc.kinds.push_back(sampler_kind_from_string(k));
  }
  if (o.repeats) sc.repeats = *o.repeats;
  if (o.batch_size) sc.batch_size = *o.batch_size;
  if (o.eta) sc.eta = *o.eta;
  sc.seed = inf.cfg.sampler.seed;
  const auto dir = run_dir(o.common, "sweep", inf.cfg);

  const auto result = nfe_sweep(model_denoiser(inf.loaded.model), inf.items, inf.loaded.schedule,
                                sc);
  const auto files = write_sweep_outputs(result, dir);
  for (const auto& w : result.warnings) std::cerr << "warning: " << w << "\n";

  std::cout << std::fixed << std::setprecision(4);
  std::cout << "reference ancestral (nfe " << result.reference.effective_nfe << "): mean DSC "
            << result.reference.mean_dsc << "\n";
  std::cout << std::left << std::setw(10) << "kind" << std::setw(6) << "nfe" << std::setw(10)
            << "eff_nfe" << std::setw(10) << "mean" << "var\n";
  for (const auto& m : result.rows) {
    std::cout << std::setw(10) << to_string(m.kind) << std::setw(6) << m.nfe << std::setw(10)
              << m.effective_nfe << std::setw(10) << m.mean_dsc << std::setprecision(6)
              << m.var_dsc << std::setprecision(4) << "\n";
  }
  std::cout << "wrote " << files.csv.string() << ", " << files.summary_json.string();
  for (const auto& p : files.plots) std::cout << ", " << p.string();
  std::cout << "\n";
  return 0;
}

}  // namespace

void register_eval(CLI::App& app, Command& run) {
  auto opts = std::make_shared<EvalCliOptions>();
  auto* cmd = app.add_subcommand("eval", "Repeated-run DSC evaluation of a checkpoint");
  add_common(*cmd, opts->common);
  add_data(*cmd, opts->data, true);
  add_sampler(*cmd, opts->sampler);
  cmd->add_option("--checkpoint", opts->checkpoint, "Trained checkpoint")->required();
  cmd->add_option("--repeats", opts->repeats, "Sampling repeats (default 5)");
  cmd->add_option("--batch-size", opts->batch_size, "Images sampled together");
  cmd->callback([opts, &run] { run = [opts] { return run_eval(*opts); }; });
}

void register_sweep(CLI::App& app, Command& run) {
  auto opts = std::make_shared<SweepCliOptions>();
  auto* cmd = app.add_subcommand("sweep", "DSC mean/variance versus NFE for fast samplers");
  add_common(*cmd, opts->common);
  add_data(*cmd, opts->data, true);
  cmd->add_option("--checkpoint", opts->checkpoint, "Trained checkpoint")->required();
  cmd->add_option("--nfe", opts->nfes, "NFE values (default 10 25 50 100 200)")->delimiter(',');
  cmd->add_option("--kinds", opts->kinds, "Samplers to sweep (default ddim dpm2)")
      ->delimiter(',')
      ->check(CLI::IsMember({"ddim", "dpm2"}));
  cmd->add_option("--repeats", opts->repeats, "Repeats per point (default 5)");
  cmd->add_option("--batch-size", opts->batch_size, "Images sampled together");
  cmd->add_option("--eta", opts->eta, "DDIM stochasticity");
  cmd->callback([opts, &run] { run = [opts] { return run_sweep(*opts); }; });
}

}  // namespace pgdiffseg::cli
