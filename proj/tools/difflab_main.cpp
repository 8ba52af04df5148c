// difflab: numerical laboratory for score-variance-driven generalization in
// diffusion samplers. Subcommands reproduce the heatmap, cutoff-sweep and
// feature-orientation experiments, draw samples, evaluate V-kernels and run
// the invariant suite. Every command is a thin shell over the library calls
// in include/difflab.

#include <CLI11.hpp>

#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "difflab/experiment.hpp"
#include "difflab/figures.hpp"
#include "difflab/validate.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitValidation = 4;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  int threads = difflab::default_threads();
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* opt = cmd->add_option("--config", args.config_path, "experiment config (TOML)");
  if (config_required) opt->required();
  cmd->add_option("--seed", [&args](const CLI::results_t& res) {
    args.seed = std::stoull(res.front());
    return true;
  }, "master seed override (u64)");
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--threads", args.threads, "worker cap (default: available parallelism)");
}

int run_validate(const CommonArgs& args) {
  difflab::ValidateHooks hooks;
  hooks.threads = args.threads;
  const std::vector<difflab::CheckResult> results = difflab::run_validation(hooks);
  std::filesystem::create_directories(args.out_dir);
  std::ofstream report(std::filesystem::path(args.out_dir) / "validate_report.json",
                       std::ios::binary);
  report << "[\n";
  bool all_pass = true;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const difflab::CheckResult& r = results[i];
    all_pass = all_pass && r.pass;
    std::cout << (r.pass ? "PASS " : "FAIL ") << r.id << ": " << r.detail << "\n";
    report << "  {\"id\": \"" << r.id << "\", \"pass\": " << (r.pass ? "true" : "false")
           << ", \"detail\": \"" << r.detail << "\"}" << (i + 1 < results.size() ? ",\n" : "\n");
  }
  report << "]\n";
  std::cout << (all_pass ? "validate: all " : "validate: FAILURES among ")
            << results.size() << " checks" << (all_pass ? " passed" : "") << "\n";
  return all_pass ? kExitOk : kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"score-variance diffusion laboratory"};
  app.require_subcommand(1);

  CommonArgs fig1_args, fig2_args, fig3_args, sample_args, vkernel_args, validate_args;
  bool dump_trajectories = false;

  CLI::App* fig1 = app.add_subcommand("fig1", "proxy-variance heatmaps over a 2-D grid");
  add_common(fig1, fig1_args, true);
  CLI::App* fig2 = app.add_subcommand("fig2", "cutoff x overparameterization sweep (1-D)");
  add_common(fig2, fig2_args, true);
  CLI::App* fig3 = app.add_subcommand("fig3", "feature/orientation conditions (2-D)");
  add_common(fig3, fig3_args, true);
  CLI::App* sample = app.add_subcommand("sample", "draw reverse-process samples");
  add_common(sample, sample_args, true);
  sample->add_flag("--trajectories", dump_trajectories, "dump full trajectories");
  CLI::App* vkernel = app.add_subcommand("vkernel", "evaluate a V-kernel on probe pairs");
  add_common(vkernel, vkernel_args, true);
  CLI::App* validate = app.add_subcommand("validate", "run the invariant suite");
  add_common(validate, validate_args, false);

  CLI11_PARSE(app, argc, argv);

  try {
    if (fig1->parsed()) {
      const auto cfg = difflab::ExperimentConfig::load(fig1_args.config_path);
      const auto result = difflab::run_fig1(cfg.fig1(), fig1_args.threads);
      difflab::write_fig1(result, fig1_args.out_dir);
    } else if (fig2->parsed()) {
      const auto cfg = difflab::ExperimentConfig::load(fig2_args.config_path);
      const auto result = difflab::run_fig2(cfg.fig2(fig2_args.seed), fig2_args.threads);
      difflab::write_fig2(result, fig2_args.out_dir);
    } else if (fig3->parsed()) {
      const auto cfg = difflab::ExperimentConfig::load(fig3_args.config_path);
      const auto result = difflab::run_fig3(cfg.fig3(fig3_args.seed), fig3_args.threads);
      difflab::write_fig3(result, fig3_args.out_dir);
    } else if (sample->parsed()) {
      const auto cfg = difflab::ExperimentConfig::load(sample_args.config_path);
      const auto spec = cfg.ensemble(sample_args.seed);
      const auto result = difflab::run_sample(spec, dump_trajectories, sample_args.threads);
      difflab::write_sample_outputs(result, sample_args.out_dir, dump_trajectories);
    } else if (vkernel->parsed()) {
      const auto cfg = difflab::ExperimentConfig::load(vkernel_args.config_path);
      difflab::run_vkernel_command(cfg, vkernel_args.out_dir, vkernel_args.seed);
    } else if (validate->parsed()) {
      return run_validate(validate_args);
    }
  } catch (const difflab::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const difflab::numeric_error& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitOk;
}
