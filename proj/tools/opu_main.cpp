// opu: one-pass uncertainty pipeline driver.
//
//   opu <command> --config <path> [--force] [--out <dir>]
//
// Commands: train-teacher, sample-posterior, pushforward, distill, eval,
// plot-simplex, report. The run-directory root comes from OPU_RUN_ROOT
// (default "runs") unless --out overrides it.
#include <cstdio>
#include <exception>
#include <string>

#include <CLI11.hpp>

#include "opu/config.hpp"
#include "opu/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"one-pass uncertainty distillation pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  bool force = false;

  const char* names[] = {"train-teacher", "sample-posterior", "pushforward",
                         "distill",       "eval",             "plot-simplex",
                         "report"};
  for (const char* name : names) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_flag("--force", force, "override config-hash consistency checks");
    sub->add_option("--out", out_dir, "run-directory root (default $OPU_RUN_ROOT or ./runs)");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const opu::RunConfig cfg = opu::load_config(config_path);
    const std::string root = out_dir.empty() ? opu::run_root_from_env() : out_dir;
    const opu::RunPaths paths = opu::make_run_paths(root, cfg);

    if (command == "train-teacher")
      opu::cmd_train_teacher(cfg, paths);
    else if (command == "sample-posterior")
      opu::cmd_sample_posterior(cfg, paths);
    else if (command == "pushforward")
      opu::cmd_pushforward(cfg, paths);
    else if (command == "distill")
      opu::cmd_distill(cfg, paths);
    else if (command == "eval")
      opu::cmd_eval(cfg, paths);
    else if (command == "plot-simplex")
      opu::cmd_plot_simplex(cfg, paths);
    else if (command == "report")
      opu::cmd_report(cfg, paths, force);
    std::fprintf(stdout, "%s: ok (run dir %s)\n", command.c_str(),
                 paths.dir.string().c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "%s: %s\n", command.c_str(), e.what());
    return 2;
  }
  return 0;
}
