#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "ncprobe/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"ncprobe: train small networks and measure neural collapse layer by layer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ncprobe::kToolVersion);

  ncprobe::ConfigSources src;
  std::string out_dir;
  std::size_t jobs = 1;
  std::uint64_t seed = 0;
  std::string plot_input;

  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train one network per seed and report collapse metrics"},
      {"report", "collapse report for a saved checkpoint"},
      {"depth-sweep", "train and report across depths x seeds"},
      {"noise-sweep", "train and report across label-noise fractions x seeds"},
      {"bound", "estimate the comparative generalization bound"},
      {"probe", "linear probes on frozen per-layer features"},
      {"plot", "render SVG charts from earlier run directories"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", src.config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", src.overrides, "override a config value, key=value (repeatable)");
    sub->add_option("--out", out_dir, "output directory (NC_PROBE_OUT overrides)");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--jobs", jobs, "worker threads for independent runs")->check(CLI::PositiveNumber);
    if (name == "plot") sub->add_option("--input", plot_input, "directory searched for CSV files")->required();
    subs.push_back(sub);
  }
  CLI11_PARSE(app, argc, argv);

  for (auto* sub : subs)
    if (sub->parsed()) {
      src.kind = sub->get_name();
      if (sub->count("--seed")) src.seed = seed;
    }
  if (const char* env = std::getenv("NC_PROBE_OUT"); env && *env) out_dir = env;
  if (out_dir.empty()) out_dir = src.kind == "plot" ? plot_input + "/plots" : "ncprobe_out";

  try {
    const auto cfg = ncprobe::resolve_config(src);
    ncprobe::CommandContext ctx;
    ctx.out_dir = out_dir;
    ctx.jobs = jobs;
    ctx.plot_input = plot_input;
    return ncprobe::run_command(cfg, ctx);
  } catch (const ncprobe::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return ncprobe::kExitUsage;
  } catch (const ncprobe::ConstructionError& e) {
    std::cerr << "config error: arch: " << e.what() << '\n';
    return ncprobe::kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return ncprobe::kExitRunFailed;
  }
}
