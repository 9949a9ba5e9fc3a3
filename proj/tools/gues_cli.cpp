#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "gues/experiment.hpp"
#include "gues/image.hpp"

namespace fs = std::filesystem;
using namespace gues;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 2;
constexpr int kMissing = 3;
constexpr int kVerifyFailed = 4;

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> epochs;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "Flat JSON config file");
  cmd->add_option("--seed", flags.seed, "Override the config seed");
  cmd->add_option("--out", flags.out, "Override the output directory");
  cmd->add_option("--epochs", flags.epochs, "Override the source training epochs");
}

ExperimentConfig resolve(const CommonFlags& flags) {
  ExperimentConfig config;
  if (!flags.config_path.empty()) config = ExperimentConfig::load(flags.config_path);
  if (flags.seed) config.seed = *flags.seed;
  if (!flags.out.empty()) config.out_dir = flags.out;
  if (flags.epochs) config.epochs = *flags.epochs;
  config.validate();
  return config;
}

void save_config(const ExperimentConfig& config) {
  fs::create_directories(config.out_dir);
  std::ofstream(fs::path(config.out_dir) / "config.json") << config.to_json();
}

void print_scores(const std::string& label, const Scores& s) {
  std::cout << label << ": acc=" << format_metric(s.acc) << " qwk=" << format_metric(s.qwk)
            << " avg=" << format_metric(s.avg) << '\n';
}

int cmd_gen_data(const CommonFlags& flags) {
  const ExperimentConfig config = resolve(flags);
  save_config(config);
  const GenDataResult r = generate_data(config);
  std::cout << "wrote " << r.source_count << " source and " << r.target_count << " target images\n"
            << "manifest: " << r.manifest.string() << '\n';
  return kOk;
}

int cmd_train_source(const CommonFlags& flags) {
  const ExperimentConfig config = resolve(flags);
  save_config(config);
  const SourceRunResult r = train_source_run(config);
  std::cout << "checkpoint: " << r.checkpoint.string() << '\n';
  if (!r.epoch_losses.empty()) std::cout << "final epoch loss: " << format_metric(r.epoch_losses.back()) << '\n';
  print_scores("in-domain", r.in_domain);
  print_scores("target", r.target);
  return kOk;
}

int cmd_adapt(const CommonFlags& flags, const std::string& mode_name) {
  ExperimentConfig config = resolve(flags);
  if (!mode_name.empty()) config.mode = mode_name;
  const AdaptMode mode = parse_mode(config.mode);
  save_config(config);
  const AdaptRunResult r = adapt_run(config, mode);
  std::cout << "mode " << to_string(mode) << ", " << r.result.rows.size() << " batches of " << config.batch_size
            << '\n';
  print_scores("aggregate", r.aggregate);
  if (uses_gues(mode)) std::cout << "mean |delta|: " << r.result.mean_abs_delta << '\n';
  std::cout << "metrics: " << (r.dir / "metrics.csv").string() << '\n';
  return kOk;
}

int cmd_sweep(const CommonFlags& flags, const std::string& axis) {
  const ExperimentConfig config = resolve(flags);
  if (axis != "batch" && axis != "alpha_beta") {
    throw ConfigError("unknown sweep axis '" + axis + "' (expected batch or alpha_beta)");
  }
  save_config(config);
  const SweepResult r = sweep_run(config, axis);
  std::cout << r.points.size() << " runs\n";
  if (axis == "batch") {
    for (const auto& mode : config.sweep_modes) {
      std::cout << "acc spread " << mode << ": " << format_metric(batch_spread(r.points, mode)) << '\n';
    }
  }
  std::cout << "csv: " << r.csv.string() << "\nsvg: " << r.svg.string() << '\n';
  return kOk;
}

int cmd_saliency(const CommonFlags& flags, const std::string& input, const std::string& output) {
  const ExperimentConfig config = resolve(flags);
  SaliencyOptions opts;
  opts.normalizer = config.saliency_normalizer;
  saliency_run(input, output, opts);
  std::cout << "wrote " << output << '\n';
  return kOk;
}

int cmd_verify(const CommonFlags& flags) {
  const ExperimentConfig config = resolve(flags);
  const auto checks = run_verification(config);
  bool all = true;
  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    all = all && c.passed;
  }
  std::cout << (all ? "all checks passed" : "verification failed") << '\n';
  return all ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Generative unadversarial examples for online domain adaptation"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string mode, axis = "batch", input, output;

  auto* gen = app.add_subcommand("gen-data", "Render the source and shifted target datasets");
  auto* train = app.add_subcommand("train-source", "Train the source classifier");
  auto* adapt = app.add_subcommand("adapt", "Stream the target set once through one adaptation mode");
  adapt->add_option("--mode", mode, "source_only | gues | tent | shot_im | gues+tent | gues+shot_im");
  auto* sweep = app.add_subcommand("sweep", "Grid sweep over batch size or alpha x beta");
  sweep->add_option("--axis", axis, "batch | alpha_beta");
  auto* sal = app.add_subcommand("saliency", "Write the saliency map of a PPM image as PGM");
  sal->add_option("input", input, "Input P6 image")->required();
  sal->add_option("output", output, "Output P5 image")->required();
  auto* verify = app.add_subcommand("verify", "Run the property checks");
  for (auto* cmd : {gen, train, adapt, sweep, sal, verify}) add_common(cmd, flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gen) return cmd_gen_data(flags);
    if (*train) return cmd_train_source(flags);
    if (*adapt) return cmd_adapt(flags, mode);
    if (*sweep) return cmd_sweep(flags, axis);
    if (*sal) return cmd_saliency(flags, input, output);
    if (*verify) return cmd_verify(flags);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsage;
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.what() << '\n';
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kUsage;
}
