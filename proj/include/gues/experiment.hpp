#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gues/classifier.hpp"
#include "gues/metrics.hpp"
#include "gues/retina_toy.hpp"
#include "gues/stream.hpp"
#include "gues/tta.hpp"
#include "gues/vae.hpp"

namespace gues {

/// Invalid configuration or command-line usage.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A required input file (manifest, checkpoint) does not exist.
class MissingArtifact : public Error {
 public:
  using Error::Error;
};

enum class AdaptMode { kSourceOnly, kGues, kTent, kShotIm, kGuesTent, kGuesShotIm };

std::string to_string(AdaptMode mode);
/// "source_only", "gues", "tent", "shot_im", "gues+tent", "gues+shot_im".
AdaptMode parse_mode(const std::string& name);
bool uses_gues(AdaptMode mode);
std::optional<TtaMethod> tta_method(AdaptMode mode);

/// Every knob of the experiment pipeline. Serialized as one flat JSON object;
/// absent keys keep their defaults, unknown keys are rejected.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs";

  // dataset
  Index n_source = 2000;
  Index n_target = 1000;
  Index n_source_test = 500;
  Index image_size = kRetinaSize;
  std::array<double, 5> grade_distribution = kDefaultGradeDistribution;
  ShiftParams shift = ShiftParams::default_target();

  // source classifier
  int epochs = 20;
  double smoothing = 0.1;
  double source_lr = 0.05;
  double source_momentum = 0.9;
  Index source_batch_size = 16;
  double class_balance_power = 0.5;

  // generator
  double alpha = 1.0;
  double beta = 1.0;
  double gues_lr = 1.0;
  double gues_momentum = 0.9;
  Index batch_size = 64;
  int steps_per_batch = 1;
  std::string emission = "forward";  // forward | post_update
  double saliency_normalizer = 3.0;

  // test-time adaptation
  std::string mode = "gues";
  double tta_lr = 1e-3;
  double tta_momentum = 0.9;

  // sweeps
  int seeds = 5;
  std::vector<Index> sweep_batch_sizes{2, 4, 8, 16, 32, 64};
  std::vector<std::string> sweep_modes{"tent", "gues", "gues+tent"};
  std::vector<double> sweep_alpha{0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4, 1.5};
  std::vector<double> sweep_beta{5e-5, 6e-5, 7e-5, 8e-5, 9e-5, 1e-4, 1.1e-4, 1.2e-4, 1.3e-4, 1.4e-4};

  void validate() const;

  /// Throws ConfigError naming the offending key.
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);
  std::string to_json() const;

  std::filesystem::path data_dir() const { return std::filesystem::path(out_dir) / "data"; }
  std::filesystem::path manifest_path() const { return data_dir() / "manifest.csv"; }
  std::filesystem::path source_dir() const { return std::filesystem::path(out_dir) / "source"; }
  std::filesystem::path classifier_path() const { return source_dir() / "classifier.clsf"; }

  GuesConfig gues_config(Index batch, std::uint64_t run_seed) const;
};

/// Fixed six-decimal rendering; NaN prints as "undefined".
std::string format_metric(double value);
double median(std::vector<double> values);

/// Online metrics after one batch, accumulated over every prediction so far.
struct MetricsRow {
  Index step = 0;
  Index batch_index = 0;
  double acc = 0.0;
  double qwk = 0.0;  // NaN when undefined
  double avg = 0.0;  // NaN when qwk is undefined
};

struct Scores {
  double acc = 0.0;
  double qwk = 0.0;
  double avg = 0.0;
};

/// acc / qwk / avg of a confusion matrix; qwk and avg are NaN when
/// undefined.
Scores score(const ConfusionMatrix& cm);

struct AdaptOptions {
  AdaptMode mode = AdaptMode::kSourceOnly;
  GuesConfig gues;
  GuesModelOptions gues_model;
  std::uint64_t gues_init_seed = 0;
  double tta_lr = 1e-3;
  double tta_momentum = 0.9;
};

struct AdaptResult {
  std::vector<MetricsRow> rows;
  std::vector<BatchLoss> losses;  // empty unless the mode runs the generator
  ConfusionMatrix aggregate{kNumGrades};
  Tensor first_batch_logits;
  std::optional<GuesModel> generator;
  double mean_abs_delta = 0.0;  // over every emitted pixel
};

/// Streams `stream` once. Labels of `target` are used only to score the
/// predictions made for each batch.
AdaptResult run_adapt(const SourceClassifier& source, const Dataset& target, BatchSource& stream,
                      const AdaptOptions& options);

AdaptOptions adapt_options(const ExperimentConfig& config, AdaptMode mode, Index batch_size,
                           std::uint64_t run_seed);
/// Stream order for a run seed.
std::uint64_t stream_seed(std::uint64_t run_seed);

/// Convenience: shuffled stream of the whole target set.
AdaptResult run_adapt(const SourceClassifier& source, const Dataset& target,
                      const std::shared_ptr<const std::vector<Image>>& images, const ExperimentConfig& config,
                      AdaptMode mode, Index batch_size, std::uint64_t run_seed);

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
void write_loss_csv(const std::filesystem::path& path, const std::vector<BatchLoss>& losses);

// Subcommands. Each writes under config.out_dir and returns what it wrote.

struct GenDataResult {
  std::filesystem::path manifest;
  Index source_count = 0;
  Index target_count = 0;
};
GenDataResult generate_data(const ExperimentConfig& config);

/// Held-out in-domain set regenerated from the config (never written).
Dataset source_test_set(const ExperimentConfig& config);

struct SourceRunResult {
  std::filesystem::path checkpoint;
  std::vector<double> epoch_losses;
  Scores in_domain;
  Scores target;
};
SourceRunResult train_source_run(const ExperimentConfig& config);

/// Loads the checkpoint written by train_source_run.
SourceClassifier load_source_classifier(const ExperimentConfig& config);
Dataset load_target(const ExperimentConfig& config);

struct AdaptRunResult {
  std::filesystem::path dir;
  Scores aggregate;
  AdaptResult result;
};
AdaptRunResult adapt_run(const ExperimentConfig& config, AdaptMode mode);

struct SweepPoint {
  std::string mode;
  Index batch_size = 0;
  double alpha = 0.0;
  double beta = 0.0;
  std::uint64_t seed = 0;
  Scores scores;
};

struct SweepResult {
  std::vector<SweepPoint> points;
  std::filesystem::path csv;
  std::filesystem::path svg;
};

/// axis "batch": sweep_modes x sweep_batch_sizes x seeds.
/// axis "alpha_beta": sweep_alpha x sweep_beta x seeds in mode gues.
SweepResult sweep_run(const ExperimentConfig& config, const std::string& axis);

/// Median over seeds of each seed's ACC spread (max - min over batch sizes).
double batch_spread(const std::vector<SweepPoint>& points, const std::string& mode);

/// Writes the saliency of a P6 image as P5.
void saliency_run(const std::filesystem::path& input, const std::filesystem::path& output,
                  const SaliencyOptions& options = {});

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Property checks: saliency oracle and analytic cases, gradient checks,
/// analytic KL and QWK values, determinism and identity initialization.
std::vector<CheckResult> run_verification(const ExperimentConfig& config);

/// Upper bound on concurrent workers: GUES_THREADS when set, else the
/// hardware concurrency.
unsigned worker_count();

/// Runs job(0) ... job(count - 1) on up to worker_count() threads. The
/// first exception (lowest index) is rethrown after all jobs finish.
void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job);

}  // namespace gues
