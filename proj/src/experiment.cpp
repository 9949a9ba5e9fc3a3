#include "gues/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "gues/checkpoint.hpp"
#include "gues/saliency.hpp"
#include "gues/svg.hpp"

namespace gues {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr Index kEvalChunk = 64;

// Seed streams derived from the experiment seed.
enum SeedSlot : std::uint64_t {
  kSourceSamples = 1,
  kTargetSamples = 2,
  kShiftNoise = 3,
  kSourceTest = 4,
  kClassifierInit = 5,
  kClassifierShuffle = 6,
  kStreamOrder = 10,
  kGeneratorInit = 11,
  kGeneratorNoise = 12,
};

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(path.string() + ": cannot open for writing");
  return out;
}

void write_text(const fs::path& path, const std::string& text) { open_out(path) << text; }

std::string fixed6(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(6) << v;
  return os.str();
}

std::vector<int> predict_all(const SourceClassifier& model, const std::vector<Image>& images) {
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kEvalChunk) {
    const std::size_t end = std::min(images.size(), start + static_cast<std::size_t>(kEvalChunk));
    const std::span<const Image> chunk(images.data() + start, end - start);
    const auto p = argmax_rows(predict(model, to_batch(chunk)));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

Scores evaluate(const SourceClassifier& model, const Dataset& data) {
  return score(confusion(data.grades, predict_all(model, data.images), kNumGrades));
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw MissingArtifact(what + " not found: " + path.string());
}

// JSON helpers ---------------------------------------------------------------

[[noreturn]] void bad_key(const std::string& key, const std::string& expected) {
  throw ConfigError("config key '" + key + "': expected " + expected);
}

double as_number(const std::string& key, const json& v) {
  if (!v.is_number()) bad_key(key, "a number");
  return v.get<double>();
}

std::int64_t as_integer(const std::string& key, const json& v) {
  if (!v.is_number_integer()) bad_key(key, "an integer");
  return v.get<std::int64_t>();
}

std::string as_string(const std::string& key, const json& v) {
  if (!v.is_string()) bad_key(key, "a string");
  return v.get<std::string>();
}

std::vector<double> as_numbers(const std::string& key, const json& v) {
  if (!v.is_array()) bad_key(key, "an array of numbers");
  std::vector<double> out;
  for (const auto& e : v) out.push_back(as_number(key, e));
  return out;
}

template <std::size_t N>
std::array<double, N> as_fixed(const std::string& key, const json& v) {
  const auto values = as_numbers(key, v);
  if (values.size() != N) bad_key(key, "an array of " + std::to_string(N) + " numbers");
  std::array<double, N> out{};
  std::copy(values.begin(), values.end(), out.begin());
  return out;
}

using Setter = std::function<void(ExperimentConfig&, const std::string&, const json&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto num = [&t](const char* key, double ExperimentConfig::*field) {
      t[key] = [field](ExperimentConfig& c, const std::string& k, const json& v) { c.*field = as_number(k, v); };
    };
    auto idx = [&t](const char* key, Index ExperimentConfig::*field) {
      t[key] = [field](ExperimentConfig& c, const std::string& k, const json& v) { c.*field = as_integer(k, v); };
    };
    auto i32 = [&t](const char* key, int ExperimentConfig::*field) {
      t[key] = [field](ExperimentConfig& c, const std::string& k, const json& v) {
        c.*field = static_cast<int>(as_integer(k, v));
      };
    };
    auto str = [&t](const char* key, std::string ExperimentConfig::*field) {
      t[key] = [field](ExperimentConfig& c, const std::string& k, const json& v) { c.*field = as_string(k, v); };
    };
    t["seed"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        bad_key(k, "a non-negative integer");
      }
      c.seed = v.get<std::uint64_t>();
    };
    str("out_dir", &ExperimentConfig::out_dir);
    idx("n_source", &ExperimentConfig::n_source);
    idx("n_target", &ExperimentConfig::n_target);
    idx("n_source_test", &ExperimentConfig::n_source_test);
    idx("image_size", &ExperimentConfig::image_size);
    t["grade_distribution"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      c.grade_distribution = as_fixed<5>(k, v);
    };
    t["shift_brightness"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      c.shift.brightness_delta = as_number(k, v);
    };
    t["shift_tint"] = [](ExperimentConfig& c, const std::string& k, const json& v) { c.shift.tint = as_fixed<3>(k, v); };
    t["shift_noise_sigma"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      c.shift.noise_sigma = as_number(k, v);
    };
    t["shift_gamma"] = [](ExperimentConfig& c, const std::string& k, const json& v) { c.shift.gamma = as_number(k, v); };
    t["shift_blur_radius"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      c.shift.blur_radius = static_cast<int>(as_integer(k, v));
    };
    i32("epochs", &ExperimentConfig::epochs);
    num("smoothing", &ExperimentConfig::smoothing);
    num("source_lr", &ExperimentConfig::source_lr);
    num("source_momentum", &ExperimentConfig::source_momentum);
    idx("source_batch_size", &ExperimentConfig::source_batch_size);
    num("class_balance_power", &ExperimentConfig::class_balance_power);
    num("alpha", &ExperimentConfig::alpha);
    num("beta", &ExperimentConfig::beta);
    num("gues_lr", &ExperimentConfig::gues_lr);
    num("gues_momentum", &ExperimentConfig::gues_momentum);
    idx("batch_size", &ExperimentConfig::batch_size);
    i32("steps_per_batch", &ExperimentConfig::steps_per_batch);
    str("emission", &ExperimentConfig::emission);
    num("saliency_normalizer", &ExperimentConfig::saliency_normalizer);
    str("mode", &ExperimentConfig::mode);
    num("tta_lr", &ExperimentConfig::tta_lr);
    num("tta_momentum", &ExperimentConfig::tta_momentum);
    i32("seeds", &ExperimentConfig::seeds);
    t["sweep_batch_sizes"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      if (!v.is_array()) bad_key(k, "an array of integers");
      c.sweep_batch_sizes.clear();
      for (const auto& e : v) c.sweep_batch_sizes.push_back(as_integer(k, e));
    };
    t["sweep_modes"] = [](ExperimentConfig& c, const std::string& k, const json& v) {
      if (!v.is_array()) bad_key(k, "an array of strings");
      c.sweep_modes.clear();
      for (const auto& e : v) c.sweep_modes.push_back(as_string(k, e));
    };
    t["sweep_alpha"] = [](ExperimentConfig& c, const std::string& k, const json& v) { c.sweep_alpha = as_numbers(k, v); };
    t["sweep_beta"] = [](ExperimentConfig& c, const std::string& k, const json& v) { c.sweep_beta = as_numbers(k, v); };
    return t;
  }();
  return table;
}

void check(bool ok, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError("config key '" + key + "': " + message);
}

}  // namespace

// Modes ------------------------------------------------------------------------

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::kSourceOnly: return "source_only";
    case AdaptMode::kGues: return "gues";
    case AdaptMode::kTent: return "tent";
    case AdaptMode::kShotIm: return "shot_im";
    case AdaptMode::kGuesTent: return "gues+tent";
    case AdaptMode::kGuesShotIm: return "gues+shot_im";
  }
  return "unknown";
}

AdaptMode parse_mode(const std::string& name) {
  for (AdaptMode m : {AdaptMode::kSourceOnly, AdaptMode::kGues, AdaptMode::kTent, AdaptMode::kShotIm,
                      AdaptMode::kGuesTent, AdaptMode::kGuesShotIm}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name +
                    "' (expected source_only, gues, tent, shot_im, gues+tent or gues+shot_im)");
}

bool uses_gues(AdaptMode mode) {
  return mode == AdaptMode::kGues || mode == AdaptMode::kGuesTent || mode == AdaptMode::kGuesShotIm;
}

std::optional<TtaMethod> tta_method(AdaptMode mode) {
  if (mode == AdaptMode::kTent || mode == AdaptMode::kGuesTent) return TtaMethod::kTent;
  if (mode == AdaptMode::kShotIm || mode == AdaptMode::kGuesShotIm) return TtaMethod::kShotIm;
  return std::nullopt;
}

// Config -------------------------------------------------------------------------

void ExperimentConfig::validate() const {
  check(n_source >= 1, "n_source", "must be at least 1");
  check(n_target >= 1, "n_target", "must be at least 1");
  check(n_source_test >= 1, "n_source_test", "must be at least 1");
  check(image_size >= 16 && image_size % 16 == 0, "image_size", "must be a positive multiple of 16");
  double total = 0.0;
  for (double p : grade_distribution) {
    check(p >= 0.0, "grade_distribution", "entries must be non-negative");
    total += p;
  }
  check(std::abs(total - 1.0) <= 1e-9, "grade_distribution", "entries must sum to 1");
  check(shift.noise_sigma >= 0.0, "shift_noise_sigma", "must be non-negative");
  check(shift.gamma > 0.0, "shift_gamma", "must be positive");
  check(shift.blur_radius >= 0, "shift_blur_radius", "must be non-negative");
  check(epochs >= 0, "epochs", "must be non-negative");
  check(smoothing >= 0.0 && smoothing < 1.0, "smoothing", "must lie in [0, 1)");
  check(source_lr > 0.0, "source_lr", "must be positive");
  check(source_momentum >= 0.0 && source_momentum < 1.0, "source_momentum", "must lie in [0, 1)");
  check(source_batch_size >= 1, "source_batch_size", "must be at least 1");
  check(class_balance_power >= 0.0, "class_balance_power", "must be non-negative");
  check(alpha > 0.0, "alpha", "must be positive");
  check(beta > 0.0, "beta", "must be positive");
  check(gues_lr > 0.0, "gues_lr", "must be positive");
  check(gues_momentum >= 0.0 && gues_momentum < 1.0, "gues_momentum", "must lie in [0, 1)");
  check(batch_size >= 1, "batch_size", "must be at least 1");
  check(steps_per_batch >= 1, "steps_per_batch", "must be at least 1");
  check(emission == "forward" || emission == "post_update", "emission", "must be 'forward' or 'post_update'");
  check(saliency_normalizer > 0.0, "saliency_normalizer", "must be positive");
  try {
    parse_mode(mode);
    for (const auto& m : sweep_modes) parse_mode(m);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config key 'mode'/'sweep_modes': ") + e.what());
  }
  check(tta_lr > 0.0, "tta_lr", "must be positive");
  check(tta_momentum >= 0.0 && tta_momentum < 1.0, "tta_momentum", "must lie in [0, 1)");
  check(seeds >= 1, "seeds", "must be at least 1");
  for (Index b : sweep_batch_sizes) check(b >= 1, "sweep_batch_sizes", "entries must be at least 1");
  for (double a : sweep_alpha) check(a > 0.0, "sweep_alpha", "entries must be positive");
  for (double b : sweep_beta) check(b > 0.0, "sweep_beta", "entries must be positive");
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  ExperimentConfig config;
  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    const auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(config, key, value);
  }
  config.validate();
  return config;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return from_json(text.str());
}

std::string ExperimentConfig::to_json() const {
  json j = json::object();
  j["seed"] = seed;
  j["out_dir"] = out_dir;
  j["n_source"] = n_source;
  j["n_target"] = n_target;
  j["n_source_test"] = n_source_test;
  j["image_size"] = image_size;
  j["grade_distribution"] = grade_distribution;
  j["shift_brightness"] = shift.brightness_delta;
  j["shift_tint"] = shift.tint;
  j["shift_noise_sigma"] = shift.noise_sigma;
  j["shift_gamma"] = shift.gamma;
  j["shift_blur_radius"] = shift.blur_radius;
  j["epochs"] = epochs;
  j["smoothing"] = smoothing;
  j["source_lr"] = source_lr;
  j["source_momentum"] = source_momentum;
  j["source_batch_size"] = source_batch_size;
  j["class_balance_power"] = class_balance_power;
  j["alpha"] = alpha;
  j["beta"] = beta;
  j["gues_lr"] = gues_lr;
  j["gues_momentum"] = gues_momentum;
  j["batch_size"] = batch_size;
  j["steps_per_batch"] = steps_per_batch;
  j["emission"] = emission;
  j["saliency_normalizer"] = saliency_normalizer;
  j["mode"] = mode;
  j["tta_lr"] = tta_lr;
  j["tta_momentum"] = tta_momentum;
  j["seeds"] = seeds;
  j["sweep_batch_sizes"] = sweep_batch_sizes;
  j["sweep_modes"] = sweep_modes;
  j["sweep_alpha"] = sweep_alpha;
  j["sweep_beta"] = sweep_beta;
  return j.dump(2) + "\n";
}

GuesConfig ExperimentConfig::gues_config(Index batch, std::uint64_t run_seed) const {
  GuesConfig g;
  g.alpha = alpha;
  g.beta = beta;
  g.learning_rate = gues_lr;
  g.momentum = gues_momentum;
  g.batch_size = batch;
  g.seed = mix_seed(run_seed, kGeneratorNoise);
  g.steps_per_batch = steps_per_batch;
  g.emission = emission == "post_update" ? EmissionMode::kPostUpdate : EmissionMode::kForwardPass;
  g.saliency.normalizer = saliency_normalizer;
  return g;
}

// Metrics ------------------------------------------------------------------------

std::string format_metric(double value) { return std::isnan(value) ? "undefined" : fixed6(value); }

double median(std::vector<double> values) {
  if (values.empty()) throw Error("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t mid = values.size() / 2;
  return values.size() % 2 == 1 ? values[mid] : 0.5 * (values[mid - 1] + values[mid]);
}

Scores score(const ConfusionMatrix& cm) {
  constexpr double nan = std::numeric_limits<double>::quiet_NaN();
  Scores s{nan, nan, nan};
  if (cm.total() == 0) return s;
  s.acc = accuracy(cm);
  try {
    s.qwk = qwk(cm);
    s.avg = avg_metric(s.acc, s.qwk);
  } catch (const UndefinedMetric&) {
  }
  return s;
}

void write_metrics_csv(const fs::path& path, const std::vector<MetricsRow>& rows) {
  auto out = open_out(path);
  out << "step,batch_index,acc,qwk,avg\n";
  for (const auto& r : rows) {
    out << r.step << ',' << r.batch_index << ',' << format_metric(r.acc) << ',' << format_metric(r.qwk) << ','
        << format_metric(r.avg) << '\n';
  }
}

void write_loss_csv(const fs::path& path, const std::vector<BatchLoss>& losses) {
  auto out = open_out(path);
  out << "batch_index,kl,mse,loss\n";
  for (const auto& l : losses) {
    out << l.batch_index << ',' << fixed6(l.kl) << ',' << fixed6(l.mse) << ',' << fixed6(l.total) << '\n';
  }
}

// Adaptation ---------------------------------------------------------------------

std::uint64_t stream_seed(std::uint64_t run_seed) { return mix_seed(run_seed, kStreamOrder); }

AdaptOptions adapt_options(const ExperimentConfig& config, AdaptMode mode, Index batch_size,
                           std::uint64_t run_seed) {
  AdaptOptions o;
  o.mode = mode;
  o.gues = config.gues_config(batch_size, run_seed);
  o.gues_model.height = config.image_size;
  o.gues_model.width = config.image_size;
  o.gues_init_seed = mix_seed(run_seed, kGeneratorInit);
  o.tta_lr = config.tta_lr;
  o.tta_momentum = config.tta_momentum;
  return o;
}

AdaptResult run_adapt(const SourceClassifier& source, const Dataset& target, BatchSource& stream,
                      const AdaptOptions& options) {
  AdaptResult result;
  SourceClassifier classifier = source.clone();
  const auto method = tta_method(options.mode);
  std::optional<TtaState> tta;
  if (method) {
    tta = make_tta_state(classifier, *method, options.tta_lr, options.tta_momentum, options.gues.batch_size);
  }
  std::optional<GuesModel> generator;
  std::optional<GuesAdapter> adapter;
  if (uses_gues(options.mode)) {
    generator.emplace(options.gues_model, options.gues_init_seed);
    adapter.emplace(*generator, options.gues);
  }

  double abs_delta = 0.0;
  Index delta_count = 0;
  Index step = 0;
  while (auto batch = stream.next()) {
    const Tensor x = to_batch(batch->images);
    Tensor input = x;
    if (adapter) {
      BatchLoss loss;
      input = adapter->step(x, batch->index, &loss);
      result.losses.push_back(loss);
      abs_delta += (input.data() - x.data()).abs().sum();
      delta_count += x.numel();
    }
    Tensor logits;
    if (tta && (*method == TtaMethod::kTent || x.dim(0) >= 2)) {
      logits = tta_step(classifier, input, *tta).logits;
    } else if (tta) {
      // A single-sample batch has no diversity term; predict with its own statistics.
      logits = classifier.forward(input, BatchNormMode::kBatch);
    } else {
      logits = predict(classifier, input);
    }
    if (step == 0) result.first_batch_logits = logits.detach();
    const auto predicted = argmax_rows(logits);
    for (std::size_t k = 0; k < predicted.size(); ++k) {
      result.aggregate.add(target.grades.at(batch->ids[k]), predicted[k]);
    }
    ++step;
    const Scores s = score(result.aggregate);
    result.rows.push_back({step, batch->index, s.acc, s.qwk, s.avg});
  }
  adapter.reset();
  if (delta_count > 0) result.mean_abs_delta = abs_delta / static_cast<double>(delta_count);
  result.generator = std::move(generator);
  return result;
}

AdaptResult run_adapt(const SourceClassifier& source, const Dataset& target,
                      const std::shared_ptr<const std::vector<Image>>& images, const ExperimentConfig& config,
                      AdaptMode mode, Index batch_size, std::uint64_t run_seed) {
  Stream stream(images, batch_size, stream_seed(run_seed));
  return run_adapt(source, target, stream, adapt_options(config, mode, batch_size, run_seed));
}

// Subcommands --------------------------------------------------------------------

GenDataResult generate_data(const ExperimentConfig& config) {
  config.validate();
  const auto dist = std::span<const double>(config.grade_distribution);
  auto source = generate_retinatoy(mix_seed(config.seed, kSourceSamples), config.n_source, dist,
                                   DomainTag::kSource, config.image_size);
  auto target = generate_retinatoy(mix_seed(config.seed, kTargetSamples), config.n_target, dist,
                                   DomainTag::kTarget, config.image_size);
  const std::uint64_t noise_base = mix_seed(config.seed, kShiftNoise);
  parallel_for(target.size(), [&](std::size_t i) {
    target[i].image = apply_shift(target[i].image, config.shift, mix_seed(noise_base, i));
  });
  const fs::path dir = config.data_dir();
  fs::remove_all(dir / "source");
  fs::remove_all(dir / "target");
  write_manifest(dir, source, target);
  return {config.manifest_path(), config.n_source, config.n_target};
}

Dataset source_test_set(const ExperimentConfig& config) {
  return to_dataset(generate_retinatoy(mix_seed(config.seed, kSourceTest), config.n_source_test,
                                       config.grade_distribution, DomainTag::kSource, config.image_size));
}

Dataset load_target(const ExperimentConfig& config) {
  require_file(config.manifest_path(), "dataset manifest");
  Dataset target = load_domain(config.manifest_path(), DomainTag::kTarget);
  if (target.images.empty()) throw MissingArtifact("manifest lists no target images: " + config.manifest_path().string());
  return target;
}

SourceClassifier load_source_classifier(const ExperimentConfig& config) {
  require_file(config.classifier_path(), "classifier checkpoint");
  SourceClassifier model(mix_seed(config.seed, kClassifierInit));
  load_classifier(config.classifier_path(), model);
  return model;
}

SourceRunResult train_source_run(const ExperimentConfig& config) {
  config.validate();
  require_file(config.manifest_path(), "dataset manifest");
  const Dataset source = load_domain(config.manifest_path(), DomainTag::kSource);
  if (source.images.empty()) throw MissingArtifact("manifest lists no source images");

  SourceClassifier model(mix_seed(config.seed, kClassifierInit));
  SourceTrainOptions opts;
  opts.epochs = config.epochs;
  opts.smoothing = config.smoothing;
  opts.learning_rate = config.source_lr;
  opts.momentum = config.source_momentum;
  opts.batch_size = config.source_batch_size;
  opts.seed = mix_seed(config.seed, kClassifierShuffle);
  opts.class_balance_power = config.class_balance_power;

  SourceRunResult result;
  result.epoch_losses = train_source(model, source.images, source.grades, opts);
  result.checkpoint = config.classifier_path();
  fs::create_directories(config.source_dir());
  save_classifier(result.checkpoint, model);

  result.in_domain = evaluate(model, source_test_set(config));
  result.target = evaluate(model, load_target(config));

  auto train_csv = open_out(config.source_dir() / "train.csv");
  train_csv << "epoch,loss\n";
  for (std::size_t e = 0; e < result.epoch_losses.size(); ++e) {
    train_csv << e + 1 << ',' << fixed6(result.epoch_losses[e]) << '\n';
  }
  auto eval_csv = open_out(config.source_dir() / "eval.csv");
  eval_csv << "split,acc,qwk,avg\n";
  for (const auto& [name, s] : {std::pair{"in_domain", result.in_domain}, std::pair{"target", result.target}}) {
    eval_csv << name << ',' << format_metric(s.acc) << ',' << format_metric(s.qwk) << ',' << format_metric(s.avg)
             << '\n';
  }
  return result;
}

AdaptRunResult adapt_run(const ExperimentConfig& config, AdaptMode mode) {
  config.validate();
  const SourceClassifier classifier = load_source_classifier(config);
  const Dataset target = load_target(config);
  const auto images = std::make_shared<const std::vector<Image>>(target.images);

  AdaptRunResult run;
  run.result = run_adapt(classifier, target, images, config, mode, config.batch_size, config.seed);
  run.aggregate = score(run.result.aggregate);
  run.dir = fs::path(config.out_dir) / "adapt" / to_string(mode);
  fs::create_directories(run.dir);
  write_metrics_csv(run.dir / "metrics.csv", run.result.rows);
  if (run.result.generator) {
    write_loss_csv(run.dir / "loss.csv", run.result.losses);
    save_gues_model(run.dir / "gues.ckpt", *run.result.generator);
  }
  auto summary = open_out(run.dir / "summary.csv");
  summary << "mode,seed,batch_size,acc,qwk,avg,mean_abs_delta\n"
          << to_string(mode) << ',' << config.seed << ',' << config.batch_size << ','
          << format_metric(run.aggregate.acc) << ',' << format_metric(run.aggregate.qwk) << ','
          << format_metric(run.aggregate.avg) << ',' << fixed6(run.result.mean_abs_delta) << '\n';
  return run;
}

double batch_spread(const std::vector<SweepPoint>& points, const std::string& mode) {
  std::map<std::uint64_t, std::pair<double, double>> per_seed;  // seed -> (min, max)
  for (const auto& p : points) {
    if (p.mode != mode) continue;
    auto [it, fresh] = per_seed.try_emplace(p.seed, p.scores.acc, p.scores.acc);
    if (!fresh) {
      it->second.first = std::min(it->second.first, p.scores.acc);
      it->second.second = std::max(it->second.second, p.scores.acc);
    }
  }
  if (per_seed.empty()) throw Error("batch_spread: no points for mode " + mode);
  std::vector<double> spreads;
  for (const auto& [seed, range] : per_seed) spreads.push_back(range.second - range.first);
  return median(spreads);
}

namespace {

std::string grid_label(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

SweepResult batch_sweep(const ExperimentConfig& config, const SourceClassifier& classifier,
                        const Dataset& target, const std::shared_ptr<const std::vector<Image>>& images) {
  if (config.sweep_batch_sizes.empty() || config.sweep_modes.empty()) {
    throw ConfigError("config key 'sweep_batch_sizes'/'sweep_modes': batch sweep grid is empty");
  }
  const fs::path dir = fs::path(config.out_dir) / "sweep" / "batch";
  std::vector<SweepPoint> points;
  for (const auto& mode : config.sweep_modes) {
    for (Index b : config.sweep_batch_sizes) {
      for (int s = 0; s < config.seeds; ++s) {
        SweepPoint p;
        p.mode = mode;
        p.batch_size = b;
        p.alpha = config.alpha;
        p.beta = config.beta;
        p.seed = config.seed + static_cast<std::uint64_t>(s);
        points.push_back(p);
      }
    }
  }
  parallel_for(points.size(), [&](std::size_t i) {
    auto& p = points[i];
    const AdaptResult r = run_adapt(classifier, target, images, config, parse_mode(p.mode), p.batch_size, p.seed);
    p.scores = score(r.aggregate);
    const fs::path run_dir = dir / p.mode / ("b" + std::to_string(p.batch_size)) / ("s" + std::to_string(p.seed));
    write_metrics_csv(run_dir / "metrics.csv", r.rows);
    if (!r.losses.empty()) write_loss_csv(run_dir / "loss.csv", r.losses);
  });

  SweepResult result;
  result.points = points;
  result.csv = dir / "summary.csv";
  auto csv = open_out(result.csv);
  csv << "mode,batch_size,seed,acc,qwk,avg\n";
  for (const auto& p : points) {
    csv << p.mode << ',' << p.batch_size << ',' << p.seed << ',' << format_metric(p.scores.acc) << ','
        << format_metric(p.scores.qwk) << ',' << format_metric(p.scores.avg) << '\n';
  }
  auto spread_csv = open_out(dir / "spread.csv");
  spread_csv << "mode,acc_spread\n";
  std::vector<Series> series;
  for (const auto& mode : config.sweep_modes) {
    spread_csv << mode << ',' << fixed6(batch_spread(points, mode)) << '\n';
    Series s{mode, {}, {}};
    for (Index b : config.sweep_batch_sizes) {
      std::vector<double> accs;
      for (const auto& p : points) {
        if (p.mode == mode && p.batch_size == b) accs.push_back(p.scores.acc);
      }
      s.x.push_back(std::log2(static_cast<double>(b)));
      s.y.push_back(median(accs));
    }
    series.push_back(std::move(s));
  }
  result.svg = dir / "batch_sweep.svg";
  write_text(result.svg, svg_line_plot("Target ACC vs batch size (median over seeds)", "log2(batch size)",
                                       "aggregate ACC", series));
  return result;
}

SweepResult alpha_beta_sweep(const ExperimentConfig& config, const SourceClassifier& classifier,
                             const Dataset& target, const std::shared_ptr<const std::vector<Image>>& images) {
  if (config.sweep_alpha.empty() || config.sweep_beta.empty()) {
    throw ConfigError("config key 'sweep_alpha'/'sweep_beta': alpha x beta grid is empty");
  }
  const fs::path dir = fs::path(config.out_dir) / "sweep" / "alpha_beta";
  std::vector<SweepPoint> points;
  for (double a : config.sweep_alpha) {
    for (double b : config.sweep_beta) {
      for (int s = 0; s < config.seeds; ++s) {
        SweepPoint p;
        p.mode = "gues";
        p.batch_size = config.batch_size;
        p.alpha = a;
        p.beta = b;
        p.seed = config.seed + static_cast<std::uint64_t>(s);
        points.push_back(p);
      }
    }
  }
  parallel_for(points.size(), [&](std::size_t i) {
    auto& p = points[i];
    ExperimentConfig local = config;
    local.alpha = p.alpha;
    local.beta = p.beta;
    const AdaptResult r = run_adapt(classifier, target, images, local, AdaptMode::kGues, p.batch_size, p.seed);
    p.scores = score(r.aggregate);
    const fs::path run_dir =
        dir / ("a" + grid_label(p.alpha) + "_b" + grid_label(p.beta)) / ("s" + std::to_string(p.seed));
    write_metrics_csv(run_dir / "metrics.csv", r.rows);
    write_loss_csv(run_dir / "loss.csv", r.losses);
  });

  SweepResult result;
  result.points = points;
  result.csv = dir / "summary.csv";
  auto csv = open_out(result.csv);
  csv << "alpha,beta,seed,acc,qwk,avg\n";
  for (const auto& p : points) {
    csv << grid_label(p.alpha) << ',' << grid_label(p.beta) << ',' << p.seed << ',' << format_metric(p.scores.acc)
        << ',' << format_metric(p.scores.qwk) << ',' << format_metric(p.scores.avg) << '\n';
  }
  std::vector<std::vector<double>> grid;
  std::vector<std::string> rows, cols;
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double a : config.sweep_alpha) {
    rows.push_back("a=" + grid_label(a));
    std::vector<double> row;
    for (double b : config.sweep_beta) {
      std::vector<double> avgs;
      for (const auto& p : points) {
        if (p.alpha == a && p.beta == b) avgs.push_back(p.scores.avg);
      }
      const double m = median(avgs);
      row.push_back(m);
      if (std::isfinite(m)) {
        lo = std::min(lo, m);
        hi = std::max(hi, m);
      }
    }
    grid.push_back(std::move(row));
  }
  for (double b : config.sweep_beta) cols.push_back("b=" + grid_label(b));
  auto spread_csv = open_out(dir / "spread.csv");
  spread_csv << "avg_min,avg_max,avg_spread\n"
             << format_metric(std::isfinite(lo) ? lo : NAN) << ',' << format_metric(std::isfinite(hi) ? hi : NAN)
             << ',' << format_metric(std::isfinite(lo) ? hi - lo : NAN) << '\n';
  result.svg = dir / "alpha_beta.svg";
  write_text(result.svg, svg_heat_table("Median target AVG over alpha x beta", rows, cols, grid));
  return result;
}

}  // namespace

SweepResult sweep_run(const ExperimentConfig& config, const std::string& axis) {
  config.validate();
  if (axis != "batch" && axis != "alpha_beta") {
    throw ConfigError("unknown sweep axis '" + axis + "' (expected batch or alpha_beta)");
  }
  const SourceClassifier classifier = load_source_classifier(config);
  const Dataset target = load_target(config);
  const auto images = std::make_shared<const std::vector<Image>>(target.images);
  return axis == "batch" ? batch_sweep(config, classifier, target, images)
                         : alpha_beta_sweep(config, classifier, target, images);
}

void saliency_run(const fs::path& input, const fs::path& output, const SaliencyOptions& options) {
  require_file(input, "input image");
  const Image image = read_ppm(input);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  write_pgm(output, fine_grained_saliency(to_gray(image), options));
}

// Workers ------------------------------------------------------------------------

unsigned worker_count() {
  if (const char* env = std::getenv("GUES_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) {
      throw ConfigError(std::string("GUES_THREADS must be a positive integer, got '") + env + "'");
    }
    return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t count, const std::function<void(std::size_t)>& job) {
  if (count == 0) return;
  const std::size_t workers = std::min<std::size_t>(count, worker_count());
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto drain = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers <= 1) {
    drain();
  } else {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(drain);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace gues
