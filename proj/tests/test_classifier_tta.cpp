#include <cmath>
#include <numeric>

#include "doctest.h"
#include "gues/checkpoint.hpp"
#include "gues/classifier.hpp"
#include "gues/experiment.hpp"
#include "gues/retina_toy.hpp"
#include "gues/tta.hpp"
#include "test_util.hpp"

using namespace gues;

namespace {

std::vector<Image> toy_images(int n, Index size = 32, std::uint64_t seed = 1) {
  std::vector<Image> out;
  for (const auto& s : generate_retinatoy(seed, n, kDefaultGradeDistribution, DomainTag::kSource, size)) {
    out.push_back(s.image);
  }
  return out;
}

bool same(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].data() == b[i].data()).all()) return false;
  }
  return true;
}

std::vector<Tensor> snapshot(const std::vector<Tensor>& ts) {
  std::vector<Tensor> out;
  for (const auto& t : ts) out.push_back(t.detach());
  return out;
}

bool moving_average_non_increasing(const std::vector<double>& v, std::size_t window) {
  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + window <= v.size(); ++i) {
    const double avg = std::accumulate(v.begin() + i, v.begin() + i + window, 0.0) / window;
    if (avg > previous) return false;
    previous = avg;
  }
  return true;
}

}  // namespace

TEST_CASE("classifier output contract") {
  const SourceClassifier model(3);
  const Tensor x = to_batch(toy_images(4));
  const Tensor logits = predict(model, x);
  CHECK(logits.shape() == Shape{4, 5});
  CHECK((predict(model, x).data() == logits.data()).all());
  CHECK(predict(model, to_batch(toy_images(1))).shape() == Shape{1, 5});
  CHECK_THROWS_AS(predict(model, Tensor::zeros({1, 1, 8, 8})), ShapeError);
  CHECK(argmax_rows(Tensor::from({2, 3}, {0, 5, 1, 9, 2, 3})) == std::vector<int>{1, 0});
}

TEST_CASE("frozen predictions ignore batch composition") {
  const SourceClassifier model(4);
  const auto images = toy_images(6);
  const Tensor both = predict(model, to_batch(std::vector<Image>{images[0], images[1]}));
  const Tensor alone = predict(model, to_batch(std::vector<Image>{images[0]}));
  for (Index j = 0; j < 5; ++j) CHECK(both[j] == alone[j]);
  const Tensor all = predict(model, to_batch(images));
  for (Index j = 0; j < 5; ++j) CHECK(all[j] == alone[j]);
}

TEST_CASE("running statistics change only in update mode") {
  const SourceClassifier model(5);
  const Tensor x = to_batch(toy_images(4));
  const auto before = snapshot({model.bn_mean[0], model.bn_var[2]});
  (void)model.forward(x, BatchNormMode::kRunning);
  (void)model.forward(x, BatchNormMode::kBatch);
  CHECK(same(before, {model.bn_mean[0], model.bn_var[2]}));
  (void)model.forward(x, BatchNormMode::kBatchUpdate);
  CHECK_FALSE(same(before, {model.bn_mean[0], model.bn_var[2]}));
}

TEST_CASE("smoothed cross-entropy") {
  const std::vector<int> labels{2};
  Tensor confident = Tensor::zeros({1, 5});
  confident.mutable_data()[2] = 50.0;
  CHECK(smoothed_cross_entropy(confident, labels, 0.0).item() < 1e-12);

  const Tensor logits = Tensor::from({1, 5}, {0.3, -1.0, 2.0, 0.1, 0.5});
  const Buffer p = softmax(logits).data();
  // Target (1 - s) onehot + s / C: 0.92 on the label, 0.02 elsewhere.
  double expected = -0.92 * std::log(p[2]);
  for (Index j = 0; j < 5; ++j) {
    if (j != 2) expected -= 0.02 * std::log(p[j]);
  }
  CHECK(smoothed_cross_entropy(logits, labels, 0.1).item() == doctest::Approx(expected).epsilon(1e-12));

  const double floor = smoothed_cross_entropy(confident, labels, 0.1).item();
  CHECK(floor > 0.0);

  const std::vector<double> weights{1.0, 1.0, 2.0, 1.0, 1.0};
  CHECK(smoothed_cross_entropy(logits, labels, 0.1, weights).item() ==
        doctest::Approx(2.0 * expected).epsilon(1e-12));
  const std::vector<int> bad{7};
  CHECK_THROWS(smoothed_cross_entropy(logits, bad, 0.1));
}

TEST_CASE("entropy examples") {
  const std::vector<double> uniform(5, 0.2), onehot{0, 0, 1, 0, 0}, half{0.5, 0.5, 0, 0, 0};
  CHECK(entropy(uniform) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK(entropy(onehot) == 0.0);
  CHECK(entropy(half) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<double> negative{1.5, -0.5}, unnormalized{0.3, 0.3};
  CHECK_THROWS(entropy(negative));
  CHECK_THROWS(entropy(unnormalized));
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(5);
    double total = 0.0;
    for (double& v : p) total += (v = rng.uniform());
    for (double& v : p) v /= total;
    const double h = entropy(p);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(5.0) + 1e-12);
  }
}

TEST_CASE("information maximization penalizes collapse") {
  const double big = 8.0;
  Tensor collapsed = Tensor::zeros({4, 4}), diverse = Tensor::zeros({4, 4});
  for (Index i = 0; i < 4; ++i) {
    collapsed.mutable_data()[i * 4] = big;
    diverse.mutable_data()[i * 4 + i] = big;
  }
  CHECK(mean_entropy(collapsed).item() == doctest::Approx(mean_entropy(diverse).item()).epsilon(1e-12));
  CHECK(information_maximization_loss(collapsed).item() > information_maximization_loss(diverse).item());
}

TEST_CASE("tent leaves one-hot predictions alone") {
  SourceClassifier model(6);
  model.head_b.mutable_data()[0] = 1e4;
  TtaState state = make_tta_state(model, TtaMethod::kTent, 1e-3, 0.9, 4);
  const auto before = snapshot(model.parameters());
  const auto result = tent_step(model, to_batch(toy_images(4)), state);
  CHECK(result.loss < 1e-300);
  // Vectorized exp bottoms out at a denormal, so the update is tiny rather than zero.
  const auto after = model.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) {
    CHECK((after[i].data() - before[i].data()).abs().maxCoeff() < 1e-300);
  }
}

TEST_CASE("tent adapts only normalization affine parameters") {
  SourceClassifier model(7);
  TtaState state = make_tta_state(model, TtaMethod::kTent, 1e-2, 0.9, 4);
  const auto convs = snapshot({model.conv_w[0], model.conv_w[1], model.conv_w[2], model.head_w, model.head_b});
  const auto stats = snapshot({model.bn_mean[0], model.bn_var[0]});
  const auto affine = snapshot(model.norm_affine_parameters());
  tent_step(model, to_batch(toy_images(4)), state);
  CHECK(same(convs, {model.conv_w[0], model.conv_w[1], model.conv_w[2], model.head_w, model.head_b}));
  CHECK(same(stats, {model.bn_mean[0], model.bn_var[0]}));
  CHECK_FALSE(same(affine, model.norm_affine_parameters()));
}

TEST_CASE("tent lowers entropy on a repeated batch") {
  SourceClassifier model(8);
  TtaState state = make_tta_state(model, TtaMethod::kTent, 1e-3, 0.9, 8);
  const Tensor x = to_batch(toy_images(8));
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(tent_step(model, x, state).loss);
  CHECK(moving_average_non_increasing(losses, 10));
  CHECK(losses.back() < losses.front());
}

TEST_CASE("shot-im keeps the head frozen and lowers its objective") {
  SourceClassifier model(9);
  TtaState state = make_tta_state(model, TtaMethod::kShotIm, 1e-3, 0.9, 8);
  const auto head = snapshot(model.head_parameters());
  const auto features = snapshot(model.feature_parameters());
  const Tensor x = to_batch(toy_images(8));
  std::vector<double> losses;
  for (int i = 0; i < 50; ++i) losses.push_back(shot_im_step(model, x, state).loss);
  CHECK(same(head, model.head_parameters()));
  CHECK_FALSE(same(features, model.feature_parameters()));
  CHECK(moving_average_non_increasing(losses, 10));
  CHECK_THROWS(shot_im_step(model, to_batch(toy_images(1)), state));
}

TEST_CASE("source training reduces the loss and recalibrates statistics") {
  const auto samples = generate_retinatoy(2, 96, kDefaultGradeDistribution, DomainTag::kSource, 32);
  const Dataset data = to_dataset(samples);
  SourceClassifier model(10);
  SourceTrainOptions opts;
  opts.epochs = 4;
  opts.seed = 3;
  const auto losses = train_source(model, data.images, data.grades, opts);
  REQUIRE(losses.size() == 4);
  CHECK(losses.back() < losses.front());
  CHECK_FALSE((model.bn_mean[0].data() == 0.0).all());

  SourceClassifier untouched(10);
  opts.epochs = 0;
  CHECK(train_source(untouched, data.images, data.grades, opts).empty());
  CHECK(same(SourceClassifier(10).parameters(), untouched.parameters()));
}

TEST_CASE("source training is deterministic") {
  const Dataset data = to_dataset(generate_retinatoy(4, 32, kDefaultGradeDistribution, DomainTag::kSource, 16));
  SourceTrainOptions opts;
  opts.epochs = 2;
  SourceClassifier a(1), b(1);
  train_source(a, data.images, data.grades, opts);
  train_source(b, data.images, data.grades, opts);
  CHECK(same(a.parameters(), b.parameters()));
}

TEST_CASE("classifier checkpoint round trip") {
  const auto dir = testutil::scratch("clsf");
  SourceClassifier model(11);
  (void)model.forward(to_batch(toy_images(4)), BatchNormMode::kBatchUpdate);
  save_classifier(dir / "c.clsf", model);
  CHECK(testutil::slurp(dir / "c.clsf").substr(0, 5) == "CLSF1");
  SourceClassifier loaded(99);
  load_classifier(dir / "c.clsf", loaded);
  CHECK(same(model.parameters(), loaded.parameters()));
  CHECK(same({model.bn_mean[1], model.bn_var[1]}, {loaded.bn_mean[1], loaded.bn_var[1]}));
  CHECK_THROWS_AS(read_checkpoint(dir / "c.clsf", kGuesMagic), CheckpointError);
}

TEST_CASE("identity generator composes with tta bit-for-bit") {
  const SourceClassifier source(12);
  const Dataset target = to_dataset(generate_retinatoy(5, 24, kDefaultGradeDistribution, DomainTag::kTarget, 32));
  const auto images = std::make_shared<const std::vector<Image>>(target.images);
  auto first_logits = [&](AdaptMode mode) {
    AdaptOptions o;
    o.mode = mode;
    o.gues.batch_size = 8;
    o.gues.learning_rate = 0.5;
    o.gues_model.height = 32;
    o.gues_model.width = 32;
    Stream stream(images, 8, 3);
    return run_adapt(source, target, stream, o).first_batch_logits;
  };
  CHECK((first_logits(AdaptMode::kGues).data() == first_logits(AdaptMode::kSourceOnly).data()).all());
  CHECK((first_logits(AdaptMode::kGuesTent).data() == first_logits(AdaptMode::kTent).data()).all());
  CHECK((first_logits(AdaptMode::kGuesShotIm).data() == first_logits(AdaptMode::kShotIm).data()).all());
}

TEST_CASE("adaptation modes") {
  CHECK(parse_mode("gues+tent") == AdaptMode::kGuesTent);
  CHECK(to_string(AdaptMode::kSourceOnly) == "source_only");
  CHECK(uses_gues(AdaptMode::kGuesShotIm));
  CHECK_FALSE(uses_gues(AdaptMode::kTent));
  CHECK(tta_method(AdaptMode::kGuesTent) == TtaMethod::kTent);
  CHECK_FALSE(tta_method(AdaptMode::kGues).has_value());
  CHECK_THROWS_AS(parse_mode("sar"), ConfigError);
}
