#include <cmath>
#include <sstream>

#include "gues/experiment.hpp"
#include "gues/grad_check.hpp"
#include "gues/metrics.hpp"
#include "gues/ops.hpp"
#include "gues/saliency.hpp"

namespace gues {

namespace {

// Nested-loop reference for the saliency map: explicit clamped indexing, no
// padding buffer, same accumulation order (center-relative differences).
GrayImage naive_saliency(const GrayImage& gray) {
  const Index rows = gray.rows(), cols = gray.cols();
  GrayImage out(rows, cols);
  for (Index h = 0; h < rows; ++h) {
    for (Index w = 0; w < cols; ++w) {
      double total = 0.0;
      for (Index s : {1, 3, 7}) {
        double acc = 0.0;
        for (Index r = h - s; r <= h + s; ++r) {
          for (Index c = w - s; c <= w + s; ++c) {
            const Index rr = r < 0 ? 0 : (r >= rows ? rows - 1 : r);
            const Index cc = c < 0 ? 0 : (c >= cols ? cols - 1 : c);
            acc += gray(rr, cc) - gray(h, w);
          }
        }
        const double n = static_cast<double>((2 * s + 1) * (2 * s + 1) - 1);
        const double contrast = -acc / n;
        total += contrast > 0.0 ? contrast : 0.0;
      }
      out(h, w) = total / 3.0;
    }
  }
  return out;
}

GrayImage random_gray(Index rows, Index cols, Rng& rng) {
  GrayImage g(rows, cols);
  for (Index i = 0; i < g.size(); ++i) g(i / cols, i % cols) = rng.uniform();
  return g;
}

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Buffer b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) b[i] = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(b));
}

// Values bounded away from zero, for kinked primitives.
Tensor away_from_zero(Shape shape, Rng& rng) {
  Buffer b(numel_of(shape));
  for (Index i = 0; i < b.size(); ++i) {
    const double m = rng.uniform(0.05, 1.0);
    b[i] = rng.uniform() < 0.5 ? -m : m;
  }
  return Tensor(std::move(shape), std::move(b));
}

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific;
  os.precision(2);
  os << v;
  return os.str();
}

CheckResult saliency_oracle(const ExperimentConfig& config) {
  Rng rng(mix_seed(config.seed, 101));
  SaliencyOptions opts;
  opts.normalizer = config.saliency_normalizer;
  int mismatched = 0, total = 0;
  for (auto [size, count] : {std::pair<Index, int>{16, 100}, std::pair<Index, int>{64, 10}}) {
    for (int i = 0; i < count; ++i, ++total) {
      const GrayImage g = random_gray(size, size, rng);
      if (!(fine_grained_saliency(g, opts) == naive_saliency(g)).all()) ++mismatched;
    }
  }
  return {"saliency-oracle", mismatched == 0,
          std::to_string(total - mismatched) + "/" + std::to_string(total) +
              " images bit-identical to the nested-loop oracle"};
}

CheckResult saliency_analytic(const ExperimentConfig& config) {
  SaliencyOptions opts;
  opts.normalizer = config.saliency_normalizer;
  const GrayImage constant = GrayImage::Constant(20, 20, 0.37);
  const bool zero = (fine_grained_saliency(constant, opts) == 0.0).all();
  GrayImage spot = GrayImage::Zero(31, 31);
  spot(15, 15) = 1.0;
  const GrayImage s = fine_grained_saliency(spot, opts);
  const bool peak = s(15, 15) == 1.0 && s(14, 15) == 0.0 && s(16, 15) == 0.0 && s(15, 14) == 0.0 &&
                    s(15, 16) == 0.0;
  std::ostringstream detail;
  detail << "constant->0: " << (zero ? "yes" : "no") << ", single pixel peak=" << s(15, 15);
  return {"saliency-analytic", zero && peak, detail.str()};
}

CheckResult gradient_primitives(const ExperimentConfig& config) {
  Rng rng(mix_seed(config.seed, 102));
  struct Case {
    std::string name;
    ScalarFn f;
    Tensor x;
  };
  // Each case projects the primitive output on fixed random weights so
  // every output element contributes to the gradient.
  auto lin = [](const Tensor& y, const Tensor& w) { return sum(mul(y, w)); };

  std::vector<Case> cases;
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  const Tensor w34 = random_tensor({3, 4}, rng);
  cases.push_back({"add", [=](const Tensor& x) { return lin(add(x, b), w34); }, a});
  cases.push_back({"sub", [=](const Tensor& x) { return lin(sub(b, x), w34); }, a});
  cases.push_back({"mul", [=](const Tensor& x) { return lin(mul(x, b), w34); }, a});
  const Tensor m = random_tensor({4, 5}, rng), w35 = random_tensor({3, 5}, rng);
  cases.push_back({"matmul", [=](const Tensor& x) { return lin(matmul(x, m), w35); }, a});
  const Tensor img = random_tensor({2, 2, 5, 5}, rng), k = random_tensor({3, 2, 3, 3}, rng);
  const Tensor wc = random_tensor({2, 3, 3, 3}, rng);
  cases.push_back({"conv2d", [=](const Tensor& x) { return lin(conv2d(x, k, {2, 1}), wc); }, img});
  const Tensor kt = random_tensor({2, 3, 3, 3}, rng), wt = random_tensor({2, 3, 10, 10}, rng);
  cases.push_back(
      {"conv2d_transpose", [=](const Tensor& x) { return lin(conv2d_transpose(x, kt, {2, 1, 1}), wt); }, img});
  const Tensor kinked = away_from_zero({3, 4}, rng);
  cases.push_back({"relu", [=](const Tensor& x) { return lin(relu(x), w34); }, kinked});
  cases.push_back({"leaky_relu", [=](const Tensor& x) { return lin(leaky_relu(x, 0.2), w34); }, kinked});
  cases.push_back({"tanh", [=](const Tensor& x) { return lin(tanh(x), w34); }, a});
  cases.push_back({"sigmoid", [=](const Tensor& x) { return lin(sigmoid(x), w34); }, a});
  cases.push_back({"exp", [=](const Tensor& x) { return lin(exp(x), w34); }, a});
  cases.push_back({"log", [=](const Tensor& x) { return lin(log(x), w34); }, random_tensor({3, 4}, rng, 0.2, 2.0)});
  const Tensor w3 = random_tensor({3}, rng);
  cases.push_back({"sum", [=](const Tensor& x) { return lin(sum(x, 1), w3); }, a});
  const Tensor w4 = random_tensor({4}, rng);
  cases.push_back({"mean", [=](const Tensor& x) { return lin(mean(x, 0), w4); }, a});
  const Tensor w26 = random_tensor({2, 6}, rng);
  cases.push_back({"reshape", [=](const Tensor& x) { return lin(reshape(x, {2, 6}), w26); }, a});
  const Tensor w64 = random_tensor({6, 4}, rng);
  cases.push_back({"concat", [=](const Tensor& x) { return lin(concat({x, b}, 0), w64); }, a});
  const Tensor inside = random_tensor({3, 4}, rng, -0.4, 0.4);
  cases.push_back({"clamp", [=](const Tensor& x) { return lin(clamp(x, -0.5, 0.5), w34); }, inside});
  cases.push_back({"softmax", [=](const Tensor& x) { return lin(softmax(x), w34); }, a});
  cases.push_back({"log_softmax", [=](const Tensor& x) { return lin(log_softmax(x), w34); }, a});
  const Tensor gamma = random_tensor({2}, rng, 0.5, 1.5), beta = random_tensor({2}, rng);
  const Tensor wb = random_tensor({2, 2, 5, 5}, rng);
  cases.push_back({"batch_norm",
                   [=](const Tensor& x) {
                     Tensor rm = Tensor::zeros({2}), rv = Tensor::ones({2});
                     return lin(batch_norm(x, gamma, beta, rm, rv, {BatchNormMode::kBatch}), wb);
                   },
                   img});

  double worst = 0.0;
  std::string worst_name, failures;
  for (const auto& c : cases) {
    const GradCheckReport r = grad_check(c.f, c.x);
    if (r.max_relative_error > worst) {
      worst = r.max_relative_error;
      worst_name = c.name;
    }
    if (!r.passed) failures += (failures.empty() ? "" : ",") + c.name;
  }
  return {"gradient-primitives", failures.empty(),
          std::to_string(cases.size()) + " primitives, max rel err " + sci(worst) + " (" + worst_name + ")" +
              (failures.empty() ? "" : "; failed: " + failures)};
}

CheckResult gradient_gues_loss(const ExperimentConfig& config) {
  GuesModelOptions opts;
  opts.height = 16;
  opts.width = 16;
  opts.zero_init_output = false;
  const GuesModel model(opts, mix_seed(config.seed, 103));
  Rng rng(mix_seed(config.seed, 104));
  const Tensor x = random_tensor({1, 3, 16, 16}, rng, 0.0, 1.0);
  const Tensor noise = gaussian_noise_like(Tensor::zeros({1, opts.latent_dim}), rng);
  SaliencyOptions sal;
  sal.normalizer = config.saliency_normalizer;
  const Tensor target = saliency_targets(x, sal);
  auto loss = [&] {
    const LatentGaussian q = encode(model, x);
    const Tensor x_hat = add(x, decode(model, reparameterize(q, noise)));
    return gues_loss(q, x_hat, target, config.alpha, config.beta);
  };
  GradCheckOptions check;
  check.kink_tolerance = 1e-3;
  const GradCheckReport r = grad_check_params(loss, model.parameters(), check);
  return {"gradient-gues-loss", r.passed,
          std::to_string(r.relative_error.size()) + " parameters, max rel err " + sci(r.max_relative_error) + ", " +
              std::to_string(r.excluded.size()) + " excluded at kinks"};
}

CheckResult kl_analytic(const ExperimentConfig& config) {
  const double zero = kl_loss({Tensor::zeros({1, 10}), Tensor::zeros({1, 10})}).item();
  const double five = kl_loss({Tensor::ones({1, 10}), Tensor::zeros({1, 10})}).item();
  Rng rng(mix_seed(config.seed, 105));
  bool nonneg = true;
  for (int i = 0; i < 1000 && nonneg; ++i) {
    nonneg = kl_loss({random_tensor({2, 10}, rng, -3, 3), random_tensor({2, 10}, rng, -3, 3)}).item() >= 0.0;
  }
  const bool ok = std::abs(zero) <= 1e-12 && std::abs(five - 5.0) <= 1e-9 && nonneg;
  std::ostringstream d;
  d << "KL(0,0)=" << zero << ", KL(mu=1,d=10)=" << five << ", non-negative on 1000 draws: " << (nonneg ? "yes" : "no");
  return {"kl-analytic", ok, d.str()};
}

CheckResult qwk_analytic(const ExperimentConfig&) {
  ConfusionMatrix diag(5), chance(2), anti(2);
  for (int c = 0; c < 5; ++c) diag.add(c, c);
  chance.counts << 1, 1, 1, 1;
  anti.counts << 0, 2, 2, 0;
  const double q1 = qwk(diag), q0 = qwk(chance), qm = qwk(anti), avg = avg_metric(0.539, 0.601);
  const bool ok = std::abs(q1 - 1.0) <= 1e-9 && std::abs(q0) <= 1e-9 && std::abs(qm + 1.0) <= 1e-9 &&
                  std::abs(avg - 0.570) <= 1e-9;
  std::ostringstream d;
  d << "diag=" << q1 << ", chance=" << q0 << ", anti=" << qm << ", avg(0.539,0.601)=" << avg;
  return {"qwk-analytic", ok, d.str()};
}

CheckResult determinism(const ExperimentConfig& config) {
  const auto a = generate_retinatoy(config.seed, 8, config.grade_distribution);
  const auto b = generate_retinatoy(config.seed, 8, config.grade_distribution);
  bool same = true;
  for (std::size_t i = 0; i < a.size(); ++i) same = same && a[i].image == b[i].image && a[i].grade == b[i].grade;
  GuesModelOptions opts;
  opts.height = 32;
  opts.width = 32;
  opts.zero_init_output = false;
  const GuesModel m1(opts, config.seed), m2(opts, config.seed);
  Rng r1(3), r2(3);
  const Tensor x = random_tensor({2, 3, 32, 32}, r1, 0.0, 1.0);
  const Tensor noise = gaussian_noise_like(Tensor::zeros({2, opts.latent_dim}), r2);
  const bool forward_same = (generate(m1, x, noise).x_hat.data() == generate(m2, x, noise).x_hat.data()).all();
  return {"determinism", same && forward_same,
          std::string("generator images ") + (same ? "identical" : "differ") + ", generator forward " +
              (forward_same ? "identical" : "differs")};
}

CheckResult identity_init(const ExperimentConfig& config) {
  GuesModelOptions opts;
  opts.height = 32;
  opts.width = 32;
  const GuesModel model(opts, config.seed);
  Rng rng(mix_seed(config.seed, 106));
  const Tensor x = random_tensor({3, 3, 32, 32}, rng, 0.0, 1.0);
  const Tensor noise = gaussian_noise_like(Tensor::zeros({3, opts.latent_dim}), rng);
  const UnadversarialExample ex = generate(model, x, noise);
  const bool ok = (ex.x_hat.data() == x.data()).all() && (ex.delta.data() == 0.0).all();
  return {"identity-init", ok, ok ? "x_hat == x with a zero-initialized output layer" : "x_hat differs from x"};
}

}  // namespace

std::vector<CheckResult> run_verification(const ExperimentConfig& config) {
  using Check = CheckResult (*)(const ExperimentConfig&);
  const Check checks[] = {saliency_oracle, saliency_analytic, gradient_primitives, gradient_gues_loss,
                          kl_analytic,     qwk_analytic,      determinism,         identity_init};
  std::vector<CheckResult> out;
  for (Check c : checks) {
    try {
      out.push_back(c(config));
    } catch (const std::exception& e) {
      out.push_back({"exception", false, e.what()});
    }
  }
  return out;
}

}  // namespace gues
