#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gues/retina_toy.hpp"
#include "gues/saliency.hpp"
#include "test_util.hpp"

using namespace gues;

namespace {

double clamped(const GrayImage& g, Index r, Index c) {
  r = std::min<Index>(std::max<Index>(r, 0), g.rows() - 1);
  c = std::min<Index>(std::max<Index>(c, 0), g.cols() - 1);
  return g(r, c);
}

// Brute-force reference in the same raster accumulation order.
GrayImage oracle(const GrayImage& g) {
  GrayImage out(g.rows(), g.cols());
  for (Index h = 0; h < g.rows(); ++h) {
    for (Index w = 0; w < g.cols(); ++w) {
      double total = 0.0;
      for (Index s : {1, 3, 7}) {
        double acc = 0.0;
        for (Index dy = -s; dy <= s; ++dy) {
          for (Index dx = -s; dx <= s; ++dx) acc += clamped(g, h + dy, w + dx) - g(h, w);
        }
        const double c = -acc / static_cast<double>((2 * s + 1) * (2 * s + 1) - 1);
        total += c > 0.0 ? c : 0.0;
      }
      out(h, w) = total / 3.0;
    }
  }
  return out;
}

GrayImage random_gray(Index n, Rng& rng) {
  GrayImage g(n, n);
  for (Index r = 0; r < n; ++r) {
    for (Index c = 0; c < n; ++c) g(r, c) = rng.uniform();
  }
  return g;
}

}  // namespace

TEST_CASE("to_gray coefficients") {
  Image white(1, 1, 1.0), black(1, 1, 0.0), red(1, 1, 0.0);
  red.channel[0](0, 0) = 1.0;
  CHECK(to_gray(white)(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(to_gray(black)(0, 0) == 0.0);
  CHECK(to_gray(red)(0, 0) == 0.299);
}

TEST_CASE("surround_mean examples") {
  const GrayImage constant = GrayImage::Constant(9, 9, 0.25);
  for (Index s : {1, 3, 7}) CHECK(surround_mean(constant, 4, 4, s) == 0.25);
  GrayImage spot = GrayImage::Zero(15, 15);
  spot(7, 7) = 1.0;
  CHECK(surround_mean(spot, 7, 7, 1) == 0.0);
  GrayImage small = GrayImage::Zero(3, 3);
  small(1, 1) = 1.0;
  CHECK(surround_mean(small, 0, 0, 1) == 0.125);
  CHECK_THROWS_AS(surround_mean(small, 3, 0, 1), ShapeError);
}

TEST_CASE("saliency analytic cases") {
  CHECK((fine_grained_saliency(GrayImage::Constant(12, 17, 0.5)) == 0.0).all());
  CHECK((fine_grained_saliency(GrayImage::Constant(20, 20, 0.37)) == 0.0).all());
  GrayImage spot = GrayImage::Zero(31, 31);
  spot(15, 15) = 1.0;
  const GrayImage s = fine_grained_saliency(spot);
  CHECK(s(15, 15) == 1.0);
  CHECK(s(14, 15) == 0.0);
  CHECK(s(16, 15) == 0.0);
  CHECK(s(15, 14) == 0.0);
  CHECK(s(15, 16) == 0.0);
}

TEST_CASE("saliency equals the nested-loop oracle bitwise") {
  Rng rng(99);
  for (int i = 0; i < 100; ++i) {
    const GrayImage g = random_gray(16, rng);
    const GrayImage s = fine_grained_saliency(g);
    REQUIRE((s == oracle(g)).all());
    CHECK((s >= 0.0).all());
    CHECK((s <= 1.0).all());
  }
  for (int i = 0; i < 10; ++i) {
    const GrayImage g = random_gray(64, rng);
    REQUIRE((fine_grained_saliency(g) == oracle(g)).all());
  }
}

TEST_CASE("a different normalizer is detected by the oracle") {
  Rng rng(5);
  const GrayImage g = random_gray(16, rng);
  SaliencyOptions tampered;
  tampered.normalizer = 2.9;
  CHECK_FALSE((fine_grained_saliency(g, tampered) == oracle(g)).all());
}

TEST_CASE("saliency works in float precision") {
  Plane<float> g = Plane<float>::Zero(9, 9);
  g(4, 4) = 1.0f;
  CHECK(fine_grained_saliency(g)(4, 4) == 1.0f);
}

TEST_CASE("saliency target replicates channels") {
  Rng rng(6);
  const Image img = testutil::random_image(12, 10, rng);
  const Image t = saliency_target(img);
  CHECK((t.channel[0] == t.channel[1]).all());
  CHECK((t.channel[1] == t.channel[2]).all());
  CHECK((t.channel[0] == fine_grained_saliency(to_gray(img))).all());
  const Image flat = saliency_target(Image(8, 8, 0.6));
  for (const auto& c : flat.channel) CHECK((c == 0.0).all());

  const Tensor batch = to_batch(std::vector<Image>{img, img});
  const Tensor targets = saliency_targets(batch);
  CHECK(targets.shape() == batch.shape());
  CHECK((from_batch(targets)[1].channel[2] == t.channel[2]).all());
  CHECK_THROWS_AS(saliency_targets(Tensor::zeros({1, 1, 4, 4})), ShapeError);
}

TEST_CASE("saliency peaks on a bright lesion") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const RetinaToySample s = render_retinatoy(seed, 1);
    if (!s.lesions[0].bright) continue;
    const Lesion& l = s.lesions[0];
    const GrayImage g = saliency_target(s.image).channel[0];
    Index r = 0, c = 0;
    g.maxCoeff(&r, &c);
    CHECK(std::abs(static_cast<double>(r) - l.cy) <= l.ry + 2.0);
    CHECK(std::abs(static_cast<double>(c) - l.cx) <= l.rx + 2.0);
    return;
  }
  FAIL("no single bright lesion sample among the probed seeds");
}

TEST_CASE("directional derivative locality") {
  const GrayImage g = GrayImage::Constant(40, 40, 0.5);
  const SaliencyMap d = saliency_directional_derivative(g, 20, 20);
  CHECK(d.isFinite().all());
  for (Index r = 0; r < 40; ++r) {
    for (Index c = 0; c < 40; ++c) {
      if (std::abs(r - 20) > 7 || std::abs(c - 20) > 7) CHECK(d(r, c) == 0.0);
    }
  }
  CHECK(d(20, 20) > 0.0);
  CHECK_THROWS_AS(saliency_directional_derivative(g, 40, 0), ShapeError);
}

TEST_CASE("directional derivative vanishes where the clamp is active") {
  GrayImage g = GrayImage::Constant(15, 15, 1.0);
  g(7, 7) = 0.0;
  CHECK(saliency_directional_derivative(g, 7, 7)(7, 7) == 0.0);
}

TEST_CASE("directional derivative magnitude bound") {
  const double bound = ((1.0 + 1.0 / 8) + (1.0 + 1.0 / 48) + (1.0 + 1.0 / 224)) / 3.0;
  Rng rng(12);
  const GrayImage g = random_gray(12, rng);
  for (Index h = 0; h < 12; ++h) {
    for (Index w = 0; w < 12; ++w) {
      CHECK((saliency_directional_derivative(g, h, w).abs() <= bound + 1e-6).all());
    }
  }
}

TEST_CASE("lesion boxes hold a disproportionate share of saliency") {
  std::vector<double> enrichment;
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const RetinaToySample s = render_retinatoy(seed, 3 + static_cast<int>(seed % 8));
    const GrayImage g = saliency_target(s.image).channel[0];
    double inside = 0.0, area = 0.0;
    for (Index r = 0; r < g.rows(); ++r) {
      for (Index c = 0; c < g.cols(); ++c) {
        for (const auto& l : s.lesions) {
          if (std::abs(r + 0.5 - l.cy) <= l.ry && std::abs(c + 0.5 - l.cx) <= l.rx) {
            inside += g(r, c);
            area += 1.0;
            break;
          }
        }
      }
    }
    enrichment.push_back((inside / g.sum()) / (area / static_cast<double>(g.size())));
  }
  std::nth_element(enrichment.begin(), enrichment.begin() + 20, enrichment.end());
  CHECK(enrichment[20] >= 3.0);
}
