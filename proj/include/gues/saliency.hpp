#pragma once

#include <algorithm>
#include <array>

#include "gues/image.hpp"

namespace gues {

/// Surround radii of the center-surround operator.
inline constexpr std::array<Index, 3> kSurroundScales{1, 3, 7};
inline constexpr Index kMaxSurroundScale = 7;

struct SaliencyOptions {
  /// The scale sum is divided by this; 3 keeps outputs in [0, 1].
  double normalizer = 3.0;
};

/// Luma: 0.299 R + 0.587 G + 0.114 B.
GrayImage to_gray(const Image& image);

/// Mean of the (2s+1)^2 - 1 neighbours of (h, w), edges replicated.
/// The window is accumulated in raster order, then the center is removed.
template <typename Derived>
typename Derived::Scalar surround_mean(const Eigen::ArrayBase<Derived>& gray, Index h, Index w,
                                       Index scale) {
  using Scalar = typename Derived::Scalar;
  const Index rows = gray.rows(), cols = gray.cols();
  if (h < 0 || h >= rows || w < 0 || w >= cols) {
    throw ShapeError("surround_mean: pixel (" + std::to_string(h) + "," + std::to_string(w) +
                     ") outside " + std::to_string(rows) + "x" + std::to_string(cols) + " image");
  }
  if (scale < 1) throw ShapeError("surround_mean: scale must be positive");
  Scalar acc(0);
  for (Index dy = -scale; dy <= scale; ++dy) {
    const Index r = std::clamp<Index>(h + dy, 0, rows - 1);
    for (Index dx = -scale; dx <= scale; ++dx) {
      acc += gray(r, std::clamp<Index>(w + dx, 0, cols - 1));
    }
  }
  const Index side = 2 * scale + 1;
  return (acc - gray(h, w)) / Scalar(side * side - 1);
}

/// Fine-grained center-surround saliency:
///   G(h, w) = (1/3) * sum_{s in {1,3,7}} max(I(h, w) - sur(h, w, s), 0).
/// Zero on constant images, values in [0, 1] for inputs in [0, 1].
template <typename Derived>
Plane<typename Derived::Scalar> fine_grained_saliency(const Eigen::ArrayBase<Derived>& gray,
                                                      const SaliencyOptions& opts = {}) {
  using Scalar = typename Derived::Scalar;
  const Index rows = gray.rows(), cols = gray.cols();
  const Index pad = kMaxSurroundScale;
  Plane<Scalar> padded(rows + 2 * pad, cols + 2 * pad);
  for (Index r = 0; r < padded.rows(); ++r) {
    const Index sr = std::clamp<Index>(r - pad, 0, rows - 1);
    for (Index c = 0; c < padded.cols(); ++c) {
      padded(r, c) = gray(sr, std::clamp<Index>(c - pad, 0, cols - 1));
    }
  }
  Plane<Scalar> out(rows, cols);
  for (Index h = 0; h < rows; ++h) {
    for (Index w = 0; w < cols; ++w) {
      const Scalar center = gray(h, w);
      Scalar total(0);
      for (Index scale : kSurroundScales) {
        // Differences to the center keep flat regions exactly zero.
        Scalar acc(0);
        for (Index r = h + pad - scale; r <= h + pad + scale; ++r) {
          for (Index c = w + pad - scale; c <= w + pad + scale; ++c) acc += padded(r, c) - center;
        }
        const Index side = 2 * scale + 1;
        const Scalar contrast = -acc / Scalar(side * side - 1);
        total += std::max(contrast, Scalar(0));
      }
      out(h, w) = total / Scalar(opts.normalizer);
    }
  }
  return out;
}

/// Saliency of the grey version of `image`, replicated over three channels.
Image saliency_target(const Image& image, const SaliencyOptions& opts = {});

/// Per-image saliency targets for an (N, 3, H, W) batch.
Tensor saliency_targets(const Tensor& batch, const SaliencyOptions& opts = {});

/// (G(x + delta e_hw) - G(x)) / delta over the whole output plane.
SaliencyMap saliency_directional_derivative(const GrayImage& gray, Index h, Index w,
                                            double delta = 1e-4);

}  // namespace gues
