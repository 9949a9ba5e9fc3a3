#include "gues/saliency.hpp"

namespace gues {

GrayImage to_gray(const Image& image) {
  return 0.299 * image.channel[0] + 0.587 * image.channel[1] + 0.114 * image.channel[2];
}

Image saliency_target(const Image& image, const SaliencyOptions& opts) {
  const SaliencyMap s = fine_grained_saliency(to_gray(image), opts);
  Image out;
  for (auto& c : out.channel) c = s;
  return out;
}

Tensor saliency_targets(const Tensor& batch, const SaliencyOptions& opts) {
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw ShapeError("saliency_targets: expected (N, 3, H, W), got " + shape_str(batch.shape()));
  }
  std::vector<Image> images = from_batch(batch);
  for (auto& img : images) img = saliency_target(img, opts);
  return to_batch(images);
}

SaliencyMap saliency_directional_derivative(const GrayImage& gray, Index h, Index w, double delta) {
  if (h < 0 || h >= gray.rows() || w < 0 || w >= gray.cols()) {
    throw ShapeError("saliency_directional_derivative: pixel outside image");
  }
  GrayImage moved = gray;
  moved(h, w) += delta;
  return (fine_grained_saliency(moved) - fine_grained_saliency(gray)) / delta;
}

}  // namespace gues
