#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gues/tensor.hpp"

namespace gues {

/// Single-channel plane, indexed (row, col).
template <typename Scalar>
using Plane = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using GrayImage = Plane<double>;
using SaliencyMap = Plane<double>;

/// Three-channel RGB image with values in [0, 1], stored planar.
struct Image {
  std::array<Plane<double>, 3> channel;

  Image() = default;
  Image(Index height, Index width, double fill = 0.0);

  Index height() const { return channel[0].rows(); }
  Index width() const { return channel[0].cols(); }
  bool same_size(const Image& other) const {
    return height() == other.height() && width() == other.width();
  }
  friend bool operator==(const Image& a, const Image& b);
};

class ImageIoError : public Error {
 public:
  using Error::Error;
};

/// Stacks images into an (N, 3, H, W) tensor.
Tensor to_batch(std::span<const Image> images);
/// Splits an (N, 3, H, W) tensor back into images.
std::vector<Image> from_batch(const Tensor& batch);

/// 8-bit binary PPM (P6) / PGM (P5). Samples map linearly 0..255 <-> [0, 1];
/// writing rounds half up after clamping to [0, 1].
Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);
GrayImage read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// Quantizes one value exactly as the writers do.
unsigned char quantize_u8(double v);

}  // namespace gues
