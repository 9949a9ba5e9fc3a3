#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gues/image.hpp"

namespace gues {

enum class DomainTag { kSource, kTarget };

std::string to_string(DomainTag tag);
DomainTag domain_from_string(const std::string& s);

struct Lesion {
  double cy = 0.0, cx = 0.0;  // center (row, col)
  double ry = 0.0, rx = 0.0;  // axis-aligned half extents of the bounding box
  bool bright = true;         // exudate (bright) or hemorrhage (dark)
};

struct RetinaToySample {
  Image image;
  int grade = 0;
  DomainTag domain = DomainTag::kSource;
  std::vector<Lesion> lesions;
};

/// Default five-grade class proportions (mirrors a public DR grading set).
inline constexpr std::array<double, 5> kDefaultGradeDistribution{0.49, 0.10, 0.27, 0.05, 0.09};
inline constexpr Index kRetinaSize = 64;

/// 0 -> 0, 1-2 -> 1, 3-5 -> 2, 6-8 -> 3, 9+ -> 4.
int grade_for_lesion_count(int count);

/// Renders one fundus-like image with exactly `lesion_count` lesions.
RetinaToySample render_retinatoy(std::uint64_t seed, int lesion_count, Index size = kRetinaSize);

/// n samples whose grade counts follow `distribution` (largest-remainder
/// quotas, shuffled). Every pixel is a function of (seed, n, distribution).
std::vector<RetinaToySample> generate_retinatoy(std::uint64_t seed, Index n,
                                                std::span<const double> distribution,
                                                DomainTag domain = DomainTag::kSource,
                                                Index size = kRetinaSize);

struct ShiftParams {
  double brightness_delta = 0.0;
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  double noise_sigma = 0.0;
  double gamma = 1.0;
  int blur_radius = 0;

  static ShiftParams identity() { return {}; }
  static ShiftParams default_target() { return {-0.08, {1.05, 0.95, 0.90}, 0.02, 1.1, 1}; }
  void validate() const;
};

/// clamp01((blur(image, r) * tint + brightness)^gamma + N(0, sigma^2)).
/// Box blur with replicated edges; negative values are floored at 0 before
/// the power.
Image apply_shift(const Image& image, const ShiftParams& params, std::uint64_t seed);

/// Labeled image set in memory.
struct Dataset {
  std::vector<Image> images;
  std::vector<int> grades;
};

Dataset to_dataset(const std::vector<RetinaToySample>& samples);

struct ManifestRow {
  std::string path;  // relative to the manifest directory
  int grade = 0;
  DomainTag domain = DomainTag::kSource;
};

/// Writes P6 files and a manifest.csv (path,grade,domain_tag) under `dir`.
void write_manifest(const std::filesystem::path& dir, const std::vector<RetinaToySample>& source,
                    const std::vector<RetinaToySample>& target);
std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest);
/// Loads every manifest row with the given domain.
Dataset load_domain(const std::filesystem::path& manifest, DomainTag domain);

/// Deterministic per-item seed derived from a base seed and an index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace gues
