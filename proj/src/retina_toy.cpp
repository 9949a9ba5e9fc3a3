#include "gues/retina_toy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

namespace gues {

namespace {

constexpr std::array<double, 3> kFundus{0.60, 0.30, 0.14};
constexpr std::array<double, 3> kExudate{0.96, 0.86, 0.42};
constexpr std::array<double, 3> kHemorrhage{0.20, 0.05, 0.03};
constexpr int kSupersample = 4;

struct Shape2 {
  double cy, cx, a, b, angle;  // ellipse semi-axes a (along angle) and b
  bool bright;

  bool contains(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = dx * c + dy * s, v = -dx * s + dy * c;
    return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
  }
};

// Fraction of a pixel covered by `inside`, estimated on a regular subgrid.
template <typename Inside>
double coverage(Index row, Index col, Inside inside) {
  int hits = 0;
  for (int i = 0; i < kSupersample; ++i) {
    for (int j = 0; j < kSupersample; ++j) {
      const double y = static_cast<double>(row) + (i + 0.5) / kSupersample;
      const double x = static_cast<double>(col) + (j + 0.5) / kSupersample;
      hits += inside(y, x) ? 1 : 0;
    }
  }
  return static_cast<double>(hits) / (kSupersample * kSupersample);
}

}  // namespace

std::string to_string(DomainTag tag) { return tag == DomainTag::kSource ? "source" : "target"; }

DomainTag domain_from_string(const std::string& s) {
  if (s == "source") return DomainTag::kSource;
  if (s == "target") return DomainTag::kTarget;
  throw Error("unknown domain tag '" + s + "'");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + index + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

int grade_for_lesion_count(int count) {
  if (count < 0) throw Error("lesion count must be non-negative");
  if (count == 0) return 0;
  if (count <= 2) return 1;
  if (count <= 5) return 2;
  if (count <= 8) return 3;
  return 4;
}

RetinaToySample render_retinatoy(std::uint64_t seed, int lesion_count, Index size) {
  if (lesion_count < 0) throw Error("lesion count must be non-negative");
  Rng rng(seed);
  const double center = static_cast<double>(size) / 2.0;
  const double radius = 0.46 * static_cast<double>(size);
  const double shade = rng.uniform(0.85, 1.15);

  // Lesions: well separated, inside the disc.
  std::vector<Shape2> shapes;
  const double placement = radius - 6.0;
  const double min_gap = 8.5;
  for (int i = 0; i < lesion_count; ++i) {
    const bool bright = rng.uniform() < 0.5;
    Shape2 s{};
    for (int attempt = 0; attempt < 1000; ++attempt) {
      const double r = placement * std::sqrt(rng.uniform());
      const double t = 2.0 * std::numbers::pi * rng.uniform();
      s.cy = center + r * std::sin(t);
      s.cx = center + r * std::cos(t);
      bool clear = true;
      for (const auto& o : shapes) {
        if (std::hypot(o.cy - s.cy, o.cx - s.cx) < min_gap) {
          clear = false;
          break;
        }
      }
      if (clear) break;
    }
    if (bright) {
      s.a = 3.6;
      s.b = 2.6;
      s.angle = std::numbers::pi * rng.uniform();
    } else {
      s.a = s.b = 3.1;
      s.angle = 0.0;
    }
    s.bright = bright;
    shapes.push_back(s);
  }

  RetinaToySample sample;
  sample.grade = grade_for_lesion_count(lesion_count);
  sample.image = Image(size, size);
  for (Index r = 0; r < size; ++r) {
    for (Index c = 0; c < size; ++c) {
      const double disc = coverage(r, c, [&](double y, double x) {
        return std::hypot(y - center, x - center) <= radius;
      });
      const double dist = std::hypot(r + 0.5 - center, c + 0.5 - center) / radius;
      const double falloff = 1.0 - 0.25 * std::min(1.0, dist * dist);
      const double texture = 0.006 * rng.normal();
      std::array<double, 3> px{};
      for (int ch = 0; ch < 3; ++ch) px[ch] = disc * (kFundus[ch] * shade * falloff + texture);
      for (const auto& s : shapes) {
        if (std::abs(r + 0.5 - s.cy) > s.a + 1.5 || std::abs(c + 0.5 - s.cx) > s.a + 1.5) continue;
        const double cov = coverage(r, c, [&](double y, double x) { return s.contains(y, x); });
        if (cov == 0.0) continue;
        const auto& color = s.bright ? kExudate : kHemorrhage;
        for (int ch = 0; ch < 3; ++ch) px[ch] = (1.0 - cov) * px[ch] + cov * color[ch];
      }
      for (int ch = 0; ch < 3; ++ch) sample.image.channel[ch](r, c) = std::clamp(px[ch], 0.0, 1.0);
    }
  }
  for (const auto& s : shapes) {
    const double extent = std::max(s.a, s.b);
    sample.lesions.push_back({s.cy, s.cx, extent, extent, s.bright});
  }
  return sample;
}

std::vector<RetinaToySample> generate_retinatoy(std::uint64_t seed, Index n,
                                                std::span<const double> distribution,
                                                DomainTag domain, Index size) {
  if (n < 1) throw Error("generate_retinatoy: n must be at least 1");
  if (distribution.size() != 5) throw Error("generate_retinatoy: distribution needs 5 entries");
  double total = 0.0;
  for (double p : distribution) {
    if (p < 0.0) throw Error("generate_retinatoy: negative class probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("generate_retinatoy: distribution must sum to 1");

  // Largest-remainder quotas.
  std::array<Index, 5> quota{};
  std::array<double, 5> remainder{};
  Index assigned = 0;
  for (std::size_t g = 0; g < 5; ++g) {
    const double exact = distribution[g] * static_cast<double>(n);
    quota[g] = static_cast<Index>(std::floor(exact));
    remainder[g] = exact - static_cast<double>(quota[g]);
    assigned += quota[g];
  }
  std::array<std::size_t, 5> by_remainder{0, 1, 2, 3, 4};
  std::stable_sort(by_remainder.begin(), by_remainder.end(),
                   [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t k = 0; assigned < n; ++k, ++assigned) ++quota[by_remainder[k % 5]];

  std::vector<int> grades;
  for (int g = 0; g < 5; ++g) grades.insert(grades.end(), static_cast<std::size_t>(quota[g]), g);
  Rng rng(seed);
  rng.shuffle(grades);

  static constexpr std::array<std::array<int, 2>, 5> kCountRange{{{0, 0}, {1, 2}, {3, 5}, {6, 8}, {9, 12}}};
  std::vector<RetinaToySample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    const auto& range = kCountRange[static_cast<std::size_t>(grades[static_cast<std::size_t>(i)])];
    Rng pick(mix_seed(seed, 2 * static_cast<std::uint64_t>(i)));
    const int count = range[0] + static_cast<int>(pick.below(static_cast<std::uint64_t>(range[1] - range[0] + 1)));
    RetinaToySample s = render_retinatoy(mix_seed(seed, 2 * static_cast<std::uint64_t>(i) + 1), count, size);
    s.domain = domain;
    out.push_back(std::move(s));
  }
  return out;
}

void ShiftParams::validate() const {
  if (noise_sigma < 0.0) throw Error("shift: noise_sigma must be non-negative");
  if (!(gamma > 0.0)) throw Error("shift: gamma must be positive");
  if (blur_radius < 0) throw Error("shift: blur_radius must be non-negative");
}

Image apply_shift(const Image& image, const ShiftParams& params, std::uint64_t seed) {
  params.validate();
  const Index h = image.height(), w = image.width();
  Image out = image;
  if (params.blur_radius > 0) {
    const Index r = params.blur_radius;
    const double norm = static_cast<double>((2 * r + 1) * (2 * r + 1));
    for (int ch = 0; ch < 3; ++ch) {
      const auto& src = image.channel[ch];
      auto& dst = out.channel[ch];
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) {
          double acc = 0.0;
          for (Index dy = -r; dy <= r; ++dy) {
            const Index yy = std::clamp<Index>(y + dy, 0, h - 1);
            for (Index dx = -r; dx <= r; ++dx) acc += src(yy, std::clamp<Index>(x + dx, 0, w - 1));
          }
          dst(y, x) = acc / norm;
        }
      }
    }
  }
  Rng rng(seed);
  for (int ch = 0; ch < 3; ++ch) {
    auto& plane = out.channel[ch];
    if (params.tint[ch] != 1.0) plane *= params.tint[ch];
    if (params.brightness_delta != 0.0) plane += params.brightness_delta;
    if (params.gamma != 1.0) plane = plane.cwiseMax(0.0).pow(params.gamma);
  }
  if (params.noise_sigma > 0.0) {
    for (int ch = 0; ch < 3; ++ch) {
      auto& plane = out.channel[ch];
      for (Index y = 0; y < h; ++y) {
        for (Index x = 0; x < w; ++x) plane(y, x) += params.noise_sigma * rng.normal();
      }
    }
  }
  for (auto& plane : out.channel) plane = plane.cwiseMax(0.0).cwiseMin(1.0);
  return out;
}

Dataset to_dataset(const std::vector<RetinaToySample>& samples) {
  Dataset d;
  d.images.reserve(samples.size());
  for (const auto& s : samples) {
    d.images.push_back(s.image);
    d.grades.push_back(s.grade);
  }
  return d;
}

void write_manifest(const std::filesystem::path& dir, const std::vector<RetinaToySample>& source,
                    const std::vector<RetinaToySample>& target) {
  std::filesystem::create_directories(dir / "source");
  std::filesystem::create_directories(dir / "target");
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw ImageIoError((dir / "manifest.csv").string() + ": cannot open for writing");
  manifest << "path,grade,domain_tag\n";
  auto emit = [&](const std::vector<RetinaToySample>& samples, const char* sub) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      std::ostringstream name;
      name << sub << '/' << std::setw(5) << std::setfill('0') << i << ".ppm";
      write_ppm(dir / name.str(), samples[i].image);
      manifest << name.str() << ',' << samples[i].grade << ',' << to_string(samples[i].domain) << '\n';
    }
  };
  emit(source, "source");
  emit(target, "target");
}

std::vector<ManifestRow> read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ImageIoError(manifest.string() + ": cannot open manifest");
  std::string line;
  if (!std::getline(in, line) || line != "path,grade,domain_tag") {
    throw ImageIoError(manifest.string() + ": missing manifest header");
  }
  std::vector<ManifestRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    std::string path, grade, domain;
    if (!std::getline(fields, path, ',') || !std::getline(fields, grade, ',') ||
        !std::getline(fields, domain)) {
      throw ImageIoError(manifest.string() + ": malformed row '" + line + "'");
    }
    rows.push_back({path, std::stoi(grade), domain_from_string(domain)});
  }
  return rows;
}

Dataset load_domain(const std::filesystem::path& manifest, DomainTag domain) {
  const auto dir = manifest.parent_path();
  Dataset d;
  for (const auto& row : read_manifest(manifest)) {
    if (row.domain != domain) continue;
    d.images.push_back(read_ppm(dir / row.path));
    d.grades.push_back(row.grade);
  }
  return d;
}

}  // namespace gues
