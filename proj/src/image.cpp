#include "gues/image.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace gues {

Image::Image(Index height, Index width, double fill) {
  for (auto& c : channel) c = Plane<double>::Constant(height, width, fill);
}

bool operator==(const Image& a, const Image& b) {
  if (!a.same_size(b)) return false;
  for (int c = 0; c < 3; ++c) {
    if ((a.channel[c] != b.channel[c]).any()) return false;
  }
  return true;
}

Tensor to_batch(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("to_batch: empty image list");
  const Index h = images.front().height(), w = images.front().width();
  const Index plane = h * w;
  Buffer data(static_cast<Index>(images.size()) * 3 * plane);
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height() != h || images[i].width() != w) {
      throw ShapeError("to_batch: image " + std::to_string(i) + " has a different size");
    }
    for (int c = 0; c < 3; ++c) {
      data.segment((static_cast<Index>(i) * 3 + c) * plane, plane) =
          Eigen::Map<const Buffer>(images[i].channel[c].data(), plane);
    }
  }
  return Tensor({static_cast<Index>(images.size()), 3, h, w}, std::move(data));
}

std::vector<Image> from_batch(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw ShapeError("from_batch: expected (N, 3, H, W), got " + shape_str(batch.shape()));
  }
  const Index n = batch.dim(0), h = batch.dim(2), w = batch.dim(3), plane = h * w;
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Image img(h, w);
    for (int c = 0; c < 3; ++c) {
      Eigen::Map<Buffer>(img.channel[c].data(), plane) = batch.data().segment((i * 3 + c) * plane, plane);
    }
    out.push_back(std::move(img));
  }
  return out;
}

unsigned char quantize_u8(double v) {
  const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return static_cast<unsigned char>(std::floor(clamped * 255.0 + 0.5));
}

namespace {

struct PnmHeader {
  std::string magic;
  Index width = 0, height = 0;
};

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in, const std::filesystem::path& path) {
  std::string token;
  char ch;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!token.empty()) return token;
      continue;
    }
    token.push_back(ch);
  }
  if (token.empty()) throw ImageIoError(path.string() + ": malformed header (truncated)");
  return token;
}

Index parse_positive(const std::string& token, const std::filesystem::path& path, const char* what) {
  Index v = 0;
  try {
    std::size_t used = 0;
    v = std::stoll(token, &used);
    if (used != token.size()) throw std::invalid_argument(token);
  } catch (const std::exception&) {
    throw ImageIoError(path.string() + ": malformed header, bad " + what + " '" + token + "'");
  }
  if (v <= 0) throw ImageIoError(path.string() + ": malformed header, " + what + " must be positive");
  return v;
}

std::vector<unsigned char> read_pnm(const std::filesystem::path& path, const std::string& magic,
                                    int channels, PnmHeader& header) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError(path.string() + ": cannot open for reading");
  header.magic = next_token(in, path);
  if (header.magic != magic) {
    throw ImageIoError(path.string() + ": malformed header, expected " + magic + " got '" +
                       header.magic + "'");
  }
  header.width = parse_positive(next_token(in, path), path, "width");
  header.height = parse_positive(next_token(in, path), path, "height");
  const Index maxval = parse_positive(next_token(in, path), path, "maxval");
  if (maxval != 255) {
    throw ImageIoError(path.string() + ": unsupported maxval " + std::to_string(maxval));
  }
  const auto count = static_cast<std::size_t>(header.width * header.height * channels);
  std::vector<unsigned char> bytes(count);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count) {
    throw ImageIoError(path.string() + ": truncated pixel data");
  }
  return bytes;
}

void write_bytes(const std::filesystem::path& path, const std::string& header,
                 const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError(path.string() + ": cannot open for writing");
  out << header;
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError(path.string() + ": write failed");
}

}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  PnmHeader header;
  const auto bytes = read_pnm(path, "P6", 3, header);
  Image img(header.height, header.width);
  std::size_t k = 0;
  for (Index r = 0; r < header.height; ++r) {
    for (Index c = 0; c < header.width; ++c) {
      for (int ch = 0; ch < 3; ++ch) img.channel[ch](r, c) = bytes[k++] / 255.0;
    }
  }
  return img;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(image.height() * image.width() * 3));
  for (Index r = 0; r < image.height(); ++r) {
    for (Index c = 0; c < image.width(); ++c) {
      for (int ch = 0; ch < 3; ++ch) bytes.push_back(quantize_u8(image.channel[ch](r, c)));
    }
  }
  std::ostringstream header;
  header << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  write_bytes(path, header.str(), bytes);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  PnmHeader header;
  const auto bytes = read_pnm(path, "P5", 1, header);
  GrayImage img(header.height, header.width);
  std::size_t k = 0;
  for (Index r = 0; r < header.height; ++r) {
    for (Index c = 0; c < header.width; ++c) img(r, c) = bytes[k++] / 255.0;
  }
  return img;
}

void write_pgm(const std::filesystem::path& path, const GrayImage& image) {
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(image.size()));
  for (Index r = 0; r < image.rows(); ++r) {
    for (Index c = 0; c < image.cols(); ++c) bytes.push_back(quantize_u8(image(r, c)));
  }
  std::ostringstream header;
  header << "P5\n" << image.cols() << ' ' << image.rows() << "\n255\n";
  write_bytes(path, header.str(), bytes);
}

}  // namespace gues
