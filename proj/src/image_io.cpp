#include "latent_depth/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

namespace latent_depth {

namespace {

using Kind = ImageFormatError::Kind;

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

struct Header {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t maxval = 0;
  std::size_t payload_offset = 0;
};

// Netpbm header: magic, then width, height, maxval separated by whitespace or
// comments, then exactly one whitespace byte before the payload.
Header parse_header(const std::string& bytes, std::string_view magic, const std::string& name) {
  if (bytes.size() < 2 || std::string_view(bytes).substr(0, 2) != magic) {
    throw ImageFormatError(Kind::kMalformedHeader, name + ": expected magic " + std::string(magic));
  }
  std::size_t pos = 2;
  const auto next_number = [&](const char* field) {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::size_t value = 0;
    std::size_t digits = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > 1'000'000) {
        throw ImageFormatError(Kind::kMalformedHeader, name + ": " + field + " too large");
      }
      ++pos;
      ++digits;
    }
    if (digits == 0) {
      throw ImageFormatError(Kind::kMalformedHeader, name + ": missing or invalid " + field);
    }
    return value;
  };
  Header h;
  h.width = next_number("width");
  h.height = next_number("height");
  h.maxval = next_number("maxval");
  if (h.width == 0 || h.height == 0) {
    throw ImageFormatError(Kind::kMalformedHeader, name + ": zero image dimension");
  }
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw ImageFormatError(Kind::kMalformedHeader, name + ": header not terminated");
  }
  h.payload_offset = pos + 1;
  return h;
}

void require_payload(const std::string& bytes, const Header& h, std::size_t sample_bytes,
                     std::size_t channels, const std::string& name) {
  const std::size_t need = h.width * h.height * channels * sample_bytes;
  if (bytes.size() - h.payload_offset < need) {
    throw ImageFormatError(Kind::kTruncatedPayload,
                           name + ": payload has " + std::to_string(bytes.size() - h.payload_offset) +
                               " bytes, expected " + std::to_string(need));
  }
}

std::string header_text(std::string_view magic, std::size_t w, std::size_t h, std::size_t maxval) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n" +
         std::to_string(maxval) + "\n";
}

}  // namespace

ImageFormatError::ImageFormatError(Kind kind, const std::string& message)
    : IoError(to_string(kind) + ": " + message), kind_(kind) {}

std::string to_string(ImageFormatError::Kind kind) {
  switch (kind) {
    case Kind::kMalformedHeader:
      return "malformed header";
    case Kind::kDimensionMismatch:
      return "dimension mismatch";
    case Kind::kTruncatedPayload:
      return "truncated payload";
  }
  return "unknown";
}

Tensor read_ppm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Header h = parse_header(bytes, "P6", path.string());
  if (h.maxval != 255) {
    throw ImageFormatError(Kind::kMalformedHeader,
                           path.string() + ": maxval must be 255, got " + std::to_string(h.maxval));
  }
  require_payload(bytes, h, 1, 3, path.string());
  const std::size_t plane = h.width * h.height;
  std::vector<Real> values(3 * plane);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.payload_offset);
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) values[c * plane + i] = p[3 * i + c] / 255.0;
  }
  return Tensor({3, h.height, h.width}, std::move(values));
}

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
  if (rgb.rank() != 3 || rgb.dim(0) != 3) {
    throw ShapeError("write_ppm: expected 3 x H x W, got " + shape_string(rgb.shape()));
  }
  const std::size_t h = rgb.dim(1), w = rgb.dim(2), plane = h * w;
  std::string bytes = header_text("P6", w, h, 255);
  const auto v = rgb.data();
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      const Real x = std::clamp(v[c * plane + i], 0.0, 1.0);
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(x * 255.0))));
    }
  }
  write_file(path, bytes);
}

Gray16 read_pgm16(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const Header h = parse_header(bytes, "P5", path.string());
  if (h.maxval < 256 || h.maxval > 65535) {
    throw ImageFormatError(Kind::kMalformedHeader, path.string() +
                                                       ": expected a 16-bit maxval, got " +
                                                       std::to_string(h.maxval));
  }
  require_payload(bytes, h, 2, 1, path.string());
  Gray16 img{h.height, h.width, std::vector<std::uint16_t>(h.width * h.height)};
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + h.payload_offset);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    img.pixels[i] = static_cast<std::uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  }
  return img;
}

void write_pgm16(const std::filesystem::path& path, const Gray16& image) {
  if (image.pixels.size() != image.width * image.height || image.pixels.empty()) {
    throw ShapeError("write_pgm16: pixel count does not match dimensions");
  }
  std::string bytes = header_text("P5", image.width, image.height, 65535);
  for (std::uint16_t v : image.pixels) {
    bytes.push_back(static_cast<char>(v >> 8));
    bytes.push_back(static_cast<char>(v & 0xFF));
  }
  write_file(path, bytes);
}

Tensor depth_from_millimetres(const Gray16& raw) {
  std::vector<Real> values(raw.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = raw.pixels[i] / 1000.0;
  return Tensor({1, raw.height, raw.width}, std::move(values));
}

Tensor mask_from_millimetres(const Gray16& raw) {
  std::vector<Real> values(raw.pixels.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = raw.pixels[i] > 0 ? 1.0 : 0.0;
  return Tensor({1, raw.height, raw.width}, std::move(values));
}

Gray16 depth_to_millimetres(const Tensor& depth, const Tensor* mask) {
  if (depth.rank() != 3 || depth.dim(0) != 1) {
    throw ShapeError("depth_to_millimetres: expected 1 x H x W, got " +
                     shape_string(depth.shape()));
  }
  if (mask != nullptr && mask->shape() != depth.shape()) {
    throw ShapeError("depth_to_millimetres: mask shape " + shape_string(mask->shape()) +
                     " does not match depth " + shape_string(depth.shape()));
  }
  Gray16 img{depth.dim(1), depth.dim(2), std::vector<std::uint16_t>(depth.numel())};
  const auto d = depth.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!std::isfinite(d[i])) throw NonFiniteError("depth_to_millimetres: non-finite depth");
    if (mask != nullptr && mask->at(i) == 0.0) continue;
    const Real mm = std::clamp(std::round(d[i] * 1000.0), 0.0, 65535.0);
    img.pixels[i] = static_cast<std::uint16_t>(mm);
  }
  return img;
}

}  // namespace latent_depth
