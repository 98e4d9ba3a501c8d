#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latent_depth/errors.hpp"
#include "latent_depth/tensor.hpp"

namespace latent_depth {

class ImageFormatError : public IoError {
 public:
  enum class Kind { kMalformedHeader, kDimensionMismatch, kTruncatedPayload };

  ImageFormatError(Kind kind, const std::string& message);
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

std::string to_string(ImageFormatError::Kind kind);

// Raw 16-bit single-channel image, row-major.
struct Gray16 {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint16_t> pixels;
};

// Binary PPM (P6, maxval 255) as a 3 x H x W tensor of k / 255 values.
Tensor read_ppm(const std::filesystem::path& path);
// Values are clamped to [0, 1] and stored as round(v * 255).
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);

// Binary 16-bit PGM (P5, maxval 256..65535, big-endian samples).
Gray16 read_pgm16(const std::filesystem::path& path);
void write_pgm16(const std::filesystem::path& path, const Gray16& image);

// Millimetre encoding of depth maps: raw 0 marks an invalid pixel.
Tensor depth_from_millimetres(const Gray16& raw);  // 1 x H x W metres
Tensor mask_from_millimetres(const Gray16& raw);   // 1 x H x W, 1 where raw > 0
// Metres to millimetres, rounded and clamped to [0, 65535]; masked-out pixels become 0.
Gray16 depth_to_millimetres(const Tensor& depth, const Tensor* mask = nullptr);

}  // namespace latent_depth
