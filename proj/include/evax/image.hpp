#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "evax/error.hpp"
#include "evax/rng.hpp"
#include "evax/tensor.hpp"

namespace evax {

// Single-channel image, values in [0,1] before normalization.
struct Image {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> pixels;

    Image() = default;
    Image(std::int64_t h, std::int64_t w, float fill = 0.0f);

    float &at(std::int64_t i, std::int64_t j) { return pixels[static_cast<std::size_t>(i * width + j)]; }
    float at(std::int64_t i, std::int64_t j) const { return pixels[static_cast<std::size_t>(i * width + j)]; }
    Tensor to_tensor() const;  // [H, W]
    bool operator==(const Image &) const = default;
};

inline constexpr std::int64_t kMinImageSide = 16;

class ImageError : public DataError {
   public:
    enum class Kind { io, unsupported_format, unsupported_channels, unsupported_bit_depth, truncated, too_small };
    ImageError(Kind kind, const std::string &what) : DataError(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

   private:
    Kind kind_;
};

// 8-bit grayscale PNG or binary PGM (P5, maxval 255). Byte v maps to v/255.
Image decode_image(const std::filesystem::path &path);
// Height and width from the file header without decoding pixels.
std::pair<std::int64_t, std::int64_t> image_dimensions(const std::filesystem::path &path);

// Values are clamped to [0,1] and rounded to the nearest byte.
void write_png_gray(const Image &img, const std::filesystem::path &path);
void write_png_rgb(std::int64_t height, std::int64_t width, const std::vector<std::uint8_t> &rgb,
                   const std::filesystem::path &path);
void write_pgm(const Image &img, const std::filesystem::path &path);

// Align-corners bilinear resampling; an output extent of 1 samples coordinate 0.
Image resize_bilinear(const Image &img, std::int64_t out_h, std::int64_t out_w);
// Nearest-neighbour counterpart on the same coordinate map, for label masks.
Image resize_nearest(const Image &img, std::int64_t out_h, std::int64_t out_w);

struct AugmentConfig {
    double crop_scale_min = 0.2;
    std::int64_t crop_size = 224;
    double hflip_prob = 0.5;
    double aspect_min = 3.0 / 4.0;
    double aspect_max = 4.0 / 3.0;
    double mean = 0.0;
    double std = 1.0;

    void validate() const;
};

struct CropWindow {
    std::int64_t top = 0, left = 0, height = 0, width = 0;
};

// Area fraction uniform in [crop_scale_min, 1], aspect uniform in
// [aspect_min, aspect_max]; after 10 rejected draws falls back to the largest
// centered window whose aspect lies in range.
CropWindow sample_crop(std::int64_t height, std::int64_t width, CounterRng &rng, const AugmentConfig &cfg);
Image crop(const Image &img, const CropWindow &w);
Image random_resized_crop(const Image &img, CounterRng &rng, const AugmentConfig &cfg);
Image hflip(const Image &img, CounterRng &rng, double p);
Image mirror(const Image &img);
Tensor normalize(const Image &img, double mean, double std);

}  // namespace evax
