#include "evax/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace evax {

namespace {

using Kind = ImageError::Kind;

[[noreturn]] void fail(Kind kind, const std::filesystem::path &path, const std::string &msg) {
    throw ImageError(kind, path.string() + ": " + msg);
}

std::string read_file(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(Kind::io, path, "cannot open image");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const unsigned char *p) {
    return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) | p[3];
}

bool is_png(const std::string &bytes) { return bytes.size() >= 8 && png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) == 0; }
bool is_pgm(const std::string &bytes) { return bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '5'; }

struct PngHeader {
    std::int64_t width = 0, height = 0;
    int bit_depth = 0, color_type = 0;
};

// Validates the chunk structure (so truncation is reported as such rather than
// as a generic decoder failure) and returns the IHDR fields.
PngHeader scan_png(const std::string &bytes, const std::filesystem::path &path, bool require_complete) {
    const auto *p = reinterpret_cast<const unsigned char *>(bytes.data());
    const std::size_t n = bytes.size();
    std::size_t pos = 8;
    PngHeader h;
    bool have_ihdr = false;
    for (;;) {
        if (pos + 8 > n) {
            if (!require_complete && have_ihdr) return h;
            fail(Kind::truncated, path, "PNG ends inside a chunk header");
        }
        const std::uint32_t len = be32(p + pos);
        const std::string type(bytes.data() + pos + 4, 4);
        if (type == "IHDR") {
            if (pos + 8 + 13 > n) fail(Kind::truncated, path, "PNG header chunk incomplete");
            h.width = be32(p + pos + 8);
            h.height = be32(p + pos + 12);
            h.bit_depth = p[pos + 16];
            h.color_type = p[pos + 17];
            have_ihdr = true;
            if (!require_complete) return h;
        }
        if (static_cast<std::uint64_t>(pos) + 12 + len > n) fail(Kind::truncated, path, "PNG chunk " + type + " runs past end of file");
        pos += 12 + static_cast<std::size_t>(len);
        if (type == "IEND") break;
    }
    if (!have_ihdr) fail(Kind::unsupported_format, path, "PNG without IHDR");
    return h;
}

void check_png_kind(const PngHeader &h, const std::filesystem::path &path) {
    if (h.color_type != 0) {
        const char *what = h.color_type == 2   ? "RGB"
                           : h.color_type == 3 ? "palette"
                           : h.color_type == 4 ? "gray+alpha"
                           : h.color_type == 6 ? "RGBA"
                                               : "unknown";
        fail(Kind::unsupported_channels, path, std::string("unsupported channels: ") + what + " PNG, expected 1-channel grayscale");
    }
    if (h.bit_depth != 8) {
        fail(Kind::unsupported_bit_depth, path, "unsupported bit depth " + std::to_string(h.bit_depth) + ", expected 8");
    }
}

struct PgmHeader {
    std::int64_t width = 0, height = 0, maxval = 0;
    std::size_t data_offset = 0;
};

PgmHeader parse_pgm_header(const std::string &bytes, const std::filesystem::path &path) {
    PgmHeader h;
    std::size_t pos = 2;
    std::int64_t fields[3];
    for (auto &f : fields) {
        for (;;) {
            while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
            if (pos < bytes.size() && bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
                continue;
            }
            break;
        }
        if (pos >= bytes.size()) fail(Kind::truncated, path, "PGM header incomplete");
        if (!std::isdigit(static_cast<unsigned char>(bytes[pos]))) fail(Kind::unsupported_format, path, "malformed PGM header");
        std::int64_t v = 0;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + (bytes[pos] - '0');
            if (v > (1 << 30)) fail(Kind::unsupported_format, path, "PGM header value too large");
            ++pos;
        }
        f = v;
    }
    if (pos >= bytes.size()) fail(Kind::truncated, path, "PGM header incomplete");
    h.width = fields[0];
    h.height = fields[1];
    h.maxval = fields[2];
    h.data_offset = pos + 1;  // exactly one whitespace byte before the raster
    return h;
}

void check_size(std::int64_t h, std::int64_t w, const std::filesystem::path &path) {
    if (h < kMinImageSide || w < kMinImageSide) {
        fail(Kind::too_small, path, "image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than " +
                                        std::to_string(kMinImageSide) + "x" + std::to_string(kMinImageSide));
    }
}

struct Lerp {
    std::int64_t i0, i1;
    double t;
};

std::vector<Lerp> lerps(std::int64_t in_n, std::int64_t out_n) {
    std::vector<Lerp> out(static_cast<std::size_t>(out_n));
    for (std::int64_t i = 0; i < out_n; ++i) {
        const double src = out_n == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
        auto i0 = std::min<std::int64_t>(static_cast<std::int64_t>(std::floor(src)), in_n - 1);
        const auto i1 = std::min<std::int64_t>(i0 + 1, in_n - 1);
        out[static_cast<std::size_t>(i)] = {i0, i1, src - static_cast<double>(i0)};
    }
    return out;
}

}  // namespace

Image::Image(std::int64_t h, std::int64_t w, float fill)
    : height(h), width(w), pixels(static_cast<std::size_t>(h * w), fill) {
    if (h < 1 || w < 1) throw ShapeError("Image: extents must be positive, got " + std::to_string(h) + "x" + std::to_string(w));
}

Tensor Image::to_tensor() const { return Tensor(Shape{height, width}, pixels); }

Image decode_image(const std::filesystem::path &path) {
    const std::string bytes = read_file(path);
    Image img;
    if (is_png(bytes)) {
        const auto h = scan_png(bytes, path, true);
        check_png_kind(h, path);
        check_size(h.height, h.width, path);
        png_image pi;
        std::memset(&pi, 0, sizeof pi);
        pi.version = PNG_IMAGE_VERSION;
        if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size())) {
            fail(Kind::unsupported_format, path, std::string("PNG decode failed: ") + pi.message);
        }
        pi.format = PNG_FORMAT_GRAY;
        std::vector<std::uint8_t> raster(PNG_IMAGE_SIZE(pi));
        if (!png_image_finish_read(&pi, nullptr, raster.data(), 0, nullptr)) {
            const std::string msg = pi.message;
            png_image_free(&pi);
            fail(msg.find("EOF") != std::string::npos || msg.find("ended") != std::string::npos ? Kind::truncated
                                                                                                : Kind::unsupported_format,
                 path, "PNG decode failed: " + msg);
        }
        img = Image(pi.height, pi.width);
        for (std::size_t i = 0; i < raster.size(); ++i) img.pixels[i] = static_cast<float>(raster[i]) / 255.0f;
        return img;
    }
    if (is_pgm(bytes)) {
        const auto h = parse_pgm_header(bytes, path);
        if (h.maxval != 255) fail(Kind::unsupported_bit_depth, path, "unsupported bit depth: PGM maxval " + std::to_string(h.maxval));
        check_size(h.height, h.width, path);
        const auto need = static_cast<std::size_t>(h.width * h.height);
        if (bytes.size() < h.data_offset + need) fail(Kind::truncated, path, "PGM raster shorter than header declares");
        img = Image(h.height, h.width);
        for (std::size_t i = 0; i < need; ++i) {
            img.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[h.data_offset + i])) / 255.0f;
        }
        return img;
    }
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '1' && bytes[1] <= '7') {
        fail(Kind::unsupported_format, path, "only binary PGM (P5) is supported");
    }
    fail(Kind::unsupported_format, path, "unrecognized image format");
}

std::pair<std::int64_t, std::int64_t> image_dimensions(const std::filesystem::path &path) {
    const std::string bytes = read_file(path);
    if (is_png(bytes)) {
        const auto h = scan_png(bytes, path, false);
        return {h.height, h.width};
    }
    if (is_pgm(bytes)) {
        const auto h = parse_pgm_header(bytes, path);
        return {h.height, h.width};
    }
    fail(Kind::unsupported_format, path, "unrecognized image format");
}

void write_png_gray(const Image &img, const std::filesystem::path &path) {
    std::vector<std::uint8_t> raster(img.pixels.size());
    for (std::size_t i = 0; i < raster.size(); ++i) {
        raster[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    }
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, raster.data(), 0, nullptr)) {
        fail(Kind::io, path, std::string("cannot write PNG: ") + pi.message);
    }
}

void write_png_rgb(std::int64_t height, std::int64_t width, const std::vector<std::uint8_t> &rgb,
                   const std::filesystem::path &path) {
    if (rgb.size() != static_cast<std::size_t>(height * width * 3)) throw ShapeError("write_png_rgb: buffer size mismatch");
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(width);
    pi.height = static_cast<png_uint_32>(height);
    pi.format = PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, rgb.data(), 0, nullptr)) {
        fail(Kind::io, path, std::string("cannot write PNG: ") + pi.message);
    }
}

void write_pgm(const Image &img, const std::filesystem::path &path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(Kind::io, path, "cannot open for writing");
    out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
    for (float v : img.pixels) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    if (!out) fail(Kind::io, path, "write failed");
}

Image resize_bilinear(const Image &img, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output extents must be >= 1");
    if (out_h == img.height && out_w == img.width) return img;
    const auto ry = lerps(img.height, out_h);
    const auto rx = lerps(img.width, out_w);
    Image out(out_h, out_w);
    for (std::int64_t i = 0; i < out_h; ++i) {
        const auto &ly = ry[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < out_w; ++j) {
            const auto &lx = rx[static_cast<std::size_t>(j)];
            const double top = (1.0 - lx.t) * img.at(ly.i0, lx.i0) + lx.t * img.at(ly.i0, lx.i1);
            const double bot = (1.0 - lx.t) * img.at(ly.i1, lx.i0) + lx.t * img.at(ly.i1, lx.i1);
            out.at(i, j) = static_cast<float>((1.0 - ly.t) * top + ly.t * bot);
        }
    }
    return out;
}

Image resize_nearest(const Image &img, std::int64_t out_h, std::int64_t out_w) {
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_nearest: output extents must be >= 1");
    const auto ry = lerps(img.height, out_h);
    const auto rx = lerps(img.width, out_w);
    Image out(out_h, out_w);
    for (std::int64_t i = 0; i < out_h; ++i) {
        const auto &ly = ry[static_cast<std::size_t>(i)];
        const auto si = ly.t < 0.5 ? ly.i0 : ly.i1;
        for (std::int64_t j = 0; j < out_w; ++j) {
            const auto &lx = rx[static_cast<std::size_t>(j)];
            out.at(i, j) = img.at(si, lx.t < 0.5 ? lx.i0 : lx.i1);
        }
    }
    return out;
}

void AugmentConfig::validate() const {
    if (!(crop_scale_min > 0 && crop_scale_min <= 1)) throw ConfigError("crop_scale_min", "crop_scale_min must be in (0, 1]");
    if (crop_size < 1) throw ConfigError("crop_size", "crop_size must be positive");
    if (!(hflip_prob >= 0 && hflip_prob <= 1)) throw ConfigError("hflip_prob", "hflip_prob must be in [0, 1]");
    if (!(aspect_min > 0 && aspect_min <= aspect_max)) throw ConfigError("aspect", "aspect range must satisfy 0 < min <= max");
    if (!(std > 0)) throw ConfigError("std", "normalization std must be positive");
}

CropWindow sample_crop(std::int64_t height, std::int64_t width, CounterRng &rng, const AugmentConfig &cfg) {
    const double area = static_cast<double>(height * width);
    for (int attempt = 0; attempt < 10; ++attempt) {
        const double target = area * (cfg.crop_scale_min + (1.0 - cfg.crop_scale_min) * rng.uniform_f64());
        const double aspect = cfg.aspect_min + (cfg.aspect_max - cfg.aspect_min) * rng.uniform_f64();
        const auto w = static_cast<std::int64_t>(std::lround(std::sqrt(target * aspect)));
        const auto h = static_cast<std::int64_t>(std::lround(std::sqrt(target / aspect)));
        if (w > 0 && h > 0 && w <= width && h <= height) {
            const auto top = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(height - h + 1)));
            const auto left = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(width - w + 1)));
            return {top, left, h, w};
        }
    }
    const double ratio = static_cast<double>(width) / static_cast<double>(height);
    std::int64_t w = width, h = height;
    if (ratio < cfg.aspect_min) {
        h = std::lround(static_cast<double>(w) / cfg.aspect_min);
    } else if (ratio > cfg.aspect_max) {
        w = std::lround(static_cast<double>(h) * cfg.aspect_max);
    }
    return {(height - h) / 2, (width - w) / 2, h, w};
}

Image crop(const Image &img, const CropWindow &w) {
    if (w.top < 0 || w.left < 0 || w.height < 1 || w.width < 1 || w.top + w.height > img.height ||
        w.left + w.width > img.width) {
        throw ShapeError("crop: window outside image");
    }
    Image out(w.height, w.width);
    for (std::int64_t i = 0; i < w.height; ++i) {
        std::copy_n(img.pixels.begin() + (w.top + i) * img.width + w.left, w.width, out.pixels.begin() + i * w.width);
    }
    return out;
}

Image random_resized_crop(const Image &img, CounterRng &rng, const AugmentConfig &cfg) {
    const auto win = sample_crop(img.height, img.width, rng, cfg);
    return resize_bilinear(crop(img, win), cfg.crop_size, cfg.crop_size);
}

Image mirror(const Image &img) {
    Image out = img;
    for (std::int64_t i = 0; i < img.height; ++i) {
        std::reverse(out.pixels.begin() + i * img.width, out.pixels.begin() + (i + 1) * img.width);
    }
    return out;
}

Image hflip(const Image &img, CounterRng &rng, double p) {
    if (!(p >= 0 && p <= 1)) throw ConfigError("hflip_prob", "flip probability must be in [0, 1]");
    return rng.uniform_f64() < p ? mirror(img) : img;
}

Tensor normalize(const Image &img, double mean, double std) {
    if (!(std > 0)) throw ConfigError("std", "normalization std must be positive");
    Tensor t(Shape{img.height, img.width});
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
        t[static_cast<std::int64_t>(i)] = static_cast<float>((img.pixels[i] - mean) / std);
    }
    return t;
}

}  // namespace evax
