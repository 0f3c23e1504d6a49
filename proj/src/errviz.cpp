#include "mpsynth/errviz.hpp"

#include "mpsynth/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace mpsynth {

const std::array<ColorStop, 5>& error_ramp()
{
    static const std::array<ColorStop, 5> ramp{{
        {0.00, {0, 0, 255}},
        {0.25, {0, 255, 255}},
        {0.50, {0, 255, 0}},
        {0.75, {255, 255, 0}},
        {1.00, {255, 0, 0}},
    }};
    return ramp;
}

Rgb ramp_color(double t)
{
    const auto& ramp = error_ramp();
    t = std::clamp(t, 0.0, 1.0);
    std::size_t seg = 0;
    while (seg + 2 < ramp.size() && t > ramp[seg + 1].position)
        ++seg;
    const ColorStop& a = ramp[seg];
    const ColorStop& b = ramp[seg + 1];
    const double f = (t - a.position) / (b.position - a.position);
    Rgb out{};
    for (std::size_t c = 0; c < 3; ++c) {
        const double v = a.color[c] + f * (static_cast<double>(b.color[c]) - a.color[c]);
        out[c] = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
    }
    return out;
}

RgbImage error_map(const Tensor& truth, const Tensor& prediction, double max_display)
{
    if (!(max_display > 0) || !std::isfinite(max_display))
        throw ConfigError("error map max_display must be positive, got " + std::to_string(max_display));
    if (truth.shape() != prediction.shape())
        throw ContractError("error_map: shape " + shape_string(truth.shape()) + " vs " +
                            shape_string(prediction.shape()));
    const Shape& s = truth.shape();
    if (s.size() < 2)
        throw ContractError("error_map: expected an image, got shape " + shape_string(s));
    for (std::size_t i = 0; i + 2 < s.size(); ++i)
        if (s[i] != 1)
            throw ContractError("error_map: expected a single plane, got shape " + shape_string(s));
    RgbImage img;
    img.height = s[s.size() - 2];
    img.width = s[s.size() - 1];
    img.pixels.reserve(3 * truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double d = std::abs(static_cast<double>(truth[i]) - static_cast<double>(prediction[i]));
        const Rgb c = ramp_color(std::min(d, max_display) / max_display);
        img.pixels.insert(img.pixels.end(), c.begin(), c.end());
    }
    return img;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { std::fclose(f); }
};

[[noreturn]] void png_fail(png_structp png, png_const_charp msg)
{
    auto* text = static_cast<std::string*>(png_get_error_ptr(png));
    if (text)
        *text = msg;
    png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

} // namespace

void write_png(const std::filesystem::path& path, const RgbImage& image)
{
    if (image.height == 0 || image.width == 0)
        throw ContractError("write_png: zero-sized image");
    if (image.pixels.size() != 3 * image.height * image.width)
        throw ContractError("write_png: pixel buffer does not match " + std::to_string(image.height) + "x" +
                            std::to_string(image.width));
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "wb"));
    if (!file)
        throw IoError("cannot open '" + path.string() + "' for writing");

    std::string message;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("cannot allocate PNG writer for '" + path.string() + "'");
    }
    std::vector<png_bytep> rows(image.height);
    for (std::size_t r = 0; r < image.height; ++r)
        rows[r] = const_cast<png_bytep>(image.pixels.data() + 3 * r * image.width);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("PNG write failed for '" + path.string() + "': " + message);
    }
    png_init_io(png, file.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    if (std::fflush(file.get()) != 0)
        throw IoError("cannot write '" + path.string() + "'");
}

RgbImage read_png(const std::filesystem::path& path)
{
    std::unique_ptr<std::FILE, FileCloser> file(std::fopen(path.c_str(), "rb"));
    if (!file)
        throw IoError("cannot open '" + path.string() + "'");
    unsigned char sig[8];
    if (std::fread(sig, 1, 8, file.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
        throw FormatError("signature", "'" + path.string() + "' is not a PNG file");

    std::string message;
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_fail, png_warn);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("cannot allocate PNG reader for '" + path.string() + "'");
    }
    RgbImage img;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("payload", "PNG decode failed for '" + path.string() + "': " + message);
    }
    png_init_io(png, file.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    img.width = png_get_image_width(png, info);
    img.height = png_get_image_height(png, info);
    img.pixels.assign(3 * img.width * img.height, 0);
    rows.resize(img.height);
    for (std::size_t r = 0; r < img.height; ++r)
        rows[r] = img.pixels.data() + 3 * r * img.width;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace mpsynth
