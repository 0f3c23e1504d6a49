#pragma once

#include "mpsynth/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mpsynth {

using Rgb = std::array<std::uint8_t, 3>;

struct ColorStop {
    double position;
    Rgb color;
};

/// Blue, cyan, green, yellow, red at 0, 1/4, 1/2, 3/4, 1.
const std::array<ColorStop, 5>& error_ramp();

inline constexpr double kDefaultMaxDisplay = 0.3;

struct RgbImage {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> pixels; ///< row-major RGB triples

    Rgb at(std::size_t r, std::size_t c) const
    {
        const std::size_t i = 3 * (r * width + c);
        return {pixels[i], pixels[i + 1], pixels[i + 2]};
    }
};

/// Piecewise-linear ramp lookup with round half up; t is clamped to [0, 1].
Rgb ramp_color(double t);

/// |y - y_hat| clamped to max_display, scaled to [0, 1] and colored.
RgbImage error_map(const Tensor& truth, const Tensor& prediction, double max_display = kDefaultMaxDisplay);

void write_png(const std::filesystem::path& path, const RgbImage& image);
RgbImage read_png(const std::filesystem::path& path);

} // namespace mpsynth
