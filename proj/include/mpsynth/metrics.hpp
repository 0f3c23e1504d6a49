#pragma once

#include "mpsynth/objectives.hpp"
#include "mpsynth/tensor.hpp"

#include <string>
#include <vector>

namespace mpsynth {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 11-tap Gaussian, sigma 1.5.
std::vector<double> ssim_kernel();

/// Mean SSIM over the valid (unpadded) window positions, dynamic range 1.
/// Images are single planes: every dimension but the last two must be 1.
double ssim(const Tensor& x, const Tensor& y);

enum class PsnrPeak {
    observed_max, ///< max value over both images
    data_range,   ///< 1.0
};

struct Psnr {
    bool infinite = false; ///< images identical
    double db = 0;
};

Psnr psnr(const Tensor& reference, const Tensor& test, PsnrPeak peak = PsnrPeak::observed_max);

/// sum (y - g)^2 / sum y^2
double nmse(const Tensor& reference, const Tensor& test);

struct MetricsRow {
    std::string case_id;
    double ssim = 0;
    Psnr psnr;
    double nmse = 0;
    double lp = 0;
};

struct MetricsAggregate {
    double ssim = 0, nmse = 0, lp = 0;
    Psnr psnr; ///< over rows with finite PSNR; infinite when none are finite
};

struct MetricsReport {
    std::vector<MetricsRow> rows;
    MetricsAggregate mean, std; ///< population std

    /// Recomputes mean and std from rows.
    void aggregate();
};

struct EvalPair {
    std::string case_id;
    Tensor reference;
    Tensor synthesis;
};

/// Per-case metrics; lp is the weighted perceptual distance under `alpha`.
MetricsReport evaluate_pairs(const std::vector<EvalPair>& pairs, PerceptualNet& net,
                             const std::array<double, 5>& alpha = LossWeights{}.alpha,
                             PsnrPeak peak = PsnrPeak::observed_max);

std::string metrics_csv(const MetricsReport& report);
void write_metrics_csv(const std::string& path, const MetricsReport& report);

/// Formats a double for data files: shortest round-trip text.
std::string format_number(double v);

} // namespace mpsynth
