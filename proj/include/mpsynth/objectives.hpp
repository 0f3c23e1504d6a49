#pragma once

#include "mpsynth/graph.hpp"

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace mpsynth {

struct LossWeights {
    double lambda1 = 100.0; ///< generator L1
    double lambda2 = 25.0;  ///< reconstruction
    double lambda3 = 200.0; ///< perceptual
    std::array<double, 5> alpha{1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0 / 2, 1.0};

    /// Throws ConfigError on a negative or non-finite weight.
    void validate() const;
};

enum class GanMode { saturating, non_saturating };

std::string to_string(GanMode mode);
GanMode parse_gan_mode(const std::string& text);

inline constexpr double kProbFloor = 1e-7;

/// Frozen random feature extractor: 5 x [conv3x3 + relu + maxpool2],
/// widths 8, 16, 32, 64, 64, He-normal from a fixed seed.
class PerceptualNet {
public:
    static constexpr std::uint64_t kSeed = 0xC0FFEE;
    static constexpr std::array<std::size_t, 5> kWidths{8, 16, 32, 64, 64};

    explicit PerceptualNet(std::uint64_t seed = kSeed);

    /// Activations after each pooling stage for an N x 1 x H x W input.
    /// Binds the net's weights to `g` as constants on first use.
    template <typename T>
    std::vector<Var<T>> features(Graph<T>& g, Var<T> image);

    const ParamStore<float>& params() const { return weights_; }

private:
    template <typename T>
    ParamStore<T>& store();

    ParamStore<float> weights_;
    ParamStore<double> weights64_;
};

/// Sum over parameters of mean |p - R(p)|.
template <typename T>
Var<T> loss_reconstruction(const std::vector<std::pair<Var<T>, Var<T>>>& pairs);

template <typename T>
struct GeneratorLoss {
    Var<T> adversarial; ///< mean log(1 - D_fake), or mean -log D_fake
    Var<T> l1;          ///< mean |y - y_hat|
    Var<T> value;       ///< adversarial + lambda1 * l1
};

/// `fake_prob` holds discriminator probabilities for the synthesis.
template <typename T>
GeneratorLoss<T> loss_generator(Var<T> fake_prob, Var<T> synthesis, Var<T> target, double lambda1,
                                GanMode mode = GanMode::saturating);

/// -[mean log real + mean log(1 - fake)]
template <typename T>
Var<T> loss_discriminator(Var<T> real_prob, Var<T> fake_prob);

template <typename T>
struct PerceptualLoss {
    Var<T> value;
    std::vector<Var<T>> layers; ///< unweighted per-stage mean |phi_j(y) - phi_j(y_hat)|
};

template <typename T>
PerceptualLoss<T> loss_perceptual(Graph<T>& g, PerceptualNet& net, Var<T> target, Var<T> synthesis,
                                  const std::array<double, 5>& alpha);

struct LossComponents {
    double g_adv = 0, l1 = 0, l_d = 0, l_rec = 0, l_p = 0;
    std::array<double, 5> lp_layers{};
};

struct LossBreakdown {
    double total = 0;
    double l_g = 0; ///< g_adv + lambda1 * l1
    double g_adv = 0, l1 = 0, l_d = 0, l_rec = 0, l_p = 0;
    std::array<double, 5> lp_layers{};
};

/// total = L_G + L_D + lambda2 * L_Rec + lambda3 * L_P
LossBreakdown loss_total(const LossComponents& c, const LossWeights& w);

} // namespace mpsynth
