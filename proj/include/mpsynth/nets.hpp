#pragma once

#include "mpsynth/graph.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mpsynth {

/// Ablation assemblies. mp: one encoder-decoder over stacked inputs.
/// mpf: reconstructors + MAPS fusion. mpfa: mpf + parameter attention.
/// full: mpfa + skip connections between analysis and synthesis paths.
enum class Variant { mp, mpf, mpfa, full };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct NetConfig {
    /// Input parameters in declared order; also the order of the subtract fold.
    std::vector<std::string> param_order{"p1", "p2", "p3"};
    std::size_t base_width = 16;
    std::size_t attention_ratio = 8;
    Variant variant = Variant::full;

    static constexpr std::size_t levels = 4;

    std::size_t n_params() const { return param_order.size(); }
    /// Channels at encoder level l (1-based): base_width * 2^(l-1).
    std::size_t width(std::size_t level) const { return base_width << (level - 1); }
    /// Channels of up tap m (1-based): mirrors the encoder, ending at base_width.
    std::size_t up_width(std::size_t m) const { return m < levels ? width(levels - m) : base_width; }
    std::size_t bottleneck_wide() const { return 16 * base_width; }
    std::size_t bottleneck_narrow() const { return 8 * base_width; }
    bool uses_reconstructors() const { return variant != Variant::mp; }
    bool uses_attention() const { return variant == Variant::mpfa || variant == Variant::full; }
    bool uses_skips() const { return variant == Variant::full; }

    /// Throws ConfigError on an invalid combination.
    void validate() const;
};

template <typename T>
struct ReconstructorTaps {
    Var<T> reconstruction;
    std::vector<Var<T>> down; ///< d1..d4, spatial H/2^l
    std::vector<Var<T>> up;   ///< u1..u4, spatial H/2^(4-m)
};

template <typename T>
struct MapsResult {
    Var<T> max, avg, prod, sub;
};

template <typename T>
struct AttentionResult {
    Var<T> attention; ///< N x C x 1 x 1, values in (0, 1)
    Var<T> refined;   ///< input rescaled per channel
};

template <typename T>
struct MpfaState {
    Var<T> fused;
    Var<T> attention; ///< invalid when attention is disabled
};

template <typename T>
struct GeneratorOutput {
    Var<T> synthesis;
    std::vector<Var<T>> reconstructions; ///< empty for the mp variant
};

/// conv(k x k, stride, pad) with parameters "<name>.w" / "<name>.b".
template <typename T>
Var<T> conv_layer(Graph<T>& g, const std::string& name, Var<T> x, std::size_t out_channels, std::size_t k,
                  std::size_t stride = 1, std::size_t pad = 0);

template <typename T>
ReconstructorTaps<T> reconstructor_forward(Graph<T>& g, Var<T> image, const NetConfig& cfg, const std::string& prefix);

/// Element-wise max, mean, product and left-fold difference over n >= 2 maps.
template <typename T>
MapsResult<T> maps_interact(const std::vector<Var<T>>& taps);

/// sigmoid(MLP(avg-pool(P)) + MLP(max-pool(P))) with one MLP shared by both branches.
template <typename T>
AttentionResult<T> parameter_attention(Graph<T>& g, Var<T> features, const NetConfig& cfg, const std::string& prefix);

/// One fusion block. `previous` must already be resampled to the taps' size.
template <typename T>
MpfaState<T> mpfa_forward(Graph<T>& g, const std::vector<Var<T>>& taps, std::optional<Var<T>> previous,
                          std::optional<Var<T>> skip, bool attention, const NetConfig& cfg, const std::string& prefix);

/// Inputs are N x 1 x H x W in `cfg.param_order`.
template <typename T>
GeneratorOutput<T> generator_forward(Graph<T>& g, const std::vector<Var<T>>& inputs, const NetConfig& cfg);

/// Raw patch logits N x 1 x H/16 x W/16 of a conditional discriminator.
template <typename T>
Var<T> discriminator_forward(Graph<T>& g, const std::vector<Var<T>>& inputs, Var<T> candidate, const NetConfig& cfg);

/// Creates generator weights for `cfg` by tracing one forward pass.
ParamStore<float> init_generator(const NetConfig& cfg, std::size_t image_size, std::uint64_t seed);
ParamStore<float> init_discriminator(const NetConfig& cfg, std::size_t image_size, std::uint64_t seed);

} // namespace mpsynth
