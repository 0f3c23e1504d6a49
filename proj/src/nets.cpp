#include "mpsynth/nets.hpp"

#include "mpsynth/rng.hpp"

namespace mpsynth {

std::string to_string(Variant v)
{
    switch (v) {
    case Variant::mp: return "mp";
    case Variant::mpf: return "mpf";
    case Variant::mpfa: return "mpfa";
    case Variant::full: return "full";
    }
    return "?";
}

Variant parse_variant(const std::string& text)
{
    for (Variant v : {Variant::mp, Variant::mpf, Variant::mpfa, Variant::full})
        if (to_string(v) == text)
            return v;
    throw ConfigError("unknown variant kind '" + text + "' (expected mp, mpf, mpfa or full)");
}

void NetConfig::validate() const
{
    if (param_order.empty() || param_order.size() > 3)
        throw ConfigError("param_order must name 1 to 3 input parameters");
    for (std::size_t i = 0; i < param_order.size(); ++i) {
        const auto& p = param_order[i];
        if (p != "p1" && p != "p2" && p != "p3")
            throw ConfigError("unknown input parameter '" + p + "'");
        for (std::size_t j = 0; j < i; ++j)
            if (param_order[j] == p)
                throw ConfigError("duplicate input parameter '" + p + "'");
    }
    if (base_width == 0 || attention_ratio == 0)
        throw ConfigError("base_width and attention_ratio must be positive");
    if (base_width % attention_ratio != 0)
        throw ConfigError("base_width " + std::to_string(base_width) + " not divisible by attention ratio " +
                          std::to_string(attention_ratio));
}

template <typename T>
Var<T> conv_layer(Graph<T>& g, const std::string& name, Var<T> x, std::size_t out_channels, std::size_t k,
                  std::size_t stride, std::size_t pad)
{
    const std::size_t in_channels = x.shape().at(1);
    Var<T> w = g.param(name + ".w", {out_channels, in_channels, k, k}, in_channels * k * k);
    Var<T> b = g.param(name + ".b", {out_channels}, 0);
    return conv2d(x, w, b, stride, pad);
}

namespace {

template <typename T>
Var<T> conv3_relu(Graph<T>& g, const std::string& name, Var<T> x, std::size_t out_channels)
{
    return relu(conv_layer(g, name, x, out_channels, 3, 1, 1));
}

template <typename T>
Var<T> maxpool2(Var<T> x)
{
    return pool(x, PoolKind::max, 2, 2);
}

template <typename T>
void check_inputs(const std::vector<Var<T>>& inputs, const NetConfig& cfg, const char* who)
{
    if (inputs.size() != cfg.n_params())
        throw ContractError(std::string(who) + ": expected " + std::to_string(cfg.n_params()) + " inputs, got " +
                            std::to_string(inputs.size()));
    const Shape& s0 = inputs.front().shape();
    if (s0.size() != 4 || s0[1] != 1)
        throw ContractError(std::string(who) + ": inputs must be N x 1 x H x W, got " + shape_string(s0));
    const std::size_t div = std::size_t{1} << NetConfig::levels;
    if (s0[2] % div != 0 || s0[3] % div != 0)
        throw ConfigError(std::string(who) + ": spatial size " + shape_string(s0) + " not divisible by " +
                          std::to_string(div));
    for (const auto& v : inputs)
        if (v.shape() != s0)
            throw ContractError(std::string(who) + ": input shapes differ (" + shape_string(s0) + " vs " +
                                shape_string(v.shape()) + ")");
}

/// Plain encoder-decoder used by the mp variant.
template <typename T>
Var<T> single_path_forward(Graph<T>& g, Var<T> x, const NetConfig& cfg)
{
    const std::string p = "gen.mp";
    for (std::size_t l = 1; l <= NetConfig::levels; ++l) {
        const std::string lv = p + ".enc" + std::to_string(l);
        x = conv3_relu(g, lv + ".conv1", x, cfg.width(l));
        x = conv3_relu(g, lv + ".conv2", x, cfg.width(l));
        x = maxpool2(x);
    }
    x = conv3_relu(g, p + ".bottleneck1", x, cfg.bottleneck_wide());
    x = conv3_relu(g, p + ".bottleneck2", x, cfg.bottleneck_narrow());
    for (std::size_t m = 1; m <= NetConfig::levels; ++m) {
        const std::string lv = p + ".dec" + std::to_string(m);
        x = upsample2x(x);
        x = conv3_relu(g, lv + ".conv1", x, cfg.up_width(m));
        x = conv3_relu(g, lv + ".conv2", x, cfg.up_width(m));
    }
    return sigmoid(conv_layer(g, p + ".head", x, 1, 1));
}

} // namespace

template <typename T>
ReconstructorTaps<T> reconstructor_forward(Graph<T>& g, Var<T> image, const NetConfig& cfg, const std::string& prefix)
{
    const Shape& s = image.shape();
    if (s.size() != 4 || s[1] != 1)
        throw ContractError("reconstructor: input must be N x 1 x H x W, got " + shape_string(s));
    const std::size_t div = std::size_t{1} << NetConfig::levels;
    if (s[2] % div != 0 || s[3] % div != 0)
        throw ConfigError("reconstructor: spatial size " + shape_string(s) + " not divisible by " + std::to_string(div));

    ReconstructorTaps<T> taps;
    Var<T> x = image;
    for (std::size_t l = 1; l <= NetConfig::levels; ++l) {
        const std::string lv = prefix + ".enc" + std::to_string(l);
        x = conv3_relu(g, lv + ".conv1", x, cfg.width(l));
        x = conv3_relu(g, lv + ".conv2", x, cfg.width(l));
        x = maxpool2(x);
        taps.down.push_back(x);
    }
    for (std::size_t m = 1; m <= NetConfig::levels; ++m) {
        const std::string lv = prefix + ".dec" + std::to_string(m);
        x = upsample2x(x);
        x = conv3_relu(g, lv + ".conv1", x, cfg.up_width(m));
        x = conv3_relu(g, lv + ".conv2", x, cfg.up_width(m));
        taps.up.push_back(x);
    }
    taps.reconstruction = sigmoid(conv_layer(g, prefix + ".head", x, 1, 1));
    return taps;
}

template <typename T>
MapsResult<T> maps_interact(const std::vector<Var<T>>& taps)
{
    if (taps.size() < 2)
        throw ContractError("maps_interact needs at least two feature maps, got " + std::to_string(taps.size()));
    for (const auto& t : taps)
        if (t.shape() != taps.front().shape())
            throw ContractError("maps_interact: feature maps differ in shape (" + shape_string(taps.front().shape()) +
                                " vs " + shape_string(t.shape()) + ")");
    MapsResult<T> r{taps[0], taps[0], taps[0], taps[0]};
    Var<T> total = taps[0];
    for (std::size_t i = 1; i < taps.size(); ++i) {
        r.max = elementwise(r.max, taps[i], BinaryKind::max);
        total = total + taps[i];
        r.prod = r.prod * taps[i];
        r.sub = r.sub - taps[i];
    }
    r.avg = scale(total, 1.0 / static_cast<double>(taps.size()));
    return r;
}

template <typename T>
AttentionResult<T> parameter_attention(Graph<T>& g, Var<T> features, const NetConfig& cfg, const std::string& prefix)
{
    const Shape& s = features.shape();
    if (s.size() != 4)
        throw ContractError("parameter_attention: expects N x C x H x W, got " + shape_string(s));
    const std::size_t N = s[0], C = s[1];
    if (C % cfg.attention_ratio != 0)
        throw ConfigError("parameter_attention: " + std::to_string(C) + " channels not divisible by ratio " +
                          std::to_string(cfg.attention_ratio));
    const std::size_t hidden = C / cfg.attention_ratio;
    Var<T> w1 = g.param(prefix + ".fc1.w", {hidden, C}, C);
    Var<T> b1 = g.param(prefix + ".fc1.b", {hidden}, 0);
    Var<T> w2 = g.param(prefix + ".fc2.w", {C, hidden}, hidden);
    Var<T> b2 = g.param(prefix + ".fc2.b", {C}, 0);
    auto mlp = [&](Var<T> pooled) {
        Var<T> h = relu(dense(reshape(pooled, {N, C}), w1, b1));
        return dense(h, w2, b2);
    };
    Var<T> summed = mlp(global_pool(features, PoolKind::average)) + mlp(global_pool(features, PoolKind::max));
    Var<T> attention = reshape(sigmoid(summed), {N, C, 1, 1});
    return {attention, features * attention};
}

template <typename T>
MpfaState<T> mpfa_forward(Graph<T>& g, const std::vector<Var<T>>& taps, std::optional<Var<T>> previous,
                          std::optional<Var<T>> skip, bool attention, const NetConfig& cfg, const std::string& prefix)
{
    if (taps.empty())
        throw ContractError("mpfa: no feature maps");
    const Shape s = taps.front().shape();
    for (const auto& t : taps)
        if (t.shape() != s)
            throw ContractError("mpfa: feature maps differ in shape (" + shape_string(s) + " vs " +
                                shape_string(t.shape()) + ")");
    const std::size_t C = s.at(1);

    std::vector<Var<T>> parts = taps;
    if (taps.size() >= 2) {
        const MapsResult<T> maps = maps_interact(taps);
        parts.insert(parts.end(), {maps.max, maps.avg, maps.prod, maps.sub});
    }
    Var<T> concat = concat_channels(parts);

    MpfaState<T> state;
    Var<T> refined = concat;
    if (attention) {
        const AttentionResult<T> att = parameter_attention(g, concat, cfg, prefix + ".attn");
        state.attention = att.attention;
        refined = att.refined;
    }
    Var<T> z = conv3_relu(g, prefix + ".conv1", concat + refined, C);

    std::vector<Var<T>> conv2_in{z};
    for (const auto& extra : {previous, skip}) {
        if (!extra)
            continue;
        const Shape& es = extra->shape();
        if (es.size() != 4 || es[0] != s[0] || es[2] != s[2] || es[3] != s[3])
            throw ContractError("mpfa: resampled feature " + shape_string(es) + " does not match taps " + shape_string(s));
        conv2_in.push_back(*extra);
    }
    state.fused = conv3_relu(g, prefix + ".conv2", conv2_in.size() == 1 ? z : concat_channels(conv2_in), C);
    return state;
}

template <typename T>
GeneratorOutput<T> generator_forward(Graph<T>& g, const std::vector<Var<T>>& inputs, const NetConfig& cfg)
{
    cfg.validate();
    check_inputs(inputs, cfg, "generator");
    GeneratorOutput<T> out;
    if (!cfg.uses_reconstructors()) {
        out.synthesis = single_path_forward(g, inputs.size() == 1 ? inputs.front() : concat_channels(inputs), cfg);
        return out;
    }

    std::vector<ReconstructorTaps<T>> recon;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        recon.push_back(reconstructor_forward(g, inputs[i], cfg, "gen.rec." + cfg.param_order[i]));
        out.reconstructions.push_back(recon.back().reconstruction);
    }
    auto taps_at = [&](bool down, std::size_t idx) {
        std::vector<Var<T>> t;
        for (const auto& r : recon)
            t.push_back(down ? r.down[idx] : r.up[idx]);
        return t;
    };

    const bool att = cfg.uses_attention();
    std::vector<Var<T>> analysis;
    std::optional<Var<T>> previous;
    for (std::size_t k = 0; k < NetConfig::levels; ++k) {
        const auto st = mpfa_forward<T>(g, taps_at(true, k), previous, std::nullopt, att, cfg,
                                     "gen.mpfa" + std::to_string(k + 1));
        analysis.push_back(st.fused);
        if (k + 1 < NetConfig::levels)
            previous = maxpool2(st.fused);
    }

    Var<T> x = conv3_relu(g, "gen.bottleneck1", analysis.back(), cfg.bottleneck_wide());
    x = conv3_relu(g, "gen.bottleneck2", x, cfg.bottleneck_narrow());

    for (std::size_t m = 0; m < NetConfig::levels; ++m) {
        std::optional<Var<T>> skip;
        // Synthesis level m runs at the size of analysis level (levels - 2 - m).
        if (cfg.uses_skips() && m + 1 < NetConfig::levels)
            skip = analysis[NetConfig::levels - 2 - m];
        const auto st = mpfa_forward<T>(g, taps_at(false, m), upsample2x(x), skip, att, cfg,
                                     "gen.mpfa" + std::to_string(NetConfig::levels + m + 1));
        x = st.fused;
    }
    out.synthesis = sigmoid(conv_layer(g, "gen.head", x, 1, 1));
    return out;
}

template <typename T>
Var<T> discriminator_forward(Graph<T>& g, const std::vector<Var<T>>& inputs, Var<T> candidate, const NetConfig& cfg)
{
    check_inputs(inputs, cfg, "discriminator");
    if (candidate.shape() != inputs.front().shape())
        throw ContractError("discriminator: candidate " + shape_string(candidate.shape()) + " does not match inputs " +
                            shape_string(inputs.front().shape()));
    std::vector<Var<T>> parts = inputs;
    parts.push_back(candidate);
    Var<T> x = concat_channels(parts);
    for (std::size_t l = 1; l <= NetConfig::levels; ++l)
        x = activation(conv_layer(g, "disc.conv" + std::to_string(l), x, cfg.width(l), 3, 2, 1), ActKind::leaky_relu);
    return conv_layer(g, "disc.head", x, 1, 1);
}

namespace {

std::vector<Var<float>> dummy_inputs(Graph<float>& g, const NetConfig& cfg, std::size_t image_size)
{
    std::vector<Var<float>> inputs;
    for (std::size_t i = 0; i < cfg.n_params(); ++i)
        inputs.push_back(g.input(Tensor({1, 1, image_size, image_size}, 0.5f)));
    return inputs;
}

} // namespace

ParamStore<float> init_generator(const NetConfig& cfg, std::size_t image_size, std::uint64_t seed)
{
    ParamStore<float> store;
    Graph<float> g;
    g.disable_grad();
    g.bind(store, true);
    g.enable_param_init(derive_seed(seed, "generator"));
    generator_forward(g, dummy_inputs(g, cfg, image_size), cfg);
    return store;
}

ParamStore<float> init_discriminator(const NetConfig& cfg, std::size_t image_size, std::uint64_t seed)
{
    ParamStore<float> store;
    Graph<float> g;
    g.disable_grad();
    g.bind(store, true);
    g.enable_param_init(derive_seed(seed, "discriminator"));
    auto inputs = dummy_inputs(g, cfg, image_size);
    discriminator_forward(g, inputs, g.input(Tensor({1, 1, image_size, image_size}, 0.5f)), cfg);
    return store;
}

#define MPSYNTH_INSTANTIATE_NETS(T)                                                                                 \
    template Var<T> conv_layer(Graph<T>&, const std::string&, Var<T>, std::size_t, std::size_t, std::size_t,        \
                               std::size_t);                                                                        \
    template ReconstructorTaps<T> reconstructor_forward(Graph<T>&, Var<T>, const NetConfig&, const std::string&);   \
    template MapsResult<T> maps_interact(const std::vector<Var<T>>&);                                               \
    template AttentionResult<T> parameter_attention(Graph<T>&, Var<T>, const NetConfig&, const std::string&);       \
    template MpfaState<T> mpfa_forward(Graph<T>&, const std::vector<Var<T>>&, std::optional<Var<T>>,                \
                                       std::optional<Var<T>>, bool, const NetConfig&, const std::string&);          \
    template GeneratorOutput<T> generator_forward(Graph<T>&, const std::vector<Var<T>>&, const NetConfig&);         \
    template Var<T> discriminator_forward(Graph<T>&, const std::vector<Var<T>>&, Var<T>, const NetConfig&);

MPSYNTH_INSTANTIATE_NETS(float)
MPSYNTH_INSTANTIATE_NETS(double)

} // namespace mpsynth
