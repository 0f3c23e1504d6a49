#include "mpsynth/objectives.hpp"

#include "mpsynth/nets.hpp"

#include <cmath>

namespace mpsynth {

void LossWeights::validate() const
{
    auto check = [](double v, const std::string& name) {
        if (!std::isfinite(v) || v < 0)
            throw ConfigError("loss weight " + name + " must be finite and nonnegative, got " + std::to_string(v));
    };
    check(lambda1, "lambda1");
    check(lambda2, "lambda2");
    check(lambda3, "lambda3");
    for (std::size_t j = 0; j < alpha.size(); ++j)
        check(alpha[j], "alpha[" + std::to_string(j) + "]");
}

std::string to_string(GanMode mode)
{
    return mode == GanMode::saturating ? "saturating" : "non-saturating";
}

GanMode parse_gan_mode(const std::string& text)
{
    if (text == "saturating")
        return GanMode::saturating;
    if (text == "non-saturating" || text == "non_saturating")
        return GanMode::non_saturating;
    throw ConfigError("unknown gan_mode '" + text + "' (expected saturating or non-saturating)");
}

namespace {

std::string stage_name(std::size_t j)
{
    return "perc.conv" + std::to_string(j + 1);
}

template <typename T>
Var<T> perceptual_stage(Graph<T>& g, std::size_t j, Var<T> x)
{
    x = relu(conv_layer(g, stage_name(j), x, PerceptualNet::kWidths[j], 3, 1, 1));
    return pool(x, PoolKind::max, 2, 2);
}

template <typename T>
Var<T> log_prob(Var<T> p)
{
    return activation(clamp(p, kProbFloor, 1.0 - kProbFloor), ActKind::log);
}

template <typename T>
Var<T> log_one_minus(Var<T> p)
{
    return activation(affine(clamp(p, kProbFloor, 1.0 - kProbFloor), -1.0, 1.0), ActKind::log);
}

} // namespace

PerceptualNet::PerceptualNet(std::uint64_t seed)
{
    const std::size_t side = std::size_t{1} << kWidths.size();
    Graph<float> g;
    g.disable_grad();
    g.bind(weights_, true);
    g.enable_param_init(seed);
    Var<float> x = g.input(Tensor({1, 1, side, side}));
    for (std::size_t j = 0; j < kWidths.size(); ++j)
        x = perceptual_stage(g, j, x);
    weights64_ = weights_.cast<double>();
}

template <>
ParamStore<float>& PerceptualNet::store<float>()
{
    return weights_;
}

template <>
ParamStore<double>& PerceptualNet::store<double>()
{
    return weights64_;
}

template <typename T>
std::vector<Var<T>> PerceptualNet::features(Graph<T>& g, Var<T> image)
{
    const Shape& s = image.shape();
    const std::size_t div = std::size_t{1} << kWidths.size();
    if (s.size() != 4 || s[1] != 1)
        throw ContractError("perceptual net: input must be N x 1 x H x W, got " + shape_string(s));
    if (s[2] < div || s[3] < div || s[2] % div != 0 || s[3] % div != 0)
        throw ConfigError("perceptual net: spatial size " + shape_string(s) + " too small or not divisible by " +
                          std::to_string(div) + " for five pooling stages");
    if (!g.is_bound(store<T>()))
        g.bind(store<T>(), false);
    std::vector<Var<T>> out;
    Var<T> x = image;
    for (std::size_t j = 0; j < kWidths.size(); ++j) {
        x = perceptual_stage(g, j, x);
        out.push_back(x);
    }
    return out;
}

template <typename T>
Var<T> loss_reconstruction(const std::vector<std::pair<Var<T>, Var<T>>>& pairs)
{
    if (pairs.empty())
        throw ContractError("loss_reconstruction: no parameter pairs");
    std::optional<Var<T>> total;
    for (const auto& [p, r] : pairs) {
        if (p.shape() != r.shape())
            throw ContractError("loss_reconstruction: shape " + shape_string(p.shape()) + " vs " +
                                shape_string(r.shape()));
        Var<T> term = mean_abs_diff(p, r);
        total = total ? *total + term : term;
    }
    return *total;
}

template <typename T>
GeneratorLoss<T> loss_generator(Var<T> fake_prob, Var<T> synthesis, Var<T> target, double lambda1, GanMode mode)
{
    if (synthesis.shape() != target.shape())
        throw ContractError("loss_generator: synthesis " + shape_string(synthesis.shape()) + " vs target " +
                            shape_string(target.shape()));
    GeneratorLoss<T> out;
    out.adversarial = mode == GanMode::saturating ? mean(log_one_minus(fake_prob))
                                                  : mean(activation(log_prob(fake_prob), ActKind::neg));
    out.l1 = mean_abs_diff(target, synthesis);
    out.value = out.adversarial + scale(out.l1, lambda1);
    return out;
}

template <typename T>
Var<T> loss_discriminator(Var<T> real_prob, Var<T> fake_prob)
{
    return activation(mean(log_prob(real_prob)) + mean(log_one_minus(fake_prob)), ActKind::neg);
}

template <typename T>
PerceptualLoss<T> loss_perceptual(Graph<T>& g, PerceptualNet& net, Var<T> target, Var<T> synthesis,
                                  const std::array<double, 5>& alpha)
{
    if (target.shape() != synthesis.shape())
        throw ContractError("loss_perceptual: target " + shape_string(target.shape()) + " vs synthesis " +
                            shape_string(synthesis.shape()));
    const auto fy = net.features(g, target);
    const auto fs = net.features(g, synthesis);
    PerceptualLoss<T> out;
    std::optional<Var<T>> total;
    for (std::size_t j = 0; j < fy.size(); ++j) {
        out.layers.push_back(mean_abs_diff(fy[j], fs[j]));
        Var<T> term = scale(out.layers.back(), alpha[j]);
        total = total ? *total + term : term;
    }
    out.value = *total;
    return out;
}

LossBreakdown loss_total(const LossComponents& c, const LossWeights& w)
{
    for (double v : {c.g_adv, c.l1, c.l_d, c.l_rec, c.l_p})
        if (!std::isfinite(v))
            throw NonFiniteError("loss_total: non-finite loss component");
    LossBreakdown b;
    b.g_adv = c.g_adv;
    b.l1 = c.l1;
    b.l_d = c.l_d;
    b.l_rec = c.l_rec;
    b.l_p = c.l_p;
    b.lp_layers = c.lp_layers;
    b.l_g = c.g_adv + w.lambda1 * c.l1;
    b.total = b.l_g + c.l_d + w.lambda2 * c.l_rec + w.lambda3 * c.l_p;
    return b;
}

#define MPSYNTH_INSTANTIATE_OBJECTIVES(T)                                                                         \
    template std::vector<Var<T>> PerceptualNet::features(Graph<T>&, Var<T>);                                      \
    template Var<T> loss_reconstruction(const std::vector<std::pair<Var<T>, Var<T>>>&);                           \
    template GeneratorLoss<T> loss_generator(Var<T>, Var<T>, Var<T>, double, GanMode);                            \
    template Var<T> loss_discriminator(Var<T>, Var<T>);                                                           \
    template PerceptualLoss<T> loss_perceptual(Graph<T>&, PerceptualNet&, Var<T>, Var<T>, const std::array<double, 5>&);

MPSYNTH_INSTANTIATE_OBJECTIVES(float)
MPSYNTH_INSTANTIATE_OBJECTIVES(double)

} // namespace mpsynth
