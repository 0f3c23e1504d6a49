#include "mpsynth/gradcheck.hpp"

#include "mpsynth/nets.hpp"
#include "mpsynth/objectives.hpp"
#include "mpsynth/rng.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace mpsynth {

namespace {

using D = double;
using T64 = BasicTensor<double>;

std::string input_name(std::size_t i)
{
    return "@input" + std::to_string(i);
}

struct Evaluation {
    double value;
    std::uint64_t signature;
};

Evaluation evaluate(const GradProblem& p, const std::vector<T64>& inputs, ParamStore<D>& params)
{
    Graph<D> g;
    g.disable_grad();
    g.track_kinks(true);
    g.bind(params, true);
    std::vector<Var<D>> leaves;
    for (const auto& t : inputs)
        leaves.push_back(g.input(t));
    const Var<D> loss = p.loss(g, leaves);
    if (loss.value().size() != 1)
        throw ContractError("grad_check '" + p.name + "': loss is not scalar");
    return {loss.value()[0], g.kink_signature()};
}

T64 random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0)
{
    T64 t(std::move(shape));
    for (auto& v : t.data())
        v = rng.uniform(lo, hi);
    return t;
}

/// sum(v * w) for a fixed pseudo-random w, so every output element matters
/// with a distinct weight.
Var<D> weighted_sum(Var<D> v, std::uint64_t seed)
{
    Rng rng(seed);
    Graph<D>& g = *v.graph();
    return sum(v * g.input(random_tensor(rng, v.shape())));
}

/// Weighted sum over several outputs with independent weights.
Var<D> weighted_sum(const std::vector<Var<D>>& vs, std::uint64_t seed)
{
    Var<D> total = weighted_sum(vs.front(), seed);
    for (std::size_t i = 1; i < vs.size(); ++i)
        total = total + weighted_sum(vs[i], seed + i);
    return total;
}

ParamStore<D> init_params(std::uint64_t seed, const std::function<void(Graph<D>&)>& trace)
{
    ParamStore<D> store;
    Graph<D> g;
    g.disable_grad();
    g.bind(store, true);
    g.enable_param_init(seed);
    trace(g);
    return store;
}

GradProblem unary(const std::string& name, T64 x, std::function<Var<D>(Var<D>)> f, std::uint64_t seed)
{
    GradProblem p;
    p.name = name;
    p.inputs = {std::move(x)};
    p.loss = [f, seed](Graph<D>&, const std::vector<Var<D>>& in) {
        Var<D> y = f(in[0]);
        return y.value().size() == 1 ? y : weighted_sum(y, seed);
    };
    return p;
}

GradProblem binary(const std::string& name, T64 a, T64 b, std::function<Var<D>(Var<D>, Var<D>)> f,
                   std::uint64_t seed)
{
    GradProblem p;
    p.name = name;
    p.inputs = {std::move(a), std::move(b)};
    p.loss = [f, seed](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(f(in[0], in[1]), seed); };
    return p;
}

} // namespace

GradReport grad_check(const GradProblem& problem, const GradCheckOptions& options)
{
    const double eps = problem.eps > 0 ? problem.eps : options.eps;
    const std::size_t wanted = problem.probes > 0 ? problem.probes : options.probes;

    std::vector<T64> inputs = problem.inputs;
    ParamStore<D> params = problem.params;

    std::map<std::string, T64> analytic;
    {
        Graph<D> g;
        g.bind(params, true);
        std::vector<Var<D>> leaves;
        for (std::size_t i = 0; i < inputs.size(); ++i)
            leaves.push_back(g.leaf(inputs[i], true, input_name(i)));
        analytic = g.backward(problem.loss(g, leaves));
    }
    const std::uint64_t base_signature = evaluate(problem, inputs, params).signature;

    struct Coord {
        T64* tensor;
        std::string name;
        std::size_t index;
    };
    std::vector<Coord> coords;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        for (std::size_t k = 0; k < inputs[i].size(); ++k)
            coords.push_back({&inputs[i], input_name(i), k});
    for (auto& [name, t] : params)
        for (std::size_t k = 0; k < t.size(); ++k)
            coords.push_back({&t, name, k});
    if (wanted > 0 && wanted < coords.size()) {
        Rng rng(derive_seed(options.seed, problem.name));
        for (std::size_t i = coords.size() - 1; i > 0; --i)
            std::swap(coords[i], coords[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    }

    GradReport report;
    report.op = problem.name;
    for (const Coord& c : coords) {
        if (wanted > 0 && report.probe_count == wanted)
            break;
        double& v = (*c.tensor)[c.index];
        const double saved = v;
        v = saved + eps;
        const Evaluation plus = evaluate(problem, inputs, params);
        v = saved - eps;
        const Evaluation minus = evaluate(problem, inputs, params);
        v = saved;
        if (plus.signature != base_signature || minus.signature != base_signature) {
            ++report.discarded;
            continue;
        }
        const double numeric = (plus.value - minus.value) / (2 * eps);
        const auto it = analytic.find(c.name);
        const double a = (it == analytic.end() ? 0.0 : it->second[c.index]) * options.fault_scale;
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        report.max_rel_error = std::max(report.max_rel_error, rel);
        ++report.probe_count;
    }
    report.pass = report.probe_count > 0 && report.max_rel_error < options.tol;
    return report;
}

GradScope parse_grad_scope(const std::string& text)
{
    if (text == "op")
        return GradScope::op;
    if (text == "block")
        return GradScope::block;
    if (text == "full")
        return GradScope::full;
    throw ConfigError("unknown gradcheck scope '" + text + "' (expected op, block or full)");
}

std::vector<GradProblem> op_problems(std::uint64_t seed)
{
    Rng rng(derive_seed(seed, "op_problems"));
    std::vector<GradProblem> out;
    auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(rng, std::move(s), lo, hi); };

    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 1}, {1, 0}}) {
        GradProblem p;
        p.name = "conv2d(stride=" + std::to_string(stride) + ",pad=" + std::to_string(pad) + ")";
        p.inputs = {rnd({2, 3, 5, 5}), rnd({4, 3, 3, 3}), rnd({4})};
        p.loss = [stride, pad, seed](Graph<D>&, const std::vector<Var<D>>& in) {
            return weighted_sum(conv2d(in[0], in[1], in[2], stride, pad), seed);
        };
        out.push_back(std::move(p));
    }
    out.push_back(unary("pool(max)", rnd({1, 2, 8, 8}), [](Var<D> x) { return pool(x, PoolKind::max, 2, 2); }, seed));
    out.push_back(unary("pool(average)", rnd({1, 2, 8, 8}), [](Var<D> x) { return pool(x, PoolKind::average, 2, 2); },
                        seed));
    out.push_back(unary("global_pool(max)", rnd({2, 3, 4, 4}), [](Var<D> x) { return global_pool(x, PoolKind::max); },
                        seed));
    out.push_back(unary("global_pool(average)", rnd({2, 3, 4, 4}),
                        [](Var<D> x) { return global_pool(x, PoolKind::average); }, seed));
    out.push_back(unary("upsample2x", rnd({1, 2, 3, 3}), [](Var<D> x) { return upsample2x(x); }, seed));
    {
        GradProblem p;
        p.name = "dense";
        p.inputs = {rnd({4, 8}), rnd({3, 8}), rnd({3})};
        p.loss = [seed](Graph<D>&, const std::vector<Var<D>>& in) {
            return weighted_sum(dense(in[0], in[1], in[2]), seed);
        };
        out.push_back(std::move(p));
    }
    const std::pair<const char*, ActKind> acts[] = {{"sigmoid", ActKind::sigmoid}, {"relu", ActKind::relu},
                                                    {"leaky_relu", ActKind::leaky_relu}, {"neg", ActKind::neg},
                                                    {"abs", ActKind::abs}};
    for (auto [label, kind] : acts)
        out.push_back(unary(std::string("activation(") + label + ")", rnd({2, 3, 4, 4}),
                            [kind](Var<D> x) { return activation(x, kind); }, seed));
    out.push_back(unary("activation(log)", rnd({2, 3, 4, 4}, 0.5, 1.5),
                        [](Var<D> x) { return activation(x, ActKind::log); }, seed));
    const std::pair<const char*, BinaryKind> bins[] = {
        {"add", BinaryKind::add}, {"sub", BinaryKind::sub}, {"mul", BinaryKind::mul}, {"max", BinaryKind::max}};
    for (auto [label, kind] : bins) {
        out.push_back(binary(std::string("elementwise(") + label + ")", rnd({2, 3, 4, 4}), rnd({2, 3, 4, 4}),
                             [kind](Var<D> a, Var<D> b) { return elementwise(a, b, kind); }, seed));
        out.push_back(binary(std::string("elementwise(") + label + ",broadcast)", rnd({2, 3, 4, 4}), rnd({2, 3, 1, 1}),
                             [kind](Var<D> a, Var<D> b) { return elementwise(a, b, kind); }, seed));
    }
    {
        GradProblem p;
        p.name = "concat_channels";
        p.inputs = {rnd({2, 1, 3, 3}), rnd({2, 3, 3, 3}), rnd({2, 2, 3, 3})};
        p.loss = [seed](Graph<D>&, const std::vector<Var<D>>& in) { return weighted_sum(concat_channels(in), seed); };
        out.push_back(std::move(p));
    }
    out.push_back(unary("slice_channels", rnd({2, 5, 3, 3}), [](Var<D> x) { return slice_channels(x, 1, 3); }, seed));
    out.push_back(unary("reshape", rnd({2, 3, 2, 2}), [](Var<D> x) { return reshape(x, {2, 12}); }, seed));
    out.push_back(unary("affine", rnd({2, 3, 4, 4}), [](Var<D> x) { return affine(x, -1.7, 0.3); }, seed));
    out.push_back(unary("clamp", rnd({2, 3, 4, 4}, -1.5, 1.5), [](Var<D> x) { return clamp(x, -1.0, 1.0); }, seed));
    out.push_back(unary("sum", rnd({2, 3, 4, 4}), [](Var<D> x) { return sum(x); }, seed));
    out.push_back(unary("mean", rnd({2, 3, 4, 4}), [](Var<D> x) { return mean(x); }, seed));
    {
        GradProblem p;
        p.name = "chain(conv2d,maxpool,sigmoid,sum)";
        p.inputs = {rnd({1, 2, 6, 6}), rnd({3, 2, 3, 3}), rnd({3})};
        p.loss = [](Graph<D>&, const std::vector<Var<D>>& in) {
            return sum(sigmoid(pool(conv2d(in[0], in[1], in[2], 1, 1), PoolKind::max, 2, 2)));
        };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "loss_reconstruction";
        p.inputs = {rnd({2, 1, 4, 4}, 0, 1), rnd({2, 1, 4, 4}, 0, 1), rnd({2, 1, 4, 4}, 0, 1),
                    rnd({2, 1, 4, 4}, 0, 1)};
        p.loss = [](Graph<D>&, const std::vector<Var<D>>& in) {
            return loss_reconstruction<D>({{in[0], in[1]}, {in[2], in[3]}});
        };
        out.push_back(std::move(p));
    }
    for (GanMode mode : {GanMode::saturating, GanMode::non_saturating}) {
        GradProblem p;
        p.name = "loss_generator(" + to_string(mode) + ")";
        p.inputs = {rnd({2, 1, 2, 2}, 0.1, 0.9), rnd({2, 1, 4, 4}, 0, 1), rnd({2, 1, 4, 4}, 0, 1)};
        p.loss = [mode](Graph<D>&, const std::vector<Var<D>>& in) {
            return loss_generator(in[0], in[1], in[2], 100.0, mode).value;
        };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "loss_discriminator";
        p.inputs = {rnd({2, 1, 2, 2}, 0.1, 0.9), rnd({2, 1, 2, 2}, 0.1, 0.9)};
        p.loss = [](Graph<D>&, const std::vector<Var<D>>& in) { return loss_discriminator(in[0], in[1]); };
        out.push_back(std::move(p));
    }
    {
        auto net = std::make_shared<PerceptualNet>();
        GradProblem p;
        p.name = "loss_perceptual";
        p.inputs = {rnd({1, 1, 32, 32}, 0, 1), rnd({1, 1, 32, 32}, 0, 1)};
        p.loss = [net](Graph<D>& g, const std::vector<Var<D>>& in) {
            return loss_perceptual(g, *net, in[0], in[1], LossWeights{}.alpha).value;
        };
        p.probes = 128;
        out.push_back(std::move(p));
    }
    return out;
}

std::vector<GradProblem> block_problems(std::uint64_t seed)
{
    Rng rng(derive_seed(seed, "block_problems"));
    std::vector<GradProblem> out;
    auto rnd = [&](Shape s, double lo = -1.0, double hi = 1.0) { return random_tensor(rng, std::move(s), lo, hi); };
    NetConfig cfg;
    cfg.base_width = 8;
    cfg.attention_ratio = 4;

    {
        GradProblem p;
        p.name = "maps_interact";
        p.inputs = {rnd({1, 2, 3, 3}), rnd({1, 2, 3, 3}), rnd({1, 2, 3, 3})};
        p.loss = [seed](Graph<D>&, const std::vector<Var<D>>& in) {
            const auto m = maps_interact(in);
            return weighted_sum({m.max, m.avg, m.prod, m.sub}, seed);
        };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "parameter_attention";
        p.inputs = {rnd({2, 16, 3, 3})};
        p.params = init_params(seed, [&](Graph<D>& g) { parameter_attention(g, g.input(T64({2, 16, 3, 3})), cfg, "attn"); });
        p.loss = [seed, cfg](Graph<D>& g, const std::vector<Var<D>>& in) {
            const auto a = parameter_attention(g, in[0], cfg, "attn");
            return weighted_sum({a.attention, a.refined}, seed);
        };
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "mpfa_forward";
        p.inputs = {rnd({1, 4, 4, 4}), rnd({1, 4, 4, 4}), rnd({1, 4, 4, 4}), rnd({1, 4, 4, 4}), rnd({1, 4, 4, 4})};
        auto f = [cfg](Graph<D>& g, const std::vector<Var<D>>& in) {
            return mpfa_forward<D>(g, {in[0], in[1], in[2]}, in[3], in[4], true, cfg, "mpfa").fused;
        };
        p.params = init_params(seed, [&](Graph<D>& g) {
            std::vector<Var<D>> in;
            for (int i = 0; i < 5; ++i)
                in.push_back(g.input(T64({1, 4, 4, 4})));
            f(g, in);
        });
        p.loss = [f, seed](Graph<D>& g, const std::vector<Var<D>>& in) { return weighted_sum(f(g, in), seed); };
        p.probes = 300;
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "reconstructor_forward";
        p.inputs = {rnd({1, 1, 16, 16}, 0, 1)};
        p.params = init_params(seed, [&](Graph<D>& g) { reconstructor_forward(g, g.input(T64({1, 1, 16, 16})), cfg, "rec"); });
        p.loss = [cfg, seed](Graph<D>& g, const std::vector<Var<D>>& in) {
            const auto taps = reconstructor_forward(g, in[0], cfg, "rec");
            return weighted_sum(taps.reconstruction, seed) + weighted_sum(taps.down.back(), seed + 1);
        };
        p.probes = 300;
        out.push_back(std::move(p));
    }
    {
        GradProblem p;
        p.name = "discriminator_forward";
        p.inputs = {rnd({1, 1, 16, 16}, 0, 1), rnd({1, 1, 16, 16}, 0, 1), rnd({1, 1, 16, 16}, 0, 1),
                    rnd({1, 1, 16, 16}, 0, 1)};
        auto f = [cfg](Graph<D>& g, const std::vector<Var<D>>& in) {
            return discriminator_forward<D>(g, {in[0], in[1], in[2]}, in[3], cfg);
        };
        p.params = init_params(seed, [&](Graph<D>& g) {
            std::vector<Var<D>> in;
            for (int i = 0; i < 4; ++i)
                in.push_back(g.input(T64({1, 1, 16, 16})));
            f(g, in);
        });
        p.loss = [f, seed](Graph<D>& g, const std::vector<Var<D>>& in) { return weighted_sum(f(g, in), seed); };
        p.probes = 300;
        out.push_back(std::move(p));
    }
    return out;
}

GradProblem full_problem(std::uint64_t seed)
{
    Rng rng(derive_seed(seed, "full_problem"));
    NetConfig cfg;
    GradProblem p;
    p.name = "generator_forward(full)";
    p.params = init_generator(cfg, 16, seed).cast<D>();
    const auto images = std::make_shared<const std::vector<T64>>(
        std::vector<T64>{random_tensor(rng, {1, 1, 16, 16}, 0, 1), random_tensor(rng, {1, 1, 16, 16}, 0, 1),
                         random_tensor(rng, {1, 1, 16, 16}, 0, 1)});
    p.loss = [cfg, images](Graph<D>& g, const std::vector<Var<D>>&) {
        std::vector<Var<D>> in;
        for (const auto& t : *images)
            in.push_back(g.input(t));
        return mean(generator_forward(g, in, cfg).synthesis);
    };
    p.probes = 256;
    return p;
}

std::vector<GradReport> run_gradcheck(GradScope scope, const GradCheckOptions& options)
{
    std::vector<GradReport> reports;
    switch (scope) {
    case GradScope::op:
        for (const auto& p : op_problems(options.seed))
            reports.push_back(grad_check(p, options));
        break;
    case GradScope::block:
        for (const auto& p : block_problems(options.seed))
            reports.push_back(grad_check(p, options));
        break;
    case GradScope::full:
        reports.push_back(grad_check(full_problem(options.seed), options));
        break;
    }
    return reports;
}

} // namespace mpsynth
