#include "mpsynth/gradcheck.hpp"
#include "mpsynth/graph.hpp"

#include "test_util.hpp"

#include <cmath>
#include <limits>

using namespace mpsynth;
using mpsynth::testing::random_tensor;

namespace {

// Direct six-loop cross-correlation with zero padding.
BasicTensor<double> conv_oracle(const BasicTensor<double>& x, const BasicTensor<double>& w,
                                const BasicTensor<double>& b, std::size_t stride, std::size_t pad)
{
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), k = w.dim(2);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    BasicTensor<double> y({N, O, Ho, Wo});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < Ho; ++i)
                for (std::size_t j = 0; j < Wo; ++j) {
                    double acc = b[o];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t u = 0; u < k; ++u)
                            for (std::size_t v = 0; v < k; ++v) {
                                const auto r = static_cast<std::ptrdiff_t>(i * stride + u) - static_cast<std::ptrdiff_t>(pad);
                                const auto s = static_cast<std::ptrdiff_t>(j * stride + v) - static_cast<std::ptrdiff_t>(pad);
                                if (r < 0 || s < 0 || r >= static_cast<std::ptrdiff_t>(H) || s >= static_cast<std::ptrdiff_t>(W))
                                    continue;
                                acc += x.at(n, c, static_cast<std::size_t>(r), static_cast<std::size_t>(s)) * w.at(o, c, u, v);
                            }
                    y.at(n, o, i, j) = acc;
                }
    return y;
}

template <typename T>
BasicTensor<T> pool_oracle(const BasicTensor<T>& x, PoolKind kind)
{
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2) / 2, W = x.dim(3) / 2;
    BasicTensor<T> y({N, C, H, W});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    double best = -std::numeric_limits<double>::infinity(), total = 0;
                    for (std::size_t u = 0; u < 2; ++u)
                        for (std::size_t v = 0; v < 2; ++v) {
                            const double e = x.at(n, c, 2 * i + u, 2 * j + v);
                            best = std::max(best, e);
                            total += e;
                        }
                    y.at(n, c, i, j) = static_cast<T>(kind == PoolKind::max ? best : total / 4);
                }
    return y;
}

Tensor t4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::vector<float> v)
{
    return Tensor({n, c, h, w}, std::move(v));
}

} // namespace

TEST(Conv2d, CenterOfOnesSumsNine)
{
    Graph<float> g;
    auto y = conv2d(g.input(Tensor({1, 1, 3, 3}, 1.0f)), g.input(Tensor({1, 1, 3, 3}, 1.0f)),
                    g.input(Tensor({1}, 0.0f)), 1, 1);
    ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
    EXPECT_EQ(y.value().at(0, 0, 1, 1), 9.0f);
    EXPECT_EQ(y.value().at(0, 0, 0, 0), 4.0f);
}

TEST(Conv2d, UnitKernelIsIdentity)
{
    Rng rng(3);
    const Tensor x = random_tensor(rng, {2, 1, 5, 7});
    Graph<float> g;
    auto y = conv2d(g.input(x), g.input(Tensor({1, 1, 1, 1}, 1.0f)), g.input(Tensor({1}, 0.0f)), 1, 0);
    EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, MultiChannelIdentityKernelIsIdentity)
{
    Rng rng(4);
    const Tensor x = random_tensor(rng, {1, 3, 4, 4});
    Tensor w({3, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c)
        w.at(c, c, 0, 0) = 1.0f;
    Graph<float> g;
    auto y = conv2d(g.input(x), g.input(w), g.input(Tensor({3})), 1, 0);
    EXPECT_EQ(y.value(), x);
}

TEST(Conv2d, MatchesNestedLoopOracle)
{
    Rng rng(11);
    const auto x = random_tensor<double>(rng, {2, 3, 5, 5});
    const auto w = random_tensor<double>(rng, {4, 3, 3, 3});
    const auto b = random_tensor<double>(rng, {4});
    for (auto [stride, pad] : {std::pair<std::size_t, std::size_t>{1, 1}, {1, 0}, {2, 1}, {2, 0}, {1, 2}}) {
        Graph<double> g;
        const auto y = conv2d(g.input(x), g.input(w), g.input(b), stride, pad).value();
        const auto ref = conv_oracle(x, w, b, stride, pad);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < y.size(); ++i)
            EXPECT_NEAR(y[i], ref[i], 1e-6) << "stride " << stride << " pad " << pad << " at " << i;

        Graph<float> gf;
        const auto yf = conv2d(gf.input(x.cast<float>()), gf.input(w.cast<float>()), gf.input(b.cast<float>()), stride, pad)
                            .value();
        for (std::size_t i = 0; i < yf.size(); ++i)
            EXPECT_NEAR(yf[i], ref[i], 1e-5);
    }
}

TEST(Conv2d, OutputSizeFollowsFloorRule)
{
    Graph<float> g;
    auto y = conv2d(g.input(Tensor({1, 2, 7, 6})), g.input(Tensor({3, 2, 3, 3})), g.input(Tensor({3})), 2, 1);
    EXPECT_EQ(y.shape(), (Shape{1, 3, 4, 3}));
}

TEST(Conv2d, ChannelMismatchIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(conv2d(g.input(Tensor({1, 2, 4, 4})), g.input(Tensor({1, 3, 3, 3})), g.input(Tensor({1})), 1, 1),
                 ContractError);
    EXPECT_THROW(conv2d(g.input(Tensor({1, 1, 2, 2})), g.input(Tensor({1, 1, 5, 5})), g.input(Tensor({1})), 1, 1),
                 ContractError);
}

TEST(Pool, TwoByTwoExamples)
{
    Graph<float> g;
    const Tensor x = t4(1, 1, 2, 2, {1, 2, 3, 4});
    EXPECT_EQ(pool(g.input(x), PoolKind::max, 2, 2).value()[0], 4.0f);
    EXPECT_EQ(pool(g.input(x), PoolKind::average, 2, 2).value()[0], 2.5f);
}

TEST(Pool, MatchesWindowOracle)
{
    Rng rng(12);
    const Tensor x = random_tensor(rng, {1, 2, 8, 8});
    for (PoolKind kind : {PoolKind::max, PoolKind::average}) {
        Graph<float> g;
        const auto y = pool(g.input(x), kind, 2, 2).value();
        const auto ref = pool_oracle(x, kind);
        ASSERT_EQ(y.shape(), ref.shape());
        for (std::size_t i = 0; i < y.size(); ++i)
            EXPECT_NEAR(y[i], ref[i], 1e-7);
    }
}

TEST(Pool, MaxGradientGoesToFirstTie)
{
    Graph<float> g;
    auto x = g.leaf(t4(1, 1, 2, 2, {5, 5, 1, 5}), true, "x");
    auto grads = g.backward(sum(pool(x, PoolKind::max, 2, 2)));
    EXPECT_EQ(grads.at("x").vector(), (std::vector<float>{1, 0, 0, 0}));
}

TEST(Pool, AverageGradientIsQuarter)
{
    Graph<float> g;
    auto x = g.leaf(t4(1, 1, 2, 2, {1, 2, 3, 4}), true, "x");
    auto grads = g.backward(sum(pool(x, PoolKind::average, 2, 2)));
    EXPECT_EQ(grads.at("x").vector(), (std::vector<float>{0.25f, 0.25f, 0.25f, 0.25f}));
}

TEST(Pool, WindowLargerThanInputIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(pool(g.input(Tensor({1, 1, 1, 4})), PoolKind::max, 2, 2), ContractError);
}

TEST(Upsample, NearestNeighbourReplication)
{
    Graph<float> g;
    auto y = upsample2x(g.input(t4(1, 1, 2, 2, {1, 2, 3, 4})));
    EXPECT_EQ(y.value().vector(), (std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
}

TEST(Upsample, AveragePoolUndoesUpsample)
{
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        const Tensor x = random_tensor(rng, {2, 3, 3, 5}, -10, 10);
        Graph<float> g;
        EXPECT_EQ(pool(upsample2x(g.input(x)), PoolKind::average, 2, 2).value(), x);
    }
}

TEST(Upsample, GradientOfSumIsFour)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({1, 2, 3, 3}, 0.5f), true, "x");
    auto grads = g.backward(sum(upsample2x(x)));
    for (float v : grads.at("x").data())
        EXPECT_EQ(v, 4.0f);
}

TEST(Dense, IdentityAndOnes)
{
    Rng rng(14);
    const Tensor x = random_tensor(rng, {3, 4});
    Tensor eye({4, 4});
    for (std::size_t i = 0; i < 4; ++i)
        eye[i * 4 + i] = 1;
    Graph<float> g;
    EXPECT_EQ(dense(g.input(x), g.input(eye), g.input(Tensor({4}))).value(), x);
    auto y = dense(g.input(Tensor({1, 6}, 1.0f)), g.input(Tensor({1, 6}, 1.0f)), g.input(Tensor({1})));
    EXPECT_EQ(y.value()[0], 6.0f);
}

TEST(Dense, MatchesLoopOracle)
{
    Rng rng(15);
    const auto x = random_tensor<double>(rng, {4, 8});
    const auto w = random_tensor<double>(rng, {3, 8});
    const auto b = random_tensor<double>(rng, {3});
    Graph<double> g;
    const auto y = dense(g.input(x), g.input(w), g.input(b)).value();
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t o = 0; o < 3; ++o) {
            double acc = b[o];
            for (std::size_t c = 0; c < 8; ++c)
                acc += x[n * 8 + c] * w[o * 8 + c];
            EXPECT_NEAR(y[n * 3 + o], acc, 1e-6);
        }
}

TEST(Dense, InnerDimensionMismatchIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(dense(g.input(Tensor({2, 3})), g.input(Tensor({4, 5})), g.input(Tensor({4}))), ContractError);
}

TEST(Activation, PointValues)
{
    Graph<float> g;
    EXPECT_EQ(sigmoid(g.input(Tensor({1}, 0.0f))).value()[0], 0.5f);
    auto r = relu(g.input(Tensor({2}, std::vector<float>{-1, 2})));
    EXPECT_EQ(r.value().vector(), (std::vector<float>{0, 2}));
    auto l = activation(g.input(Tensor({2}, std::vector<float>{-1, 2})), ActKind::leaky_relu);
    EXPECT_FLOAT_EQ(l.value()[0], -0.2f);
    EXPECT_EQ(l.value()[1], 2.0f);
    auto n = activation(g.input(Tensor({1}, 3.0f)), ActKind::neg);
    EXPECT_EQ(n.value()[0], -3.0f);
    auto lg = activation(g.input(Tensor({2}, std::vector<float>{0.0f, 1.0f})), ActKind::log);
    EXPECT_NEAR(lg.value()[0], std::log(1e-7), 1e-4);
    EXPECT_EQ(lg.value()[1], 0.0f);
}

TEST(Activation, SigmoidSlopeAtZeroMatchesFiniteDifference)
{
    const double eps = 1e-3;
    auto f = [](double x) {
        Graph<double> g;
        return sigmoid(g.input(BasicTensor<double>({1}, x))).value()[0];
    };
    const double numeric = (f(eps) - f(-eps)) / (2 * eps);
    Graph<double> g;
    auto x = g.leaf(BasicTensor<double>({1}, 0.0), true, "x");
    const double analytic = g.backward(sigmoid(x)).at("x")[0];
    EXPECT_EQ(analytic, 0.25);
    EXPECT_NEAR(numeric, 0.25, 1e-7);
}

TEST(Elementwise, Examples)
{
    Graph<float> g;
    auto a = g.input(Tensor({2}, std::vector<float>{1, 2}));
    auto b = g.input(Tensor({2}, std::vector<float>{3, 0}));
    EXPECT_EQ(elementwise(a, b, BinaryKind::max).value().vector(), (std::vector<float>{3, 2}));
    EXPECT_EQ((a - b).value().vector(), (std::vector<float>{-2, 2}));
    EXPECT_EQ((a * b).value().vector(), (std::vector<float>{3, 0}));
    EXPECT_EQ((a + g.input(Tensor({2}))).value(), a.value());
}

TEST(Elementwise, ChannelBroadcast)
{
    Graph<float> g;
    auto w = g.input(t4(1, 2, 1, 1, {0.5f, 2.0f}));
    auto x = g.input(Tensor({1, 2, 2, 2}, 1.0f));
    const auto y = (x * w).value();
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(y[i], 0.5f);
        EXPECT_EQ(y[4 + i], 2.0f);
    }
}

TEST(Elementwise, ShapeMismatchIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(g.input(Tensor({2, 3})) + g.input(Tensor({3, 2})), ContractError);
}

TEST(Elementwise, AlgebraicProperties)
{
    Rng rng(16);
    for (int trial = 0; trial < 20; ++trial) {
        const Tensor ta = random_tensor(rng, {2, 3, 4, 4}), tb = random_tensor(rng, {2, 3, 4, 4});
        Graph<float> g;
        auto a = g.input(ta), b = g.input(tb);
        EXPECT_EQ((a + b).value(), (b + a).value());
        EXPECT_EQ((a * b).value(), (b * a).value());
        EXPECT_EQ(elementwise(a, b, BinaryKind::max).value(), elementwise(b, a, BinaryKind::max).value());
        for (float v : (a - a).value().data())
            EXPECT_EQ(v, 0.0f);
    }
}

TEST(Elementwise, MaxTieRoutesGradientToFirstOperand)
{
    Graph<float> g;
    auto a = g.leaf(Tensor({2}, 1.0f), true, "a");
    auto b = g.leaf(Tensor({2}, 1.0f), true, "b");
    auto grads = g.backward(sum(elementwise(a, b, BinaryKind::max)));
    EXPECT_EQ(grads.at("a").vector(), (std::vector<float>{1, 1}));
    EXPECT_EQ(grads.at("b").vector(), (std::vector<float>{0, 0}));
}

TEST(Concat, StacksChannelsInOrder)
{
    Rng rng(17);
    const Tensor a = random_tensor(rng, {2, 1, 3, 3}), b = random_tensor(rng, {2, 3, 3, 3});
    Graph<float> g;
    const auto y = concat_channels<float>({g.input(a), g.input(b)}).value();
    ASSERT_EQ(y.shape(), (Shape{2, 4, 3, 3}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                EXPECT_EQ(y.at(n, 0, i, j), a.at(n, 0, i, j));
                for (std::size_t c = 0; c < 3; ++c)
                    EXPECT_EQ(y.at(n, 1 + c, i, j), b.at(n, c, i, j));
            }
    EXPECT_EQ(concat_channels<float>({g.input(a)}).value(), a);
}

TEST(Concat, SpatialMismatchIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(concat_channels<float>({g.input(Tensor({1, 1, 2, 2})), g.input(Tensor({1, 1, 3, 3}))}), ContractError);
}

TEST(Concat, GradientOfSumIsOnes)
{
    Graph<float> g;
    auto a = g.leaf(Tensor({1, 1, 2, 2}, 3.0f), true, "a");
    auto b = g.leaf(Tensor({1, 2, 2, 2}, -1.0f), true, "b");
    auto grads = g.backward(sum(concat_channels<float>({a, b})));
    for (float v : grads.at("a").data())
        EXPECT_EQ(v, 1.0f);
    for (float v : grads.at("b").data())
        EXPECT_EQ(v, 1.0f);
}

TEST(Concat, SplitAfterConcatReproducesIndependentBranches)
{
    Rng rng(18);
    const Tensor ta = random_tensor(rng, {1, 2, 3, 3}), tb = random_tensor(rng, {1, 3, 3, 3});
    const Tensor wa = random_tensor(rng, {1, 2, 3, 3}), wb = random_tensor(rng, {1, 3, 3, 3});

    Graph<float> g1;
    auto a1 = g1.leaf(ta, true, "a"), b1 = g1.leaf(tb, true, "b");
    auto cat = concat_channels<float>({a1, b1});
    auto l1 = sum(slice_channels(cat, 0, 2) * g1.input(wa)) + sum(slice_channels(cat, 2, 3) * g1.input(wb));
    auto grads1 = g1.backward(l1);

    Graph<float> g2;
    auto a2 = g2.leaf(ta, true, "a"), b2 = g2.leaf(tb, true, "b");
    auto grads2 = g2.backward(sum(a2 * g2.input(wa)) + sum(b2 * g2.input(wb)));
    EXPECT_EQ(grads1.at("a"), grads2.at("a"));
    EXPECT_EQ(grads1.at("b"), grads2.at("b"));
}

TEST(Backward, SumOfSquares)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({2}, std::vector<float>{1, -2}), true, "x");
    auto grads = g.backward(sum(x * x));
    EXPECT_EQ(grads.at("x").vector(), (std::vector<float>{2, -4}));
}

TEST(Backward, L1SubgradientConvention)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({3}, std::vector<float>{3, -1, 0}), true, "x");
    auto grads = g.backward(sum(activation(x, ActKind::abs)));
    EXPECT_EQ(grads.at("x").vector(), (std::vector<float>{1, -1, 0}));
}

TEST(Backward, NonScalarLossIsContractError)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({2}), true, "x");
    EXPECT_THROW(g.backward(x * x), ContractError);
}

TEST(Backward, SecondBackwardIsStateError)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({2}, 1.0f), true, "x");
    auto loss = sum(x);
    g.backward(loss);
    EXPECT_THROW(g.backward(loss), StateError);
    EXPECT_THROW(g.input(Tensor({1})), StateError);
}

TEST(Backward, SkipsUnnamedAndConstantLeaves)
{
    Graph<float> g;
    auto x = g.leaf(Tensor({2}, 1.0f), true, "x");
    auto c = g.input(Tensor({2}, 2.0f));
    auto grads = g.backward(sum(x * c));
    EXPECT_EQ(grads.size(), 1u);
    EXPECT_EQ(grads.at("x").vector(), (std::vector<float>{2, 2}));
}

TEST(Backward, ConvPoolSigmoidChainMatchesFiniteDifferences)
{
    const auto problems = op_problems(5);
    const auto it = std::find_if(problems.begin(), problems.end(),
                                 [](const GradProblem& p) { return p.name.rfind("chain(", 0) == 0; });
    ASSERT_NE(it, problems.end());
    const GradReport r = grad_check(*it, GradCheckOptions{});
    EXPECT_TRUE(r.pass) << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-4);
    EXPECT_GT(r.probe_count, 0u);
}

TEST(Params, FrozenStoreReceivesNoGradientAndSharedWeightsAccumulate)
{
    ParamStore<float> trainable, frozen;
    trainable.set("w", Tensor({2}, 3.0f));
    frozen.set("f", Tensor({2}, 5.0f));
    Graph<float> g;
    g.bind(trainable, true);
    g.bind(frozen, false);
    auto x = g.input(Tensor({2}, std::vector<float>{1, 2}));
    auto loss = sum(g.param("w") * x) + sum(g.param("w") * g.param("f"));
    auto grads = g.backward(loss);
    EXPECT_EQ(grads.count("f"), 0u);
    EXPECT_EQ(grads.at("w").vector(), (std::vector<float>{6, 7}));
}

TEST(Params, LazyInitIsSeededHeNormal)
{
    auto make = [](std::uint64_t seed) {
        ParamStore<float> s;
        Graph<float> g;
        g.bind(s, true);
        g.enable_param_init(seed);
        g.param("a.w", {64, 32, 3, 3}, 32 * 9);
        g.param("a.b", {64}, 0);
        return s;
    };
    const auto s1 = make(9), s2 = make(9), s3 = make(10);
    EXPECT_EQ(s1, s2);
    EXPECT_NE(s1, s3);
    for (float v : s1.get("a.b").data())
        EXPECT_EQ(v, 0.0f);
    double sq = 0;
    for (float v : s1.get("a.w").data())
        sq += double(v) * v;
    const double stddev = std::sqrt(sq / double(s1.get("a.w").size()));
    EXPECT_NEAR(stddev, std::sqrt(2.0 / 288.0), 0.05 * std::sqrt(2.0 / 288.0));
}

TEST(Params, UnboundParameterIsContractError)
{
    Graph<float> g;
    EXPECT_THROW(g.param("missing"), ContractError);
}

TEST(NonFinite, LeafAndPrimitiveOutputsAreChecked)
{
    Graph<float> g;
    EXPECT_THROW(g.input(Tensor({1}, std::numeric_limits<float>::quiet_NaN())), NonFiniteError);
    auto x = g.input(Tensor({1}, 1e30f));
    try {
        affine(x, 1e30, 0.0);
        FAIL() << "expected NonFiniteError";
    } catch (const NonFiniteError& e) {
        EXPECT_NE(std::string(e.what()).find("affine"), std::string::npos) << e.what();
        EXPECT_EQ(e.exit_code(), 4);
    }
}

TEST(Determinism, RepeatedForwardBackwardIsBitIdentical)
{
    Rng rng(19);
    const Tensor x = random_tensor(rng, {2, 3, 8, 8});
    const Tensor w = random_tensor(rng, {5, 3, 3, 3});
    const Tensor b = random_tensor(rng, {5});
    auto run = [&] {
        Graph<float> g;
        auto wv = g.leaf(w, true, "w");
        auto loss = mean(sigmoid(pool(conv2d(g.input(x), wv, g.input(b), 1, 1), PoolKind::max, 2, 2)));
        const float value = loss.value()[0];
        return std::make_pair(value, g.backward(loss).at("w"));
    };
    const auto r1 = run(), r2 = run();
    EXPECT_EQ(r1.first, r2.first);
    EXPECT_EQ(r1.second, r2.second);
}

TEST(Tensor, ShapeInvariants)
{
    EXPECT_THROW(Tensor({2, 0}), ContractError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<float>{1, 2, 3}), ContractError);
    const Tensor t({2, 3}, 1.5f);
    EXPECT_EQ(t.size(), shape_numel(t.shape()));
    EXPECT_THROW(t.reshaped({4, 2}), ContractError);
}
