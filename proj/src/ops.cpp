#include "mpsynth/graph.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>

namespace mpsynth {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// Row-major GEMM, C (+)= op(A) * op(B). Eigen's blocking is fixed for a
// given problem size, so results are bit-reproducible run to run.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
          bool accumulate)
{
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    MatMap<T> C(c, M, N);
    ConstMatMap<T> A(a, trans_a ? K : M, trans_a ? M : K);
    ConstMatMap<T> B(b, trans_b ? N : K, trans_b ? K : N);
    if (!accumulate)
        C.setZero();
    if (!trans_a && !trans_b)
        C.noalias() += A * B;
    else if (!trans_a && trans_b)
        C.noalias() += A * B.transpose();
    else if (trans_a && !trans_b)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() += A.transpose() * B.transpose();
}

[[noreturn]] void contract(const std::string& op, const std::string& what)
{
    throw ContractError(op + ": " + what);
}

template <typename T>
Graph<T>& owner(std::initializer_list<const Var<T>*> vars, const char* op)
{
    Graph<T>* g = (*vars.begin())->graph();
    if (!g)
        contract(op, "unbound operand");
    for (const auto* v : vars)
        g->check_owner(*v, op);
    return *g;
}

void require_rank4(const Shape& s, const char* op, const char* what)
{
    if (s.size() != 4)
        contract(op, std::string(what) + " must be N x C x H x W, got " + shape_string(s));
}

struct ConvGeom {
    std::size_t n, c, h, w, co, k, stride, pad, ho, wo;
    std::size_t rows() const { return c * k * k; }
    std::size_t cols() const { return n * ho * wo; }
};

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* col)
{
    const std::size_t hw_out = g.ho * g.wo;
    const std::size_t ncols = g.cols();
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                T* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    const T* plane = x + (n * g.c + c) * g.h * g.w;
                    T* dst = row + n * hw_out;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                        for (std::size_t ow = 0; ow < g.wo; ++ow) {
                            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.h) &&
                                                iw < static_cast<std::ptrdiff_t>(g.w);
                            dst[oh * g.wo + ow] = inside ? plane[ih * static_cast<std::ptrdiff_t>(g.w) + iw] : T{0};
                        }
                    }
                }
            }
}

template <typename T>
void col2im_add(const T* col, const ConvGeom& g, T* dx)
{
    const std::size_t hw_out = g.ho * g.wo;
    const std::size_t ncols = g.cols();
    for (std::size_t c = 0; c < g.c; ++c)
        for (std::size_t ki = 0; ki < g.k; ++ki)
            for (std::size_t kj = 0; kj < g.k; ++kj) {
                const T* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
                for (std::size_t n = 0; n < g.n; ++n) {
                    T* plane = dx + (n * g.c + c) * g.h * g.w;
                    const T* src = row + n * hw_out;
                    for (std::size_t oh = 0; oh < g.ho; ++oh) {
                        const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.h))
                            continue;
                        for (std::size_t ow = 0; ow < g.wo; ++ow) {
                            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.w))
                                continue;
                            plane[ih * static_cast<std::ptrdiff_t>(g.w) + iw] += src[oh * g.wo + ow];
                        }
                    }
                }
            }
}

template <typename T>
void hash_mask(Graph<T>& g, const BasicTensor<T>& x, double threshold)
{
    if (!g.tracking_kinks())
        return;
    std::uint64_t bits = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        bits = (bits << 1) | (x[i] > threshold ? 1u : 0u);
        if (i % 64 == 63) {
            g.note_kink(bits);
            bits = 0;
        }
    }
    g.note_kink(bits);
}

} // namespace

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t pad)
{
    static constexpr const char* op = "conv2d";
    Graph<T>& g = owner<T>({&input, &weight, &bias}, op);
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    require_rank4(xs, op, "input");
    require_rank4(ws, op, "weight");
    if (ws[2] != ws[3])
        contract(op, "kernel must be square, got " + shape_string(ws));
    if (ws[1] != xs[1])
        contract(op, "weight expects " + std::to_string(ws[1]) + " input channels, input has " + std::to_string(xs[1]));
    if (bias.shape() != Shape{ws[0]})
        contract(op, "bias shape " + shape_string(bias.shape()) + " does not match " + std::to_string(ws[0]) + " outputs");
    if (stride < 1)
        contract(op, "stride must be >= 1");
    const std::size_t k = ws[2];
    if (xs[2] + 2 * pad < k || xs[3] + 2 * pad < k)
        contract(op, "padded input " + shape_string(xs) + " smaller than kernel " + std::to_string(k));

    ConvGeom geo{xs[0], xs[1], xs[2], xs[3], ws[0], k, stride, pad, 0, 0};
    geo.ho = (geo.h + 2 * pad - k) / stride + 1;
    geo.wo = (geo.w + 2 * pad - k) / stride + 1;

    const std::size_t rows = geo.rows(), cols = geo.cols(), hw_out = geo.ho * geo.wo;
    std::vector<T> col(rows * cols);
    im2col(input.value().raw(), geo, col.data());
    std::vector<T> out_mat(geo.co * cols);
    gemm<T>(false, false, geo.co, cols, rows, weight.value().raw(), col.data(), out_mat.data(), false);

    BasicTensor<T> out({geo.n, geo.co, geo.ho, geo.wo});
    const T* b = bias.value().raw();
    for (std::size_t n = 0; n < geo.n; ++n)
        for (std::size_t co = 0; co < geo.co; ++co) {
            const T* src = out_mat.data() + co * cols + n * hw_out;
            T* dst = out.raw() + (n * geo.co + co) * hw_out;
            for (std::size_t p = 0; p < hw_out; ++p)
                dst[p] = src[p] + b[co];
        }

    const auto xi = input.id(), wi = weight.id(), bi = bias.id();
    return g.record(op, std::move(out), {xi, wi, bi}, [geo, xi, wi, bi](Graph<T>& g, const BasicTensor<T>& dout) {
        const std::size_t rows = geo.rows(), cols = geo.cols(), hw_out = geo.ho * geo.wo;
        std::vector<T> dmat(geo.co * cols);
        for (std::size_t n = 0; n < geo.n; ++n)
            for (std::size_t co = 0; co < geo.co; ++co) {
                const T* src = dout.raw() + (n * geo.co + co) * hw_out;
                std::copy(src, src + hw_out, dmat.data() + co * cols + n * hw_out);
            }
        if (g.requires_grad(bi)) {
            T* db = g.grad(bi).raw();
            for (std::size_t co = 0; co < geo.co; ++co) {
                double acc = 0.0;
                for (std::size_t p = 0; p < cols; ++p)
                    acc += dmat[co * cols + p];
                db[co] += static_cast<T>(acc);
            }
        }
        if (g.requires_grad(wi)) {
            std::vector<T> col(rows * cols);
            im2col(g.value(xi).raw(), geo, col.data());
            gemm<T>(false, true, geo.co, rows, cols, dmat.data(), col.data(), g.grad(wi).raw(), true);
        }
        if (g.requires_grad(xi)) {
            std::vector<T> dcol(rows * cols);
            gemm<T>(true, false, rows, cols, geo.co, g.value(wi).raw(), dmat.data(), dcol.data(), false);
            col2im_add(dcol.data(), geo, g.grad(xi).raw());
        }
    });
}

template <typename T>
Var<T> pool(Var<T> input, PoolKind kind, std::size_t k, std::size_t stride)
{
    const char* op = kind == PoolKind::max ? "max_pool" : "avg_pool";
    Graph<T>& g = owner<T>({&input}, op);
    const Shape& xs = input.shape();
    require_rank4(xs, op, "input");
    if (k < 1 || stride < 1)
        contract(op, "window and stride must be >= 1");
    if (k > xs[2] || k > xs[3])
        contract(op, "window " + std::to_string(k) + " larger than input " + shape_string(xs));
    if (k == stride && (xs[2] % stride != 0 || xs[3] % stride != 0))
        contract(op, "spatial size " + shape_string(xs) + " not divisible by stride " + std::to_string(stride));

    const std::size_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const std::size_t Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
    BasicTensor<T> out({N, C, Ho, Wo});
    const T* x = input.value().raw();
    auto argmax = std::make_shared<std::vector<std::uint32_t>>();
    if (kind == PoolKind::max)
        argmax->resize(out.size());
    const double inv = 1.0 / static_cast<double>(k * k);

    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const T* plane = x + nc * H * W;
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
                if (kind == PoolKind::max) {
                    std::size_t best = (oh * stride) * W + ow * stride;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j) {
                            const std::size_t idx = (oh * stride + i) * W + ow * stride + j;
                            if (plane[idx] > plane[best])
                                best = idx;
                        }
                    (*argmax)[o] = static_cast<std::uint32_t>(best);
                    out[o] = plane[best];
                } else {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < k; ++i)
                        for (std::size_t j = 0; j < k; ++j)
                            acc += plane[(oh * stride + i) * W + ow * stride + j];
                    out[o] = static_cast<T>(acc * inv);
                }
            }
    }
    if (kind == PoolKind::max && g.tracking_kinks())
        for (auto a : *argmax)
            g.note_kink(a);

    const auto xi = input.id();
    return g.record(op, std::move(out), {xi},
                    [=](Graph<T>& g, const BasicTensor<T>& dout) {
                        T* dx = g.grad(xi).raw();
                        std::size_t o = 0;
                        for (std::size_t nc = 0; nc < N * C; ++nc) {
                            T* plane = dx + nc * H * W;
                            for (std::size_t oh = 0; oh < Ho; ++oh)
                                for (std::size_t ow = 0; ow < Wo; ++ow, ++o) {
                                    if (kind == PoolKind::max) {
                                        plane[(*argmax)[o]] += dout[o];
                                    } else {
                                        const T share = static_cast<T>(dout[o] * inv);
                                        for (std::size_t i = 0; i < k; ++i)
                                            for (std::size_t j = 0; j < k; ++j)
                                                plane[(oh * stride + i) * W + ow * stride + j] += share;
                                    }
                                }
                        }
                    });
}

template <typename T>
Var<T> global_pool(Var<T> input, PoolKind kind)
{
    const char* op = kind == PoolKind::max ? "global_max_pool" : "global_avg_pool";
    Graph<T>& g = owner<T>({&input}, op);
    const Shape& xs = input.shape();
    require_rank4(xs, op, "input");
    const std::size_t NC = xs[0] * xs[1], HW = xs[2] * xs[3];
    BasicTensor<T> out({xs[0], xs[1], 1, 1});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(NC);
    const T* x = input.value().raw();
    for (std::size_t nc = 0; nc < NC; ++nc) {
        const T* plane = x + nc * HW;
        if (kind == PoolKind::max) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < HW; ++i)
                if (plane[i] > plane[best])
                    best = i;
            (*argmax)[nc] = static_cast<std::uint32_t>(best);
            out[nc] = plane[best];
        } else {
            double acc = 0.0;
            for (std::size_t i = 0; i < HW; ++i)
                acc += plane[i];
            out[nc] = static_cast<T>(acc / static_cast<double>(HW));
        }
    }
    if (kind == PoolKind::max && g.tracking_kinks())
        for (auto a : *argmax)
            g.note_kink(a);
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        T* dx = g.grad(xi).raw();
        for (std::size_t nc = 0; nc < NC; ++nc) {
            if (kind == PoolKind::max) {
                dx[nc * HW + (*argmax)[nc]] += dout[nc];
            } else {
                const T share = static_cast<T>(dout[nc] / static_cast<double>(HW));
                for (std::size_t i = 0; i < HW; ++i)
                    dx[nc * HW + i] += share;
            }
        }
    });
}

template <typename T>
Var<T> upsample2x(Var<T> input)
{
    static constexpr const char* op = "upsample2x";
    Graph<T>& g = owner<T>({&input}, op);
    const Shape& xs = input.shape();
    require_rank4(xs, op, "input");
    const std::size_t NC = xs[0] * xs[1], H = xs[2], W = xs[3];
    BasicTensor<T> out({xs[0], xs[1], 2 * H, 2 * W});
    const T* x = input.value().raw();
    for (std::size_t nc = 0; nc < NC; ++nc)
        for (std::size_t h = 0; h < 2 * H; ++h)
            for (std::size_t w = 0; w < 2 * W; ++w)
                out[(nc * 2 * H + h) * 2 * W + w] = x[(nc * H + h / 2) * W + w / 2];
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        T* dx = g.grad(xi).raw();
        for (std::size_t nc = 0; nc < NC; ++nc)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    const T* d = dout.raw() + (nc * 2 * H + 2 * h) * 2 * W + 2 * w;
                    dx[(nc * H + h) * W + w] += (d[0] + d[1]) + (d[2 * W] + d[2 * W + 1]);
                }
    });
}

template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias)
{
    static constexpr const char* op = "dense";
    Graph<T>& g = owner<T>({&input, &weight, &bias}, op);
    const Shape& xs = input.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 2 || ws.size() != 2)
        contract(op, "expects N x C input and C_out x C weight, got " + shape_string(xs) + " and " + shape_string(ws));
    if (xs[1] != ws[1])
        contract(op, "inner dimensions differ: " + shape_string(xs) + " vs " + shape_string(ws));
    if (bias.shape() != Shape{ws[0]})
        contract(op, "bias shape " + shape_string(bias.shape()) + " does not match " + std::to_string(ws[0]) + " outputs");
    const std::size_t N = xs[0], C = xs[1], Co = ws[0];
    BasicTensor<T> out({N, Co});
    gemm<T>(false, true, N, Co, C, input.value().raw(), weight.value().raw(), out.raw(), false);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < Co; ++o)
            out[n * Co + o] += bias.value()[o];
    const auto xi = input.id(), wi = weight.id(), bi = bias.id();
    return g.record(op, std::move(out), {xi, wi, bi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        if (g.requires_grad(xi))
            gemm<T>(false, false, N, C, Co, dout.raw(), g.value(wi).raw(), g.grad(xi).raw(), true);
        if (g.requires_grad(wi))
            gemm<T>(true, false, Co, C, N, dout.raw(), g.value(xi).raw(), g.grad(wi).raw(), true);
        if (g.requires_grad(bi)) {
            T* db = g.grad(bi).raw();
            for (std::size_t o = 0; o < Co; ++o) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    acc += dout[n * Co + o];
                db[o] += static_cast<T>(acc);
            }
        }
    });
}

template <typename T>
Var<T> activation(Var<T> input, ActKind kind)
{
    const char* names[] = {"sigmoid", "relu", "leaky_relu", "log", "neg", "abs"};
    const char* op = names[static_cast<int>(kind)];
    Graph<T>& g = owner<T>({&input}, op);
    const BasicTensor<T>& x = input.value();
    BasicTensor<T> out(x.shape());
    const std::size_t n = x.size();
    switch (kind) {
    case ActKind::sigmoid:
        for (std::size_t i = 0; i < n; ++i) {
            const T v = x[i];
            out[i] = v >= 0 ? T{1} / (T{1} + std::exp(-v)) : std::exp(v) / (T{1} + std::exp(v));
        }
        break;
    case ActKind::relu:
        for (std::size_t i = 0; i < n; ++i)
            out[i] = x[i] > 0 ? x[i] : T{0};
        hash_mask(g, x, 0.0);
        break;
    case ActKind::leaky_relu:
        for (std::size_t i = 0; i < n; ++i)
            out[i] = x[i] > 0 ? x[i] : static_cast<T>(kLeakySlope) * x[i];
        hash_mask(g, x, 0.0);
        break;
    case ActKind::log:
        for (std::size_t i = 0; i < n; ++i)
            out[i] = std::log(std::max(x[i], static_cast<T>(kLogFloor)));
        hash_mask(g, x, kLogFloor);
        break;
    case ActKind::neg:
        for (std::size_t i = 0; i < n; ++i)
            out[i] = -x[i];
        break;
    case ActKind::abs:
        for (std::size_t i = 0; i < n; ++i)
            out[i] = std::abs(x[i]);
        hash_mask(g, x, 0.0);
        if (g.tracking_kinks()) {
            BasicTensor<T> negx(x.shape());
            for (std::size_t i = 0; i < n; ++i)
                negx[i] = -x[i];
            hash_mask(g, negx, 0.0);
        }
        break;
    }
    const auto xi = input.id();
    const auto oi = g.size();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        const BasicTensor<T>& x = g.value(xi);
        const BasicTensor<T>& y = g.value(oi);
        T* dx = g.grad(xi).raw();
        const std::size_t n = x.size();
        switch (kind) {
        case ActKind::sigmoid:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] += dout[i] * y[i] * (T{1} - y[i]);
            break;
        case ActKind::relu:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] += x[i] > 0 ? dout[i] : T{0};
            break;
        case ActKind::leaky_relu:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] += x[i] > 0 ? dout[i] : static_cast<T>(kLeakySlope) * dout[i];
            break;
        case ActKind::log:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] += x[i] > static_cast<T>(kLogFloor) ? dout[i] / x[i] : T{0};
            break;
        case ActKind::neg:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] -= dout[i];
            break;
        case ActKind::abs:
            for (std::size_t i = 0; i < n; ++i)
                dx[i] += x[i] > 0 ? dout[i] : (x[i] < 0 ? -dout[i] : T{0});
            break;
        }
    });
}

template <typename T>
Var<T> elementwise(Var<T> a, Var<T> b, BinaryKind kind)
{
    const char* names[] = {"add", "sub", "mul", "max"};
    const char* op = names[static_cast<int>(kind)];
    Graph<T>& g = owner<T>({&a, &b}, op);
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    // Broadcast: b is N x C x 1 x 1 against N x C x H x W, repeated over `inner`.
    std::size_t inner = 1;
    if (as != bs) {
        const bool channel_bcast = as.size() == 4 && bs.size() == 4 && as[0] == bs[0] && as[1] == bs[1] &&
                                   bs[2] == 1 && bs[3] == 1;
        if (!channel_bcast)
            contract(op, "incompatible shapes " + shape_string(as) + " and " + shape_string(bs));
        inner = as[2] * as[3];
    }
    const BasicTensor<T>& av = a.value();
    const BasicTensor<T>& bv = b.value();
    BasicTensor<T> out(as);
    const std::size_t n = av.size();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = av[i], y = bv[i / inner];
        switch (kind) {
        case BinaryKind::add: out[i] = x + y; break;
        case BinaryKind::sub: out[i] = x - y; break;
        case BinaryKind::mul: out[i] = x * y; break;
        case BinaryKind::max: out[i] = x >= y ? x : y; break;
        }
    }
    if (kind == BinaryKind::max && g.tracking_kinks()) {
        BasicTensor<T> diff(as);
        for (std::size_t i = 0; i < n; ++i)
            diff[i] = av[i] - bv[i / inner];
        hash_mask(g, diff, 0.0);
    }
    const auto ai = a.id(), bi = b.id();
    return g.record(op, std::move(out), {ai, bi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        const BasicTensor<T>& av = g.value(ai);
        const BasicTensor<T>& bv = g.value(bi);
        const std::size_t n = av.size();
        if (g.requires_grad(ai)) {
            T* da = g.grad(ai).raw();
            for (std::size_t i = 0; i < n; ++i) {
                switch (kind) {
                case BinaryKind::add:
                case BinaryKind::sub: da[i] += dout[i]; break;
                case BinaryKind::mul: da[i] += dout[i] * bv[i / inner]; break;
                case BinaryKind::max: da[i] += av[i] >= bv[i / inner] ? dout[i] : T{0}; break;
                }
            }
        }
        if (g.requires_grad(bi)) {
            T* db = g.grad(bi).raw();
            for (std::size_t j = 0; j < bv.size(); ++j) {
                double acc = 0.0;
                for (std::size_t i = j * inner; i < (j + 1) * inner; ++i) {
                    switch (kind) {
                    case BinaryKind::add: acc += dout[i]; break;
                    case BinaryKind::sub: acc -= dout[i]; break;
                    case BinaryKind::mul: acc += static_cast<double>(dout[i]) * av[i]; break;
                    case BinaryKind::max: acc += av[i] >= bv[j] ? 0.0 : static_cast<double>(dout[i]); break;
                    }
                }
                db[j] += static_cast<T>(acc);
            }
        }
    });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& inputs)
{
    static constexpr const char* op = "concat_channels";
    if (inputs.empty())
        contract(op, "no inputs");
    Graph<T>& g = owner<T>({&inputs.front()}, op);
    const Shape& s0 = inputs.front().shape();
    require_rank4(s0, op, "input");
    std::size_t channels = 0;
    std::vector<std::size_t> ids, widths;
    for (const auto& v : inputs) {
        g.check_owner(v, op);
        const Shape& s = v.shape();
        require_rank4(s, op, "input");
        if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
            contract(op, "mismatched shapes " + shape_string(s0) + " and " + shape_string(s));
        channels += s[1];
        ids.push_back(v.id());
        widths.push_back(s[1]);
    }
    const std::size_t N = s0[0], HW = s0[2] * s0[3];
    BasicTensor<T> out({N, channels, s0[2], s0[3]});
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < inputs.size(); ++k) {
            const T* src = inputs[k].value().raw() + n * widths[k] * HW;
            std::copy(src, src + widths[k] * HW, out.raw() + (n * channels + offset) * HW);
            offset += widths[k];
        }
    }
    return g.record(op, std::move(out), ids, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        for (std::size_t n = 0; n < N; ++n) {
            std::size_t offset = 0;
            for (std::size_t k = 0; k < ids.size(); ++k) {
                if (g.requires_grad(ids[k])) {
                    const T* src = dout.raw() + (n * channels + offset) * HW;
                    T* dst = g.grad(ids[k]).raw() + n * widths[k] * HW;
                    for (std::size_t i = 0; i < widths[k] * HW; ++i)
                        dst[i] += src[i];
                }
                offset += widths[k];
            }
        }
    });
}

template <typename T>
Var<T> slice_channels(Var<T> input, std::size_t begin, std::size_t count)
{
    static constexpr const char* op = "slice_channels";
    Graph<T>& g = owner<T>({&input}, op);
    const Shape& xs = input.shape();
    require_rank4(xs, op, "input");
    if (count == 0 || begin + count > xs[1])
        contract(op, "channel range out of bounds for " + shape_string(xs));
    const std::size_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    BasicTensor<T> out({N, count, xs[2], xs[3]});
    for (std::size_t n = 0; n < N; ++n) {
        const T* src = input.value().raw() + (n * C + begin) * HW;
        std::copy(src, src + count * HW, out.raw() + n * count * HW);
    }
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        T* dx = g.grad(xi).raw();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t i = 0; i < count * HW; ++i)
                dx[(n * C + begin) * HW + i] += dout[n * count * HW + i];
    });
}

template <typename T>
Var<T> reshape(Var<T> input, Shape shape)
{
    static constexpr const char* op = "reshape";
    Graph<T>& g = owner<T>({&input}, op);
    BasicTensor<T> out = input.value().reshaped(std::move(shape));
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        T* dx = g.grad(xi).raw();
        for (std::size_t i = 0; i < dout.size(); ++i)
            dx[i] += dout[i];
    });
}

template <typename T>
Var<T> affine(Var<T> input, double scale, double shift)
{
    static constexpr const char* op = "affine";
    Graph<T>& g = owner<T>({&input}, op);
    const BasicTensor<T>& x = input.value();
    BasicTensor<T> out(x.shape());
    const T s = static_cast<T>(scale), b = static_cast<T>(shift);
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = s * x[i] + b;
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        T* dx = g.grad(xi).raw();
        for (std::size_t i = 0; i < dout.size(); ++i)
            dx[i] += s * dout[i];
    });
}

template <typename T>
Var<T> clamp(Var<T> input, double lo, double hi)
{
    static constexpr const char* op = "clamp";
    Graph<T>& g = owner<T>({&input}, op);
    if (!(lo <= hi))
        contract(op, "lo > hi");
    const BasicTensor<T>& x = input.value();
    BasicTensor<T> out(x.shape());
    const T l = static_cast<T>(lo), h = static_cast<T>(hi);
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::min(std::max(x[i], l), h);
    if (g.tracking_kinks()) {
        hash_mask(g, x, lo);
        BasicTensor<T> negx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i)
            negx[i] = -x[i];
        hash_mask(g, negx, -hi);
    }
    const auto xi = input.id();
    return g.record(op, std::move(out), {xi}, [=](Graph<T>& g, const BasicTensor<T>& dout) {
        const BasicTensor<T>& x = g.value(xi);
        T* dx = g.grad(xi).raw();
        for (std::size_t i = 0; i < dout.size(); ++i)
            if (x[i] >= l && x[i] <= h)
                dx[i] += dout[i];
    });
}

template <typename T>
Var<T> sum(Var<T> input)
{
    static constexpr const char* op = "sum";
    Graph<T>& g = owner<T>({&input}, op);
    double acc = 0.0;
    for (T v : input.value().data())
        acc += v;
    const auto xi = input.id();
    return g.record(op, BasicTensor<T>({1}, std::vector<T>{static_cast<T>(acc)}), {xi},
                    [=](Graph<T>& g, const BasicTensor<T>& dout) {
                        for (auto& v : g.grad(xi).data())
                            v += dout[0];
                    });
}

template <typename T>
Var<T> mean(Var<T> input)
{
    static constexpr const char* op = "mean";
    Graph<T>& g = owner<T>({&input}, op);
    const std::size_t n = input.value().size();
    double acc = 0.0;
    for (T v : input.value().data())
        acc += v;
    const auto xi = input.id();
    return g.record(op, BasicTensor<T>({1}, std::vector<T>{static_cast<T>(acc / static_cast<double>(n))}), {xi},
                    [=](Graph<T>& g, const BasicTensor<T>& dout) {
                        const T share = static_cast<T>(dout[0] / static_cast<double>(n));
                        for (auto& v : g.grad(xi).data())
                            v += share;
                    });
}

#define MPSYNTH_INSTANTIATE(T)                                                                  \
    template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                   \
    template Var<T> pool(Var<T>, PoolKind, std::size_t, std::size_t);                           \
    template Var<T> global_pool(Var<T>, PoolKind);                                              \
    template Var<T> upsample2x(Var<T>);                                                         \
    template Var<T> dense(Var<T>, Var<T>, Var<T>);                                              \
    template Var<T> activation(Var<T>, ActKind);                                                \
    template Var<T> elementwise(Var<T>, Var<T>, BinaryKind);                                    \
    template Var<T> concat_channels(const std::vector<Var<T>>&);                                \
    template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                           \
    template Var<T> reshape(Var<T>, Shape);                                                     \
    template Var<T> affine(Var<T>, double, double);                                             \
    template Var<T> clamp(Var<T>, double, double);                                              \
    template Var<T> sum(Var<T>);                                                                \
    template Var<T> mean(Var<T>);

MPSYNTH_INSTANTIATE(float)
MPSYNTH_INSTANTIATE(double)

} // namespace mpsynth
