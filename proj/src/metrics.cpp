#include "mpsynth/metrics.hpp"

#include "mpsynth/tensor_io.hpp"

#include <charconv>
#include <cmath>

namespace mpsynth {

namespace {

struct Plane {
    std::size_t h, w;
};

Plane plane_of(const Tensor& t, const char* op)
{
    const Shape& s = t.shape();
    if (s.size() < 2)
        throw ContractError(std::string(op) + ": expected an image, got shape " + shape_string(s));
    for (std::size_t i = 0; i + 2 < s.size(); ++i)
        if (s[i] != 1)
            throw ContractError(std::string(op) + ": expected a single plane, got shape " + shape_string(s));
    return {s[s.size() - 2], s[s.size() - 1]};
}

void require_same(const Tensor& a, const Tensor& b, const char* op)
{
    if (a.shape() != b.shape())
        throw ContractError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// Valid-region separable filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& src, std::size_t h, std::size_t w,
                                 const std::vector<double>& k)
{
    const std::size_t n = k.size(), wo = w - n + 1, ho = h - n + 1;
    std::vector<double> rows(h * wo, 0.0);
    for (std::size_t i = 0; i < h; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
            double acc = 0;
            for (std::size_t t = 0; t < n; ++t)
                acc += k[t] * src[i * w + j + t];
            rows[i * wo + j] = acc;
        }
    std::vector<double> out(ho * wo, 0.0);
    for (std::size_t i = 0; i < ho; ++i)
        for (std::size_t j = 0; j < wo; ++j) {
            double acc = 0;
            for (std::size_t t = 0; t < n; ++t)
                acc += k[t] * rows[(i + t) * wo + j];
            out[i * wo + j] = acc;
        }
    return out;
}

double population_std(const std::vector<double>& v, double mu)
{
    double acc = 0;
    for (double x : v)
        acc += (x - mu) * (x - mu);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

double mean_of(const std::vector<double>& v)
{
    double acc = 0;
    for (double x : v)
        acc += x;
    return acc / static_cast<double>(v.size());
}

} // namespace

std::vector<double> ssim_kernel()
{
    std::vector<double> k(kSsimWindow);
    const double c = static_cast<double>(kSsimWindow / 2);
    double total = 0;
    for (std::size_t i = 0; i < kSsimWindow; ++i) {
        const double d = static_cast<double>(i) - c;
        k[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
        total += k[i];
    }
    for (auto& v : k)
        v /= total;
    return k;
}

double ssim(const Tensor& x, const Tensor& y)
{
    require_same(x, y, "ssim");
    const auto [h, w] = plane_of(x, "ssim");
    if (h < kSsimWindow || w < kSsimWindow)
        throw ContractError("ssim: image " + shape_string(x.shape()) + " smaller than the " +
                            std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
    const std::size_t n = h * w;
    std::vector<double> a(n), b(n), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        a[i] = x[i];
        b[i] = y[i];
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    const auto k = ssim_kernel();
    const auto mx = filter_valid(a, h, w, k), my = filter_valid(b, h, w, k);
    const auto sxx = filter_valid(aa, h, w, k), syy = filter_valid(bb, h, w, k), sxy = filter_valid(ab, h, w, k);
    const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
    double total = 0;
    for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i];
        const double vy = syy[i] - my[i] * my[i];
        const double cov = sxy[i] - mx[i] * my[i];
        total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
                 ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
    return total / static_cast<double>(mx.size());
}

Psnr psnr(const Tensor& reference, const Tensor& test, PsnrPeak peak)
{
    require_same(reference, test, "psnr");
    double se = 0, top = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double d = static_cast<double>(reference[i]) - test[i];
        se += d * d;
        top = std::max({top, static_cast<double>(reference[i]), static_cast<double>(test[i])});
    }
    if (se == 0)
        return {true, 0};
    const double p = peak == PsnrPeak::data_range ? 1.0 : top;
    return {false, 10.0 * std::log10(p * p / (se / static_cast<double>(reference.size())))};
}

double nmse(const Tensor& reference, const Tensor& test)
{
    require_same(reference, test, "nmse");
    double num = 0, den = 0;
    for (std::size_t i = 0; i < reference.size(); ++i) {
        const double y = reference[i];
        const double d = y - test[i];
        num += d * d;
        den += y * y;
    }
    if (den == 0)
        throw ContractError("nmse: reference image is all zero");
    return num / den;
}

void MetricsReport::aggregate()
{
    mean = {};
    std = {};
    if (rows.empty())
        return;
    std::vector<double> s, n, l, p;
    for (const auto& r : rows) {
        s.push_back(r.ssim);
        n.push_back(r.nmse);
        l.push_back(r.lp);
        if (!r.psnr.infinite)
            p.push_back(r.psnr.db);
    }
    mean.ssim = mean_of(s);
    mean.nmse = mean_of(n);
    mean.lp = mean_of(l);
    std.ssim = population_std(s, mean.ssim);
    std.nmse = population_std(n, mean.nmse);
    std.lp = population_std(l, mean.lp);
    if (p.empty()) {
        mean.psnr = {true, 0};
        std.psnr = {false, 0};
    } else {
        mean.psnr = {false, mean_of(p)};
        std.psnr = {false, population_std(p, mean.psnr.db)};
    }
}

MetricsReport evaluate_pairs(const std::vector<EvalPair>& pairs, PerceptualNet& net,
                             const std::array<double, 5>& alpha, PsnrPeak peak)
{
    if (pairs.empty())
        throw ContractError("evaluate_pairs: no cases");
    MetricsReport report;
    for (const auto& pair : pairs) {
        MetricsRow row;
        row.case_id = pair.case_id;
        row.ssim = ssim(pair.reference, pair.synthesis);
        row.psnr = psnr(pair.reference, pair.synthesis, peak);
        row.nmse = nmse(pair.reference, pair.synthesis);
        const auto [h, w] = plane_of(pair.reference, "evaluate_pairs");
        Graph<float> g;
        g.disable_grad();
        auto lp = loss_perceptual(g, net, g.input(pair.reference.reshaped({1, 1, h, w})),
                                  g.input(pair.synthesis.reshaped({1, 1, h, w})), alpha);
        row.lp = lp.value.value()[0];
        report.rows.push_back(std::move(row));
    }
    report.aggregate();
    return report;
}

std::string format_number(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string psnr_text(const Psnr& p)
{
    return p.infinite ? "inf" : format_number(p.db);
}

} // namespace

std::string metrics_csv(const MetricsReport& report)
{
    std::string out = "case_id,ssim,psnr_db,nmse,lp\n";
    for (const auto& r : report.rows)
        out += r.case_id + "," + format_number(r.ssim) + "," + psnr_text(r.psnr) + "," + format_number(r.nmse) + "," +
               format_number(r.lp) + "\n";
    auto agg = [&](const std::string& label, const MetricsAggregate& a) {
        out += label + "," + format_number(a.ssim) + "," + psnr_text(a.psnr) + "," + format_number(a.nmse) + "," +
               format_number(a.lp) + "\n";
    };
    agg("mean", report.mean);
    agg("std", report.std);
    return out;
}

void write_metrics_csv(const std::string& path, const MetricsReport& report)
{
    write_text(path, metrics_csv(report));
}

} // namespace mpsynth
