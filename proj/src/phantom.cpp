#include "mpsynth/phantom.hpp"

#include "mpsynth/rng.hpp"
#include "mpsynth/tensor_io.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <numbers>
#include <set>

namespace mpsynth {
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

const Tensor& CaseRecord::input(std::size_t i) const
{
    switch (i) {
    case 0: return p1;
    case 1: return p2;
    case 2: return p3;
    default: throw ContractError("case input index " + std::to_string(i) + " out of range");
    }
}

const Tensor& CaseRecord::input(const std::string& name) const
{
    for (std::size_t i = 0; i < kParamNames.size(); ++i)
        if (kParamNames[i] == name)
            return input(i);
    throw ConfigError("unknown input parameter '" + name + "'");
}

namespace {

std::size_t reflect(std::ptrdiff_t i, std::size_t n)
{
    const auto m = static_cast<std::ptrdiff_t>(n);
    if (m == 1)
        return 0;
    while (i < 0 || i >= m)
        i = i < 0 ? -i - 1 : 2 * m - i - 1;
    return static_cast<std::size_t>(i);
}

Tensor ellipse_field(Rng& rng, std::size_t size)
{
    Tensor img({1, size, size});
    const double s = static_cast<double>(size);
    const auto count = rng.uniform_int(3, 6);
    for (std::int64_t e = 0; e < count; ++e) {
        const double cx = rng.uniform(0.2 * s, 0.8 * s);
        const double cy = rng.uniform(0.2 * s, 0.8 * s);
        const double ax = rng.uniform(s / 10.0, s / 4.0);
        const double ay = rng.uniform(s / 10.0, s / 4.0);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        const double intensity = rng.uniform(0.2, 1.0);
        const double ct = std::cos(theta), st = std::sin(theta);
        for (std::size_t r = 0; r < size; ++r)
            for (std::size_t c = 0; c < size; ++c) {
                const double dx = static_cast<double>(c) + 0.5 - cx;
                const double dy = static_cast<double>(r) + 0.5 - cy;
                const double u = (ct * dx + st * dy) / ax;
                const double v = (-st * dx + ct * dy) / ay;
                if (u * u + v * v <= 1.0)
                    img[r * size + c] += static_cast<float>(intensity);
            }
    }
    return img;
}

Tensor noise_field(Rng& rng, std::size_t size)
{
    Tensor img({1, size, size});
    for (auto& v : img.data())
        v = static_cast<float>(rng.uniform());
    return img;
}

float clip01(double v)
{
    return static_cast<float>(std::min(1.0, std::max(0.0, v)));
}

} // namespace

Tensor gaussian_blur(const Tensor& image, double sigma)
{
    if (image.rank() != 3 || image.dim(0) != 1)
        throw ContractError("gaussian_blur expects a 1 x H x W image, got " + shape_string(image.shape()));
    if (!(sigma > 0))
        throw ContractError("gaussian_blur: sigma must be positive");
    const auto radius = static_cast<std::ptrdiff_t>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double total = 0.0;
    for (std::ptrdiff_t i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
        total += kernel[i + radius];
    }
    for (auto& k : kernel)
        k /= total;

    const std::size_t H = image.dim(1), W = image.dim(2);
    std::vector<double> tmp(H * W);
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * image[r * W + reflect(static_cast<std::ptrdiff_t>(c) + i, W)];
            tmp[r * W + c] = acc;
        }
    Tensor out(image.shape());
    for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) {
            double acc = 0.0;
            for (std::ptrdiff_t i = -radius; i <= radius; ++i)
                acc += kernel[i + radius] * tmp[reflect(static_cast<std::ptrdiff_t>(r) + i, H) * W + c];
            out[r * W + c] = static_cast<float>(acc);
        }
    return out;
}

Tensor min_max_normalize(const Tensor& image)
{
    const auto [lo, hi] = std::minmax_element(image.data().begin(), image.data().end());
    Tensor out(image.shape());
    const double range = static_cast<double>(*hi) - static_cast<double>(*lo);
    if (range <= 0.0)
        return out;
    for (std::size_t i = 0; i < image.size(); ++i)
        out[i] = clip01((static_cast<double>(image[i]) - *lo) / range);
    return out;
}

LatentFields generate_latents(std::uint64_t seed, std::size_t size)
{
    if (size < 16 || size % 16 != 0)
        throw ConfigError("phantom size must be a positive multiple of 16, got " + std::to_string(size));
    const double s = static_cast<double>(size);
    Rng anatomy_rng(derive_seed(seed, "anatomy"));
    Rng b_rng(derive_seed(seed, "noise_b"));
    Rng c_rng(derive_seed(seed, "noise_c"));
    LatentFields f;
    f.anatomy = min_max_normalize(gaussian_blur(ellipse_field(anatomy_rng, size), s / 16.0));
    f.noise_b = min_max_normalize(gaussian_blur(noise_field(b_rng, size), s / 8.0));
    f.noise_c = min_max_normalize(gaussian_blur(noise_field(c_rng, size), s / 8.0));
    return f;
}

CaseRecord compose_case(const LatentFields& latents, std::string id, std::uint64_t seed)
{
    const Shape& shape = latents.anatomy.shape();
    if (latents.noise_b.shape() != shape || latents.noise_c.shape() != shape)
        throw ContractError("latent fields must share a shape");
    CaseRecord rec;
    rec.id = std::move(id);
    rec.seed = seed;
    rec.p1 = Tensor(shape);
    rec.p2 = Tensor(shape);
    rec.p3 = Tensor(shape);
    rec.y = Tensor(shape);
    for (std::size_t i = 0; i < rec.y.size(); ++i) {
        const double a = latents.anatomy[i], b = latents.noise_b[i], c = latents.noise_c[i];
        rec.p1[i] = clip01(a);
        rec.p2[i] = clip01(0.6 * a + 0.4 * b);
        rec.p3[i] = clip01(0.6 * a + 0.4 * c);
        rec.y[i] = clip01(0.3 * (1.0 - a) + 0.35 * b + 0.35 * c);
    }
    return rec;
}

CaseRecord generate_case(std::uint64_t seed, std::size_t size, std::string id)
{
    return compose_case(generate_latents(seed, size), std::move(id), seed);
}

std::vector<const ManifestEntry*> DatasetManifest::entries(Split split) const
{
    std::vector<const ManifestEntry*> out;
    for (const auto& e : cases)
        if (e.split == split)
            out.push_back(&e);
    return out;
}

DatasetManifest build_dataset(const fs::path& out_dir, std::size_t cases, std::size_t size, std::uint64_t seed,
                              double split_ratio)
{
    if (cases < 5)
        throw ConfigError("build_dataset needs at least 5 cases, got " + std::to_string(cases));
    if (!(split_ratio > 0.0 && split_ratio < 1.0))
        throw ConfigError("split ratio must lie in (0, 1)");
    if (size < 16 || size % 16 != 0)
        throw ConfigError("phantom size must be a positive multiple of 16, got " + std::to_string(size));

    std::error_code ec;
    fs::create_directories(out_dir / "cases", ec);
    if (ec)
        throw IoError("cannot create '" + (out_dir / "cases").string() + "': " + ec.message());

    DatasetManifest m;
    m.image_size = size;
    m.root = out_dir;
    std::uint64_t seed_state = seed;
    for (std::size_t i = 0; i < cases; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "case_%04zu", i);
        ManifestEntry e;
        e.id = id;
        e.seed = splitmix64(seed_state);
        for (std::size_t f = 0; f < 4; ++f)
            e.files[f] = "cases/" + e.id + "/" + (f < 3 ? kParamNames[f] : std::string("y")) + ".mpt";
        m.cases.push_back(std::move(e));
    }

    std::vector<std::size_t> order(cases);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(seed, "split"));
    for (std::size_t i = cases - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<std::size_t>(split_rng.uniform_int(0, static_cast<std::int64_t>(i)))]);
    const auto n_train = static_cast<std::size_t>(std::llround(split_ratio * static_cast<double>(cases)));
    for (std::size_t k = 0; k < cases; ++k)
        m.cases[order[k]].split = k < n_train ? Split::train : Split::test;

    for (const auto& e : m.cases) {
        const CaseRecord rec = generate_case(e.seed, size, e.id);
        fs::create_directories(out_dir / "cases" / e.id, ec);
        if (ec)
            throw IoError("cannot create case directory for " + e.id + ": " + ec.message());
        const Tensor* images[] = {&rec.p1, &rec.p2, &rec.p3, &rec.y};
        for (std::size_t f = 0; f < 4; ++f)
            write_tensor(out_dir / e.files[f], *images[f]);
    }
    write_text(out_dir / "manifest.json", manifest_to_json(m));
    return m;
}

std::string manifest_to_json(const DatasetManifest& m)
{
    json j;
    j["version"] = m.version;
    j["image_size"] = m.image_size;
    j["cases"] = json::array();
    for (const auto& e : m.cases) {
        json c;
        c["id"] = e.id;
        c["seed"] = e.seed;
        c["files"] = {{"p1", e.files[0]}, {"p2", e.files[1]}, {"p3", e.files[2]}, {"y", e.files[3]}};
        c["split"] = e.split == Split::train ? "train" : "test";
        j["cases"].push_back(std::move(c));
    }
    return j.dump(2) + "\n";
}

DatasetManifest load_manifest(const fs::path& dir_or_file)
{
    const fs::path file = fs::is_directory(dir_or_file) ? dir_or_file / "manifest.json" : dir_or_file;
    const auto bytes = read_file(file);
    DatasetManifest m;
    m.root = file.parent_path();
    try {
        const json j = json::parse(bytes.begin(), bytes.end());
        m.version = j.at("version").get<std::string>();
        m.image_size = j.at("image_size").get<std::size_t>();
        std::set<std::string> ids;
        for (const auto& c : j.at("cases")) {
            ManifestEntry e;
            e.id = c.at("id").get<std::string>();
            e.seed = c.at("seed").get<std::uint64_t>();
            const auto& files = c.at("files");
            e.files = {files.at("p1").get<std::string>(), files.at("p2").get<std::string>(),
                       files.at("p3").get<std::string>(), files.at("y").get<std::string>()};
            const auto split = c.at("split").get<std::string>();
            if (split != "train" && split != "test")
                throw FormatError("split", "unknown split tag '" + split + "' for " + e.id);
            e.split = split == "train" ? Split::train : Split::test;
            if (!ids.insert(e.id).second)
                throw FormatError("id", "duplicate case id '" + e.id + "'");
            for (const auto& f : e.files)
                if (!fs::exists(m.root / f))
                    throw IoError("manifest references missing file '" + (m.root / f).string() + "'");
            m.cases.push_back(std::move(e));
        }
    } catch (const json::exception& ex) {
        throw FormatError("manifest.json", ex.what());
    }
    return m;
}

CaseRecord load_case(const DatasetManifest& manifest, const ManifestEntry& entry)
{
    CaseRecord rec;
    rec.id = entry.id;
    rec.seed = entry.seed;
    Tensor* images[] = {&rec.p1, &rec.p2, &rec.p3, &rec.y};
    for (std::size_t f = 0; f < 4; ++f)
        *images[f] = read_tensor(manifest.root / entry.files[f]);
    return rec;
}

} // namespace mpsynth
