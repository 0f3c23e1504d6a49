#pragma once

#include "mpsynth/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mpsynth {

/// Latent fields of one phantom, each 1 x H x W in [0, 1].
struct LatentFields {
    Tensor anatomy; ///< A: blurred ellipses
    Tensor noise_b; ///< B: smoothed noise, only visible through p2
    Tensor noise_c; ///< C: smoothed noise, only visible through p3
};

/// One co-registered sample. Images are 1 x H x W in [0, 1].
struct CaseRecord {
    std::string id;
    std::uint64_t seed = 0;
    Tensor p1, p2, p3, y;

    const Tensor& input(std::size_t i) const;
    const Tensor& input(const std::string& name) const;
};

inline const std::array<std::string, 3> kParamNames{"p1", "p2", "p3"};

LatentFields generate_latents(std::uint64_t seed, std::size_t size);

/// p1 = A, p2 = 0.6A + 0.4B, p3 = 0.6A + 0.4C, y = 0.3(1 - A) + 0.35B + 0.35C,
/// each clipped to [0, 1].
CaseRecord compose_case(const LatentFields& latents, std::string id = {}, std::uint64_t seed = 0);

CaseRecord generate_case(std::uint64_t seed, std::size_t size, std::string id = {});

/// Separable Gaussian blur, truncated at radius ceil(3 sigma), reflected borders.
Tensor gaussian_blur(const Tensor& image, double sigma);

/// Rescales to [0, 1]; a constant image becomes all zeros.
Tensor min_max_normalize(const Tensor& image);

enum class Split { train, test };

struct ManifestEntry {
    std::string id;
    std::uint64_t seed = 0;
    std::array<std::string, 4> files; ///< p1, p2, p3, y relative to the manifest
    Split split = Split::train;
};

struct DatasetManifest {
    std::string version = "1";
    std::size_t image_size = 0;
    std::vector<ManifestEntry> cases;
    std::filesystem::path root; ///< directory holding manifest.json (not serialized)

    std::vector<const ManifestEntry*> entries(Split split) const;
};

/// Writes cases/<id>/{p1,p2,p3,y}.mpt and manifest.json under `out_dir`.
/// Train count is round(split_ratio * cases), assigned by a seeded shuffle.
DatasetManifest build_dataset(const std::filesystem::path& out_dir, std::size_t cases, std::size_t size,
                              std::uint64_t seed, double split_ratio = 0.8);

std::string manifest_to_json(const DatasetManifest& manifest);
DatasetManifest load_manifest(const std::filesystem::path& dir_or_file);
CaseRecord load_case(const DatasetManifest& manifest, const ManifestEntry& entry);

} // namespace mpsynth
