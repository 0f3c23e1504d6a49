#pragma once

#include "mpsynth/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mpsynth {

// MPT1 layout: "MPT1" | dtype u8 (1 = f32 LE) | rank u8 | 2 zero bytes |
// rank x u32 LE dims | row-major payload.
inline constexpr std::uint8_t kMptDtypeF32 = 1;
inline constexpr std::size_t kMptMaxRank = 8;

std::vector<std::uint8_t> encode_tensor(const Tensor& t);
/// Throws FormatError naming the offending field.
Tensor decode_tensor(const std::vector<std::uint8_t>& bytes);

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text(const std::filesystem::path& path, const std::string& text);

} // namespace mpsynth
