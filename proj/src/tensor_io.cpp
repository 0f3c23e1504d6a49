#include "mpsynth/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace mpsynth {
namespace {

static_assert(std::endian::native == std::endian::little, "MPT1 codec assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p)
{
    return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
           static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

} // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t)
{
    if (t.rank() == 0 || t.rank() > kMptMaxRank)
        throw ContractError("write_tensor: unsupported rank " + std::to_string(t.rank()));
    std::vector<std::uint8_t> out{'M', 'P', 'T', '1', kMptDtypeF32, static_cast<std::uint8_t>(t.rank()), 0, 0};
    for (auto d : t.shape()) {
        if (d > 0xFFFFFFFFu)
            throw ContractError("write_tensor: dimension exceeds u32");
        put_u32(out, static_cast<std::uint32_t>(d));
    }
    const std::size_t header = out.size();
    out.resize(header + t.size() * 4);
    std::memcpy(out.data() + header, t.raw(), t.size() * 4);
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < 8)
        throw FormatError("header", "truncated header (" + std::to_string(bytes.size()) + " bytes)");
    if (std::memcmp(bytes.data(), "MPT1", 4) != 0)
        throw FormatError("magic", "bad magic");
    if (bytes[4] != kMptDtypeF32)
        throw FormatError("dtype", "unsupported dtype code " + std::to_string(bytes[4]));
    const std::size_t rank = bytes[5];
    if (rank == 0 || rank > kMptMaxRank)
        throw FormatError("rank", "unsupported rank " + std::to_string(rank));
    if (bytes[6] != 0 || bytes[7] != 0)
        throw FormatError("padding", "nonzero padding bytes");
    const std::size_t header = 8 + 4 * rank;
    if (bytes.size() < header)
        throw FormatError("dims", "truncated dimension table");
    Shape shape(rank);
    std::uint64_t count = 1;
    for (std::size_t i = 0; i < rank; ++i) {
        shape[i] = get_u32(bytes.data() + 8 + 4 * i);
        if (shape[i] == 0)
            throw FormatError("dims", "dimension " + std::to_string(i) + " is zero");
        count *= shape[i];
        if (count > (std::uint64_t{1} << 34))
            throw FormatError("dims", "element count too large");
    }
    const std::uint64_t payload = bytes.size() - header;
    if (payload < count * 4)
        throw FormatError("payload", "truncated payload: " + std::to_string(payload) + " of " +
                                         std::to_string(count * 4) + " bytes");
    if (payload > count * 4)
        throw FormatError("payload", "trailing bytes after payload");
    std::vector<float> data(count);
    std::memcpy(data.data(), bytes.data() + header, count * 4);
    return Tensor(std::move(shape), std::move(data));
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open '" + path.string() + "' for reading");
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw IoError("write failed for '" + path.string() + "'");
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_tensor(const std::filesystem::path& path, const Tensor& t)
{
    write_file(path, encode_tensor(t));
}

Tensor read_tensor(const std::filesystem::path& path)
{
    return decode_tensor(read_file(path));
}

} // namespace mpsynth
