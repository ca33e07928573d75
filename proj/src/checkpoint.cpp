#include "gdoc/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace gdoc {

namespace {

constexpr char kMagic[4] = {'G', 'D', 'O', 'C'};

void put_u32(std::ostream& os, uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v & 0xffffffffULL));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint: truncated " + what);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is, const std::string& what) {
    uint64_t lo = get_u32(is, what);
    uint64_t hi = get_u32(is, what);
    return lo | (hi << 32);
}

}  // namespace

const ParamBlock* CheckpointFile::find(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

const ParamBlock& CheckpointFile::require(const std::string& name) const {
    const ParamBlock* b = find(name);
    if (!b) throw DataError("checkpoint is missing block '" + name + "'");
    return *b;
}

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path + " for writing");
    os.write(kMagic, 4);
    put_u32(os, file.format_version);
    put_u64(os, file.config_digest);
    for (const auto& b : file.blocks) {
        if (b.data.size() != b.numel())
            throw DataError("checkpoint block " + b.name + " has inconsistent size");
        put_u32(os, static_cast<uint32_t>(b.name.size()));
        os.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
        put_u32(os, static_cast<uint32_t>(b.dims.size()));
        for (uint32_t d : b.dims) put_u32(os, d);
        for (float v : b.data) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            put_u32(os, bits);
        }
    }
    if (!os) throw DataError("write failed for " + path);
}

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw DataError(path + " is not a checkpoint (bad magic)");
    CheckpointFile file;
    file.format_version = get_u32(is, "version");
    if (file.format_version != 1)
        throw DataError("checkpoint format version " + std::to_string(file.format_version) +
                        " not supported");
    file.config_digest = get_u64(is, "config digest");
    while (true) {
        int probe = is.peek();
        if (probe == std::char_traits<char>::eof()) break;
        ParamBlock b;
        uint32_t name_len = get_u32(is, "block name length");
        b.name.resize(name_len);
        if (!is.read(b.name.data(), name_len)) throw DataError("checkpoint: truncated name");
        uint32_t rank = get_u32(is, "block rank");
        b.dims.resize(rank);
        for (uint32_t i = 0; i < rank; ++i) b.dims[i] = get_u32(is, "block dims");
        b.data.resize(b.numel());
        for (size_t i = 0; i < b.data.size(); ++i) {
            uint32_t bits = get_u32(is, "block data");
            std::memcpy(&b.data[i], &bits, 4);
        }
        file.blocks.push_back(std::move(b));
    }
    return file;
}

}  // namespace gdoc
