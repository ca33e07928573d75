#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdoc/model.hpp"

namespace gdoc {

// Binary checkpoint layout:
//   magic "GDOC" | u32 format version | u64 config digest
//   then named blocks until end of file:
//     u32 name length | name bytes | u32 rank | u32 dims[rank] | f32 data (LE)
// Model parameters are rank-2 blocks under their parameter names. Optimizer
// moments ("opt.m.*", "opt.v.*"), support-queue snapshots ("queue.*") and the
// trainer counters ("trainer.meta") share the same block encoding.

struct ParamBlock {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<float> data;

    size_t numel() const {
        size_t n = 1;
        for (uint32_t d : dims) n *= d;
        return n;
    }
};

struct CheckpointFile {
    uint32_t format_version = 1;
    uint64_t config_digest = 0;
    std::vector<ParamBlock> blocks;

    const ParamBlock* find(const std::string& name) const;
    const ParamBlock& require(const std::string& name) const;
};

void write_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::string& path);

// Model parameters -> blocks and back (float32 on disk).
template <typename T>
void append_param_blocks(CheckpointFile& file, const Params<T>& params,
                         const std::string& prefix = "") {
    for (size_t i = 0; i < params.count(); ++i) {
        const auto& [name, t] = params.item(i);
        ParamBlock b;
        b.name = prefix + name;
        b.dims = {static_cast<uint32_t>(t.rows), static_cast<uint32_t>(t.cols)};
        b.data.reserve(t.numel());
        for (auto v : t.data) b.data.push_back(static_cast<float>(v));
        file.blocks.push_back(std::move(b));
    }
}

template <typename T>
void load_param_blocks(const CheckpointFile& file, Params<T>& params,
                       const std::string& prefix = "") {
    for (size_t i = 0; i < params.count(); ++i) {
        auto& [name, t] = params.item(i);
        const ParamBlock& b = file.require(prefix + name);
        if (b.dims.size() != 2 || static_cast<int>(b.dims[0]) != t.rows ||
            static_cast<int>(b.dims[1]) != t.cols)
            throw DataError("checkpoint block " + b.name + " has mismatched shape");
        for (size_t k = 0; k < t.data.size(); ++k) t.data[k] = static_cast<T>(b.data[k]);
    }
}

}  // namespace gdoc
