// Binary voxel dump format. Fixed little-endian layout:
//   magic "OCCD" | u32 version | u64 n | u16 num_classes | u16 feature_dim |
//   u32 flags (bit0 features, bit1 sigmas, bit2 depths)
// followed by labels (n x u16, 65535 = ignore), logits (n x (S+1) x f32) and
// the optional arrays in flag order. No padding anywhere, so the file length
// is fully determined by the header.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "reliocc/core.hpp"

namespace reliocc {

inline constexpr std::uint32_t kDumpVersion = 1;
inline constexpr std::size_t kDumpHeaderSize = 24;

enum class DumpErrorCode { Io, BadMagic, BadVersion, SizeMismatch };

class DumpError : public std::runtime_error {
public:
    DumpError(DumpErrorCode code, const std::string& msg)
        : std::runtime_error(msg), code_(code) {}
    DumpErrorCode code() const { return code_; }

private:
    DumpErrorCode code_;
};

namespace dump_detail {

inline void put_u16(std::vector<std::uint8_t>& buf, std::uint16_t v) {
    buf.push_back(static_cast<std::uint8_t>(v & 0xFF));
    buf.push_back(static_cast<std::uint8_t>(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_u64(std::vector<std::uint8_t>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::vector<std::uint8_t>& buf, float v) {
    put_u32(buf, std::bit_cast<std::uint32_t>(v));
}

inline std::uint16_t get_u16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

}  // namespace dump_detail

inline void write_dump(const VoxelBatch& batch, const std::string& path) {
    batch.validate();  // refuse to write invalid batches
    using namespace dump_detail;
    const auto width = static_cast<std::size_t>(batch.logit_width());
    std::uint32_t flags = 0;
    if (batch.has_features()) flags |= 1u;
    if (batch.has_sigmas()) flags |= 2u;
    if (batch.has_depths()) flags |= 4u;

    std::vector<std::uint8_t> buf;
    buf.reserve(kDumpHeaderSize + batch.n * (2 + 4 * width));
    buf.push_back('O');
    buf.push_back('C');
    buf.push_back('C');
    buf.push_back('D');
    put_u32(buf, kDumpVersion);
    put_u64(buf, batch.n);
    put_u16(buf, static_cast<std::uint16_t>(batch.num_classes));
    put_u16(buf, static_cast<std::uint16_t>(batch.has_features() ? batch.feature_dim : 0));
    put_u32(buf, flags);

    for (std::uint16_t y : batch.labels) put_u16(buf, y);
    for (float z : batch.logits) put_f32(buf, z);
    for (float f : batch.features) put_f32(buf, f);
    for (float s : batch.sigmas) put_f32(buf, s);
    for (float dv : batch.depths) put_f32(buf, dv);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DumpError(DumpErrorCode::Io, "cannot open for writing: " + path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DumpError(DumpErrorCode::Io, "write failed: " + path);
}

inline VoxelBatch read_dump(const std::string& path) {
    using namespace dump_detail;
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw DumpError(DumpErrorCode::Io, "cannot open for reading: " + path);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    std::vector<std::uint8_t> buf(size);
    if (size > 0) in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size));
    if (!in) throw DumpError(DumpErrorCode::Io, "read failed: " + path);

    if (size < 4 || std::memcmp(buf.data(), "OCCD", 4) != 0)
        throw DumpError(DumpErrorCode::BadMagic, "bad magic: " + path);
    if (size < kDumpHeaderSize)
        throw DumpError(DumpErrorCode::SizeMismatch, "size mismatch: truncated header: " + path);
    const std::uint32_t version = get_u32(buf.data() + 4);
    if (version != kDumpVersion)
        throw DumpError(DumpErrorCode::BadVersion,
                        "bad version " + std::to_string(version) + ": " + path);
    const std::uint64_t n = get_u64(buf.data() + 8);
    const std::uint16_t num_classes = get_u16(buf.data() + 16);
    const std::uint16_t feature_dim = get_u16(buf.data() + 18);
    const std::uint32_t flags = get_u32(buf.data() + 20);
    const bool has_features = (flags & 1u) != 0;
    const bool has_sigmas = (flags & 2u) != 0;
    const bool has_depths = (flags & 4u) != 0;
    if (has_features && feature_dim == 0)
        throw DumpError(DumpErrorCode::SizeMismatch,
                        "size mismatch: features flag set but feature_dim is 0: " + path);

    const std::size_t width = static_cast<std::size_t>(num_classes) + 1;
    std::size_t expected = kDumpHeaderSize + n * 2 + n * width * 4;
    if (has_features) expected += n * static_cast<std::size_t>(feature_dim) * 4;
    if (has_sigmas) expected += n * 4;
    if (has_depths) expected += n * 4;
    if (size != expected)
        throw DumpError(DumpErrorCode::SizeMismatch,
                        "size mismatch: expected " + std::to_string(expected) + " bytes, got " +
                            std::to_string(size) + ": " + path);

    VoxelBatch batch;
    batch.n = n;
    batch.num_classes = num_classes;
    batch.feature_dim = has_features ? feature_dim : 0;
    const std::uint8_t* p = buf.data() + kDumpHeaderSize;
    batch.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i, p += 2) batch.labels[i] = get_u16(p);
    batch.logits.resize(n * width);
    for (std::size_t i = 0; i < n * width; ++i, p += 4) batch.logits[i] = get_f32(p);
    if (has_features) {
        batch.features.resize(n * static_cast<std::size_t>(feature_dim));
        for (std::size_t i = 0; i < batch.features.size(); ++i, p += 4)
            batch.features[i] = get_f32(p);
    }
    if (has_sigmas) {
        batch.sigmas.resize(n);
        for (std::size_t i = 0; i < n; ++i, p += 4) batch.sigmas[i] = get_f32(p);
    }
    if (has_depths) {
        batch.depths.resize(n);
        for (std::size_t i = 0; i < n; ++i, p += 4) batch.depths[i] = get_f32(p);
    }
    batch.validate();
    return batch;
}

}  // namespace reliocc
