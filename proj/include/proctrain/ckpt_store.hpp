#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "proctrain/digest.hpp"
#include "proctrain/model.hpp"
#include "proctrain/serde.hpp"

namespace proctrain {

// .ptck checkpoint file:
//   magic "PTCK\0" | 8-byte little-endian header length | JSON header | payload
// The payload is the concatenation of little-endian float32 buffers in
// sorted tensor-name order; the header manifests name -> {dtype, shape,
// offset, nbytes}. Round trips are bit-exact.
namespace ckpt_file {
inline constexpr char kMagic[5] = {'P', 'T', 'C', 'K', '\0'};
inline constexpr int64_t kFormatVersion = 1;
inline constexpr const char* kExtension = ".ptck";
}  // namespace ckpt_file

namespace detail {

inline void check_name_set(const Checkpoint& ckpt) {
    auto specs = canonical_tensors(ckpt.config);
    if (specs.size() != ckpt.tensors.size())
        throw NameSetError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                           " tensors, config implies " + std::to_string(specs.size()));
    for (const auto& spec : specs) {
        auto it = ckpt.tensors.find(spec.name);
        if (it == ckpt.tensors.end())
            throw NameSetError("checkpoint is missing tensor '" + spec.name + "'");
        if (it->second.shape() != spec.shape)
            throw NameSetError("tensor '" + spec.name + "' has shape " +
                               shape_str(it->second.shape()) + ", config implies " +
                               shape_str(spec.shape));
    }
}

// Header with offsets assigned in sorted-name order. With provenance
// included this is the on-disk header; without it, the digest input.
inline json build_header(const Checkpoint& ckpt, bool with_provenance) {
    json tensors = json::object();
    int64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        const int64_t nbytes = t.numel() * int64_t(sizeof(float));
        tensors[name] = {{"dtype", "f32"},
                         {"shape", t.shape()},
                         {"offset", offset},
                         {"nbytes", nbytes}};
        offset += nbytes;
    }
    json header = {{"format_version", ckpt_file::kFormatVersion},
                   {"config", model_config_to_json(ckpt.config)},
                   {"tensors", tensors}};
    if (with_provenance) header["provenance"] = ckpt.provenance;
    return header;
}

}  // namespace detail

// Content hash over the header-normalized form plus payload. Provenance is
// excluded, so surgery lineage can be annotated without changing identity.
inline std::string digest(const Checkpoint& ckpt) {
    detail::check_name_set(ckpt);
    Sha256 h;
    h.update(detail::build_header(ckpt, /*with_provenance=*/false).dump());
    for (const auto& [name, t] : ckpt.tensors) h.update(t.data());
    return h.hex();
}

inline void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
    detail::check_name_set(ckpt);
    const std::string header = detail::build_header(ckpt, /*with_provenance=*/true).dump();
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out.write(ckpt_file::kMagic, sizeof(ckpt_file::kMagic));
        uint64_t len = header.size();
        char lenb[8];
        for (int i = 0; i < 8; ++i) lenb[i] = char((len >> (8 * i)) & 0xff);
        out.write(lenb, 8);
        out.write(header.data(), std::streamsize(header.size()));
        for (const auto& [name, t] : ckpt.tensors)
            out.write(reinterpret_cast<const char*>(t.data().data()),
                      std::streamsize(t.numel() * sizeof(float)));
        if (!out) throw Error("write failed for '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    const size_t prefix = sizeof(ckpt_file::kMagic) + 8;
    if (bytes.size() < prefix) throw CorruptHeaderError("file too small for magic and header");
    if (std::memcmp(bytes.data(), ckpt_file::kMagic, sizeof(ckpt_file::kMagic)) != 0)
        throw CorruptHeaderError("bad magic bytes");
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i)
        hlen |= uint64_t(uint8_t(bytes[sizeof(ckpt_file::kMagic) + i])) << (8 * i);
    if (bytes.size() < prefix + hlen) throw CorruptHeaderError("header extends past end of file");

    json header;
    try {
        header = json::parse(bytes.begin() + prefix, bytes.begin() + prefix + hlen);
    } catch (const json::exception& e) {
        throw CorruptHeaderError(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.contains("format_version") || !header["format_version"].is_number_integer())
        throw CorruptHeaderError("missing format_version");
    if (header["format_version"].get<int64_t>() != ckpt_file::kFormatVersion)
        throw UnknownVersionError("unsupported format_version " +
                                  header["format_version"].dump());

    Checkpoint ckpt;
    try {
        ckpt.config = model_config_from_json(header.at("config"));
        ckpt.provenance = header.value("provenance", "");
    } catch (const json::exception& e) {
        throw CorruptHeaderError(std::string("bad config section: ") + e.what());
    }

    const json& table = header.at("tensors");
    auto specs = canonical_tensors(ckpt.config);
    if (table.size() != specs.size())
        throw NameSetError("tensor table has " + std::to_string(table.size()) +
                           " entries, config implies " + std::to_string(specs.size()));
    const char* payload = bytes.data() + prefix + hlen;
    const int64_t payload_size = int64_t(bytes.size() - prefix - hlen);

    // entries must appear at ascending contiguous offsets in sorted-name order
    int64_t running = 0;
    std::map<std::string, Shape> canonical;
    for (const auto& spec : specs) canonical[spec.name] = spec.shape;
    for (const auto& [name, shape] : canonical) {
        if (!table.contains(name)) throw NameSetError("header is missing tensor '" + name + "'");
        const json& entry = table.at(name);
        if (entry.value("dtype", "") != "f32")
            throw UnknownVersionError("tensor '" + name + "' has unsupported dtype");
        Shape hshape = entry.at("shape").get<Shape>();
        if (hshape != shape)
            throw NameSetError("tensor '" + name + "' has header shape " + shape_str(hshape) +
                               ", config implies " + shape_str(shape));
        const int64_t offset = entry.at("offset").get<int64_t>();
        const int64_t nbytes = entry.at("nbytes").get<int64_t>();
        if (offset != running || nbytes != shape_numel(shape) * int64_t(sizeof(float)))
            throw CorruptHeaderError("tensor '" + name + "' has inconsistent offset/length");
        running += nbytes;
        if (offset + nbytes > payload_size)
            throw TruncatedPayloadError("payload ends before tensor '" + name + "'");
        Tensor t = Tensor::zeros(shape);
        std::memcpy(t.data().data(), payload + offset, size_t(nbytes));
        ckpt.tensors.emplace(name, std::move(t));
    }
    if (running != payload_size)
        throw TruncatedPayloadError("payload has " + std::to_string(payload_size) +
                                    " bytes, manifest covers " + std::to_string(running));
    return ckpt;
}

}  // namespace proctrain
