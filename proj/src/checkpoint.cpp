#include "evax/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace evax {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'E', 'V', 'A', 'X'};
constexpr std::size_t kHeaderBytes = 16;

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

[[noreturn]] void fail(CheckpointError::Kind kind, const std::filesystem::path &path, const std::string &msg) {
    throw CheckpointError(kind, std::string(checkpoint_error_name(kind)) + ": " + path.string() + ": " + msg);
}

}  // namespace

const char *checkpoint_error_name(CheckpointError::Kind kind) {
    switch (kind) {
        case CheckpointError::Kind::io:
            return "io error";
        case CheckpointError::Kind::bad_magic:
            return "bad magic";
        case CheckpointError::Kind::version_mismatch:
            return "version mismatch";
        case CheckpointError::Kind::truncated:
            return "truncated file";
        case CheckpointError::Kind::integrity:
            return "integrity error";
    }
    return "checkpoint error";
}

const Tensor &Checkpoint::tensor(const std::string &name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError("checkpoint has no tensor '" + name + "'");
    return it->second;
}

void save_checkpoint(const Checkpoint &ckpt, const std::filesystem::path &path) {
    nlohmann::json meta = ckpt.metadata;
    meta["format_version"] = kCheckpointVersion;
    nlohmann::json index = nlohmann::json::object();
    std::size_t offset = 0;
    for (const auto &[name, t] : ckpt.tensors) {
        const std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
        index[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}, {"length", bytes}};
        offset = align8(offset + bytes);
    }
    meta["tensors"] = std::move(index);
    const std::string text = meta.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(CheckpointError::Kind::io, path, "cannot open for writing");
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t meta_len = text.size();
    out.write(kMagic, 4);
    out.write(reinterpret_cast<const char *>(&version), sizeof version);
    out.write(reinterpret_cast<const char *>(&meta_len), sizeof meta_len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    const std::size_t header = kHeaderBytes + text.size();
    const std::string zeros(8, '\0');
    out.write(zeros.data(), static_cast<std::streamsize>(align8(header) - header));
    std::size_t written = 0;
    for (const auto &[name, t] : ckpt.tensors) {
        const std::size_t bytes = static_cast<std::size_t>(t.numel()) * sizeof(float);
        out.write(reinterpret_cast<const char *>(t.data()), static_cast<std::streamsize>(bytes));
        written += bytes;
        out.write(zeros.data(), static_cast<std::streamsize>(align8(written) - written));
        written = align8(written);
    }
    if (!out) fail(CheckpointError::Kind::io, path, "write failed");
}

Checkpoint load_checkpoint(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(CheckpointError::Kind::io, path, "cannot open for reading");
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 4) fail(CheckpointError::Kind::truncated, path, "shorter than the magic bytes");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) fail(CheckpointError::Kind::bad_magic, path, "not an EVAX file");
    if (bytes.size() < kHeaderBytes) fail(CheckpointError::Kind::truncated, path, "header incomplete");
    std::uint32_t version = 0;
    std::uint64_t meta_len = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof version);
    std::memcpy(&meta_len, bytes.data() + 8, sizeof meta_len);
    if (version != kCheckpointVersion) {
        fail(CheckpointError::Kind::version_mismatch, path,
             "file version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
    }
    if (meta_len > bytes.size() - kHeaderBytes) {
        fail(CheckpointError::Kind::truncated, path, "metadata length " + std::to_string(meta_len) + " exceeds file");
    }

    Checkpoint ckpt;
    try {
        ckpt.metadata = nlohmann::json::parse(bytes.begin() + kHeaderBytes,
                                              bytes.begin() + kHeaderBytes + static_cast<std::ptrdiff_t>(meta_len));
    } catch (const nlohmann::json::exception &e) {
        fail(CheckpointError::Kind::integrity, path, std::string("metadata is not valid JSON: ") + e.what());
    }
    const std::size_t payload_start = align8(kHeaderBytes + meta_len);
    const std::size_t payload_size = bytes.size() >= payload_start ? bytes.size() - payload_start : 0;
    if (!ckpt.metadata.is_object() || !ckpt.metadata.contains("tensors") || !ckpt.metadata["tensors"].is_object()) {
        fail(CheckpointError::Kind::integrity, path, "metadata lacks a tensor index");
    }

    try {
        for (const auto &[name, entry] : ckpt.metadata["tensors"].items()) {
            if (entry.at("dtype").get<std::string>() != "f32") {
                fail(CheckpointError::Kind::integrity, path, "tensor " + name + " has unsupported dtype");
            }
            const auto shape = entry.at("shape").get<Shape>();
            const auto offset = entry.at("offset").get<std::uint64_t>();
            const auto length = entry.at("length").get<std::uint64_t>();
            bool positive = !shape.empty();
            for (auto e : shape) positive = positive && e > 0;
            if (!positive) fail(CheckpointError::Kind::integrity, path, "tensor " + name + " has an invalid shape");
            if (static_cast<std::uint64_t>(shape_numel(shape)) * sizeof(float) != length) {
                fail(CheckpointError::Kind::integrity, path,
                     "tensor " + name + " shape " + shape_str(shape) + " does not match byte length " +
                         std::to_string(length));
            }
            if (offset % 8 != 0) fail(CheckpointError::Kind::integrity, path, "tensor " + name + " offset unaligned");
            if (offset > payload_size || length > payload_size - offset) {
                fail(CheckpointError::Kind::truncated, path, "payload for tensor " + name + " extends past end of file");
            }
            std::vector<float> data(static_cast<std::size_t>(length / sizeof(float)));
            std::memcpy(data.data(), bytes.data() + payload_start + offset, length);
            ckpt.tensors.emplace(name, Tensor(shape, std::move(data)));
        }
    } catch (const nlohmann::json::exception &e) {
        fail(CheckpointError::Kind::integrity, path, std::string("malformed tensor entry: ") + e.what());
    }
    ckpt.metadata.erase("tensors");
    return ckpt;
}

}  // namespace evax
