#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "mmgen/core/jsonio.hpp"
#include "mmgen/core/tensor.hpp"
#include "mmgen/version.hpp"

namespace mmgen {

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are written as little-endian raw values");

template <typename T>
struct DtypeName;
template <>
struct DtypeName<float> {
    static constexpr const char* value = "f32";
};
template <>
struct DtypeName<double> {
    static constexpr const char* value = "f64";
};

// A checkpoint directory: manifest.json describing every tensor (dtype,
// shape, byte offset, checksum) plus a single raw blob file.
namespace ckpt {

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "tensors.bin";

template <typename T>
void save(const std::filesystem::path& dir,
          const std::vector<std::pair<std::string, const Tensor<T>*>>& tensors, const json& meta) {
    std::filesystem::create_directories(dir);
    json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["meta"] = meta;
    json list = json::array();

    std::ofstream blob(dir / kBlobFile, std::ios::binary);
    if (!blob) throw IoError("cannot open for write: " + (dir / kBlobFile).string());
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const uint64_t bytes = static_cast<uint64_t>(t->numel()) * sizeof(T);
        json rec;
        rec["name"] = name;
        rec["dtype"] = DtypeName<T>::value;
        rec["shape"] = t->shape;
        rec["file"] = kBlobFile;
        rec["offset"] = offset;
        rec["bytes"] = bytes;
        rec["fnv64"] = fnv1a64(t->ptr(), bytes);
        list.push_back(std::move(rec));
        blob.write(reinterpret_cast<const char*>(t->ptr()), static_cast<std::streamsize>(bytes));
        offset += bytes;
    }
    if (!blob) throw IoError("write failed: " + (dir / kBlobFile).string());
    blob.close();
    manifest["tensors"] = std::move(list);
    write_json_file(dir / kManifestFile, manifest);
}

template <typename T>
struct Loaded {
    std::map<std::string, Tensor<T>> tensors;
    json meta;
};

template <typename T>
Loaded<T> load(const std::filesystem::path& dir) {
    const json manifest = read_json_file(dir / kManifestFile);
    if (!manifest.contains("tensors") || !manifest.contains("meta"))
        throw ParseError("checkpoint manifest missing sections: " + dir.string());

    Loaded<T> out;
    out.meta = manifest["meta"];
    std::ifstream blob(dir / kBlobFile, std::ios::binary);
    if (!blob) throw IoError("cannot open for read: " + (dir / kBlobFile).string());

    for (const auto& rec : manifest["tensors"]) {
        const std::string name = rec.at("name").get<std::string>();
        const std::string dtype = rec.at("dtype").get<std::string>();
        if (dtype != DtypeName<T>::value)
            throw ParseError("checkpoint tensor " + name + " has dtype " + dtype + ", expected " +
                             DtypeName<T>::value);
        Tensor<T> t(rec.at("shape").get<std::vector<int64_t>>());
        const uint64_t bytes = rec.at("bytes").get<uint64_t>();
        if (bytes != static_cast<uint64_t>(t.numel()) * sizeof(T))
            throw ParseError("checkpoint tensor " + name + " has inconsistent byte count");
        blob.seekg(static_cast<std::streamoff>(rec.at("offset").get<uint64_t>()));
        blob.read(reinterpret_cast<char*>(t.ptr()), static_cast<std::streamsize>(bytes));
        if (!blob) throw IoError("checkpoint blob truncated while reading tensor " + name);
        if (fnv1a64(t.ptr(), bytes) != rec.at("fnv64").get<uint64_t>())
            throw ParseError("checkpoint tensor corrupted: " + name);
        out.tensors.emplace(name, std::move(t));
    }
    return out;
}

}  // namespace ckpt

}  // namespace mmgen
