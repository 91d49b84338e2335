#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>

#include <json.hpp>

#include "mmgen/core/error.hpp"
#include "mmgen/core/rng.hpp"

namespace mmgen {

using json = nlohmann::json;

inline void write_json_file(const std::filesystem::path& path, const json& j, int indent = 2) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open for write: " + path.string());
    os << j.dump(indent) << "\n";
    if (!os) throw IoError("write failed: " + path.string());
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open for read: " + path.string());
    json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ParseError("bad json in " + path.string() + ": " + e.what());
    }
    return j;
}

// nlohmann::json objects keep keys sorted, so dump() is a canonical form and
// the hash is stable under key reordering in the source file.
inline std::string config_hash(const json& j) {
    const uint64_t h = fnv1a64(j.dump());
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << h;
    return os.str();
}

}  // namespace mmgen
