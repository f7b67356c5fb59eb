#pragma once

#include "dlfm/tensor.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace dlfm::cli {

namespace fs = std::filesystem;

inline std::string read_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_bytes(const fs::path& p, const std::string& bytes)
{
    if (p.has_parent_path()) {
        std::error_code ec;
        fs::create_directories(p.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
    }
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + p.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + p.string());
}

} // namespace dlfm::cli
