#pragma once

#include <filesystem>
#include <fstream>
#include <string>

// Fresh per-test scratch directory under the system temp path.
inline std::string test_scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("lg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p.string();
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}
