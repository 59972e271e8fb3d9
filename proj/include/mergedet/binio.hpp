#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mergedet/common.hpp"

namespace mergedet::binio {

inline void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint64_t read_u64(std::ifstream& in) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    check(in.good(), "checkpoint: truncated read");
    return v;
}

inline void write_string(std::ofstream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::ifstream& in) {
    const uint64_t n = read_u64(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    check(in.good(), "checkpoint: truncated string");
    return s;
}

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    write_u64(out, v.size());
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_doubles(std::ifstream& in) {
    const uint64_t n = read_u64(in);
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    check(in.good(), "checkpoint: truncated double array");
    return v;
}

}  // namespace mergedet::binio
