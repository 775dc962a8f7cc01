#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "chi/tensor.hpp"

namespace chi {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Container layout (all integers little-endian):
//   8-byte magic | u32 version | u64 header length | header UTF-8 | f64 payload
// The header lists metadata lines, array names/shapes/offsets (offsets count
// doubles from the payload start), and an optional verbatim text block after
// a line reading "text". Bit-exact and seekable.

constexpr char kCheckpointMagic[9] = "XMODCKPT";
constexpr char kDatasetMagic[9] = "XMODDATA";
constexpr std::uint32_t kFormatVersion = 1;

struct ArrayEntry {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

struct ArrayFile {
    std::uint32_t version = kFormatVersion;
    std::vector<std::pair<std::string, std::string>> meta;  // single-token values
    std::string text;                                       // verbatim block (config snapshot)
    std::vector<ArrayEntry> arrays;

    const ArrayEntry* find(const std::string& name) const {
        for (const auto& a : arrays)
            if (a.name == name) return &a;
        return nullptr;
    }

    std::string meta_value(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        throw IoError("file: missing metadata key '" + key + "'");
    }
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint32_t take_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw IoError("file: truncated (u32)");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t take_u64(std::istream& in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw IoError("file: truncated (u64)");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
    return v;
}

// The bit pattern of a double maps to the same uint64 value on any platform;
// put_u64/take_u64 fix the on-disk byte order.
inline std::uint64_t double_bits(double d) {
    std::uint64_t u;
    std::memcpy(&u, &d, 8);
    return u;
}

inline double bits_to_double(std::uint64_t u) {
    double d;
    std::memcpy(&d, &u, 8);
    return d;
}

}  // namespace detail

inline void write_array_file(const std::filesystem::path& path, const char* magic,
                             const ArrayFile& file) {
    std::ostringstream header;
    for (const auto& [k, v] : file.meta) header << "meta " << k << " " << v << "\n";
    std::uint64_t offset = 0;
    for (const auto& a : file.arrays) {
        header << "array " << a.name << " ";
        for (std::size_t i = 0; i < a.shape.size(); ++i) header << (i ? "," : "") << a.shape[i];
        if (a.shape.empty()) header << "scalar";
        header << " " << offset << "\n";
        offset += a.data.size();
    }
    if (!file.text.empty()) header << "text\n" << file.text;
    const std::string head = header.str();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("file: cannot write '" + path.string() + "'");
    out.write(magic, 8);
    detail::put_u32(out, file.version);
    detail::put_u64(out, head.size());
    out.write(head.data(), std::streamsize(head.size()));
    for (const auto& a : file.arrays)
        for (double d : a.data) detail::put_u64(out, detail::double_bits(d));
    if (!out) throw IoError("file: write failed for '" + path.string() + "'");
}

inline ArrayFile read_array_file(const std::filesystem::path& path, const char* magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("file: cannot open '" + path.string() + "'");
    char got[8];
    if (!in.read(got, 8)) throw IoError("file: truncated magic in '" + path.string() + "'");
    if (std::memcmp(got, magic, 8) != 0)
        throw IoError("file: bad magic in '" + path.string() + "'");
    ArrayFile file;
    file.version = detail::take_u32(in);
    if (file.version != kFormatVersion)
        throw IoError("file: version " + std::to_string(file.version) + " unsupported (want " +
                      std::to_string(kFormatVersion) + ")");
    const std::uint64_t head_len = detail::take_u64(in);
    std::string head(head_len, '\0');
    if (!in.read(head.data(), std::streamsize(head_len)))
        throw IoError("file: truncated header in '" + path.string() + "'");

    struct Pending {
        std::string name;
        Shape shape;
        std::uint64_t offset;
    };
    std::vector<Pending> pending;
    std::istringstream hs(head);
    std::string line;
    while (std::getline(hs, line)) {
        if (line == "text") {
            std::ostringstream rest;
            rest << hs.rdbuf();
            file.text = rest.str();
            break;
        }
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "meta") {
            std::string k, v;
            ls >> k;
            std::getline(ls, v);
            if (!v.empty() && v.front() == ' ') v.erase(0, 1);
            file.meta.emplace_back(k, v);
        } else if (tag == "array") {
            Pending p;
            std::string dims;
            ls >> p.name >> dims >> p.offset;
            if (!ls) throw IoError("file: malformed array line '" + line + "'");
            if (dims != "scalar") {
                std::istringstream ds(dims);
                std::string d;
                while (std::getline(ds, d, ',')) p.shape.push_back(std::stoull(d));
            }
            pending.push_back(std::move(p));
        } else if (!tag.empty()) {
            throw IoError("file: unknown header tag '" + tag + "'");
        }
    }

    std::uint64_t total = 0;
    for (const auto& p : pending) total += numel(p.shape);
    const auto payload_start = std::streamoff(8 + 4 + 8 + head_len);
    in.seekg(0, std::ios::end);
    const std::uint64_t actual = std::uint64_t(in.tellg()) - std::uint64_t(payload_start);
    if (actual != total * 8)
        throw IoError("file: payload length " + std::to_string(actual) + " != expected " +
                      std::to_string(total * 8) + " in '" + path.string() + "'");
    in.seekg(payload_start);
    for (const auto& p : pending) {
        ArrayEntry a;
        a.name = p.name;
        a.shape = p.shape;
        a.data.resize(numel(p.shape));
        for (double& d : a.data) d = detail::bits_to_double(detail::take_u64(in));
        file.arrays.push_back(std::move(a));
    }
    return file;
}

}  // namespace chi
