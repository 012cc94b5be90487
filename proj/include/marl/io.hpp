#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/tokenizer.hpp>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <png.h>

#include "marl/error.hpp"

namespace marl::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path.string() + "' for reading");
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

inline fs::path temp_sibling(const fs::path& path) {
    return path.parent_path() / ("." + path.filename().string() + ".tmp");
}

/// Write through a temporary sibling and rename into place so readers
/// never observe a truncated file.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const auto tmp = temp_sibling(path);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + tmp.string() + "' for writing");
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw IoError("write failed for '" + tmp.string() + "'");
        }
    }
    fs::rename(tmp, path);
}

inline json read_json(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw IoError("malformed JSON in '" + path.string() + "': " + e.what());
    }
}

inline void write_json(const fs::path& path, const json& value) { write_file_atomic(path, value.dump(2) + "\n"); }

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int length = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
        throw IoError("sha256 digest failed");
    }
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    out.reserve(2 * length);
    for (unsigned int i = 0; i < length; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

inline std::string file_digest(const fs::path& path) { return sha256_hex(read_file(path)); }

// Little-endian float32 / uint64 encoding.

inline void append_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
    }
}

inline std::uint64_t read_u64_le(std::string_view in, std::size_t offset) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
    }
    return v;
}

inline void append_f32_le(std::string& out, std::span<const float> values) {
    const auto start = out.size();
    out.resize(start + 4 * values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        auto bits = std::bit_cast<std::uint32_t>(values[i]);
        for (int b = 0; b < 4; ++b) {
            out[start + 4 * i + b] = static_cast<char>((bits >> (8 * b)) & 0xFF);
        }
    }
}

inline std::vector<float> read_f32_le(std::string_view in, std::size_t offset, std::size_t count) {
    if (offset + 4 * count > in.size()) {
        throw IoError("float blob truncated");
    }
    std::vector<float> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
            bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + 4 * i + b])) << (8 * b);
        }
        out[i] = std::bit_cast<float>(bits);
    }
    return out;
}

/// Container shared by checkpoints and latent exports:
///   8-byte magic | u64 LE header length | JSON header | f32 LE blob
struct BlobFile {
    json header;
    std::vector<float> blob;
};

inline std::string encode_blob_file(std::string_view magic, const BlobFile& file) {
    if (magic.size() != 8) {
        throw ConfigError("blob magic must be 8 bytes");
    }
    const auto header = file.header.dump();
    std::string out(magic);
    append_u64_le(out, header.size());
    out += header;
    append_f32_le(out, file.blob);
    return out;
}

inline BlobFile decode_blob_file(std::string_view magic, std::string_view bytes, const std::string& name) {
    if (bytes.size() < 16 || bytes.substr(0, 8) != magic) {
        throw IoError("'" + name + "' is not a " + std::string(magic) + " file");
    }
    const auto header_len = read_u64_le(bytes, 8);
    if (16 + header_len > bytes.size()) {
        throw IoError("'" + name + "' header truncated");
    }
    BlobFile file;
    try {
        file.header = json::parse(bytes.substr(16, header_len));
    } catch (const json::parse_error& e) {
        throw IoError("'" + name + "' header is not JSON: " + e.what());
    }
    const auto blob_bytes = bytes.size() - 16 - header_len;
    if (blob_bytes % 4 != 0) {
        throw IoError("'" + name + "' blob is not a whole number of floats");
    }
    file.blob = read_f32_le(bytes, 16 + header_len, blob_bytes / 4);
    return file;
}

inline void write_blob_file(const fs::path& path, std::string_view magic, const BlobFile& file) {
    write_file_atomic(path, encode_blob_file(magic, file));
}

inline BlobFile read_blob_file(const fs::path& path, std::string_view magic) {
    return decode_blob_file(magic, read_file(path), path.string());
}

// CSV

using CsvRow = std::vector<std::string>;

inline std::vector<CsvRow> parse_csv(std::string_view text) {
    using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;
    std::vector<CsvRow> rows;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        try {
            Tokenizer tok(line, boost::escaped_list_separator<char>('\\', ',', '"'));
            rows.emplace_back(tok.begin(), tok.end());
        } catch (const boost::escaped_list_error& e) {
            throw IoError(std::string("malformed CSV line: ") + e.what());
        }
    }
    return rows;
}

inline std::vector<CsvRow> read_csv(const fs::path& path) { return parse_csv(read_file(path)); }

inline std::string csv_quote(std::string_view field) {
    if (field.find_first_of(",\"\n") == std::string_view::npos) {
        return std::string(field);
    }
    std::string out = "\"";
    for (char c : field) {
        if (c == '"' || c == '\\') {
            out.push_back('\\');
        }
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

/// Column index by header name, or throws.
inline std::size_t csv_column(const CsvRow& header, std::string_view name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
        if (header[i] == name) {
            return i;
        }
    }
    throw IoError("CSV is missing column '" + std::string(name) + "'");
}

// PNG

/// 8-bit PNG, `channels` 1 (gray) or 3 (RGB), row-major interleaved.
inline void write_png(const fs::path& path, int width, int height, int channels, std::span<const std::uint8_t> pixels) {
    if (channels != 1 && channels != 3) {
        throw ConfigError("PNG channels must be 1 or 3");
    }
    if (pixels.size() != static_cast<std::size_t>(width) * height * channels) {
        throw DimensionError("PNG pixel buffer does not match its dimensions");
    }
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    const auto tmp = temp_sibling(path);
    FILE* fp = std::fopen(tmp.c_str(), "wb");
    if (!fp) {
        throw IoError("cannot open '" + tmp.string() + "' for writing");
    }
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        std::fclose(fp);
        throw IoError("libpng failed writing '" + path.string() + "'");
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, width, height, 8, channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < height; ++y) {
        png_write_row(png, pixels.data() + static_cast<std::size_t>(y) * width * channels);
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fs::rename(tmp, path);
}

/// Exclusive per-directory lock held for the lifetime of the object.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".marl.lock") {
        fs::create_directories(dir);
        FILE* fp = std::fopen(path_.c_str(), "wx");
        if (!fp) {
            throw StateError("output directory '" + dir.string() + "' is locked by another stage (" +
                             path_.string() + ")");
        }
        std::fclose(fp);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    fs::path path_;
};

} // namespace marl::io
