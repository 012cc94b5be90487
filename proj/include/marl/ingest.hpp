#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marl/error.hpp"
#include "marl/geometry.hpp"
#include "marl/io.hpp"

namespace marl {

enum class UseClass { SFH, MFH, OTHER };

inline std::string to_string(UseClass c) {
    switch (c) {
    case UseClass::SFH: return "SFH";
    case UseClass::MFH: return "MFH";
    case UseClass::OTHER: return "OTHER";
    }
    return "OTHER";
}

inline std::optional<UseClass> parse_use_class(std::string_view s) {
    if (s == "SFH") return UseClass::SFH;
    if (s == "MFH") return UseClass::MFH;
    if (s == "OTHER") return UseClass::OTHER;
    return std::nullopt;
}

struct FootprintRecord {
    std::string id;
    geometry::Ring polygon;
    double height_m = 0.0;
    double area_m2 = 0.0;
    std::string program;
    int vintage_year = 0;
    UseClass use_class = UseClass::OTHER;

    friend bool operator==(const FootprintRecord&, const FootprintRecord&) = default;
};

/// Throws InvalidRecord when a record breaks its invariants.
inline void validate(const FootprintRecord& r) {
    auto fail = [&](const std::string& why) { throw InvalidRecord("record '" + r.id + "': " + why); };
    if (r.polygon.size() < 3) fail("polygon needs at least 3 vertices");
    for (const auto& p : r.polygon) {
        if (!std::isfinite(p.x) || !std::isfinite(p.y)) fail("non-finite vertex");
    }
    if (geometry::signed_area(r.polygon) == 0.0) fail("polygon has zero signed area");
    if (!(r.area_m2 > 0.0) || !std::isfinite(r.area_m2)) fail("area_m2 must be positive");
    if (!(r.height_m >= 0.0) || !std::isfinite(r.height_m)) fail("height_m must be non-negative");
    if (r.vintage_year < 1800 || r.vintage_year > 2100) fail("vintage_year outside [1800, 2100]");
}

inline bool is_valid(const FootprintRecord& r) {
    try {
        validate(r);
        return true;
    } catch (const InvalidRecord&) {
        return false;
    }
}

// ---------------------------------------------------------------------------
// Dataset parsing

enum class DatasetFormat { geojson, csv };

struct ParsedDataset {
    std::vector<FootprintRecord> records;
    std::size_t skipped = 0;
};

namespace detail {

inline std::optional<double> parse_double(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<int> parse_int(std::string_view s) {
    int v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline geometry::Ring drop_closing_vertex(geometry::Ring ring) {
    if (ring.size() > 1 && ring.front() == ring.back()) {
        ring.pop_back();
    }
    return ring;
}

inline std::optional<geometry::Ring> ring_from_geojson(const nlohmann::json& geom) {
    if (!geom.is_object() || geom.value("type", "") != "Polygon") return std::nullopt;
    const auto it = geom.find("coordinates");
    if (it == geom.end() || !it->is_array() || it->empty() || !(*it)[0].is_array()) return std::nullopt;
    geometry::Ring ring;
    for (const auto& pt : (*it)[0]) {
        if (!pt.is_array() || pt.size() < 2 || !pt[0].is_number() || !pt[1].is_number()) return std::nullopt;
        ring.push_back({pt[0].get<double>(), pt[1].get<double>()});
    }
    return drop_closing_vertex(std::move(ring));
}

/// Outer ring of a WKT POLYGON; holes are ignored.
inline std::optional<geometry::Ring> ring_from_wkt(std::string_view wkt) {
    std::string upper(wkt);
    std::transform(upper.begin(), upper.end(), upper.begin(), [](unsigned char c) { return std::toupper(c); });
    const auto kw = upper.find("POLYGON");
    if (kw == std::string::npos) return std::nullopt;
    const auto open = wkt.find('(', kw);
    if (open == std::string_view::npos) return std::nullopt;
    const auto inner = wkt.find('(', open + 1);
    if (inner == std::string_view::npos) return std::nullopt;
    const auto close = wkt.find(')', inner);
    if (close == std::string_view::npos) return std::nullopt;
    auto body = wkt.substr(inner + 1, close - inner - 1);
    geometry::Ring ring;
    while (!body.empty()) {
        const auto comma = body.find(',');
        auto pair = body.substr(0, comma);
        while (!pair.empty() && std::isspace(static_cast<unsigned char>(pair.front()))) pair.remove_prefix(1);
        while (!pair.empty() && std::isspace(static_cast<unsigned char>(pair.back()))) pair.remove_suffix(1);
        const auto space = pair.find_first_of(" \t");
        if (space == std::string_view::npos) return std::nullopt;
        const auto x = parse_double(pair.substr(0, space));
        const auto y = parse_double(pair.substr(space + 1));
        if (!x || !y) return std::nullopt;
        ring.push_back({*x, *y});
        if (comma == std::string_view::npos) break;
        body.remove_prefix(comma + 1);
    }
    return drop_closing_vertex(std::move(ring));
}

inline std::string format_double(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

inline std::optional<FootprintRecord> record_from_feature(const nlohmann::json& feature) {
    if (!feature.is_object()) return std::nullopt;
    const auto props_it = feature.find("properties");
    const auto geom_it = feature.find("geometry");
    if (props_it == feature.end() || geom_it == feature.end() || !props_it->is_object()) return std::nullopt;
    const auto& p = *props_it;
    auto has = [&](const char* key, auto pred) {
        const auto it = p.find(key);
        return it != p.end() && pred(*it);
    };
    const auto is_str = [](const nlohmann::json& j) { return j.is_string(); };
    const auto is_num = [](const nlohmann::json& j) { return j.is_number(); };
    const auto is_int = [](const nlohmann::json& j) { return j.is_number_integer(); };
    if (!has("id", is_str) || !has("height_m", is_num) || !has("area_m2", is_num) || !has("program", is_str) ||
        !has("vintage_year", is_int) || !has("use_class", is_str)) {
        return std::nullopt;
    }
    const auto use_class = parse_use_class(p["use_class"].get<std::string>());
    auto ring = ring_from_geojson(*geom_it);
    if (!use_class || !ring) return std::nullopt;
    const auto year = p["vintage_year"].get<std::int64_t>();
    if (year < 1800 || year > 2100) return std::nullopt;
    FootprintRecord r{p["id"].get<std::string>(),
                      std::move(*ring),
                      p["height_m"].get<double>(),
                      p["area_m2"].get<double>(),
                      p["program"].get<std::string>(),
                      static_cast<int>(year),
                      *use_class};
    if (!is_valid(r)) return std::nullopt;
    return r;
}

} // namespace detail

inline ParsedDataset parse_geojson(std::string_view text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError(std::string("malformed GeoJSON: ") + e.what());
    }
    if (!doc.is_object() || doc.value("type", "") != "FeatureCollection" || !doc.contains("features") ||
        !doc["features"].is_array()) {
        throw IoError("GeoJSON input must be a FeatureCollection with a features array");
    }
    ParsedDataset out;
    for (const auto& feature : doc["features"]) {
        if (auto r = detail::record_from_feature(feature)) {
            out.records.push_back(std::move(*r));
        } else {
            ++out.skipped;
        }
    }
    return out;
}

inline ParsedDataset parse_csv_dataset(std::string_view text) {
    const auto rows = io::parse_csv(text);
    ParsedDataset out;
    if (rows.empty()) return out;
    const auto& header = rows[0];
    const auto c_id = io::csv_column(header, "id");
    const auto c_geom = io::csv_column(header, "geometry");
    const auto c_h = io::csv_column(header, "height_m");
    const auto c_a = io::csv_column(header, "area_m2");
    const auto c_prog = io::csv_column(header, "program");
    const auto c_year = io::csv_column(header, "vintage_year");
    const auto c_use = io::csv_column(header, "use_class");
    const auto width = std::max({c_id, c_geom, c_h, c_a, c_prog, c_year, c_use}) + 1;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() < width) {
            ++out.skipped;
            continue;
        }
        auto ring = detail::ring_from_wkt(row[c_geom]);
        const auto h = detail::parse_double(row[c_h]);
        const auto a = detail::parse_double(row[c_a]);
        const auto year = detail::parse_int(row[c_year]);
        const auto use = parse_use_class(row[c_use]);
        if (!ring || !h || !a || !year || !use || row[c_id].empty()) {
            ++out.skipped;
            continue;
        }
        FootprintRecord r{row[c_id], std::move(*ring), *h, *a, row[c_prog], *year, *use};
        if (!is_valid(r)) {
            ++out.skipped;
            continue;
        }
        out.records.push_back(std::move(r));
    }
    return out;
}

inline ParsedDataset parse_footprint_dataset(const std::filesystem::path& path, DatasetFormat format) {
    const auto text = io::read_file(path);
    return format == DatasetFormat::geojson ? parse_geojson(text) : parse_csv_dataset(text);
}

inline DatasetFormat format_from_extension(const std::filesystem::path& path) {
    const auto ext = path.extension().string();
    if (ext == ".csv") return DatasetFormat::csv;
    if (ext == ".geojson" || ext == ".json") return DatasetFormat::geojson;
    throw ConfigError("cannot infer dataset format from '" + path.string() + "'");
}

inline nlohmann::json to_geojson(const std::vector<FootprintRecord>& records) {
    auto features = nlohmann::json::array();
    for (const auto& r : records) {
        auto ring = nlohmann::json::array();
        for (const auto& p : r.polygon) ring.push_back({p.x, p.y});
        if (!r.polygon.empty()) ring.push_back({r.polygon.front().x, r.polygon.front().y});
        features.push_back({{"type", "Feature"},
                            {"geometry", {{"type", "Polygon"}, {"coordinates", nlohmann::json::array({ring})}}},
                            {"properties",
                             {{"id", r.id},
                              {"height_m", r.height_m},
                              {"area_m2", r.area_m2},
                              {"program", r.program},
                              {"vintage_year", r.vintage_year},
                              {"use_class", to_string(r.use_class)}}}});
    }
    return {{"type", "FeatureCollection"}, {"features", features}};
}

inline std::string to_wkt(const geometry::Ring& ring) {
    std::string s = "POLYGON ((";
    for (std::size_t i = 0; i <= ring.size(); ++i) {
        const auto& p = ring[i % ring.size()];
        if (i) s += ", ";
        s += detail::format_double(p.x) + " " + detail::format_double(p.y);
    }
    return s + "))";
}

inline std::string to_csv(const std::vector<FootprintRecord>& records) {
    std::string out = "id,height_m,area_m2,program,vintage_year,use_class,geometry\n";
    for (const auto& r : records) {
        out += io::csv_quote(r.id) + "," + detail::format_double(r.height_m) + "," +
               detail::format_double(r.area_m2) + "," + io::csv_quote(r.program) + "," +
               std::to_string(r.vintage_year) + "," + to_string(r.use_class) + "," + io::csv_quote(to_wkt(r.polygon)) +
               "\n";
    }
    return out;
}

inline std::vector<FootprintRecord> filter_residential(const std::vector<FootprintRecord>& records) {
    std::vector<FootprintRecord> out;
    std::copy_if(records.begin(), records.end(), std::back_inserter(out),
                 [](const FootprintRecord& r) { return r.use_class != UseClass::OTHER; });
    return out;
}

// ---------------------------------------------------------------------------
// Rasterization

struct PreprocessConfig {
    int base_px = 1410;
    int side_px = 112;
    double meters_per_pixel = 0.5;
    double h_min = 0.0;
    double h_max = 100.0;
};

inline int encode_height_grayscale(double height_m, double h_min, double h_max) {
    if (!(h_max > h_min)) {
        throw InvalidBounds("height bounds require h_max > h_min");
    }
    const double h = std::clamp(height_m, h_min, h_max);
    const double scaled = 255.0 * (h - h_min) / (h_max - h_min);
    return std::clamp(static_cast<int>(std::floor(scaled + 0.5)), 0, 255);
}

struct RasterImage {
    int width = 0;
    int height = 0;
    std::vector<float> pixels; // row-major, values in [0, 1]
    double meters_per_pixel = 1.0;

    float at(int row, int col) const { return pixels[static_cast<std::size_t>(row) * width + col]; }
    float& at(int row, int col) { return pixels[static_cast<std::size_t>(row) * width + col]; }

    static RasterImage blank(int side, double mpp) {
        return {side, side, std::vector<float>(static_cast<std::size_t>(side) * side, 0.0f), mpp};
    }
};

/// The polygon centroid lands on the canvas center (canvas_px / 2, canvas_px / 2)
/// in continuous pixel coordinates; rows grow southwards.
inline RasterImage rasterize_footprint(const FootprintRecord& record, int canvas_px, double meters_per_pixel,
                                       double h_min = 0.0, double h_max = 100.0) {
    if (canvas_px <= 0 || !(meters_per_pixel > 0.0)) {
        throw ConfigError("canvas size and meters_per_pixel must be positive");
    }
    validate(record);
    const float value = static_cast<float>(encode_height_grayscale(record.height_m, h_min, h_max)) / 255.0f;
    const auto& poly = record.polygon;
    const auto c = geometry::centroid(poly); // relative to poly[0]
    const double half = 0.5 * canvas_px;

    geometry::Ring px;
    px.reserve(poly.size());
    double min_u = half, max_u = half, min_v = half, max_v = half;
    for (const auto& p : poly) {
        const double u = half + ((p.x - poly[0].x) - c.x) / meters_per_pixel;
        const double v = half - ((p.y - poly[0].y) - c.y) / meters_per_pixel;
        px.push_back({u, v});
        min_u = std::min(min_u, u);
        max_u = std::max(max_u, u);
        min_v = std::min(min_v, v);
        max_v = std::max(max_v, v);
    }
    if (min_u < 0.0 || min_v < 0.0 || max_u > canvas_px || max_v > canvas_px) {
        throw OutOfCanvas("record '" + record.id + "' does not fit a " + std::to_string(canvas_px) + " px canvas at " +
                          detail::format_double(meters_per_pixel) + " m/px");
    }

    auto image = RasterImage::blank(canvas_px, meters_per_pixel);
    const int col0 = std::max(0, static_cast<int>(std::floor(min_u - 0.5)));
    const int col1 = std::min(canvas_px - 1, static_cast<int>(std::ceil(max_u - 0.5)));
    const int row0 = std::max(0, static_cast<int>(std::floor(min_v - 0.5)));
    const int row1 = std::min(canvas_px - 1, static_cast<int>(std::ceil(max_v - 0.5)));
    for (int row = row0; row <= row1; ++row) {
        for (int col = col0; col <= col1; ++col) {
            if (geometry::contains(px, {col + 0.5, row + 0.5})) {
                image.at(row, col) = value;
            }
        }
    }
    return image;
}

/// Area-average (box filter) resampling of a square window.
inline std::vector<float> resize_area(std::span<const float> src, int src_side, int dst_side) {
    if (src_side == dst_side) {
        return {src.begin(), src.end()};
    }
    // weights[d] lists (source index, overlap length) for destination index d.
    const double scale = static_cast<double>(src_side) / dst_side;
    std::vector<std::vector<std::pair<int, double>>> weights(dst_side);
    for (int d = 0; d < dst_side; ++d) {
        const double lo = d * scale, hi = (d + 1) * scale;
        for (int s = static_cast<int>(std::floor(lo)); s < std::min(src_side, static_cast<int>(std::ceil(hi))); ++s) {
            const double overlap = std::min<double>(hi, s + 1) - std::max<double>(lo, s);
            if (overlap > 0.0) weights[d].emplace_back(s, overlap / scale);
        }
    }
    std::vector<double> rows(static_cast<std::size_t>(dst_side) * src_side, 0.0);
    for (int dr = 0; dr < dst_side; ++dr) {
        for (const auto& [sr, w] : weights[dr]) {
            for (int c = 0; c < src_side; ++c) {
                rows[static_cast<std::size_t>(dr) * src_side + c] += w * src[static_cast<std::size_t>(sr) * src_side + c];
            }
        }
    }
    std::vector<float> out(static_cast<std::size_t>(dst_side) * dst_side);
    for (int dr = 0; dr < dst_side; ++dr) {
        for (int dc = 0; dc < dst_side; ++dc) {
            double acc = 0.0;
            for (const auto& [sc, w] : weights[dc]) acc += w * rows[static_cast<std::size_t>(dr) * src_side + sc];
            out[static_cast<std::size_t>(dr) * dst_side + dc] = static_cast<float>(std::clamp(acc, 0.0, 1.0));
        }
    }
    return out;
}

struct MultiScaleImage {
    static constexpr int kChannels = 3;
    int side_px = 0;
    std::array<std::vector<float>, kChannels> channels; // widest field of view first
    std::string source_id;

    /// Interleaved (row, col, channel) layout.
    std::vector<float> hwc() const {
        std::vector<float> out(static_cast<std::size_t>(side_px) * side_px * kChannels);
        for (std::size_t i = 0; i < channels[0].size(); ++i) {
            for (int c = 0; c < kChannels; ++c) out[i * kChannels + c] = channels[c][i];
        }
        return out;
    }
};

/// Window sides at the reference 1410 px canvas, widest first.
inline constexpr std::array<int, 3> kReferenceWindows{700, 224, 112};
inline constexpr int kReferenceBasePx = 1410;

inline std::array<int, 3> crop_windows(int base_px) {
    std::array<int, 3> out{};
    for (int i = 0; i < 3; ++i) {
        const auto scaled = static_cast<int>(std::lround(static_cast<double>(kReferenceWindows[i]) * base_px /
                                                         kReferenceBasePx));
        out[i] = std::clamp(scaled, 1, base_px);
    }
    return out;
}

inline std::vector<float> center_crop(const RasterImage& raster, int window) {
    const int offset = (raster.width - window) / 2;
    std::vector<float> out(static_cast<std::size_t>(window) * window);
    for (int r = 0; r < window; ++r) {
        for (int c = 0; c < window; ++c) {
            out[static_cast<std::size_t>(r) * window + c] = raster.at(offset + r, offset + c);
        }
    }
    return out;
}

inline MultiScaleImage build_multiscale(const RasterImage& raster, int base_px, int side_px, std::string source_id = {}) {
    if (raster.width != raster.height || raster.width != base_px) {
        throw DimensionError("build_multiscale expects a " + std::to_string(base_px) + " px square raster, got " +
                             std::to_string(raster.width) + "x" + std::to_string(raster.height));
    }
    if (side_px <= 0) {
        throw ConfigError("side_px must be positive");
    }
    MultiScaleImage out;
    out.side_px = side_px;
    out.source_id = std::move(source_id);
    const auto windows = crop_windows(base_px);
    for (int i = 0; i < 3; ++i) {
        out.channels[i] = resize_area(center_crop(raster, windows[i]), windows[i], side_px);
    }
    return out;
}

inline MultiScaleImage preprocess(const FootprintRecord& record, const PreprocessConfig& cfg) {
    const auto raster = rasterize_footprint(record, cfg.base_px, cfg.meters_per_pixel, cfg.h_min, cfg.h_max);
    return build_multiscale(raster, cfg.base_px, cfg.side_px, record.id);
}

inline void write_raster_png(const std::filesystem::path& path, int side, std::span<const float> pixels) {
    std::vector<std::uint8_t> bytes(pixels.size());
    std::transform(pixels.begin(), pixels.end(), bytes.begin(), [](float v) {
        return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
    });
    io::write_png(path, side, side, 1, bytes);
}

} // namespace marl
