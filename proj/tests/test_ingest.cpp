#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "marl/ingest.hpp"
#include "marl/synth.hpp"
#include "support/oracles.hpp"

using namespace marl;
using nlohmann::json;

namespace {

FootprintRecord square_record(double side, double height = 10.0, std::string id = "sq") {
    FootprintRecord r{std::move(id), {{0, 0}, {side, 0}, {side, side}, {0, side}}, height, side * side, "Apartment",
                      1990, UseClass::MFH};
    return r;
}

json feature(const std::string& id, bool with_height = true) {
    json props = {{"id", id}, {"area_m2", 100.0}, {"program", "Duplex"}, {"vintage_year", 1999}, {"use_class", "MFH"}};
    if (with_height) props["height_m"] = 6.5;
    return {{"type", "Feature"},
            {"geometry", {{"type", "Polygon"}, {"coordinates", {{{0, 0}, {10, 0}, {10, 10}, {0, 10}, {0, 0}}}}}},
            {"properties", props}};
}

std::vector<oracle::Vertex> vertices(const geometry::Ring& ring) {
    std::vector<oracle::Vertex> out;
    for (const auto& p : ring) out.emplace_back(p.x, p.y);
    return out;
}

std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("marl_ingest_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace

TEST(Parse, SkipsFeatureMissingHeight) {
    json fc = {{"type", "FeatureCollection"},
               {"features", {feature("a"), feature("b"), feature("c"), feature("d", false)}}};
    const auto parsed = parse_geojson(fc.dump());
    EXPECT_EQ(parsed.records.size(), 3u);
    EXPECT_EQ(parsed.skipped, 1u);
}

TEST(Parse, EmptyCollection) {
    const auto parsed = parse_geojson(R"({"type":"FeatureCollection","features":[]})");
    EXPECT_TRUE(parsed.records.empty());
    EXPECT_EQ(parsed.skipped, 0u);
}

TEST(Parse, MalformedGeometryIsSkippedNotFatal) {
    auto bad = feature("bad");
    bad["geometry"]["coordinates"] = {{{0, 0}, {1, 1}}};
    json fc = {{"type", "FeatureCollection"}, {"features", {feature("ok"), bad}}};
    const auto parsed = parse_geojson(fc.dump());
    EXPECT_EQ(parsed.records.size(), 1u);
    EXPECT_EQ(parsed.skipped, 1u);
}

TEST(Parse, UnreadableFileIsIoError) {
    EXPECT_THROW(parse_footprint_dataset("/nonexistent/footprints.geojson", DatasetFormat::geojson), IoError);
}

TEST(Parse, SyntheticGeojsonRoundTripIsExact) {
    synth::GeneratorSpec spec;
    spec.n = 500;
    spec.seed = 42;
    const auto records = synth::generate_footprints(spec);
    const auto dir = scratch("roundtrip");
    const auto path = dir / "fp.geojson";
    io::write_file_atomic(path, to_geojson(records).dump());
    const auto parsed = parse_footprint_dataset(path, DatasetFormat::geojson);
    ASSERT_EQ(parsed.records.size(), records.size());
    EXPECT_EQ(parsed.skipped, 0u);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& a = records[i];
        const auto& b = parsed.records[i];
        ASSERT_EQ(a.polygon.size(), b.polygon.size());
        for (std::size_t v = 0; v < a.polygon.size(); ++v) {
            EXPECT_EQ(a.polygon[v].x, b.polygon[v].x);
            EXPECT_EQ(a.polygon[v].y, b.polygon[v].y);
        }
        EXPECT_EQ(a.id, b.id);
        EXPECT_EQ(a.height_m, b.height_m);
        EXPECT_EQ(a.area_m2, b.area_m2);
        EXPECT_EQ(a.program, b.program);
        EXPECT_EQ(a.vintage_year, b.vintage_year);
        EXPECT_EQ(a.use_class, b.use_class);
    }
}

TEST(Parse, CsvRoundTripIsExact) {
    synth::GeneratorSpec spec;
    spec.n = 60;
    spec.seed = 9;
    spec.sfh_fraction = 0.5;
    spec.mfh_fraction = 0.3;
    spec.other_fraction = 0.2;
    const auto records = synth::generate_footprints(spec);
    const auto parsed = parse_csv_dataset(to_csv(records));
    EXPECT_EQ(parsed.skipped, 0u);
    EXPECT_EQ(parsed.records, records);
}

TEST(Parse, FormatFromExtension) {
    EXPECT_EQ(format_from_extension("a/b.geojson"), DatasetFormat::geojson);
    EXPECT_EQ(format_from_extension("a/b.json"), DatasetFormat::geojson);
    EXPECT_EQ(format_from_extension("a/b.csv"), DatasetFormat::csv);
}

TEST(Record, ValidationRejectsDegenerateInputs) {
    auto r = square_record(10);
    EXPECT_TRUE(is_valid(r));
    auto flat = r;
    flat.polygon = {{0, 0}, {1, 1}, {2, 2}};
    EXPECT_THROW(validate(flat), InvalidRecord);
    auto neg = r;
    neg.height_m = -1;
    EXPECT_FALSE(is_valid(neg));
    auto old = r;
    old.vintage_year = 1700;
    EXPECT_FALSE(is_valid(old));
    auto noarea = r;
    noarea.area_m2 = 0;
    EXPECT_FALSE(is_valid(noarea));
}

TEST(Filter, KeepsResidentialInOrder) {
    auto a = square_record(5, 3, "a");
    a.use_class = UseClass::SFH;
    auto b = square_record(5, 3, "b");
    b.use_class = UseClass::OTHER;
    auto c = square_record(5, 3, "c");
    c.use_class = UseClass::MFH;
    const auto kept = filter_residential({a, b, c});
    ASSERT_EQ(kept.size(), 2u);
    EXPECT_EQ(kept[0].id, "a");
    EXPECT_EQ(kept[1].id, "c");
    EXPECT_TRUE(filter_residential({b, b}).empty());
}

TEST(Filter, CountsMatchLabelsAndIsIdempotent) {
    synth::GeneratorSpec spec;
    spec.n = 500;
    spec.seed = 3;
    spec.sfh_fraction = 0.7;
    spec.mfh_fraction = 0.2;
    spec.other_fraction = 0.1;
    const auto records = synth::generate_footprints(spec);
    std::size_t by_label = 0;
    for (const auto& r : records) by_label += r.use_class != UseClass::OTHER;
    const auto kept = filter_residential(records);
    EXPECT_EQ(by_label, 450u);
    EXPECT_EQ(kept.size(), 450u);
    EXPECT_EQ(filter_residential(kept), kept);
}

TEST(Grayscale, EndpointsMidpointAndHandValue) {
    EXPECT_EQ(encode_height_grayscale(0, 0, 100), 0);
    EXPECT_EQ(encode_height_grayscale(100, 0, 100), 255);
    EXPECT_EQ(encode_height_grayscale(50, 0, 100), 128);
    EXPECT_EQ(encode_height_grayscale(12, 0, 60), 51);
    EXPECT_EQ(encode_height_grayscale(-5, 0, 60), 0);
    EXPECT_EQ(encode_height_grayscale(500, 0, 60), 255);
    EXPECT_THROW(encode_height_grayscale(1, 5, 5), InvalidBounds);
    EXPECT_THROW(encode_height_grayscale(1, 6, 5), InvalidBounds);
}

TEST(Raster, AxisAlignedSquareSetsExactlyOneHundredPixels) {
    const auto r = square_record(10, 50);
    const auto img = rasterize_footprint(r, 20, 1.0);
    int set = 0, oracle_set = 0;
    const auto ring = vertices(r.polygon);
    for (int row = 0; row < 20; ++row) {
        for (int col = 0; col < 20; ++col) {
            set += img.at(row, col) > 0.0f;
            // Canvas center (10, 10) corresponds to the centroid (5, 5).
            oracle_set += oracle::inside(ring, col + 0.5 - 5.0, 15.0 - (row + 0.5));
        }
    }
    EXPECT_EQ(set, 100);
    EXPECT_EQ(set, oracle_set);
    EXPECT_FLOAT_EQ(img.at(10, 10), static_cast<float>(encode_height_grayscale(50, 0, 100)) / 255.0f);
}

TEST(Raster, RotatedSquareCountNearAnalyticArea) {
    auto r = square_record(10);
    const double s = std::sqrt(50.0);
    r.polygon = {{s, 0}, {2 * s, s}, {s, 2 * s}, {0, s}};
    r.area_m2 = 100;
    for (double mpp : {1.0, 0.5, 0.25}) {
        const int canvas = static_cast<int>(std::ceil(16.0 / mpp)) + 2;
        const auto img = rasterize_footprint(r, canvas, mpp);
        int set = 0;
        for (float v : img.pixels) set += v > 0.0f;
        const double analytic = 100.0 / (mpp * mpp);
        const double perimeter = 40.0 / mpp;
        EXPECT_LE(std::abs(set - analytic), perimeter) << "mpp " << mpp;
    }
}

TEST(Raster, MatchesBruteForcePointInPolygon) {
    synth::GeneratorSpec spec;
    spec.n = 20;
    spec.seed = 77;
    const auto records = synth::generate_footprints(spec);
    for (const auto& r : records) {
        const int canvas = 128;
        const double mpp = 0.5;
        const auto img = rasterize_footprint(r, canvas, mpp);
        const auto c = geometry::centroid_absolute(r.polygon);
        std::vector<oracle::Vertex> ring;
        for (const auto& p : r.polygon) ring.emplace_back((p.x - c.x) / mpp + 64.0, 64.0 - (p.y - c.y) / mpp);
        int mismatches = 0;
        for (int row = 0; row < canvas; ++row) {
            for (int col = 0; col < canvas; ++col) {
                mismatches += (img.at(row, col) > 0.0f) != oracle::inside(ring, col + 0.5, row + 0.5);
            }
        }
        EXPECT_EQ(mismatches, 0) << r.id;
    }
}

TEST(Raster, OutOfCanvasNamesRecord) {
    const auto r = square_record(30, 5, "too-big");
    try {
        rasterize_footprint(r, 20, 1.0);
        FAIL() << "expected OutOfCanvas";
    } catch (const OutOfCanvas& e) {
        EXPECT_NE(std::string(e.what()).find("too-big"), std::string::npos);
        EXPECT_EQ(e.code(), "out_of_canvas");
    }
}

TEST(Raster, TranslationByWholePixelsGivesIdenticalRaster) {
    synth::GeneratorSpec spec;
    spec.n = 10;
    spec.seed = 5;
    for (auto r : synth::generate_footprints(spec)) {
        for (auto& p : r.polygon) {
            p.x = std::round(p.x * 8.0) / 8.0;
            p.y = std::round(p.y * 8.0) / 8.0;
        }
        r.area_m2 = geometry::area(r.polygon);
        const auto base = rasterize_footprint(r, 160, 0.5);
        for (int k : {1, 3, -7, 40}) {
            auto moved = r;
            for (auto& p : moved.polygon) {
                p.x += k * 0.5;
                p.y -= 2 * k * 0.5;
            }
            EXPECT_EQ(rasterize_footprint(moved, 160, 0.5).pixels, base.pixels) << r.id << " shift " << k;
        }
    }
}

TEST(Multiscale, ConstantRasterGivesConstantChannels) {
    auto raster = RasterImage::blank(1410, 0.5);
    std::fill(raster.pixels.begin(), raster.pixels.end(), 0.375f);
    const auto ms = build_multiscale(raster, 1410, 112);
    for (const auto& ch : ms.channels) {
        ASSERT_EQ(ch.size(), 112u * 112u);
        for (float v : ch) EXPECT_NEAR(v, 0.375f, 1e-6);
    }
}

TEST(Multiscale, CenterPixelReachesEveryChannelCenter) {
    auto raster = RasterImage::blank(1410, 0.5);
    raster.at(705, 705) = 1.0f;
    const auto ms = build_multiscale(raster, 1410, 112);
    for (const auto& ch : ms.channels) EXPECT_GT(ch[56 * 112 + 56], 0.0f);
}

TEST(Multiscale, CheckerboardChannelMeansEqualWindowMeans) {
    for (int base : {1410, 112, 300}) {
        auto raster = RasterImage::blank(base, 0.5);
        for (int r = 0; r < base; ++r)
            for (int c = 0; c < base; ++c) raster.at(r, c) = ((r / 3 + c / 5) % 2) ? 1.0f : 0.0f;
        const auto ms = build_multiscale(raster, base, 56);
        const auto windows = crop_windows(base);
        for (int i = 0; i < 3; ++i) {
            const int w = windows[i], off = (base - w) / 2;
            double window_mean = 0;
            for (int r = 0; r < w; ++r)
                for (int c = 0; c < w; ++c) window_mean += raster.at(off + r, off + c);
            window_mean /= static_cast<double>(w) * w;
            double channel_mean = 0;
            for (float v : ms.channels[i]) channel_mean += v;
            channel_mean /= static_cast<double>(ms.channels[i].size());
            EXPECT_NEAR(channel_mean, window_mean, 1e-6) << "base " << base << " channel " << i;
        }
    }
}

TEST(Multiscale, ChannelOrderWidestFirst) {
    const auto w = crop_windows(1410);
    EXPECT_EQ(w[0], 700);
    EXPECT_EQ(w[1], 224);
    EXPECT_EQ(w[2], 112);
    const auto small = crop_windows(112);
    EXPECT_GT(small[0], small[1]);
    EXPECT_GT(small[1], small[2]);
}

TEST(Multiscale, NarrowestWindowIsIdentityWhenSidesMatch) {
    auto raster = RasterImage::blank(1410, 0.5);
    std::mt19937 gen(1);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : raster.pixels) v = u(gen);
    const auto ms = build_multiscale(raster, 1410, 112);
    EXPECT_EQ(ms.channels[2], center_crop(raster, 112));

    std::vector<float> square(112 * 112);
    for (auto& v : square) v = u(gen);
    EXPECT_EQ(resize_area(square, 112, 112), square);
}

TEST(Multiscale, PreservesValueRange) {
    auto raster = RasterImage::blank(300, 0.5);
    std::mt19937 gen(2);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (auto& v : raster.pixels) v = u(gen);
    const auto ms = build_multiscale(raster, 300, 56);
    for (const auto& ch : ms.channels)
        for (float v : ch) {
            EXPECT_GE(v, 0.0f);
            EXPECT_LE(v, 1.0f);
        }
}

TEST(Multiscale, WrongSideIsDimensionError) {
    EXPECT_THROW(build_multiscale(RasterImage::blank(100, 0.5), 1410, 112), DimensionError);
}

TEST(Multiscale, HwcInterleavesChannels) {
    MultiScaleImage ms;
    ms.side_px = 1;
    ms.channels = {std::vector<float>{0.1f}, std::vector<float>{0.2f}, std::vector<float>{0.3f}};
    EXPECT_EQ(ms.hwc(), (std::vector<float>{0.1f, 0.2f, 0.3f}));
}

TEST(Png, RasterPreviewIsWritten) {
    const auto dir = scratch("png");
    const auto img = preprocess(square_record(20), {200, 56, 0.5, 0, 100});
    write_raster_png(dir / "x.png", 56, img.channels[0]);
    const auto bytes = io::read_file(dir / "x.png");
    ASSERT_GT(bytes.size(), 8u);
    EXPECT_EQ(bytes.substr(1, 3), "PNG");
}
