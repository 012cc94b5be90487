#include <gtest/gtest.h>

#include <map>
#include <set>

#include "marl/synth.hpp"
#include "support/oracles.hpp"

using namespace marl;
using namespace marl::synth;

namespace {

std::vector<oracle::Vertex> vertices(const geometry::Ring& ring) {
    std::vector<oracle::Vertex> v;
    for (const auto& p : ring) v.push_back({p.x, p.y});
    return v;
}

} // namespace

TEST(Generate, ClassMixUsesExactAllocation) {
    GeneratorSpec spec;
    spec.n = 500;
    const auto recs = generate_footprints(spec);
    ASSERT_EQ(recs.size(), 500u);
    std::map<UseClass, int> counts;
    for (const auto& r : recs) ++counts[r.use_class];
    EXPECT_EQ(counts[UseClass::SFH], 350);
    EXPECT_EQ(counts[UseClass::MFH], 150);
    EXPECT_EQ(counts[UseClass::OTHER], 0);
}

TEST(Generate, LargestRemainderAllocation) {
    EXPECT_EQ(allocate(10, {0.34, 0.33, 0.33}), (std::vector<std::size_t>{4, 3, 3}));
    EXPECT_EQ(allocate(7, {0.5, 0.5, 0.0}), (std::vector<std::size_t>{4, 3, 0}));
    EXPECT_EQ(allocate(1, {0.0, 1.0, 0.0}), (std::vector<std::size_t>{0, 1, 0}));
}

TEST(Generate, FullCorrelationMakesVintageAFunctionOfFamily) {
    GeneratorSpec spec;
    spec.n = 300;
    spec.vintage_shape_correlation = 1.0;
    std::map<ShapeFamily, std::set<int>> bins;
    for (const auto& g : generate_with_families(spec)) bins[g.family].insert(tasks::bin_vintage(g.record.vintage_year));
    EXPECT_EQ(bins.size(), 4u);
    for (const auto& [family, seen] : bins) EXPECT_EQ(seen.size(), 1u) << to_string(family);
}

TEST(Generate, PartialCorrelationHitsRateApproximately) {
    GeneratorSpec spec;
    spec.n = 4000;
    spec.vintage_shape_correlation = 0.6;
    int hits = 0;
    const auto gen = generate_with_families(spec);
    for (const auto& g : gen) hits += tasks::bin_vintage(g.record.vintage_year) == family_vintage_bin(g.family);
    EXPECT_NEAR(static_cast<double>(hits) / gen.size(), 0.6, 0.03);
}

TEST(Generate, StoredAreaMatchesShoelace) {
    GeneratorSpec spec;
    spec.n = 400;
    for (const auto& r : generate_footprints(spec)) {
        EXPECT_NEAR(r.area_m2, std::abs(oracle::shoelace(vertices(r.polygon))), 1e-9) << r.id;
    }
}

TEST(Generate, RecordsAreValidAndWithinDeclaredRanges) {
    GeneratorSpec spec;
    spec.n = 400;
    spec.sfh_fraction = 0.5;
    spec.mfh_fraction = 0.3;
    spec.other_fraction = 0.2;
    std::set<std::string> ids;
    for (const auto& r : generate_footprints(spec)) {
        EXPECT_NO_THROW(validate(r));
        EXPECT_TRUE(ids.insert(r.id).second);
        EXPECT_GE(r.height_m, 3.0);
        EXPECT_LE(r.height_m, 30.0);
        double min_x = 1e9, max_x = -1e9, min_y = 1e9, max_y = -1e9;
        for (const auto& p : r.polygon) {
            min_x = std::min(min_x, p.x);
            max_x = std::max(max_x, p.x);
            min_y = std::min(min_y, p.y);
            max_y = std::max(max_y, p.y);
        }
        EXPECT_GE(max_x - min_x, 8.0);
        EXPECT_LE(max_x - min_x, 40.0);
        EXPECT_GE(max_y - min_y, 8.0);
        EXPECT_LE(max_y - min_y, 40.0);
        // Rectilinear: every edge is axis-aligned.
        for (std::size_t i = 0; i < r.polygon.size(); ++i) {
            const auto& a = r.polygon[i];
            const auto& b = r.polygon[(i + 1) % r.polygon.size()];
            EXPECT_TRUE(a.x == b.x || a.y == b.y);
        }
        const auto& allowed = programs_for(r.use_class);
        EXPECT_NE(std::find(allowed.begin(), allowed.end(), r.program), allowed.end());
    }
}

TEST(Generate, SurfaceToVolumeSpansDeclaredRange) {
    GeneratorSpec spec;
    spec.n = 1000;
    double lo = 1e9, hi = 0;
    for (const auto& r : generate_footprints(spec)) {
        const double sv = energy::compute_shape_metrics(r).sv_ratio;
        lo = std::min(lo, sv);
        hi = std::max(hi, sv);
    }
    EXPECT_LT(lo, 0.5);
    EXPECT_GT(hi, 1.0);
}

TEST(Generate, RestrictedFamilies) {
    GeneratorSpec spec;
    spec.n = 50;
    spec.shape_families = {ShapeFamily::L};
    for (const auto& g : generate_with_families(spec)) {
        EXPECT_EQ(g.family, ShapeFamily::L);
        EXPECT_EQ(g.record.polygon.size(), 6u);
    }
}

TEST(Generate, BitwiseReproduciblePerSeed) {
    GeneratorSpec spec;
    spec.n = 200;
    spec.seed = 42;
    EXPECT_EQ(generate_footprints(spec), generate_footprints(spec));
    auto other = spec;
    other.seed = 43;
    EXPECT_NE(generate_footprints(spec), generate_footprints(other));
}

TEST(Generate, InvalidSpecsAreRejected) {
    GeneratorSpec spec;
    spec.n = 0;
    EXPECT_THROW(generate_footprints(spec), ConfigError);
    spec = {};
    spec.sfh_fraction = 0.5;
    EXPECT_THROW(generate_footprints(spec), ConfigError);
    spec = {};
    spec.vintage_shape_correlation = 1.5;
    EXPECT_THROW(generate_footprints(spec), ConfigError);
    spec = {};
    spec.shape_families.clear();
    EXPECT_THROW(generate_footprints(spec), ConfigError);
    EXPECT_THROW(family_from_string("hexagon"), ConfigError);
    EXPECT_EQ(family_from_string("U"), ShapeFamily::U);
}

TEST(GroundTruth, CubeExample) {
    const FootprintRecord cube{"c", {{0, 0}, {10, 0}, {10, 10}, {0, 10}}, 10.0, 100.0, "Apartment", 2020, UseClass::MFH};
    EXPECT_DOUBLE_EQ(synthetic_ground_truth({cube}), 8500.0);
    EXPECT_EQ(synthetic_ground_truth({}), 0.0);
}

TEST(GroundTruth, EqualsPerBuildingRecomputation) {
    GeneratorSpec spec;
    spec.n = 300;
    const auto recs = generate_footprints(spec);
    double total = 0.0;
    for (const auto& r : recs) {
        // Independent evaluation of the declared closed form.
        std::vector<oracle::Vertex> v = vertices(r.polygon);
        const double area = std::abs(oracle::shoelace(v));
        const double sv = (oracle::edge_sum(v) * r.height_m + area) / (area * r.height_m);
        const int year = r.vintage_year;
        const int bin = year < 1980 ? 0 : year < 2004 ? 1 : year < 2013 ? 2 : 3;
        const double v_term[4] = {15, 8, 4, 0};
        total += (40.0 + 90.0 * sv + v_term[bin] + (r.use_class == UseClass::SFH ? 5.0 : 0.0)) * area;
    }
    EXPECT_NEAR(synthetic_ground_truth(recs), total, 1e-9 * total);
}

TEST(GroundTruth, HomogeneousClustersGiveExactEstimate) {
    // Copies of one building: any representative has the cluster's EUI.
    GeneratorSpec spec;
    spec.n = 3;
    const auto base = generate_footprints(spec);
    std::vector<FootprintRecord> stock;
    std::vector<cluster::Archetype> archetypes;
    for (std::size_t b = 0; b < base.size(); ++b) {
        cluster::Archetype a;
        a.cluster_index = static_cast<int>(b);
        a.use_class = base[b].use_class;
        a.representative_footprint = base[b];
        for (int c = 0; c < 4; ++c) {
            stock.push_back(base[b]);
            a.cluster_total_area_m2 += base[b].area_m2;
        }
        archetypes.push_back(a);
    }
    const auto report = energy::build_report(archetypes, energy::SurrogateEuiProvider{}, synthetic_ground_truth(stock));
    EXPECT_NEAR(report.accuracy_ratio, 1.0, 1e-12);
}
