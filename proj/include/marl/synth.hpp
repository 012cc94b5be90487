#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marl/energy.hpp"
#include "marl/error.hpp"
#include "marl/geometry.hpp"
#include "marl/ingest.hpp"
#include "marl/rng.hpp"
#include "marl/tasks.hpp"

namespace marl::synth {

enum class ShapeFamily { rectangle, L, T, U };

inline constexpr std::array<ShapeFamily, 4> kAllFamilies{ShapeFamily::rectangle, ShapeFamily::L, ShapeFamily::T,
                                                         ShapeFamily::U};

inline std::string to_string(ShapeFamily f) {
    switch (f) {
    case ShapeFamily::rectangle: return "rectangle";
    case ShapeFamily::L: return "L";
    case ShapeFamily::T: return "T";
    case ShapeFamily::U: return "U";
    }
    return "?";
}

inline ShapeFamily family_from_string(const std::string& s) {
    for (auto f : kAllFamilies) {
        if (to_string(f) == s) return f;
    }
    throw ConfigError("unknown shape family '" + s + "'");
}

/// The vintage bin a family maps to when the correlation holds.
inline int family_vintage_bin(ShapeFamily f) { return static_cast<int>(f); }

struct GeneratorSpec {
    std::size_t n = 500;
    std::uint64_t seed = 0;
    std::vector<ShapeFamily> shape_families{kAllFamilies.begin(), kAllFamilies.end()};
    double sfh_fraction = 0.7;
    double mfh_fraction = 0.3;
    double other_fraction = 0.0;
    double vintage_shape_correlation = 0.8;

    void validate() const {
        if (n < 1) throw ConfigError("generator needs n >= 1");
        if (shape_families.empty()) throw ConfigError("generator needs at least one shape family");
        const double total = sfh_fraction + mfh_fraction + other_fraction;
        if (sfh_fraction < 0 || mfh_fraction < 0 || other_fraction < 0 || std::abs(total - 1.0) > 1e-9) {
            throw ConfigError("class proportions must be non-negative and sum to 1");
        }
        if (vintage_shape_correlation < 0.0 || vintage_shape_correlation > 1.0) {
            throw ConfigError("vintage_shape_correlation must lie in [0, 1]");
        }
    }
};

/// Largest-remainder allocation of `n` over `fractions` (ties to the lower index).
inline std::vector<std::size_t> allocate(std::size_t n, const std::vector<double>& fractions) {
    std::vector<std::size_t> counts(fractions.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t used = 0;
    for (std::size_t i = 0; i < fractions.size(); ++i) {
        const double exact = fractions[i] * static_cast<double>(n);
        counts[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
        used += counts[i];
        remainders.emplace_back(exact - static_cast<double>(counts[i]), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; used < n && i < remainders.size(); ++i, ++used) ++counts[remainders[i].second];
    return counts;
}

/// Counter-clockwise rectilinear outline with bounding box `w` x `h` at the origin.
inline geometry::Ring make_outline(ShapeFamily family, double w, double h, Rng& rng) {
    switch (family) {
    case ShapeFamily::rectangle: return {{0, 0}, {w, 0}, {w, h}, {0, h}};
    case ShapeFamily::L: {
        const double a = w * rng.uniform(0.35, 0.6); // notch width
        const double b = h * rng.uniform(0.35, 0.6); // notch depth
        return {{0, 0}, {w, 0}, {w, h - b}, {w - a, h - b}, {w - a, h}, {0, h}};
    }
    case ShapeFamily::T: {
        const double stem = w * rng.uniform(0.3, 0.5);
        const double bar = h * rng.uniform(0.3, 0.5);
        const double x0 = 0.5 * (w - stem);
        return {{x0, 0}, {x0 + stem, 0}, {x0 + stem, h - bar}, {w, h - bar}, {w, h}, {0, h}, {0, h - bar}, {x0, h - bar}};
    }
    case ShapeFamily::U: {
        const double gap = w * rng.uniform(0.3, 0.45);
        const double depth = h * rng.uniform(0.4, 0.7);
        const double x0 = 0.5 * (w - gap);
        return {{0, 0}, {w, 0}, {w, h}, {x0 + gap, h}, {x0 + gap, h - depth}, {x0, h - depth}, {x0, h}, {0, h}};
    }
    }
    return {};
}

inline int sample_year_in_bin(int bin, Rng& rng) {
    static constexpr std::array<std::pair<int, int>, 4> ranges{{{1900, 1979}, {1980, 2003}, {2004, 2012}, {2013, 2023}}};
    const auto [lo, hi] = ranges[static_cast<std::size_t>(bin)];
    return lo + static_cast<int>(rng.index(static_cast<std::size_t>(hi - lo + 1)));
}

inline const std::vector<std::string>& programs_for(UseClass c) {
    static const std::vector<std::string> sfh{"Mobile Home", "Single Family Residence"};
    static const std::vector<std::string> mfh{"Apartment", "Duplex", "Rooming House", "Units"};
    static const std::vector<std::string> other{"Commercial", "Industrial"};
    return c == UseClass::SFH ? sfh : c == UseClass::MFH ? mfh : other;
}

struct GeneratedRecord {
    FootprintRecord record;
    ShapeFamily family = ShapeFamily::rectangle;
};

/// Procedural stock. Per-record streams are derived from the master seed by
/// index, so records are independent of each other given the class layout.
inline std::vector<GeneratedRecord> generate_with_families(const GeneratorSpec& spec) {
    spec.validate();
    const auto counts = allocate(spec.n, {spec.sfh_fraction, spec.mfh_fraction, spec.other_fraction});
    std::vector<UseClass> classes;
    classes.insert(classes.end(), counts[0], UseClass::SFH);
    classes.insert(classes.end(), counts[1], UseClass::MFH);
    classes.insert(classes.end(), counts[2], UseClass::OTHER);
    Rng layout(derive_seed(spec.seed, 0xC1A55));
    layout.shuffle(classes);

    const int width = static_cast<int>(std::to_string(spec.n).size());
    std::vector<GeneratedRecord> out;
    out.reserve(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i) {
        Rng rng(derive_seed(spec.seed, 0x10000 + i));
        const auto use = classes[i];
        const auto family = spec.shape_families[rng.index(spec.shape_families.size())];
        const bool large = use == UseClass::MFH;
        const double w = large ? rng.uniform(15.0, 40.0) : rng.uniform(8.0, 20.0);
        const double h = large ? rng.uniform(15.0, 40.0) : rng.uniform(8.0, 20.0);
        auto ring = make_outline(family, w, h, rng);
        const double height = large ? rng.uniform(6.0, 30.0) : rng.uniform(3.0, 9.0);

        int bin = family_vintage_bin(family);
        if (rng.uniform() >= spec.vintage_shape_correlation) {
            bin = (bin + 1 + static_cast<int>(rng.index(3))) % 4;
        }
        const int year = sample_year_in_bin(bin, rng);
        const auto& programs = programs_for(use);
        const auto& program = programs[rng.index(programs.size())];

        std::string id = std::to_string(i);
        id = "B" + std::string(static_cast<std::size_t>(width) - id.size(), '0') + id;
        FootprintRecord r{std::move(id), std::move(ring), height, 0.0, program, year, use};
        r.area_m2 = geometry::area(r.polygon);
        out.push_back({std::move(r), family});
    }
    return out;
}

inline std::vector<FootprintRecord> generate_footprints(const GeneratorSpec& spec) {
    std::vector<FootprintRecord> out;
    for (auto& g : generate_with_families(spec)) out.push_back(std::move(g.record));
    return out;
}

/// Exact referent for synthetic stocks: the surrogate applied per building.
inline double synthetic_ground_truth(const std::vector<FootprintRecord>& records) {
    double total = 0.0;
    for (const auto& r : records) total += energy::surrogate_eui(r) * r.area_m2;
    return total;
}

} // namespace marl::synth
