#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marl/cluster.hpp"
#include "marl/error.hpp"
#include "marl/geometry.hpp"
#include "marl/ingest.hpp"
#include "marl/io.hpp"
#include "marl/tasks.hpp"

namespace marl::energy {

struct ShapeMetrics {
    double footprint_area_m2 = 0.0;
    double perimeter_m = 0.0;
    double height_m = 0.0;
    double envelope_area_m2 = 0.0; // walls + roof
    double volume_m3 = 0.0;
    double sv_ratio = 0.0;
};

inline ShapeMetrics compute_shape_metrics(const FootprintRecord& record) {
    if (!(record.height_m > 0.0)) {
        throw DegenerateBuilding("record '" + record.id + "' has zero height and cannot be extruded");
    }
    validate(record);
    ShapeMetrics m;
    m.footprint_area_m2 = record.area_m2;
    m.perimeter_m = geometry::perimeter(record.polygon);
    m.height_m = record.height_m;
    m.envelope_area_m2 = m.perimeter_m * m.height_m + m.footprint_area_m2;
    m.volume_m3 = m.footprint_area_m2 * m.height_m;
    m.sv_ratio = m.envelope_area_m2 / m.volume_m3;
    return m;
}

// Surrogate coefficients: EUI = base + sv_coef * S/V * h_ref + vintage + use.
inline constexpr double kSurrogateBase = 40.0;
inline constexpr double kSurrogateSvCoef = 30.0;
inline constexpr double kSurrogateHeightRef = 3.0;
inline constexpr std::array<double, 4> kSurrogateVintage{15.0, 8.0, 4.0, 0.0};

inline double surrogate_use_term(UseClass c) { return c == UseClass::SFH ? 5.0 : 0.0; }

/// Closed-form stand-in for a building energy simulation, in kWh/m2.
inline double surrogate_eui(const ShapeMetrics& metrics, int vintage_bin, UseClass use_class) {
    if (vintage_bin < 0 || vintage_bin >= static_cast<int>(kSurrogateVintage.size())) {
        throw ParameterError("vintage bin " + std::to_string(vintage_bin) + " outside [0, 3]");
    }
    return kSurrogateBase + kSurrogateSvCoef * metrics.sv_ratio * kSurrogateHeightRef +
           kSurrogateVintage[static_cast<std::size_t>(vintage_bin)] + surrogate_use_term(use_class);
}

inline double surrogate_eui(const FootprintRecord& r) {
    return surrogate_eui(compute_shape_metrics(r), tasks::bin_vintage(r.vintage_year), r.use_class);
}

enum class EuiSource { external_table, surrogate };

inline std::string to_string(EuiSource s) { return s == EuiSource::surrogate ? "surrogate" : "external_table"; }

struct EuiAssignment {
    std::string archetype_id;
    double eui_kwh_per_m2 = 0.0;
    EuiSource source = EuiSource::surrogate;
};

/// Sum of EUI times area in input order, 64-bit accumulation.
inline double aggregate_energy(std::span<const EuiAssignment> assignments, std::span<const double> areas) {
    if (assignments.size() != areas.size()) {
        throw InputError("aggregate_energy needs one area per EUI assignment");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < areas.size(); ++i) {
        if (areas[i] < 0.0) throw InputError("negative area for '" + assignments[i].archetype_id + "'");
        total += assignments[i].eui_kwh_per_m2 * areas[i];
    }
    return total;
}

/// Percent accuracy 100 * (1 - |est - gt| / gt); negative when the error exceeds gt.
inline double accuracy(double ec_est_kwh, double ec_gt_kwh) {
    if (!(ec_gt_kwh > 0.0)) throw MetricUndefined("accuracy is undefined for a non-positive ground truth");
    return 100.0 * (1.0 - std::abs(ec_est_kwh - ec_gt_kwh) / ec_gt_kwh);
}

inline double round2(double v) { return std::round(v * 100.0) / 100.0; }

// ---------------------------------------------------------------------------
// EUI providers

class EuiProvider {
public:
    virtual ~EuiProvider() = default;
    virtual EuiAssignment eui_for(const cluster::Archetype& archetype) const = 0;
};

/// Evaluates the surrogate on each archetype's representative building.
class SurrogateEuiProvider final : public EuiProvider {
public:
    EuiAssignment eui_for(const cluster::Archetype& a) const override {
        return {a.archetype_id(), surrogate_eui(a.representative_footprint), EuiSource::surrogate};
    }
};

/// EUIs produced by an external simulator, keyed by archetype id.
class TableEuiProvider final : public EuiProvider {
public:
    TableEuiProvider() = default;
    explicit TableEuiProvider(std::map<std::string, double> table) : table_(std::move(table)) {}

    /// CSV with header `archetype_id,eui_kwh_per_m2`.
    static TableEuiProvider from_csv(const std::filesystem::path& path) {
        const auto rows = io::read_csv(path);
        if (rows.empty()) throw IoError("EUI table '" + path.string() + "' is empty");
        const auto c_id = io::csv_column(rows[0], "archetype_id");
        const auto c_eui = io::csv_column(rows[0], "eui_kwh_per_m2");
        std::map<std::string, double> table;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto& row = rows[i];
            if (row.size() <= std::max(c_id, c_eui)) throw IoError("short row in EUI table '" + path.string() + "'");
            const auto eui = detail::parse_double(row[c_eui]);
            if (!eui || !(*eui > 0.0) || !std::isfinite(*eui)) {
                throw IoError("EUI for '" + row[c_id] + "' must be a positive number");
            }
            table[row[c_id]] = *eui;
        }
        return TableEuiProvider(std::move(table));
    }

    EuiAssignment eui_for(const cluster::Archetype& a) const override {
        const auto id = a.archetype_id();
        const auto it = table_.find(id);
        if (it == table_.end()) throw ProviderError("no EUI provided for archetype '" + id + "'");
        return {id, it->second, EuiSource::external_table};
    }

    const std::map<std::string, double>& table() const { return table_; }

private:
    std::map<std::string, double> table_;
};

// ---------------------------------------------------------------------------
// Reports

struct ClusterEnergy {
    std::string archetype_id;
    double eui_kwh_per_m2 = 0.0;
    double area_m2 = 0.0;
    double kwh = 0.0;
};

struct EnergyReport {
    double ec_est_kwh = 0.0;
    double ec_gt_kwh = 0.0;
    double absolute_error_kwh = 0.0;
    double accuracy_ratio = 0.0;
    double accuracy_pct = 0.0; // rounded to 2 decimals
    std::vector<ClusterEnergy> per_cluster_breakdown;
    std::optional<double> baseline_est_kwh;
    std::optional<double> baseline_accuracy_pct;

    std::optional<double> improvement_points() const {
        if (!baseline_accuracy_pct) return std::nullopt;
        return round2(accuracy_pct - *baseline_accuracy_pct);
    }

    nlohmann::json to_json() const {
        auto breakdown = nlohmann::json::array();
        for (const auto& c : per_cluster_breakdown) {
            breakdown.push_back(
                {{"archetype_id", c.archetype_id}, {"eui_kwh_per_m2", c.eui_kwh_per_m2}, {"area_m2", c.area_m2}, {"kwh", c.kwh}});
        }
        nlohmann::json j = {{"ec_est_kwh", ec_est_kwh},
                            {"ec_gt_kwh", ec_gt_kwh},
                            {"absolute_error_kwh", absolute_error_kwh},
                            {"accuracy_ratio", accuracy_ratio},
                            {"accuracy_pct", accuracy_pct},
                            {"per_cluster_breakdown", breakdown},
                            {"baseline_est_kwh", nullptr},
                            {"baseline_accuracy_pct", nullptr},
                            {"improvement_points", nullptr}};
        if (baseline_est_kwh) j["baseline_est_kwh"] = *baseline_est_kwh;
        if (baseline_accuracy_pct) j["baseline_accuracy_pct"] = *baseline_accuracy_pct;
        if (auto imp = improvement_points()) j["improvement_points"] = *imp;
        return j;
    }
};

inline void fill_accuracy(EnergyReport& r) {
    r.absolute_error_kwh = std::abs(r.ec_est_kwh - r.ec_gt_kwh);
    r.accuracy_ratio = 1.0 - r.absolute_error_kwh / r.ec_gt_kwh;
    r.accuracy_pct = round2(accuracy(r.ec_est_kwh, r.ec_gt_kwh));
}

/// One EUI per use class applied to the total area of that class.
using BaselineEuis = std::map<UseClass, double>;

inline EnergyReport build_report(const std::vector<cluster::Archetype>& archetypes, const EuiProvider& provider,
                                 double ground_truth_kwh, const std::optional<BaselineEuis>& baseline = std::nullopt) {
    if (!(ground_truth_kwh > 0.0)) throw MetricUndefined("ground truth must be positive");
    EnergyReport report;
    report.ec_gt_kwh = ground_truth_kwh;
    std::vector<EuiAssignment> assignments;
    std::vector<double> areas;
    for (const auto& a : archetypes) {
        auto assignment = provider.eui_for(a);
        if (!(assignment.eui_kwh_per_m2 > 0.0) || !std::isfinite(assignment.eui_kwh_per_m2)) {
            throw ProviderError("EUI for archetype '" + a.archetype_id() + "' must be positive and finite");
        }
        report.per_cluster_breakdown.push_back({assignment.archetype_id, assignment.eui_kwh_per_m2,
                                                a.cluster_total_area_m2,
                                                assignment.eui_kwh_per_m2 * a.cluster_total_area_m2});
        assignments.push_back(std::move(assignment));
        areas.push_back(a.cluster_total_area_m2);
    }
    report.ec_est_kwh = aggregate_energy(assignments, areas);
    fill_accuracy(report);

    if (baseline) {
        std::vector<EuiAssignment> base_assign;
        std::vector<double> base_areas;
        std::map<UseClass, double> class_area;
        for (const auto& a : archetypes) class_area[a.use_class] += a.cluster_total_area_m2;
        for (const auto& [use, area] : class_area) {
            const auto it = baseline->find(use);
            if (it == baseline->end()) throw ProviderError("no baseline EUI for use class " + to_string(use));
            base_assign.push_back({to_string(use), it->second, EuiSource::external_table});
            base_areas.push_back(area);
        }
        report.baseline_est_kwh = aggregate_energy(base_assign, base_areas);
        report.baseline_accuracy_pct = round2(accuracy(*report.baseline_est_kwh, ground_truth_kwh));
    }
    return report;
}

/// Direct aggregation of (id, EUI, area) rows, e.g. published tables.
struct FixtureRow {
    std::string archetype_id;
    double eui_kwh_per_m2 = 0.0;
    double area_m2 = 0.0;
};

inline std::vector<FixtureRow> read_fixture_csv(const std::filesystem::path& path) {
    const auto rows = io::read_csv(path);
    if (rows.empty()) throw IoError("fixture '" + path.string() + "' is empty");
    const auto c_id = io::csv_column(rows[0], "archetype_id");
    const auto c_eui = io::csv_column(rows[0], "eui_kwh_per_m2");
    const auto c_area = io::csv_column(rows[0], "area_m2");
    std::vector<FixtureRow> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() <= std::max({c_id, c_eui, c_area})) throw IoError("short row in fixture '" + path.string() + "'");
        const auto eui = detail::parse_double(row[c_eui]);
        const auto area = detail::parse_double(row[c_area]);
        if (!eui || !area) throw IoError("non-numeric value in fixture row for '" + row[c_id] + "'");
        out.push_back({row[c_id], *eui, *area});
    }
    return out;
}

inline EnergyReport build_fixture_report(const std::vector<FixtureRow>& rows, double ground_truth_kwh) {
    EnergyReport report;
    report.ec_gt_kwh = ground_truth_kwh;
    std::vector<EuiAssignment> assignments;
    std::vector<double> areas;
    for (const auto& r : rows) {
        assignments.push_back({r.archetype_id, r.eui_kwh_per_m2, EuiSource::external_table});
        areas.push_back(r.area_m2);
        report.per_cluster_breakdown.push_back({r.archetype_id, r.eui_kwh_per_m2, r.area_m2, r.eui_kwh_per_m2 * r.area_m2});
    }
    report.ec_est_kwh = aggregate_energy(assignments, areas);
    fill_accuracy(report);
    return report;
}

/// Ground truth given either as a bare JSON number / {"ec_gt_kwh": x}, or a
/// per-building CSV with a `kwh` column that is summed.
inline double read_ground_truth(const std::filesystem::path& path) {
    if (path.extension() == ".csv") {
        const auto rows = io::read_csv(path);
        if (rows.empty()) throw IoError("ground truth '" + path.string() + "' is empty");
        const auto c = io::csv_column(rows[0], "kwh");
        double total = 0.0;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto v = rows[i].size() > c ? detail::parse_double(rows[i][c]) : std::nullopt;
            if (!v) throw IoError("non-numeric kwh in ground truth '" + path.string() + "'");
            total += *v;
        }
        return total;
    }
    const auto j = io::read_json(path);
    if (j.is_number()) return j.get<double>();
    if (j.is_object() && j.contains("ec_gt_kwh")) return j.at("ec_gt_kwh").get<double>();
    throw IoError("ground truth '" + path.string() + "' must be a number or contain ec_gt_kwh");
}

} // namespace marl::energy
