#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "marl/error.hpp"
#include "marl/ingest.hpp"
#include "marl/io.hpp"
#include "marl/rng.hpp"
#include "marl/vq.hpp"

namespace marl::cluster {

inline constexpr std::string_view kLatentMagic = "MARLLAT1";

enum class Reduction { none_flatten, pca };

inline std::string to_string(Reduction r) { return r == Reduction::pca ? "pca" : "none_flatten"; }

inline Reduction reduction_from_string(const std::string& s) {
    if (s == "pca") return Reduction::pca;
    if (s == "none_flatten") return Reduction::none_flatten;
    throw ConfigError("unknown reduction '" + s + "'");
}

struct LatentMatrix {
    std::vector<std::string> ids;
    Eigen::MatrixXd vectors; // one row per id
    Reduction reduction = Reduction::none_flatten;

    std::size_t rows() const { return ids.size(); }
    Eigen::Index dim() const { return vectors.cols(); }

    /// Rows whose id appears in `keep`, in the order of `keep`.
    LatentMatrix subset(const std::vector<std::string>& keep) const {
        LatentMatrix out;
        out.reduction = reduction;
        out.vectors.resize(static_cast<Eigen::Index>(keep.size()), vectors.cols());
        for (std::size_t i = 0; i < keep.size(); ++i) {
            const auto it = std::find(ids.begin(), ids.end(), keep[i]);
            if (it == ids.end()) throw InputError("latent matrix has no row for record '" + keep[i] + "'");
            out.vectors.row(static_cast<Eigen::Index>(i)) = vectors.row(it - ids.begin());
            out.ids.push_back(keep[i]);
        }
        return out;
    }
};

inline io::BlobFile to_blob(const LatentMatrix& m) {
    io::BlobFile file;
    file.header = {{"format", "marl-latents"},
                   {"ids", m.ids},
                   {"rows", m.rows()},
                   {"d", m.dim()},
                   {"reduction", to_string(m.reduction)}};
    file.blob.reserve(static_cast<std::size_t>(m.vectors.size()));
    for (Eigen::Index i = 0; i < m.vectors.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.vectors.cols(); ++j) file.blob.push_back(static_cast<float>(m.vectors(i, j)));
    }
    return file;
}

inline LatentMatrix from_blob(const io::BlobFile& file) {
    LatentMatrix m;
    m.ids = file.header.at("ids").get<std::vector<std::string>>();
    m.reduction = reduction_from_string(file.header.at("reduction").get<std::string>());
    const auto d = file.header.at("d").get<Eigen::Index>();
    const auto n = static_cast<Eigen::Index>(m.ids.size());
    if (static_cast<std::size_t>(n * d) != file.blob.size()) throw IoError("latent blob does not match its header");
    m.vectors.resize(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) m.vectors(i, j) = file.blob[static_cast<std::size_t>(i * d + j)];
    }
    return m;
}

// ---------------------------------------------------------------------------
// PCA

struct PcaModel {
    Eigen::RowVectorXd mean;
    Eigen::MatrixXd basis; // (input dim, components), orthonormal columns

    Eigen::MatrixXd project(const Eigen::MatrixXd& x) const { return (x.rowwise() - mean) * basis; }
};

/// Principal axes from the thin SVD of the centred data. Each axis is
/// oriented so that its largest-magnitude coordinate is positive.
inline PcaModel fit_pca(const Eigen::MatrixXd& x, int components) {
    if (x.rows() < 1 || components < 1) throw ParameterError("PCA needs at least one row and one component");
    PcaModel model;
    model.mean = x.colwise().mean();
    const Eigen::MatrixXd centred = x.rowwise() - model.mean;
    const auto d = std::min<Eigen::Index>({components, x.rows(), x.cols()});
    Eigen::BDCSVD<Eigen::MatrixXd> svd(centred, Eigen::ComputeThinV);
    model.basis = svd.matrixV().leftCols(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        Eigen::Index arg = 0;
        model.basis.col(j).cwiseAbs().maxCoeff(&arg);
        if (model.basis(arg, j) < 0) model.basis.col(j) *= -1.0;
    }
    return model;
}

/// Flattened z_e of every record through a frozen encoder, optionally
/// PCA-reduced to `components` dimensions.
inline LatentMatrix embed_dataset(const vq::VqAutoencoder<float>& model, const std::vector<FootprintRecord>& records,
                                  const PreprocessConfig& pre, Reduction reduction = Reduction::none_flatten,
                                  int components = 64) {
    LatentMatrix out;
    out.reduction = reduction;
    const auto width = static_cast<Eigen::Index>(nn::numel(model.latent_shape()));
    Eigen::MatrixXd flat(static_cast<Eigen::Index>(records.size()), width);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto z_e = model.encode(vq::image_array<float>(preprocess(records[i], pre)));
        for (Eigen::Index j = 0; j < width; ++j) flat(static_cast<Eigen::Index>(i), j) = z_e[static_cast<std::size_t>(j)];
        out.ids.push_back(records[i].id);
    }
    if (reduction == Reduction::pca && !records.empty()) {
        out.vectors = fit_pca(flat, components).project(flat);
    } else {
        out.vectors = std::move(flat);
    }
    if (!out.vectors.allFinite()) throw TrainingDiverged("latent matrix contains non-finite values");
    return out;
}

// ---------------------------------------------------------------------------
// k-means

struct ClusterModel {
    int k = 0;
    Eigen::MatrixXd centers; // (k, d)
    std::vector<int> assignments;
    double wcss = 0.0;
    std::uint64_t seed = 0;
    int iterations = 0;
    bool converged = false;
    std::vector<double> wcss_history; // after each assignment step

    nlohmann::json to_json() const {
        std::vector<std::vector<double>> c(static_cast<std::size_t>(centers.rows()));
        for (Eigen::Index i = 0; i < centers.rows(); ++i) {
            for (Eigen::Index j = 0; j < centers.cols(); ++j) c[static_cast<std::size_t>(i)].push_back(centers(i, j));
        }
        return {{"k", k},           {"centers", c},         {"assignments", assignments}, {"wcss", wcss},
                {"seed", seed},     {"iterations", iterations}, {"converged", converged}};
    }
    static ClusterModel from_json(const nlohmann::json& j) {
        ClusterModel m;
        m.k = j.at("k").get<int>();
        const auto c = j.at("centers").get<std::vector<std::vector<double>>>();
        const auto d = c.empty() ? 0 : static_cast<Eigen::Index>(c[0].size());
        m.centers.resize(static_cast<Eigen::Index>(c.size()), d);
        for (std::size_t i = 0; i < c.size(); ++i) {
            for (Eigen::Index q = 0; q < d; ++q) m.centers(static_cast<Eigen::Index>(i), q) = c[i][static_cast<std::size_t>(q)];
        }
        m.assignments = j.at("assignments").get<std::vector<int>>();
        m.wcss = j.at("wcss").get<double>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.iterations = j.at("iterations").get<int>();
        m.converged = j.at("converged").get<bool>();
        return m;
    }
};

inline double squared_distance(const Eigen::MatrixXd& x, Eigen::Index row, const Eigen::MatrixXd& c, Eigen::Index crow) {
    return (x.row(row) - c.row(crow)).squaredNorm();
}

/// Nearest center per point (lowest index on ties) and the resulting WCSS.
inline double assign_points(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centers, std::vector<int>& assignments) {
    assignments.resize(static_cast<std::size_t>(x.rows()));
    double wcss = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        int best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (Eigen::Index c = 0; c < centers.rows(); ++c) {
            const double dist = squared_distance(x, i, centers, c);
            if (dist < best_dist) {
                best_dist = dist;
                best = static_cast<int>(c);
            }
        }
        assignments[static_cast<std::size_t>(i)] = best;
        wcss += best_dist;
    }
    return wcss;
}

inline double compute_wcss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& centers, const std::vector<int>& assignments) {
    double wcss = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) wcss += squared_distance(x, i, centers, assignments[static_cast<std::size_t>(i)]);
    return wcss;
}

/// k-means++ seeding; when every remaining point coincides with a chosen
/// center the lowest-index unchosen point is taken.
inline Eigen::MatrixXd kmeanspp_init(const Eigen::MatrixXd& x, int k, Rng& rng) {
    const auto n = static_cast<std::size_t>(x.rows());
    Eigen::MatrixXd centers(k, x.cols());
    std::vector<bool> chosen(n, false);
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = rng.index(n);
    for (int c = 0; c < k; ++c) {
        if (c > 0) {
            double total = 0.0;
            for (auto v : d2) total += v;
            if (total > 0.0) {
                const double target = rng.uniform() * total;
                double acc = 0.0;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    acc += d2[i];
                    if (acc > target && d2[i] > 0.0) {
                        pick = i;
                        break;
                    }
                }
            } else {
                pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
            }
        }
        chosen[pick] = true;
        centers.row(c) = x.row(static_cast<Eigen::Index>(pick));
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(x, static_cast<Eigen::Index>(i), centers, c));
        }
    }
    return centers;
}

/// Lloyd iterations from the given centers until assignments are stable or
/// `max_iters` updates have run. An emptied cluster is moved to the point
/// farthest from its current center.
inline ClusterModel lloyd(const Eigen::MatrixXd& x, Eigen::MatrixXd centers, int max_iters, std::uint64_t seed = 0) {
    ClusterModel m;
    m.k = static_cast<int>(centers.rows());
    m.seed = seed;
    std::vector<int> assign;
    double wcss = assign_points(x, centers, assign);
    m.wcss_history.push_back(wcss);
    for (int it = 0; it < max_iters; ++it) {
        Eigen::MatrixXd next = Eigen::MatrixXd::Zero(centers.rows(), centers.cols());
        std::vector<std::size_t> counts(static_cast<std::size_t>(m.k), 0);
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const auto c = assign[static_cast<std::size_t>(i)];
            next.row(c) += x.row(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        std::vector<bool> taken(static_cast<std::size_t>(x.rows()), false);
        for (int c = 0; c < m.k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                next.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
                continue;
            }
            Eigen::Index far = -1;
            double far_dist = -1.0;
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                if (taken[static_cast<std::size_t>(i)]) continue;
                const double dist = squared_distance(x, i, centers, assign[static_cast<std::size_t>(i)]);
                if (dist > far_dist) {
                    far_dist = dist;
                    far = i;
                }
            }
            taken[static_cast<std::size_t>(far)] = true;
            next.row(c) = x.row(far);
        }
        std::vector<int> reassigned;
        wcss = assign_points(x, next, reassigned);
        centers = std::move(next);
        m.wcss_history.push_back(wcss);
        m.iterations = it + 1;
        const bool stable = reassigned == assign;
        assign = std::move(reassigned);
        if (stable) {
            m.converged = true;
            break;
        }
    }
    m.centers = std::move(centers);
    m.assignments = std::move(assign);
    m.wcss = wcss;
    return m;
}

inline ClusterModel kmeans(const Eigen::MatrixXd& x, int k, std::uint64_t seed, int max_iters = 300) {
    if (k < 1 || static_cast<Eigen::Index>(k) > x.rows()) {
        throw ParameterError("k-means needs 1 <= k <= N (k = " + std::to_string(k) + ", N = " +
                             std::to_string(x.rows()) + ")");
    }
    Rng rng(seed);
    return lloyd(x, kmeanspp_init(x, k, rng), max_iters, seed);
}

struct CurvePoint {
    int k = 0;
    double wcss = 0.0;
    ClusterModel model;
};

inline std::uint64_t restart_seed(std::uint64_t seed, int k, int restart) {
    return derive_seed(seed, static_cast<std::uint64_t>(k) * 1000003ULL + static_cast<std::uint64_t>(restart));
}

/// Best of `restarts` seeded k-means++ runs.
inline ClusterModel best_kmeans(const Eigen::MatrixXd& x, int k, std::uint64_t seed, int restarts = 10,
                                int max_iters = 300) {
    std::optional<ClusterModel> best;
    for (int r = 0; r < std::max(1, restarts); ++r) {
        auto m = kmeans(x, k, restart_seed(seed, k, r), max_iters);
        if (!best || m.wcss < best->wcss) best = std::move(m);
    }
    return *best;
}

/// WCSS for each k in [k_min, k_max]. Besides the seeded restarts, every
/// k > k_min also tries a warm start from the best (k-1)-solution plus its
/// farthest point, which makes the curve non-increasing by construction.
inline std::vector<CurvePoint> wcss_curve(const Eigen::MatrixXd& x, int k_min, int k_max, std::uint64_t seed,
                                          int restarts = 10, int max_iters = 300) {
    if (k_min < 1 || k_max < k_min) throw ParameterError("WCSS curve needs 1 <= k_min <= k_max");
    if (static_cast<Eigen::Index>(k_max) > x.rows()) {
        throw ParameterError("WCSS curve k_max " + std::to_string(k_max) + " exceeds N = " + std::to_string(x.rows()));
    }
    std::vector<CurvePoint> curve;
    for (int k = k_min; k <= k_max; ++k) {
        auto best = best_kmeans(x, k, seed, restarts, max_iters);
        if (!curve.empty()) {
            const auto& prev = curve.back().model;
            Eigen::Index far = 0;
            double far_dist = -1.0;
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                const double dist = squared_distance(x, i, prev.centers, prev.assignments[static_cast<std::size_t>(i)]);
                if (dist > far_dist) {
                    far_dist = dist;
                    far = i;
                }
            }
            Eigen::MatrixXd init(k, x.cols());
            init.topRows(k - 1) = prev.centers;
            init.row(k - 1) = x.row(far);
            auto warm = lloyd(x, init, max_iters, restart_seed(seed, k, restarts));
            if (warm.wcss < best.wcss) best = std::move(warm);
        }
        curve.push_back({k, best.wcss, std::move(best)});
    }
    return curve;
}

/// Elbow by the largest discrete second difference within [2, 5]; ties go to
/// the smaller k. `override_k` short-circuits the search.
inline int elbow_select(const std::vector<CurvePoint>& curve, std::optional<int> override_k = std::nullopt) {
    if (override_k) return *override_k;
    auto wcss_at = [&](int k) -> std::optional<double> {
        for (const auto& p : curve) {
            if (p.k == k) return p.wcss;
        }
        return std::nullopt;
    };
    for (int k = 1; k <= 6; ++k) {
        if (!wcss_at(k)) throw ParameterError("elbow selection needs the WCSS curve for k = 1..6");
    }
    int best_k = 2;
    double best = -std::numeric_limits<double>::infinity();
    for (int k = 2; k <= 5; ++k) {
        const double second = *wcss_at(k - 1) - 2.0 * *wcss_at(k) + *wcss_at(k + 1);
        if (second > best) {
            best = second;
            best_k = k;
        }
    }
    return best_k;
}

inline int elbow_select(const std::vector<double>& wcss_from_k1) {
    std::vector<CurvePoint> curve;
    for (std::size_t i = 0; i < wcss_from_k1.size(); ++i) curve.push_back({static_cast<int>(i) + 1, wcss_from_k1[i], {}});
    return elbow_select(curve);
}

// ---------------------------------------------------------------------------
// Archetypes

struct Archetype {
    int cluster_index = 0;
    UseClass use_class = UseClass::OTHER;
    std::string representative_id;
    FootprintRecord representative_footprint;
    double representative_distance = 0.0;
    double cluster_total_area_m2 = 0.0;
    std::size_t member_count = 0;

    std::string archetype_id() const { return to_string(use_class) + "-" + std::to_string(cluster_index); }

    nlohmann::json sidecar_json() const {
        return {{"archetype_id", archetype_id()},
                {"cluster_index", cluster_index},
                {"representative_id", representative_id},
                {"cluster_total_area_m2", cluster_total_area_m2},
                {"member_count", member_count},
                {"height_m", representative_footprint.height_m},
                {"use_class", to_string(use_class)}};
    }
};

struct ArchetypeSelection {
    std::vector<Archetype> archetypes;
    std::size_t empty_clusters = 0;
};

/// Per cluster, the member nearest its center (lowest record id on ties)
/// together with the summed member area.
inline ArchetypeSelection select_archetypes(const ClusterModel& model, const LatentMatrix& latents,
                                            const std::vector<FootprintRecord>& records) {
    if (model.assignments.size() != latents.rows() || records.size() != latents.rows()) {
        throw DimensionError("cluster assignments, latents and records must align one-to-one");
    }
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (records[i].id != latents.ids[i]) {
            throw InputError("record '" + records[i].id + "' is not aligned with latent row '" + latents.ids[i] + "'");
        }
    }
    ArchetypeSelection out;
    for (int c = 0; c < model.k; ++c) {
        std::optional<std::size_t> best;
        double best_dist = std::numeric_limits<double>::infinity();
        double area = 0.0;
        std::size_t members = 0;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (model.assignments[i] != c) continue;
            ++members;
            area += records[i].area_m2;
            const double dist = std::sqrt(squared_distance(latents.vectors, static_cast<Eigen::Index>(i), model.centers, c));
            if (!best || dist < best_dist || (dist == best_dist && records[i].id < records[*best].id)) {
                best = i;
                best_dist = dist;
            }
        }
        if (!best) {
            ++out.empty_clusters;
            continue;
        }
        const auto& rep = records[*best];
        out.archetypes.push_back({c, rep.use_class, rep.id, rep, best_dist, area, members});
    }
    return out;
}

} // namespace marl::cluster
