// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// `acceptance 4 6` runs only the listed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

#include "marl/pipeline.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"
#include "support/table_fixtures.hpp"

using namespace marl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* format, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, format, args...);
    return buf;
}

// ---------------------------------------------------------------------------
// 1. Table arithmetic

Outcome table_arithmetic() {
    using namespace energy;
    auto two_class = [](const fixtures::TwoClassRow& row) {
        const std::vector<EuiAssignment> a{{"MFH", row.mfh_eui, EuiSource::external_table},
                                           {"SFH", row.sfh_eui, EuiSource::external_table}};
        const std::vector<double> areas{fixtures::kMfhArea, fixtures::kSfhArea};
        return aggregate_energy(a, areas);
    };
    bool ok = true;
    std::ostringstream d;

    const double dtp = two_class(fixtures::kTaskPoolRow);
    const double dtp_acc = accuracy(dtp, fixtures::kRegionGroundTruth);
    ok &= std::abs(dtp - 183609344.0) <= 1.0 && std::abs(dtp_acc - 95.74) <= 0.01;
    d << fmt("task-pool row %.2f kWh %.4f%%", dtp, dtp_acc);

    const double proto = two_class(fixtures::kPrototypeRow);
    const double proto_acc = accuracy(proto, fixtures::kRegionGroundTruth);
    ok &= std::abs(proto - 137344567.0) <= 1e-4 * 137344567.0 && std::abs(proto_acc - 71.62) <= 0.02;
    d << fmt("; prototype row %.2f kWh %.4f%%", proto, proto_acc);

    for (const auto& row : fixtures::kOpenSetRows) {
        const double acc = accuracy(row.estimate_kwh, row.ground_truth_kwh);
        ok &= std::abs(acc - row.accuracy_pct) <= 0.01 + 1e-9;
        d << fmt("; %s %.4f%%", row.region, acc);
    }
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 2. Gradient correctness

Outcome gradients() {
    double worst = 0.0;
    std::string where;
    int checks = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto layers = gradcheck::check_all_layer_kinds(seed);
        auto heads = gradcheck::check_task_heads(seed);
        layers.insert(layers.end(), heads.begin(), heads.end());
        for (const auto& [name, report] : layers) {
            ++checks;
            if (report.worst > worst) {
                worst = report.worst;
                where = name + "/" + report.where + fmt(" seed %d", static_cast<int>(seed));
            }
        }
    }
    return {worst < 1e-4, fmt("%d checks over 20 seeds, worst relative error %.3g at %s", checks, worst, where.c_str())};
}

// ---------------------------------------------------------------------------
// 3. Vector-quantizer contract

Outcome quantizer_contract() {
    using namespace vq;
    std::ostringstream d;
    bool ok = true;

    // Brute-force nearest neighbour on 1000 sites, K = 16.
    Rng rng(31);
    Codebook<float> cb(16, 8, 3);
    for (auto& v : cb.entries.value.data) v = static_cast<float>(rng.uniform(-1, 1));
    nn::Array<float> z({10, 100, 8});
    for (auto& v : z.data) v = static_cast<float>(rng.uniform(-1, 1));
    const auto code = quantize(z, cb);
    oracle::Points rows;
    for (std::size_t k = 0; k < 16; ++k) rows.emplace_back(cb.entry(k), cb.entry(k) + 8);
    std::size_t mismatches = 0;
    for (std::size_t s = 0; s < 1000; ++s) {
        const std::vector<double> p(z.data.begin() + static_cast<std::ptrdiff_t>(s * 8),
                                    z.data.begin() + static_cast<std::ptrdiff_t>(s * 8 + 8));
        mismatches += code.indices[s] != oracle::nearest(p, rows);
    }
    ok &= mismatches == 0;
    d << "index mismatches " << mismatches << "/1000";

    // Idempotence.
    const auto again = quantize(code.z_q, cb);
    const bool idempotent = again.z_q == code.z_q && again.indices == code.indices;
    ok &= idempotent;
    d << "; idempotent " << (idempotent ? "yes" : "no");

    // Zero losses on exact matches.
    nn::Array<float> exact({4, 4, 8});
    for (std::size_t s = 0; s < 16; ++s) std::copy_n(cb.entry(s), 8, exact.data.begin() + static_cast<std::ptrdiff_t>(s * 8));
    const auto exact_code = quantize(exact, cb);
    const bool zero = exact_code.codebook_loss == 0.0 && exact_code.commitment_loss == 0.0;
    ok &= zero;
    d << "; exact-match losses " << exact_code.codebook_loss << "/" << exact_code.commitment_loss;

    // Straight-through: the analytic gradient at z_e (beta = 0, frozen codebook)
    // equals a finite-difference gradient of the downstream loss taken at z_q.
    Codebook<double> cbd(16, 3, 5);
    for (auto& v : cbd.entries.value.data) v = rng.uniform(-1, 1);
    nn::Network<double> decoder({nn::LayerSpec::upsample("u", 3, 2, 3), nn::LayerSpec::sigmoid("s")}, 9);
    auto ze = gradcheck::random_array({3, 3, 3}, rng);
    const auto code_d = quantize(ze, cbd);
    const auto probe = gradcheck::random_array(decoder.output_shape(code_d.z_q.shape), rng);
    auto zq = code_d.z_q;
    auto downstream = [&]() {
        const auto y = decoder.forward(zq);
        double s = 0;
        for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * probe[i];
        return s;
    };
    nn::Tape<double> tape;
    decoder.forward(code_d.z_q, &tape);
    const auto dzq = decoder.backward(tape, probe);
    const auto dze = quantize_backward(code_d, dzq, cbd, 0.0);
    const auto numeric = oracle::finite_difference(downstream, zq.data, 1e-5);
    const double st_err = oracle::relative_error(dze.data, numeric);
    ok &= st_err < 1e-6;
    d << fmt("; straight-through relative error %.3g", st_err);
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 4. Desk-scale training

Outcome desk_training() {
    synth::GeneratorSpec spec;
    spec.n = 200;
    spec.seed = 4;
    PreprocessConfig pre;
    pre.side_px = 56;
    const auto images = vq::build_images(synth::generate_footprints(spec), pre);
    vq::ModelConfig mc;
    mc.side_px = 56;
    vq::TrainConfig tc;
    tc.epochs = 30;
    tc.seed = 4;
    auto run = [&] {
        vq::VqAutoencoder<float> model(mc);
        return vq::pretrain(model, images, tc);
    };
    const auto first = run();
    const auto second = run();
    const double ratio = first.back().reconstruction / first.front().reconstruction;
    const bool identical = first == second;
    return {ratio < 0.5 && identical,
            fmt("reconstruction %.6g -> %.6g (ratio %.4f), rerun bitwise identical: %s", first.front().reconstruction,
                first.back().reconstruction, ratio, identical ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// 5. Clustering properties

Outcome clustering() {
    using namespace cluster;
    bool ok = true;
    std::ostringstream d;
    auto random_points = [](std::size_t n, int dim, std::uint64_t seed) {
        Rng rng(seed);
        Eigen::MatrixXd x(static_cast<Eigen::Index>(n), dim);
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < dim; ++j) x(i, j) = rng.uniform(-1, 1);
        return x;
    };
    auto to_points = [](const Eigen::MatrixXd& x) {
        oracle::Points p(static_cast<std::size_t>(x.rows()));
        for (Eigen::Index i = 0; i < x.rows(); ++i)
            for (Eigen::Index j = 0; j < x.cols(); ++j) p[static_cast<std::size_t>(i)].push_back(x(i, j));
        return p;
    };

    int fixed_point_failures = 0, monotone_failures = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto x = random_points(80, 4, seed);
        const auto m = kmeans(x, 5, seed);
        std::vector<int> again;
        assign_points(x, m.centers, again);
        fixed_point_failures += !(m.converged && again == m.assignments);

        const auto curve = wcss_curve(x, 1, 6, seed, 10);
        for (std::size_t k = 1; k < curve.size(); ++k) monotone_failures += curve[k].wcss > curve[k - 1].wcss;
    }
    ok &= fixed_point_failures == 0 && monotone_failures == 0;
    d << "fixed-point failures " << fixed_point_failures << ", monotonicity violations " << monotone_failures;

    const auto x30 = random_points(30, 2, 77);
    const double ours = best_kmeans(x30, 3, 77, 10).wcss;
    const double brute = oracle::brute_force_kmeans(to_points(x30), 3, 200, 78);
    ok &= ours <= 1.05 * brute;
    d << fmt("; k=3 WCSS %.6g vs 200-restart oracle %.6g (%.2f%%)", ours, brute, 100.0 * (ours / brute - 1.0));

    const int elbow = elbow_select(std::vector<double>{1000, 200, 180, 170, 165, 162});
    ok &= elbow == 2;
    d << "; fixture elbow " << elbow;
    return {ok, d.str()};
}

// ---------------------------------------------------------------------------
// 6. End-to-end estimator quality

// Desk configuration shared by the end-to-end criteria. Seeds below were not
// used while choosing these settings.
struct Desk {
    PreprocessConfig pre{1410, 32, 0.5, 0.0, 30.0};
    vq::ModelConfig model;
    vq::TrainConfig train;
    int components = 64;

    explicit Desk(std::uint64_t seed) {
        model.side_px = pre.side_px;
        model.codebook_size = 64;
        model.seed = seed;
        train.epochs = 5;
        train.learning_rate = 3e-4;
        train.seed = seed;
    }

    cluster::LatentMatrix embed(const vq::VqAutoencoder<float>& m, const std::vector<FootprintRecord>& records) const {
        return cluster::embed_dataset(m, records, pre, cluster::Reduction::pca, components);
    }
};

std::vector<cluster::Archetype> archetypes(const std::vector<FootprintRecord>& records,
                                           const cluster::LatentMatrix& latents, int k_sfh, int k_mfh,
                                           std::uint64_t seed) {
    std::vector<cluster::Archetype> out;
    for (const auto& part : pipeline::partition_by_class(records, latents)) {
        const int k = part.use_class == UseClass::SFH ? k_sfh : k_mfh;
        const auto model = cluster::best_kmeans(part.latents.vectors, k, seed, 10);
        const auto chosen = cluster::select_archetypes(model, part.latents, part.records).archetypes;
        out.insert(out.end(), chosen.begin(), chosen.end());
    }
    return out;
}

Outcome estimator_quality() {
    int not_worse = 0, both_above = 0;
    std::ostringstream d;
    for (int s = 0; s < 10; ++s) {
        const Desk desk(static_cast<std::uint64_t>(100 + s));
        synth::GeneratorSpec spec;
        spec.n = 500;
        spec.seed = static_cast<std::uint64_t>(3000 + s);
        const auto records = filter_residential(synth::generate_footprints(spec));
        const double gt = synth::synthetic_ground_truth(records);

        vq::VqAutoencoder<float> model(desk.model);
        vq::pretrain(model, vq::build_images(records, desk.pre), desk.train);
        const auto latents = desk.embed(model, records);

        const energy::SurrogateEuiProvider provider;
        const double multi = energy::build_report(archetypes(records, latents, 4, 2, desk.model.seed), provider, gt).accuracy_pct;
        const double single = energy::build_report(archetypes(records, latents, 1, 1, desk.model.seed), provider, gt).accuracy_pct;
        not_worse += multi >= single;
        both_above += multi > 80.0 && single > 80.0;
        d << fmt("%s%d:%.2f/%.2f", s == 0 ? "multi/single per seed " : " ", s, multi, single);
    }
    d << fmt("; multi >= single in %d/10, both > 80%% in %d/10", not_worse, both_above);
    return {not_worse >= 8 && both_above >= 9, d.str()};
}

// ---------------------------------------------------------------------------
// 7. Task-pool effect on vintage separability

Outcome task_pool_effect() {
    int pass = 0;
    std::ostringstream d;
    for (int s = 0; s < 10; ++s) {
        const Desk desk(static_cast<std::uint64_t>(200 + s));
        synth::GeneratorSpec spec;
        spec.n = 800;
        spec.seed = static_cast<std::uint64_t>(5000 + s);
        spec.vintage_shape_correlation = 1.0;
        const auto records = filter_residential(synth::generate_footprints(spec));
        const auto images = vq::build_images(records, desk.pre);
        const auto programs = tasks::ProgramLabels::from_records(records);
        const auto labels = tasks::make_labels(records, programs, desk.pre);
        std::vector<int> vintage;
        for (const auto& l : labels) vintage.push_back(l.vintage_bin);

        vq::VqAutoencoder<float> model(desk.model);
        vq::pretrain(model, images, desk.train);
        auto probe = [&](const vq::VqAutoencoder<float>& m) {
            const auto latents = cluster::embed_dataset(m, records, desk.pre, cluster::Reduction::none_flatten);
            return tasks::linear_probe(latents.vectors, vintage, tasks::kVintageBins, 0.3, desk.model.seed).test_accuracy;
        };
        const double before = probe(model);

        tasks::TaskPool<float> pool(model.latent_shape(), programs, derive_seed(desk.model.seed, 99));
        auto ft = desk.train;
        ft.seed = derive_seed(desk.train.seed, 0xF1);
        tasks::finetune(model, pool, images, labels, tasks::TaskWeights{}, ft);
        const double after = probe(model);
        pass += after > 0.8 && after > before;
        d << fmt("%s%d:%.3f->%.3f", s == 0 ? "vintage probe accuracy pretrain->finetune " : " ", s, before, after);
    }
    d << fmt("; criterion met in %d/10 seeds", pass);
    return {pass >= 8, d.str()};
}

// ---------------------------------------------------------------------------
// 8. Round trip and determinism

Outcome round_trip_and_determinism() {
    std::ostringstream d;
    bool ok = true;

    synth::GeneratorSpec spec;
    spec.n = 300;
    spec.seed = 8;
    spec.other_fraction = 0.1;
    spec.sfh_fraction = 0.6;
    const auto generated = synth::generate_footprints(spec);
    const auto parsed = parse_geojson(to_geojson(generated).dump());
    const bool exact = parsed.records == generated && parsed.skipped == 0;
    ok &= exact;
    d << "GeoJSON round trip exact: " << (exact ? "yes" : "no");

    const auto root = fs::temp_directory_path() / "marl_acceptance_rerun";
    fs::remove_all(root);
    json cfg = {{"paths", {{"out", (root / "out").string()}}},
                {"synth", {{"n", 120}, {"seed", 8}, {"other_fraction", 0.1}, {"sfh_fraction", 0.6}}},
                {"preprocessing", {{"side_px", 32}, {"h_max", 30.0}}},
                {"model", {{"codebook_size", 32}, {"latent_dim", 8}, {"encoder_hidden1", 8}, {"encoder_hidden2", 16}}},
                {"training", {{"pretrain_epochs", 2}}},
                {"clustering", {{"components", 16}}},
                {"plot", {{"recon_samples", 3}}}};
    const pipeline::RunConfig run(cfg);
    std::ostringstream log;
    std::vector<std::string> changed;
    std::size_t compared = 0;
    for (const auto& stage : pipeline::stage_names()) {
        pipeline::run_stage(stage, run, &log);
        auto digests = [&] {
            std::map<std::string, std::string> out;
            for (const auto& e : fs::recursive_directory_iterator(run.stage_dir(stage))) {
                if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = io::file_digest(e.path());
            }
            return out;
        };
        const auto first = digests();
        pipeline::run_stage(stage, run, &log);
        const auto second = digests();
        compared += first.size();
        for (const auto& [file, digest] : first) {
            const auto it = second.find(file);
            if (it == second.end() || it->second != digest) changed.push_back(file);
        }
    }
    ok &= changed.empty() && compared > 0;
    d << "; stage reruns compared " << compared << " artifacts, differing " << changed.size();
    for (const auto& f : changed) d << " " << f;
    fs::remove_all(root);
    return {ok, d.str()};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"table-fixture arithmetic", table_arithmetic},
        {"gradient correctness", gradients},
        {"vector-quantizer contract", quantizer_contract},
        {"desk-scale training", desk_training},
        {"clustering properties", clustering},
        {"end-to-end estimator quality", estimator_quality},
        {"task-pool effect", task_pool_effect},
        {"round trip and determinism", round_trip_and_determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << ", "
                  << fmt("%.1f s", secs) << "): " << o.detail << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
