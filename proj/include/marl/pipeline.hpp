#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marl/cluster.hpp"
#include "marl/energy.hpp"
#include "marl/error.hpp"
#include "marl/ingest.hpp"
#include "marl/io.hpp"
#include "marl/plot.hpp"
#include "marl/synth.hpp"
#include "marl/tasks.hpp"
#include "marl/vq.hpp"

#ifndef MARL_VERSION
#define MARL_VERSION "0.0.0"
#endif

namespace marl::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kToolVersion = MARL_VERSION;

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"synth",      "ingest",   "train", "embed",
                                                "cluster",    "archetypes", "evaluate", "plot"};
    return names;
}

/// Defaults for every configuration key; user files are merged on top.
inline json default_config() {
    return json::parse(R"({
      "paths": {"data": null, "out": "marl-run"},
      "synth": {"n": 500, "seed": 7, "sfh_fraction": 0.7, "mfh_fraction": 0.3, "other_fraction": 0.0,
                "vintage_shape_correlation": 0.8, "shape_families": ["rectangle", "L", "T", "U"]},
      "ingest": {"preview": 4},
      "preprocessing": {"base_px": 1410, "side_px": 112, "meters_per_pixel": 0.5, "h_min": 0.0, "h_max": 100.0},
      "model": {"codebook_size": 512, "latent_dim": 32, "encoder_hidden1": 32, "encoder_hidden2": 64,
                "beta": 0.25, "seed": 1},
      "training": {"pretrain_epochs": 30, "learning_rate": 0.001, "batch_size": 8, "seed": 2, "finetune": true,
                   "task_weights": {"program": 1.0, "vintage": 1.0, "height": 1.0}},
      "clustering": {"reduction": "pca", "components": 64, "k": "elbow", "k_max": 6, "restarts": 10,
                     "max_iters": 300, "seed": 3},
      "energy": {"eui_source": "surrogate", "eui_table": null, "ground_truth": null, "baseline_eui": null,
                 "fixture_csv": null},
      "plot": {"recon_samples": 6}
    })");
}

inline json parse_override_value(const std::string& text) {
    try {
        return json::parse(text);
    } catch (const json::parse_error&) {
        return text;
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON when possible.
inline void apply_override(json& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
    const auto key = assignment.substr(0, eq);
    json* node = &cfg;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const auto part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw ConfigError("override key '" + key + "' has an empty segment");
        if (!node->is_object() && !node->is_null()) throw ConfigError("override key '" + key + "' descends into a non-object");
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    *node = parse_override_value(assignment.substr(eq + 1));
}

class RunConfig {
public:
    RunConfig() : raw_(default_config()) {}
    explicit RunConfig(const json& user) : raw_(default_config()) { raw_.merge_patch(user); }

    static RunConfig load(const fs::path& path, const std::vector<std::string>& overrides = {}) {
        RunConfig cfg(io::read_json(path));
        for (const auto& o : overrides) apply_override(cfg.raw_, o);
        for (const auto& [section, key] : path_keys()) {
            auto& node = cfg.raw_[section][key];
            if (!node.is_string()) continue;
            const fs::path p = node.get<std::string>();
            if (p.is_relative()) node = (path.parent_path() / p).lexically_normal().string();
        }
        return cfg;
    }

    /// Every referenced input path must exist before a stage starts.
    void check_paths() const {
        if (!raw_.at("paths").at("out").is_string()) throw ConfigError("paths.out must be a string");
        for (const auto& [section, key] : path_keys()) {
            const auto& node = raw_.at(section).at(key);
            if (section == "paths" && key == "out") continue;
            if (node.is_string() && !fs::exists(node.get<std::string>())) {
                throw ConfigError(section + "." + key + " path '" + node.get<std::string>() + "' does not exist");
            }
        }
    }

    json& raw() { return raw_; }
    const json& raw() const { return raw_; }
    const json& section(const std::string& name) const { return raw_.at(name); }

    fs::path out_dir() const { return raw_.at("paths").at("out").get<std::string>(); }
    fs::path stage_dir(const std::string& stage) const { return out_dir() / stage; }

    std::optional<fs::path> optional_path(const json& value) const {
        if (value.is_null()) return std::nullopt;
        fs::path p = value.get<std::string>();
        return p;
    }

    PreprocessConfig preprocess() const {
        const auto& p = section("preprocessing");
        return {p.at("base_px").get<int>(), p.at("side_px").get<int>(), p.at("meters_per_pixel").get<double>(),
                p.at("h_min").get<double>(), p.at("h_max").get<double>()};
    }

    vq::ModelConfig model() const {
        const auto& m = section("model");
        vq::ModelConfig c;
        c.side_px = preprocess().side_px;
        c.codebook_size = m.at("codebook_size").get<int>();
        c.latent_dim = m.at("latent_dim").get<int>();
        c.encoder_hidden1 = m.at("encoder_hidden1").get<int>();
        c.encoder_hidden2 = m.at("encoder_hidden2").get<int>();
        c.beta = m.at("beta").get<double>();
        c.seed = m.at("seed").get<std::uint64_t>();
        return c;
    }

    vq::TrainConfig training() const {
        const auto& t = section("training");
        vq::TrainConfig c;
        c.epochs = t.at("pretrain_epochs").get<int>();
        c.batch_size = t.at("batch_size").get<int>();
        c.learning_rate = t.at("learning_rate").get<double>();
        c.seed = t.at("seed").get<std::uint64_t>();
        return c;
    }

    tasks::TaskWeights task_weights() const {
        const auto& w = section("training").at("task_weights");
        return {w.at("program").get<double>(), w.at("vintage").get<double>(), w.at("height").get<double>()};
    }

    synth::GeneratorSpec generator() const {
        const auto& s = section("synth");
        synth::GeneratorSpec g;
        g.n = s.at("n").get<std::size_t>();
        g.seed = s.at("seed").get<std::uint64_t>();
        g.sfh_fraction = s.at("sfh_fraction").get<double>();
        g.mfh_fraction = s.at("mfh_fraction").get<double>();
        g.other_fraction = s.at("other_fraction").get<double>();
        g.vintage_shape_correlation = s.at("vintage_shape_correlation").get<double>();
        g.shape_families.clear();
        for (const auto& f : s.at("shape_families")) g.shape_families.push_back(synth::family_from_string(f.get<std::string>()));
        return g;
    }

private:
    static std::vector<std::pair<std::string, std::string>> path_keys() {
        return {{"paths", "out"},
                {"paths", "data"},
                {"energy", "eui_table"},
                {"energy", "ground_truth"},
                {"energy", "fixture_csv"}};
    }

    json raw_;
};

// ---------------------------------------------------------------------------
// Logging: line-delimited JSON on stderr.

class Logger {
public:
    explicit Logger(std::string stage, std::ostream* sink = &std::cerr) : stage_(std::move(stage)), sink_(sink) {}

    void info(const std::string& message, json fields = json::object()) const { emit("info", message, std::move(fields)); }
    void warn(const std::string& message, json fields = json::object()) const { emit("warn", message, std::move(fields)); }

private:
    void emit(const char* level, const std::string& message, json fields) const {
        if (!sink_) return;
        const auto now = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::system_clock::now().time_since_epoch())
                             .count();
        fields["ts_ms"] = now;
        fields["level"] = level;
        fields["stage"] = stage_;
        fields["msg"] = message;
        *sink_ << fields.dump() << "\n";
    }

    std::string stage_;
    std::ostream* sink_;
};

struct StageContext {
    const RunConfig& config;
    Logger log;
};

inline fs::path require(const fs::path& path, const std::string& producer) {
    if (!fs::exists(path)) {
        throw StageDependencyError("missing artifact '" + path.string() + "' (produced by stage '" + producer + "')");
    }
    return path;
}

inline std::vector<FootprintRecord> load_ingested(const RunConfig& cfg) {
    const auto path = require(cfg.stage_dir("ingest") / "records.geojson", "ingest");
    return parse_footprint_dataset(path, DatasetFormat::geojson).records;
}

inline std::string tag_for(UseClass c) { return to_string(c); }

// ---------------------------------------------------------------------------
// Stages

inline json run_synth(const StageContext& ctx) {
    const auto spec = ctx.config.generator();
    const auto records = synth::generate_footprints(spec);
    const auto dir = ctx.config.stage_dir("synth");
    io::write_file_atomic(dir / "footprints.geojson", to_geojson(records).dump() + "\n");
    const auto residential = filter_residential(records);
    const double gt = synth::synthetic_ground_truth(residential);
    io::write_json(dir / "ground_truth.json", {{"ec_gt_kwh", gt}, {"records", residential.size()}});
    ctx.log.info("generated synthetic stock", {{"records", records.size()}, {"ec_gt_kwh", gt}});
    return {{"records", records.size()}, {"residential", residential.size()}, {"ec_gt_kwh", gt}};
}

inline json run_ingest(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    fs::path input;
    if (auto data = cfg.optional_path(cfg.section("paths").at("data"))) {
        input = *data;
        if (!fs::exists(input)) throw IoError("dataset '" + input.string() + "' does not exist");
    } else {
        input = require(cfg.stage_dir("synth") / "footprints.geojson", "synth");
    }
    const auto parsed = parse_footprint_dataset(input, format_from_extension(input));
    const auto residential = filter_residential(parsed.records);
    const auto dir = cfg.stage_dir("ingest");
    io::write_file_atomic(dir / "records.geojson", to_geojson(residential).dump() + "\n");

    const auto pre = cfg.preprocess();
    const auto preview = std::min<std::size_t>(cfg.section("ingest").at("preview").get<std::size_t>(), residential.size());
    for (std::size_t i = 0; i < preview; ++i) {
        const auto image = preprocess(residential[i], pre);
        for (int c = 0; c < 3; ++c) {
            write_raster_png(dir / "preview" / (residential[i].id + "_c" + std::to_string(c) + ".png"), image.side_px,
                             image.channels[static_cast<std::size_t>(c)]);
        }
    }
    json summary = {{"input", input.string()},
                    {"input_sha256", io::file_digest(input)},
                    {"parsed", parsed.records.size()},
                    {"skipped", parsed.skipped},
                    {"residential", residential.size()}};
    io::write_json(dir / "summary.json", summary);
    ctx.log.info("ingested dataset", summary);
    return summary;
}

struct TrainedModel {
    vq::VqAutoencoder<float> model;
    tasks::TaskPool<float> pool;
};

inline void save_checkpoint(const fs::path& path, const TrainedModel& trained, const json& training_meta) {
    nn::CheckpointWriter writer;
    trained.model.write_sections(writer);
    trained.pool.write_sections(writer);
    io::BlobFile file;
    file.header = trained.model.header_json();
    file.header["training"] = training_meta;
    file.header["sections"] = writer.sections;
    file.header["program_labels"] = trained.pool.programs().names();
    file.blob = std::move(writer.blob);
    io::write_blob_file(path, vq::kCheckpointMagic, file);
}

inline TrainedModel load_checkpoint(const fs::path& path) {
    const auto file = io::read_blob_file(path, vq::kCheckpointMagic);
    const auto cfg = vq::ModelConfig::from_json(file.header.at("model"));
    TrainedModel trained{vq::VqAutoencoder<float>(cfg),
                         tasks::TaskPool<float>(
                             {std::size_t(cfg.latent_side()), std::size_t(cfg.latent_side()), std::size_t(cfg.latent_dim)},
                             tasks::ProgramLabels(file.header.at("program_labels").get<std::vector<std::string>>()), 0)};
    trained.model.read_sections(file);
    trained.pool.read_sections(file);
    return trained;
}

inline json run_train(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto records = load_ingested(cfg);
    if (records.empty()) throw InputError("no residential records to train on");
    const auto pre = cfg.preprocess();
    const auto model_cfg = cfg.model();
    auto train_cfg = cfg.training();
    const auto programs = tasks::ProgramLabels::from_records(records);

    TrainedModel trained{vq::VqAutoencoder<float>(model_cfg),
                         tasks::TaskPool<float>(vq::VqAutoencoder<float>(model_cfg).latent_shape(), programs,
                                                derive_seed(model_cfg.seed, 99))};
    const auto images = vq::build_images(records, pre);
    ctx.log.info("built training images", {{"records", records.size()}, {"side_px", pre.side_px}});

    vq::LossHistory history;
    if (train_cfg.epochs > 0) {
        history = vq::pretrain(trained.model, images, train_cfg);
        for (const auto& e : history) {
            ctx.log.info("pretrain epoch", {{"epoch", e.epoch}, {"reconstruction", e.reconstruction}, {"total", e.total}});
        }
    }
    const bool finetune = cfg.section("training").at("finetune").get<bool>() && train_cfg.epochs > 0;
    if (finetune) {
        const auto labels = tasks::make_labels(records, programs, pre);
        auto ft_cfg = train_cfg;
        ft_cfg.seed = derive_seed(train_cfg.seed, 0xF1);
        auto loss = tasks::finetune(trained.model, trained.pool, images, labels, cfg.task_weights(), ft_cfg);
        loss.epoch = train_cfg.epochs;
        ctx.log.info("finetune epoch", {{"dtp_total", loss.dtp_total}, {"total", loss.total}});
        history.push_back(loss);
    }
    const auto dir = cfg.stage_dir("train");
    const json meta = {{"pretrain_epochs", train_cfg.epochs},
                       {"finetune", finetune},
                       {"learning_rate", train_cfg.learning_rate},
                       {"batch_size", train_cfg.batch_size},
                       {"seed", train_cfg.seed},
                       {"records", records.size()}};
    save_checkpoint(dir / "model.ckpt", trained, meta);
    io::write_file_atomic(dir / "loss.csv", vq::loss_history_csv(history));
    io::write_json(dir / "label_map.json", programs.to_json());
    json summary = meta;
    summary["epochs_recorded"] = history.size();
    if (!history.empty()) summary["final_reconstruction"] = history.back().reconstruction;
    return summary;
}

inline json run_embed(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto records = load_ingested(cfg);
    const auto trained = load_checkpoint(require(cfg.stage_dir("train") / "model.ckpt", "train"));
    const auto& c = cfg.section("clustering");
    const auto reduction = cluster::reduction_from_string(c.at("reduction").get<std::string>());
    const auto latents = cluster::embed_dataset(trained.model, records, cfg.preprocess(), reduction,
                                                c.at("components").get<int>());
    io::write_blob_file(cfg.stage_dir("embed") / "latents.lmx", cluster::kLatentMagic, cluster::to_blob(latents));
    ctx.log.info("embedded records", {{"rows", latents.rows()}, {"d", latents.dim()}});
    return {{"rows", latents.rows()}, {"d", latents.dim()}, {"reduction", to_string(reduction)}};
}

struct ClassPartition {
    UseClass use_class;
    std::vector<FootprintRecord> records;
    cluster::LatentMatrix latents;
};

inline std::vector<ClassPartition> partition_by_class(const std::vector<FootprintRecord>& records,
                                                      const cluster::LatentMatrix& latents) {
    std::vector<ClassPartition> out;
    for (auto use : {UseClass::SFH, UseClass::MFH}) {
        ClassPartition part{use, {}, {}};
        std::vector<std::string> ids;
        for (const auto& r : records) {
            if (r.use_class == use) {
                part.records.push_back(r);
                ids.push_back(r.id);
            }
        }
        if (part.records.empty()) continue;
        part.latents = latents.subset(ids);
        out.push_back(std::move(part));
    }
    return out;
}

inline cluster::LatentMatrix load_latents(const RunConfig& cfg) {
    return cluster::from_blob(
        io::read_blob_file(require(cfg.stage_dir("embed") / "latents.lmx", "embed"), cluster::kLatentMagic));
}

inline json run_cluster(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto records = load_ingested(cfg);
    const auto latents = load_latents(cfg);
    const auto& c = cfg.section("clustering");
    const auto seed = c.at("seed").get<std::uint64_t>();
    const auto restarts = c.at("restarts").get<int>();
    const auto max_iters = c.at("max_iters").get<int>();
    const auto dir = cfg.stage_dir("cluster");
    json summary = json::object();
    for (const auto& part : partition_by_class(records, latents)) {
        const auto tag = tag_for(part.use_class);
        const int n = static_cast<int>(part.records.size());
        const int k_max = std::min(c.at("k_max").get<int>(), n);
        const auto curve = cluster::wcss_curve(part.latents.vectors, 1, k_max, derive_seed(seed, static_cast<int>(part.use_class)),
                                               restarts, max_iters);
        std::optional<int> override_k;
        std::string selected_by = "elbow";
        const auto& k_cfg = c.at("k");
        if (k_cfg.is_object() && k_cfg.contains(tag)) {
            override_k = k_cfg.at(tag).get<int>();
            selected_by = "override";
        } else if (k_cfg.is_number_integer()) {
            override_k = k_cfg.get<int>();
            selected_by = "override";
        }
        int k = 1;
        if (override_k) {
            k = *override_k;
        } else if (k_max >= 6) {
            k = cluster::elbow_select(curve);
        } else {
            selected_by = "too_few_records";
            k = std::max(1, std::min(2, k_max));
        }
        if (k < 1 || k > k_max) {
            throw ParameterError("k = " + std::to_string(k) + " for " + tag + " is outside [1, " + std::to_string(k_max) + "]");
        }
        std::string csv = "k,wcss\n";
        plot::Series series;
        for (const auto& p : curve) {
            char line[64];
            std::snprintf(line, sizeof line, "%d,%.10g\n", p.k, p.wcss);
            csv += line;
            series.x.push_back(p.k);
            series.y.push_back(p.wcss);
        }
        io::write_file_atomic(dir / ("wcss_" + tag + ".csv"), csv);
        plot::line_chart(dir / ("wcss_" + tag + ".png"), {series});
        auto model_json = curve[static_cast<std::size_t>(k - 1)].model.to_json();
        model_json["use_class"] = tag;
        model_json["ids"] = part.latents.ids;
        model_json["selected_by"] = selected_by;
        io::write_json(dir / ("model_" + tag + ".json"), model_json);
        summary[tag] = {{"k", k}, {"selected_by", selected_by}, {"records", n},
                        {"wcss", curve[static_cast<std::size_t>(k - 1)].wcss}};
        ctx.log.info("clustered use class", summary[tag]);
    }
    io::write_json(dir / "summary.json", summary);
    return summary;
}

inline nlohmann::json record_json(const FootprintRecord& r) {
    return to_geojson({r}).at("features").at(0);
}

inline FootprintRecord record_from_json(const nlohmann::json& feature) {
    const auto parsed = parse_geojson(json{{"type", "FeatureCollection"}, {"features", json::array({feature})}}.dump());
    if (parsed.records.size() != 1) throw IoError("archetype footprint is malformed");
    return parsed.records.front();
}

inline std::vector<cluster::Archetype> load_archetypes(const fs::path& path) {
    const auto j = io::read_json(path);
    std::vector<cluster::Archetype> out;
    for (const auto& a : j.at("archetypes")) {
        cluster::Archetype arch;
        arch.cluster_index = a.at("cluster_index").get<int>();
        arch.use_class = *parse_use_class(a.at("use_class").get<std::string>());
        arch.representative_id = a.at("representative_id").get<std::string>();
        arch.representative_footprint = record_from_json(a.at("footprint"));
        arch.representative_distance = a.at("representative_distance").get<double>();
        arch.cluster_total_area_m2 = a.at("cluster_total_area_m2").get<double>();
        arch.member_count = a.at("member_count").get<std::size_t>();
        out.push_back(std::move(arch));
    }
    return out;
}

inline json run_archetypes(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto records = load_ingested(cfg);
    const auto latents = load_latents(cfg);
    const auto pre = cfg.preprocess();
    const auto dir = cfg.stage_dir("archetypes");
    json all = json::array();
    std::size_t empty = 0;
    for (const auto& part : partition_by_class(records, latents)) {
        const auto tag = tag_for(part.use_class);
        const auto model = cluster::ClusterModel::from_json(
            io::read_json(require(cfg.stage_dir("cluster") / ("model_" + tag + ".json"), "cluster")));
        const auto selection = cluster::select_archetypes(model, part.latents, part.records);
        empty += selection.empty_clusters;
        for (const auto& a : selection.archetypes) {
            const auto id = a.archetype_id();
            const auto raster = rasterize_footprint(a.representative_footprint, pre.base_px, pre.meters_per_pixel,
                                                    pre.h_min, pre.h_max);
            const auto crop = crop_windows(pre.base_px)[2];
            write_raster_png(dir / (id + ".png"), crop, center_crop(raster, crop));
            io::write_json(dir / (id + ".json"), a.sidecar_json());
            auto entry = a.sidecar_json();
            entry["representative_distance"] = a.representative_distance;
            entry["footprint"] = record_json(a.representative_footprint);
            all.push_back(entry);
        }
    }
    if (empty > 0) ctx.log.warn("empty clusters excluded", {{"count", empty}});
    io::write_json(dir / "archetypes.json", {{"archetypes", all}, {"empty_clusters", empty}});
    return {{"archetypes", all.size()}, {"empty_clusters", empty}};
}

inline std::optional<energy::BaselineEuis> baseline_from(const json& j) {
    if (j.is_null()) return std::nullopt;
    energy::BaselineEuis out;
    for (const auto& [key, value] : j.items()) {
        const auto use = parse_use_class(key);
        if (!use) throw ConfigError("baseline EUI key '" + key + "' is not a use class");
        out[*use] = value.get<double>();
    }
    return out;
}

inline json run_evaluate(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto& e = cfg.section("energy");
    json digests = json::object();

    double gt = 0.0;
    const auto& gt_cfg = e.at("ground_truth");
    if (gt_cfg.is_number()) {
        gt = gt_cfg.get<double>();
    } else if (gt_cfg.is_string()) {
        const fs::path path = gt_cfg.get<std::string>();
        gt = energy::read_ground_truth(path);
        digests["ground_truth"] = io::file_digest(path);
    } else {
        const auto path = require(cfg.stage_dir("synth") / "ground_truth.json", "synth");
        gt = energy::read_ground_truth(path);
        digests["ground_truth"] = io::file_digest(path);
    }

    energy::EnergyReport report;
    if (auto fixture = cfg.optional_path(e.at("fixture_csv"))) {
        report = energy::build_fixture_report(energy::read_fixture_csv(*fixture), gt);
        digests["fixture_csv"] = io::file_digest(*fixture);
    } else {
        const auto arch_path = require(cfg.stage_dir("archetypes") / "archetypes.json", "archetypes");
        const auto archetypes = load_archetypes(arch_path);
        digests["archetypes"] = io::file_digest(arch_path);
        const auto source = e.at("eui_source").get<std::string>();
        std::unique_ptr<energy::EuiProvider> provider;
        if (source == "surrogate") {
            provider = std::make_unique<energy::SurrogateEuiProvider>();
        } else if (source == "table" || source == "external_table") {
            const auto table = cfg.optional_path(e.at("eui_table"));
            if (!table) throw ConfigError("energy.eui_table is required for the table EUI source");
            provider = std::make_unique<energy::TableEuiProvider>(energy::TableEuiProvider::from_csv(*table));
            digests["eui_table"] = io::file_digest(*table);
        } else {
            throw ConfigError("unknown energy.eui_source '" + source + "'");
        }
        report = energy::build_report(archetypes, *provider, gt, baseline_from(e.at("baseline_eui")));
    }
    auto out = report.to_json();
    out["tool"] = "marl";
    out["tool_version"] = kToolVersion;
    out["input_digests"] = digests;
    io::write_json(cfg.stage_dir("evaluate") / "report.json", out);
    ctx.log.info("evaluated energy estimate", {{"accuracy_pct", report.accuracy_pct}});
    return out;
}

inline json run_plot(const StageContext& ctx) {
    const auto& cfg = ctx.config;
    const auto dir = cfg.stage_dir("plot");
    json produced = json::array();

    const auto loss_path = cfg.stage_dir("train") / "loss.csv";
    if (fs::exists(loss_path)) {
        const auto rows = io::read_csv(loss_path);
        std::vector<plot::Series> series(2);
        series[1].color = plot::palette(1);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double epoch = std::stod(rows[i][0]);
            series[0].x.push_back(epoch);
            series[0].y.push_back(std::stod(rows[i][1]));
            series[1].x.push_back(epoch);
            series[1].y.push_back(std::stod(rows[i][5]));
        }
        plot::line_chart(dir / "loss.png", series);
        produced.push_back("loss.png");
    }

    for (const auto& tag : {"SFH", "MFH"}) {
        const auto csv = cfg.stage_dir("cluster") / (std::string("wcss_") + tag + ".csv");
        if (!fs::exists(csv)) continue;
        plot::Series s;
        const auto rows = io::read_csv(csv);
        for (std::size_t i = 1; i < rows.size(); ++i) {
            s.x.push_back(std::stod(rows[i][0]));
            s.y.push_back(std::stod(rows[i][1]));
        }
        plot::line_chart(dir / (std::string("wcss_") + tag + ".png"), {s});
        produced.push_back(std::string("wcss_") + tag + ".png");
    }

    const auto ckpt = cfg.stage_dir("train") / "model.ckpt";
    const auto records_path = cfg.stage_dir("ingest") / "records.geojson";
    if (fs::exists(ckpt) && fs::exists(records_path)) {
        const auto trained = load_checkpoint(ckpt);
        const auto records = load_ingested(cfg);
        const auto pre = cfg.preprocess();
        const auto n = std::min<std::size_t>(cfg.section("plot").at("recon_samples").get<std::size_t>(), records.size());
        const int side = pre.side_px, gap = 4;
        plot::Canvas grid(6 * side + 7 * gap, static_cast<int>(n) * (side + gap) + gap);
        for (std::size_t i = 0; i < n; ++i) {
            const auto image = vq::image_array<float>(preprocess(records[i], pre));
            const auto code = trained.model.quantize(trained.model.encode(image));
            const auto recon = trained.model.decode(code.z_q);
            const int y = gap + static_cast<int>(i) * (side + gap);
            for (int c = 0; c < 3; ++c) {
                std::vector<float> orig(static_cast<std::size_t>(side) * side), rec(orig.size());
                for (std::size_t p = 0; p < orig.size(); ++p) {
                    orig[p] = image[p * 3 + static_cast<std::size_t>(c)];
                    rec[p] = recon[p * 3 + static_cast<std::size_t>(c)];
                }
                grid.tile(gap + c * (side + gap), y, side, orig);
                grid.tile(gap + (3 + c) * (side + gap), y, side, rec);
            }
        }
        grid.save(dir / "recon_grid.png");
        produced.push_back("recon_grid.png");
    }

    const auto lmx = cfg.stage_dir("embed") / "latents.lmx";
    if (fs::exists(lmx) && fs::exists(records_path)) {
        const auto latents = load_latents(cfg);
        const auto records = load_ingested(cfg);
        const auto projected = cluster::fit_pca(latents.vectors, 2).project(latents.vectors);
        std::vector<double> xs, ys;
        std::vector<int> groups;
        std::map<std::string, int> group_of;
        for (const auto& tag : {"SFH", "MFH"}) {
            const auto path = cfg.stage_dir("cluster") / (std::string("model_") + tag + ".json");
            if (!fs::exists(path)) continue;
            const auto model = io::read_json(path);
            const auto ids = model.at("ids").get<std::vector<std::string>>();
            const auto assign = model.at("assignments").get<std::vector<int>>();
            const int offset = std::string(tag) == "SFH" ? 0 : 4;
            for (std::size_t i = 0; i < ids.size(); ++i) group_of[ids[i]] = offset + assign[i];
        }
        for (Eigen::Index i = 0; i < projected.rows(); ++i) {
            xs.push_back(projected(i, 0));
            ys.push_back(projected.cols() > 1 ? projected(i, 1) : 0.0);
            const auto it = group_of.find(latents.ids[static_cast<std::size_t>(i)]);
            groups.push_back(it == group_of.end() ? 7 : it->second);
        }
        plot::scatter(dir / "latent_scatter.png", xs, ys, groups);
        produced.push_back("latent_scatter.png");
    }
    return {{"plots", produced}};
}

inline json run_stage(const std::string& stage, const RunConfig& cfg, std::ostream* log_sink = &std::cerr) {
    StageContext ctx{cfg, Logger(stage, log_sink)};
    cfg.check_paths();
    io::DirectoryLock lock(cfg.out_dir());
    if (stage == "synth") return run_synth(ctx);
    if (stage == "ingest") return run_ingest(ctx);
    if (stage == "train") return run_train(ctx);
    if (stage == "embed") return run_embed(ctx);
    if (stage == "cluster") return run_cluster(ctx);
    if (stage == "archetypes") return run_archetypes(ctx);
    if (stage == "evaluate") return run_evaluate(ctx);
    if (stage == "plot") return run_plot(ctx);
    throw ConfigError("unknown stage '" + stage + "'");
}

} // namespace marl::pipeline
