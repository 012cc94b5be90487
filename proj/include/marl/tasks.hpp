#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "marl/error.hpp"
#include "marl/ingest.hpp"
#include "marl/nn.hpp"
#include "marl/vq.hpp"

namespace marl::tasks {

using nn::Array;
using nn::Parameter;

/// Construction-era bins, half-open: [..,1980) [1980,2004) [2004,2013) [2013,..).
inline int bin_vintage(int year) {
    if (year < 1980) return 0;
    if (year < 2004) return 1;
    if (year < 2013) return 2;
    return 3;
}

inline constexpr int kVintageBins = 4;

enum class Task { program_class, vintage_class, height_reg };

inline std::string to_string(Task t) {
    switch (t) {
    case Task::program_class: return "program_class";
    case Task::vintage_class: return "vintage_class";
    case Task::height_reg: return "height_reg";
    }
    return "?";
}

/// Program strings ordered lexicographically; the position is the class index.
class ProgramLabels {
public:
    ProgramLabels() = default;
    explicit ProgramLabels(std::vector<std::string> names) : names_(std::move(names)) {
        std::sort(names_.begin(), names_.end());
        names_.erase(std::unique(names_.begin(), names_.end()), names_.end());
    }

    static ProgramLabels from_records(const std::vector<FootprintRecord>& records) {
        std::vector<std::string> names;
        for (const auto& r : records) names.push_back(r.program);
        return ProgramLabels(std::move(names));
    }

    int index_of(const std::string& program) const {
        const auto it = std::lower_bound(names_.begin(), names_.end(), program);
        if (it == names_.end() || *it != program) throw LabelError("unknown program label '" + program + "'");
        return static_cast<int>(it - names_.begin());
    }

    std::size_t size() const { return names_.size(); }
    const std::vector<std::string>& names() const { return names_; }

    nlohmann::json to_json() const {
        nlohmann::json j = nlohmann::json::object();
        for (std::size_t i = 0; i < names_.size(); ++i) j[names_[i]] = i;
        return j;
    }
    static ProgramLabels from_json(const nlohmann::json& j) {
        std::vector<std::string> names(j.size());
        for (const auto& [name, index] : j.items()) {
            const auto i = index.get<std::size_t>();
            if (i >= names.size()) throw LabelError("label map index out of range for '" + name + "'");
            names[i] = name;
        }
        return ProgramLabels(std::move(names));
    }

private:
    std::vector<std::string> names_;
};

struct TaskLabels {
    int program_index = 0;
    int vintage_bin = 0;
    double height_gray = 0.0;
};

inline TaskLabels make_labels(const FootprintRecord& r, const ProgramLabels& programs, const PreprocessConfig& pre) {
    return {programs.index_of(r.program), bin_vintage(r.vintage_year),
            encode_height_grayscale(r.height_m, pre.h_min, pre.h_max) / 255.0};
}

inline std::vector<TaskLabels> make_labels(const std::vector<FootprintRecord>& records, const ProgramLabels& programs,
                                           const PreprocessConfig& pre) {
    std::vector<TaskLabels> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(make_labels(r, programs, pre));
    return out;
}

struct TaskWeights {
    double program = 1.0;
    double vintage = 1.0;
    double height = 1.0;

    double of(Task t) const {
        switch (t) {
        case Task::program_class: return program;
        case Task::vintage_class: return vintage;
        case Task::height_reg: return height;
        }
        return 0.0;
    }
};

inline constexpr int kHeadChannels = 8;

/// One conv layer then one fully-connected layer on top of z_e.
template <class T = float>
struct TaskHead {
    Task task = Task::vintage_class;
    int output_dim = 1;
    nn::Network<T> net;

    TaskHead() = default;
    TaskHead(Task t, const nn::Shape& latent_shape, int out_dim, std::uint64_t seed) : task(t), output_dim(out_dim) {
        if (out_dim < 1) throw ConfigError("task head output_dim must be at least 1");
        const auto name = to_string(t);
        const auto d = static_cast<int>(latent_shape.at(2));
        const auto conv = nn::LayerSpec::conv(name + ".conv", d, kHeadChannels, 3, 2);
        nn::Network<T> probe({conv}, 0);
        const auto features = static_cast<int>(nn::numel(probe.output_shape(latent_shape)));
        net = nn::Network<T>({conv, nn::LayerSpec::relu(name + ".relu"), nn::LayerSpec::linear(name + ".fc", features, out_dim)},
                             seed);
    }
};

template <class T>
Array<T> head_forward(const Array<T>& z_e, const TaskHead<T>& head, nn::Tape<T>* tape = nullptr) {
    return head.net.forward(z_e, tape);
}

struct DtpBreakdown {
    double program = 0.0;
    double vintage = 0.0;
    double height = 0.0;
    double total = 0.0; // weighted
};

/// Softmax cross-entropy; returns the loss and writes d(loss)/d(logits).
template <class T>
double softmax_cross_entropy(const Array<T>& logits, int label, Array<T>* grad) {
    if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
        throw LabelError("class label " + std::to_string(label) + " outside [0, " + std::to_string(logits.size()) + ")");
    }
    double max_logit = -std::numeric_limits<double>::infinity();
    for (const auto v : logits.data) max_logit = std::max(max_logit, static_cast<double>(v));
    double denom = 0.0;
    for (const auto v : logits.data) denom += std::exp(static_cast<double>(v) - max_logit);
    const double log_z = max_logit + std::log(denom);
    if (grad) {
        *grad = Array<T>(logits.shape);
        for (std::size_t i = 0; i < logits.size(); ++i) {
            (*grad)[i] = static_cast<T>(std::exp(static_cast<double>(logits[i]) - log_z) - (static_cast<int>(i) == label ? 1.0 : 0.0));
        }
    }
    return log_z - static_cast<double>(logits[label]);
}

template <class T>
double squared_error(const Array<T>& prediction, double target, Array<T>* grad) {
    const double diff = static_cast<double>(prediction[0]) - target;
    if (grad) {
        *grad = Array<T>(prediction.shape);
        (*grad)[0] = static_cast<T>(2.0 * diff);
    }
    return diff * diff;
}

/// Per-task losses for one sample and their weighted sum. When `grads` is
/// given it receives d(weighted total)/d(output) per head.
template <class T>
DtpBreakdown dtp_loss(const std::vector<Task>& tasks, const std::vector<Array<T>>& outputs, const TaskLabels& labels,
                      const TaskWeights& weights, std::vector<Array<T>>* grads = nullptr) {
    if (tasks.size() != outputs.size()) throw DimensionError("one output is required per enabled task");
    DtpBreakdown out;
    if (grads) grads->assign(tasks.size(), {});
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        Array<T>* g = grads ? &(*grads)[i] : nullptr;
        double loss = 0.0;
        switch (tasks[i]) {
        case Task::program_class:
            loss = softmax_cross_entropy(outputs[i], labels.program_index, g);
            out.program = loss;
            break;
        case Task::vintage_class:
            loss = softmax_cross_entropy(outputs[i], labels.vintage_bin, g);
            out.vintage = loss;
            break;
        case Task::height_reg:
            loss = squared_error(outputs[i], labels.height_gray, g);
            out.height = loss;
            break;
        }
        const double w = weights.of(tasks[i]);
        out.total += w * loss;
        if (g) {
            for (auto& v : g->data) v = static_cast<T>(w * static_cast<double>(v));
        }
    }
    return out;
}

/// The downstream task pool: program, vintage and height heads.
template <class T = float>
class TaskPool {
public:
    TaskPool() = default;
    TaskPool(const nn::Shape& latent_shape, ProgramLabels programs, std::uint64_t seed) : programs_(std::move(programs)) {
        if (programs_.size() == 0) throw ConfigError("task pool needs at least one program label");
        heads_.emplace_back(Task::program_class, latent_shape, static_cast<int>(programs_.size()), derive_seed(seed, 11));
        heads_.emplace_back(Task::vintage_class, latent_shape, kVintageBins, derive_seed(seed, 12));
        heads_.emplace_back(Task::height_reg, latent_shape, 1, derive_seed(seed, 13));
    }

    std::vector<TaskHead<T>>& heads() { return heads_; }
    const std::vector<TaskHead<T>>& heads() const { return heads_; }
    const ProgramLabels& programs() const { return programs_; }

    TaskHead<T>& head(Task t) {
        for (auto& h : heads_) {
            if (h.task == t) return h;
        }
        throw ConfigError("no head for task " + to_string(t));
    }

    std::vector<Task> tasks() const {
        std::vector<Task> out;
        for (const auto& h : heads_) out.push_back(h.task);
        return out;
    }

    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& h : heads_) {
            for (auto& p : h.net.parameters()) out.push_back(&p);
        }
        return out;
    }

    /// Forward + backward of every head for one sample.
    DtpBreakdown accumulate(const Array<T>& z_e, const TaskLabels& labels, const TaskWeights& weights, double scale,
                            Array<T>& dz_e) {
        std::vector<nn::Tape<T>> tapes(heads_.size());
        std::vector<Array<T>> outputs;
        for (std::size_t i = 0; i < heads_.size(); ++i) outputs.push_back(head_forward(z_e, heads_[i], &tapes[i]));
        std::vector<Array<T>> grads;
        const auto loss = dtp_loss(tasks(), outputs, labels, weights, &grads);
        for (std::size_t i = 0; i < heads_.size(); ++i) {
            for (auto& v : grads[i].data) v = static_cast<T>(scale * static_cast<double>(v));
            const auto dz = heads_[i].net.backward(tapes[i], grads[i]);
            for (std::size_t j = 0; j < dz.size(); ++j) dz_e[j] += dz[j];
        }
        return loss;
    }

    void write_sections(nn::CheckpointWriter& writer) const
        requires std::is_same_v<T, float>
    {
        nlohmann::json layers = nlohmann::json::array();
        std::vector<Parameter<float>> params;
        for (const auto& h : heads_) {
            layers.push_back({{"task", to_string(h.task)}, {"output_dim", h.output_dim}, {"layers", h.net.specs_json()}});
            params.insert(params.end(), h.net.parameters().begin(), h.net.parameters().end());
        }
        writer.add_section("heads", layers, params);
    }

    void read_sections(const io::BlobFile& file)
        requires std::is_same_v<T, float>
    {
        std::vector<Parameter<float>> params;
        for (auto& h : heads_) params.insert(params.end(), h.net.parameters().begin(), h.net.parameters().end());
        nn::load_section(nn::find_section(file.header, "heads"), file.blob, params);
        std::size_t i = 0;
        for (auto& h : heads_) {
            for (auto& p : h.net.parameters()) p.value = params[i++].value;
        }
    }

private:
    ProgramLabels programs_;
    std::vector<TaskHead<T>> heads_;
};

/// Exactly one epoch of joint optimisation of the autoencoder objective plus
/// the weighted task losses. Uses the same shuffling and reseeding stream as
/// the first pre-training epoch under `cfg.seed`.
template <class T>
vq::EpochLoss finetune(vq::VqAutoencoder<T>& model, TaskPool<T>& pool, const std::vector<Array<T>>& images,
                       const std::vector<TaskLabels>& labels, const TaskWeights& weights, const vq::TrainConfig& cfg) {
    if (images.size() != labels.size()) throw DimensionError("one label set is required per image");
    if (images.empty()) throw ParameterError("finetune requires a non-empty dataset");
    nn::Adam<T> optimizer({cfg.learning_rate});
    auto params = model.parameters();
    for (auto* p : pool.parameters()) params.push_back(p);
    vq::LatentObjective<T> objective = [&](const Array<T>& z_e, std::size_t sample, double scale, Array<T>& dz_e) {
        return pool.accumulate(z_e, labels[sample], weights, scale, dz_e).total;
    };
    return vq::run_epoch(model, images, cfg, 0, optimizer, params, objective);
}

// ---------------------------------------------------------------------------
// Linear probe

struct ProbeResult {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

/// Ridge-regularised one-vs-rest least-squares classifier on standardised
/// features, fitted on a seeded split and scored on the held-out part.
inline ProbeResult linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels, int classes,
                                double test_fraction, std::uint64_t seed, double ridge = 1.0) {
    const auto n = static_cast<std::size_t>(features.rows());
    if (n != labels.size() || n < 2) throw DimensionError("probe needs one label per feature row and at least 2 rows");
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(order);
    const auto n_test = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(test_fraction * n)), 1, n - 1);
    const auto n_train = n - n_test;

    const auto d = features.cols();
    Eigen::MatrixXd train(n_train, d + 1), test(n_test, d + 1);
    Eigen::MatrixXd targets = Eigen::MatrixXd::Zero(n_train, classes);
    for (std::size_t i = 0; i < n_train; ++i) {
        train.row(i).head(d) = features.row(order[i]);
        targets(i, labels[order[i]]) = 1.0;
    }
    for (std::size_t i = 0; i < n_test; ++i) test.row(i).head(d) = features.row(order[n_train + i]);
    const Eigen::RowVectorXd mean = train.leftCols(d).colwise().mean();
    Eigen::RowVectorXd sd = ((train.leftCols(d).rowwise() - mean).array().square().colwise().sum() /
                             static_cast<double>(n_train)).sqrt();
    for (Eigen::Index j = 0; j < d; ++j) {
        if (sd(j) < 1e-12) sd(j) = 1.0;
    }
    train.leftCols(d) = (train.leftCols(d).rowwise() - mean).array().rowwise() / sd.array();
    test.leftCols(d) = (test.leftCols(d).rowwise() - mean).array().rowwise() / sd.array();
    train.col(d).setOnes();
    test.col(d).setOnes();

    Eigen::MatrixXd gram = train.transpose() * train;
    gram.diagonal().head(d).array() += ridge;
    const Eigen::MatrixXd w = gram.ldlt().solve(train.transpose() * targets);

    auto score = [&](const Eigen::MatrixXd& x, std::size_t offset) {
        const Eigen::MatrixXd pred = x * w;
        std::size_t hit = 0;
        for (Eigen::Index i = 0; i < pred.rows(); ++i) {
            Eigen::Index best = 0;
            pred.row(i).maxCoeff(&best);
            if (best == labels[order[offset + static_cast<std::size_t>(i)]]) ++hit;
        }
        return static_cast<double>(hit) / static_cast<double>(pred.rows());
    };
    return {score(train, 0), score(test, n_train)};
}

} // namespace marl::tasks
