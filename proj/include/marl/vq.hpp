#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marl/error.hpp"
#include "marl/ingest.hpp"
#include "marl/io.hpp"
#include "marl/nn.hpp"
#include "marl/rng.hpp"

namespace marl::vq {

using nn::Array;
using nn::Parameter;
using nn::Shape;

inline constexpr std::string_view kCheckpointMagic = "MARLCKP1";

struct ModelConfig {
    int side_px = 112;
    int codebook_size = 512;
    int latent_dim = 32;
    int encoder_hidden1 = 32;
    int encoder_hidden2 = 64;
    double beta = 0.25;
    std::uint64_t seed = 0;

    int latent_side() const { return side_px / 4; }

    nlohmann::json to_json() const {
        return {{"side_px", side_px},
                {"codebook_size", codebook_size},
                {"latent_dim", latent_dim},
                {"encoder_hidden1", encoder_hidden1},
                {"encoder_hidden2", encoder_hidden2},
                {"beta", beta},
                {"seed", seed}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.side_px = j.at("side_px").get<int>();
        c.codebook_size = j.at("codebook_size").get<int>();
        c.latent_dim = j.at("latent_dim").get<int>();
        c.encoder_hidden1 = j.at("encoder_hidden1").get<int>();
        c.encoder_hidden2 = j.at("encoder_hidden2").get<int>();
        c.beta = j.at("beta").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
        return c;
    }
};

/// conv(4, s2) -> conv(4, s2) -> conv(3, s1) -> residual; side / 4 output.
inline std::vector<nn::LayerSpec> encoder_specs(const ModelConfig& c) {
    using nn::LayerSpec;
    return {LayerSpec::conv("enc.conv1", 3, c.encoder_hidden1, 4, 2),
            LayerSpec::relu("enc.relu1"),
            LayerSpec::conv("enc.conv2", c.encoder_hidden1, c.encoder_hidden2, 4, 2),
            LayerSpec::relu("enc.relu2"),
            LayerSpec::conv("enc.conv3", c.encoder_hidden2, c.latent_dim, 3, 1),
            LayerSpec::residual("enc.res", c.latent_dim)};
}

/// residual -> up(2x) -> up(2x) -> conv(3, s1) -> sigmoid.
inline std::vector<nn::LayerSpec> decoder_specs(const ModelConfig& c) {
    using nn::LayerSpec;
    return {LayerSpec::residual("dec.res", c.latent_dim),
            LayerSpec::upsample("dec.up1", c.latent_dim, c.encoder_hidden2),
            LayerSpec::relu("dec.relu1"),
            LayerSpec::upsample("dec.up2", c.encoder_hidden2, c.encoder_hidden1),
            LayerSpec::relu("dec.relu2"),
            LayerSpec::conv("dec.up3", c.encoder_hidden1, 3, 3, 1),
            LayerSpec::sigmoid("dec.out")};
}

template <class T = float>
struct Codebook {
    Parameter<T> entries; // (K, D)
    std::vector<std::uint64_t> usage_counts;

    Codebook() = default;
    Codebook(int size, int dim, std::uint64_t seed) : entries("codebook", Shape{std::size_t(size), std::size_t(dim)}) {
        if (size < 2 || dim < 1) throw ConfigError("codebook needs K >= 2 and D >= 1");
        usage_counts.assign(size, 0);
        Rng rng(seed);
        const double bound = 1.0 / size;
        for (auto& v : entries.value.data) v = static_cast<T>(rng.uniform(-bound, bound));
    }

    std::size_t size() const { return entries.value.shape.empty() ? 0 : entries.value.shape[0]; }
    std::size_t dim() const { return entries.value.shape.size() < 2 ? 0 : entries.value.shape[1]; }
    const T* entry(std::size_t k) const { return entries.value.data.data() + k * dim(); }
};

template <class T = float>
struct LatentCode {
    Array<T> z_e;                     // (H, W, D)
    Array<T> z_q;                     // (H, W, D)
    std::vector<std::uint32_t> indices; // row-major (H, W)
    double codebook_loss = 0.0;
    double commitment_loss = 0.0;

    std::size_t sites() const { return indices.size(); }
};

template <class T>
double squared_distance(const T* a, const T* b, std::size_t d) {
    double acc = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double diff = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        acc += diff * diff;
    }
    return acc;
}

/// Nearest-entry quantization; ties go to the lowest index. Both losses are
/// the mean over sites of the squared L2 distance between a site and its
/// selected entry (they differ only in which side receives gradient).
template <class T>
LatentCode<T> quantize(const Array<T>& z_e, const Codebook<T>& codebook) {
    const auto k_count = codebook.size();
    if (k_count == 0) throw ConfigError("cannot quantize with an empty codebook");
    const auto d = codebook.dim();
    if (z_e.shape.empty() || z_e.shape.back() != d) {
        throw DimensionError("latent depth " + (z_e.shape.empty() ? std::string("?") : std::to_string(z_e.shape.back())) +
                             " does not match codebook dimension " + std::to_string(d));
    }
    LatentCode<T> code;
    code.z_e = z_e;
    code.z_q = Array<T>(z_e.shape);
    const auto sites = z_e.size() / d;
    code.indices.resize(sites);
    double total = 0.0;
    for (std::size_t s = 0; s < sites; ++s) {
        const T* z = z_e.data.data() + s * d;
        std::size_t best = 0;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < k_count; ++k) {
            const double dist = squared_distance(z, codebook.entry(k), d);
            if (dist < best_dist) {
                best_dist = dist;
                best = k;
            }
        }
        code.indices[s] = static_cast<std::uint32_t>(best);
        std::copy_n(codebook.entry(best), d, code.z_q.data.data() + s * d);
        total += best_dist;
    }
    code.codebook_loss = sites ? total / static_cast<double>(sites) : 0.0;
    code.commitment_loss = code.codebook_loss;
    return code;
}

/// Backward pass of the quantizer.
///
/// Returns d(loss)/d(z_e) = dz_q (straight-through) + beta * d(commitment)/d(z_e)
/// and accumulates codebook_weight * d(codebook loss)/d(entries) into the
/// codebook gradient. The stop-gradient placement means the codebook term
/// never reaches z_e and the commitment term never reaches the entries.
template <class T>
Array<T> quantize_backward(const LatentCode<T>& code, const Array<T>& dz_q, Codebook<T>& codebook, double beta,
                           double codebook_weight = 1.0) {
    const auto d = codebook.dim();
    const auto sites = code.sites();
    Array<T> dz_e = dz_q;
    const double scale = sites ? 2.0 / static_cast<double>(sites) : 0.0;
    auto& grad = codebook.entries.grad.data;
    for (std::size_t s = 0; s < sites; ++s) {
        const auto k = code.indices[s];
        for (std::size_t i = 0; i < d; ++i) {
            const double diff = static_cast<double>(code.z_e[s * d + i]) - static_cast<double>(code.z_q[s * d + i]);
            dz_e[s * d + i] += static_cast<T>(beta * scale * diff);
            grad[k * d + i] += static_cast<T>(-codebook_weight * scale * diff);
        }
    }
    return dz_e;
}

/// Mean squared error over every pixel and channel.
template <class T>
double reconstruction_loss(const Array<T>& x, const Array<T>& x_hat) {
    if (x.shape != x_hat.shape) {
        throw DimensionError("reconstruction shapes differ: " + nn::shape_string(x.shape) + " vs " +
                             nn::shape_string(x_hat.shape));
    }
    if (x.size() == 0) return 0.0;
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double diff = static_cast<double>(x_hat[i]) - static_cast<double>(x[i]);
        acc += diff * diff;
    }
    return acc / static_cast<double>(x.size());
}

template <class T>
Array<T> reconstruction_loss_grad(const Array<T>& x, const Array<T>& x_hat, double scale = 1.0) {
    Array<T> g(x.shape);
    const double factor = 2.0 * scale / static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        g[i] = static_cast<T>(factor * (static_cast<double>(x_hat[i]) - static_cast<double>(x[i])));
    }
    return g;
}

template <class T = float>
Array<T> image_array(const MultiScaleImage& image) {
    const auto side = static_cast<std::size_t>(image.side_px);
    const auto hwc = image.hwc();
    return Array<T>({side, side, 3}, std::vector<T>(hwc.begin(), hwc.end()));
}

template <class T = float>
class VqAutoencoder {
public:
    VqAutoencoder() = default;

    explicit VqAutoencoder(const ModelConfig& cfg)
        : cfg_(cfg),
          encoder_(encoder_specs(cfg), derive_seed(cfg.seed, 1)),
          decoder_(decoder_specs(cfg), derive_seed(cfg.seed, 2)),
          codebook_(cfg.codebook_size, cfg.latent_dim, derive_seed(cfg.seed, 3)) {
        if (cfg.side_px <= 0 || cfg.side_px % 4 != 0) throw ConfigError("side_px must be a positive multiple of 4");
    }

    const ModelConfig& config() const { return cfg_; }
    nn::Network<T>& encoder() { return encoder_; }
    const nn::Network<T>& encoder() const { return encoder_; }
    nn::Network<T>& decoder() { return decoder_; }
    const nn::Network<T>& decoder() const { return decoder_; }
    Codebook<T>& codebook() { return codebook_; }
    const Codebook<T>& codebook() const { return codebook_; }

    Shape image_shape() const { return {std::size_t(cfg_.side_px), std::size_t(cfg_.side_px), 3}; }
    Shape latent_shape() const {
        return {std::size_t(cfg_.latent_side()), std::size_t(cfg_.latent_side()), std::size_t(cfg_.latent_dim)};
    }

    Array<T> encode(const Array<T>& image, nn::Tape<T>* tape = nullptr) const {
        if (image.shape != image_shape()) {
            throw DimensionError("encoder expects an image of shape " + nn::shape_string(image_shape()) + ", got " +
                                 nn::shape_string(image.shape));
        }
        return encoder_.forward(image, tape);
    }

    Array<T> encode(const MultiScaleImage& image) const { return encode(image_array<T>(image)); }

    LatentCode<T> quantize(const Array<T>& z_e) const { return vq::quantize(z_e, codebook_); }

    Array<T> decode(const Array<T>& z_q, nn::Tape<T>* tape = nullptr) const {
        if (z_q.shape != latent_shape()) {
            throw DimensionError("decoder expects a latent of shape " + nn::shape_string(latent_shape()) + ", got " +
                                 nn::shape_string(z_q.shape));
        }
        return decoder_.forward(z_q, tape);
    }

    /// Encoder, codebook, decoder, in that order.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& p : encoder_.parameters()) out.push_back(&p);
        out.push_back(&codebook_.entries);
        for (auto& p : decoder_.parameters()) out.push_back(&p);
        return out;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->zero_grad();
    }

    void write_sections(nn::CheckpointWriter& writer) const
        requires std::is_same_v<T, float>
    {
        writer.add_section("encoder", encoder_.specs_json(), encoder_.parameters());
        writer.add_section("codebook", nlohmann::json::array(), std::span(&codebook_.entries, 1));
        writer.add_section("decoder", decoder_.specs_json(), decoder_.parameters());
    }

    void read_sections(const io::BlobFile& file)
        requires std::is_same_v<T, float>
    {
        nn::load_section(nn::find_section(file.header, "encoder"), file.blob, encoder_.parameters());
        nn::load_section(nn::find_section(file.header, "codebook"), file.blob, std::span(&codebook_.entries, 1));
        nn::load_section(nn::find_section(file.header, "decoder"), file.blob, decoder_.parameters());
        const auto& usage = file.header.at("codebook_usage");
        codebook_.usage_counts = usage.get<std::vector<std::uint64_t>>();
    }

    nlohmann::json header_json() const {
        return {{"format", "marl-checkpoint"},
                {"version", 1},
                {"model", cfg_.to_json()},
                {"codebook_usage", codebook_.usage_counts}};
    }

private:
    ModelConfig cfg_;
    nn::Network<T> encoder_;
    nn::Network<T> decoder_;
    Codebook<T> codebook_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int epochs = 30;
    int batch_size = 8;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool reseed_dead_codes = true;
};

struct EpochLoss {
    int epoch = 0;
    double reconstruction = 0.0;
    double codebook = 0.0;
    double commitment = 0.0;
    double dtp_total = 0.0;
    double total = 0.0;

    friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

using LossHistory = std::vector<EpochLoss>;

inline std::string loss_history_csv(const LossHistory& history) {
    std::string out = "epoch,reconstruction,codebook,commitment,dtp_total,total\n";
    char buf[256];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.reconstruction, e.codebook,
                      e.commitment, e.dtp_total, e.total);
        out += buf;
    }
    return out;
}

/// Extra objective evaluated on z_e for one sample. Returns the weighted
/// loss contribution and accumulates `scale` times its gradient into `dz_e`
/// (and into its own parameters).
template <class T>
using LatentObjective = std::function<double(const Array<T>& z_e, std::size_t sample, double scale, Array<T>& dz_e)>;

/// One pass over `images` in a seeded shuffled order. Shared by pre-training
/// and fine-tuning so that both follow the same trajectory when the extra
/// objective contributes nothing.
template <class T>
EpochLoss run_epoch(VqAutoencoder<T>& model, const std::vector<Array<T>>& images, const TrainConfig& cfg, int epoch,
                    nn::Adam<T>& optimizer, const std::vector<Parameter<T>*>& params,
                    const LatentObjective<T>& objective = {}) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(images.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);

    auto& codebook = model.codebook();
    const auto d = codebook.dim();
    std::vector<std::uint64_t> usage(codebook.size(), 0);
    std::vector<std::vector<T>> reservoir;
    reservoir.reserve(images.size());

    EpochLoss sum;
    sum.epoch = epoch;
    const auto batch = static_cast<std::size_t>(std::max(1, cfg.batch_size));
    for (std::size_t start = 0; start < order.size(); start += batch) {
        const auto stop = std::min(order.size(), start + batch);
        const double scale = 1.0 / static_cast<double>(stop - start);
        for (auto* p : params) p->zero_grad();
        for (std::size_t b = start; b < stop; ++b) {
            const auto sample = order[b];
            const auto& x = images[sample];
            nn::Tape<T> enc_tape, dec_tape;
            const auto z_e = model.encode(x, &enc_tape);
            const auto code = model.quantize(z_e);
            const auto x_hat = model.decode(code.z_q, &dec_tape);

            const double recon = reconstruction_loss(x, x_hat);
            const auto dz_q = model.decoder().backward(dec_tape, reconstruction_loss_grad(x, x_hat, scale));
            auto dz_e = quantize_backward(code, dz_q, codebook, model.config().beta * scale, scale);
            double extra = 0.0;
            if (objective) extra = objective(z_e, sample, scale, dz_e);
            model.encoder().backward(enc_tape, dz_e);

            const double total = recon + code.codebook_loss + model.config().beta * code.commitment_loss + extra;
            if (!std::isfinite(total)) {
                throw TrainingDiverged("loss became non-finite in epoch " + std::to_string(epoch));
            }
            sum.reconstruction += recon;
            sum.codebook += code.codebook_loss;
            sum.commitment += code.commitment_loss;
            sum.dtp_total += extra;
            sum.total += total;

            for (auto k : code.indices) ++usage[k];
            const auto site = rng.index(code.sites());
            reservoir.emplace_back(z_e.data.begin() + static_cast<std::ptrdiff_t>(site * d),
                                   z_e.data.begin() + static_cast<std::ptrdiff_t>((site + 1) * d));
        }
        try {
            optimizer.step(params);
        } catch (const TrainingDiverged& e) {
            throw TrainingDiverged(std::string(e.what()) + " in epoch " + std::to_string(epoch));
        }
    }

    for (std::size_t k = 0; k < usage.size(); ++k) codebook.usage_counts[k] += usage[k];
    if (cfg.reseed_dead_codes && !reservoir.empty()) {
        for (std::size_t k = 0; k < usage.size(); ++k) {
            if (usage[k] != 0) continue;
            const auto& v = reservoir[rng.index(reservoir.size())];
            std::copy(v.begin(), v.end(), codebook.entries.value.data.begin() + static_cast<std::ptrdiff_t>(k * d));
        }
    }

    const auto n = static_cast<double>(std::max<std::size_t>(1, images.size()));
    sum.reconstruction /= n;
    sum.codebook /= n;
    sum.commitment /= n;
    sum.dtp_total /= n;
    sum.total /= n;
    return sum;
}

/// Reconstruction pre-training: minimises reconstruction + codebook +
/// beta * commitment with Adam.
template <class T>
LossHistory pretrain(VqAutoencoder<T>& model, const std::vector<Array<T>>& images, const TrainConfig& cfg) {
    if (images.empty()) throw ParameterError("pretrain requires a non-empty dataset");
    LossHistory history;
    nn::Adam<T> optimizer({cfg.learning_rate});
    const auto params = model.parameters();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        history.push_back(run_epoch(model, images, cfg, epoch, optimizer, params));
    }
    return history;
}

template <class T = float>
std::vector<Array<T>> build_images(const std::vector<FootprintRecord>& records, const PreprocessConfig& pre) {
    std::vector<Array<T>> images;
    images.reserve(records.size());
    for (const auto& r : records) images.push_back(image_array<T>(preprocess(r, pre)));
    return images;
}

} // namespace marl::vq
