#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "marl/error.hpp"
#include "marl/rng.hpp"

namespace marl::nn {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        s += (i ? ", " : "") + std::to_string(shape[i]);
    }
    return s + ")";
}

// Vectorized Eigen kernels pick their summation order from the start
// address, so every buffer they touch is kept aligned.
template <class T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense row-major array. Spatial tensors use (height, width, channels).
template <class T>
struct Array {
    Shape shape;
    Buffer<T> data;

    Array() = default;
    explicit Array(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Array(Shape s, std::initializer_list<T> values) : Array(std::move(s), Buffer<T>(values)) {}
    Array(Shape s, const std::vector<T>& values) : Array(std::move(s), Buffer<T>(values.begin(), values.end())) {}
    Array(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw DimensionError("array data length " + std::to_string(data.size()) + " does not match shape " +
                                 shape_string(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <class U>
    Array<U> cast() const {
        return Array<U>(shape, Buffer<U>(data.begin(), data.end()));
    }

    friend bool operator==(const Array&, const Array&) = default;
};

template <class T>
struct Parameter {
    std::string name;
    Array<T> value;
    Array<T> grad;

    Parameter() = default;
    Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

    void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

enum class LayerKind { conv2d, transposed_upsample2d, residual_block, linear, relu, sigmoid };

inline std::string to_string(LayerKind k) {
    switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::transposed_upsample2d: return "transposed_upsample2d";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    }
    return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
    for (auto k : {LayerKind::conv2d, LayerKind::transposed_upsample2d, LayerKind::residual_block, LayerKind::linear,
                   LayerKind::relu, LayerKind::sigmoid}) {
        if (to_string(k) == s) return k;
    }
    throw ConfigError("unknown layer kind '" + s + "'");
}

/// One layer of a fixed feed-forward stack.
///
/// conv2d: `kernel`x`kernel` convolution with `stride`; padding keeps
///   side / stride output sizes for even inputs.
/// transposed_upsample2d: nearest-neighbour 2x upsampling followed by a
///   stride-1 convolution.
/// residual_block: x + conv(relu(conv(x))), channel count preserved.
/// linear: flattens its input; `in_channels`/`out_channels` are features.
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    std::string name;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;
    int stride = 1;

    static LayerSpec conv(std::string name, int cin, int cout, int kernel, int stride) {
        return {LayerKind::conv2d, std::move(name), cin, cout, kernel, stride};
    }
    static LayerSpec upsample(std::string name, int cin, int cout, int kernel = 3) {
        return {LayerKind::transposed_upsample2d, std::move(name), cin, cout, kernel, 1};
    }
    static LayerSpec residual(std::string name, int channels, int kernel = 3) {
        return {LayerKind::residual_block, std::move(name), channels, channels, kernel, 1};
    }
    static LayerSpec linear(std::string name, int in_features, int out_features) {
        return {LayerKind::linear, std::move(name), in_features, out_features, 1, 1};
    }
    static LayerSpec relu(std::string name) { return {LayerKind::relu, std::move(name)}; }
    static LayerSpec sigmoid(std::string name) { return {LayerKind::sigmoid, std::move(name)}; }

    int padding() const { return stride == 1 ? (kernel - 1) / 2 : (kernel - stride + 1) / 2; }

    bool convolutional() const {
        return kind == LayerKind::conv2d || kind == LayerKind::transposed_upsample2d ||
               kind == LayerKind::residual_block;
    }

    void validate() const {
        auto fail = [&](const std::string& why) { throw ConfigError("layer '" + name + "': " + why); };
        if (stride != 1 && stride != 2) fail("stride must be 1 or 2");
        if (convolutional()) {
            if (kernel < 1) fail("kernel must be positive");
            if (stride == 1 && kernel % 2 == 0) fail("stride-1 kernels must be odd");
            if (in_channels < 1 || out_channels < 1) fail("channel counts must be positive");
        }
        if (kind == LayerKind::linear && (in_channels < 1 || out_channels < 1)) fail("feature counts must be positive");
    }

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)}, {"name", name},     {"in", in_channels},
                {"out", out_channels},     {"kernel", kernel}, {"stride", stride}};
    }
    static LayerSpec from_json(const nlohmann::json& j) {
        return {layer_kind_from_string(j.at("kind").get<std::string>()), j.at("name").get<std::string>(),
                j.at("in").get<int>(), j.at("out").get<int>(), j.at("kernel").get<int>(), j.at("stride").get<int>()};
    }

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

namespace detail {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ConvGeometry {
    int h = 0, w = 0, cin = 0;
    int k = 1, stride = 1, pad = 0;
    int ho = 0, wo = 0;

    static ConvGeometry make(int h, int w, int cin, int k, int stride, int pad) {
        ConvGeometry g{h, w, cin, k, stride, pad};
        g.ho = (h + 2 * pad - k) / stride + 1;
        g.wo = (w + 2 * pad - k) / stride + 1;
        return g;
    }
    std::size_t rows() const { return static_cast<std::size_t>(ho) * wo; }
    std::size_t patch() const { return static_cast<std::size_t>(k) * k * cin; }
};

template <class T>
void im2col(const T* x, const ConvGeometry& g, Buffer<T>& cols) {
    cols.assign(g.rows() * g.patch(), T(0));
    std::size_t row = 0;
    for (int oy = 0; oy < g.ho; ++oy) {
        for (int ox = 0; ox < g.wo; ++ox, ++row) {
            T* dst = cols.data() + row * g.patch();
            for (int ky = 0; ky < g.k; ++ky) {
                const int iy = oy * g.stride - g.pad + ky;
                if (iy < 0 || iy >= g.h) continue;
                for (int kx = 0; kx < g.k; ++kx) {
                    const int ix = ox * g.stride - g.pad + kx;
                    if (ix < 0 || ix >= g.w) continue;
                    const T* src = x + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin;
                    std::copy(src, src + g.cin, dst + (static_cast<std::size_t>(ky) * g.k + kx) * g.cin);
                }
            }
        }
    }
}

template <class T>
void col2im_add(const Buffer<T>& dcols, const ConvGeometry& g, T* dx) {
    std::size_t row = 0;
    for (int oy = 0; oy < g.ho; ++oy) {
        for (int ox = 0; ox < g.wo; ++ox, ++row) {
            const T* src = dcols.data() + row * g.patch();
            for (int ky = 0; ky < g.k; ++ky) {
                const int iy = oy * g.stride - g.pad + ky;
                if (iy < 0 || iy >= g.h) continue;
                for (int kx = 0; kx < g.k; ++kx) {
                    const int ix = ox * g.stride - g.pad + kx;
                    if (ix < 0 || ix >= g.w) continue;
                    T* dst = dx + (static_cast<std::size_t>(iy) * g.w + ix) * g.cin;
                    const T* s = src + (static_cast<std::size_t>(ky) * g.k + kx) * g.cin;
                    for (int c = 0; c < g.cin; ++c) dst[c] += s[c];
                }
            }
        }
    }
}

/// y = im2col(x) * W + b. Returns y with shape (ho, wo, cout); `cols` is kept for backward.
template <class T>
Array<T> conv_forward(const Array<T>& x, const Array<T>& weight, const Array<T>& bias, int k, int stride, int pad,
                      Buffer<T>& cols) {
    const auto g = ConvGeometry::make(static_cast<int>(x.shape[0]), static_cast<int>(x.shape[1]),
                                      static_cast<int>(x.shape[2]), k, stride, pad);
    const auto cout = bias.size();
    im2col(x.data.data(), g, cols);
    Array<T> y({static_cast<std::size_t>(g.ho), static_cast<std::size_t>(g.wo), cout});
    Eigen::Map<const MatR<T>> C(cols.data(), g.rows(), g.patch());
    Eigen::Map<const MatR<T>> W(weight.data.data(), g.patch(), cout);
    Eigen::Map<const RowVec<T>> B(bias.data.data(), cout);
    Eigen::Map<MatR<T>> Y(y.data.data(), g.rows(), cout);
    Y.noalias() = C * W;
    Y.rowwise() += B;
    return y;
}

template <class T>
Array<T> conv_backward(const Array<T>& dy, const Shape& x_shape, const Buffer<T>& cols, const Array<T>& weight,
                       Array<T>& dweight, Array<T>& dbias, int k, int stride, int pad) {
    const auto g = ConvGeometry::make(static_cast<int>(x_shape[0]), static_cast<int>(x_shape[1]),
                                      static_cast<int>(x_shape[2]), k, stride, pad);
    const auto cout = dbias.size();
    Eigen::Map<const MatR<T>> C(cols.data(), g.rows(), g.patch());
    Eigen::Map<const MatR<T>> W(weight.data.data(), g.patch(), cout);
    Eigen::Map<const MatR<T>> dY(dy.data.data(), g.rows(), cout);
    Eigen::Map<MatR<T>> dW(dweight.data.data(), g.patch(), cout);
    Eigen::Map<RowVec<T>> dB(dbias.data.data(), cout);
    dW.noalias() += C.transpose() * dY;
    dB += dY.colwise().sum();
    Buffer<T> dcols(g.rows() * g.patch());
    Eigen::Map<MatR<T>> dC(dcols.data(), g.rows(), g.patch());
    dC.noalias() = dY * W.transpose();
    Array<T> dx(x_shape);
    col2im_add(dcols, g, dx.data.data());
    return dx;
}

template <class T>
Array<T> upsample2x(const Array<T>& x) {
    const auto h = x.shape[0], w = x.shape[1], c = x.shape[2];
    Array<T> y({2 * h, 2 * w, c});
    for (std::size_t r = 0; r < 2 * h; ++r) {
        for (std::size_t q = 0; q < 2 * w; ++q) {
            const T* src = x.data.data() + ((r / 2) * w + q / 2) * c;
            std::copy(src, src + c, y.data.data() + (r * 2 * w + q) * c);
        }
    }
    return y;
}

template <class T>
Array<T> upsample2x_backward(const Array<T>& dy, const Shape& x_shape) {
    const auto w = x_shape[1], c = x_shape[2];
    Array<T> dx(x_shape);
    for (std::size_t r = 0; r < dy.shape[0]; ++r) {
        for (std::size_t q = 0; q < dy.shape[1]; ++q) {
            const T* src = dy.data.data() + (r * dy.shape[1] + q) * c;
            T* dst = dx.data.data() + ((r / 2) * w + q / 2) * c;
            for (std::size_t i = 0; i < c; ++i) dst[i] += src[i];
        }
    }
    return dx;
}

} // namespace detail

/// Per-layer values recorded by a forward pass.
template <class T>
struct LayerCache {
    Array<T> input;
    Array<T> output;
    Array<T> mid;          // residual: pre-activation of the inner conv
    Buffer<T> cols;   // im2col of the (upsampled) input
    Buffer<T> cols2;  // residual: im2col of relu(mid)
};

template <class T>
struct Tape {
    const void* owner = nullptr;
    std::vector<LayerCache<T>> caches;

    bool recorded() const { return owner != nullptr; }
};

template <class T>
class Network {
public:
    Network() = default;

    /// Parameters are drawn uniformly from +-sqrt(1/fan_in), seeded per parameter.
    Network(std::vector<LayerSpec> specs, std::uint64_t seed) : specs_(std::move(specs)) {
        for (const auto& spec : specs_) {
            spec.validate();
            first_param_.push_back(params_.size());
            const auto k = static_cast<std::size_t>(spec.kernel);
            const auto cin = static_cast<std::size_t>(spec.in_channels);
            const auto cout = static_cast<std::size_t>(spec.out_channels);
            switch (spec.kind) {
            case LayerKind::conv2d:
            case LayerKind::transposed_upsample2d:
                params_.emplace_back(spec.name + ".weight", Shape{k, k, cin, cout});
                params_.emplace_back(spec.name + ".bias", Shape{cout});
                fan_in_.insert(fan_in_.end(), 2, k * k * cin);
                break;
            case LayerKind::residual_block:
                params_.emplace_back(spec.name + ".conv1.weight", Shape{k, k, cin, cin});
                params_.emplace_back(spec.name + ".conv1.bias", Shape{cin});
                params_.emplace_back(spec.name + ".conv2.weight", Shape{k, k, cin, cin});
                params_.emplace_back(spec.name + ".conv2.bias", Shape{cin});
                fan_in_.insert(fan_in_.end(), 4, k * k * cin);
                break;
            case LayerKind::linear:
                params_.emplace_back(spec.name + ".weight", Shape{cin, cout});
                params_.emplace_back(spec.name + ".bias", Shape{cout});
                fan_in_.insert(fan_in_.end(), 2, cin);
                break;
            case LayerKind::relu:
            case LayerKind::sigmoid: break;
            }
        }
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Rng rng(derive_seed(seed, i));
            const double bound = std::sqrt(1.0 / static_cast<double>(fan_in_[i]));
            for (auto& v : params_[i].value.data) v = static_cast<T>(rng.uniform(-bound, bound));
        }
    }

    const std::vector<LayerSpec>& specs() const { return specs_; }
    std::vector<Parameter<T>>& parameters() { return params_; }
    const std::vector<Parameter<T>>& parameters() const { return params_; }

    Parameter<T>& parameter(const std::string& name) {
        for (auto& p : params_) {
            if (p.name == name) return p;
        }
        throw ConfigError("no parameter named '" + name + "'");
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// Shape produced by the stack for `input`; throws DimensionError naming
    /// the first layer whose expectation is not met.
    Shape output_shape(Shape s) const {
        for (const auto& spec : specs_) s = layer_output_shape(spec, s);
        return s;
    }

    Array<T> forward(const Array<T>& x, Tape<T>* tape = nullptr) const {
        if (tape) {
            tape->owner = this;
            tape->caches.assign(specs_.size(), {});
        }
        Array<T> current = x;
        for (std::size_t i = 0; i < specs_.size(); ++i) {
            const auto& spec = specs_[i];
            layer_output_shape(spec, current.shape);
            LayerCache<T> scratch;
            auto& cache = tape ? tape->caches[i] : scratch;
            Array<T> next = layer_forward(i, current, cache);
            if (tape) {
                cache.input = std::move(current);
                if (spec.kind == LayerKind::sigmoid || spec.kind == LayerKind::relu) cache.output = next;
            }
            current = std::move(next);
        }
        return current;
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the
    /// forward input.
    Array<T> backward(const Tape<T>& tape, const Array<T>& grad_out) {
        if (tape.owner != this || tape.caches.size() != specs_.size()) {
            throw StateError("backward called without a forward pass recorded by this network");
        }
        Array<T> grad = grad_out;
        for (std::size_t i = specs_.size(); i-- > 0;) {
            grad = layer_backward(i, tape.caches[i], grad);
        }
        return grad;
    }

    template <class U>
    Network<U> cast() const {
        Network<U> out;
        out.specs_ = specs_;
        out.first_param_ = first_param_;
        out.fan_in_ = fan_in_;
        for (const auto& p : params_) {
            Parameter<U> q;
            q.name = p.name;
            q.value = p.value.template cast<U>();
            q.grad = p.grad.template cast<U>();
            out.params_.push_back(std::move(q));
        }
        return out;
    }

    nlohmann::json specs_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& s : specs_) arr.push_back(s.to_json());
        return arr;
    }

private:
    template <class>
    friend class Network;

    static Shape layer_output_shape(const LayerSpec& spec, const Shape& in) {
        auto fail = [&](const std::string& expected) {
            throw DimensionError("layer '" + spec.name + "' (" + to_string(spec.kind) + ") expected " + expected +
                                 ", got input of shape " + shape_string(in));
        };
        switch (spec.kind) {
        case LayerKind::conv2d:
        case LayerKind::transposed_upsample2d:
        case LayerKind::residual_block: {
            if (in.size() != 3 || in[2] != static_cast<std::size_t>(spec.in_channels)) {
                fail("(H, W, " + std::to_string(spec.in_channels) + ")");
            }
            if (spec.kind == LayerKind::residual_block) return in;
            const int pad = spec.padding();
            const int scale = spec.kind == LayerKind::transposed_upsample2d ? 2 : 1;
            const auto g = detail::ConvGeometry::make(static_cast<int>(in[0]) * scale, static_cast<int>(in[1]) * scale,
                                                      spec.in_channels, spec.kernel, spec.stride, pad);
            if (g.ho < 1 || g.wo < 1) fail("a spatial extent of at least the kernel size");
            return {static_cast<std::size_t>(g.ho), static_cast<std::size_t>(g.wo),
                    static_cast<std::size_t>(spec.out_channels)};
        }
        case LayerKind::linear:
            if (numel(in) != static_cast<std::size_t>(spec.in_channels)) {
                fail(std::to_string(spec.in_channels) + " features");
            }
            return {static_cast<std::size_t>(spec.out_channels)};
        case LayerKind::relu:
        case LayerKind::sigmoid: return in;
        }
        return in;
    }

    Array<T> layer_forward(std::size_t i, const Array<T>& x, LayerCache<T>& cache) const {
        const auto& spec = specs_[i];
        const auto* p = params_.data() + (i < first_param_.size() ? first_param_[i] : 0);
        const int pad = spec.padding();
        switch (spec.kind) {
        case LayerKind::conv2d:
            return detail::conv_forward(x, p[0].value, p[1].value, spec.kernel, spec.stride, pad, cache.cols);
        case LayerKind::transposed_upsample2d:
            return detail::conv_forward(detail::upsample2x(x), p[0].value, p[1].value, spec.kernel, 1, pad,
                                        cache.cols);
        case LayerKind::residual_block: {
            cache.mid = detail::conv_forward(x, p[0].value, p[1].value, spec.kernel, 1, pad, cache.cols);
            Array<T> act = cache.mid;
            for (auto& v : act.data) v = v > T(0) ? v : T(0);
            Array<T> y = detail::conv_forward(act, p[2].value, p[3].value, spec.kernel, 1, pad, cache.cols2);
            for (std::size_t j = 0; j < y.size(); ++j) y[j] += x[j];
            return y;
        }
        case LayerKind::linear: {
            Array<T> y({static_cast<std::size_t>(spec.out_channels)});
            Eigen::Map<const detail::RowVec<T>> X(x.data.data(), spec.in_channels);
            Eigen::Map<const detail::MatR<T>> W(p[0].value.data.data(), spec.in_channels, spec.out_channels);
            Eigen::Map<const detail::RowVec<T>> B(p[1].value.data.data(), spec.out_channels);
            Eigen::Map<detail::RowVec<T>> Y(y.data.data(), spec.out_channels);
            Y.noalias() = X * W;
            Y += B;
            return y;
        }
        case LayerKind::relu: {
            Array<T> y = x;
            for (auto& v : y.data) v = v > T(0) ? v : T(0);
            return y;
        }
        case LayerKind::sigmoid: {
            Array<T> y = x;
            for (auto& v : y.data) v = T(1) / (T(1) + std::exp(-v));
            return y;
        }
        }
        return x;
    }

    Array<T> layer_backward(std::size_t i, const LayerCache<T>& cache, const Array<T>& dy) {
        const auto& spec = specs_[i];
        auto* p = params_.data() + (i < first_param_.size() ? first_param_[i] : 0);
        const int pad = spec.padding();
        const auto& x = cache.input;
        switch (spec.kind) {
        case LayerKind::conv2d:
            return detail::conv_backward(dy, x.shape, cache.cols, p[0].value, p[0].grad, p[1].grad, spec.kernel,
                                         spec.stride, pad);
        case LayerKind::transposed_upsample2d: {
            const Shape up{2 * x.shape[0], 2 * x.shape[1], x.shape[2]};
            const auto dup =
                detail::conv_backward(dy, up, cache.cols, p[0].value, p[0].grad, p[1].grad, spec.kernel, 1, pad);
            return detail::upsample2x_backward(dup, x.shape);
        }
        case LayerKind::residual_block: {
            auto dact =
                detail::conv_backward(dy, x.shape, cache.cols2, p[2].value, p[2].grad, p[3].grad, spec.kernel, 1, pad);
            for (std::size_t j = 0; j < dact.size(); ++j) {
                if (!(cache.mid[j] > T(0))) dact[j] = T(0);
            }
            auto dx =
                detail::conv_backward(dact, x.shape, cache.cols, p[0].value, p[0].grad, p[1].grad, spec.kernel, 1, pad);
            for (std::size_t j = 0; j < dx.size(); ++j) dx[j] += dy[j];
            return dx;
        }
        case LayerKind::linear: {
            Eigen::Map<const detail::RowVec<T>> X(x.data.data(), spec.in_channels);
            Eigen::Map<const detail::RowVec<T>> dY(dy.data.data(), spec.out_channels);
            Eigen::Map<const detail::MatR<T>> W(p[0].value.data.data(), spec.in_channels, spec.out_channels);
            Eigen::Map<detail::MatR<T>> dW(p[0].grad.data.data(), spec.in_channels, spec.out_channels);
            Eigen::Map<detail::RowVec<T>> dB(p[1].grad.data.data(), spec.out_channels);
            dW.noalias() += X.transpose() * dY;
            dB += dY;
            Array<T> dx(x.shape);
            Eigen::Map<detail::RowVec<T>> dX(dx.data.data(), spec.in_channels);
            dX.noalias() = dY * W.transpose();
            return dx;
        }
        case LayerKind::relu: {
            Array<T> dx = dy;
            for (std::size_t j = 0; j < dx.size(); ++j) {
                if (!(x[j] > T(0))) dx[j] = T(0);
            }
            return dx;
        }
        case LayerKind::sigmoid: {
            Array<T> dx = dy;
            for (std::size_t j = 0; j < dx.size(); ++j) dx[j] *= cache.output[j] * (T(1) - cache.output[j]);
            return dx;
        }
        }
        return dy;
    }

    std::vector<LayerSpec> specs_;
    std::vector<Parameter<T>> params_;
    std::vector<std::size_t> first_param_;
    std::vector<std::size_t> fan_in_;
};

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Moment state is keyed by the position of each parameter in the list
/// passed to `step`, so callers must pass parameters in a stable order.
template <class T>
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(std::span<Parameter<T>* const> params) {
        for (const auto* p : params) {
            for (const auto g : p->grad.data) {
                if (!std::isfinite(g)) throw TrainingDiverged("non-finite gradient in parameter '" + p->name + "'");
            }
        }
        if (m_.empty()) {
            for (const auto* p : params) {
                m_.emplace_back(p->value.size(), 0.0);
                v_.emplace_back(p->value.size(), 0.0);
            }
        }
        if (m_.size() != params.size()) {
            throw StateError("Adam step called with a different parameter list");
        }
        ++t_;
        const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& value = params[i]->value.data;
            const auto& grad = params[i]->grad.data;
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < value.size(); ++j) {
                const double g = grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double update = cfg_.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.epsilon);
                value[j] = static_cast<T>(value[j] - update);
            }
        }
    }

    std::size_t steps() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// ---------------------------------------------------------------------------
// Checkpoint sections

/// Serialises named groups of parameters as JSON metadata plus a float blob
/// in declaration order.
struct CheckpointWriter {
    nlohmann::json sections = nlohmann::json::array();
    std::vector<float> blob;

    void add_section(const std::string& name, nlohmann::json layers, std::span<const Parameter<float>> params) {
        auto entries = nlohmann::json::array();
        for (const auto& p : params) {
            entries.push_back({{"name", p.name}, {"shape", p.value.shape}, {"offset", blob.size()}});
            blob.insert(blob.end(), p.value.data.begin(), p.value.data.end());
        }
        sections.push_back({{"name", name}, {"layers", std::move(layers)}, {"parameters", entries}});
    }
};

inline const nlohmann::json& find_section(const nlohmann::json& header, const std::string& name) {
    for (const auto& s : header.at("sections")) {
        if (s.at("name") == name) return s;
    }
    throw ConfigError("checkpoint has no section '" + name + "'");
}

/// Copies parameter values of `section` into `params`, matching by name and shape.
inline void load_section(const nlohmann::json& section, std::span<const float> blob, std::span<Parameter<float>> params) {
    const auto& entries = section.at("parameters");
    if (entries.size() != params.size()) {
        throw ConfigError("checkpoint section '" + section.at("name").get<std::string>() + "' has " +
                          std::to_string(entries.size()) + " parameters, model expects " +
                          std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& e = entries[i];
        const auto shape = e.at("shape").get<Shape>();
        if (e.at("name") != params[i].name || shape != params[i].value.shape) {
            throw ConfigError("checkpoint parameter '" + e.at("name").get<std::string>() + "' does not match '" +
                              params[i].name + "'");
        }
        const auto offset = e.at("offset").get<std::size_t>();
        if (offset + numel(shape) > blob.size()) throw IoError("checkpoint blob truncated");
        std::copy_n(blob.begin() + static_cast<std::ptrdiff_t>(offset), numel(shape), params[i].value.data.begin());
    }
}

} // namespace marl::nn
