#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffmorph/conv.hpp"
#include "diffmorph/losses.hpp"
#include "diffmorph/ops.hpp"
#include "diffmorph/tensor.hpp"
#include "diffmorph/warp.hpp"

namespace diffmorph {

class ModelMismatch : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Network hyperparameters. Recorded in checkpoints so inference rebuilds the
/// same graph.
struct ArchConfig {
    std::vector<int> score_channels{16, 32, 64, 128};
    std::vector<int> deform_channels{16, 32, 32, 32};
    int embed_dim = 64;
    bool attention = true;
    int groups = 8;
    int image_channels = 1;

    int spatial_dims() const { return 2; }
    int time_dim() const { return 4 * score_channels.front(); }

    void validate() const {
        if (score_channels.empty() || deform_channels.empty()) throw std::invalid_argument("empty channel ladder");
        if (embed_dim < 2 || embed_dim % 2 != 0) throw std::invalid_argument("embed_dim must be even and >= 2");
        if (groups < 1) throw std::invalid_argument("groups must be >= 1");
        if (image_channels < 1) throw std::invalid_argument("image_channels must be >= 1");
        for (int c : score_channels) {
            if (c < 1 || c % groups != 0) {
                throw std::invalid_argument("score channel count " + std::to_string(c) + " not divisible by " +
                                            std::to_string(groups) + " groups");
            }
        }
        for (int c : deform_channels) {
            if (c < 1) throw std::invalid_argument("deform channel counts must be positive");
        }
    }

    /// Smallest spatial extent multiple both networks accept.
    std::size_t size_multiple() const {
        const std::size_t depth = std::max(score_channels.size(), deform_channels.size());
        return std::size_t{1} << (depth - 1);
    }

    bool operator==(const ArchConfig&) const = default;
};

/// Named parameter collection in registration order.
template <class T>
class ParamStore {
public:
    BasicTensor<T>& add(const std::string& name, BasicTensor<T> tensor) {
        for (const auto& [n, t] : entries_) {
            if (n == name) throw std::logic_error("duplicate parameter name " + name);
        }
        tensor.set_requires_grad(true);
        entries_.emplace_back(name, std::move(tensor));
        return entries_.back().second;
    }

    const std::vector<std::pair<std::string, BasicTensor<T>>>& entries() const { return entries_; }
    std::vector<std::pair<std::string, BasicTensor<T>>>& entries() { return entries_; }

    BasicTensor<T>* find(const std::string& name) {
        for (auto& [n, t] : entries_) {
            if (n == name) return &t;
        }
        return nullptr;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.second.numel();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.second.zero_grad();
    }

private:
    std::vector<std::pair<std::string, BasicTensor<T>>> entries_;
};

namespace nn {

template <class T>
class Builder {
public:
    Builder(ParamStore<T>& store, std::mt19937_64& rng, std::string prefix)
        : store_(store), rng_(rng), prefix_(std::move(prefix)) {}

    Builder scope(const std::string& name) const { return Builder(store_, rng_, prefix_ + name + "."); }

    // Truncated normal (2 sigma) with fan-in scaling sqrt(2 / fan_in).
    BasicTensor<T> weight(const std::string& name, Shape shape, std::size_t fan_in) {
        const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::normal_distribution<double> dist(0.0, 1.0);
        std::vector<T> data(shape_numel(shape));
        for (auto& v : data) {
            double z;
            do {
                z = dist(rng_);
            } while (std::abs(z) > 2.0);
            v = static_cast<T>(z * stddev);
        }
        return store_.add(prefix_ + name, BasicTensor<T>(std::move(shape), std::move(data)));
    }

    BasicTensor<T> constant(const std::string& name, Shape shape, T value) {
        return store_.add(prefix_ + name, BasicTensor<T>(std::move(shape), value));
    }

private:
    ParamStore<T>& store_;
    std::mt19937_64& rng_;
    std::string prefix_;
};

template <class T>
struct Conv {
    BasicTensor<T> w, b;
    std::size_t stride = 1, pad = 1;

    Conv() = default;
    Conv(Builder<T> bld, std::size_t in, std::size_t out, std::size_t k = 3, std::size_t s = 1, bool zero = false)
        : stride(s), pad(k / 2) {
        w = zero ? bld.constant("w", {out, in, k, k}, T(0)) : bld.weight("w", {out, in, k, k}, in * k * k);
        b = bld.constant("b", {out}, T(0));
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class T>
struct UpConv {
    BasicTensor<T> w, b;

    UpConv() = default;
    UpConv(Builder<T> bld, std::size_t in, std::size_t out) {
        w = bld.weight("w", {in, out, 3, 3}, in * 9);
        b = bld.constant("b", {out}, T(0));
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return transposed_conv2d(x, w, b, 2, 1); }
};

template <class T>
struct Linear {
    BasicTensor<T> w, b;

    Linear() = default;
    Linear(Builder<T> bld, std::size_t in, std::size_t out) {
        w = bld.weight("w", {in, out}, in);
        b = bld.constant("b", {out}, T(0));
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return add_channel_bias(matmul(x, w), b); }
};

template <class T>
struct GroupNorm {
    BasicTensor<T> gamma, beta;
    std::size_t groups = 1;

    GroupNorm() = default;
    GroupNorm(Builder<T> bld, std::size_t channels, std::size_t g) : groups(std::min(g, channels)) {
        while (channels % groups != 0) --groups;
        gamma = bld.constant("gamma", {channels}, T(1));
        beta = bld.constant("beta", {channels}, T(0));
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x) const { return group_norm(x, groups, gamma, beta); }
};

/// Residual block: GN -> swish -> conv, plus projected time embedding, then
/// GN -> swish -> conv, with a 1x1 shortcut when channel counts differ.
template <class T>
struct ResBlock {
    GroupNorm<T> norm1;
    Conv<T> conv1;
    Linear<T> time_proj;
    GroupNorm<T> norm2;
    Conv<T> conv2;
    std::optional<Conv<T>> shortcut;

    ResBlock() = default;
    ResBlock(Builder<T> bld, std::size_t in, std::size_t out, std::size_t time_dim, std::size_t groups)
        : norm1(bld.scope("norm1"), in, groups),
          conv1(bld.scope("conv1"), in, out),
          time_proj(bld.scope("time"), time_dim, out),
          norm2(bld.scope("norm2"), out, groups),
          conv2(bld.scope("conv2"), out, out) {
        if (in != out) shortcut.emplace(bld.scope("shortcut"), in, out, 1);
    }

    BasicTensor<T> operator()(const BasicTensor<T>& x, const BasicTensor<T>& temb) const {
        auto h = conv1(swish(norm1(x)));
        h = add_channel_bias(h, time_proj(swish(temb)));
        h = conv2(swish(norm2(h)));
        return add(shortcut ? (*shortcut)(x) : x, h);
    }
};

/// Single-head scaled dot-product self-attention over spatial positions.
template <class T>
struct SelfAttention {
    GroupNorm<T> norm;
    Conv<T> q, k, v, proj;
    std::size_t channels = 0;

    SelfAttention() = default;
    SelfAttention(Builder<T> bld, std::size_t c, std::size_t groups)
        : norm(bld.scope("norm"), c, groups),
          q(bld.scope("q"), c, c, 1),
          k(bld.scope("k"), c, c, 1),
          v(bld.scope("v"), c, c, 1),
          proj(bld.scope("proj"), c, c, 1),
          channels(c) {}

    BasicTensor<T> operator()(const BasicTensor<T>& x) const {
        const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3), N = H * W;
        auto h = norm(x);
        auto qs = q(h), ks = k(h), vs = v(h);
        const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(C)));
        std::vector<BasicTensor<T>> outs;
        for (std::size_t b = 0; b < B; ++b) {
            auto qb = reshape(narrow(qs, 0, b, 1), {C, N});
            auto kb = reshape(narrow(ks, 0, b, 1), {C, N});
            auto vb = reshape(narrow(vs, 0, b, 1), {C, N});
            auto attn = softmax(scale(matmul(transpose(qb), kb), inv));  // [N, N]
            auto ob = matmul(vb, transpose(attn));                         // [C, N]
            outs.push_back(reshape(ob, {1, C, H, W}));
        }
        auto o = B == 1 ? outs.front() : concat(outs, 0);
        return add(x, proj(o));
    }
};

}  // namespace nn

/// Sinusoidal position code of the time index, [B, dim].
template <class T>
BasicTensor<T> sinusoidal_embedding(const std::vector<int>& t, std::size_t dim) {
    const std::size_t half = dim / 2;
    std::vector<T> data(t.size() * dim);
    const double scale = half > 1 ? std::log(10000.0) / static_cast<double>(half - 1) : 0.0;
    for (std::size_t b = 0; b < t.size(); ++b) {
        for (std::size_t i = 0; i < half; ++i) {
            const double arg = static_cast<double>(t[b]) * std::exp(-scale * static_cast<double>(i));
            data[b * dim + i] = static_cast<T>(std::sin(arg));
            data[b * dim + half + i] = static_cast<T>(std::cos(arg));
        }
    }
    return BasicTensor<T>({t.size(), dim}, std::move(data));
}

/// Conditional noise predictor G(c, x_t, t): U-Net over concat(m, f, x_t)
/// with time-conditioned residual blocks, stride-2 downsampling, nearest x2
/// upsampling, skip connections at every level and bottleneck attention.
template <class T>
class ScoreNet {
public:
    ScoreNet(const ArchConfig& arch, nn::Builder<T> bld) : arch_(arch) {
        const std::size_t groups = static_cast<std::size_t>(arch.groups);
        const std::size_t tdim = static_cast<std::size_t>(arch.time_dim());
        const auto& ch = arch.score_channels;
        const std::size_t img = static_cast<std::size_t>(arch.image_channels);
        time1_ = nn::Linear<T>(bld.scope("time1"), static_cast<std::size_t>(arch.embed_dim), tdim);
        time2_ = nn::Linear<T>(bld.scope("time2"), tdim, tdim);
        conv_in_ = nn::Conv<T>(bld.scope("conv_in"), 3 * img, ch[0]);
        std::size_t prev = ch[0];
        for (std::size_t i = 0; i < ch.size(); ++i) {
            const std::string lvl = "enc" + std::to_string(i);
            enc_.emplace_back(bld.scope(lvl + ".res"), prev, ch[i], tdim, groups);
            prev = ch[i];
            if (i + 1 < ch.size()) down_.emplace_back(bld.scope(lvl + ".down"), ch[i], ch[i], 3, 2);
        }
        if (arch.attention) attn_.emplace(bld.scope("attn"), ch.back(), groups);
        for (std::size_t i = ch.size(); i-- > 0;) {
            const std::string lvl = "dec" + std::to_string(i);
            dec_.emplace_back(bld.scope(lvl + ".res"), prev + ch[i], ch[i], tdim, groups);
            prev = ch[i];
            if (i > 0) {
                up_.emplace_back(bld.scope(lvl + ".up"), ch[i], ch[i - 1]);
                prev = ch[i - 1];
            }
        }
        norm_out_ = nn::GroupNorm<T>(bld.scope("norm_out"), ch[0], groups);
        conv_out_ = nn::Conv<T>(bld.scope("conv_out"), ch[0], img);
    }

    /// eps_hat for x_t given the condition (m, f); one time index per batch item.
    BasicTensor<T> forward(const BasicTensor<T>& moving, const BasicTensor<T>& fixed, const BasicTensor<T>& x_t,
                           const std::vector<int>& t) const {
        check_inputs(moving, fixed, x_t, t);
        auto temb = time2_(swish(time1_(sinusoidal_embedding<T>(t, static_cast<std::size_t>(arch_.embed_dim)))));
        auto h = conv_in_(concat<T>({moving, fixed, x_t}, 1));
        std::vector<BasicTensor<T>> skips;
        for (std::size_t i = 0; i < enc_.size(); ++i) {
            h = enc_[i](h, temb);
            skips.push_back(h);
            if (i < down_.size()) h = down_[i](h);
        }
        if (attn_) h = (*attn_)(h);
        for (std::size_t j = 0; j < dec_.size(); ++j) {
            const std::size_t level = enc_.size() - 1 - j;
            h = dec_[j](concat<T>({h, skips[level]}, 1), temb);
            if (j < up_.size()) h = up_[j](nearest_upsample2(h));
        }
        return conv_out_(swish(norm_out_(h)));
    }

private:
    void check_inputs(const BasicTensor<T>& m, const BasicTensor<T>& f, const BasicTensor<T>& x,
                      const std::vector<int>& t) const {
        if (m.rank() != 4 || m.shape() != f.shape() || m.shape() != x.shape()) {
            throw ShapeError("score_forward: m, f, x_t must share one [B,C,H,W] shape, got " + shape_str(m.shape()) +
                             ", " + shape_str(f.shape()) + ", " + shape_str(x.shape()));
        }
        if (m.dim(1) != static_cast<std::size_t>(arch_.image_channels)) {
            throw ShapeError("score_forward: expected " + std::to_string(arch_.image_channels) + " image channels, got " +
                             shape_str(m.shape()));
        }
        const std::size_t mult = std::size_t{1} << (arch_.score_channels.size() - 1);
        if (m.dim(2) % mult != 0 || m.dim(3) % mult != 0) {
            throw ShapeError("score_forward: spatial size " + shape_str(m.shape()) + " must be divisible by " +
                             std::to_string(mult));
        }
        if (t.size() != m.dim(0)) throw ShapeError("score_forward: need one time index per batch item");
    }

    ArchConfig arch_;
    nn::Linear<T> time1_, time2_;
    nn::Conv<T> conv_in_;
    std::vector<nn::ResBlock<T>> enc_, dec_;
    std::vector<nn::Conv<T>> down_, up_;
    std::optional<nn::SelfAttention<T>> attn_;
    nn::GroupNorm<T> norm_out_;
    nn::Conv<T> conv_out_;
};

/// Deformation network M(m, eps_hat): U-shape of conv + leaky-ReLU units with
/// stride-2 downsampling and stride-2 transposed-conv upsampling. The final
/// conv starts at zero so an untrained model is the identity warp.
template <class T>
class DeformNet {
public:
    DeformNet(const ArchConfig& arch, nn::Builder<T> bld) : arch_(arch) {
        const auto& ch = arch.deform_channels;
        const std::size_t in = 2 * static_cast<std::size_t>(arch.image_channels);
        std::size_t prev = in;
        for (std::size_t i = 0; i < ch.size(); ++i) {
            enc_.emplace_back(bld.scope("enc" + std::to_string(i)), prev, ch[i], 3, i == 0 ? 1 : 2);
            prev = ch[i];
        }
        for (std::size_t i = ch.size() - 1; i-- > 0;) {
            const std::string lvl = "dec" + std::to_string(i);
            up_.emplace_back(bld.scope(lvl + ".up"), prev, prev);
            dec_.emplace_back(bld.scope(lvl + ".conv"), prev + ch[i], ch[i]);
            prev = ch[i];
        }
        refine_ = nn::Conv<T>(bld.scope("refine"), prev, prev);
        flow_ = nn::Conv<T>(bld.scope("flow"), prev, static_cast<std::size_t>(arch.spatial_dims()), 3, 1, true);
    }

    /// Displacement field [B, 2, H, W].
    BasicTensor<T> forward(const BasicTensor<T>& moving, const BasicTensor<T>& eps_hat) const {
        if (moving.rank() != 4 || moving.shape() != eps_hat.shape()) {
            throw ShapeError("deform_forward: m and eps_hat must share one [B,C,H,W] shape, got " +
                             shape_str(moving.shape()) + " and " + shape_str(eps_hat.shape()));
        }
        const std::size_t mult = std::size_t{1} << (arch_.deform_channels.size() - 1);
        if (moving.dim(2) % mult != 0 || moving.dim(3) % mult != 0) {
            throw ShapeError("deform_forward: spatial size " + shape_str(moving.shape()) + " must be divisible by " +
                             std::to_string(mult));
        }
        const T slope = T(kLeakySlope);
        auto h = concat<T>({moving, eps_hat}, 1);
        std::vector<BasicTensor<T>> skips;
        for (const auto& conv : enc_) {
            h = leaky_relu(conv(h), slope);
            skips.push_back(h);
        }
        for (std::size_t j = 0; j < dec_.size(); ++j) {
            const std::size_t level = enc_.size() - 2 - j;
            h = leaky_relu(up_[j](h), slope);
            h = leaky_relu(dec_[j](concat<T>({h, skips[level]}, 1)), slope);
        }
        h = leaky_relu(refine_(h), slope);
        return flow_(h);
    }

    nn::Conv<T>& flow_layer() { return flow_; }

private:
    ArchConfig arch_;
    std::vector<nn::Conv<T>> enc_, dec_;
    std::vector<nn::UpConv<T>> up_;
    nn::Conv<T> refine_, flow_;
};

/// Both networks plus their shared parameter store.
template <class T>
class Model {
public:
    Model(const ArchConfig& arch, std::uint64_t seed)
        : arch_((arch.validate(), arch)),
          rng_(seed),
          score_(arch_, nn::Builder<T>(params_, rng_, "score.")),
          deform_(arch_, nn::Builder<T>(params_, rng_, "deform.")) {}

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ArchConfig& arch() const { return arch_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    const ScoreNet<T>& score() const { return score_; }
    const DeformNet<T>& deform() const { return deform_; }
    DeformNet<T>& deform() { return deform_; }

    /// Copies named tensors into the parameters; every parameter must be present
    /// with a matching shape.
    void load_parameters(const std::vector<std::pair<std::string, BasicTensor<T>>>& named) {
        for (auto& [name, param] : params_.entries()) {
            const BasicTensor<T>* src = nullptr;
            for (const auto& [n, t] : named) {
                if (n == name) src = &t;
            }
            if (!src) throw ModelMismatch("checkpoint lacks parameter " + name);
            if (src->shape() != param.shape()) {
                throw ModelMismatch("parameter " + name + " has shape " + shape_str(src->shape()) + ", model expects " +
                                    shape_str(param.shape()));
            }
            std::copy(src->data().begin(), src->data().end(), param.mutable_data().begin());
        }
    }

private:
    ArchConfig arch_;
    ParamStore<T> params_;
    std::mt19937_64 rng_;
    ScoreNet<T> score_;
    DeformNet<T> deform_;
};

template <class T>
BasicTensor<T> score_forward(const Model<T>& model, const BasicTensor<T>& moving, const BasicTensor<T>& fixed,
                             const BasicTensor<T>& x_t, const std::vector<int>& t) {
    return model.score().forward(moving, fixed, x_t, t);
}

template <class T>
BasicTensor<T> deform_forward(const Model<T>& model, const BasicTensor<T>& moving, const BasicTensor<T>& eps_hat) {
    return model.deform().forward(moving, eps_hat);
}

/// eta * G((m, f), f, 0): the score at x_0 = f, t = 0, scaled by eta.
template <class T>
BasicTensor<T> latent_at_eta(const Model<T>& model, const BasicTensor<T>& moving, const BasicTensor<T>& fixed,
                             double eta) {
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in [0,1], got " + std::to_string(eta));
    std::vector<int> t(moving.rank() > 0 ? moving.dim(0) : 0, 0);
    auto latent = model.score().forward(moving, fixed, fixed, t);
    return scale(latent, static_cast<T>(eta));
}

template <class T>
struct Registration {
    BasicTensor<T> field;
    BasicTensor<T> warped;
};

/// Field from an already computed latent, and the moving image warped by it.
template <class T>
Registration<T> register_with_latent(const Model<T>& model, const BasicTensor<T>& moving, const BasicTensor<T>& latent) {
    auto field = model.deform().forward(moving, latent);
    return {field, warp(moving, field)};
}

/// Single-shot registration: field = M(m, G((m, f), f, 0)), warped = m(field).
template <class T>
Registration<T> register_pair(const Model<T>& model, const BasicTensor<T>& moving, const BasicTensor<T>& fixed) {
    NoGradGuard no_grad;
    return register_with_latent(model, moving, latent_at_eta(model, moving, fixed, 1.0));
}

}  // namespace diffmorph
