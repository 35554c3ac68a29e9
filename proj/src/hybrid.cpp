#include "nflr/hybrid.hpp"

#include <algorithm>
#include <climits>
#include <cstdint>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "nflr/binary_io.hpp"
#include "nflr/config.hpp"
#include "nflr/error.hpp"

namespace nflr {

const std::vector<std::string>& fcn_input_names() {
    static const std::vector<std::string> names{"age",     "gender",    "axial_length",  "gcc_sup", "gcc_inf",
                                                "gcc_flv", "disc_area", "rim_area", "cd_area_ratio", "vcdr"};
    return names;
}

void ModelConfig::validate() const {
    if (cnn_channels_in < 1) throw Error(ErrorKind::config, "cnn_channels_in must be >= 1");
    if (kernel < 1) throw Error(ErrorKind::config, "kernel must be >= 1");
    if (conv_channels.empty()) throw Error(ErrorKind::config, "at least one conv layer is required");
    if (std::find(conv_channels.begin(), conv_channels.end(), 0) != conv_channels.end()) {
        throw Error(ErrorKind::config, "conv channel counts must be >= 1");
    }
    if (cnn_embed_dim < 1 || fcn_inputs < 1) throw Error(ErrorKind::config, "layer widths must be >= 1");
    if (grid_width < kernel || grid_height < kernel) throw Error(ErrorKind::config, "grid smaller than kernel");
    if (flat_features() == 0) throw Error(ErrorKind::config, "too many pooling stages for the grid size");
    const std::size_t stride = std::size_t{1} << conv_channels.size();
    if (grid_height % stride != 0 || grid_width % stride != 0) {
        throw Error(ErrorKind::config, "grid dimensions must be divisible by 2^(number of conv layers)");
    }
    for (auto h : fcn_hidden) if (h == 0) throw Error(ErrorKind::config, "fcn widths must be >= 1");
    for (auto h : fusion_hidden) if (h == 0) throw Error(ErrorKind::config, "fusion widths must be >= 1");
}

std::size_t ModelConfig::flat_features() const {
    std::size_t h = grid_height, w = grid_width;
    for (std::size_t l = 0; l < conv_channels.size(); ++l) {
        h /= 2;
        w /= 2;
    }
    return conv_channels.back() * h * w;
}

std::vector<ParamBlock> parameter_layout(const ModelConfig& cfg) {
    std::vector<ParamBlock> blocks;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
        const std::size_t n = shape_size(shape);
        blocks.push_back({std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    std::size_t in = cfg.cnn_channels_in;
    for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l) {
        const std::size_t out = cfg.conv_channels[l];
        add("conv" + std::to_string(l) + ".weight", {out, in, cfg.kernel, cfg.kernel});
        add("conv" + std::to_string(l) + ".bias", {out});
        in = out;
    }
    add("cnn_embed.weight", {cfg.cnn_embed_dim, cfg.flat_features()});
    add("cnn_embed.bias", {cfg.cnn_embed_dim});
    in = cfg.fcn_inputs;
    for (std::size_t l = 0; l < cfg.fcn_hidden.size(); ++l) {
        add("fcn" + std::to_string(l) + ".weight", {cfg.fcn_hidden[l], in});
        add("fcn" + std::to_string(l) + ".bias", {cfg.fcn_hidden[l]});
        in = cfg.fcn_hidden[l];
    }
    in += cfg.cnn_embed_dim;
    for (std::size_t l = 0; l < cfg.fusion_hidden.size(); ++l) {
        add("fusion" + std::to_string(l) + ".weight", {cfg.fusion_hidden[l], in});
        add("fusion" + std::to_string(l) + ".bias", {cfg.fusion_hidden[l]});
        in = cfg.fusion_hidden[l];
    }
    add("output.weight", {1, in});
    add("output.bias", {1});
    return blocks;
}

std::size_t parameter_count(const ModelConfig& cfg) {
    const auto layout = parameter_layout(cfg);
    return layout.back().offset + layout.back().size;
}

std::size_t stage_count(const ModelConfig& cfg) {
    return cfg.conv_channels.size() + 1 + cfg.fcn_hidden.size() + cfg.fusion_hidden.size() + 1;
}

std::vector<std::size_t> block_stages(const ModelConfig& cfg) {
    std::vector<std::size_t> stages;
    std::size_t s = 0;
    for (std::size_t l = 0; l < cfg.conv_channels.size(); ++l, ++s) stages.insert(stages.end(), {s, s});
    stages.insert(stages.end(), {s, s});
    ++s;
    for (std::size_t l = 0; l < cfg.fcn_hidden.size(); ++l, ++s) stages.insert(stages.end(), {s, s});
    for (std::size_t l = 0; l < cfg.fusion_hidden.size(); ++l, ++s) stages.insert(stages.end(), {s, s});
    stages.insert(stages.end(), {s, s});
    return stages;
}

Standardizer Standardizer::identity(const ModelConfig& cfg) {
    return {std::vector<double>(cfg.cnn_channels_in, 0.0), std::vector<double>(cfg.cnn_channels_in, 1.0),
            std::vector<double>(cfg.fcn_inputs, 0.0), std::vector<double>(cfg.fcn_inputs, 1.0)};
}

HybridModel HybridModel::zeros(const ModelConfig& cfg) {
    cfg.validate();
    return {cfg, std::vector<double>(parameter_count(cfg), 0.0), Standardizer::identity(cfg)};
}

HybridModel HybridModel::initialized(const ModelConfig& cfg, std::uint64_t seed) {
    auto model = zeros(cfg);
    Rng rng(seed);
    for (const auto& b : parameter_layout(cfg)) {
        if (b.shape.size() == 1) continue;  // biases stay zero
        std::size_t fan_in, fan_out;
        if (b.shape.size() == 4) {
            const std::size_t receptive = b.shape[2] * b.shape[3];
            fan_in = b.shape[1] * receptive;
            fan_out = b.shape[0] * receptive;
        } else {
            fan_in = b.shape[1];
            fan_out = b.shape[0];
        }
        const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (auto& w : model.block(b)) w = rng.uniform(-limit, limit);
    }
    return model;
}

NetInput prepare_input(const HybridModel& model, const Example& ex) {
    const auto& cfg = model.config;
    const std::size_t cells = cfg.grid_height * cfg.grid_width;
    if (ex.maps.size() != cfg.cnn_channels_in * cells) {
        throw Error(ErrorKind::config, "model expects " + std::to_string(cfg.cnn_channels_in) +
                                           " map channel(s) of " + std::to_string(cells) + " cells, got " +
                                           std::to_string(ex.maps.size()) + " values");
    }
    if (!ex.empty.empty() && ex.empty.size() != ex.maps.size()) {
        throw Error(ErrorKind::validation, "empty-cell mask length differs from the map stack");
    }
    if (ex.scalars.size() != cfg.fcn_inputs) {
        throw Error(ErrorKind::validation, "expected " + std::to_string(cfg.fcn_inputs) + " scalar inputs");
    }
    const auto& st = model.standardizer;
    NetInput in;
    in.maps = Tensor({cfg.cnn_channels_in, cfg.grid_height, cfg.grid_width});
    for (std::size_t c = 0; c < cfg.cnn_channels_in; ++c) {
        for (std::size_t i = 0; i < cells; ++i) {
            const std::size_t k = c * cells + i;
            if (!ex.empty.empty() && ex.empty[k]) continue;
            const double v = ex.maps[k];
            if (!std::isfinite(v)) {
                throw Error(ErrorKind::validation, "non-finite map value in channel " + std::to_string(c) +
                                                       " cell " + std::to_string(i));
            }
            in.maps.data[k] = (v - st.map_mean[c]) / st.map_sd[c];
        }
    }
    in.scalars.resize(cfg.fcn_inputs);
    for (std::size_t i = 0; i < cfg.fcn_inputs; ++i) {
        if (!std::isfinite(ex.scalars[i])) {
            throw Error(ErrorKind::validation, "non-finite scalar input " +
                                                   (i < fcn_input_names().size() ? fcn_input_names()[i] : std::to_string(i)));
        }
        in.scalars[i] = (ex.scalars[i] - st.scalar_mean[i]) / st.scalar_sd[i];
    }
    return in;
}

namespace {

void activate(Activation a, std::span<double> x) {
    if (a == Activation::relu) relu_inplace(x);
}

void activate_backward(Activation a, std::span<const double> pre, std::span<double> g) {
    if (a == Activation::relu) relu_backward_inplace(pre, g);
}

struct LayoutCursor {
    const std::vector<ParamBlock>& blocks;
    std::size_t next = 0;
    const ParamBlock& take() { return blocks[next++]; }
};

}  // namespace

void forward_cached(const HybridModel& model, ForwardCache& cache, std::size_t from_stage) {
    const auto& cfg = model.config;
    const auto layout = parameter_layout(cfg);
    const std::size_t n_conv = cfg.conv_channels.size();
    cache.conv_pre.resize(n_conv);
    cache.conv_post.resize(n_conv);
    cache.pooled.resize(n_conv);
    cache.fcn_pre.resize(cfg.fcn_hidden.size());
    cache.fcn_post.resize(cfg.fcn_hidden.size());
    cache.fusion_pre.resize(cfg.fusion_hidden.size());
    cache.fusion_post.resize(cfg.fusion_hidden.size());

    std::size_t stage = 0;
    std::size_t bi = 0;
    for (std::size_t l = 0; l < n_conv; ++l, ++stage, bi += 2) {
        if (stage < from_stage) continue;
        const Tensor& in = l == 0 ? cache.input.maps : cache.pooled[l - 1];
        cache.conv_pre[l] = conv2d(in, model.block(layout[bi]), model.block(layout[bi + 1]), cfg.conv_channels[l],
                                   cfg.kernel, PadMode::circular);
        cache.conv_post[l] = cache.conv_pre[l];
        activate(cfg.activation, cache.conv_post[l].data);
        cache.pooled[l] = mean_pool2(cache.conv_post[l]);
    }
    if (stage >= from_stage) {
        cache.embed_pre.assign(cfg.cnn_embed_dim, 0.0);
        dense(cache.pooled.back().data, model.block(layout[bi]), model.block(layout[bi + 1]), cache.embed_pre);
        cache.embed_post = cache.embed_pre;
        activate(cfg.activation, cache.embed_post);
    }
    ++stage;
    bi += 2;
    for (std::size_t l = 0; l < cfg.fcn_hidden.size(); ++l, ++stage, bi += 2) {
        if (stage < from_stage) continue;
        const auto& in = l == 0 ? cache.input.scalars : cache.fcn_post[l - 1];
        cache.fcn_pre[l].assign(cfg.fcn_hidden[l], 0.0);
        dense(in, model.block(layout[bi]), model.block(layout[bi + 1]), cache.fcn_pre[l]);
        cache.fcn_post[l] = cache.fcn_pre[l];
        activate(cfg.activation, cache.fcn_post[l]);
    }
    const auto& fcn_out = cfg.fcn_hidden.empty() ? cache.input.scalars : cache.fcn_post.back();
    for (std::size_t l = 0; l < cfg.fusion_hidden.size(); ++l, ++stage, bi += 2) {
        if (stage < from_stage) continue;
        if (l == 0) {
            cache.fused = cache.embed_post;
            cache.fused.insert(cache.fused.end(), fcn_out.begin(), fcn_out.end());
        }
        const auto& in = l == 0 ? cache.fused : cache.fusion_post[l - 1];
        cache.fusion_pre[l].assign(cfg.fusion_hidden[l], 0.0);
        dense(in, model.block(layout[bi]), model.block(layout[bi + 1]), cache.fusion_pre[l]);
        cache.fusion_post[l] = cache.fusion_pre[l];
        activate(cfg.activation, cache.fusion_post[l]);
    }
    if (cfg.fusion_hidden.empty() && stage >= from_stage) {
        cache.fused = cache.embed_post;
        cache.fused.insert(cache.fused.end(), fcn_out.begin(), fcn_out.end());
    }
    const auto& last = cfg.fusion_hidden.empty() ? cache.fused : cache.fusion_post.back();
    double z = 0.0;
    dense(last, model.block(layout[bi]), model.block(layout[bi + 1]), std::span(&z, 1));
    cache.logit = z;
    cache.probability = sigmoid(z);
}

double forward(const HybridModel& model, const Example& example) {
    ForwardCache cache;
    cache.input = prepare_input(model, example);
    forward_cached(model, cache);
    return cache.probability;
}

double bce_loss(double p, int label) {
    const double pc = std::clamp(p, bce_clamp, 1.0 - bce_clamp);
    return label ? -std::log(pc) : -std::log1p(-pc);
}

double bce_loss(std::span<const double> p, std::span<const int> labels) {
    if (p.size() != labels.size() || p.empty()) {
        throw Error(ErrorKind::validation, "bce_loss needs equal-length, nonempty inputs");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += bce_loss(p[i], labels[i]);
    return s / static_cast<double>(p.size());
}

double bce_grad(double p, int label) {
    if (p < bce_clamp || p > 1.0 - bce_clamp) return 0.0;
    return label ? -1.0 / p : 1.0 / (1.0 - p);
}

double backward(const HybridModel& model, const ForwardCache& cache, int label, std::span<double> grad) {
    const auto& cfg = model.config;
    const auto layout = parameter_layout(cfg);
    std::fill(grad.begin(), grad.end(), 0.0);
    auto gblock = [&](std::size_t i) { return grad.subspan(layout[i].offset, layout[i].size); };

    const double p = cache.probability;
    // dL/dz through the sigmoid, written without dividing by p(1-p).
    double dz;
    if (p < bce_clamp || p > 1.0 - bce_clamp) {
        dz = 0.0;
    } else {
        dz = p - static_cast<double>(label);
    }

    std::size_t bi = layout.size() - 2;
    const auto& last = cfg.fusion_hidden.empty() ? cache.fused : cache.fusion_post.back();
    std::vector<double> g(last.size());
    dense_backward(last, model.block(layout[bi]), std::span(&dz, 1), gblock(bi), gblock(bi + 1), g);

    for (std::size_t l = cfg.fusion_hidden.size(); l-- > 0;) {
        bi -= 2;
        activate_backward(cfg.activation, cache.fusion_pre[l], g);
        const auto& in = l == 0 ? cache.fused : cache.fusion_post[l - 1];
        std::vector<double> gin(in.size());
        dense_backward(in, model.block(layout[bi]), g, gblock(bi), gblock(bi + 1), gin);
        g = std::move(gin);
    }
    // g is now the gradient w.r.t. the fused vector [embed | fcn].
    std::vector<double> g_embed(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(cfg.cnn_embed_dim));
    std::vector<double> g_fcn(g.begin() + static_cast<std::ptrdiff_t>(cfg.cnn_embed_dim), g.end());

    for (std::size_t l = cfg.fcn_hidden.size(); l-- > 0;) {
        bi -= 2;
        activate_backward(cfg.activation, cache.fcn_pre[l], g_fcn);
        const auto& in = l == 0 ? cache.input.scalars : cache.fcn_post[l - 1];
        std::vector<double> gin(l == 0 ? 0 : in.size());
        dense_backward(in, model.block(layout[bi]), g_fcn, gblock(bi), gblock(bi + 1), gin);
        g_fcn = std::move(gin);
    }

    bi -= 2;
    activate_backward(cfg.activation, cache.embed_pre, g_embed);
    const Tensor& flat = cache.pooled.back();
    Tensor g_pool(flat.shape);
    dense_backward(flat.data, model.block(layout[bi]), g_embed, gblock(bi), gblock(bi + 1), g_pool.data);

    for (std::size_t l = cfg.conv_channels.size(); l-- > 0;) {
        bi -= 2;
        Tensor g_conv = mean_pool2_backward(cache.conv_post[l], g_pool);
        activate_backward(cfg.activation, cache.conv_pre[l].data, g_conv.data);
        const Tensor& in = l == 0 ? cache.input.maps : cache.pooled[l - 1];
        g_pool = conv2d_backward_into(in, model.block(layout[bi]), cfg.conv_channels[l], cfg.kernel,
                                      PadMode::circular, g_conv, gblock(bi), gblock(bi + 1), l > 0);
    }
    return bce_loss(p, label);
}

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
        throw Error(ErrorKind::validation, "adam_step shape mismatch");
    }
    state.t += 1;
    const double t = static_cast<double>(state.t);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        const double m_hat = state.m[i] / c1;
        const double v_hat = state.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
}

namespace {

// Extended-precision re-evaluation of the loss for finite differences. In
// double precision the loss is only resolved to about 1e-16, which limits a
// central difference with eps = 1e-6 to ~1e-10 absolute accuracy; many
// weights have gradients far smaller than that.
using ext = long double;

struct ExtNet {
    const ModelConfig& cfg;
    std::vector<ParamBlock> layout;
    std::vector<ext> params;
    std::vector<ext> input_maps;
    std::vector<ext> input_scalars;
    // Per stage: pre-activation (dense stages) and output.
    std::vector<std::vector<ext>> pre;
    std::vector<std::vector<ext>> out;
    std::vector<std::size_t> in_h, in_w;  // conv stage input sizes

    ExtNet(const HybridModel& m, const NetInput& in)
        : cfg(m.config), layout(parameter_layout(m.config)), params(m.params.begin(), m.params.end()),
          input_maps(in.maps.data.begin(), in.maps.data.end()), input_scalars(in.scalars.begin(), in.scalars.end()),
          pre(stage_count(m.config)), out(stage_count(m.config)) {}

    ext act(ext v) const { return cfg.activation == Activation::relu ? (v > 0 ? v : ext(0)) : v; }
    const ext* block(std::size_t b) const { return params.data() + layout[b].offset; }

    void conv_stage(std::size_t l) {
        const std::size_t cin = l == 0 ? cfg.cnn_channels_in : cfg.conv_channels[l - 1];
        const std::size_t cout = cfg.conv_channels[l], k = cfg.kernel;
        std::size_t h = cfg.grid_height, w = cfg.grid_width;
        for (std::size_t i = 0; i < l; ++i) h /= 2, w /= 2;
        const auto& x = l == 0 ? input_maps : out[l - 1];
        const ext* wt = block(2 * l);
        const ext* bs = block(2 * l + 1);
        const std::size_t before = (k - 1) / 2;
        std::vector<ext> conv(cout * h * w);
        for (std::size_t co = 0; co < cout; ++co) {
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t xo = 0; xo < w; ++xo) {
                    ext acc = bs[co];
                    for (std::size_t ci = 0; ci < cin; ++ci) {
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const std::size_t py = y + ky;
                            const std::size_t sy = py < before ? 0 : std::min(py - before, h - 1);
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const std::size_t sx = (xo + kx + w - before) % w;
                                acc += wt[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + sy) * w + sx];
                            }
                        }
                    }
                    conv[(co * h + y) * w + xo] = act(acc);
                }
            }
        }
        const std::size_t oh = h / 2, ow = w / 2;
        auto& o = out[l];
        o.assign(cout * oh * ow, 0);
        for (std::size_t c = 0; c < cout; ++c) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t xo = 0; xo < ow; ++xo) {
                    const auto at = [&](std::size_t yy, std::size_t xx) { return conv[(c * h + yy) * w + xx]; };
                    o[(c * oh + y) * ow + xo] = ext(0.25) * (at(2 * y, 2 * xo) + at(2 * y, 2 * xo + 1) +
                                                             at(2 * y + 1, 2 * xo) + at(2 * y + 1, 2 * xo + 1));
                }
            }
        }
    }

    // Dense stage; `unit` limits recomputation to one output unit.
    void dense_stage(std::size_t s, std::size_t b, const std::vector<ext>& x, bool activate, std::size_t unit) {
        const std::size_t n_out = layout[b + 1].size, n_in = x.size();
        const ext* wt = block(b);
        const ext* bs = block(b + 1);
        auto& p = pre[s];
        auto& o = out[s];
        p.resize(n_out);
        o.resize(n_out);
        const std::size_t lo = unit < n_out ? unit : 0, hi = unit < n_out ? unit + 1 : n_out;
        for (std::size_t j = lo; j < hi; ++j) {
            ext acc = 0;
            for (std::size_t i = 0; i < n_in; ++i) acc += wt[j * n_in + i] * x[i];
            p[j] = acc + bs[j];
            o[j] = activate ? act(p[j]) : p[j];
        }
    }

    ext run(std::size_t from_stage, std::size_t unit, int label) {
        const std::size_t n_conv = cfg.conv_channels.size();
        std::size_t s = 0, b = 0;
        auto unit_for = [&](std::size_t stage) { return stage == from_stage ? unit : SIZE_MAX; };
        for (std::size_t l = 0; l < n_conv; ++l, ++s, b += 2) {
            if (s >= from_stage) conv_stage(l);
        }
        if (s >= from_stage) dense_stage(s, b, out[s - 1], true, unit_for(s));
        const std::size_t embed = s;
        ++s;
        b += 2;
        for (std::size_t l = 0; l < cfg.fcn_hidden.size(); ++l, ++s, b += 2) {
            if (s >= from_stage) dense_stage(s, b, l == 0 ? input_scalars : out[s - 1], true, unit_for(s));
        }
        const std::size_t fcn_last = s - 1;
        std::vector<ext> fused = out[embed];
        const auto& fcn_out = cfg.fcn_hidden.empty() ? input_scalars : out[fcn_last];
        fused.insert(fused.end(), fcn_out.begin(), fcn_out.end());
        for (std::size_t l = 0; l < cfg.fusion_hidden.size(); ++l, ++s, b += 2) {
            if (s >= from_stage) dense_stage(s, b, l == 0 ? fused : out[s - 1], true, unit_for(s));
        }
        const auto& last = cfg.fusion_hidden.empty() ? fused : out[s - 1];
        dense_stage(s, b, last, false, SIZE_MAX);
        const ext z = out[s][0];
        const ext p = z >= 0 ? 1 / (1 + std::exp(-z)) : std::exp(z) / (1 + std::exp(z));
        const ext pc = std::clamp(p, ext(bce_clamp), ext(1) - ext(bce_clamp));
        return label ? -std::log(pc) : -std::log1p(-pc);
    }
};

}  // namespace

GradientCheckResult gradient_check(const HybridModel& model, const Example& example, double eps) {
    const auto layout = parameter_layout(model.config);
    const auto stages = block_stages(model.config);

    ForwardCache cache;
    cache.input = prepare_input(model, example);
    forward_cached(model, cache);
    std::vector<double> analytic(model.params.size());
    backward(model, cache, example.label, analytic);

    ExtNet net(model, cache.input);
    net.run(0, SIZE_MAX, example.label);
    const ext h = eps;

    GradientCheckResult result;
    result.per_block_max.assign(layout.size(), 0.0);
    bool first = true;
    for (std::size_t b = 0; b < layout.size(); ++b) {
        const std::size_t stage = stages[b];
        const bool dense_block = layout[b].shape.size() <= 2;
        const bool is_bias = layout[b].shape.size() == 1;
        const std::size_t n_in = dense_block && !is_bias ? layout[b].shape[1] : 1;
        for (std::size_t k = 0; k < layout[b].size; ++k) {
            const std::size_t i = layout[b].offset + k;
            // Output unit touched by this parameter, for dense layers.
            const std::size_t unit = dense_block ? (is_bias ? k : k / n_in) : SIZE_MAX;
            const ext saved = net.params[i];
            net.params[i] = saved + h;
            const ext up = net.run(stage, unit, example.label);
            net.params[i] = saved - h;
            const ext down = net.run(stage, unit, example.label);
            net.params[i] = saved;
            net.run(stage, unit, example.label);

            const double numeric = static_cast<double>((up - down) / (2 * h));
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-12});
            result.per_block_max[b] = std::max(result.per_block_max[b], rel);
            if (first || rel > result.max_relative_error) {
                first = false;
                result.max_relative_error = rel;
                result.worst_index = i;
                result.worst_block = layout[b].name;
                result.worst_analytic = a;
                result.worst_numeric = numeric;
            }
        }
    }
    return result;
}

void save_checkpoint(const std::filesystem::path& dir, const HybridModel& model, const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json j;
    j["format"] = "nflr-hybrid-checkpoint/1";
    j["variant"] = meta.variant;
    j["seed"] = meta.seed;
    j["split_seed"] = meta.split_seed;
    j["epochs"] = meta.epochs;
    j["config"] = to_json(model.config);
    j["standardizer"] = {{"map_mean", model.standardizer.map_mean},
                         {"map_sd", model.standardizer.map_sd},
                         {"scalar_names", fcn_input_names()},
                         {"scalar_mean", model.standardizer.scalar_mean},
                         {"scalar_sd", model.standardizer.scalar_sd}};
    j["params_file"] = "params.bin";
    j["dtype"] = "float64-le";
    auto tensors = nlohmann::ordered_json::array();
    for (const auto& b : parameter_layout(model.config)) {
        tensors.push_back({{"name", b.name}, {"shape", b.shape}, {"offset", b.offset}, {"size", b.size}});
    }
    j["tensors"] = tensors;
    const auto bytes = encode_f64(model.params);
    j["params_sha256"] = sha256_hex(bytes);
    write_file(dir / "params.bin", bytes);
    write_text(dir / "checkpoint.json", j.dump(2) + "\n");
}

HybridModel load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta) {
    const auto j = nlohmann::json::parse(read_text(dir / "checkpoint.json"));
    if (j.value("format", "") != "nflr-hybrid-checkpoint/1") {
        throw Error(ErrorKind::validation, "unsupported checkpoint format in " + (dir / "checkpoint.json").string());
    }
    HybridModel model;
    model.config = model_config_from_json(j.at("config"));
    model.config.validate();
    const auto bytes = read_file(dir / "params.bin");
    if (sha256_hex(bytes) != j.at("params_sha256").get<std::string>()) {
        throw Error(ErrorKind::integrity, "parameter hash mismatch for " + (dir / "params.bin").string());
    }
    model.params = decode_f64(bytes);
    if (model.params.size() != parameter_count(model.config)) {
        throw Error(ErrorKind::integrity, "parameter count does not match the checkpoint config");
    }
    const auto& s = j.at("standardizer");
    model.standardizer.map_mean = s.at("map_mean").get<std::vector<double>>();
    model.standardizer.map_sd = s.at("map_sd").get<std::vector<double>>();
    model.standardizer.scalar_mean = s.at("scalar_mean").get<std::vector<double>>();
    model.standardizer.scalar_sd = s.at("scalar_sd").get<std::vector<double>>();
    if (meta) {
        meta->variant = j.at("variant").get<std::string>();
        meta->seed = j.at("seed").get<std::uint64_t>();
        meta->split_seed = j.at("split_seed").get<std::uint64_t>();
        meta->epochs = j.at("epochs").get<std::size_t>();
    }
    return model;
}

}  // namespace nflr
