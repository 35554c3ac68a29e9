#pragma once

// Hybrid classifier: a CNN over the stacked superpixel grids (thickness and
// optionally reflectance) with circular azimuthal padding, fused with a
// fully connected network over ten clinical / ONH / GCC scalars, ending in
// a single sigmoid unit.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "nflr/layers.hpp"
#include "nflr/rng.hpp"

namespace nflr {

inline constexpr std::size_t fcn_input_count = 10;
// age, gender, axial_length, gcc_sup, gcc_inf, gcc_flv, disc_area, rim_area,
// cd_area_ratio, vcdr
const std::vector<std::string>& fcn_input_names();

enum class Activation { relu, identity };

struct ModelConfig {
    std::size_t cnn_channels_in = 2;
    std::size_t grid_height = 32;  // segments
    std::size_t grid_width = 32;   // tracks
    std::vector<std::size_t> conv_channels{8, 16};
    std::size_t kernel = 2;
    std::size_t cnn_embed_dim = 64;
    std::size_t fcn_inputs = fcn_input_count;
    std::vector<std::size_t> fcn_hidden{16};
    std::vector<std::size_t> fusion_hidden{32};
    Activation activation = Activation::relu;

    void validate() const;
    // Spatial size after every conv + pool block.
    std::size_t flat_features() const;
};

struct ParamBlock {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Declared order of every weight / bias tensor in the flat parameter vector.
std::vector<ParamBlock> parameter_layout(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);

struct Standardizer {
    std::vector<double> map_mean;  // per channel
    std::vector<double> map_sd;
    std::vector<double> scalar_mean;  // per FCN input
    std::vector<double> scalar_sd;

    static Standardizer identity(const ModelConfig& cfg);
};

// One example: raw (unstandardized) channel grids, radius-major
// [channel x segment x track], plus raw scalars. `empty` flags superpixel
// cells without data (values there are ignored); it may be left empty when
// every cell has data.
struct Example {
    std::vector<double> maps;
    std::vector<std::uint8_t> empty;
    std::vector<double> scalars;
    int label = 0;
};

struct HybridModel {
    ModelConfig config;
    std::vector<double> params;
    Standardizer standardizer;

    static HybridModel zeros(const ModelConfig& cfg);
    // Glorot-uniform weights, zero biases.
    static HybridModel initialized(const ModelConfig& cfg, std::uint64_t seed);

    std::span<double> block(const ParamBlock& b) { return {params.data() + b.offset, b.size}; }
    std::span<const double> block(const ParamBlock& b) const { return {params.data() + b.offset, b.size}; }
};

// Standardized network inputs. Empty cells become 0 (the training mean).
struct NetInput {
    Tensor maps;  // [C x H x W]
    std::vector<double> scalars;
};

NetInput prepare_input(const HybridModel& model, const Example& example);

struct ForwardCache {
    NetInput input;
    std::vector<Tensor> conv_pre;   // pre-activation conv outputs
    std::vector<Tensor> conv_post;  // after activation
    std::vector<Tensor> pooled;     // block outputs
    std::vector<double> embed_pre, embed_post;
    std::vector<std::vector<double>> fcn_pre, fcn_post;
    std::vector<double> fused;
    std::vector<std::vector<double>> fusion_pre, fusion_post;
    double logit = 0.0;
    double probability = 0.5;
};

// Stages, in evaluation order: each conv block, the CNN embedding, each FCN
// layer, each fusion layer, the output unit.
std::size_t stage_count(const ModelConfig& cfg);
// Stage that owns each parameter block, index-aligned with parameter_layout.
std::vector<std::size_t> block_stages(const ModelConfig& cfg);

void forward_cached(const HybridModel& model, ForwardCache& cache, std::size_t from_stage = 0);

double forward(const HybridModel& model, const Example& example);

// Gradient of bce_loss(probability, label) w.r.t. all parameters, written
// into grad (same layout as params, overwritten). Returns the loss.
double backward(const HybridModel& model, const ForwardCache& cache, int label, std::span<double> grad);

inline constexpr double bce_clamp = 1e-7;
double bce_loss(double p, int label);
double bce_loss(std::span<const double> p, std::span<const int> labels);
// dL/dp, zero where the clamp is active.
double bce_grad(double p, int label);

struct AdamConfig {
    double learning_rate = 0.00008;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct AdamState {
    std::vector<double> m;
    std::vector<double> v;
    std::uint64_t t = 0;

    explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

void adam_step(std::span<double> params, std::span<const double> grads, AdamState& state, const AdamConfig& cfg);

struct GradientCheckResult {
    double max_relative_error = 0.0;
    std::size_t worst_index = 0;
    std::string worst_block;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<double> per_block_max;  // aligned with parameter_layout
};

// Central finite differences of the single-example loss against backward().
GradientCheckResult gradient_check(const HybridModel& model, const Example& example, double eps = 1e-6);

// Checkpoint: <dir>/checkpoint.json manifest and <dir>/params.bin holding
// little-endian float64 parameter tensors in declared order.
struct CheckpointMeta {
    std::string variant;
    std::uint64_t seed = 0;
    std::uint64_t split_seed = 0;
    std::size_t epochs = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const HybridModel& model, const CheckpointMeta& meta);
HybridModel load_checkpoint(const std::filesystem::path& dir, CheckpointMeta* meta = nullptr);

}  // namespace nflr
