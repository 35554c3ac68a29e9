#pragma once

// Minimal tensor and layer kernels for the hybrid classifier. All tensors
// are float64, row-major. Feature maps are [channels x height x width] with
// height the radial (segment) axis and width the azimuthal (track) axis.

#include <cstddef>
#include <span>
#include <vector>

namespace nflr {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);

    std::size_t rank() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t size() const noexcept { return data.size(); }

    double& at(std::size_t c, std::size_t h, std::size_t w) {
        return data[(c * shape[1] + h) * shape[2] + w];
    }
    const double& at(std::size_t c, std::size_t h, std::size_t w) const {
        return data[(c * shape[1] + h) * shape[2] + w];
    }

    bool all_finite() const;
    friend bool operator==(const Tensor&, const Tensor&) = default;
};

std::size_t shape_size(std::span<const std::size_t> shape);

// Azimuthal axis wraps, radial axis replicates its edge rows.
Tensor pad_circular(const Tensor& x, std::size_t before, std::size_t after);

// Symmetric padding by `pad` on both axes.
Tensor circular_pad(const Tensor& x, std::size_t pad);

// Adjoint of pad_circular: folds a padded-input gradient back onto the
// unpadded input.
Tensor unpad_circular_grad(const Tensor& grad_padded, std::size_t before, std::size_t after);

enum class PadMode {
    valid,     // no padding
    circular,  // "same" output size: circular in azimuth, replicate in radius
};

struct ConvGrads {
    Tensor input;
    Tensor weight;
    std::vector<double> bias;
};

// Cross-correlation with stride 1. weight is [out x in x k x k].
Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
              std::size_t out_channels, std::size_t kernel, PadMode mode);

ConvGrads conv2d_backward(const Tensor& x, std::span<const double> weight, std::size_t out_channels,
                          std::size_t kernel, PadMode mode, const Tensor& grad_out);

// Same as conv2d_backward but accumulates parameter gradients into the
// given spans and returns only the input gradient.
Tensor conv2d_backward_into(const Tensor& x, std::span<const double> weight, std::size_t out_channels,
                            std::size_t kernel, PadMode mode, const Tensor& grad_out,
                            std::span<double> grad_weight, std::span<double> grad_bias,
                            bool need_input_grad = true);

// 2 x 2 mean pooling, stride 2; odd trailing rows/columns are dropped.
Tensor mean_pool2(const Tensor& x);
Tensor mean_pool2_backward(const Tensor& x, const Tensor& grad_out);

// y = W x + b, W is [out x in].
void dense(std::span<const double> x, std::span<const double> weight, std::span<const double> bias,
           std::span<double> y);
// Accumulates dW += g x^T, db += g and writes dx = W^T g (dx may be empty).
void dense_backward(std::span<const double> x, std::span<const double> weight, std::span<const double> grad_out,
                    std::span<double> grad_weight, std::span<double> grad_bias, std::span<double> grad_x);

void relu_inplace(std::span<double> x);
// g *= [pre > 0]
void relu_backward_inplace(std::span<const double> pre, std::span<double> g);

double sigmoid(double z);

}  // namespace nflr
