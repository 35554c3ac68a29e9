#include "nflr/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>
#include <cstdint>
#include <tuple>

#include "nflr/error.hpp"

namespace nflr {

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), data(shape_size(shape), fill) {}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::size_t shape_size(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void require_chw(const Tensor& x, const char* what) {
    if (x.rank() != 3) throw Error(ErrorKind::config, std::string(what) + " expects a [C x H x W] tensor");
}

std::pair<std::size_t, std::size_t> same_padding(std::size_t kernel) {
    const std::size_t before = (kernel - 1) / 2;
    return {before, kernel - 1 - before};
}

}  // namespace

Tensor pad_circular(const Tensor& x, std::size_t before, std::size_t after) {
    require_chw(x, "pad_circular");
    const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (before > w || after > w) throw Error(ErrorKind::config, "azimuthal pad exceeds the map width");
    if (h == 0 || w == 0) throw Error(ErrorKind::config, "cannot pad an empty map");
    const std::size_t ph = h + before + after, pw = w + before + after;
    Tensor out({c, ph, pw});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < ph; ++y) {
            const std::size_t sy = y < before ? 0 : std::min(y - before, h - 1);
            for (std::size_t xo = 0; xo < pw; ++xo) {
                const std::size_t sx = (xo + w - before % w) % w;
                out.at(ch, y, xo) = x.at(ch, sy, sx);
            }
        }
    }
    return out;
}

Tensor circular_pad(const Tensor& x, std::size_t pad) {
    require_chw(x, "circular_pad");
    if (pad > x.dim(2)) throw Error(ErrorKind::config, "pad exceeds the azimuthal width");
    return pad_circular(x, pad, pad);
}

Tensor unpad_circular_grad(const Tensor& g, std::size_t before, std::size_t after) {
    const std::size_t c = g.dim(0);
    const std::size_t h = g.dim(1) - before - after;
    const std::size_t w = g.dim(2) - before - after;
    Tensor out({c, h, w});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < g.dim(1); ++y) {
            const std::size_t sy = y < before ? 0 : std::min(y - before, h - 1);
            for (std::size_t xo = 0; xo < g.dim(2); ++xo) {
                const std::size_t sx = (xo + w - before % w) % w;
                out.at(ch, sy, sx) += g.at(ch, y, xo);
            }
        }
    }
    return out;
}

namespace {

// Source pixel (within one channel) for every (ky, kx, y, x) of the
// unfolded input; padding is resolved here, so no padded copy is built.
struct Unfold {
    std::size_t oh = 0, ow = 0, k = 0, h = 0, w = 0;
    std::vector<std::uint32_t> src;  // [ky * k + kx][y * ow + x]
};

Unfold make_unfold(std::size_t h, std::size_t w, std::size_t kernel, PadMode mode) {
    Unfold u;
    u.h = h;
    u.w = w;
    u.k = kernel;
    std::size_t before = 0, after = 0;
    if (mode == PadMode::circular && kernel > 1) {
        std::tie(before, after) = same_padding(kernel);
        if (before > w || after > w) throw Error(ErrorKind::config, "azimuthal pad exceeds the map width");
    }
    const std::size_t ph = h + before + after, pw = w + before + after;
    if (ph < kernel || pw < kernel) throw Error(ErrorKind::config, "conv2d kernel larger than the input");
    u.oh = ph - kernel + 1;
    u.ow = pw - kernel + 1;
    u.src.resize(kernel * kernel * u.oh * u.ow);
    std::size_t n = 0;
    for (std::size_t ky = 0; ky < kernel; ++ky) {
        for (std::size_t kx = 0; kx < kernel; ++kx) {
            for (std::size_t y = 0; y < u.oh; ++y) {
                const std::size_t py = y + ky;
                const std::size_t sy = py < before ? 0 : std::min(py - before, h - 1);
                for (std::size_t xo = 0; xo < u.ow; ++xo) {
                    const std::size_t sx = (xo + kx + w - before % w) % w;
                    u.src[n++] = static_cast<std::uint32_t>(sy * w + sx);
                }
            }
        }
    }
    return u;
}

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// [cin * k * k x oh * ow]
RowMatrix im2col(const Tensor& x, const Unfold& u) {
    const std::size_t cin = x.dim(0), kk = u.k * u.k, p = u.oh * u.ow, plane = u.h * u.w;
    RowMatrix cols(static_cast<Eigen::Index>(cin * kk), static_cast<Eigen::Index>(p));
    for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* in = x.data.data() + ci * plane;
        for (std::size_t q = 0; q < kk; ++q) {
            double* row = cols.data() + (ci * kk + q) * p;
            const std::uint32_t* idx = u.src.data() + q * p;
            for (std::size_t i = 0; i < p; ++i) row[i] = in[idx[i]];
        }
    }
    return cols;
}

}  // namespace

Tensor conv2d(const Tensor& x, std::span<const double> weight, std::span<const double> bias,
              std::size_t out_channels, std::size_t kernel, PadMode mode) {
    require_chw(x, "conv2d");
    const std::size_t cin = x.dim(0);
    if (kernel == 0 || weight.size() != out_channels * cin * kernel * kernel || bias.size() != out_channels) {
        throw Error(ErrorKind::config, "conv2d weight/bias shape does not match the input channels");
    }
    if (x.dim(1) == 0 || x.dim(2) == 0) throw Error(ErrorKind::config, "conv2d input is empty");
    const Unfold u = make_unfold(x.dim(1), x.dim(2), kernel, mode);
    const RowMatrix cols = im2col(x, u);
    Tensor out({out_channels, u.oh, u.ow});
    const auto co = static_cast<Eigen::Index>(out_channels);
    const auto kdim = static_cast<Eigen::Index>(cin * kernel * kernel);
    Eigen::Map<const RowMatrix> w(weight.data(), co, kdim);
    Eigen::Map<RowMatrix> o(out.data.data(), co, cols.cols());
    o.noalias() = w * cols;
    for (Eigen::Index c = 0; c < co; ++c) o.row(c).array() += bias[static_cast<std::size_t>(c)];
    return out;
}

Tensor conv2d_backward_into(const Tensor& x, std::span<const double> weight, std::size_t out_channels,
                            std::size_t kernel, PadMode mode, const Tensor& grad_out,
                            std::span<double> grad_weight, std::span<double> grad_bias, bool need_input_grad) {
    const std::size_t cin = x.dim(0);
    const Unfold u = make_unfold(x.dim(1), x.dim(2), kernel, mode);
    const RowMatrix cols = im2col(x, u);
    const auto co = static_cast<Eigen::Index>(out_channels);
    const auto kdim = static_cast<Eigen::Index>(cin * kernel * kernel);
    const auto p = cols.cols();
    Eigen::Map<const RowMatrix> g(grad_out.data.data(), co, p);
    Eigen::Map<RowMatrix> gw(grad_weight.data(), co, kdim);
    gw.noalias() += g * cols.transpose();
    for (Eigen::Index c = 0; c < co; ++c) grad_bias[static_cast<std::size_t>(c)] += g.row(c).sum();
    if (!need_input_grad) return {};

    Eigen::Map<const RowMatrix> w(weight.data(), co, kdim);
    const RowMatrix gcols = w.transpose() * g;
    Tensor gx(x.shape);
    const std::size_t kk = kernel * kernel, plane = u.h * u.w, np = static_cast<std::size_t>(p);
    for (std::size_t ci = 0; ci < cin; ++ci) {
        double* out = gx.data.data() + ci * plane;
        for (std::size_t q = 0; q < kk; ++q) {
            const double* row = gcols.data() + (ci * kk + q) * np;
            const std::uint32_t* idx = u.src.data() + q * np;
            for (std::size_t i = 0; i < np; ++i) out[idx[i]] += row[i];
        }
    }
    return gx;
}

ConvGrads conv2d_backward(const Tensor& x, std::span<const double> weight, std::size_t out_channels,
                          std::size_t kernel, PadMode mode, const Tensor& grad_out) {
    ConvGrads g;
    g.weight = Tensor({out_channels, x.dim(0), kernel, kernel});
    g.bias.assign(out_channels, 0.0);
    g.input = conv2d_backward_into(x, weight, out_channels, kernel, mode, grad_out, g.weight.data, g.bias);
    return g;
}

Tensor mean_pool2(const Tensor& x) {
    require_chw(x, "mean_pool2");
    const std::size_t c = x.dim(0), oh = x.dim(1) / 2, ow = x.dim(2) / 2;
    Tensor out({c, oh, ow});
    for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t xo = 0; xo < ow; ++xo) {
                out.at(ch, y, xo) = 0.25 * (x.at(ch, 2 * y, 2 * xo) + x.at(ch, 2 * y, 2 * xo + 1) +
                                            x.at(ch, 2 * y + 1, 2 * xo) + x.at(ch, 2 * y + 1, 2 * xo + 1));
            }
        }
    }
    return out;
}

Tensor mean_pool2_backward(const Tensor& x, const Tensor& g) {
    Tensor out(x.shape);
    for (std::size_t ch = 0; ch < g.dim(0); ++ch) {
        for (std::size_t y = 0; y < g.dim(1); ++y) {
            for (std::size_t xo = 0; xo < g.dim(2); ++xo) {
                const double v = 0.25 * g.at(ch, y, xo);
                out.at(ch, 2 * y, 2 * xo) = v;
                out.at(ch, 2 * y, 2 * xo + 1) = v;
                out.at(ch, 2 * y + 1, 2 * xo) = v;
                out.at(ch, 2 * y + 1, 2 * xo + 1) = v;
            }
        }
    }
    return out;
}

void dense(std::span<const double> x, std::span<const double> weight, std::span<const double> bias,
           std::span<double> y) {
    const auto n_in = static_cast<Eigen::Index>(x.size());
    const auto n_out = static_cast<Eigen::Index>(y.size());
    Eigen::Map<const RowMatrix> w(weight.data(), n_out, n_in);
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), n_in);
    Eigen::Map<const Eigen::VectorXd> bv(bias.data(), n_out);
    Eigen::Map<Eigen::VectorXd> yv(y.data(), n_out);
    yv.noalias() = w * xv;
    yv += bv;
}

void dense_backward(std::span<const double> x, std::span<const double> weight, std::span<const double> g,
                    std::span<double> grad_weight, std::span<double> grad_bias, std::span<double> grad_x) {
    const auto n_in = static_cast<Eigen::Index>(x.size());
    const auto n_out = static_cast<Eigen::Index>(g.size());
    Eigen::Map<const Eigen::VectorXd> xv(x.data(), n_in);
    Eigen::Map<const Eigen::VectorXd> gv(g.data(), n_out);
    Eigen::Map<RowMatrix> gw(grad_weight.data(), n_out, n_in);
    gw.noalias() += gv * xv.transpose();
    Eigen::Map<Eigen::VectorXd>(grad_bias.data(), n_out) += gv;
    if (!grad_x.empty()) {
        Eigen::Map<const RowMatrix> w(weight.data(), n_out, n_in);
        Eigen::Map<Eigen::VectorXd>(grad_x.data(), n_in).noalias() = w.transpose() * gv;
    }
}

void relu_inplace(std::span<double> x) {
    for (auto& v : x) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(std::span<const double> pre, std::span<double> g) {
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = pre[i] > 0.0 ? g[i] : 0.0;
}

double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

}  // namespace nflr
