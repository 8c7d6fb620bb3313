#ifndef VOXSEG_NET_HPP
#define VOXSEG_NET_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxseg/core.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

// ---------------------------------------------------------------------------
// softmax / cross-entropy
// ---------------------------------------------------------------------------

/// Floor applied inside the cross-entropy log so the loss stays finite.
constexpr double kCrossEntropyEps = 1e-12;

/// Max-shifted softmax; mathematically equal to exp(z_i)/sum_j exp(z_j).
inline std::vector<double> softmax(std::span<const double> scores) {
    require(!scores.empty(), "softmax: empty score vector");
    double zmax = scores[0];
    for (double z : scores) {
        require(std::isfinite(z), "softmax: non-finite score");
        zmax = std::max(zmax, z);
    }
    std::vector<double> probs(scores.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        probs[i] = std::exp(scores[i] - zmax);
        sum += probs[i];
    }
    for (double& p : probs) p /= sum;
    return probs;
}

/// CE = -sum_i t_i log(max(p_i, eps)) for a one-hot target class.
inline double cross_entropy(std::span<const double> probs, int target_class) {
    require(target_class >= 0 && target_class < int(probs.size()),
            "cross_entropy: target class ", target_class, " out of range");
    return -std::log(std::max(probs[std::size_t(target_class)], kCrossEntropyEps));
}

/// One-hot-vector form of the same loss.
inline double cross_entropy(std::span<const double> probs, std::span<const double> onehot) {
    require(probs.size() == onehot.size(), "cross_entropy: size mismatch");
    double ce = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i)
        if (onehot[i] != 0.0) ce -= onehot[i] * std::log(std::max(probs[i], kCrossEntropyEps));
    return ce;
}

/// Per-voxel softmax over the channel dimension.
inline Tensor4 softmax_channels(const Tensor4& scores) {
    Tensor4 probs(scores.c, scores.spatial_dims());
    const std::size_t n = scores.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
        double zmax = -std::numeric_limits<double>::infinity();
        for (int ch = 0; ch < scores.c; ++ch) zmax = std::max(zmax, scores.v[ch * n + i]);
        double sum = 0.0;
        for (int ch = 0; ch < scores.c; ++ch) {
            const double e = std::exp(scores.v[ch * n + i] - zmax);
            probs.v[ch * n + i] = e;
            sum += e;
        }
        const double inv = 1.0 / sum;
        for (int ch = 0; ch < scores.c; ++ch) probs.v[ch * n + i] *= inv;
    }
    return probs;
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

namespace nn {

/// 3-D convolution (cross-correlation) with zero same-padding, stride 1.
class Conv3d {
public:
    Conv3d(std::string name, int in_c, int out_c, int kernel, Rng& rng, bool zero_init = false)
        : name_(std::move(name)), in_c_(in_c), out_c_(out_c), k_(kernel),
          w_(std::size_t(out_c) * in_c * kernel * kernel * kernel),
          b_(std::size_t(out_c), 0.0), gw_(w_.size(), 0.0), gb_(b_.size(), 0.0) {
        require(kernel >= 1 && kernel % 2 == 1, "conv ", name_, ": kernel must be odd, got ", kernel);
        if (!zero_init) {
            // He fan-in scaling
            const double std = std::sqrt(2.0 / (double(in_c) * kernel * kernel * kernel));
            for (double& w : w_) w = rng.normal(0.0, std);
        }
    }

    const std::string& name() const { return name_; }
    int in_channels() const { return in_c_; }
    int out_channels() const { return out_c_; }
    int kernel() const { return k_; }
    std::size_t weight_count() const { return w_.size(); }
    std::size_t bias_count() const { return b_.size(); }

    std::vector<double>& weights() { return w_; }
    std::vector<double>& bias() { return b_; }
    std::vector<double>& weight_grads() { return gw_; }
    std::vector<double>& bias_grads() { return gb_; }

    Tensor4 forward(const Tensor4& x, bool cache) {
        require(x.c == in_c_, "conv ", name_, ": input has ", x.c, " channels, expected ", in_c_);
        const int nx = x.nx, ny = x.ny, nz = x.nz, r = k_ / 2;
        Tensor4 out(out_c_, x.spatial_dims());
        for (int oc = 0; oc < out_c_; ++oc) {
            for (int z = 0; z < nz; ++z) {
                for (int y = 0; y < ny; ++y) {
                    double* __restrict dst = out.row(oc, y, z);
                    const double bias = b_[std::size_t(oc)];
                    for (int xx = 0; xx < nx; ++xx) dst[xx] = bias;
                    for (int ic = 0; ic < in_c_; ++ic) {
                        for (int kz = 0; kz < k_; ++kz) {
                            const int sz = z + kz - r;
                            if (sz < 0 || sz >= nz) continue;
                            for (int ky = 0; ky < k_; ++ky) {
                                const int sy = y + ky - r;
                                if (sy < 0 || sy >= ny) continue;
                                const double* __restrict src = x.row(ic, sy, sz);
                                const double* wrow = wptr(oc, ic, kz, ky);
                                if (k_ == 3 && nx >= 2) {
                                    const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                    dst[0] += w1 * src[0] + w2 * src[1];
                                    for (int xx = 1; xx < nx - 1; ++xx)
                                        dst[xx] += w0 * src[xx - 1] + w1 * src[xx] + w2 * src[xx + 1];
                                    dst[nx - 1] += w0 * src[nx - 2] + w1 * src[nx - 1];
                                } else {
                                    for (int kx = 0; kx < k_; ++kx) {
                                        const int d = kx - r;
                                        const int x0 = std::max(0, -d), x1 = std::min(nx, nx - d);
                                        const double wv = wrow[kx];
                                        for (int xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx + d];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if (cache) x_ = x;
        return out;
    }

    Tensor4 backward(const Tensor4& dy) {
        require(dy.c == out_c_, "conv ", name_, ": gradient has ", dy.c, " channels, expected ", out_c_);
        require(x_.c == in_c_ && x_.spatial_dims() == dy.spatial_dims(),
                "conv ", name_, ": backward without matching cached forward");
        const int nx = dy.nx, ny = dy.ny, nz = dy.nz, r = k_ / 2;

        for (int oc = 0; oc < out_c_; ++oc) {
            double acc = 0.0;
            for (int z = 0; z < nz; ++z)
                for (int y = 0; y < ny; ++y) {
                    const double* g = dy.row(oc, y, z);
                    for (int xx = 0; xx < nx; ++xx) acc += g[xx];
                }
            gb_[std::size_t(oc)] += acc;
        }

        // weight gradient: correlate cached input with dy
        for (int oc = 0; oc < out_c_; ++oc) {
            for (int ic = 0; ic < in_c_; ++ic) {
                for (int kz = 0; kz < k_; ++kz) {
                    for (int ky = 0; ky < k_; ++ky) {
                        double acc[9] = {0};
                        for (int z = 0; z < nz; ++z) {
                            const int sz = z + kz - r;
                            if (sz < 0 || sz >= nz) continue;
                            for (int y = 0; y < ny; ++y) {
                                const int sy = y + ky - r;
                                if (sy < 0 || sy >= ny) continue;
                                const double* __restrict src = x_.row(ic, sy, sz);
                                const double* __restrict g = dy.row(oc, y, z);
                                if (k_ == 3 && nx >= 2) {
                                    // two partial sums per tap to break the FMA latency chains
                                    double a0 = 0.0, a1 = src[0] * g[0], a2 = src[1] * g[0];
                                    double b0 = 0.0, b1 = 0.0, b2 = 0.0;
                                    int xx = 1;
                                    for (; xx + 1 < nx - 1; xx += 2) {
                                        a0 += src[xx - 1] * g[xx];
                                        a1 += src[xx] * g[xx];
                                        a2 += src[xx + 1] * g[xx];
                                        b0 += src[xx] * g[xx + 1];
                                        b1 += src[xx + 1] * g[xx + 1];
                                        b2 += src[xx + 2] * g[xx + 1];
                                    }
                                    for (; xx < nx - 1; ++xx) {
                                        a0 += src[xx - 1] * g[xx];
                                        a1 += src[xx] * g[xx];
                                        a2 += src[xx + 1] * g[xx];
                                    }
                                    a0 += src[nx - 2] * g[nx - 1];
                                    a1 += src[nx - 1] * g[nx - 1];
                                    acc[0] += a0 + b0;
                                    acc[1] += a1 + b1;
                                    acc[2] += a2 + b2;
                                } else {
                                    for (int kx = 0; kx < k_; ++kx) {
                                        const int d = kx - r;
                                        const int x0 = std::max(0, -d), x1 = std::min(nx, nx - d);
                                        double s = 0.0;
                                        for (int xx = x0; xx < x1; ++xx) s += src[xx + d] * g[xx];
                                        acc[kx] += s;
                                    }
                                }
                            }
                        }
                        double* gd = gwptr(oc, ic, kz, ky);
                        for (int kx = 0; kx < k_; ++kx) gd[kx] += acc[kx];
                    }
                }
            }
        }

        // input gradient: full correlation with the flipped kernel
        Tensor4 dx(in_c_, dy.spatial_dims());
        for (int ic = 0; ic < in_c_; ++ic) {
            for (int z = 0; z < nz; ++z) {
                for (int y = 0; y < ny; ++y) {
                    double* __restrict dst = dx.row(ic, y, z);
                    for (int oc = 0; oc < out_c_; ++oc) {
                        for (int kz = 0; kz < k_; ++kz) {
                            const int sz = z + r - kz;
                            if (sz < 0 || sz >= nz) continue;
                            for (int ky = 0; ky < k_; ++ky) {
                                const int sy = y + r - ky;
                                if (sy < 0 || sy >= ny) continue;
                                const double* __restrict src = dy.row(oc, sy, sz);
                                const double* wrow = wptr(oc, ic, kz, ky);
                                if (k_ == 3 && nx >= 2) {
                                    const double w0 = wrow[0], w1 = wrow[1], w2 = wrow[2];
                                    dst[0] += w1 * src[0] + w0 * src[1];
                                    for (int xx = 1; xx < nx - 1; ++xx)
                                        dst[xx] += w2 * src[xx - 1] + w1 * src[xx] + w0 * src[xx + 1];
                                    dst[nx - 1] += w2 * src[nx - 2] + w1 * src[nx - 1];
                                } else {
                                    for (int kx = 0; kx < k_; ++kx) {
                                        const int d = r - kx;
                                        const int x0 = std::max(0, -d), x1 = std::min(nx, nx - d);
                                        const double wv = wrow[kx];
                                        for (int xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx + d];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        return dx;
    }

private:
    double* wptr(int oc, int ic, int kz, int ky) {
        return w_.data() + ((((std::size_t(oc) * in_c_ + ic) * k_ + kz) * k_ + ky) * k_);
    }
    double* gwptr(int oc, int ic, int kz, int ky) {
        return gw_.data() + ((((std::size_t(oc) * in_c_ + ic) * k_ + kz) * k_ + ky) * k_);
    }

    std::string name_;
    int in_c_, out_c_, k_;
    std::vector<double> w_, b_, gw_, gb_;
    Tensor4 x_;
};

class Relu {
public:
    Tensor4 forward(const Tensor4& x, bool cache) {
        Tensor4 y(x.c, x.spatial_dims());
        if (cache) mask_.assign(x.size(), 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x.v[i] > 0.0) {
                y.v[i] = x.v[i];
                if (cache) mask_[i] = 1;
            }
        }
        return y;
    }

    const std::vector<std::uint8_t>& mask() const { return mask_; }

    Tensor4 backward(const Tensor4& dy) {
        require(mask_.size() == dy.size(), "relu: backward without matching cached forward");
        Tensor4 dx(dy.c, dy.spatial_dims());
        for (std::size_t i = 0; i < dy.size(); ++i) dx.v[i] = mask_[i] ? dy.v[i] : 0.0;
        return dx;
    }

private:
    std::vector<std::uint8_t> mask_;
};

/// Non-overlapping 2^3 max pooling; dims must be even (the network builder
/// pads inputs so this always holds).
class MaxPool3d {
public:
    Tensor4 forward(const Tensor4& x, bool cache) {
        require(x.nx % 2 == 0 && x.ny % 2 == 0 && x.nz % 2 == 0,
                "maxpool: spatial dims must be even, got ", x.spatial_dims());
        Tensor4 out(x.c, {x.nx / 2, x.ny / 2, x.nz / 2});
        if (cache) {
            require(x.size() <= std::numeric_limits<std::uint32_t>::max(), "maxpool: tensor too large");
            argmax_.assign(out.size(), 0);
            in_size_ = x.size();
        }
        std::size_t oi = 0;
        for (int ch = 0; ch < x.c; ++ch)
            for (int oz = 0; oz < out.nz; ++oz)
                for (int oy = 0; oy < out.ny; ++oy)
                    for (int ox = 0; ox < out.nx; ++ox, ++oi) {
                        double best = -std::numeric_limits<double>::infinity();
                        std::size_t bidx = 0;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx) {
                                    const std::size_t idx =
                                        x.index(ch, 2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                                    if (x.v[idx] > best) { // first max wins ties
                                        best = x.v[idx];
                                        bidx = idx;
                                    }
                                }
                        out.v[oi] = best;
                        if (cache) argmax_[oi] = std::uint32_t(bidx);
                    }
        return out;
    }

    Tensor4 backward(const Tensor4& dy) {
        require(argmax_.size() == dy.size(), "maxpool: backward without matching cached forward");
        Tensor4 dx(dy.c, {dy.nx * 2, dy.ny * 2, dy.nz * 2});
        require(dx.size() == in_size_, "maxpool: backward shape mismatch");
        for (std::size_t i = 0; i < dy.size(); ++i) dx.v[argmax_[i]] += dy.v[i];
        return dx;
    }

    const std::vector<std::uint32_t>& argmax() const { return argmax_; }

private:
    std::vector<std::uint32_t> argmax_;
    std::size_t in_size_ = 0;
};

enum class Upsampling { nearest, trilinear };

/// 2x upsampling. Nearest-neighbor repetition by default; trilinear is a
/// configuration option.
class Upsample3d {
public:
    explicit Upsample3d(Upsampling mode) : mode_(mode) {}

    Tensor4 forward(const Tensor4& x, bool cache) {
        if (cache) in_dims_ = x.spatial_dims();
        Tensor4 out(x.c, {x.nx * 2, x.ny * 2, x.nz * 2});
        if (mode_ == Upsampling::nearest) {
            for (int ch = 0; ch < x.c; ++ch)
                for (int z = 0; z < out.nz; ++z)
                    for (int y = 0; y < out.ny; ++y) {
                        const double* src = x.row(ch, y / 2, z / 2);
                        double* dst = out.row(ch, y, z);
                        for (int xx = 0; xx < out.nx; ++xx) dst[xx] = src[xx / 2];
                    }
            return out;
        }
        const auto tx = taps(x.nx), ty = taps(x.ny), tz = taps(x.nz);
        for (int ch = 0; ch < x.c; ++ch)
            for (int z = 0; z < out.nz; ++z)
                for (int y = 0; y < out.ny; ++y)
                    for (int xx = 0; xx < out.nx; ++xx) {
                        double acc = 0.0;
                        for (int az = 0; az < 2; ++az)
                            for (int ay = 0; ay < 2; ++ay)
                                for (int ax = 0; ax < 2; ++ax)
                                    acc += tz[z].w(az) * ty[y].w(ay) * tx[xx].w(ax) *
                                           x.at(ch, tx[xx].i(ax), ty[y].i(ay), tz[z].i(az));
                        out.at(ch, xx, y, z) = acc;
                    }
        return out;
    }

    Tensor4 backward(const Tensor4& dy) {
        require(in_dims_.count() > 0, "upsample: backward without cached forward");
        require(dy.spatial_dims() == Dims3{in_dims_.nx * 2, in_dims_.ny * 2, in_dims_.nz * 2},
                "upsample: backward shape mismatch");
        Tensor4 dx(dy.c, in_dims_);
        if (mode_ == Upsampling::nearest) {
            for (int ch = 0; ch < dy.c; ++ch)
                for (int z = 0; z < dy.nz; ++z)
                    for (int y = 0; y < dy.ny; ++y) {
                        const double* g = dy.row(ch, y, z);
                        double* dst = dx.row(ch, y / 2, z / 2);
                        for (int xx = 0; xx < dy.nx; ++xx) dst[xx / 2] += g[xx];
                    }
            return dx;
        }
        const auto tx = taps(in_dims_.nx), ty = taps(in_dims_.ny), tz = taps(in_dims_.nz);
        for (int ch = 0; ch < dy.c; ++ch)
            for (int z = 0; z < dy.nz; ++z)
                for (int y = 0; y < dy.ny; ++y)
                    for (int xx = 0; xx < dy.nx; ++xx) {
                        const double g = dy.at(ch, xx, y, z);
                        for (int az = 0; az < 2; ++az)
                            for (int ay = 0; ay < 2; ++ay)
                                for (int ax = 0; ax < 2; ++ax)
                                    dx.at(ch, tx[xx].i(ax), ty[y].i(ay), tz[z].i(az)) +=
                                        tz[z].w(az) * ty[y].w(ay) * tx[xx].w(ax) * g;
                    }
        return dx;
    }

private:
    struct Tap {
        int lo, hi;
        double whi;
        int i(int a) const { return a ? hi : lo; }
        double w(int a) const { return a ? whi : 1.0 - whi; }
    };

    // cell-centered source coordinate for output index j: (j + 0.5)/2 - 0.5
    static std::vector<Tap> taps(int n_src) {
        std::vector<Tap> t(std::size_t(n_src) * 2);
        for (int j = 0; j < n_src * 2; ++j) {
            const double src = (j + 0.5) * 0.5 - 0.5;
            if (src <= 0.0) {
                t[j] = {0, 0, 0.0};
            } else if (src >= n_src - 1) {
                t[j] = {n_src - 1, n_src - 1, 0.0};
            } else {
                const int lo = int(std::floor(src));
                t[j] = {lo, lo + 1, src - lo};
            }
        }
        return t;
    }

    Upsampling mode_;
    Dims3 in_dims_{};
};

/// Inverted dropout: zero with probability p and scale survivors by 1/(1-p)
/// in train mode; identity at inference.
class Dropout {
public:
    explicit Dropout(double p) : p_(p) {
        require(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1), got ", p);
    }

    double probability() const { return p_; }

    Tensor4 forward(const Tensor4& x, bool train, bool cache, Rng& rng) {
        if (!train || p_ == 0.0) {
            if (cache) mask_.clear(); // identity backward
            return x;
        }
        const double scale = 1.0 / (1.0 - p_);
        Tensor4 y(x.c, x.spatial_dims());
        if (cache) mask_.assign(x.size(), 0);
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (rng.uniform01() >= p_) {
                y.v[i] = x.v[i] * scale;
                if (cache) mask_[i] = 1;
            }
        }
        return y;
    }

    Tensor4 backward(const Tensor4& dy) {
        if (mask_.empty()) return dy;
        require(mask_.size() == dy.size(), "dropout: backward without matching cached forward");
        const double scale = 1.0 / (1.0 - p_);
        Tensor4 dx(dy.c, dy.spatial_dims());
        for (std::size_t i = 0; i < dy.size(); ++i) dx.v[i] = mask_[i] ? dy.v[i] * scale : 0.0;
        return dx;
    }

private:
    double p_;
    std::vector<std::uint8_t> mask_;
};

/// Channel concatenation, a's channels first.
inline Tensor4 concat(const Tensor4& a, const Tensor4& b) {
    require(a.spatial_dims() == b.spatial_dims(), "concat: spatial dims differ, ", a.spatial_dims(),
            " vs ", b.spatial_dims());
    Tensor4 out(a.c + b.c, a.spatial_dims());
    std::copy(a.v.begin(), a.v.end(), out.v.begin());
    std::copy(b.v.begin(), b.v.end(), out.v.begin() + std::ptrdiff_t(a.v.size()));
    return out;
}

/// Inverse of concat: split the leading `c_first` channels off.
inline std::pair<Tensor4, Tensor4> split_channels(const Tensor4& x, int c_first) {
    require(c_first > 0 && c_first < x.c, "split_channels: bad split ", c_first, " of ", x.c);
    Tensor4 a(c_first, x.spatial_dims());
    Tensor4 b(x.c - c_first, x.spatial_dims());
    std::copy(x.v.begin(), x.v.begin() + std::ptrdiff_t(a.v.size()), a.v.begin());
    std::copy(x.v.begin() + std::ptrdiff_t(a.v.size()), x.v.end(), b.v.begin());
    return {std::move(a), std::move(b)};
}

} // namespace nn

// ---------------------------------------------------------------------------
// network
// ---------------------------------------------------------------------------

enum class Mode { train, infer };

using nn::Upsampling;

struct NetworkConfig {
    int in_channels = 1;
    int num_classes = 21; // 20 organs + background
    int depth = 3;
    int base_channels = 8;
    int kernel = 3;
    double dropout_p = 0.5; // bottleneck only
    Upsampling upsampling = Upsampling::nearest;
    std::uint64_t seed = 0;

    friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;

    void validate() const {
        require(depth >= 1, "network: depth must be >= 1, got ", depth);
        require(num_classes >= 2, "network: num_classes must be >= 2, got ", num_classes);
        require(base_channels >= 1, "network: base_channels must be >= 1, got ", base_channels);
        require(in_channels >= 1, "network: in_channels must be >= 1, got ", in_channels);
        require(dropout_p >= 0.0 && dropout_p < 1.0, "network: dropout must be in [0,1), got ", dropout_p);
        require(kernel >= 1 && kernel % 2 == 1, "network: kernel must be odd, got ", kernel);
    }
};

/// Named view into one parameter array and its gradient.
struct ParamView {
    std::string name;
    double* values;
    double* grads;
    std::size_t size;
    std::vector<std::size_t> shape; // [out, in, k, k, k] for weights, [out] for biases
};

/// U-shaped 3-D encoder-decoder: per level two 3^3 convs + ReLU and a 2^3
/// max pool; dropout at the bottleneck; nearest 2x upsampling with skip
/// concatenation on the way back up; 1^3 conv head to class scores. With
/// depth 3 the layer inventory (convolution, pooling, upsampling, dropout
/// and merging layers) counts 25 layers.
class Network {
public:
    explicit Network(const NetworkConfig& cfg)
        : cfg_(validated(cfg)), rng_(derive_seed(cfg.seed, "weight-init")), drop_(cfg.dropout_p) {
        int prev = cfg.in_channels;
        for (int i = 0; i < cfg.depth; ++i) {
            const int ch = cfg.base_channels << i;
            enc_.push_back({nn::Conv3d(cat("enc", i, ".conv1"), prev, ch, cfg.kernel, rng_),
                            nn::Conv3d(cat("enc", i, ".conv2"), ch, ch, cfg.kernel, rng_)});
            prev = ch;
        }
        const int bott = cfg.base_channels << cfg.depth;
        bott_ = std::make_unique<Block>(Block{nn::Conv3d("bottleneck.conv1", prev, bott, cfg.kernel, rng_),
                                              nn::Conv3d("bottleneck.conv2", bott, bott, cfg.kernel, rng_)});
        for (int i = 0; i < cfg.depth; ++i) {
            const int skip = cfg.base_channels << i;
            const int up = cfg.base_channels << (i + 1);
            dec_.push_back({nn::Upsample3d(cfg.upsampling),
                            nn::Conv3d(cat("dec", i, ".conv1"), up + skip, skip, cfg.kernel, rng_),
                            nn::Conv3d(cat("dec", i, ".conv2"), skip, skip, cfg.kernel, rng_)});
        }
        // zero-initialized head: an untrained net predicts the uniform distribution
        head_ = std::make_unique<nn::Conv3d>("head", cfg.base_channels, cfg.num_classes, 1, rng_,
                                             /*zero_init=*/true);
    }

    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;
    Network(Network&&) = default;
    Network& operator=(Network&&) = default;

    const NetworkConfig& config() const { return cfg_; }

    /// Paper-style layer inventory: convs, pools, upsamples, dropout, merges.
    int layer_count() const { return 7 * cfg_.depth + 4; }

    /// Per-voxel class probabilities; spatial dims match the input. Inputs
    /// whose dims are not divisible by 2^depth are zero-padded internally and
    /// the output is cropped back.
    Tensor4 forward(const Tensor4& x, Mode mode) {
        const Dims3 orig = x.spatial_dims();
        Tensor4 probs = run_padded(x, mode);
        return crop_spatial(probs, orig);
    }

    /// One SGD step on a single sample; returns the pre-update loss.
    double train_step(const Tensor4& x, const LabelMap& target, double lr) {
        const double loss = compute_gradients(x, target);
        sgd_step(lr);
        return loss;
    }

    /// Forward + backward without the weight update; gradients accumulate
    /// into the parameter views (zeroed first here).
    double compute_gradients(const Tensor4& x, const LabelMap& target) {
        check_target(x, target);
        zero_gradients();
        const Dims3 orig = x.spatial_dims();
        const Tensor4 probs = run_padded(x, Mode::train);
        const std::size_t n_padded = probs.spatial_size();
        const std::size_t n_orig = orig.count();
        const double inv_n = 1.0 / double(n_orig);

        // mean cross-entropy over the original voxels; padded voxels carry no
        // loss and no gradient
        double loss = 0.0;
        Tensor4 dz(probs.c, probs.spatial_dims());
        for (int z = 0; z < orig.nz; ++z)
            for (int y = 0; y < orig.ny; ++y)
                for (int xx = 0; xx < orig.nx; ++xx) {
                    const std::size_t pi = probs.index(0, xx, y, z);
                    const int cls = target.at(xx, y, z);
                    require(cls < probs.c, "train: target class ", cls, " >= ", probs.c, " classes");
                    loss -= std::log(std::max(probs.v[std::size_t(cls) * n_padded + pi], kCrossEntropyEps));
                    for (int ch = 0; ch < probs.c; ++ch) {
                        const std::size_t idx = std::size_t(ch) * n_padded + pi;
                        dz.v[idx] = (probs.v[idx] - (ch == cls ? 1.0 : 0.0)) * inv_n;
                    }
                }
        loss *= inv_n;
        require(std::isfinite(loss), "train: non-finite loss");
        backpropagate(dz);
        return loss;
    }

    /// Hash of the discrete activation state (ReLU signs, pooling argmaxes)
    /// left by the last train-mode forward. Two evaluations lie in the same
    /// differentiable region of the loss iff their signatures match.
    std::uint64_t activation_signature() const {
        std::uint64_t h = 0xCBF29CE484222325ull;
        const auto mix = [&h](const void* p, std::size_t n) {
            const auto* b = static_cast<const unsigned char*>(p);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= b[i];
                h *= 0x100000001B3ull;
            }
        };
        const auto mix_mask = [&](const std::vector<std::uint8_t>& m) { mix(m.data(), m.size()); };
        for (const auto& e : enc_) {
            mix_mask(e.relu1.mask());
            mix_mask(e.relu2.mask());
            mix(e.pool.argmax().data(), e.pool.argmax().size() * sizeof(std::uint32_t));
        }
        mix_mask(bott_->relu1.mask());
        mix_mask(bott_->relu2.mask());
        for (const auto& d : dec_) {
            mix_mask(d.relu1.mask());
            mix_mask(d.relu2.mask());
        }
        return h;
    }

    /// Mean per-voxel cross-entropy without touching gradients or caches.
    double loss(const Tensor4& x, const LabelMap& target, Mode mode = Mode::infer) {
        check_target(x, target);
        const Tensor4 probs = forward(x, mode);
        const std::size_t n = probs.spatial_size();
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const int cls = target.data[i];
            require(cls < probs.c, "loss: target class ", cls, " >= ", probs.c, " classes");
            total -= std::log(std::max(probs.v[std::size_t(cls) * n + i], kCrossEntropyEps));
        }
        return total / double(n);
    }

    void zero_gradients() {
        for (auto& p : parameters()) std::fill(p.grads, p.grads + p.size, 0.0);
    }

    void sgd_step(double lr) {
        for (auto& p : parameters()) {
            for (std::size_t i = 0; i < p.size; ++i) {
                require(std::isfinite(p.grads[i]), "sgd: non-finite gradient in ", p.name);
                p.values[i] -= lr * p.grads[i];
            }
        }
    }

    /// Stable name -> flat array registry, in serialization order.
    std::vector<ParamView> parameters() {
        std::vector<ParamView> out;
        auto add = [&out](nn::Conv3d& c) {
            const std::size_t k = std::size_t(c.kernel());
            out.push_back({c.name() + ".weight", c.weights().data(), c.weight_grads().data(),
                           c.weights().size(),
                           {std::size_t(c.out_channels()), std::size_t(c.in_channels()), k, k, k}});
            out.push_back({c.name() + ".bias", c.bias().data(), c.bias_grads().data(),
                           c.bias().size(), {std::size_t(c.out_channels())}});
        };
        for (auto& e : enc_) {
            add(e.conv1);
            add(e.conv2);
        }
        add(bott_->conv1);
        add(bott_->conv2);
        for (auto& d : dec_) {
            add(d.conv1);
            add(d.conv2);
        }
        add(*head_);
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p.size;
        return n;
    }

    /// Analytic parameter count from the configuration alone.
    static std::size_t expected_parameter_count(const NetworkConfig& cfg) {
        const auto conv = [&cfg](std::size_t in, std::size_t out, std::size_t k) {
            return out * in * k * k * k + out;
        };
        const std::size_t k = std::size_t(cfg.kernel);
        std::size_t n = 0;
        std::size_t prev = std::size_t(cfg.in_channels);
        for (int i = 0; i < cfg.depth; ++i) {
            const std::size_t ch = std::size_t(cfg.base_channels) << i;
            n += conv(prev, ch, k) + conv(ch, ch, k);
            prev = ch;
        }
        const std::size_t bott = std::size_t(cfg.base_channels) << cfg.depth;
        n += conv(prev, bott, k) + conv(bott, bott, k);
        for (int i = 0; i < cfg.depth; ++i) {
            const std::size_t skip = std::size_t(cfg.base_channels) << i;
            const std::size_t up = std::size_t(cfg.base_channels) << (i + 1);
            n += conv(up + skip, skip, k) + conv(skip, skip, k);
        }
        n += conv(std::size_t(cfg.base_channels), std::size_t(cfg.num_classes), 1);
        return n;
    }

private:
    struct Block {
        nn::Conv3d conv1, conv2;
        nn::Relu relu1{}, relu2{};

        Tensor4 forward(const Tensor4& x, bool cache) {
            return relu2.forward(conv2.forward(relu1.forward(conv1.forward(x, cache), cache), cache),
                                 cache);
        }
        Tensor4 backward(const Tensor4& dy) {
            return conv1.backward(relu1.backward(conv2.backward(relu2.backward(dy))));
        }
    };
    struct Enc {
        nn::Conv3d conv1, conv2;
        nn::Relu relu1{}, relu2{};
        nn::MaxPool3d pool{};

        Tensor4 forward_block(const Tensor4& x, bool cache) {
            return relu2.forward(conv2.forward(relu1.forward(conv1.forward(x, cache), cache), cache),
                                 cache);
        }
        Tensor4 backward_block(const Tensor4& dy) {
            return conv1.backward(relu1.backward(conv2.backward(relu2.backward(dy))));
        }
    };
    struct Dec {
        nn::Upsample3d up;
        nn::Conv3d conv1, conv2;
        nn::Relu relu1{}, relu2{};

        Tensor4 forward_block(const Tensor4& x, bool cache) {
            return relu2.forward(conv2.forward(relu1.forward(conv1.forward(x, cache), cache), cache),
                                 cache);
        }
        Tensor4 backward_block(const Tensor4& dy) {
            return conv1.backward(relu1.backward(conv2.backward(relu2.backward(dy))));
        }
    };

    static NetworkConfig validated(NetworkConfig cfg) {
        cfg.validate();
        return cfg;
    }

    void check_target(const Tensor4& x, const LabelMap& target) const {
        require(target.dims == x.spatial_dims(), "target dims ", target.dims,
                " do not match input dims ", x.spatial_dims());
    }

    static Dims3 padded_dims(Dims3 d, int multiple) {
        const auto up = [multiple](int n) { return ((n + multiple - 1) / multiple) * multiple; };
        return {up(d.nx), up(d.ny), up(d.nz)};
    }

    static Tensor4 pad_spatial(const Tensor4& x, Dims3 to) {
        if (x.spatial_dims() == to) return x;
        Tensor4 out(x.c, to);
        for (int ch = 0; ch < x.c; ++ch)
            for (int z = 0; z < x.nz; ++z)
                for (int y = 0; y < x.ny; ++y)
                    std::copy(x.row(ch, y, z), x.row(ch, y, z) + x.nx, out.row(ch, y, z));
        return out;
    }

    static Tensor4 crop_spatial(const Tensor4& x, Dims3 to) {
        if (x.spatial_dims() == to) return x;
        Tensor4 out(x.c, to);
        for (int ch = 0; ch < x.c; ++ch)
            for (int z = 0; z < to.nz; ++z)
                for (int y = 0; y < to.ny; ++y)
                    std::copy(x.row(ch, y, z), x.row(ch, y, z) + to.nx, out.row(ch, y, z));
        return out;
    }

    Tensor4 run_padded(const Tensor4& x, Mode mode) {
        require(x.c == cfg_.in_channels, "forward: input has ", x.c, " channels, expected ",
                cfg_.in_channels);
        const bool cache = (mode == Mode::train);
        Tensor4 a = pad_spatial(x, padded_dims(x.spatial_dims(), 1 << cfg_.depth));
        skips_.clear();
        for (auto& e : enc_) {
            a = e.forward_block(a, cache);
            skips_.push_back(a);
            a = e.pool.forward(a, cache);
        }
        a = bott_->forward(a, cache);
        a = drop_.forward(a, mode == Mode::train, cache, rng_);
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            a = dec_[std::size_t(i)].up.forward(a, cache);
            a = nn::concat(a, skips_[std::size_t(i)]);
            a = dec_[std::size_t(i)].forward_block(a, cache);
        }
        const Tensor4 scores = head_->forward(a, cache);
        if (!cache) skips_.clear();
        return softmax_channels(scores);
    }

    void backpropagate(const Tensor4& dz) {
        // softmax + cross-entropy gradient arrives as dz = (p - t)/n
        Tensor4 d = head_->backward(dz);
        std::vector<Tensor4> skip_grads(std::size_t(cfg_.depth));
        for (int i = 0; i < cfg_.depth; ++i) {
            auto& dec = dec_[std::size_t(i)];
            d = dec.backward_block(d);
            const int up_c = cfg_.base_channels << (i + 1);
            auto [d_up, d_skip] = nn::split_channels(d, up_c);
            skip_grads[std::size_t(i)] = std::move(d_skip);
            d = dec.up.backward(d_up);
        }
        d = drop_.backward(d);
        d = bott_->backward(d);
        for (int i = cfg_.depth - 1; i >= 0; --i) {
            d = enc_[std::size_t(i)].pool.backward(d);
            const Tensor4& sg = skip_grads[std::size_t(i)];
            for (std::size_t j = 0; j < d.size(); ++j) d.v[j] += sg.v[j];
            d = enc_[std::size_t(i)].backward_block(d);
        }
    }

    NetworkConfig cfg_;
    Rng rng_;
    nn::Dropout drop_;
    std::vector<Enc> enc_;
    std::unique_ptr<Block> bott_;
    std::vector<Dec> dec_;
    std::unique_ptr<nn::Conv3d> head_;
    std::vector<Tensor4> skips_;
};

// ---------------------------------------------------------------------------
// gradient check
// ---------------------------------------------------------------------------

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t params_checked = 0;
    std::size_t params_skipped = 0; // probe crossed a ReLU or argmax boundary
    std::string worst_param;
};

/// Compare analytic gradients against central finite differences. Checks all
/// parameters up to `max_params`, then a seeded random subset. Dropout must
/// be disabled. Parameters whose +/-eps probes flip a ReLU sign or a pooling
/// argmax are skipped and counted: the loss is not differentiable across
/// those boundaries, so the central difference does not estimate the
/// gradient there. When `use_existing_gradients` is set the current gradient
/// buffers are compared instead of freshly computed ones (negative-control
/// hook for tests).
inline GradCheckResult gradient_check(Network& net, const Tensor4& x, const LabelMap& target,
                                      double eps = 1e-4, std::size_t max_params = 4000,
                                      std::uint64_t seed = 0, bool use_existing_gradients = false) {
    require(net.config().dropout_p == 0.0, "gradient_check: dropout must be disabled");
    if (!use_existing_gradients) net.compute_gradients(x, target);

    auto params = net.parameters();
    std::vector<std::pair<std::size_t, std::size_t>> slots; // (param index, offset)
    for (std::size_t pi = 0; pi < params.size(); ++pi)
        for (std::size_t i = 0; i < params[pi].size; ++i) slots.emplace_back(pi, i);

    if (slots.size() > max_params) {
        Rng rng(derive_seed(seed, "gradcheck-subset"));
        for (std::size_t i = 0; i < max_params; ++i) {
            const std::size_t j = i + std::size_t(rng.below(slots.size() - i));
            std::swap(slots[i], slots[j]);
        }
        slots.resize(max_params);
    }

    net.loss(x, target, Mode::train);
    const std::uint64_t sig0 = net.activation_signature();

    GradCheckResult result;
    for (const auto& [pi, off] : slots) {
        auto& p = params[pi];
        const double saved = p.values[off];
        p.values[off] = saved + eps;
        const double lp = net.loss(x, target, Mode::train);
        const std::uint64_t sigp = net.activation_signature();
        p.values[off] = saved - eps;
        const double lm = net.loss(x, target, Mode::train);
        const std::uint64_t sigm = net.activation_signature();
        p.values[off] = saved;
        if (sigp != sig0 || sigm != sig0) {
            ++result.params_skipped;
            continue;
        }
        const double numeric = (lp - lm) / (2.0 * eps);
        const double analytic = p.grads[off];
        const double rel = std::abs(analytic - numeric) /
                           std::max(std::abs(analytic) + std::abs(numeric), 1e-6);
        if (rel > result.max_rel_error) {
            result.max_rel_error = rel;
            result.worst_param = cat(p.name, "[", off, "]");
        }
        ++result.params_checked;
    }
    return result;
}

} // namespace voxseg

#endif // VOXSEG_NET_HPP
