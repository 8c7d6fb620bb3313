#ifndef VOXSEG_TENSOR_HPP
#define VOXSEG_TENSOR_HPP

#include <cmath>
#include <vector>

#include "voxseg/core.hpp"

namespace voxseg {

/// Channel-major feature map: data[ch][z][y][x], x fastest. Double precision
/// throughout so gradients can be checked against finite differences.
struct Tensor4 {
    int c = 0, nx = 0, ny = 0, nz = 0;
    std::vector<double> v;

    Tensor4() = default;

    Tensor4(int channels, Dims3 spatial)
        : c(channels), nx(spatial.nx), ny(spatial.ny), nz(spatial.nz),
          v(std::size_t(channels) * spatial.count(), 0.0) {
        require(channels >= 1 && spatial.count() >= 1, "Tensor4: bad shape c=", channels,
                " spatial=", spatial);
    }

    Dims3 spatial_dims() const { return {nx, ny, nz}; }
    std::size_t spatial_size() const { return std::size_t(nx) * ny * nz; }
    std::size_t size() const { return v.size(); }

    std::size_t index(int ch, int x, int y, int z) const {
        return ((std::size_t(ch) * nz + z) * ny + y) * nx + x;
    }

    double& at(int ch, int x, int y, int z) { return v[index(ch, x, y, z)]; }
    double at(int ch, int x, int y, int z) const { return v[index(ch, x, y, z)]; }

    double* row(int ch, int y, int z) { return v.data() + index(ch, 0, y, z); }
    const double* row(int ch, int y, int z) const { return v.data() + index(ch, 0, y, z); }

    bool same_shape(const Tensor4& o) const {
        return c == o.c && nx == o.nx && ny == o.ny && nz == o.nz;
    }

    friend bool operator==(const Tensor4&, const Tensor4&) = default;
};

/// Wrap a single-channel intensity volume as network input.
inline Tensor4 tensor_from_volume(const Volume& vol) {
    Tensor4 t(1, vol.dims);
    for (std::size_t i = 0; i < vol.size(); ++i) t.v[i] = double(vol.data[i]);
    return t;
}

/// Extract one channel as a Volume (probability map, feature map, ...).
inline Volume channel_as_volume(const Tensor4& t, int ch, Vec3d spacing) {
    require(ch >= 0 && ch < t.c, "channel_as_volume: channel ", ch, " out of range [0,", t.c, ")");
    Volume out(t.spatial_dims(), spacing);
    const double* src = t.v.data() + std::size_t(ch) * t.spatial_size();
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = float(src[i]);
    return out;
}

} // namespace voxseg

#endif // VOXSEG_TENSOR_HPP
