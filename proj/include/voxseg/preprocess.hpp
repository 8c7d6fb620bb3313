#ifndef VOXSEG_PREPROCESS_HPP
#define VOXSEG_PREPROCESS_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "voxseg/core.hpp"

namespace voxseg {

/// CT air value, used as the default out-of-bounds fill for raw intensities.
constexpr float kAirIntensity = -1000.0f;

/// Clamp intensities to [-w, +w] and map affinely onto [0, 1].
/// Values at or beyond the window bounds saturate to exactly 0 or 1.
inline Volume window_normalize(const Volume& vol, WindowSpec window) {
    const double w = window.half_width;
    require(w > 0.0, "window_normalize: half width must be positive, got ", w);
    Volume out(vol.dims, vol.spacing);
    const double inv = 1.0 / (2.0 * w);
    for (int z = 0; z < vol.dims.nz; ++z)
        for (int y = 0; y < vol.dims.ny; ++y)
            for (int x = 0; x < vol.dims.nx; ++x) {
                const double v = vol.at(x, y, z);
                if (!std::isfinite(v))
                    fail("window_normalize: non-finite intensity at voxel ", Vec3i{x, y, z});
                const double c = std::clamp(v, -w, w);
                out.at(x, y, z) = float((c + w) * inv);
            }
    return out;
}

/// Extract the box region; voxels outside the source extent are filled with
/// pad_value. The box may extend past the source but must intersect it.
template <typename T>
Grid3<T> crop(const Grid3<T>& vol, const CropBox& box, T pad_value) {
    require(box.valid(), "crop: degenerate box lo=", box.lo, " hi=", box.hi);
    require(box.overlaps(vol.extent()), "crop: box lo=", box.lo, " hi=", box.hi,
            " lies entirely outside volume of dims ", vol.dims);
    Grid3<T> out(box.dims(), vol.spacing, pad_value);
    const int x0 = std::max(box.lo.x, 0), x1 = std::min(box.hi.x, vol.dims.nx);
    const int y0 = std::max(box.lo.y, 0), y1 = std::min(box.hi.y, vol.dims.ny);
    const int z0 = std::max(box.lo.z, 0), z1 = std::min(box.hi.z, vol.dims.nz);
    for (int z = z0; z < z1; ++z)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                out.at(x - box.lo.x, y - box.lo.y, z - box.lo.z) = vol.at(x, y, z);
    return out;
}

namespace detail {

// round-half-away-from-zero; extents are positive so llround does the job
inline int mm_to_voxels(double extent_mm, double spacing_mm) {
    return std::max(1, int(std::llround(extent_mm / spacing_mm)));
}

// Place a span of `extent` voxels centered on `center`, shifted as little as
// possible to stay within [0, n).
inline void place_span(int center, int extent, int n, int& lo, int& hi) {
    if (extent >= n) {
        lo = 0;
        hi = n;
        return;
    }
    lo = center - extent / 2;
    hi = lo + extent;
    if (lo < 0) {
        lo = 0;
        hi = extent;
    } else if (hi > n) {
        hi = n;
        lo = n - extent;
    }
}

} // namespace detail

/// Convert a physical extent in mm to a voxel box centered on `center`,
/// clamped to the given volume dims. Covers at least one voxel per axis.
inline CropBox mm_box_around(Vec3i center, Vec3d extent_mm, Vec3d spacing, Dims3 dims) {
    require(extent_mm.x > 0 && extent_mm.y > 0 && extent_mm.z > 0,
            "mm_box_around: extent must be positive, got ", extent_mm);
    const int ex = detail::mm_to_voxels(extent_mm.x, spacing.x);
    const int ey = detail::mm_to_voxels(extent_mm.y, spacing.y);
    const int ez = detail::mm_to_voxels(extent_mm.z, spacing.z);
    CropBox box;
    detail::place_span(center.x, ex, dims.nx, box.lo.x, box.hi.x);
    detail::place_span(center.y, ey, dims.ny, box.lo.y, box.hi.y);
    detail::place_span(center.z, ez, dims.nz, box.lo.z, box.hi.z);
    return box;
}

/// Mean voxel coordinate of a class, rounded to the nearest voxel.
inline Vec3i center_of_mass(const LabelMap& mask, int cls) {
    double sx = 0, sy = 0, sz = 0;
    std::int64_t n = 0;
    for (int z = 0; z < mask.dims.nz; ++z)
        for (int y = 0; y < mask.dims.ny; ++y)
            for (int x = 0; x < mask.dims.nx; ++x)
                if (mask.at(x, y, z) == cls) {
                    sx += x;
                    sy += y;
                    sz += z;
                    ++n;
                }
    require(n > 0, "center_of_mass: no voxels of class ", cls);
    return {int(std::llround(sx / double(n))), int(std::llround(sy / double(n))),
            int(std::llround(sz / double(n)))};
}

enum class Axis { X, Y, Z };
enum class Interp { trilinear, nearest };

namespace detail {

struct Mat3 {
    double m[3][3];
};

inline Mat3 rotation_matrix(Axis axis, double angle_deg) {
    double c, s;
    if (std::fmod(angle_deg, 90.0) == 0.0) {
        // exact values at right angles so those rotations are pure index permutations
        static constexpr double cq[4] = {1, 0, -1, 0};
        static constexpr double sq[4] = {0, 1, 0, -1};
        const int q = ((int(std::llround(angle_deg / 90.0)) % 4) + 4) % 4;
        c = cq[q];
        s = sq[q];
    } else {
        const double rad = angle_deg * 3.14159265358979323846 / 180.0;
        c = std::cos(rad);
        s = std::sin(rad);
    }
    switch (axis) {
        case Axis::X: return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
        case Axis::Y: return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
        default: return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    }
}

template <typename T>
double interp_trilinear(const Grid3<T>& vol, double qx, double qy, double qz) {
    // caller guarantees q within [0, n-1] per axis
    const auto cell = [](double q, int n) {
        int i0 = std::min(int(std::floor(q)), n - 2);
        if (n == 1) i0 = 0;
        if (i0 < 0) i0 = 0;
        return std::pair<int, double>{i0, q - i0};
    };
    const auto [x0, fx] = cell(qx, vol.dims.nx);
    const auto [y0, fy] = cell(qy, vol.dims.ny);
    const auto [z0, fz] = cell(qz, vol.dims.nz);
    const int x1 = std::min(x0 + 1, vol.dims.nx - 1);
    const int y1 = std::min(y0 + 1, vol.dims.ny - 1);
    const int z1 = std::min(z0 + 1, vol.dims.nz - 1);
    const double c000 = vol.at(x0, y0, z0), c100 = vol.at(x1, y0, z0);
    const double c010 = vol.at(x0, y1, z0), c110 = vol.at(x1, y1, z0);
    const double c001 = vol.at(x0, y0, z1), c101 = vol.at(x1, y0, z1);
    const double c011 = vol.at(x0, y1, z1), c111 = vol.at(x1, y1, z1);
    const double c00 = c000 + fx * (c100 - c000);
    const double c10 = c010 + fx * (c110 - c010);
    const double c01 = c001 + fx * (c101 - c001);
    const double c11 = c011 + fx * (c111 - c011);
    const double c0 = c00 + fy * (c10 - c00);
    const double c1 = c01 + fy * (c11 - c01);
    return c0 + fz * (c1 - c0);
}

} // namespace detail

/// Rotate about the grid center (inverse-mapping resample). Dims are
/// preserved; samples that fall outside the source take `fill`.
/// Use trilinear for intensities and nearest for label maps.
template <typename T>
Grid3<T> rotate(const Grid3<T>& vol, Axis axis, double angle_deg, Interp mode, T fill) {
    require(std::isfinite(angle_deg), "rotate: non-finite angle");
    const detail::Mat3 r = detail::rotation_matrix(axis, angle_deg);
    const double cx = (vol.dims.nx - 1) / 2.0;
    const double cy = (vol.dims.ny - 1) / 2.0;
    const double cz = (vol.dims.nz - 1) / 2.0;
    Grid3<T> out(vol.dims, vol.spacing);
    for (int z = 0; z < vol.dims.nz; ++z)
        for (int y = 0; y < vol.dims.ny; ++y)
            for (int x = 0; x < vol.dims.nx; ++x) {
                const double dx = x - cx, dy = y - cy, dz = z - cz;
                // inverse of an orthogonal matrix is its transpose
                const double qx = cx + r.m[0][0] * dx + r.m[1][0] * dy + r.m[2][0] * dz;
                const double qy = cy + r.m[0][1] * dx + r.m[1][1] * dy + r.m[2][1] * dz;
                const double qz = cz + r.m[0][2] * dx + r.m[1][2] * dy + r.m[2][2] * dz;
                T value = fill;
                if (mode == Interp::nearest) {
                    const int ix = int(std::llround(qx));
                    const int iy = int(std::llround(qy));
                    const int iz = int(std::llround(qz));
                    if (vol.in_bounds(ix, iy, iz)) value = vol.at(ix, iy, iz);
                } else if (qx >= 0 && qx <= vol.dims.nx - 1 && qy >= 0 && qy <= vol.dims.ny - 1 &&
                           qz >= 0 && qz <= vol.dims.nz - 1) {
                    value = T(detail::interp_trilinear(vol, qx, qy, qz));
                }
                out.at(x, y, z) = value;
            }
    return out;
}

/// Rotation grid used for training augmentation: -25 deg to 25 deg in 3 deg
/// steps. The +25 endpoint is unreachable with this step, so the grid has 17
/// angles ending at +23.
inline std::vector<double> augmentation_angles() {
    std::vector<double> angles;
    angles.reserve(17);
    for (int k = 0; k <= 16; ++k) angles.push_back(-25.0 + 3.0 * k);
    return angles;
}

namespace detail {

// cell-centered mapping: target voxel j samples source coordinate
// (j + 0.5) * n_src / n_dst - 0.5
inline double resample_coord(int j, int n_src, int n_dst) {
    return (j + 0.5) * (double(n_src) / double(n_dst)) - 0.5;
}

} // namespace detail

/// Trilinear resample onto a new voxel grid spanning the same physical
/// extent. Spacing is rescaled so dims * spacing is preserved.
inline Volume resample(const Volume& vol, Dims3 target) {
    require(target.nx >= 1 && target.ny >= 1 && target.nz >= 1,
            "resample: target dims must be >= 1, got ", target);
    if (target == vol.dims) return vol;
    Volume out(target,
               {vol.spacing.x * vol.dims.nx / target.nx, vol.spacing.y * vol.dims.ny / target.ny,
                vol.spacing.z * vol.dims.nz / target.nz});
    for (int z = 0; z < target.nz; ++z) {
        const double qz = std::clamp(detail::resample_coord(z, vol.dims.nz, target.nz), 0.0, double(vol.dims.nz - 1));
        for (int y = 0; y < target.ny; ++y) {
            const double qy = std::clamp(detail::resample_coord(y, vol.dims.ny, target.ny), 0.0, double(vol.dims.ny - 1));
            for (int x = 0; x < target.nx; ++x) {
                const double qx = std::clamp(detail::resample_coord(x, vol.dims.nx, target.nx), 0.0, double(vol.dims.nx - 1));
                out.at(x, y, z) = float(detail::interp_trilinear(vol, qx, qy, qz));
            }
        }
    }
    return out;
}

/// Nearest-neighbor resample, for label maps.
template <typename T>
Grid3<T> resample_nearest(const Grid3<T>& vol, Dims3 target) {
    require(target.nx >= 1 && target.ny >= 1 && target.nz >= 1,
            "resample_nearest: target dims must be >= 1, got ", target);
    if (target == vol.dims) return vol;
    Grid3<T> out(target,
                 {vol.spacing.x * vol.dims.nx / target.nx, vol.spacing.y * vol.dims.ny / target.ny,
                  vol.spacing.z * vol.dims.nz / target.nz});
    const auto nearest = [](int j, int n_src, int n_dst) {
        int i = int(std::llround(detail::resample_coord(j, n_src, n_dst)));
        return std::clamp(i, 0, n_src - 1);
    };
    for (int z = 0; z < target.nz; ++z) {
        const int qz = nearest(z, vol.dims.nz, target.nz);
        for (int y = 0; y < target.ny; ++y) {
            const int qy = nearest(y, vol.dims.ny, target.ny);
            for (int x = 0; x < target.nx; ++x)
                out.at(x, y, z) = vol.at(nearest(x, vol.dims.nx, target.nx), qy, qz);
        }
    }
    return out;
}

/// Rewrite label values through a map; values absent from the map pass
/// through unchanged.
inline LabelMap remap_labels(const LabelMap& labels, const std::map<int, int>& table) {
    std::array<std::uint8_t, 256> lut;
    for (int i = 0; i < 256; ++i) lut[size_t(i)] = std::uint8_t(i);
    for (const auto& [from, to] : table) {
        require(from >= 0 && from < 256 && to >= 0 && to < 256,
                "remap_labels: mapping ", from, " -> ", to, " out of 8-bit range");
        lut[size_t(from)] = std::uint8_t(to);
    }
    LabelMap out(labels.dims, labels.spacing);
    for (std::size_t i = 0; i < labels.size(); ++i) out.data[i] = lut[labels.data[i]];
    return out;
}

} // namespace voxseg

#endif // VOXSEG_PREPROCESS_HPP
