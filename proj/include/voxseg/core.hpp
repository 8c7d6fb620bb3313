#ifndef VOXSEG_CORE_HPP
#define VOXSEG_CORE_HPP

#include <array>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace voxseg {

namespace detail {

inline void cat_into(std::ostringstream&) {}

template <typename T, typename... Rest>
void cat_into(std::ostringstream& oss, T&& head, Rest&&... rest) {
    oss << std::forward<T>(head);
    cat_into(oss, std::forward<Rest>(rest)...);
}

} // namespace detail

/// Build a message string from arbitrary streamable pieces.
template <typename... Args>
std::string cat(Args&&... args) {
    std::ostringstream oss;
    detail::cat_into(oss, std::forward<Args>(args)...);
    return oss.str();
}

/// Error type thrown by all operations in this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw Error(cat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
    if (!cond) fail(std::forward<Args>(args)...);
}

/// Voxel counts along x, y, z.
struct Dims3 {
    int nx = 0, ny = 0, nz = 0;

    friend bool operator==(const Dims3&, const Dims3&) = default;
    std::int64_t count() const { return std::int64_t(nx) * ny * nz; }
};

/// Physical spacing in mm per voxel along x, y, z.
struct Vec3d {
    double x = 0.0, y = 0.0, z = 0.0;

    friend bool operator==(const Vec3d&, const Vec3d&) = default;
};

/// Integer voxel coordinate.
struct Vec3i {
    int x = 0, y = 0, z = 0;

    friend bool operator==(const Vec3i&, const Vec3i&) = default;
};

inline std::ostream& operator<<(std::ostream& os, const Dims3& d) {
    return os << "(" << d.nx << ", " << d.ny << ", " << d.nz << ")";
}

inline std::ostream& operator<<(std::ostream& os, const Vec3i& v) {
    return os << "(" << v.x << ", " << v.y << ", " << v.z << ")";
}

inline std::ostream& operator<<(std::ostream& os, const Vec3d& v) {
    return os << "(" << v.x << ", " << v.y << ", " << v.z << ")";
}

/// Symmetric intensity window [-w, +w] used for normalization.
struct WindowSpec {
    double half_width = 100.0;

    friend bool operator==(const WindowSpec&, const WindowSpec&) = default;
};

/// Axis-aligned voxel box: lo inclusive, hi exclusive.
struct CropBox {
    Vec3i lo;
    Vec3i hi;

    friend bool operator==(const CropBox&, const CropBox&) = default;

    Dims3 dims() const { return {hi.x - lo.x, hi.y - lo.y, hi.z - lo.z}; }

    bool valid() const { return lo.x < hi.x && lo.y < hi.y && lo.z < hi.z; }

    bool contains(const CropBox& other) const {
        return lo.x <= other.lo.x && lo.y <= other.lo.y && lo.z <= other.lo.z &&
               hi.x >= other.hi.x && hi.y >= other.hi.y && hi.z >= other.hi.z;
    }

    /// True when the two boxes share at least one voxel.
    bool overlaps(const CropBox& other) const {
        return lo.x < other.hi.x && other.lo.x < hi.x &&
               lo.y < other.hi.y && other.lo.y < hi.y &&
               lo.z < other.hi.z && other.lo.z < hi.z;
    }

    /// Smallest box containing both.
    CropBox union_bound(const CropBox& other) const {
        return {{std::min(lo.x, other.lo.x), std::min(lo.y, other.lo.y), std::min(lo.z, other.lo.z)},
                {std::max(hi.x, other.hi.x), std::max(hi.y, other.hi.y), std::max(hi.z, other.hi.z)}};
    }
};

/// Dense 3-D grid with physical spacing. Data is linear, x-fastest:
/// index = x + nx * (y + ny * z).
template <typename T>
class Grid3 {
public:
    Dims3 dims;
    Vec3d spacing{1.0, 1.0, 1.0};
    std::vector<T> data;

    Grid3() = default;

    Grid3(Dims3 d, Vec3d s, T fill = T{}) : dims(d), spacing(s), data(size_t(check_dims(d).count()), fill) {
        require(s.x > 0 && s.y > 0 && s.z > 0, "Grid3: spacing must be positive, got ", s);
    }

    std::size_t size() const { return data.size(); }

    std::size_t index(int x, int y, int z) const {
        return std::size_t(x) + std::size_t(dims.nx) * (std::size_t(y) + std::size_t(dims.ny) * std::size_t(z));
    }

    T& at(int x, int y, int z) { return data[index(x, y, z)]; }
    const T& at(int x, int y, int z) const { return data[index(x, y, z)]; }

    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && x < dims.nx && y >= 0 && y < dims.ny && z >= 0 && z < dims.nz;
    }

    CropBox extent() const { return {{0, 0, 0}, {dims.nx, dims.ny, dims.nz}}; }

    friend bool operator==(const Grid3&, const Grid3&) = default;

private:
    static Dims3 check_dims(Dims3 d) {
        require(d.nx >= 1 && d.ny >= 1 && d.nz >= 1, "Grid3: dims must all be >= 1, got ", d);
        return d;
    }
};

/// Scalar intensity volume (CT image, dose grid, probability map).
using Volume = Grid3<float>;

/// Per-voxel organ class indices (0 = background).
using LabelMap = Grid3<std::uint8_t>;

/// Per-voxel boolean stored as 0/1.
using BinaryMask = Grid3<std::uint8_t>;

} // namespace voxseg

#endif // VOXSEG_CORE_HPP
