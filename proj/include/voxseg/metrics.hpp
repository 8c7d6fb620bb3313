#ifndef VOXSEG_METRICS_HPP
#define VOXSEG_METRICS_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "voxseg/core.hpp"

namespace voxseg {

/// Extract a one-class binary mask (1 where the label equals cls).
inline BinaryMask mask_of_class(const LabelMap& labels, int cls) {
    BinaryMask out(labels.dims, labels.spacing);
    for (std::size_t i = 0; i < labels.size(); ++i) out.data[i] = labels.data[i] == cls ? 1 : 0;
    return out;
}

inline bool mask_empty(const BinaryMask& m) {
    for (auto v : m.data)
        if (v) return false;
    return true;
}

/// Sorensen-Dice coefficient 2|A^B| / (|A|+|B|). Two empty masks agree
/// perfectly on absence and score 1; empty vs non-empty scores 0.
inline double dice(const BinaryMask& a, const BinaryMask& b) {
    require(a.dims == b.dims, "dice: mask dims differ, ", a.dims, " vs ", b.dims);
    std::int64_t na = 0, nb = 0, ni = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool va = a.data[i] != 0, vb = b.data[i] != 0;
        na += va;
        nb += vb;
        ni += va && vb;
    }
    if (na + nb == 0) return 1.0;
    return 2.0 * double(ni) / double(na + nb);
}

namespace detail {

inline std::vector<Vec3i> mask_voxels(const BinaryMask& m) {
    std::vector<Vec3i> pts;
    for (int z = 0; z < m.dims.nz; ++z)
        for (int y = 0; y < m.dims.ny; ++y)
            for (int x = 0; x < m.dims.nx; ++x)
                if (m.at(x, y, z)) pts.push_back({x, y, z});
    return pts;
}

} // namespace detail

/// Directed Hausdorff distance h(A,B) = max_{a in A} min_{b in B} ||a-b|| in
/// mm, with voxel centers as the point sets.
inline double directed_hausdorff(const BinaryMask& a, const BinaryMask& b, Vec3d spacing) {
    require(a.dims == b.dims, "hausdorff: mask dims differ, ", a.dims, " vs ", b.dims);
    const auto pa = detail::mask_voxels(a);
    const auto pb = detail::mask_voxels(b);
    require(!pa.empty() && !pb.empty(), "hausdorff: undefined for an empty mask");

    double worst_sq = 0.0; // max over A of min squared distance
    for (const auto& p : pa) {
        double best_sq = std::numeric_limits<double>::infinity();
        for (const auto& q : pb) {
            const double dx = (p.x - q.x) * spacing.x;
            const double dy = (p.y - q.y) * spacing.y;
            const double dz = (p.z - q.z) * spacing.z;
            const double d = dx * dx + dy * dy + dz * dz;
            if (d < best_sq) {
                best_sq = d;
                if (best_sq <= worst_sq) break; // cannot raise the running max
            }
        }
        if (best_sq > worst_sq) worst_sq = best_sq;
    }
    return std::sqrt(worst_sq);
}

/// Symmetric Hausdorff distance HD(A,B) = max(h(A,B), h(B,A)) in mm.
inline double hausdorff(const BinaryMask& a, const BinaryMask& b, Vec3d spacing) {
    return std::max(directed_hausdorff(a, b, spacing), directed_hausdorff(b, a, spacing));
}

/// Convenience overload using the masks' own (matching) spacing.
inline double hausdorff(const BinaryMask& a, const BinaryMask& b) {
    require(a.spacing == b.spacing, "hausdorff: mask spacings differ");
    return hausdorff(a, b, a.spacing);
}

struct Aggregate {
    double mean = 0.0;
    std::optional<double> stddev; // sample standard deviation, absent for n = 1
    std::size_t n = 0;
};

/// Mean and sample standard deviation (n-1 denominator).
inline Aggregate aggregate(const std::vector<double>& values) {
    require(!values.empty(), "aggregate: empty input");
    Aggregate out;
    out.n = values.size();
    double sum = 0.0;
    for (double v : values) sum += v;
    out.mean = sum / double(values.size());
    if (values.size() >= 2) {
        double ss = 0.0;
        for (double v : values) ss += (v - out.mean) * (v - out.mean);
        out.stddev = std::sqrt(ss / double(values.size() - 1));
    }
    return out;
}

struct DoseStats {
    double max_gy = 0.0;
    double mean_gy = 0.0;
};

/// Maximum and mean dose over the voxels selected by the mask.
inline DoseStats dose_stats(const Volume& dose, const BinaryMask& mask) {
    require(dose.dims == mask.dims, "dose_stats: grid dims differ, ", dose.dims, " vs ", mask.dims);
    double dmax = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < dose.size(); ++i) {
        if (!mask.data[i]) continue;
        dmax = std::max(dmax, double(dose.data[i]));
        sum += dose.data[i];
        ++n;
    }
    require(n > 0, "dose_stats: empty mask");
    return {dmax, sum / double(n)};
}

/// Per-organ metric statistics across a test set. Hausdorff entries cover
/// only the cases where it is defined (both masks non-empty); n_hd counts
/// them.
struct OrganStats {
    int organ = 0;
    std::string name;
    double dice_mean = 0.0;
    std::optional<double> dice_std;
    std::optional<double> hd_mean_mm;
    std::optional<double> hd_std_mm;
    std::size_t n_cases = 0;
    std::size_t n_hd = 0;
};

} // namespace voxseg

#endif // VOXSEG_METRICS_HPP
