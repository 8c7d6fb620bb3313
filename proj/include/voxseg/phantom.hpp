#ifndef VOXSEG_PHANTOM_HPP
#define VOXSEG_PHANTOM_HPP

#include <cmath>
#include <vector>

#include "voxseg/core.hpp"
#include "voxseg/organs.hpp"
#include "voxseg/rng.hpp"

namespace voxseg {

/// Synthetic head phantom: soft-tissue head ellipsoid with a bone shell, two
/// eye spheres and a lens ellipsoid inside each eye. Intensities are
/// CT-number-like; eye and lens bands sit within +/-100 of zero so soft-tissue
/// windows resolve them. The default bands are chosen so that mid-width
/// windows separate lens from eye while a +/-40 window clips the contrast.
struct PhantomParams {
    Dims3 dims{32, 32, 32};
    Vec3d spacing{1.0, 1.0, 1.0};

    Vec3d head_semi_mm{15.0, 14.0, 13.0};
    double skull_thickness_mm = 1.5;
    double eye_radius_mm = 6.5;
    Vec3d eye_offset_mm{7.0, -5.5, 0.5};  // eye centers at head center +/- x offset
    Vec3d lens_offset_mm{0.0, -3.4, 0.0}; // lens center relative to its eye center
    Vec3d lens_semi_mm{3.2, 2.0, 3.2};

    // intensity bands (engineering choices, CT-plausible)
    double air_hu = -1000.0;
    double soft_hu = 40.0;
    double eye_hu = 20.0;
    double lens_hu = 80.0;
    double bone_hu = 1000.0;

    double noise_std = 15.0;
    double jitter_mm = 1.5;          // uniform per-eye placement jitter
    bool randomize_spacing = false;  // draw in-plane pixel size from [0.44, 0.98] mm
    std::uint64_t seed = 0;

    friend bool operator==(const PhantomParams&, const PhantomParams&) = default;

    void validate() const {
        require(dims.nx >= 1 && dims.ny >= 1 && dims.nz >= 1, "phantom: bad dims ", dims);
        require(spacing.x > 0 && spacing.y > 0 && spacing.z > 0, "phantom: bad spacing ", spacing);
        require(head_semi_mm.x > 0 && head_semi_mm.y > 0 && head_semi_mm.z > 0,
                "phantom: head semi-axes must be positive");
        require(eye_radius_mm > 0, "phantom: eye radius must be positive");
        require(lens_semi_mm.x > 0 && lens_semi_mm.y > 0 && lens_semi_mm.z > 0,
                "phantom: lens semi-axes must be positive");
        const double lens_max = std::max({lens_semi_mm.x, lens_semi_mm.y, lens_semi_mm.z});
        require(lens_max < eye_radius_mm, "phantom: lens (max semi-axis ", lens_max,
                " mm) does not fit inside the eye (radius ", eye_radius_mm, " mm)");
        require(noise_std >= 0, "phantom: noise std must be >= 0");
        require(jitter_mm >= 0, "phantom: jitter must be >= 0");
    }
};

namespace detail {

inline double ellipsoid_value(Vec3d p, Vec3d center, Vec3d semi) {
    const double dx = (p.x - center.x) / semi.x;
    const double dy = (p.y - center.y) / semi.y;
    const double dz = (p.z - center.z) / semi.z;
    return dx * dx + dy * dy + dz * dz;
}

inline double dist_sq(Vec3d a, Vec3d b) {
    return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z);
}

} // namespace detail

/// Deterministic phantom: same (params, case_seed) always yields the same
/// bitwise-identical pair. Labels follow the organ registry (left/right eye
/// 2/3, left/right lens 4/5); soft tissue and bone stay background.
inline std::pair<Volume, LabelMap> generate_phantom(const PhantomParams& params,
                                                    std::uint64_t case_seed) {
    params.validate();
    Rng rng(case_seed);

    Vec3d spacing = params.spacing;
    if (params.randomize_spacing) {
        const double px = rng.uniform(0.44, 0.98); // heterogeneous in-plane pixel size
        spacing.x = px;
        spacing.y = px;
    }

    const Vec3d head_center{params.dims.nx * spacing.x / 2.0, params.dims.ny * spacing.y / 2.0,
                            params.dims.nz * spacing.z / 2.0};
    const auto jitter = [&rng, &params]() {
        const double j = params.jitter_mm;
        return Vec3d{rng.uniform(-j, j), rng.uniform(-j, j), rng.uniform(-j, j)};
    };
    const Vec3d jl = jitter(), jr = jitter();
    const Vec3d left_eye{head_center.x - params.eye_offset_mm.x + jl.x,
                         head_center.y + params.eye_offset_mm.y + jl.y,
                         head_center.z + params.eye_offset_mm.z + jl.z};
    const Vec3d right_eye{head_center.x + params.eye_offset_mm.x + jr.x,
                          head_center.y + params.eye_offset_mm.y + jr.y,
                          head_center.z + params.eye_offset_mm.z + jr.z};
    const auto lens_center = [&params](Vec3d eye) {
        return Vec3d{eye.x + params.lens_offset_mm.x, eye.y + params.lens_offset_mm.y,
                     eye.z + params.lens_offset_mm.z};
    };
    const Vec3d left_lens = lens_center(left_eye), right_lens = lens_center(right_eye);

    const Vec3d inner_semi{std::max(params.head_semi_mm.x - params.skull_thickness_mm, 0.1),
                           std::max(params.head_semi_mm.y - params.skull_thickness_mm, 0.1),
                           std::max(params.head_semi_mm.z - params.skull_thickness_mm, 0.1)};
    const double eye_r_sq = params.eye_radius_mm * params.eye_radius_mm;

    Volume vol(params.dims, spacing);
    LabelMap labels(params.dims, spacing);
    for (int z = 0; z < params.dims.nz; ++z)
        for (int y = 0; y < params.dims.ny; ++y)
            for (int x = 0; x < params.dims.nx; ++x) {
                const Vec3d p{(x + 0.5) * spacing.x, (y + 0.5) * spacing.y, (z + 0.5) * spacing.z};
                double hu = params.air_hu;
                int label = kBackgroundClass;
                const bool in_left_eye = detail::dist_sq(p, left_eye) <= eye_r_sq;
                const bool in_right_eye = detail::dist_sq(p, right_eye) <= eye_r_sq;
                if (detail::ellipsoid_value(p, left_lens, params.lens_semi_mm) <= 1.0) {
                    require(in_left_eye, "phantom: lens voxel at ", Vec3i{x, y, z},
                            " falls outside the eye sphere; geometry is infeasible");
                    hu = params.lens_hu;
                    label = kLeftLensClass;
                } else if (detail::ellipsoid_value(p, right_lens, params.lens_semi_mm) <= 1.0) {
                    require(in_right_eye, "phantom: lens voxel at ", Vec3i{x, y, z},
                            " falls outside the eye sphere; geometry is infeasible");
                    hu = params.lens_hu;
                    label = kRightLensClass;
                } else if (in_left_eye) {
                    hu = params.eye_hu;
                    label = kLeftEyeClass;
                } else if (in_right_eye) {
                    hu = params.eye_hu;
                    label = kRightEyeClass;
                } else if (detail::ellipsoid_value(p, head_center, params.head_semi_mm) <= 1.0) {
                    hu = detail::ellipsoid_value(p, head_center, inner_semi) > 1.0 ? params.bone_hu
                                                                                   : params.soft_hu;
                }
                vol.at(x, y, z) = float(hu);
                labels.at(x, y, z) = std::uint8_t(label);
            }

    if (params.noise_std > 0)
        for (auto& v : vol.data) v += float(rng.normal(0.0, params.noise_std));
    return {std::move(vol), std::move(labels)};
}

struct PhantomCase {
    Volume image;
    LabelMap labels;
    std::uint64_t case_seed = 0;
};

/// n phantoms with per-case derived seeds (placement jitter and noise vary
/// per case).
inline std::vector<PhantomCase> generate_dataset(int n, const PhantomParams& params,
                                                 std::uint64_t seed) {
    require(n >= 1, "generate_dataset: n must be >= 1, got ", n);
    std::vector<PhantomCase> cases;
    cases.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        const std::uint64_t cs = derive_seed(seed, "phantom-case", std::uint64_t(i));
        auto [vol, labels] = generate_phantom(params, cs);
        cases.push_back({std::move(vol), std::move(labels), cs});
    }
    return cases;
}

struct DatasetSplit {
    std::vector<int> train, val, test;
};

/// Contiguous 70/10/20 partition by default (50 cases -> 35/5/10).
inline DatasetSplit split_dataset(int n, double train_frac = 0.7, double val_frac = 0.1) {
    require(n >= 1, "split_dataset: n must be >= 1");
    require(train_frac >= 0 && val_frac >= 0 && train_frac + val_frac <= 1.0,
            "split_dataset: bad fractions ", train_frac, ", ", val_frac);
    const int n_train = int(std::llround(train_frac * n));
    const int n_val = int(std::llround(val_frac * n));
    require(n_train + n_val <= n, "split_dataset: fractions leave no test cases");
    DatasetSplit split;
    for (int i = 0; i < n_train; ++i) split.train.push_back(i);
    for (int i = n_train; i < n_train + n_val; ++i) split.val.push_back(i);
    for (int i = n_train + n_val; i < n; ++i) split.test.push_back(i);
    return split;
}

// ---------------------------------------------------------------------------
// synthetic dose grids
// ---------------------------------------------------------------------------

/// Collimated rectangle in the beam's transverse plane, in mm. (u, v) are the
/// two non-beam axes in (x, y, z) order.
struct BlockRect {
    double u0 = 0, v0 = 0, u1 = 0, v1 = 0;

    bool contains(double u, double v) const { return u >= u0 && u <= u1 && v >= v0 && v <= v1; }
};

/// Axis-aligned exponential-attenuation slab beam.
struct BeamSpec {
    int axis = 0;      // 0 = x, 1 = y, 2 = z
    int direction = 1; // +1 enters at the low face, -1 at the high face
    double entry_dose_gy = 10.0;
    double mu_per_mm = 0.02;
    std::vector<BlockRect> blocks;
};

/// Sum of attenuated slab beams on the phantom grid; blocked voxels receive
/// nothing from that beam. Non-negative everywhere.
inline Volume generate_dose_grid(const PhantomParams& params, const std::vector<BeamSpec>& beams) {
    params.validate();
    Volume dose(params.dims, params.spacing, 0.0f);
    const double extent[3] = {params.dims.nx * params.spacing.x, params.dims.ny * params.spacing.y,
                              params.dims.nz * params.spacing.z};
    for (const auto& beam : beams) {
        require(beam.axis >= 0 && beam.axis <= 2, "dose: beam axis must be 0..2");
        require(beam.entry_dose_gy >= 0 && beam.mu_per_mm >= 0, "dose: beam dose and mu must be >= 0");
        for (int z = 0; z < params.dims.nz; ++z)
            for (int y = 0; y < params.dims.ny; ++y)
                for (int x = 0; x < params.dims.nx; ++x) {
                    const double p[3] = {(x + 0.5) * params.spacing.x, (y + 0.5) * params.spacing.y,
                                         (z + 0.5) * params.spacing.z};
                    const int ua = beam.axis == 0 ? 1 : 0;
                    const int va = beam.axis == 2 ? 1 : 2;
                    bool blocked = false;
                    for (const auto& blk : beam.blocks)
                        if (blk.contains(p[ua], p[va])) {
                            blocked = true;
                            break;
                        }
                    if (blocked) continue;
                    const double depth =
                        beam.direction > 0 ? p[beam.axis] : extent[beam.axis] - p[beam.axis];
                    dose.at(x, y, z) +=
                        float(beam.entry_dose_gy * std::exp(-beam.mu_per_mm * depth));
                }
    }
    return dose;
}

/// Parallel opposed lateral beams with collimator blocks shadowing both
/// lenses. The block covers the nominal lens footprint plus placement jitter
/// and an extra margin.
inline std::vector<BeamSpec> opposed_lateral_beams(const PhantomParams& params,
                                                   double extra_margin_mm = 1.0) {
    const Vec3d head_center{params.dims.nx * params.spacing.x / 2.0,
                            params.dims.ny * params.spacing.y / 2.0,
                            params.dims.nz * params.spacing.z / 2.0};
    const double ly = head_center.y + params.eye_offset_mm.y + params.lens_offset_mm.y;
    const double lz = head_center.z + params.eye_offset_mm.z + params.lens_offset_mm.z;
    const double my = params.lens_semi_mm.y + params.jitter_mm + extra_margin_mm;
    const double mz = params.lens_semi_mm.z + params.jitter_mm + extra_margin_mm;
    const BlockRect lens_block{ly - my, lz - mz, ly + my, lz + mz};
    BeamSpec left;
    left.axis = 0;
    left.direction = 1;
    left.blocks = {lens_block};
    BeamSpec right = left;
    right.direction = -1;
    return {left, right};
}

} // namespace voxseg

#endif // VOXSEG_PHANTOM_HPP
