#include <catch2/catch_amalgamated.hpp>

#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/preprocess.hpp"

using namespace voxseg;

TEST_CASE("phantom generation is deterministic under a fixed seed") {
    PhantomParams params;
    const auto [v1, l1] = generate_phantom(params, 42);
    const auto [v2, l2] = generate_phantom(params, 42);
    CHECK(v1 == v2);
    CHECK(l1 == l2);
    const auto [v3, l3] = generate_phantom(params, 43);
    CHECK(v1.data != v3.data); // different seed moves jitter and noise
}

TEST_CASE("noise-free phantom is piecewise constant at the configured bands") {
    PhantomParams params;
    params.noise_std = 0.0;
    const auto [vol, labels] = generate_phantom(params, 7);
    int lens_voxels = 0, eye_voxels = 0;
    for (std::size_t i = 0; i < vol.size(); ++i) {
        const float v = vol.data[i];
        const bool band = v == -1000.0f || v == 40.0f || v == 20.0f || v == 80.0f || v == 1000.0f;
        CHECK(band);
        const int lbl = labels.data[i];
        CHECK((lbl == 0 || lbl == kLeftEyeClass || lbl == kRightEyeClass || lbl == kLeftLensClass ||
               lbl == kRightLensClass));
        if (lbl == kLeftLensClass || lbl == kRightLensClass) {
            CHECK(v == 80.0f);
            ++lens_voxels;
        }
        if (lbl == kLeftEyeClass || lbl == kRightEyeClass) {
            CHECK(v == 20.0f);
            ++eye_voxels;
        }
    }
    CHECK(lens_voxels > 0);
    CHECK(eye_voxels > lens_voxels);
}

TEST_CASE("lens voxels lie inside their eye sphere") {
    PhantomParams params;
    params.noise_std = 0.0;
    params.jitter_mm = 0.0; // nominal geometry is known exactly
    const auto [vol, labels] = generate_phantom(params, 1);
    const Vec3d c{16.0, 16.0, 16.0}; // 32^3 at 1 mm
    const Vec3d left_eye{c.x - 7.0, c.y - 5.5, c.z + 0.5};
    const Vec3d right_eye{c.x + 7.0, c.y - 5.5, c.z + 0.5};
    const double r2 = 6.5 * 6.5;
    for (int z = 0; z < 32; ++z)
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) {
                const int lbl = labels.at(x, y, z);
                if (lbl != kLeftLensClass && lbl != kRightLensClass) continue;
                const Vec3d p{x + 0.5, y + 0.5, z + 0.5};
                const Vec3d eye = lbl == kLeftLensClass ? left_eye : right_eye;
                const double d2 = (p.x - eye.x) * (p.x - eye.x) + (p.y - eye.y) * (p.y - eye.y) +
                                  (p.z - eye.z) * (p.z - eye.z);
                CHECK(d2 <= r2);
            }
    // lens centroid sits inside the eye as well
    const Vec3i com = center_of_mass(labels, kLeftLensClass);
    const Vec3d p{com.x + 0.5, com.y + 0.5, com.z + 0.5};
    CHECK((p.x - left_eye.x) * (p.x - left_eye.x) + (p.y - left_eye.y) * (p.y - left_eye.y) +
              (p.z - left_eye.z) * (p.z - left_eye.z) <=
          r2);
}

TEST_CASE("infeasible lens geometry is rejected") {
    PhantomParams params;
    params.lens_semi_mm = {7.0, 7.0, 7.0}; // larger than the 6.5 mm eye
    REQUIRE_THROWS_AS(generate_phantom(params, 1), Error);
}

TEST_CASE("windowed noise-free phantom has distinct eye and lens plateaus") {
    PhantomParams params;
    params.noise_std = 0.0;
    const auto [vol, labels] = generate_phantom(params, 3);
    const Volume norm = window_normalize(vol, WindowSpec{90.0});
    float eye_val = -1, lens_val = -1;
    for (std::size_t i = 0; i < norm.size(); ++i) {
        if (labels.data[i] == kLeftEyeClass) eye_val = norm.data[i];
        if (labels.data[i] == kLeftLensClass) lens_val = norm.data[i];
    }
    CHECK(eye_val == Catch::Approx((20.0 + 90.0) / 180.0));
    CHECK(lens_val == Catch::Approx((80.0 + 90.0) / 180.0));
    CHECK(std::abs(lens_val - eye_val) > 0.3); // separable plateaus inside the window
}

TEST_CASE("dataset generation derives distinct cases and splits 70/10/20") {
    PhantomParams params;
    params.dims = {16, 16, 16};
    params.head_semi_mm = {7, 6.5, 6};
    params.eye_radius_mm = 2.5;
    params.eye_offset_mm = {3.5, -2.5, 0.25};
    params.lens_offset_mm = {0, -1.4, 0};
    params.lens_semi_mm = {1.1, 0.7, 1.1};
    params.jitter_mm = 0.5;
    const auto cases = generate_dataset(6, params, 99);
    REQUIRE(cases.size() == 6);
    for (std::size_t i = 0; i < cases.size(); ++i)
        for (std::size_t j = i + 1; j < cases.size(); ++j)
            CHECK(cases[i].image.data != cases[j].image.data);

    const auto split = split_dataset(50);
    CHECK(split.train.size() == 35);
    CHECK(split.val.size() == 5);
    CHECK(split.test.size() == 10);
    std::vector<bool> seen(50, false);
    for (const auto& part : {split.train, split.val, split.test})
        for (int idx : part) {
            REQUIRE(idx >= 0);
            REQUIRE(idx < 50);
            CHECK(!seen[std::size_t(idx)]); // disjoint
            seen[std::size_t(idx)] = true;
        }
    CHECK(std::count(seen.begin(), seen.end(), true) == 50); // covering
}

TEST_CASE("randomized spacing stays within the configured range") {
    PhantomParams params;
    params.randomize_spacing = true;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const auto [vol, labels] = generate_phantom(params, seed);
        CHECK(vol.spacing.x == vol.spacing.y);
        CHECK(vol.spacing.x >= 0.44);
        CHECK(vol.spacing.x <= 0.98);
        CHECK(vol.spacing.z == 1.0);
        CHECK(labels.spacing == vol.spacing);
    }
}

TEST_CASE("dose grid basics") {
    PhantomParams params;
    params.noise_std = 0.0;
    SECTION("zero beams give an all-zero grid") {
        const Volume dose = generate_dose_grid(params, {});
        for (float v : dose.data) CHECK(v == 0.0f);
    }
    SECTION("one unattenuated full-field beam is constant") {
        BeamSpec beam;
        beam.mu_per_mm = 0.0;
        beam.entry_dose_gy = 10.0;
        const Volume dose = generate_dose_grid(params, {beam});
        for (float v : dose.data) CHECK(v == 10.0f);
    }
    SECTION("attenuated beam decays with depth and stays non-negative") {
        BeamSpec beam;
        beam.mu_per_mm = 0.05;
        const Volume dose = generate_dose_grid(params, {beam});
        for (int x = 1; x < params.dims.nx; ++x) {
            CHECK(dose.at(x, 16, 16) < dose.at(x - 1, 16, 16));
            CHECK(dose.at(x, 16, 16) >= 0.0f);
        }
    }
    SECTION("blocked voxels receive less than unblocked neighbors") {
        BeamSpec beam;
        beam.mu_per_mm = 0.0;
        beam.blocks = {{10.0, 10.0, 20.0, 20.0}}; // (y, z) block for an x beam
        const Volume dose = generate_dose_grid(params, {beam});
        CHECK(dose.at(16, 15, 15) == 0.0f);            // inside the block shadow
        CHECK(dose.at(16, 15, 25) == 10.0f);           // outside in z
        CHECK(dose.at(16, 15, 15) < dose.at(16, 15, 25));
    }
}

TEST_CASE("lens-blocking beams spare the lens relative to the eye") {
    PhantomParams params;
    params.noise_std = 0.0;
    const auto [vol, labels] = generate_phantom(params, 11);
    const Volume dose = generate_dose_grid(params, opposed_lateral_beams(params));

    LabelMap merged = remap_labels(labels, {{kRightEyeClass, kLeftEyeClass},
                                            {kRightLensClass, kLeftLensClass}});
    const auto eye = dose_stats(dose, mask_of_class(merged, kLeftEyeClass));
    const auto lens = dose_stats(dose, mask_of_class(merged, kLeftLensClass));
    CHECK(lens.mean_gy < eye.mean_gy);
}
