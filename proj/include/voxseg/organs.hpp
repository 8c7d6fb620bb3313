#ifndef VOXSEG_ORGANS_HPP
#define VOXSEG_ORGANS_HPP

#include <array>
#include <string>
#include <string_view>

#include "voxseg/core.hpp"

namespace voxseg {

struct OrganDef {
    int index;
    std::string name;

    friend bool operator==(const OrganDef&, const OrganDef&) = default;
};

/// Head-and-neck soft-tissue registry. Index 0 is background; 1..20 are the
/// segmented organs.
inline const std::array<OrganDef, 21>& organ_registry() {
    static const std::array<OrganDef, 21> table = {{
        {0, "background"},
        {1, "brain stem"},
        {2, "left eye"},
        {3, "right eye"},
        {4, "left lens of the eye"},
        {5, "right lens of the eye"},
        {6, "left optic nerve"},
        {7, "right optic nerve"},
        {8, "optic chiasma"},
        {9, "left temporal lobes"},
        {10, "right temporal lobes"},
        {11, "pituitary gland"},
        {12, "left parotid gland"},
        {13, "right parotid gland"},
        {14, "left inner ear"},
        {15, "right inner ear"},
        {16, "left mid ear"},
        {17, "right mid ear"},
        {18, "left temporomandibular joint"},
        {19, "right temporomandibular joint"},
        {20, "spinal cord"},
    }};
    return table;
}

constexpr int kBackgroundClass = 0;
constexpr int kLeftEyeClass = 2;
constexpr int kRightEyeClass = 3;
constexpr int kLeftLensClass = 4;
constexpr int kRightLensClass = 5;
constexpr int kNumClasses = 21; // 20 organs + background

inline std::string organ_name(int index) {
    const auto& reg = organ_registry();
    if (index >= 0 && index < int(reg.size())) return reg[size_t(index)].name;
    return cat("class ", index);
}

} // namespace voxseg

#endif // VOXSEG_ORGANS_HPP
