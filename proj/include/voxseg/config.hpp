#ifndef VOXSEG_CONFIG_HPP
#define VOXSEG_CONFIG_HPP

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxseg/core.hpp"
#include "voxseg/net.hpp"
#include "voxseg/organs.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/pipeline.hpp"

namespace voxseg {

using nlohmann::json;

/// Strict object reader: every key must be consumed or finish() rejects the
/// document. Keeps configuration typos from silently doing nothing.
class JsonReader {
public:
    JsonReader(const json& j, std::string context) : j_(j), ctx_(std::move(context)) {
        require(j.is_object(), ctx_, ": expected a JSON object");
    }

    bool has(const std::string& key) const { return j_.contains(key); }

    template <typename T>
    T get(const std::string& key, T fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        try {
            return j_.at(key).get<T>();
        } catch (const std::exception& e) {
            fail(ctx_, ".", key, ": ", e.what());
        }
    }

    /// Nested value; nullptr when absent.
    const json* child(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) ? &j_.at(key) : nullptr;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            (void)value;
            require(seen_.count(key) > 0, ctx_, ": unknown key \"", key, "\"");
        }
    }

    const std::string& context() const { return ctx_; }

private:
    const json& j_;
    std::string ctx_;
    std::set<std::string> seen_;
};

// ---------------------------------------------------------------------------
// small value converters
// ---------------------------------------------------------------------------

inline json to_json(Dims3 d) { return json::array({d.nx, d.ny, d.nz}); }
inline json to_json(Vec3d v) { return json::array({v.x, v.y, v.z}); }
inline json to_json(Vec3i v) { return json::array({v.x, v.y, v.z}); }

inline Dims3 dims_from_json(const json& j, const std::string& ctx) {
    require(j.is_array() && j.size() == 3, ctx, ": expected [nx, ny, nz]");
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

inline Vec3d vec3_from_json(const json& j, const std::string& ctx) {
    require(j.is_array() && j.size() == 3, ctx, ": expected [x, y, z]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline Vec3i vec3i_from_json(const json& j, const std::string& ctx) {
    require(j.is_array() && j.size() == 3, ctx, ": expected [x, y, z]");
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>()};
}

template <typename Key, typename Value>
std::map<Key, Value> int_map_from_json(const json& j, const std::string& ctx) {
    require(j.is_object(), ctx, ": expected an object of index -> value");
    std::map<Key, Value> out;
    for (const auto& [k, v] : j.items()) {
        try {
            out[Key(std::stoll(k))] = v.template get<Value>();
        } catch (const std::exception&) {
            fail(ctx, ": bad key \"", k, "\"");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// section converters
// ---------------------------------------------------------------------------

inline json to_json(const NetworkConfig& cfg) {
    return json{{"in_channels", cfg.in_channels},
                {"num_classes", cfg.num_classes},
                {"depth", cfg.depth},
                {"base_channels", cfg.base_channels},
                {"kernel", cfg.kernel},
                {"dropout", cfg.dropout_p},
                {"upsampling", cfg.upsampling == Upsampling::nearest ? "nearest" : "trilinear"},
                {"seed", cfg.seed}};
}

inline NetworkConfig network_from_json(const json& j, const std::string& ctx,
                                       bool allow_seed = false) {
    JsonReader r(j, ctx);
    NetworkConfig cfg;
    cfg.in_channels = r.get("in_channels", cfg.in_channels);
    cfg.num_classes = r.get("num_classes", cfg.num_classes);
    cfg.depth = r.get("depth", cfg.depth);
    cfg.base_channels = r.get("base_channels", cfg.base_channels);
    cfg.kernel = r.get("kernel", cfg.kernel);
    cfg.dropout_p = r.get("dropout", cfg.dropout_p);
    const std::string up = r.get<std::string>("upsampling", "nearest");
    require(up == "nearest" || up == "trilinear", ctx, ": upsampling must be nearest or trilinear");
    cfg.upsampling = up == "nearest" ? Upsampling::nearest : Upsampling::trilinear;
    if (allow_seed) cfg.seed = r.get("seed", cfg.seed);
    r.finish();
    cfg.validate();
    return cfg;
}

inline TrainConfig train_from_json(const json& j, const std::string& ctx) {
    JsonReader r(j, ctx);
    TrainConfig cfg;
    cfg.epochs = r.get("epochs", cfg.epochs);
    cfg.steps_per_epoch = r.get("steps_per_epoch", cfg.steps_per_epoch);
    cfg.learning_rate = r.get("learning_rate", cfg.learning_rate);
    cfg.augment = r.get("augment", cfg.augment);
    cfg.window = WindowSpec{r.get("window", cfg.window.half_width)};
    r.finish();
    cfg.validate();
    return cfg;
}

inline PhantomParams phantom_from_json(const json& j, const std::string& ctx) {
    JsonReader r(j, ctx);
    PhantomParams p;
    if (const json* v = r.child("dims")) p.dims = dims_from_json(*v, ctx + ".dims");
    if (const json* v = r.child("spacing")) p.spacing = vec3_from_json(*v, ctx + ".spacing");
    if (const json* v = r.child("head_semi_mm")) p.head_semi_mm = vec3_from_json(*v, ctx + ".head_semi_mm");
    p.skull_thickness_mm = r.get("skull_thickness_mm", p.skull_thickness_mm);
    p.eye_radius_mm = r.get("eye_radius_mm", p.eye_radius_mm);
    if (const json* v = r.child("eye_offset_mm")) p.eye_offset_mm = vec3_from_json(*v, ctx + ".eye_offset_mm");
    if (const json* v = r.child("lens_offset_mm")) p.lens_offset_mm = vec3_from_json(*v, ctx + ".lens_offset_mm");
    if (const json* v = r.child("lens_semi_mm")) p.lens_semi_mm = vec3_from_json(*v, ctx + ".lens_semi_mm");
    p.air_hu = r.get("air_hu", p.air_hu);
    p.soft_hu = r.get("soft_hu", p.soft_hu);
    p.eye_hu = r.get("eye_hu", p.eye_hu);
    p.lens_hu = r.get("lens_hu", p.lens_hu);
    p.bone_hu = r.get("bone_hu", p.bone_hu);
    p.noise_std = r.get("noise_std", p.noise_std);
    p.jitter_mm = r.get("jitter_mm", p.jitter_mm);
    p.randomize_spacing = r.get("randomize_spacing", p.randomize_spacing);
    r.finish();
    p.validate();
    return p;
}

inline std::vector<BeamSpec> beams_from_json(const json& j, const std::string& ctx) {
    require(j.is_array(), ctx, ": expected an array of beams");
    std::vector<BeamSpec> beams;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string bctx = cat(ctx, "[", i, "]");
        JsonReader r(j[i], bctx);
        BeamSpec b;
        const std::string axis = r.get<std::string>("axis", "x");
        require(axis == "x" || axis == "y" || axis == "z", bctx, ": axis must be x, y or z");
        b.axis = axis == "x" ? 0 : axis == "y" ? 1 : 2;
        b.direction = r.get("direction", b.direction);
        require(b.direction == 1 || b.direction == -1, bctx, ": direction must be +1 or -1");
        b.entry_dose_gy = r.get("entry_dose_gy", b.entry_dose_gy);
        b.mu_per_mm = r.get("mu_per_mm", b.mu_per_mm);
        if (const json* blocks = r.child("blocks")) {
            require(blocks->is_array(), bctx, ".blocks: expected an array");
            for (const auto& blk : *blocks) {
                require(blk.is_array() && blk.size() == 4, bctx, ".blocks: expected [u0, v0, u1, v1]");
                b.blocks.push_back(
                    {blk[0].get<double>(), blk[1].get<double>(), blk[2].get<double>(), blk[3].get<double>()});
            }
        }
        r.finish();
        beams.push_back(std::move(b));
    }
    return beams;
}

struct NamedRegion {
    std::string name;
    CropBox box;

    friend bool operator==(const NamedRegion&, const NamedRegion&) = default;
};

/// Everything a run needs; all randomness derives from the single seed.
struct RunConfig {
    std::uint64_t seed = 0;
    std::string out_dir = "out";

    int dataset_count = 25;
    double train_fraction = 0.7;
    double val_fraction = 0.1;
    std::map<int, int> class_map; // label remap applied at generation time

    PhantomParams phantom;
    NetworkConfig network;
    TrainConfig train;

    SweepGrid sweep_grid;
    int sweep_target_class = kLeftLensClass;

    Dims3 net_input_dims{32, 32, 32};
    double segment_window = 100.0;
    double segment_threshold = 0.8;
    std::map<int, double> per_class_thresholds;

    std::vector<BeamSpec> beams;
    std::vector<OrganDef> organs{organ_registry().begin(), organ_registry().end()};
    std::vector<NamedRegion> regions;
};

inline RunConfig parse_run_config(const json& j) {
    JsonReader r(j, "config");
    RunConfig cfg;
    cfg.seed = r.get("seed", cfg.seed);
    cfg.out_dir = r.get("out_dir", cfg.out_dir);

    if (const json* d = r.child("dataset")) {
        JsonReader dr(*d, "config.dataset");
        cfg.dataset_count = dr.get("count", cfg.dataset_count);
        cfg.train_fraction = dr.get("train_fraction", cfg.train_fraction);
        cfg.val_fraction = dr.get("val_fraction", cfg.val_fraction);
        if (const json* m = dr.child("class_map"))
            cfg.class_map = int_map_from_json<int, int>(*m, "config.dataset.class_map");
        dr.finish();
        require(cfg.dataset_count >= 1, "config.dataset.count must be >= 1");
    }
    if (const json* p = r.child("phantom")) cfg.phantom = phantom_from_json(*p, "config.phantom");
    if (const json* n = r.child("network")) cfg.network = network_from_json(*n, "config.network");
    if (const json* t = r.child("train")) cfg.train = train_from_json(*t, "config.train");

    if (const json* s = r.child("sweep")) {
        JsonReader sr(*s, "config.sweep");
        cfg.sweep_grid.windows = sr.get("windows", cfg.sweep_grid.windows);
        cfg.sweep_grid.thresholds = sr.get("thresholds", cfg.sweep_grid.thresholds);
        cfg.sweep_target_class = sr.get("target_class", cfg.sweep_target_class);
        sr.finish();
        cfg.sweep_grid.validate();
    }
    if (const json* s = r.child("segment")) {
        JsonReader sr(*s, "config.segment");
        cfg.segment_window = sr.get("window", cfg.segment_window);
        cfg.segment_threshold = sr.get("threshold", cfg.segment_threshold);
        if (const json* m = sr.child("per_class_thresholds"))
            cfg.per_class_thresholds =
                int_map_from_json<int, double>(*m, "config.segment.per_class_thresholds");
        sr.finish();
        require(cfg.segment_window > 0, "config.segment.window must be positive");
        require(cfg.segment_threshold >= 0 && cfg.segment_threshold <= 1,
                "config.segment.threshold must be in [0,1]");
    }
    if (const json* d = r.child("net_input_dims"))
        cfg.net_input_dims = dims_from_json(*d, "config.net_input_dims");
    if (const json* b = r.child("beams")) cfg.beams = beams_from_json(*b, "config.beams");

    if (const json* o = r.child("organs")) {
        require(o->is_array(), "config.organs: expected an array");
        cfg.organs.clear();
        for (const auto& item : *o) {
            JsonReader orr(item, "config.organs[]");
            OrganDef def;
            def.index = orr.get("index", -1);
            def.name = orr.get<std::string>("name", "");
            orr.finish();
            require(def.index >= 0 && def.index <= 255 && !def.name.empty(),
                    "config.organs[]: need index in [0,255] and a name");
            cfg.organs.push_back(std::move(def));
        }
    }
    if (const json* reg = r.child("regions")) {
        require(reg->is_array(), "config.regions: expected an array");
        for (const auto& item : *reg) {
            JsonReader rr(item, "config.regions[]");
            NamedRegion region;
            region.name = rr.get<std::string>("name", "");
            if (const json* lo = rr.child("lo")) region.box.lo = vec3i_from_json(*lo, "config.regions[].lo");
            if (const json* hi = rr.child("hi")) region.box.hi = vec3i_from_json(*hi, "config.regions[].hi");
            rr.finish();
            require(!region.name.empty() && region.box.valid(),
                    "config.regions[]: need a name and lo < hi");
            cfg.regions.push_back(std::move(region));
        }
    }
    r.finish();
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "config: cannot open ", path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        fail("config: ", path, ": ", e.what());
    }
    return parse_run_config(j);
}

inline std::string organ_display_name(const RunConfig& cfg, int index) {
    for (const auto& o : cfg.organs)
        if (o.index == index) return o.name;
    return cat("class ", index);
}

} // namespace voxseg

#endif // VOXSEG_CONFIG_HPP
