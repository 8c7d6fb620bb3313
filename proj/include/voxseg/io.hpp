#ifndef VOXSEG_IO_HPP
#define VOXSEG_IO_HPP

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "voxseg/config.hpp"
#include "voxseg/core.hpp"
#include "voxseg/net.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/pipeline.hpp"

namespace voxseg {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are not supported");

constexpr const char* kVolumeMagic = "VVOL1";
constexpr const char* kCheckpointMagic = "VCKPT1";
constexpr const char* kManifestMagic = "VSET1";

namespace detail {

/// Write-temp-then-rename so interrupted runs never leave half-written files.
template <typename WriterFn>
void atomic_write(const std::string& path, WriterFn&& writer) {
    namespace fs = std::filesystem;
    const fs::path target(path);
    if (target.has_parent_path()) fs::create_directories(target.parent_path());
    const fs::path tmp = target.parent_path() / (target.filename().string() + ".tmp");
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), "io: cannot open ", tmp.string(), " for writing");
        writer(out);
        out.flush();
        require(out.good(), "io: write to ", tmp.string(), " failed");
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    require(!ec, "io: cannot rename ", tmp.string(), " to ", path, ": ", ec.message());
}

inline json read_header_line(std::ifstream& in, const std::string& path) {
    std::string line;
    require(bool(std::getline(in, line)), "io: ", path, ": missing header line");
    try {
        return json::parse(line);
    } catch (const std::exception& e) {
        fail("io: ", path, ": bad header: ", e.what());
    }
}

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

} // namespace detail

// ---------------------------------------------------------------------------
// volume files: one-line JSON header + little-endian raw payload
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
const char* value_kind();
template <>
inline const char* value_kind<float>() {
    return "float32";
}
template <>
inline const char* value_kind<std::uint8_t>() {
    return "uint8";
}

template <typename T>
void write_grid(const std::string& path, const Grid3<T>& grid) {
    const json header{{"magic", kVolumeMagic},
                      {"dims", to_json(grid.dims)},
                      {"spacing", to_json(grid.spacing)},
                      {"kind", value_kind<T>()},
                      {"order", "little"}};
    atomic_write(path, [&](std::ofstream& out) {
        out << header.dump() << "\n";
        out.write(reinterpret_cast<const char*>(grid.data.data()),
                  std::streamsize(grid.data.size() * sizeof(T)));
    });
}

template <typename T>
Grid3<T> read_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "io: cannot open ", path);
    const json header = read_header_line(in, path);
    JsonReader r(header, path);
    require(r.get<std::string>("magic", "") == kVolumeMagic, "io: ", path, ": bad magic (expected ",
            kVolumeMagic, ")");
    const Dims3 dims = dims_from_json(header.at("dims"), path + ": dims");
    r.child("dims");
    const Vec3d spacing = vec3_from_json(header.at("spacing"), path + ": spacing");
    r.child("spacing");
    const std::string kind = r.get<std::string>("kind", "");
    require(r.get<std::string>("order", "little") == "little", "io: ", path,
            ": only little-endian payloads are supported");
    r.finish();
    require(kind == value_kind<T>(), "io: ", path, ": value kind is ", kind, ", expected ",
            value_kind<T>());

    Grid3<T> grid(dims, spacing);
    const std::streamsize bytes = std::streamsize(grid.data.size() * sizeof(T));
    in.read(reinterpret_cast<char*>(grid.data.data()), bytes);
    require(in.gcount() == bytes, "io: ", path, ": payload length mismatch (expected ", bytes,
            " bytes, got ", in.gcount(), ")");
    in.peek();
    require(in.eof(), "io: ", path, ": trailing bytes after payload");
    return grid;
}

} // namespace detail

inline void write_volume(const std::string& path, const Volume& vol) { detail::write_grid(path, vol); }
inline void write_label_map(const std::string& path, const LabelMap& labels) {
    detail::write_grid(path, labels);
}
inline Volume read_volume(const std::string& path) { return detail::read_grid<float>(path); }
inline LabelMap read_label_map(const std::string& path) {
    return detail::read_grid<std::uint8_t>(path);
}

// ---------------------------------------------------------------------------
// checkpoints: JSON manifest + little-endian float64 parameter blob
// ---------------------------------------------------------------------------

/// Weights plus the inference settings the network was trained with.
struct Checkpoint {
    NetworkConfig config;
    double window = 100.0;
    Dims3 input_dims{32, 32, 32};
};

inline void save_checkpoint(const std::string& path, Network& net, double window,
                            Dims3 input_dims) {
    json params = json::array();
    for (const auto& p : net.parameters())
        params.push_back(json{{"name", p.name}, {"size", p.size}, {"shape", p.shape}});
    const json header{{"magic", kCheckpointMagic},
                      {"config", to_json(net.config())},
                      {"window", window},
                      {"input_dims", to_json(input_dims)},
                      {"params", std::move(params)}};
    detail::atomic_write(path, [&](std::ofstream& out) {
        out << header.dump() << "\n";
        for (const auto& p : net.parameters())
            out.write(reinterpret_cast<const char*>(p.values),
                      std::streamsize(p.size * sizeof(double)));
    });
}

inline std::pair<Network, Checkpoint> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "io: cannot open ", path);
    const json header = detail::read_header_line(in, path);
    JsonReader r(header, path);
    require(r.get<std::string>("magic", "") == kCheckpointMagic, "io: ", path,
            ": bad magic (expected ", kCheckpointMagic, ")");
    Checkpoint meta;
    const json* cfg_json = r.child("config");
    require(cfg_json != nullptr, "io: ", path, ": missing network config");
    meta.config = network_from_json(*cfg_json, path + ": config", /*allow_seed=*/true);
    meta.window = r.get("window", meta.window);
    if (const json* d = r.child("input_dims")) meta.input_dims = dims_from_json(*d, path);
    const json* params = r.child("params");
    require(params != nullptr && params->is_array(), "io: ", path, ": missing params list");
    r.finish();

    Network net(meta.config);
    auto views = net.parameters();
    require(params->size() == views.size(), "io: ", path, ": checkpoint has ", params->size(),
            " parameter arrays, network expects ", views.size());
    for (std::size_t i = 0; i < views.size(); ++i) {
        const json& entry = (*params)[i];
        require(entry.at("name").get<std::string>() == views[i].name, "io: ", path,
                ": parameter order mismatch at ", views[i].name);
        require(entry.at("size").get<std::size_t>() == views[i].size, "io: ", path,
                ": size mismatch for ", views[i].name);
        if (entry.contains("shape"))
            require(entry.at("shape").get<std::vector<std::size_t>>() == views[i].shape, "io: ", path,
                    ": shape mismatch for ", views[i].name);
        const std::streamsize bytes = std::streamsize(views[i].size * sizeof(double));
        in.read(reinterpret_cast<char*>(views[i].values), bytes);
        require(in.gcount() == bytes, "io: ", path, ": truncated parameter blob at ", views[i].name);
    }
    in.peek();
    require(in.eof(), "io: ", path, ": trailing bytes after parameter blob");
    return {std::move(net), std::move(meta)};
}

// ---------------------------------------------------------------------------
// dataset manifests
// ---------------------------------------------------------------------------

struct ManifestCase {
    std::string image;
    std::string labels;
    std::string dose; // empty when no dose grid was generated
};

struct DatasetManifest {
    std::uint64_t seed = 0;
    std::map<int, int> class_map;
    DatasetSplit split;
    std::vector<ManifestCase> cases;
    std::vector<NamedRegion> regions;
};

inline void write_manifest(const std::string& path, const DatasetManifest& m) {
    json cases = json::array();
    for (const auto& c : m.cases) {
        json entry{{"image", c.image}, {"labels", c.labels}};
        if (!c.dose.empty()) entry["dose"] = c.dose;
        cases.push_back(std::move(entry));
    }
    json class_map = json::object();
    for (const auto& [from, to] : m.class_map) class_map[std::to_string(from)] = to;
    json regions = json::array();
    for (const auto& r : m.regions)
        regions.push_back(json{{"name", r.name}, {"lo", to_json(r.box.lo)}, {"hi", to_json(r.box.hi)}});
    const json doc{{"magic", kManifestMagic},
                   {"seed", m.seed},
                   {"class_map", std::move(class_map)},
                   {"split", json{{"train", m.split.train}, {"val", m.split.val}, {"test", m.split.test}}},
                   {"cases", std::move(cases)},
                   {"regions", std::move(regions)}};
    detail::atomic_write(path, [&](std::ofstream& out) { out << doc.dump(2) << "\n"; });
}

inline DatasetManifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    require(in.good(), "io: cannot open ", path);
    json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        fail("io: ", path, ": ", e.what());
    }
    JsonReader r(doc, path);
    require(r.get<std::string>("magic", "") == kManifestMagic, "io: ", path, ": bad magic");
    DatasetManifest m;
    m.seed = r.get<std::uint64_t>("seed", 0);
    if (const json* cm = r.child("class_map"))
        m.class_map = int_map_from_json<int, int>(*cm, path + ": class_map");
    if (const json* split = r.child("split")) {
        JsonReader sr(*split, path + ": split");
        m.split.train = sr.get("train", std::vector<int>{});
        m.split.val = sr.get("val", std::vector<int>{});
        m.split.test = sr.get("test", std::vector<int>{});
        sr.finish();
    }
    const json* cases = r.child("cases");
    require(cases != nullptr && cases->is_array(), "io: ", path, ": missing cases");
    for (const auto& c : *cases) {
        JsonReader cr(c, path + ": case");
        ManifestCase mc;
        mc.image = cr.get<std::string>("image", "");
        mc.labels = cr.get<std::string>("labels", "");
        mc.dose = cr.get<std::string>("dose", "");
        cr.finish();
        require(!mc.image.empty() && !mc.labels.empty(), "io: ", path, ": case needs image and labels");
        m.cases.push_back(std::move(mc));
    }
    if (const json* regions = r.child("regions")) {
        for (const auto& reg : *regions) {
            JsonReader rr(reg, path + ": region");
            NamedRegion region;
            region.name = rr.get<std::string>("name", "");
            if (const json* lo = rr.child("lo")) region.box.lo = vec3i_from_json(*lo, path);
            if (const json* hi = rr.child("hi")) region.box.hi = vec3i_from_json(*hi, path);
            rr.finish();
            m.regions.push_back(std::move(region));
        }
    }
    r.finish();
    return m;
}

// ---------------------------------------------------------------------------
// report writers
// ---------------------------------------------------------------------------

inline void write_loss_csv(const std::string& path, const LossHistory& history) {
    detail::atomic_write(path, [&](std::ofstream& out) {
        out << "epoch,train_loss,val_loss\n";
        for (std::size_t i = 0; i < history.train.size(); ++i) {
            out << i << "," << detail::fmt_double(history.train[i]) << ",";
            if (i < history.val.size()) out << detail::fmt_double(history.val[i]);
            out << "\n";
        }
    });
}

inline json seg_report_to_json(const SegReport& report) {
    json organs = json::array();
    for (const auto& o : report.organs) {
        json entry{{"index", o.organ},
                   {"name", o.name},
                   {"n_cases", o.n_cases},
                   {"dice_mean", o.dice_mean},
                   {"dice_std", o.dice_std ? json(*o.dice_std) : json(nullptr)},
                   {"hd_mean_mm", o.hd_mean_mm ? json(*o.hd_mean_mm) : json(nullptr)},
                   {"hd_std_mm", o.hd_std_mm ? json(*o.hd_std_mm) : json(nullptr)},
                   {"n_hd", o.n_hd}};
        organs.push_back(std::move(entry));
    }
    return json{{"organs", std::move(organs)}};
}

inline void write_seg_report(const std::string& json_path, const std::string& csv_path,
                             const SegReport& report) {
    detail::atomic_write(json_path,
                         [&](std::ofstream& out) { out << seg_report_to_json(report).dump(2) << "\n"; });
    detail::atomic_write(csv_path, [&](std::ofstream& out) {
        out << "index,name,n_cases,dice_mean,dice_std,hd_mean_mm,hd_std_mm,n_hd\n";
        for (const auto& o : report.organs) {
            out << o.organ << "," << o.name << "," << o.n_cases << ","
                << detail::fmt_double(o.dice_mean) << ",";
            if (o.dice_std) out << detail::fmt_double(*o.dice_std);
            out << ",";
            if (o.hd_mean_mm) out << detail::fmt_double(*o.hd_mean_mm);
            out << ",";
            if (o.hd_std_mm) out << detail::fmt_double(*o.hd_std_mm);
            out << "," << o.n_hd << "\n";
        }
    });
}

inline json sweep_report_to_json(const SweepReport& report) {
    json dice = json::array(), hd = json::array(), hd_n = json::array();
    for (const auto& row : report.cells) {
        json drow = json::array(), hrow = json::array(), nrow = json::array();
        for (const auto& cell : row) {
            drow.push_back(cell.dice_mean);
            hrow.push_back(cell.hd_mean_mm ? json(*cell.hd_mean_mm) : json(nullptr));
            nrow.push_back(cell.n_hd);
        }
        dice.push_back(std::move(drow));
        hd.push_back(std::move(hrow));
        hd_n.push_back(std::move(nrow));
    }
    const auto best = [&report](const SweepBest& b) {
        return json{{"window", report.windows[b.window_index]},
                    {"threshold", report.thresholds[b.threshold_index]},
                    {"window_index", b.window_index},
                    {"threshold_index", b.threshold_index},
                    {"value", b.value}};
    };
    return json{{"windows", report.windows},
                {"thresholds", report.thresholds},
                {"dice_mean", std::move(dice)},
                {"hd_mean_mm", std::move(hd)},
                {"hd_n", std::move(hd_n)},
                {"best_dice", best(report.best_dice)},
                {"best_hd", report.best_hd ? best(*report.best_hd) : json(nullptr)}};
}

/// Heatmap-ready CSV: rows are windows, columns are thresholds.
inline void write_sweep_csvs(const std::string& dice_path, const std::string& hd_path,
                             const SweepReport& report) {
    const auto write_matrix = [&report](std::ofstream& out, auto cell_value) {
        out << "window\\threshold";
        for (double t : report.thresholds) out << "," << detail::fmt_double(t);
        out << "\n";
        for (std::size_t wi = 0; wi < report.windows.size(); ++wi) {
            out << detail::fmt_double(report.windows[wi]);
            for (std::size_t ti = 0; ti < report.thresholds.size(); ++ti) {
                out << ",";
                cell_value(out, report.cells[wi][ti]);
            }
            out << "\n";
        }
    };
    detail::atomic_write(dice_path, [&](std::ofstream& out) {
        write_matrix(out, [](std::ofstream& o, const SweepCell& c) {
            o << detail::fmt_double(c.dice_mean);
        });
    });
    detail::atomic_write(hd_path, [&](std::ofstream& out) {
        write_matrix(out, [](std::ofstream& o, const SweepCell& c) {
            if (c.hd_mean_mm) o << detail::fmt_double(*c.hd_mean_mm);
        });
    });
}

inline void write_sweep_report(const std::string& json_path, const std::string& dice_csv,
                               const std::string& hd_csv, const SweepReport& report) {
    detail::atomic_write(json_path, [&](std::ofstream& out) {
        out << sweep_report_to_json(report).dump(2) << "\n";
    });
    write_sweep_csvs(dice_csv, hd_csv, report);
}

} // namespace voxseg

#endif // VOXSEG_IO_HPP
