#ifndef VOXSEG_CLI_HPP
#define VOXSEG_CLI_HPP

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "voxseg/config.hpp"
#include "voxseg/io.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/pipeline.hpp"

namespace voxseg {

namespace cli_detail {

namespace fs = std::filesystem;

inline std::string join(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

inline std::string case_name(int index, const char* suffix) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "case_%03d.%s.vvol", index, suffix);
    return buf;
}

/// Voxel bounding box of both nominal eye spheres plus jitter margin.
inline NamedRegion eye_region(const PhantomParams& p) {
    const Vec3d c{p.dims.nx * p.spacing.x / 2.0, p.dims.ny * p.spacing.y / 2.0,
                  p.dims.nz * p.spacing.z / 2.0};
    const double m = p.eye_radius_mm + p.jitter_mm;
    const auto vox = [&p](double mm, double s, int n) {
        return std::clamp(int(std::floor(mm / s)), 0, n);
    };
    NamedRegion r;
    r.name = "eyes";
    r.box.lo = {vox(c.x - p.eye_offset_mm.x - m, p.spacing.x, p.dims.nx),
                vox(c.y + p.eye_offset_mm.y - m, p.spacing.y, p.dims.ny),
                vox(c.z + p.eye_offset_mm.z - m, p.spacing.z, p.dims.nz)};
    r.box.hi = {std::clamp(int(std::ceil((c.x + p.eye_offset_mm.x + m) / p.spacing.x)), r.box.lo.x + 1, p.dims.nx),
                std::clamp(int(std::ceil((c.y + p.eye_offset_mm.y + m) / p.spacing.y)), r.box.lo.y + 1, p.dims.ny),
                std::clamp(int(std::ceil((c.z + p.eye_offset_mm.z + m) / p.spacing.z)), r.box.lo.z + 1, p.dims.nz)};
    return r;
}

inline int cmd_phantom(const RunConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const std::uint64_t seed = derive_seed(cfg.seed, "phantom");
    const auto cases = generate_dataset(cfg.dataset_count, cfg.phantom, seed);

    DatasetManifest manifest;
    manifest.seed = seed;
    manifest.class_map = cfg.class_map;
    manifest.split = split_dataset(cfg.dataset_count, cfg.train_fraction, cfg.val_fraction);
    manifest.regions = cfg.regions;
    manifest.regions.push_back(eye_region(cfg.phantom));

    std::string dose_file;
    if (!cfg.beams.empty()) {
        dose_file = "dose.vvol";
        write_volume(join(out_dir, dose_file), generate_dose_grid(cfg.phantom, cfg.beams));
    }
    for (int i = 0; i < cfg.dataset_count; ++i) {
        LabelMap labels = cases[std::size_t(i)].labels;
        if (!cfg.class_map.empty()) labels = remap_labels(labels, cfg.class_map);
        ManifestCase mc{case_name(i, "img"), case_name(i, "lbl"), dose_file};
        write_volume(join(out_dir, mc.image), cases[std::size_t(i)].image);
        write_label_map(join(out_dir, mc.labels), labels);
        manifest.cases.push_back(std::move(mc));
    }
    write_manifest(join(out_dir, "manifest.json"), manifest);
    std::cout << "wrote " << cfg.dataset_count << " cases to " << out_dir << " (train/val/test = "
              << manifest.split.train.size() << "/" << manifest.split.val.size() << "/"
              << manifest.split.test.size() << ")\n";
    return 0;
}

inline std::vector<Sample> load_cases(const std::string& data_dir, const DatasetManifest& manifest,
                                      const std::vector<int>& indices) {
    std::vector<Sample> out;
    out.reserve(indices.size());
    for (int idx : indices) {
        require(idx >= 0 && idx < int(manifest.cases.size()), "manifest: case index ", idx,
                " out of range");
        const auto& mc = manifest.cases[std::size_t(idx)];
        out.push_back({read_volume(join(data_dir, mc.image)), read_label_map(join(data_dir, mc.labels))});
    }
    return out;
}

inline int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    const auto manifest = read_manifest(join(data_dir, "manifest.json"));
    require(!manifest.split.train.empty(), "train: manifest has no training cases");
    const auto train_raw = load_cases(data_dir, manifest, manifest.split.train);
    const auto val_raw = load_cases(data_dir, manifest, manifest.split.val);

    const auto train_set = prepare_samples(train_raw, cfg.train.window, cfg.net_input_dims);
    const auto val_set = prepare_samples(val_raw, cfg.train.window, cfg.net_input_dims);

    NetworkConfig nc = cfg.network;
    nc.seed = derive_seed(cfg.seed, "network");
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, "train");

    Network net(nc);
    const LossHistory history = train(train_set, net, tc, val_set.empty() ? nullptr : &val_set);

    fs::create_directories(out_dir);
    save_checkpoint(join(out_dir, "checkpoint.vckpt"), net, tc.window.half_width, cfg.net_input_dims);
    write_loss_csv(join(out_dir, "loss.csv"), history);
    std::cout << "trained " << tc.epochs << " epochs x " << tc.steps_per_epoch
              << " steps; final train loss " << detail::fmt_double(history.train.back());
    if (!history.val.empty()) std::cout << ", val loss " << detail::fmt_double(history.val.back());
    std::cout << (is_converged(history.train) ? " (converged)" : " (not converged)") << "\n";
    return 0;
}

inline int cmd_segment(const RunConfig& cfg, const std::string& net_path, const std::string& in_path,
                       const std::string& out_path, std::optional<double> window,
                       std::optional<double> threshold) {
    auto [net, meta] = load_checkpoint(net_path);
    const WindowSpec w{window.value_or(meta.window)};
    const double t = threshold.value_or(cfg.segment_threshold);
    const Volume vol = read_volume(in_path);
    const LabelMap labels =
        segment(vol, net, w, t, meta.input_dims,
                cfg.per_class_thresholds.empty() ? nullptr : &cfg.per_class_thresholds);
    write_label_map(out_path, labels);
    std::cout << "segmented " << in_path << " (window " << detail::fmt_double(w.half_width)
              << ", threshold " << detail::fmt_double(t) << ") -> " << out_path << "\n";
    return 0;
}

inline std::vector<int> classes_present(const std::vector<LabelMap>& maps) {
    std::set<int> classes;
    for (const auto& m : maps)
        for (auto v : m.data)
            if (v != 0) classes.insert(int(v));
    return {classes.begin(), classes.end()};
}

inline int cmd_evaluate(const RunConfig& cfg, const std::vector<std::string>& pred_paths,
                        const std::vector<std::string>& gt_paths, const std::string& out_dir,
                        std::vector<int> organs) {
    require(pred_paths.size() == gt_paths.size() && !pred_paths.empty(),
            "evaluate: need matching --pred/--gt lists");
    std::vector<LabelMap> preds, gts;
    for (const auto& p : pred_paths) preds.push_back(read_label_map(p));
    for (const auto& g : gt_paths) gts.push_back(read_label_map(g));
    if (organs.empty()) organs = classes_present(gts);
    require(!organs.empty(), "evaluate: ground truth contains no foreground classes");

    SegReport report = evaluate_dataset(preds, gts, organs);
    for (auto& o : report.organs) o.name = organ_display_name(cfg, o.organ);
    fs::create_directories(out_dir);
    write_seg_report(join(out_dir, "seg_report.json"), join(out_dir, "seg_report.csv"), report);
    for (const auto& o : report.organs) {
        std::cout << o.organ << " " << o.name << ": dice " << detail::fmt_double(o.dice_mean);
        if (o.dice_std) std::cout << " +/- " << detail::fmt_double(*o.dice_std);
        if (o.hd_mean_mm) {
            std::cout << ", hd " << detail::fmt_double(*o.hd_mean_mm);
            if (o.hd_std_mm) std::cout << " +/- " << detail::fmt_double(*o.hd_std_mm);
            std::cout << " mm (n=" << o.n_hd << ")";
        } else {
            std::cout << ", hd undefined";
        }
        std::cout << "\n";
    }
    return 0;
}

inline int cmd_sweep(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir) {
    const auto manifest = read_manifest(join(data_dir, "manifest.json"));
    require(!manifest.split.train.empty() && !manifest.split.test.empty(),
            "sweep: manifest needs train and test cases");
    const auto train_raw = load_cases(data_dir, manifest, manifest.split.train);
    const auto test_raw = load_cases(data_dir, manifest, manifest.split.test);

    SweepConfig sc;
    sc.train = cfg.train;
    sc.train.seed = derive_seed(cfg.seed, "sweep-train");
    sc.network = cfg.network;
    sc.network.seed = derive_seed(cfg.seed, "sweep-network");
    sc.net_input_dims = cfg.net_input_dims;
    sc.target_class = cfg.sweep_target_class;

    const SweepReport report = sweep(train_raw, test_raw, cfg.sweep_grid, sc);
    fs::create_directories(out_dir);
    write_sweep_report(join(out_dir, "sweep.json"), join(out_dir, "sweep_dice.csv"),
                       join(out_dir, "sweep_hd.csv"), report);
    std::cout << "best dice " << detail::fmt_double(report.best_dice.value) << " at window "
              << detail::fmt_double(report.windows[report.best_dice.window_index]) << ", threshold "
              << detail::fmt_double(report.thresholds[report.best_dice.threshold_index]) << "\n";
    if (report.best_hd)
        std::cout << "best hd " << detail::fmt_double(report.best_hd->value) << " mm at window "
                  << detail::fmt_double(report.windows[report.best_hd->window_index]) << ", threshold "
                  << detail::fmt_double(report.thresholds[report.best_hd->threshold_index]) << "\n";
    else
        std::cout << "best hd undefined (no cell produced a non-empty prediction)\n";
    return 0;
}

inline int cmd_dose_stats(const RunConfig& cfg, const std::string& dose_path,
                          const std::string& labels_path, std::vector<int> organs) {
    const Volume dose = read_volume(dose_path);
    const LabelMap labels = read_label_map(labels_path);
    if (organs.empty()) organs = classes_present({labels});
    require(!organs.empty(), "dose-stats: label map contains no foreground classes");
    for (int organ : organs) {
        const BinaryMask mask = mask_of_class(labels, organ);
        require(!mask_empty(mask), "dose-stats: no voxels labeled ", organ);
        const DoseStats stats = dose_stats(dose, mask);
        std::cout << organ << "," << organ_display_name(cfg, organ) << ","
                  << detail::fmt_double(stats.max_gy) << "," << detail::fmt_double(stats.mean_gy)
                  << "\n";
    }
    return 0;
}

/// Toy network used by the gradcheck command: 8^3 input, depth 2, 4 base
/// channels, dropout off, double precision.
inline int cmd_gradcheck(const RunConfig& cfg, double tol, std::size_t max_params) {
    NetworkConfig nc;
    nc.num_classes = 3;
    nc.depth = 2;
    nc.base_channels = 4;
    nc.dropout_p = 0.0;
    nc.seed = derive_seed(cfg.seed, "gradcheck-net");
    Network net(nc);

    Rng rng(derive_seed(cfg.seed, "gradcheck-data"));
    Tensor4 x(1, {8, 8, 8});
    for (auto& v : x.v) v = rng.uniform(0.0, 1.0);
    LabelMap target({8, 8, 8}, {1, 1, 1});
    for (auto& v : target.data) v = std::uint8_t(rng.below(3));
    for (int i = 0; i < 3; ++i) net.train_step(x, target, 0.05); // move off the zero-init head

    const GradCheckResult res =
        gradient_check(net, x, target, 1e-4, max_params, derive_seed(cfg.seed, "gradcheck"));
    std::cout << "max relative gradient error " << detail::fmt_double(res.max_rel_error) << " over "
              << res.params_checked << " parameters (" << res.params_skipped
              << " skipped at non-differentiable points); worst: " << res.worst_param << "\n";
    if (res.max_rel_error >= tol) {
        std::cerr << "error: gradient check failed: " << detail::fmt_double(res.max_rel_error)
                  << " >= tolerance " << detail::fmt_double(tol) << "\n";
        return 1;
    }
    return 0;
}

} // namespace cli_detail

inline int run_cli(std::vector<std::string> args) {
    CLI::App app{"voxseg: volumetric segmentation laboratory (phantoms, 3-D encoder-decoder, "
                 "Dice/Hausdorff evaluation, window x threshold sweeps)"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "out", data_dir, net_path, in_path, out_path, dose_path,
                labels_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> count;
    std::optional<double> window, threshold;
    std::vector<std::string> pred_paths, gt_paths;
    std::vector<int> organs;
    double tol = 1e-4;
    std::size_t max_params = 2000;

    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run configuration");
        cmd->add_option("--seed", seed, "override the configured master seed");
    };

    CLI::App* phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
    add_common(phantom);
    phantom->add_option("--out", out_dir, "output directory");
    phantom->add_option("--count", count, "number of cases (overrides config)");

    CLI::App* train_cmd = app.add_subcommand("train", "train a network on a phantom dataset");
    add_common(train_cmd);
    train_cmd->add_option("--data", data_dir, "dataset directory (from `phantom`)")->required();
    train_cmd->add_option("--out", out_dir, "output directory");

    CLI::App* segment_cmd = app.add_subcommand("segment", "segment a volume with a checkpoint");
    add_common(segment_cmd);
    segment_cmd->add_option("--net", net_path, "checkpoint file")->required();
    segment_cmd->add_option("--in", in_path, "input intensity volume")->required();
    segment_cmd->add_option("--out", out_path, "output label map")->required();
    segment_cmd->add_option("--window", window, "normalization half-width (default: checkpoint)");
    segment_cmd->add_option("--threshold", threshold, "classification threshold");

    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "per-organ Dice/Hausdorff report");
    add_common(evaluate_cmd);
    evaluate_cmd->add_option("--pred", pred_paths, "predicted label maps")->required();
    evaluate_cmd->add_option("--gt", gt_paths, "ground-truth label maps")->required();
    evaluate_cmd->add_option("--out", out_dir, "output directory");
    evaluate_cmd->add_option("--organs", organs, "organ indices (default: classes present)");

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "(window x threshold) grid sweep");
    add_common(sweep_cmd);
    sweep_cmd->add_option("--data", data_dir, "dataset directory (from `phantom`)")->required();
    sweep_cmd->add_option("--out", out_dir, "output directory");

    CLI::App* dose_cmd = app.add_subcommand("dose-stats", "max/mean dose per structure");
    add_common(dose_cmd);
    dose_cmd->add_option("--dose", dose_path, "dose grid volume")->required();
    dose_cmd->add_option("--labels", labels_path, "label map")->required();
    dose_cmd->add_option("--organs", organs, "organ indices (default: classes present)");

    CLI::App* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient check");
    add_common(grad_cmd);
    grad_cmd->add_option("--tol", tol, "failure tolerance on the max relative error");
    grad_cmd->add_option("--max-params", max_params, "parameters to probe");

    std::reverse(args.begin(), args.end()); // CLI11 parses the vector back to front
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (seed) cfg.seed = *seed;
        if (count) cfg.dataset_count = *count;

        if (phantom->parsed()) return cli_detail::cmd_phantom(cfg, out_dir);
        if (train_cmd->parsed()) return cli_detail::cmd_train(cfg, data_dir, out_dir);
        if (segment_cmd->parsed())
            return cli_detail::cmd_segment(cfg, net_path, in_path, out_path, window, threshold);
        if (evaluate_cmd->parsed())
            return cli_detail::cmd_evaluate(cfg, pred_paths, gt_paths, out_dir, organs);
        if (sweep_cmd->parsed()) return cli_detail::cmd_sweep(cfg, data_dir, out_dir);
        if (dose_cmd->parsed()) return cli_detail::cmd_dose_stats(cfg, dose_path, labels_path, organs);
        if (grad_cmd->parsed()) return cli_detail::cmd_gradcheck(cfg, tol, max_params);
        std::cerr << "error: no subcommand\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int run_cli(int argc, char** argv) {
    return run_cli(std::vector<std::string>(argv + 1, argv + argc));
}

} // namespace voxseg

#endif // VOXSEG_CLI_HPP
