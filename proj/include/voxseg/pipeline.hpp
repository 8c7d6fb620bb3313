#ifndef VOXSEG_PIPELINE_HPP
#define VOXSEG_PIPELINE_HPP

#include <map>
#include <optional>
#include <vector>

#include "voxseg/core.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/net.hpp"
#include "voxseg/organs.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/rng.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

/// One training or evaluation case: image plus ground-truth labels on the
/// same grid.
struct Sample {
    Volume image;
    LabelMap labels;
};

struct TrainConfig {
    int epochs = 800;
    int steps_per_epoch = 35;
    double learning_rate = 0.01;
    std::uint64_t seed = 0;
    bool augment = true;
    WindowSpec window{100.0}; // the window the training data was normalized with

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

    void validate() const {
        require(epochs >= 1, "train: epochs must be >= 1, got ", epochs);
        require(steps_per_epoch >= 1, "train: steps per epoch must be >= 1, got ", steps_per_epoch);
        require(window.half_width > 0, "train: window half-width must be positive");
    }
};

struct LossHistory {
    std::vector<double> train;
    std::vector<double> val;

    friend bool operator==(const LossHistory&, const LossHistory&) = default;
};

/// Window-normalize and resample a raw sample set onto the network grid.
inline std::vector<Sample> prepare_samples(const std::vector<Sample>& raw, WindowSpec window,
                                           Dims3 net_dims) {
    std::vector<Sample> out;
    out.reserve(raw.size());
    for (const auto& s : raw)
        out.push_back({resample(window_normalize(s.image, window), net_dims),
                       resample_nearest(s.labels, net_dims)});
    return out;
}

/// Single-sample SGD over epochs x steps. Every step draws one (volume,
/// axis, angle) augmentation uniformly with replacement from the seeded
/// stream; inputs must already be windowed per cfg.window, so the rotation
/// fill 0 is the normalized air value. Deterministic given the seed.
inline LossHistory train(const std::vector<Sample>& train_set, Network& net, const TrainConfig& cfg,
                         const std::vector<Sample>* val_set = nullptr) {
    cfg.validate();
    require(!train_set.empty(), "train: empty training set");
    for (const auto& s : train_set)
        require(s.image.dims == s.labels.dims, "train: image/label dims differ");

    Rng rng(derive_seed(cfg.seed, "train"));
    const auto angles = augmentation_angles();
    LossHistory history;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (int step = 0; step < cfg.steps_per_epoch; ++step) {
            const Sample& s = train_set[rng.below(train_set.size())];
            double loss;
            try {
                if (cfg.augment) {
                    const Axis axis = Axis(rng.below(3));
                    const double angle = angles[rng.below(angles.size())];
                    const Volume img = rotate(s.image, axis, angle, Interp::trilinear, 0.0f);
                    const LabelMap lbl = rotate(s.labels, axis, angle, Interp::nearest,
                                                std::uint8_t(kBackgroundClass));
                    loss = net.train_step(tensor_from_volume(img), lbl, cfg.learning_rate);
                } else {
                    loss = net.train_step(tensor_from_volume(s.image), s.labels, cfg.learning_rate);
                }
            } catch (const Error& e) {
                fail("train: epoch ", epoch, " step ", step, ": ", e.what());
            }
            epoch_loss += loss;
        }
        history.train.push_back(epoch_loss / cfg.steps_per_epoch);
        if (val_set && !val_set->empty()) {
            double val_loss = 0.0;
            for (const auto& s : *val_set)
                val_loss += net.loss(tensor_from_volume(s.image), s.labels, Mode::infer);
            history.val.push_back(val_loss / double(val_set->size()));
        }
    }
    return history;
}

/// Loss-stability rule: converged once the relative change between every
/// pair of subsequent samples in the trailing window stays below tol.
inline bool is_converged(const std::vector<double>& losses, int window = 10, double tol = 0.10) {
    if (window < 2 || int(losses.size()) < window) return false;
    const std::size_t start = losses.size() - std::size_t(window);
    for (std::size_t k = start + 1; k < losses.size(); ++k) {
        const double rel = std::abs(losses[k] - losses[k - 1]) / std::max(losses[k - 1], 1e-12);
        if (rel >= tol) return false;
    }
    return true;
}

/// Per voxel: keep the argmax class (ties break to the lowest index) only
/// when its probability exceeds the threshold, otherwise background. An
/// optional per-class map overrides the global threshold.
inline LabelMap apply_threshold(const Tensor4& probs, double threshold, Vec3d spacing,
                                const std::map<int, double>* per_class = nullptr) {
    require(threshold >= 0.0 && threshold <= 1.0, "apply_threshold: threshold must be in [0,1], got ",
            threshold);
    require(probs.c >= 2, "apply_threshold: need at least 2 classes");
    LabelMap out(probs.spatial_dims(), spacing);
    const std::size_t n = probs.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
        int best = 0;
        double best_p = probs.v[i];
        for (int ch = 1; ch < probs.c; ++ch) {
            const double p = probs.v[std::size_t(ch) * n + i];
            if (p > best_p) { // strict: ties keep the lowest class index
                best_p = p;
                best = ch;
            }
        }
        double thr = threshold;
        if (per_class) {
            const auto it = per_class->find(best);
            if (it != per_class->end()) thr = it->second;
        }
        out.data[i] = (best != kBackgroundClass && best_p > thr) ? std::uint8_t(best) : 0;
    }
    return out;
}

/// Full inference chain: window -> resample to the network grid -> forward ->
/// threshold -> nearest resample back onto the source grid.
inline LabelMap segment(const Volume& vol, Network& net, WindowSpec window, double threshold,
                        Dims3 net_dims, const std::map<int, double>* per_class = nullptr) {
    const Volume prepared = resample(window_normalize(vol, window), net_dims);
    const Tensor4 probs = net.forward(tensor_from_volume(prepared), Mode::infer);
    const LabelMap net_labels = apply_threshold(probs, threshold, prepared.spacing, per_class);
    LabelMap out = resample_nearest(net_labels, vol.dims);
    out.spacing = vol.spacing;
    return out;
}

// ---------------------------------------------------------------------------
// evaluation reports
// ---------------------------------------------------------------------------

struct OrganResult {
    int organ = 0;
    double dice = 0.0;
    std::optional<double> hd_mm; // absent when either mask is empty
};

/// Per-organ Dice and Hausdorff for one case. Organs missing from both
/// grids score dice 1 with no Hausdorff; empty-vs-non-empty scores 0.
inline std::vector<OrganResult> evaluate(const LabelMap& pred, const LabelMap& gt,
                                         const std::vector<int>& organs) {
    require(pred.dims == gt.dims, "evaluate: prediction dims ", pred.dims, " != ground truth ",
            gt.dims);
    std::vector<OrganResult> results;
    results.reserve(organs.size());
    for (int organ : organs) {
        const BinaryMask a = mask_of_class(pred, organ);
        const BinaryMask b = mask_of_class(gt, organ);
        OrganResult r;
        r.organ = organ;
        r.dice = dice(a, b);
        if (!mask_empty(a) && !mask_empty(b)) r.hd_mm = hausdorff(a, b, gt.spacing);
        results.push_back(r);
    }
    return results;
}

struct SegReport {
    std::vector<OrganStats> organs;
};

/// Aggregate per-case metrics into mean +/- sample standard deviation per
/// organ. Hausdorff statistics cover only the cases where it is defined.
inline SegReport evaluate_dataset(const std::vector<LabelMap>& preds,
                                  const std::vector<LabelMap>& gts, const std::vector<int>& organs) {
    require(preds.size() == gts.size() && !preds.empty(),
            "evaluate_dataset: prediction/ground-truth counts differ or are empty");
    SegReport report;
    for (int organ : organs) {
        std::vector<double> dices, hds;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const auto res = evaluate(preds[i], gts[i], {organ});
            dices.push_back(res[0].dice);
            if (res[0].hd_mm) hds.push_back(*res[0].hd_mm);
        }
        OrganStats stats;
        stats.organ = organ;
        stats.name = organ_name(organ);
        const auto d = aggregate(dices);
        stats.dice_mean = d.mean;
        stats.dice_std = d.stddev;
        stats.n_cases = d.n;
        if (!hds.empty()) {
            const auto h = aggregate(hds);
            stats.hd_mean_mm = h.mean;
            stats.hd_std_mm = h.stddev;
            stats.n_hd = h.n;
        }
        report.organs.push_back(std::move(stats));
    }
    return report;
}

// ---------------------------------------------------------------------------
// (window x threshold) sweep
// ---------------------------------------------------------------------------

struct SweepGrid {
    std::vector<double> windows = {40, 50, 60, 70, 80, 90, 100};
    std::vector<double> thresholds = {0.75, 0.80, 0.85, 0.90, 0.95};

    friend bool operator==(const SweepGrid&, const SweepGrid&) = default;

    void validate() const {
        require(!windows.empty() && !thresholds.empty(), "sweep: empty grid");
        for (double w : windows) require(w > 0, "sweep: window half-widths must be positive");
        for (double t : thresholds)
            require(t > 0 && t < 1, "sweep: thresholds must lie in (0,1), got ", t);
    }
};

struct SweepConfig {
    TrainConfig train;
    NetworkConfig network;
    Dims3 net_input_dims{32, 32, 32};
    int target_class = kLeftLensClass;
};

struct SweepCell {
    double dice_mean = 0.0;
    std::optional<double> hd_mean_mm; // absent when every prediction was empty
    std::size_t n_hd = 0;

    friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct SweepBest {
    std::size_t window_index = 0;
    std::size_t threshold_index = 0;
    double value = 0.0;

    friend bool operator==(const SweepBest&, const SweepBest&) = default;
};

struct SweepReport {
    std::vector<double> windows;
    std::vector<double> thresholds;
    std::vector<std::vector<SweepCell>> cells; // [window][threshold]
    SweepBest best_dice;                       // matrix maximum
    std::optional<SweepBest> best_hd;          // matrix minimum over defined cells

    friend bool operator==(const SweepReport&, const SweepReport&) = default;
};

/// Bivariate sweep: one freshly seeded net per window (thresholding is
/// post-hoc on the same probability maps), mean Dice / mean HD of the target
/// class over the test set per cell. Cells where HD is undefined for every
/// case are recorded as missing and excluded from the argmin.
inline SweepReport sweep(const std::vector<Sample>& train_set, const std::vector<Sample>& test_set,
                         const SweepGrid& grid, const SweepConfig& cfg) {
    grid.validate();
    require(!train_set.empty() && !test_set.empty(), "sweep: empty train or test set");

    SweepReport report;
    report.windows = grid.windows;
    report.thresholds = grid.thresholds;
    report.cells.resize(grid.windows.size());

    for (std::size_t wi = 0; wi < grid.windows.size(); ++wi) {
        const WindowSpec window{grid.windows[wi]};
        TrainConfig tc = cfg.train;
        tc.window = window;
        tc.seed = derive_seed(cfg.train.seed, "sweep-window", wi);
        NetworkConfig nc = cfg.network;
        nc.seed = derive_seed(cfg.network.seed, "sweep-net", wi);

        const auto prepared = prepare_samples(train_set, window, cfg.net_input_dims);
        Network net(nc);
        train(prepared, net, tc);

        // one forward per test case, reused across thresholds
        std::vector<Tensor4> probs;
        std::vector<Vec3d> net_spacing;
        probs.reserve(test_set.size());
        for (const auto& s : test_set) {
            const Volume p = resample(window_normalize(s.image, window), cfg.net_input_dims);
            probs.push_back(net.forward(tensor_from_volume(p), Mode::infer));
            net_spacing.push_back(p.spacing);
        }

        report.cells[wi].resize(grid.thresholds.size());
        for (std::size_t ti = 0; ti < grid.thresholds.size(); ++ti) {
            std::vector<double> dices, hds;
            for (std::size_t ci = 0; ci < test_set.size(); ++ci) {
                LabelMap pred = apply_threshold(probs[ci], grid.thresholds[ti], net_spacing[ci]);
                pred = resample_nearest(pred, test_set[ci].labels.dims);
                pred.spacing = test_set[ci].labels.spacing;
                const auto res = evaluate(pred, test_set[ci].labels, {cfg.target_class});
                dices.push_back(res[0].dice);
                if (res[0].hd_mm) hds.push_back(*res[0].hd_mm);
            }
            SweepCell cell;
            cell.dice_mean = aggregate(dices).mean;
            if (!hds.empty()) {
                cell.hd_mean_mm = aggregate(hds).mean;
                cell.n_hd = hds.size();
            }
            report.cells[wi][ti] = cell;
        }
    }

    // optima by rescan; first strictly-better cell wins in row-major order
    bool have_hd = false;
    for (std::size_t wi = 0; wi < report.cells.size(); ++wi)
        for (std::size_t ti = 0; ti < report.cells[wi].size(); ++ti) {
            const SweepCell& cell = report.cells[wi][ti];
            if ((wi == 0 && ti == 0) || cell.dice_mean > report.best_dice.value)
                report.best_dice = {wi, ti, cell.dice_mean};
            if (cell.hd_mean_mm && (!have_hd || *cell.hd_mean_mm < report.best_hd->value)) {
                report.best_hd = SweepBest{wi, ti, *cell.hd_mean_mm};
                have_hd = true;
            }
        }
    return report;
}

// ---------------------------------------------------------------------------
// eye auto-crop and bounding boxes
// ---------------------------------------------------------------------------

struct EyeCrop {
    Volume cropped;
    CropBox box;
};

/// Locate the eye with a coarse segmentation, then crop a physical-extent
/// box around its center of mass (75 x 75 x 160 mm by default).
inline EyeCrop locate_and_crop_eye(const Volume& vol, Network& net, WindowSpec window,
                                   double threshold, Dims3 net_dims, int eye_class = kLeftEyeClass,
                                   Vec3d extent_mm = {75.0, 75.0, 160.0}) {
    const LabelMap seg = segment(vol, net, window, threshold, net_dims);
    Vec3i center;
    try {
        center = center_of_mass(seg, eye_class);
    } catch (const Error&) {
        fail("locate_and_crop_eye: no voxels predicted for eye class ", eye_class,
             "; fall back to a full-volume crop or lower the threshold");
    }
    const CropBox box = mm_box_around(center, extent_mm, vol.spacing, vol.dims);
    return {crop(vol, box, kAirIntensity), box};
}

struct BoundingBox {
    CropBox box;
    int cls = 0;

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

/// Merge same-class boxes transitively: overlapping boxes are replaced by
/// their axis-aligned union until the result is pairwise non-overlapping.
/// Unions that newly overlap other boxes keep merging, so every input box
/// ends up contained in exactly one output box.
inline std::vector<BoundingBox> merge_overlapping_boxes(std::vector<BoundingBox> boxes) {
    for (const auto& b : boxes)
        require(b.box.valid(), "merge_overlapping_boxes: degenerate box lo=", b.box.lo,
                " hi=", b.box.hi);
    bool merged = true;
    while (merged) {
        merged = false;
        for (std::size_t i = 0; i < boxes.size() && !merged; ++i)
            for (std::size_t j = i + 1; j < boxes.size() && !merged; ++j) {
                if (boxes[i].cls != boxes[j].cls) continue;
                if (!boxes[i].box.overlaps(boxes[j].box)) continue;
                boxes[i].box = boxes[i].box.union_bound(boxes[j].box);
                boxes.erase(boxes.begin() + std::ptrdiff_t(j));
                merged = true;
            }
    }
    return boxes;
}

} // namespace voxseg

#endif // VOXSEG_PIPELINE_HPP
