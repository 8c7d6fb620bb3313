#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "voxseg/io.hpp"
#include "voxseg/rng.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;

    TempDir() {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("voxseg_io_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }

    std::string file(const std::string& name) const { return (path / name).string(); }
};

Volume random_volume(Dims3 d, Rng& rng) {
    Volume v(d, {0.44, 0.44, 2.0});
    for (auto& x : v.data) x = float(rng.uniform(-1200.0, 1600.0));
    return v;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void truncate_file(const std::string& path, std::size_t drop_bytes) {
    const std::string all = slurp(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(all.data(), std::streamsize(all.size() - drop_bytes));
}

} // namespace

TEST_CASE("volume files round trip bitwise") {
    TempDir dir;
    Rng rng(3);
    const Volume vol = random_volume({7, 5, 9}, rng);
    write_volume(dir.file("a.vvol"), vol);
    CHECK(read_volume(dir.file("a.vvol")) == vol);

    LabelMap labels({4, 6, 3}, {1, 1, 1});
    for (auto& v : labels.data) v = std::uint8_t(rng.below(21));
    write_label_map(dir.file("b.vvol"), labels);
    CHECK(read_label_map(dir.file("b.vvol")) == labels);

    // repeated writes are byte-identical and leave no temp files behind
    write_volume(dir.file("c.vvol"), vol);
    write_volume(dir.file("d.vvol"), vol);
    CHECK(slurp(dir.file("c.vvol")) == slurp(dir.file("d.vvol")));
    int entries = 0;
    for (const auto& e : fs::directory_iterator(dir.path)) {
        CHECK(e.path().extension() != ".tmp");
        ++entries;
    }
    CHECK(entries == 4);
}

TEST_CASE("volume file corruption is reported") {
    TempDir dir;
    Rng rng(4);
    const Volume vol = random_volume({4, 4, 4}, rng);
    write_volume(dir.file("v.vvol"), vol);

    SECTION("truncated payload") {
        truncate_file(dir.file("v.vvol"), 10);
        REQUIRE_THROWS_WITH(read_volume(dir.file("v.vvol")),
                            Catch::Matchers::ContainsSubstring("length mismatch"));
    }
    SECTION("trailing bytes") {
        std::ofstream out(dir.file("v.vvol"), std::ios::binary | std::ios::app);
        out << "extra";
        out.close();
        REQUIRE_THROWS_WITH(read_volume(dir.file("v.vvol")),
                            Catch::Matchers::ContainsSubstring("trailing"));
    }
    SECTION("label file read as intensity volume") {
        LabelMap labels({4, 4, 4}, {1, 1, 1});
        write_label_map(dir.file("l.vvol"), labels);
        REQUIRE_THROWS_WITH(read_volume(dir.file("l.vvol")),
                            Catch::Matchers::ContainsSubstring("value kind"));
        REQUIRE_THROWS_WITH(read_label_map(dir.file("v.vvol")),
                            Catch::Matchers::ContainsSubstring("value kind"));
    }
    SECTION("bad magic") {
        std::ofstream out(dir.file("m.vvol"), std::ios::binary | std::ios::trunc);
        out << "{\"magic\":\"NOPE\"}\n";
        out.close();
        REQUIRE_THROWS_WITH(read_volume(dir.file("m.vvol")),
                            Catch::Matchers::ContainsSubstring("magic"));
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(read_volume(dir.file("absent.vvol")), Error);
    }
}

TEST_CASE("checkpoints round trip bitwise") {
    TempDir dir;
    NetworkConfig nc;
    nc.depth = 1;
    nc.base_channels = 2;
    nc.num_classes = 3;
    nc.dropout_p = 0.0;
    nc.seed = 99;
    Network net(nc);
    Rng rng(5);
    Tensor4 x(1, {4, 4, 4});
    for (auto& v : x.v) v = rng.uniform(0.0, 1.0);
    LabelMap t({4, 4, 4}, {1, 1, 1});
    for (auto& v : t.data) v = std::uint8_t(rng.below(3));
    net.train_step(x, t, 0.05); // non-trivial weights

    save_checkpoint(dir.file("net.vckpt"), net, 90.0, {16, 16, 16});
    {
        std::ifstream in(dir.file("net.vckpt"), std::ios::binary);
        std::string header_line;
        std::getline(in, header_line);
        const json header = json::parse(header_line);
        CHECK(header.at("params")[0].at("name") == "enc0.conv1.weight");
        CHECK(header.at("params")[0].at("shape") == json::array({2, 1, 3, 3, 3}));
    }
    auto [loaded, meta] = load_checkpoint(dir.file("net.vckpt"));
    CHECK(meta.window == 90.0);
    CHECK(meta.input_dims == Dims3{16, 16, 16});
    CHECK(meta.config == nc);

    auto p1 = net.parameters(), p2 = loaded.parameters();
    REQUIRE(p1.size() == p2.size());
    for (std::size_t i = 0; i < p1.size(); ++i) {
        CHECK(p1[i].name == p2[i].name);
        REQUIRE(p1[i].size == p2[i].size);
        CHECK(std::equal(p1[i].values, p1[i].values + p1[i].size, p2[i].values));
    }
    // the loaded network produces identical output
    CHECK(net.forward(x, Mode::infer) == loaded.forward(x, Mode::infer));

    SECTION("truncated parameter blob") {
        truncate_file(dir.file("net.vckpt"), 16);
        REQUIRE_THROWS_WITH(load_checkpoint(dir.file("net.vckpt")),
                            Catch::Matchers::ContainsSubstring("truncated"));
    }
}

TEST_CASE("dataset manifests round trip") {
    TempDir dir;
    DatasetManifest m;
    m.seed = 1234;
    m.class_map = {{2, 1}, {3, 1}, {4, 2}, {5, 2}};
    m.split = {{0, 1, 2}, {3}, {4}};
    m.cases = {{"case_000.img.vvol", "case_000.lbl.vvol", "dose.vvol"},
               {"case_001.img.vvol", "case_001.lbl.vvol", ""}};
    m.regions = {{"eyes", {{4, 5, 6}, {12, 13, 14}}}};
    write_manifest(dir.file("manifest.json"), m);
    const DatasetManifest r = read_manifest(dir.file("manifest.json"));
    CHECK(r.seed == m.seed);
    CHECK(r.class_map == m.class_map);
    CHECK(r.split.train == m.split.train);
    CHECK(r.split.val == m.split.val);
    CHECK(r.split.test == m.split.test);
    REQUIRE(r.cases.size() == 2);
    CHECK(r.cases[0].dose == "dose.vvol");
    CHECK(r.cases[1].dose.empty());
    REQUIRE(r.regions.size() == 1);
    CHECK(r.regions[0] == m.regions[0]);
}

TEST_CASE("report writers emit deterministic files") {
    TempDir dir;
    SegReport seg;
    OrganStats o;
    o.organ = 4;
    o.name = "left lens of the eye";
    o.dice_mean = 0.61;
    o.dice_std = 0.07;
    o.hd_mean_mm = 2.6;
    o.hd_std_mm = 0.8;
    o.n_cases = 10;
    o.n_hd = 10;
    seg.organs.push_back(o);
    write_seg_report(dir.file("r.json"), dir.file("r.csv"), seg);
    write_seg_report(dir.file("r2.json"), dir.file("r2.csv"), seg);
    CHECK(slurp(dir.file("r.json")) == slurp(dir.file("r2.json")));
    CHECK(slurp(dir.file("r.csv")) == slurp(dir.file("r2.csv")));
    CHECK(slurp(dir.file("r.csv")).find("left lens of the eye") != std::string::npos);

    SweepReport sweep;
    sweep.windows = {90, 100};
    sweep.thresholds = {0.8, 0.85};
    sweep.cells = {{{0.5, 2.0, 5}, {0.6, std::nullopt, 0}}, {{0.4, 3.0, 5}, {0.55, 2.5, 4}}};
    sweep.best_dice = {0, 1, 0.6};
    sweep.best_hd = SweepBest{0, 0, 2.0};
    write_sweep_report(dir.file("s.json"), dir.file("sd.csv"), dir.file("sh.csv"), sweep);
    const std::string hd_csv = slurp(dir.file("sh.csv"));
    CHECK(hd_csv.find("window\\threshold,0.8,0.85\n90,2,\n") != std::string::npos); // missing cell empty
    const json parsed = json::parse(slurp(dir.file("s.json")));
    CHECK(parsed.at("hd_mean_mm")[0][1].is_null());
    CHECK(parsed.at("best_dice").at("window") == 90.0);

    LossHistory hist{{1.0, 0.5}, {1.1, 0.6}};
    write_loss_csv(dir.file("loss.csv"), hist);
    CHECK(slurp(dir.file("loss.csv")) == "epoch,train_loss,val_loss\n0,1,1.1\n1,0.5,0.6\n");
}

TEST_CASE("run config parsing rejects unknown keys and bad values") {
    SECTION("defaults from an empty object") {
        const RunConfig cfg = parse_run_config(json::object());
        CHECK(cfg.seed == 0);
        CHECK(cfg.network.num_classes == 21);
        CHECK(cfg.train.epochs == 800);
        CHECK(cfg.train.steps_per_epoch == 35);
        CHECK(cfg.sweep_grid.windows == std::vector<double>{40, 50, 60, 70, 80, 90, 100});
        CHECK(cfg.sweep_grid.thresholds == std::vector<double>{0.75, 0.80, 0.85, 0.90, 0.95});
        CHECK(cfg.segment_threshold == 0.8);
        CHECK(cfg.organs.size() == 21);
        CHECK(cfg.organs[4].name == "left lens of the eye");
    }
    SECTION("unknown top-level key") {
        REQUIRE_THROWS_WITH(parse_run_config(json{{"sede", 1}}),
                            Catch::Matchers::ContainsSubstring("unknown key"));
    }
    SECTION("unknown nested key") {
        REQUIRE_THROWS_WITH(parse_run_config(json{{"train", {{"epoch", 5}}}}),
                            Catch::Matchers::ContainsSubstring("unknown key"));
    }
    SECTION("bad values are rejected by validation") {
        REQUIRE_THROWS_AS(parse_run_config(json{{"network", {{"depth", 0}}}}), Error);
        REQUIRE_THROWS_AS(parse_run_config(json{{"sweep", {{"thresholds", {1.5}}}}}), Error);
        REQUIRE_THROWS_AS(parse_run_config(json{{"phantom", {{"eye_radius_mm", -1.0}}}}), Error);
    }
    SECTION("sections parse") {
        const json j{{"seed", 42},
                     {"dataset", {{"count", 25}, {"class_map", {{"2", 1}, {"3", 1}}}}},
                     {"network", {{"num_classes", 3}, {"depth", 2}, {"base_channels", 4}, {"dropout", 0.0}}},
                     {"train", {{"epochs", 30}, {"learning_rate", 0.4}, {"window", 90.0}}},
                     {"sweep", {{"target_class", 2}}},
                     {"segment", {{"threshold", 0.85}, {"per_class_thresholds", {{"4", 0.9}}}}},
                     {"net_input_dims", {32, 32, 32}},
                     {"beams", json::array({{{"axis", "x"}, {"mu_per_mm", 0.0}}})},
                     {"organs", json::array({{{"index", 1}, {"name", "eye"}}, {{"index", 2}, {"name", "lens"}}})},
                     {"regions", json::array({{{"name", "eyes"}, {"lo", {1, 2, 3}}, {"hi", {9, 9, 9}}}})}};
        const RunConfig cfg = parse_run_config(j);
        CHECK(cfg.seed == 42);
        CHECK(cfg.class_map == std::map<int, int>{{2, 1}, {3, 1}});
        CHECK(cfg.network.num_classes == 3);
        CHECK(cfg.train.learning_rate == 0.4);
        CHECK(cfg.train.window.half_width == 90.0);
        CHECK(cfg.sweep_target_class == 2);
        CHECK(cfg.per_class_thresholds == std::map<int, double>{{4, 0.9}});
        REQUIRE(cfg.beams.size() == 1);
        CHECK(cfg.beams[0].axis == 0);
        CHECK(cfg.organs.size() == 2);
        CHECK(organ_display_name(cfg, 2) == "lens");
        CHECK(organ_display_name(cfg, 7) == "class 7");
        REQUIRE(cfg.regions.size() == 1);
        CHECK(cfg.regions[0].box == CropBox{{1, 2, 3}, {9, 9, 9}});
    }
}
