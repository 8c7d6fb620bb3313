#include <catch2/catch_amalgamated.hpp>

#include "voxseg/net.hpp"
#include "voxseg/rng.hpp"

using namespace voxseg;

namespace {

Tensor4 random_tensor(int c, Dims3 d, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(c, d);
    for (auto& v : t.v) v = rng.uniform(lo, hi);
    return t;
}

LabelMap random_labels(Dims3 d, int num_classes, Rng& rng) {
    LabelMap m(d, {1, 1, 1});
    for (auto& v : m.data) v = std::uint8_t(rng.range(0, num_classes - 1));
    return m;
}

// six-loop reference convolution, independent of the row-based implementation
Tensor4 conv_oracle(const Tensor4& x, const std::vector<double>& w, const std::vector<double>& b,
                    int in_c, int out_c, int k) {
    const int r = k / 2;
    Tensor4 y(out_c, x.spatial_dims());
    for (int oc = 0; oc < out_c; ++oc)
        for (int z = 0; z < x.nz; ++z)
            for (int yy = 0; yy < x.ny; ++yy)
                for (int xx = 0; xx < x.nx; ++xx) {
                    double acc = b[std::size_t(oc)];
                    for (int ic = 0; ic < in_c; ++ic)
                        for (int kz = 0; kz < k; ++kz)
                            for (int ky = 0; ky < k; ++ky)
                                for (int kx = 0; kx < k; ++kx) {
                                    const int sz = z + kz - r, sy = yy + ky - r, sx = xx + kx - r;
                                    if (sx < 0 || sx >= x.nx || sy < 0 || sy >= x.ny || sz < 0 ||
                                        sz >= x.nz)
                                        continue;
                                    acc += w[std::size_t((((oc * in_c + ic) * k + kz) * k + ky) * k +
                                                         kx)] *
                                           x.at(ic, sx, sy, sz);
                                }
                    y.at(oc, xx, yy, z) = acc;
                }
    return y;
}

} // namespace

TEST_CASE("conv3d with the identity kernel reproduces the input") {
    Rng rng(1);
    nn::Conv3d conv("t", 1, 1, 3, rng);
    std::fill(conv.weights().begin(), conv.weights().end(), 0.0);
    conv.weights()[13] = 1.0; // kernel center
    conv.bias()[0] = 0.0;
    Tensor4 x = random_tensor(1, {5, 4, 3}, rng);
    Tensor4 y = conv.forward(x, false);
    CHECK(y.v == x.v);
}

TEST_CASE("all-ones conv kernel sums the 3^3 neighborhood") {
    Rng rng(2);
    nn::Conv3d conv("t", 1, 1, 3, rng);
    std::fill(conv.weights().begin(), conv.weights().end(), 1.0);
    conv.bias()[0] = 0.0;
    Tensor4 x(1, {5, 5, 5});
    std::fill(x.v.begin(), x.v.end(), 1.0);
    Tensor4 y = conv.forward(x, false);
    CHECK(y.at(0, 2, 2, 2) == 27.0); // interior
    CHECK(y.at(0, 0, 0, 0) == 8.0);  // corner: zero padding outside
    CHECK(y.at(0, 2, 2, 0) == 18.0); // face
}

TEST_CASE("conv3d matches the six-loop oracle on random cases") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
        const int in_c = rng.range(1, 3), out_c = rng.range(1, 3);
        const int k = (trial % 2 == 0) ? 3 : 1;
        nn::Conv3d conv("t", in_c, out_c, k, rng);
        Tensor4 x = random_tensor(in_c, {4, 5, 3}, rng);
        Tensor4 y = conv.forward(x, false);
        Tensor4 ref = conv_oracle(x, conv.weights(), conv.bias(), in_c, out_c, k);
        REQUIRE(y.same_shape(ref));
        for (std::size_t i = 0; i < y.size(); ++i)
            CHECK(y.v[i] == Catch::Approx(ref.v[i]).margin(1e-10));
    }
}

TEST_CASE("conv3d backward is exact for a linear functional of its output") {
    // J = sum(c * conv(x)) is linear in the weights and in x, so central
    // differences are exact up to rounding.
    Rng rng(4);
    nn::Conv3d conv("t", 2, 2, 3, rng);
    Tensor4 x = random_tensor(2, {4, 4, 4}, rng);
    Tensor4 cvec = random_tensor(2, {4, 4, 4}, rng);

    conv.forward(x, true);
    Tensor4 dx = conv.backward(cvec);

    const auto J = [&](const Tensor4& input) {
        Tensor4 y = conv.forward(input, false);
        double s = 0.0;
        for (std::size_t i = 0; i < y.size(); ++i) s += cvec.v[i] * y.v[i];
        return s;
    };

    const double eps = 1e-5;
    Rng pick(5);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t wi = pick.below(conv.weights().size());
        const double saved = conv.weights()[wi];
        conv.weights()[wi] = saved + eps;
        const double jp = J(x);
        conv.weights()[wi] = saved - eps;
        const double jm = J(x);
        conv.weights()[wi] = saved;
        const double numeric = (jp - jm) / (2 * eps);
        const double analytic = conv.weight_grads()[wi];
        CHECK(std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1.0}) <
              1e-8);
    }
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t xi = pick.below(x.size());
        Tensor4 xp = x, xm = x;
        xp.v[xi] += eps;
        xm.v[xi] -= eps;
        const double numeric = (J(xp) - J(xm)) / (2 * eps);
        CHECK(std::abs(dx.v[xi] - numeric) / std::max({std::abs(dx.v[xi]), std::abs(numeric), 1.0}) <
              1e-8);
    }
}

TEST_CASE("maxpool basics and enumeration oracle") {
    nn::MaxPool3d pool;
    SECTION("constant volume pools to constant at half dims") {
        Tensor4 x(2, {4, 4, 4});
        std::fill(x.v.begin(), x.v.end(), 3.5);
        Tensor4 y = pool.forward(x, false);
        CHECK(y.spatial_dims() == Dims3{2, 2, 2});
        for (double v : y.v) CHECK(v == 3.5);
    }
    SECTION("window 1..8 pools to 8") {
        Tensor4 x(1, {2, 2, 2});
        std::iota(x.v.begin(), x.v.end(), 1.0);
        Tensor4 y = pool.forward(x, false);
        REQUIRE(y.size() == 1);
        CHECK(y.v[0] == 8.0);
    }
    SECTION("random tensor matches window enumeration") {
        Rng rng(6);
        Tensor4 x = random_tensor(3, {6, 4, 8}, rng);
        Tensor4 y = pool.forward(x, false);
        for (int ch = 0; ch < 3; ++ch)
            for (int oz = 0; oz < 4; ++oz)
                for (int oy = 0; oy < 2; ++oy)
                    for (int ox = 0; ox < 3; ++ox) {
                        double best = -1e300;
                        for (int dz = 0; dz < 2; ++dz)
                            for (int dy = 0; dy < 2; ++dy)
                                for (int dx = 0; dx < 2; ++dx)
                                    best = std::max(best,
                                                    x.at(ch, 2 * ox + dx, 2 * oy + dy, 2 * oz + dz));
                        CHECK(y.at(ch, ox, oy, oz) == best);
                    }
    }
    SECTION("odd dims are rejected") {
        Tensor4 x(1, {3, 4, 4});
        REQUIRE_THROWS_AS(pool.forward(x, false), Error);
    }
}

TEST_CASE("nearest upsampling repeats voxels and inverts under maxpool") {
    nn::Upsample3d up(Upsampling::nearest);
    SECTION("1^3 value becomes 2^3 of the same value") {
        Tensor4 x(1, {1, 1, 1});
        x.v[0] = 4.25;
        Tensor4 y = up.forward(x, false);
        CHECK(y.spatial_dims() == Dims3{2, 2, 2});
        for (double v : y.v) CHECK(v == 4.25);
    }
    SECTION("shape rule doubles each axis") {
        Tensor4 x(2, {3, 5, 2});
        CHECK(up.forward(x, false).spatial_dims() == Dims3{6, 10, 4});
    }
    SECTION("maxpool(upsample(x)) == x for random tensors") {
        Rng rng(7);
        nn::MaxPool3d pool;
        for (int trial = 0; trial < 10; ++trial) {
            Tensor4 x = random_tensor(2, {4, 3, 5}, rng);
            Tensor4 y = pool.forward(up.forward(x, false), false);
            CHECK(y.v == x.v);
        }
    }
}

TEST_CASE("trilinear upsampling passes a transpose identity check") {
    // forward/backward must be exact transposes: <up(x), g> == <x, up^T(g)>
    Rng rng(8);
    nn::Upsample3d up(Upsampling::trilinear);
    Tensor4 x = random_tensor(2, {3, 4, 2}, rng);
    Tensor4 y = up.forward(x, true);
    CHECK(y.spatial_dims() == Dims3{6, 8, 4});
    Tensor4 g = random_tensor(2, y.spatial_dims(), rng);
    Tensor4 xt = up.backward(g);
    double lhs = 0.0, rhs = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) lhs += y.v[i] * g.v[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x.v[i] * xt.v[i];
    CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
    // constant input stays constant
    Tensor4 c(1, {2, 2, 2});
    std::fill(c.v.begin(), c.v.end(), 1.5);
    for (double v : up.forward(c, false).v) CHECK(v == Catch::Approx(1.5));
}

TEST_CASE("dropout modes") {
    Rng rng(9);
    SECTION("p=0 is the identity in both modes") {
        nn::Dropout drop(0.0);
        Tensor4 x = random_tensor(1, {3, 3, 3}, rng);
        CHECK(drop.forward(x, true, false, rng).v == x.v);
        CHECK(drop.forward(x, false, false, rng).v == x.v);
    }
    SECTION("inference is the identity for any p") {
        nn::Dropout drop(0.7);
        Tensor4 x = random_tensor(1, {3, 3, 3}, rng);
        CHECK(drop.forward(x, false, false, rng).v == x.v);
    }
    SECTION("train mode preserves the mean within Monte-Carlo tolerance") {
        const double p = 0.3;
        nn::Dropout drop(p);
        Tensor4 x(1, {50, 50, 40});
        std::fill(x.v.begin(), x.v.end(), 1.0);
        Tensor4 y = drop.forward(x, true, false, rng);
        const double mean = std::accumulate(y.v.begin(), y.v.end(), 0.0) / double(y.size());
        // std of the mean is sqrt(p/(1-p)/n) ~ 0.0021 for n = 1e5
        CHECK(mean == Catch::Approx(1.0).margin(0.012));
    }
}

TEST_CASE("concat stacks channels and splits back exactly") {
    Rng rng(10);
    Tensor4 a = random_tensor(2, {3, 4, 2}, rng);
    Tensor4 b = random_tensor(3, {3, 4, 2}, rng);
    Tensor4 y = nn::concat(a, b);
    CHECK(y.c == 5);
    auto [a2, b2] = nn::split_channels(y, 2);
    CHECK(a2 == a);
    CHECK(b2 == b);
    Tensor4 bad = random_tensor(1, {2, 4, 2}, rng);
    REQUIRE_THROWS_AS(nn::concat(a, bad), Error);
}

TEST_CASE("softmax normalization, uniform case, and the e/(e+19) case") {
    SECTION("twenty equal scores give 0.05 each") {
        std::vector<double> z(20, 0.7);
        auto p = softmax(z);
        for (double v : p) CHECK(v == Catch::Approx(0.05).epsilon(1e-12));
    }
    SECTION("one raised score over 20 classes") {
        std::vector<double> z(20, 0.0);
        z[0] = 1.0;
        auto p = softmax(z);
        const double e = std::exp(1.0);
        CHECK(p[0] == Catch::Approx(e / (e + 19.0)).epsilon(1e-12));
    }
    SECTION("shift invariance and normalization on random scores") {
        Rng rng(11);
        for (int trial = 0; trial < 25; ++trial) {
            std::vector<double> z(std::size_t(rng.range(2, 21)));
            for (double& v : z) v = rng.uniform(-15.0, 15.0);
            auto p = softmax(z);
            double sum = 0.0;
            for (double v : p) {
                CHECK(v > 0.0);
                CHECK(v < 1.0);
                sum += v;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-9));
            const double k = rng.uniform(-500.0, 500.0);
            std::vector<double> zs = z;
            for (double& v : zs) v += k;
            auto ps = softmax(zs);
            for (std::size_t i = 0; i < p.size(); ++i)
                CHECK(ps[i] == Catch::Approx(p[i]).margin(1e-12));
            CHECK(std::distance(p.begin(), std::max_element(p.begin(), p.end())) ==
                  std::distance(z.begin(), std::max_element(z.begin(), z.end())));
        }
    }
    SECTION("huge scores do not overflow") {
        std::vector<double> z = {5000.0, 4999.0};
        auto p = softmax(z);
        CHECK(std::isfinite(p[0]));
        CHECK(p[0] == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    }
}

TEST_CASE("cross-entropy values") {
    SECTION("perfect one-hot prediction gives zero") {
        std::vector<double> p(20, 0.0);
        p[7] = 1.0;
        CHECK(cross_entropy(p, 7) == 0.0);
    }
    SECTION("uniform prediction over 20 classes gives ln 20") {
        std::vector<double> p(20, 0.05);
        CHECK(cross_entropy(p, 3) == Catch::Approx(std::log(20.0)).epsilon(1e-12));
    }
    SECTION("zero probability on the true class is clamped") {
        std::vector<double> p = {1.0, 0.0};
        CHECK(cross_entropy(p, 1) == Catch::Approx(-std::log(1e-12)).epsilon(1e-12));
        CHECK(cross_entropy(p, 1) >= 0.0);
    }
    SECTION("one-hot vector form agrees with the class-index form") {
        std::vector<double> p = {0.1, 0.7, 0.2};
        std::vector<double> t = {0.0, 1.0, 0.0};
        CHECK(cross_entropy(p, t) == cross_entropy(p, 1));
    }
}

TEST_CASE("network forward produces normalized per-voxel probabilities") {
    NetworkConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.num_classes = 4;
    cfg.dropout_p = 0.0;
    cfg.seed = 21;
    Network net(cfg);
    Rng rng(12);
    Tensor4 x = random_tensor(1, {8, 8, 8}, rng);
    Tensor4 probs = net.forward(x, Mode::infer);
    REQUIRE(probs.c == 4);
    REQUIRE(probs.spatial_dims() == x.spatial_dims());
    const std::size_t n = probs.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int ch = 0; ch < 4; ++ch) sum += probs.v[ch * n + i];
        CHECK(sum == Catch::Approx(1.0).margin(1e-9));
    }
    // zero-initialized head: untrained output is uniform 1/C
    for (double v : probs.v) CHECK(v == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("network pads inputs whose dims are not divisible by 2^depth") {
    NetworkConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.num_classes = 3;
    cfg.dropout_p = 0.0;
    Network net(cfg);
    Rng rng(13);
    Tensor4 x = random_tensor(1, {6, 7, 5}, rng);
    Tensor4 probs = net.forward(x, Mode::infer);
    CHECK(probs.spatial_dims() == Dims3{6, 7, 5});
    const std::size_t n = probs.spatial_size();
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (int ch = 0; ch < 3; ++ch) sum += probs.v[ch * n + i];
        CHECK(sum == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("forward is deterministic and reports shape errors by layer") {
    NetworkConfig cfg;
    cfg.depth = 1;
    cfg.base_channels = 2;
    cfg.num_classes = 3;
    cfg.dropout_p = 0.0;
    cfg.seed = 77;
    Network a(cfg), b(cfg);
    Rng rng(14);
    Tensor4 x = random_tensor(1, {4, 4, 4}, rng);
    CHECK(a.forward(x, Mode::infer) == b.forward(x, Mode::infer));
    Tensor4 bad = random_tensor(2, {4, 4, 4}, rng);
    REQUIRE_THROWS_WITH(a.forward(bad, Mode::infer), Catch::Matchers::ContainsSubstring("channels"));
}

TEST_CASE("parameter registry matches the analytic count") {
    SECTION("hand-computed tiny configuration") {
        NetworkConfig cfg;
        cfg.depth = 1;
        cfg.base_channels = 2;
        cfg.num_classes = 2;
        cfg.dropout_p = 0.0;
        Network net(cfg);
        // enc0: 56 + 110; bottleneck: 220 + 436; dec0: 326 + 110; head: 6
        CHECK(net.parameter_count() == 1264u);
        CHECK(Network::expected_parameter_count(cfg) == 1264u);
    }
    SECTION("default configuration agrees with the formula") {
        NetworkConfig cfg;
        Network net(cfg);
        CHECK(net.parameter_count() == Network::expected_parameter_count(cfg));
        CHECK(net.layer_count() == 25); // depth-3 layer inventory
    }
}

TEST_CASE("lr=0 steps leave the loss unchanged and small steps descend") {
    NetworkConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 3;
    cfg.num_classes = 3;
    cfg.dropout_p = 0.0;
    cfg.seed = 5;
    Network net(cfg);
    Rng rng(15);
    Tensor4 x = random_tensor(1, {8, 8, 8}, rng);
    LabelMap t = random_labels({8, 8, 8}, 3, rng);

    const double l1 = net.train_step(x, t, 0.0);
    const double l2 = net.train_step(x, t, 0.0);
    CHECK(l1 == l2);

    double loss = l2;
    for (int i = 0; i < 8; ++i) loss = net.train_step(x, t, 0.05);
    CHECK(loss < l1);
}

TEST_CASE("analytic gradients match central finite differences") {
    NetworkConfig cfg;
    cfg.depth = 2;
    cfg.base_channels = 2;
    cfg.num_classes = 3;
    cfg.dropout_p = 0.0;
    cfg.seed = 31;
    Network net(cfg);
    Rng rng(16);
    Tensor4 x = random_tensor(1, {8, 8, 8}, rng, 0.0, 1.0);
    LabelMap t = random_labels({8, 8, 8}, 3, rng);
    // a few descent steps so gradients are not at the zero-init head fixpoint
    for (int i = 0; i < 3; ++i) net.train_step(x, t, 0.05);

    const auto res = gradient_check(net, x, t, 1e-4, 600, 123);
    INFO("worst param: " << res.worst_param);
    CHECK(res.params_checked + res.params_skipped == 600u);
    CHECK(res.params_checked > res.params_skipped); // most probes stay differentiable
    CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gradient_check flags a corrupted gradient (negative control)") {
    NetworkConfig cfg;
    cfg.depth = 1;
    cfg.base_channels = 2;
    cfg.num_classes = 2;
    cfg.dropout_p = 0.0;
    cfg.seed = 8;
    Network net(cfg);
    Rng rng(17);
    Tensor4 x = random_tensor(1, {4, 4, 4}, rng, 0.0, 1.0);
    LabelMap t = random_labels({4, 4, 4}, 2, rng);
    net.train_step(x, t, 0.05);

    net.compute_gradients(x, t);
    auto params = net.parameters();
    for (auto& p : params)
        for (std::size_t i = 0; i < p.size; ++i) p.grads[i] += 0.05; // inject a uniform bias
    const auto res = gradient_check(net, x, t, 1e-4, 2000, 9, /*use_existing_gradients=*/true);
    CHECK(res.max_rel_error > 1e-2);
}

TEST_CASE("gradient_check requires dropout to be disabled") {
    NetworkConfig cfg;
    cfg.depth = 1;
    cfg.base_channels = 2;
    cfg.num_classes = 2;
    cfg.dropout_p = 0.5;
    Network net(cfg);
    Tensor4 x(1, {4, 4, 4});
    LabelMap t({4, 4, 4}, {1, 1, 1});
    REQUIRE_THROWS_AS(gradient_check(net, x, t), Error);
}
