#include <doctest.h>

#include <cmath>

#include "oft/nn.hpp"
#include "test_helpers.hpp"

using namespace oft;
using namespace oft::nn;

namespace {

Mlp random_mlp(Rng& rng, const std::vector<int>& dims, Act hidden, Act head) {
    Mlp net = make_mlp(dims, hidden, head);
    init_params(param_refs(net, "net"), rng);
    return net;
}

// Scalar re-implementation of the dense forward pass, no Eigen.
std::vector<double> reference_mlp(const Mlp& net, const std::vector<double>& input) {
    std::vector<double> cur = input;
    for (const auto& layer : net.layers) {
        std::vector<double> next(static_cast<std::size_t>(layer.w.rows()), 0.0);
        for (int r = 0; r < layer.w.rows(); ++r) {
            double z = layer.b[r];
            for (int c = 0; c < layer.w.cols(); ++c) z += layer.w(r, c) * cur[static_cast<std::size_t>(c)];
            switch (layer.act) {
                case Act::identity: break;
                case Act::relu: z = z > 0 ? z : 0; break;
                case Act::tanh: z = std::tanh(z); break;
                case Act::sigmoid: z = 1.0 / (1.0 + std::exp(-z)); break;
            }
            next[static_cast<std::size_t>(r)] = z;
        }
        cur = std::move(next);
    }
    return cur;
}

// Scalar GRU step.
std::vector<double> reference_gru(const GruCell& cell, const std::vector<double>& x,
                                  const std::vector<double>& h) {
    const int H = cell.hidden_dim();
    const int I = cell.in_dim();
    auto gate = [&](const Mat& w, const Mat& u, const Vec& b, const std::vector<double>& hv,
                    int r) {
        double z = b[r];
        for (int c = 0; c < I; ++c) z += w(r, c) * x[static_cast<std::size_t>(c)];
        for (int c = 0; c < H; ++c) z += u(r, c) * hv[static_cast<std::size_t>(c)];
        return z;
    };
    std::vector<double> out(static_cast<std::size_t>(H));
    for (int r = 0; r < H; ++r) {
        const double z = 1.0 / (1.0 + std::exp(-gate(cell.wz, cell.uz, cell.bz, h, r)));
        const double rg = 1.0 / (1.0 + std::exp(-gate(cell.wr, cell.ur, cell.br, h, r)));
        double npre = cell.bn[r];
        for (int c = 0; c < I; ++c) npre += cell.wn(r, c) * x[static_cast<std::size_t>(c)];
        for (int c = 0; c < H; ++c) {
            const double rc = 1.0 / (1.0 + std::exp(-gate(cell.wr, cell.ur, cell.br, h, c)));
            npre += cell.un(r, c) * rc * h[static_cast<std::size_t>(c)];
        }
        const double n = std::tanh(npre);
        out[static_cast<std::size_t>(r)] = (1.0 - z) * n + z * h[static_cast<std::size_t>(r)];
    }
    return out;
}

}  // namespace

TEST_CASE("mlp forward: zero and identity special cases") {
    Mlp zero = make_mlp({3, 3}, Act::relu, Act::identity);
    Vec in(3);
    in << 1.0, -2.0, 0.5;
    CHECK(mlp_forward(zero, in).norm() == 0.0);

    Mlp ident = make_mlp({3, 3}, Act::relu, Act::identity);
    ident.layers[0].w = Mat::Identity(3, 3);
    CHECK((mlp_forward(ident, in) - in).norm() == 0.0);
}

TEST_CASE("mlp forward agrees with the scalar re-implementation") {
    Rng rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        const int in_dim = 1 + static_cast<int>(rng.uniform_int(0, 6));
        const int mid = 1 + static_cast<int>(rng.uniform_int(0, 8));
        const int out_dim = 1 + static_cast<int>(rng.uniform_int(0, 4));
        const Act head = trial % 2 == 0 ? Act::tanh : Act::identity;
        Mlp net = random_mlp(rng, {in_dim, mid, out_dim}, Act::relu, head);
        std::vector<double> input(static_cast<std::size_t>(in_dim));
        for (auto& v : input) v = rng.uniform(-2.0, 2.0);
        const Vec out = mlp_forward(net, Eigen::Map<const Vec>(input.data(), in_dim));
        const auto ref = reference_mlp(net, input);
        for (int r = 0; r < out_dim; ++r)
            CHECK(out[r] == doctest::Approx(ref[static_cast<std::size_t>(r)]).epsilon(1e-12));
    }
}

TEST_CASE("mlp backward matches central finite differences") {
    Rng rng(47);
    int configs = 0;
    while (configs < 40) {
        Mlp net = random_mlp(rng, {4, 6, 5, 2}, Act::relu, Act::tanh);
        Mat x(4, 3);
        for (int i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.5, 1.5);
        Mat dy(2, 3);
        for (int i = 0; i < dy.size(); ++i) dy.data()[i] = rng.uniform(-1.0, 1.0);

        // keep pre-activations away from the relu kink so the finite
        // difference is well defined
        MlpCache cache;
        mlp_forward(net, x, &cache);
        double min_pre = 1e9;
        for (std::size_t l = 0; l + 1 < net.layers.size(); ++l)
            min_pre = std::min(min_pre, cache.pre[l].cwiseAbs().minCoeff());
        if (min_pre < 1e-3) continue;
        ++configs;

        auto loss = [&] { return (mlp_forward(net, x).array() * dy.array()).sum(); };
        MlpGrads grads = zero_grads(net);
        mlp_backward(net, cache, dy, grads);
        const auto params = param_refs(net, "net");
        const auto flat = testutil::flatten(grad_refs(net, grads, "net"));
        CHECK(testutil::finite_difference_error(params, loss, flat) < 1e-4);
    }

    SUBCASE("zero output gradient produces zero parameter gradients") {
        Mlp net = random_mlp(rng, {3, 4, 2}, Act::relu, Act::identity);
        Mat x = Mat::Random(3, 2);
        MlpCache cache;
        mlp_forward(net, x, &cache);
        MlpGrads grads = zero_grads(net);
        mlp_backward(net, cache, Mat::Zero(2, 2), grads);
        CHECK(grad_norm(grad_refs(net, grads, "net")) == 0.0);
    }
    SUBCASE("gradient is linear in the loss scale") {
        Mlp net = random_mlp(rng, {3, 4, 1}, Act::tanh, Act::identity);
        Mat x = Mat::Random(3, 2);
        Mat dy = Mat::Random(1, 2);
        MlpCache cache;
        mlp_forward(net, x, &cache);
        MlpGrads g1 = zero_grads(net), g2 = zero_grads(net);
        mlp_backward(net, cache, dy, g1);
        mlp_backward(net, cache, Mat(3.0 * dy), g2);
        for (std::size_t l = 0; l < g1.dw.size(); ++l)
            CHECK((g2.dw[l] - 3.0 * g1.dw[l]).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("gru step special cases") {
    GruCell zero = make_gru(3, 4);
    Mat x = Mat::Random(3, 2);
    CHECK(gru_step(zero, x, Mat::Zero(4, 2)).norm() == 0.0);

    // a large update-gate bias forces z ~ 1 and h' ~ h
    GruCell pass = make_gru(3, 4);
    Rng rng(5);
    init_params(param_refs(pass, "gru"), rng);
    pass.bz.setConstant(60.0);
    Mat h = Mat::Random(4, 2);
    CHECK((gru_step(pass, x, h) - h).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("gru step agrees with the scalar re-implementation") {
    Rng rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const int I = 1 + static_cast<int>(rng.uniform_int(0, 4));
        const int H = 1 + static_cast<int>(rng.uniform_int(0, 5));
        GruCell cell = make_gru(I, H);
        init_params(param_refs(cell, "gru"), rng);
        std::vector<double> x(static_cast<std::size_t>(I)), h(static_cast<std::size_t>(H));
        for (auto& v : x) v = rng.uniform(-2.0, 2.0);
        for (auto& v : h) v = rng.uniform(-1.0, 1.0);
        const Mat out = gru_step(cell, Eigen::Map<const Vec>(x.data(), I),
                                 Eigen::Map<const Vec>(h.data(), H));
        const auto ref = reference_gru(cell, x, h);
        for (int r = 0; r < H; ++r)
            CHECK(out(r, 0) == doctest::Approx(ref[static_cast<std::size_t>(r)]).epsilon(1e-12));
    }
}

TEST_CASE("gru hidden state stays inside (-1, 1)") {
    Rng rng(13);
    GruCell cell = make_gru(4, 6);
    init_params(param_refs(cell, "gru"), rng);
    for (auto& ref : param_refs(cell, "gru"))
        for (std::int64_t i = 0; i < ref.size; ++i) ref.data[i] *= 5.0;  // exaggerate
    Mat h = Mat::Zero(6, 1);
    for (int t = 0; t < 200; ++t) {
        Mat x(4, 1);
        for (int i = 0; i < 4; ++i) x(i, 0) = rng.uniform(-3.0, 3.0);
        h = gru_step(cell, x, h);
        CHECK(h.cwiseAbs().maxCoeff() < 1.0);
    }
}

TEST_CASE("gru backward through a window matches finite differences") {
    Rng rng(99);
    int configs = 0;
    while (configs < 25) {
        const int I = 3, H = 4, B = 2;
        GruCell cell = make_gru(I, H);
        init_params(param_refs(cell, "gru"), rng);
        const int window = 1 + static_cast<int>(rng.uniform_int(0, 3));
        std::vector<Mat> xs, dys;
        for (int t = 0; t < window; ++t) {
            xs.push_back(Mat::Random(I, B));
            dys.push_back(Mat::Random(H, B));
        }
        const Mat h0 = Mat::Random(H, B);
        ++configs;

        auto loss = [&] {
            Mat h = h0;
            double total = 0.0;
            for (int t = 0; t < window; ++t) {
                h = gru_step(cell, xs[static_cast<std::size_t>(t)], h);
                total += (h.array() * dys[static_cast<std::size_t>(t)].array()).sum();
            }
            return total;
        };

        std::vector<GruCache> caches(static_cast<std::size_t>(window));
        Mat h = h0;
        for (int t = 0; t < window; ++t)
            h = gru_step(cell, xs[static_cast<std::size_t>(t)], h, &caches[static_cast<std::size_t>(t)]);
        GruGrads grads = zero_grads(cell);
        gru_backward(cell, caches, dys, grads);

        const auto params = param_refs(cell, "gru");
        const auto flat = testutil::flatten(grad_refs(cell, grads, "gru"));
        CHECK(testutil::finite_difference_error(params, loss, flat) < 1e-4);
    }

    SUBCASE("window of one equals the single-step gradient") {
        GruCell cell = make_gru(3, 4);
        init_params(param_refs(cell, "gru"), rng);
        const Mat x = Mat::Random(3, 2), h0 = Mat::Random(4, 2), dy = Mat::Random(4, 2);
        GruCache cache;
        gru_step(cell, x, h0, &cache);
        GruGrads window_grads = zero_grads(cell), step_grads = zero_grads(cell);
        gru_backward(cell, {cache}, {dy}, window_grads);
        gru_backward_step(cell, cache, dy, step_grads);
        CHECK((window_grads.dwn - step_grads.dwn).cwiseAbs().maxCoeff() == 0.0);
        CHECK((window_grads.duz - step_grads.duz).cwiseAbs().maxCoeff() == 0.0);
    }
    SUBCASE("zero output gradients give zero parameter gradients") {
        GruCell cell = make_gru(3, 4);
        init_params(param_refs(cell, "gru"), rng);
        GruCache cache;
        gru_step(cell, Mat::Random(3, 2), Mat::Random(4, 2), &cache);
        GruGrads grads = zero_grads(cell);
        gru_backward(cell, {cache}, {Mat::Zero(4, 2)}, grads);
        CHECK(grad_norm(grad_refs(cell, grads, "gru")) == 0.0);
    }
}

TEST_CASE("adam: first-step identity, zero-grad stasis, determinism") {
    Mlp net = make_mlp({1, 1}, Act::identity, Act::identity);
    net.layers[0].w(0, 0) = 1.0;
    auto params = param_refs(net, "net");
    AdamState state = make_adam(total_size(params), 0.01);

    MlpGrads grads = zero_grads(net);
    grads.dw[0](0, 0) = 0.37;  // any positive gradient
    auto grefs = grad_refs(net, grads, "net");
    adam_step(state, params, grefs);
    CHECK(net.layers[0].w(0, 0) == doctest::Approx(1.0 - 0.01).epsilon(1e-6));

    SUBCASE("zero gradient on a fresh state leaves parameters unchanged") {
        AdamState fresh = make_adam(total_size(params), 0.01);
        const double before = net.layers[0].w(0, 0);
        grads.dw[0](0, 0) = 0.0;
        grads.db[0][0] = 0.0;
        adam_step(fresh, params, grefs);
        CHECK(net.layers[0].w(0, 0) == before);
    }
    SUBCASE("identical states and gradients give identical results") {
        Mlp net2 = net;
        AdamState state2 = state;
        auto params2 = param_refs(net2, "net");
        grads.dw[0](0, 0) = -0.8;
        adam_step(state, params, grefs);
        adam_step(state2, params2, grefs);
        CHECK(net.layers[0].w(0, 0) == net2.layers[0].w(0, 0));
    }
}

TEST_CASE("soft_update endpoints and midpoint") {
    Mlp target = make_mlp({2, 2}, Act::identity, Act::identity);
    Mlp source = make_mlp({2, 2}, Act::identity, Act::identity);
    source.layers[0].w.setConstant(2.0);
    source.layers[0].b.setConstant(2.0);

    Mlp t1 = target;
    soft_update(param_refs(t1, "t"), param_refs(source, "s"), 1.0);
    CHECK((t1.layers[0].w.array() == 2.0).all());

    Mlp t0 = target;
    soft_update(param_refs(t0, "t"), param_refs(source, "s"), 0.0);
    CHECK((t0.layers[0].w.array() == 0.0).all());

    Mlp th = target;
    soft_update(param_refs(th, "t"), param_refs(source, "s"), 0.5);
    CHECK((th.layers[0].w.array() == 1.0).all());
}

TEST_CASE("init_params is seeded, bounded and seed-sensitive") {
    Mlp a = make_mlp({8, 16, 4}, Act::relu, Act::tanh);
    Mlp b = make_mlp({8, 16, 4}, Act::relu, Act::tanh);
    Rng ra(21), rb(21), rc(22);
    init_params(param_refs(a, "n"), ra);
    init_params(param_refs(b, "n"), rb);
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        CHECK((a.layers[l].w.array() == b.layers[l].w.array()).all());

    for (const auto& ref : param_refs(a, "n")) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(ref.fan_in));
        for (std::int64_t i = 0; i < ref.size; ++i) {
            CHECK(ref.data[i] >= -bound);
            CHECK(ref.data[i] <= bound);
        }
    }

    Mlp c = make_mlp({8, 16, 4}, Act::relu, Act::tanh);
    init_params(param_refs(c, "n"), rc);
    bool differs = false;
    for (std::size_t l = 0; l < a.layers.size(); ++l)
        if ((a.layers[l].w - c.layers[l].w).cwiseAbs().maxCoeff() > 0) differs = true;
    CHECK(differs);
}
