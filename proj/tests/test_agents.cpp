#include <doctest.h>

#include <cmath>

#include "oft/agents.hpp"
#include "test_helpers.hpp"

using namespace oft;
using namespace oft::agents;
using nn::Mat;
using nn::Vec;

namespace {

AgentLayout small_layout() {
    AgentLayout l;
    l.n_vehicles = 4;
    l.gru_hidden = 8;
    l.mlp_hidden = 12;
    return l;
}

}  // namespace

TEST_CASE("temporal head outputs: sigmoid range and zero-parameter case") {
    const AgentLayout layout = small_layout();
    TemporalNet zero = make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots,
                                         layout.recon_dim);
    const Mat obs = Mat::Random(layout.obs_dim, 3);
    const auto out = temporal_forward(zero, obs, Mat::Zero(layout.gru_hidden, 3));
    CHECK((out.prob.array() == 0.5).all());
    CHECK(out.recon.norm() == 0.0);
    CHECK(out.h_next.norm() == 0.0);

    Rng rng(3);
    TemporalNet net = make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots,
                                        layout.recon_dim);
    init_params(param_refs(net, "g"), rng);
    for (int trial = 0; trial < 50; ++trial) {
        const auto o = temporal_forward(net, Mat::Random(layout.obs_dim, 2) * 3.0,
                                        Mat::Random(layout.gru_hidden, 2));
        CHECK((o.prob.array() > 0.0).all());
        CHECK((o.prob.array() < 1.0).all());
    }
}

TEST_CASE("temporal forward agrees with layered recomputation") {
    const AgentLayout layout = small_layout();
    Rng rng(17);
    TemporalNet net = make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots,
                                        layout.recon_dim);
    init_params(param_refs(net, "g"), rng);
    const Mat obs = Mat::Random(layout.obs_dim, 1);
    const Mat h = Mat::Random(layout.gru_hidden, 1);
    const auto out = temporal_forward(net, obs, h);

    const Mat h_next = nn::gru_step(net.gru, obs, h);
    const Mat prob = nn::activate(nn::Act::sigmoid,
                                  (net.head_prob.w * h_next).colwise() + net.head_prob.b);
    const Mat recon = (net.head_recon.w * h_next).colwise() + net.head_recon.b;
    CHECK((out.h_next - h_next).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.prob - prob).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((out.recon - recon).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("hidden state reset reproduces a fresh agent bit-exactly") {
    const AgentLayout layout = small_layout();
    Rng rng(29);
    TemporalNet net = make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots,
                                        layout.recon_dim);
    init_params(param_refs(net, "g"), rng);
    const Mat obs = Mat::Random(layout.obs_dim, 4);

    // run some steps, then reset the hidden state to zeros
    Mat h = Mat::Zero(layout.gru_hidden, 4);
    for (int t = 0; t < 5; ++t) h = temporal_forward(net, obs, h).h_next;
    const auto after_reset = temporal_forward(net, obs, Mat::Zero(layout.gru_hidden, 4));
    const auto fresh = temporal_forward(net, obs, Mat::Zero(layout.gru_hidden, 4));
    CHECK((after_reset.prob.array() == fresh.prob.array()).all());
    CHECK((after_reset.recon.array() == fresh.recon.array()).all());
    CHECK((after_reset.h_next.array() == fresh.h_next.array()).all());
}

TEST_CASE("vehicle actions stay within per-vehicle bounds") {
    const AgentLayout layout = small_layout();
    Rng rng(41);
    VehicleAgents agents = make_vehicle_agents(Mode::oft, layout, rng);
    Rng noise(5);
    for (int trial = 0; trial < 300; ++trial) {
        Vec input = Vec::Random(layout.policy_in(Mode::oft)) * 4.0;
        const double lo = -5.0, hi = 2.0 + (trial % 3);
        const double a = vehicle_act(agents, input, lo, hi, trial % 2 ? 0.5 : 0.0, &noise);
        CHECK(a >= lo);
        CHECK(a <= hi);
    }
    SUBCASE("noise-free actions are deterministic") {
        const Vec input = Vec::Random(layout.policy_in(Mode::oft));
        CHECK(vehicle_act(agents, input, -5.0, 3.0, 0.0, nullptr) ==
              vehicle_act(agents, input, -5.0, 3.0, 0.0, nullptr));
    }
}

TEST_CASE("policy weight sharing: one parameter set drives all vehicles") {
    const AgentLayout layout = small_layout();
    Rng rng(43);
    VehicleAgents agents = make_vehicle_agents(Mode::oft, layout, rng);
    const Vec input = Vec::Random(layout.policy_in(Mode::oft));
    const double before = vehicle_act(agents, input, -5.0, 3.0, 0.0, nullptr);
    agents.policy.layers[0].w.array() += 0.05;
    const double after = vehicle_act(agents, input, -5.0, 3.0, 0.0, nullptr);
    CHECK(before != after);  // same change visible through every vehicle's call
}

TEST_CASE("ablation mode acts on the raw observation only") {
    const AgentLayout layout = small_layout();
    Rng rng(53);
    VehicleAgents agents = make_vehicle_agents(Mode::oft_no_gru, layout, rng);
    CHECK_FALSE(agents.temporal.has_value());
    CHECK(agents.policy.in_dim() == layout.obs_dim);
    const Vec obs = Vec::Random(layout.obs_dim);
    const Vec p1 = Vec::Random(layout.n_slots), r1 = Vec::Random(layout.recon_dim);
    const Vec p2 = Vec::Random(layout.n_slots), r2 = Vec::Random(layout.recon_dim);
    const Vec in1 = policy_input(Mode::oft_no_gru, obs, p1, r1);
    const Vec in2 = policy_input(Mode::oft_no_gru, obs, p2, r2);
    CHECK((in1.array() == in2.array()).all());
    CHECK(vehicle_act(agents, in1, -5.0, 3.0, 0.0, nullptr) ==
          vehicle_act(agents, in2, -5.0, 3.0, 0.0, nullptr));
}

TEST_CASE("critic evaluation is finite, sensitive and differentiable") {
    const AgentLayout layout = small_layout();
    Rng rng(59);
    VehicleAgents agents = make_vehicle_agents(Mode::oft, layout, rng);
    const Vec obs_all = Vec::Random(layout.n_vehicles * layout.obs_dim);
    Vec actions = Vec::Random(layout.n_vehicles) * 3.0;
    const double q = vehicle_critic_eval(agents, 0, obs_all, actions);
    CHECK(std::isfinite(q));

    // sensitivity to another vehicle's action
    Vec actions2 = actions;
    actions2[2] += 1.0;
    CHECK(vehicle_critic_eval(agents, 0, obs_all, actions2) != q);

    // dQ/da_i against a central difference
    nn::MlpCache cache;
    Vec in(obs_all.size() + actions.size());
    in << obs_all, actions;
    nn::mlp_forward(agents.critics[0], in, &cache);
    nn::MlpGrads grads = nn::zero_grads(agents.critics[0]);
    const Mat din = nn::mlp_backward(agents.critics[0], cache, Mat::Ones(1, 1), grads);
    for (int i = 0; i < layout.n_vehicles; ++i) {
        const double h = 1e-6;
        Vec up = actions, down = actions;
        up[i] += h;
        down[i] -= h;
        const double fd = (vehicle_critic_eval(agents, 0, obs_all, up) -
                           vehicle_critic_eval(agents, 0, obs_all, down)) /
                          (2 * h);
        const double analytic = din(obs_all.size() + i, 0);
        CHECK(analytic == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("fault actor output is always inside the epsilon ball") {
    const AgentLayout layout = small_layout();
    Rng rng(61);
    const Eigen::Vector2d eps(10.0, 5.0);
    FaultInjector inj = make_fault_injector(layout, eps, rng);
    Rng noise(7);
    for (int trial = 0; trial < 300; ++trial) {
        const Vec x = Vec::Random(layout.global_in()) * 2.0;
        const auto b = fault_act(inj, x, trial % 2 ? 0.4 : 0.0, &noise);
        CHECK(std::abs(b[0]) <= eps[0]);
        CHECK(std::abs(b[1]) <= eps[1]);
    }
    SUBCASE("zero-parameter actor emits zero") {
        FaultInjector zero = inj;
        for (auto& layer : zero.actor.layers) {
            layer.w.setZero();
            layer.b.setZero();
        }
        const auto b = fault_act(zero, Vec::Random(layout.global_in()), 0.0, nullptr);
        CHECK(b[0] == 0.0);
        CHECK(b[1] == 0.0);
    }
    SUBCASE("deterministic without noise") {
        const Vec x = Vec::Random(layout.global_in());
        const auto b1 = fault_act(inj, x, 0.0, nullptr);
        const auto b2 = fault_act(inj, x, 0.0, nullptr);
        CHECK((b1.array() == b2.array()).all());
    }
}

TEST_CASE("fault critic is finite and differentiable in b") {
    const AgentLayout layout = small_layout();
    Rng rng(67);
    FaultInjector inj = make_fault_injector(layout, {10.0, 5.0}, rng);
    const Vec x = Vec::Random(layout.global_in());
    const Eigen::Vector2d b(1.5, -0.5);
    const double q = fault_critic_eval(inj, x, b);
    CHECK(std::isfinite(q));

    const double h = 1e-6;
    for (int d = 0; d < 2; ++d) {
        Eigen::Vector2d up = b, down = b;
        up[d] += h;
        down[d] -= h;
        const double fd = (fault_critic_eval(inj, x, up) - fault_critic_eval(inj, x, down)) / (2 * h);

        nn::MlpCache cache;
        Vec in(x.size() + 2);
        in << x, b;
        nn::mlp_forward(inj.critic, in, &cache);
        nn::MlpGrads grads = nn::zero_grads(inj.critic);
        const Mat din = nn::mlp_backward(inj.critic, cache, Mat::Ones(1, 1), grads);
        CHECK(din(x.size() + d, 0) == doctest::Approx(fd).epsilon(1e-5));
    }
}

TEST_CASE("temporal gradients (GRU plus both heads) pass finite differences") {
    const AgentLayout layout = small_layout();
    Rng rng(71);
    TemporalNet net = make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots,
                                        layout.recon_dim);
    init_params(param_refs(net, "g"), rng);
    const Mat obs = Mat::Random(layout.obs_dim, 3);
    const Mat h = Mat::Random(layout.gru_hidden, 3);
    const Mat dprob = Mat::Random(layout.n_slots, 3);
    const Mat drecon = Mat::Random(layout.recon_dim, 3);

    auto loss = [&] {
        const auto out = temporal_forward(net, obs, h);
        return (out.prob.array() * dprob.array()).sum() +
               (out.recon.array() * drecon.array()).sum();
    };

    TemporalCache cache;
    temporal_forward(net, obs, h, &cache);
    TemporalGrads grads = zero_grads(net);
    const Mat dh = temporal_heads_backward(net, cache, dprob, drecon, grads);
    nn::gru_backward(net.gru, {cache.gru}, {dh}, grads.gru);

    const auto params = param_refs(net, "g");
    const auto flat = testutil::flatten(grad_refs(net, grads, "g"));
    CHECK(testutil::finite_difference_error(params, loss, flat) < 1e-4);
}
