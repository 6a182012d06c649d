#include "oft/agents.hpp"

#include <algorithm>
#include <cmath>

#include "oft/errors.hpp"

namespace oft::agents {

Mode parse_mode(const std::string& text) {
    if (text == "oft") return Mode::oft;
    if (text == "oft_no_gru") return Mode::oft_no_gru;
    if (text == "vanilla") return Mode::vanilla;
    throw ConfigError("unknown mode '" + text + "' (expected oft|oft_no_gru|vanilla)");
}

std::string mode_name(Mode mode) {
    switch (mode) {
        case Mode::oft: return "oft";
        case Mode::oft_no_gru: return "oft_no_gru";
        case Mode::vanilla: return "vanilla";
    }
    return "?";
}

TemporalNet make_temporal_net(int obs_dim, int hidden, int n_slots, int recon_dim) {
    TemporalNet net;
    net.gru = nn::make_gru(obs_dim, hidden);
    net.head_prob.w = Mat::Zero(n_slots, hidden);
    net.head_prob.b = Vec::Zero(n_slots);
    net.head_prob.act = nn::Act::sigmoid;
    net.head_recon.w = Mat::Zero(recon_dim, hidden);
    net.head_recon.b = Vec::Zero(recon_dim);
    net.head_recon.act = nn::Act::identity;
    return net;
}

TemporalOut temporal_forward(const TemporalNet& net, const Mat& obs, const Mat& h,
                             TemporalCache* cache) {
    TemporalOut out;
    out.h_next = nn::gru_step(net.gru, obs, h, cache ? &cache->gru : nullptr);
    out.prob = nn::activate(nn::Act::sigmoid,
                            (net.head_prob.w * out.h_next).colwise() + net.head_prob.b);
    out.recon = (net.head_recon.w * out.h_next).colwise() + net.head_recon.b;
    if (cache) {
        cache->prob = out.prob;
        cache->recon = out.recon;
    }
    return out;
}

TemporalGrads zero_grads(const TemporalNet& net) {
    TemporalGrads g;
    g.gru = nn::zero_grads(net.gru);
    g.d_head_prob_w = Mat::Zero(net.head_prob.w.rows(), net.head_prob.w.cols());
    g.d_head_prob_b = Vec::Zero(net.head_prob.b.size());
    g.d_head_recon_w = Mat::Zero(net.head_recon.w.rows(), net.head_recon.w.cols());
    g.d_head_recon_b = Vec::Zero(net.head_recon.b.size());
    return g;
}

std::vector<nn::ParamRef> param_refs(TemporalNet& net, const std::string& prefix) {
    auto refs = nn::param_refs(net.gru, prefix + "/gru");
    const int H = net.gru.hidden_dim();
    refs.push_back({prefix + "/prob/w", net.head_prob.w.data(), net.head_prob.w.size(), H});
    refs.push_back({prefix + "/prob/b", net.head_prob.b.data(), net.head_prob.b.size(), H});
    refs.push_back({prefix + "/recon/w", net.head_recon.w.data(), net.head_recon.w.size(), H});
    refs.push_back({prefix + "/recon/b", net.head_recon.b.data(), net.head_recon.b.size(), H});
    return refs;
}

std::vector<nn::ParamRef> grad_refs(const TemporalNet& net, TemporalGrads& grads,
                                    const std::string& prefix) {
    auto refs = nn::grad_refs(net.gru, grads.gru, prefix + "/gru");
    const int H = net.gru.hidden_dim();
    refs.push_back({prefix + "/prob/w", grads.d_head_prob_w.data(), grads.d_head_prob_w.size(), H});
    refs.push_back({prefix + "/prob/b", grads.d_head_prob_b.data(), grads.d_head_prob_b.size(), H});
    refs.push_back(
        {prefix + "/recon/w", grads.d_head_recon_w.data(), grads.d_head_recon_w.size(), H});
    refs.push_back(
        {prefix + "/recon/b", grads.d_head_recon_b.data(), grads.d_head_recon_b.size(), H});
    return refs;
}

Mat temporal_heads_backward(const TemporalNet& net, const TemporalCache& cache, const Mat& dprob,
                            const Mat& drecon, TemporalGrads& grads) {
    const Mat& h_next = cache.gru.h_next;
    const Mat dpre_prob = dprob.cwiseProduct(nn::activate_grad(nn::Act::sigmoid, cache.prob));
    grads.d_head_prob_w.noalias() += dpre_prob * h_next.transpose();
    grads.d_head_prob_b += dpre_prob.rowwise().sum();
    grads.d_head_recon_w.noalias() += drecon * h_next.transpose();
    grads.d_head_recon_b += drecon.rowwise().sum();
    return net.head_prob.w.transpose() * dpre_prob + net.head_recon.w.transpose() * drecon;
}

VehicleAgents make_vehicle_agents(Mode mode, const AgentLayout& layout, Rng& rng) {
    VehicleAgents a;
    a.mode = mode;
    a.layout = layout;
    if (mode == Mode::oft) {
        a.temporal =
            make_temporal_net(layout.obs_dim, layout.gru_hidden, layout.n_slots, layout.recon_dim);
        nn::init_params(param_refs(*a.temporal, "g"), rng);
    }
    const int h = layout.mlp_hidden;
    a.policy = nn::make_mlp({layout.policy_in(mode), h, h, 1}, nn::Act::relu, nn::Act::tanh);
    nn::init_params(nn::param_refs(a.policy, "policy"), rng);
    a.policy_target = a.policy;
    for (int i = 0; i < layout.n_vehicles; ++i) {
        nn::Mlp critic = nn::make_mlp({layout.critic_in(), h, h, 1}, nn::Act::relu, nn::Act::identity);
        nn::init_params(nn::param_refs(critic, "critic"), rng);
        a.critics_target.push_back(critic);
        a.critics.push_back(std::move(critic));
    }
    return a;
}

FaultInjector make_fault_injector(const AgentLayout& layout, const Eigen::Vector2d& epsilon,
                                  Rng& rng) {
    FaultInjector inj;
    inj.layout = layout;
    inj.epsilon = epsilon;
    const int h = layout.mlp_hidden;
    inj.actor = nn::make_mlp({layout.global_in(), h, h, obs::kPerturbDim}, nn::Act::relu,
                             nn::Act::tanh);
    nn::init_params(nn::param_refs(inj.actor, "inj_actor"), rng);
    inj.actor_target = inj.actor;
    inj.critic = nn::make_mlp({layout.global_in() + obs::kPerturbDim, h, h, 1}, nn::Act::relu,
                              nn::Act::identity);
    nn::init_params(nn::param_refs(inj.critic, "inj_critic"), rng);
    inj.critic_target = inj.critic;
    return inj;
}

Vec policy_input(Mode mode, const Vec& obs_hat, const Vec& prob, const Vec& recon) {
    if (mode != Mode::oft) return obs_hat;
    Vec in(obs_hat.size() + prob.size() + recon.size());
    in << obs_hat, prob, recon;
    return in;
}

double vehicle_act(const VehicleAgents& agents, const Vec& input, double accel_min,
                   double accel_max, double noise_std, Rng* rng) {
    const double center = 0.5 * (accel_max + accel_min);
    const double half = 0.5 * (accel_max - accel_min);
    double a = center + half * nn::mlp_forward(agents.policy, input)(0, 0);
    if (noise_std > 0.0 && rng) a += noise_std * half * rng->normal();
    return std::clamp(a, accel_min, accel_max);
}

double vehicle_critic_eval(const VehicleAgents& agents, int vehicle, const Vec& obs_all,
                           const Vec& actions) {
    Vec in(obs_all.size() + actions.size());
    in << obs_all, actions;
    return nn::mlp_forward(agents.critics.at(static_cast<std::size_t>(vehicle)), in)(0, 0);
}

Eigen::Vector2d fault_act(const FaultInjector& injector, const Vec& x, double noise_std,
                          Rng* rng) {
    const Vec y = nn::mlp_forward(injector.actor, x);
    Eigen::Vector2d b;
    for (int d = 0; d < obs::kPerturbDim; ++d) {
        b[d] = injector.epsilon[d] * y[d];
        if (noise_std > 0.0 && rng) b[d] += noise_std * injector.epsilon[d] * rng->normal();
        b[d] = std::clamp(b[d], -injector.epsilon[d], injector.epsilon[d]);
    }
    return b;
}

double fault_critic_eval(const FaultInjector& injector, const Vec& x, const Eigen::Vector2d& b) {
    Vec in(x.size() + obs::kPerturbDim);
    in << x, b;
    return nn::mlp_forward(injector.critic, in)(0, 0);
}

}  // namespace oft::agents
