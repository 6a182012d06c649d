#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oft/nn.hpp"
#include "oft/observation.hpp"

namespace oft::agents {

using nn::Mat;
using nn::Vec;

enum class Mode { oft, oft_no_gru, vanilla };

Mode parse_mode(const std::string& text);
std::string mode_name(Mode mode);

// GRU over the (possibly perturbed) observation stream with two heads:
// per-slot fault probabilities (sigmoid) and a reconstruction of the
// perturbable entries (identity).
struct TemporalNet {
    nn::GruCell gru;
    nn::DenseLayer head_prob;
    nn::DenseLayer head_recon;
};

TemporalNet make_temporal_net(int obs_dim, int hidden, int n_slots, int recon_dim);

struct TemporalCache {
    nn::GruCache gru;
    Mat prob, recon;
};

struct TemporalOut {
    Mat prob;    // n_slots x batch, entries in (0,1)
    Mat recon;   // recon_dim x batch
    Mat h_next;  // hidden x batch
};

TemporalOut temporal_forward(const TemporalNet& net, const Mat& obs, const Mat& h,
                             TemporalCache* cache = nullptr);

struct TemporalGrads {
    nn::GruGrads gru;
    Mat d_head_prob_w, d_head_recon_w;
    Vec d_head_prob_b, d_head_recon_b;
};
TemporalGrads zero_grads(const TemporalNet& net);

std::vector<nn::ParamRef> param_refs(TemporalNet& net, const std::string& prefix);
std::vector<nn::ParamRef> grad_refs(const TemporalNet& net, TemporalGrads& grads,
                                    const std::string& prefix);

// Backprop of head gradients into the hidden state; the returned matrix is
// the dL/dh_next to feed into the GRU window backward.
Mat temporal_heads_backward(const TemporalNet& net, const TemporalCache& cache, const Mat& dprob,
                            const Mat& drecon, TemporalGrads& grads);

struct AgentLayout {
    int n_vehicles = 4;
    int obs_dim = obs::kObsDim;
    int n_slots = sim::kNeighborSlots;
    int recon_dim = obs::kPerturbDim;  // m * d0 when reconstructing every slot
    int gru_hidden = 64;
    int mlp_hidden = 64;

    int policy_in(Mode mode) const {
        return mode == Mode::oft ? obs_dim + n_slots + recon_dim : obs_dim;
    }
    int critic_in() const { return n_vehicles * obs_dim + n_vehicles; }
    int global_in() const { return n_vehicles * obs_dim + n_vehicles + n_slots; }
};

// Fleet bundle: shared tanh-head policy, one centralized critic per vehicle,
// target copies, and the temporal net when the mode calls for it.
struct VehicleAgents {
    Mode mode = Mode::oft;
    AgentLayout layout;
    std::optional<TemporalNet> temporal;
    nn::Mlp policy;
    nn::Mlp policy_target;
    std::vector<nn::Mlp> critics;
    std::vector<nn::Mlp> critics_target;
};

VehicleAgents make_vehicle_agents(Mode mode, const AgentLayout& layout, Rng& rng);

// DDPG adversary: actor maps the global input to a bounded perturbation,
// critic scores (x, b) pairs.
struct FaultInjector {
    AgentLayout layout;
    Eigen::Vector2d epsilon{10.0, 5.0};
    nn::Mlp actor;
    nn::Mlp actor_target;
    nn::Mlp critic;
    nn::Mlp critic_target;
};

FaultInjector make_fault_injector(const AgentLayout& layout, const Eigen::Vector2d& epsilon,
                                  Rng& rng);

// Policy input [obs_hat | prob | recon] (or just obs_hat without the GRU).
Vec policy_input(Mode mode, const Vec& obs_hat, const Vec& prob, const Vec& recon);

// Tanh head scaled into [accel_min, accel_max]; optional exploration noise is
// applied before the final clip.
double vehicle_act(const VehicleAgents& agents, const Vec& input, double accel_min,
                   double accel_max, double noise_std, Rng* rng);

double vehicle_critic_eval(const VehicleAgents& agents, int vehicle, const Vec& obs_all,
                           const Vec& actions);

// Perturbation bounded per dimension by epsilon; exploration noise is clipped
// back into the ball.
Eigen::Vector2d fault_act(const FaultInjector& injector, const Vec& x, double noise_std, Rng* rng);

double fault_critic_eval(const FaultInjector& injector, const Vec& x, const Eigen::Vector2d& b);

}  // namespace oft::agents
