#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "oft/agents.hpp"
#include "oft/checkpoint.hpp"
#include "oft/config.hpp"
#include "oft/merge_env.hpp"
#include "oft/replay.hpp"

namespace oft::train {

using nn::Mat;
using nn::Vec;

// One environment step for the whole fleet, stored in network-input (scaled)
// units. Per-step perturbations are replayed from the fault identity at
// update time, so only activity flags are kept here.
struct VehicleTransition {
    Vec o, o_hat, o_next;  // stacked per vehicle, N * obs_dim
    Vec actions;           // N, physical units
    Vec rewards;           // N
    Vec h, h_next;         // stacked per vehicle, N * H; empty without a temporal net
    Vec centers, halves;   // per-vehicle action scaling of this episode
    std::vector<int> recon_slot;  // per-vehicle reconstruction target slot
    bool done = false;
    bool fault_enabled = false;
    int recipient = -1;
    int target_slot = -1;
    bool active_t = false;
    bool active_t1 = false;
    std::int64_t episode = 0;
    int step = 0;
};

struct FaultTransition {
    Vec x;
    Eigen::Vector2d b;
    double reward = 0.0;
    Vec x_next;
    bool done = false;
};

// Adversary reward: the negated fleet reward sum.
double fault_reward(const std::vector<double>& rewards);

// ---- pure loss/gradient computations (gradient-checkable) ----

struct SeqBatch {
    int window = 0;
    std::vector<Mat> obs_hat;       // per step, obs_dim x cols
    Mat h0;                         // hidden x cols
    std::vector<Mat> prob_target;   // per step, n_slots x cols
    std::vector<Mat> recon_target;  // per step, recon_dim x cols
    int cols() const { return static_cast<int>(h0.cols()); }
};

// Mean over (column, step) of |prob - target|^2 + |recon - target|^2,
// backpropagated through the recurrence. Gradients accumulate when given.
double temporal_loss(const agents::TemporalNet& net, const SeqBatch& batch,
                     agents::TemporalGrads* grads);

// Mean squared TD error against fixed targets.
double td_loss(const nn::Mlp& critic, const Mat& inputs, const Eigen::RowVectorXd& targets,
               nn::MlpGrads* grads);

struct ActorBatch {
    std::vector<Mat> policy_in;  // per vehicle, policy_in x k
    Mat critic_obs;              // N * obs_dim x k
    Mat actions;                 // N x k, physical units
    Mat centers, halves;         // N x k
};

// Mean over (vehicle, column) of Q_i with vehicle i's action replaced by the
// policy output. Accumulates dJ/d(policy params) when grads is given.
double actor_objective(const nn::Mlp& policy, const std::vector<nn::Mlp>& critics,
                       const ActorBatch& batch, nn::MlpGrads* grads);

// Mean over columns of Q(x, epsilon * actor(x)).
double fault_actor_objective(const nn::Mlp& actor, const nn::Mlp& critic, const Mat& x,
                             const Eigen::Vector2d& epsilon, nn::MlpGrads* grads);

// ---- trainer ----

struct EpisodeRow {
    std::int64_t episode = 0;
    std::vector<double> returns;  // per vehicle
    double mean_return = 0.0;
    bool collided = false;
    int steps = 0;
    int fault_active_steps = 0;
    double loss_temporal = 0.0, loss_critic = 0.0, actor_grad = 0.0;
    double loss_fault_critic = 0.0, fault_actor_grad = 0.0;
    int updates = 0;  // update cycles run during this episode
};

std::string episode_csv_header(int n_vehicles);
std::string episode_csv_row(const EpisodeRow& row);

class Trainer {
  public:
    explicit Trainer(const RunConfig& cfg);
    // Adopt pre-built networks (frozen-policy adversary training, ablations).
    Trainer(const RunConfig& cfg, agents::VehicleAgents vehicle_agents,
            std::optional<agents::FaultInjector> injector);

    // Runs episodes [episode, episode + count) of the configured schedule.
    // The callback, when set, receives each finished row.
    std::vector<EpisodeRow> run(int count,
                                const std::function<void(const EpisodeRow&)>& on_row = {});
    EpisodeRow run_episode();

    Checkpoint to_checkpoint() const;
    static Trainer resume(const Checkpoint& ckpt);

    const RunConfig& config() const { return cfg_; }
    const agents::VehicleAgents& vehicle_agents() const { return agents_; }
    agents::VehicleAgents& vehicle_agents() { return agents_; }
    const std::optional<agents::FaultInjector>& injector() const { return injector_; }
    std::optional<agents::FaultInjector>& injector() { return injector_; }
    std::int64_t episode() const { return episode_; }
    std::int64_t total_steps() const { return total_steps_; }
    const RingBuffer<VehicleTransition>& vehicle_buffer() const { return buf_vehicle_; }
    const RingBuffer<FaultTransition>& fault_buffer() const { return buf_fault_; }
    // Total environment steps at which an update cycle actually ran.
    const std::vector<std::int64_t>& update_steps() const { return update_steps_; }
    // Applied perturbations, recorded when collection is enabled (tests).
    void collect_applied_faults(bool on) { collect_b_ = on; }
    const std::vector<Eigen::Vector2d>& applied_faults() const { return applied_b_; }

    // Update primitives; public so the suites can drive them directly.
    SeqBatch sample_seq_batch(int n_seq, int window, Rng& rng) const;
    struct VehicleBatch;
    VehicleBatch sample_vehicle_batch(int k, Rng& rng) const;
    struct FaultBatch {
        Mat x, x_next;  // global_in x k
        Mat b;          // d0 x k
        Eigen::RowVectorXd rewards, done;
    };
    FaultBatch sample_fault_batch(int k, Rng& rng) const;

    double temporal_update(const SeqBatch& batch);
    double critic_update(int vehicle, const VehicleBatch& batch);
    double actor_update(const VehicleBatch& batch);
    double fault_critic_update(const FaultBatch& batch);
    double fault_actor_update(const FaultBatch& batch);
    void soft_update_targets();

    // Perturbed next observations rebuilt from the stored fault identities
    // through the current injector (or a fresh uniform draw for random
    // faults). Exposed for the critic truth-input checks.
    Mat reconstruct_next_obs_hat(const VehicleBatch& batch);
    Mat critic_inputs(const VehicleBatch& batch) const;
    Eigen::RowVectorXd critic_targets(int vehicle, const VehicleBatch& batch);
    ActorBatch make_actor_batch(const VehicleBatch& batch) const;

  private:
    void init_optimizers();
    bool update_cycle(EpisodeRow& row);
    void check_finite(const EpisodeRow& row) const;

    RunConfig cfg_;
    agents::VehicleAgents agents_;
    std::optional<agents::FaultInjector> injector_;
    sim::MergeEnv env_;
    RingBuffer<VehicleTransition> buf_vehicle_;
    RingBuffer<FaultTransition> buf_fault_;
    nn::AdamState opt_policy_, opt_temporal_, opt_inj_actor_, opt_inj_critic_;
    std::vector<nn::AdamState> opt_critics_;
    Rng update_rng_;
    std::int64_t episode_ = 0;
    std::int64_t total_steps_ = 0;
    std::vector<std::int64_t> update_steps_;
    bool collect_b_ = false;
    std::vector<Eigen::Vector2d> applied_b_;
};

struct VehicleBatchStorage {
    Mat o, o_hat, o_next;  // N*obs_dim x k
    Mat actions, rewards;  // N x k
    Mat h, h_next;         // N*H x k (zero rows without a temporal net)
    Mat centers, halves;   // N x k
    Eigen::RowVectorXd done;
    std::vector<const VehicleTransition*> rows;
};
struct Trainer::VehicleBatch : VehicleBatchStorage {};

// Builds fresh networks matching the checkpoint and loads the stored
// parameters (evaluation-side loading; buffers and optimizers are ignored).
struct LoadedPolicy {
    RunConfig cfg;
    agents::VehicleAgents agents;
    std::optional<agents::FaultInjector> injector;
    std::int64_t episode = 0;
};
LoadedPolicy load_policy(const Checkpoint& ckpt);

}  // namespace oft::train
