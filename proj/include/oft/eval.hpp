#pragma once

#include <optional>
#include <string>
#include <vector>

#include "oft/agents.hpp"
#include "oft/config.hpp"
#include "oft/training.hpp"

namespace oft::eval {

struct ConfusionMatrix {
    std::int64_t tp = 0, fn = 0, fp = 0, tn = 0;
    std::int64_t total() const { return tp + fn + fp + tn; }
};

// Fault is the positive class; undefined ratios stay absent rather than 0.
struct DetectionMetrics {
    std::optional<double> accuracy, precision, recall;
};

DetectionMetrics detection_metrics(const ConfusionMatrix& m);

// Per fault-active judgment, in physical units: observation error and
// reconstruction error against the true neighbor state.
struct RecoverySample {
    Eigen::Vector2d err_observed;   // observed - true  [m, m/s]
    Eigen::Vector2d err_predicted;  // predicted - true [m, m/s]
};

struct RecoveryStats {
    double orig_mae_pos = 0, orig_mse_pos = 0, pred_mae_pos = 0, pred_mse_pos = 0;
    double orig_mae_vel = 0, orig_mse_vel = 0, pred_mae_vel = 0, pred_mse_vel = 0;
    // Percentages; NaN when the original error is zero.
    double recovery_mae_pos = 0, recovery_mse_pos = 0, recovery_mae_vel = 0, recovery_mse_vel = 0;
    std::int64_t count = 0;
};

RecoveryStats recovery_stats(const std::vector<RecoverySample>& samples);

struct EvalSettings {
    int episodes = 100;
    std::uint64_t seed = 0;
    FaultSource source = FaultSource::none;
    double threshold = 0.5;
    bool per_step_trace = false;  // fill EvalResult::trace (replay dumps)
};

struct EpisodeMetricsRow {
    int episode = 0;
    double mean_return = 0.0;
    bool collided = false;
    int steps = 0;
    int fault_active_steps = 0;
    ConfusionMatrix confusion;  // this episode's judgments
};

struct TraceRow {
    int episode = 0, t = 0;
    std::vector<double> position, velocity, lane, action;
    bool fault_active = false;
    int recipient = -1, target_slot = -1;
    Eigen::Vector2d b = Eigen::Vector2d::Zero();
    std::vector<double> fault_prob;  // recipient's slot probabilities, empty without a temporal net
};

struct EvalResult {
    double mean_reward = 0.0;
    double collision_rate = 0.0;
    std::optional<double> mean_timesteps;  // over non-collided episodes
    std::vector<EpisodeMetricsRow> rows;
    ConfusionMatrix confusion;
    std::vector<RecoverySample> recovery;
    std::vector<TraceRow> trace;
};

// Noise-free rollouts of a frozen policy. `injector` is required for the
// adversarial source and ignored otherwise.
EvalResult run_evaluation(const RunConfig& cfg, const agents::VehicleAgents& agents,
                          const agents::FaultInjector* injector, const EvalSettings& settings);

// Trains a fresh adversary against the frozen policy (vehicle updates
// disabled) and returns it.
agents::FaultInjector retrain_injector(const RunConfig& cfg, const agents::VehicleAgents& agents,
                                       int episodes, std::uint64_t seed);

struct PolicyUnderHandle {
    std::string name;
    const agents::VehicleAgents* agents;
    const agents::FaultInjector* own_injector;  // co-trained, may be null
};

struct GenCondition {
    std::string name;
    FaultSource source = FaultSource::none;
    const agents::FaultInjector* injector = nullptr;  // for adversarial conditions
    bool retrain = false;  // train a fresh injector against each policy first
    int retrain_episodes = 300;
};

struct GenCell {
    std::string policy, condition;
    double mean_reward = 0.0;
    double collision_rate = 0.0;
    std::optional<double> mean_timesteps;
};

// Full cross product with a shared base seed per cell.
std::vector<GenCell> generalization_matrix(const RunConfig& cfg,
                                           const std::vector<PolicyUnderHandle>& policies,
                                           const std::vector<GenCondition>& conditions,
                                           int episodes, std::uint64_t seed);

// CSV table builders (written to files by the CLI).
std::string aggregate_csv_header();
std::string aggregate_csv_row(const std::string& method, const std::string& condition,
                              int episodes, const EvalResult& result);
std::string episodes_csv(const EvalResult& result);
std::string confusion_csv(const ConfusionMatrix& m);
std::string detection_csv(const ConfusionMatrix& m);
std::string recovery_csv(const RecoveryStats& stats);
std::string generalization_csv(const std::vector<GenCell>& cells);
std::string trace_csv(const std::vector<TraceRow>& trace, int n_vehicles);

}  // namespace oft::eval
