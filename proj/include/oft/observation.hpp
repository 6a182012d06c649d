#pragma once

#include <Eigen/Dense>
#include <array>
#include <vector>

#include "oft/merge_env.hpp"
#include "oft/rng.hpp"

namespace oft::obs {

inline constexpr int kStateDim = 4;    // [exists, position, velocity, lane]
inline constexpr int kPerturbDim = 2;  // position and velocity entries of a neighbor block
inline constexpr int kObsDim = (sim::kNeighborSlots + 1) * kStateDim;

using Obs = Eigen::VectorXd;

struct PerturbationBudget {
    Eigen::Vector2d epsilon{10.0, 5.0};  // meters, meters/second
};

// One fault per episode: a recipient misreads one neighbor slot inside a
// step window. The slot deactivates for any step where the neighbor is gone.
struct FaultConfig {
    bool enabled = false;
    int recipient = -1;
    int target_slot = -1;  // 0-based slot into the neighbor array
    int t_on = 0;
    int t_off = 0;  // active window is [t_on, t_off)

    bool in_window(int t) const { return enabled && t >= t_on && t < t_off; }
};

struct FaultSchedule {
    double fault_prob = 0.75;
    int t_on_lo = 2;
    int min_duration = 3;
};

struct FaultIndicators {
    Eigen::VectorXd recipient_onehot;  // length N
    Eigen::VectorXd target_onehot;     // length m
};

// Observation scaling applied at the network boundary; physical units
// everywhere else.
struct ObsScale {
    double pos = 0.01;
    double vel = 1.0 / 30.0;
};

// [ego state | m neighbor blocks of relative values]; absent slots zeroed.
Obs build_observation(const std::vector<sim::VehicleState>& states, int i,
                      const std::array<int, sim::kNeighborSlots>& nbrs,
                      const sim::RoadGeometry& road);

std::vector<Obs> build_all_observations(const std::vector<sim::VehicleState>& states,
                                        const sim::RoadGeometry& road);

// Adds clip(b, -eps, eps) to the perturbable entries of a neighbor block.
void apply_fault(Eigen::Ref<Eigen::VectorXd> block, const Eigen::Vector2d& b,
                 const Eigen::Vector2d& epsilon);

// Copies the true observations, perturbing only the recipient's target block
// when `active` holds. Everything else is bit-identical to the input.
std::vector<Obs> perturb_observations(const std::vector<Obs>& truth, const FaultConfig& fault,
                                      bool active, const Eigen::Vector2d& b,
                                      const PerturbationBudget& budget);

FaultConfig sample_fault_config(Rng& rng, const std::vector<sim::VehicleState>& states,
                                const sim::RoadGeometry& road, const FaultSchedule& schedule,
                                int max_steps);

FaultIndicators encode_indicators(const FaultConfig& fault, int n_vehicles, int n_slots);

// x = [o_1, ..., o_N, recipient one-hot, target one-hot].
Eigen::VectorXd build_global_input(const std::vector<Obs>& truth,
                                   const FaultIndicators& indicators);

Obs scale_observation(const Obs& o, const ObsScale& scale);

}  // namespace oft::obs
