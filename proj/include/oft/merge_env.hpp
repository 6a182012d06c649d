#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "oft/rng.hpp"

namespace oft::sim {

// Neighbor slots per vehicle: front, rear, side front, side rear.
inline constexpr int kNeighborSlots = 4;

enum class Lane : int { main = 0, ramp = 1 };

struct RoadGeometry {
    double main_length = 350.0;
    double ramp_length = 150.0;
    double merge_point = 220.0;  // ramp joins the main lane here
    double goal_point = 280.0;   // fleet completion line

    double ramp_start() const { return merge_point - ramp_length; }
    void validate() const;
};

// Positions live on the shared longitudinal axis; the ramp occupies
// [merge_point - ramp_length, merge_point) and becomes the main lane past
// the merge point.
struct VehicleState {
    bool exists = true;
    double position = 0.0;
    double velocity = 0.0;
    Lane lane = Lane::main;
};

struct VehicleParams {
    double accel_min = -5.0;
    double accel_max = 3.0;
    double length = 5.0;
};

struct EnvConfig {
    int n_vehicles = 4;
    double dt = 1.0;
    int max_steps = 30;
    double init_vel_lo = 15.0;
    double init_vel_hi = 25.0;
    double min_headway = 15.0;
    double v_max = 35.0;
    double vehicle_length = 5.0;
    double accel_min = -5.0;
    std::vector<double> accel_max_choices{2.0, 3.0, 4.0};
    // Spawn windows on the shared axis. Ramp spawns start at road.ramp_start().
    double main_spawn_max = 130.0;
    double ramp_spawn_max = 170.0;
    // Reward constants.
    double v_target = 25.0;
    double c_vel = 0.5;
    double c_col = 10.0;
    double c_goal = 5.0;
    double goal_discount = 0.95;
    RoadGeometry road;

    void validate() const;
};

struct StepOutcome {
    std::vector<VehicleState> next_states;
    std::vector<double> rewards;
    bool collided = false;
    bool completed = false;
    bool done = false;
};

struct StepEvents {
    bool collided = false;
    bool completed = false;
    int t = 0;  // 0-based index of the step that produced these events
};

// Effective lane id: the ramp counts as the main lane past the merge point.
int effective_lane(const VehicleState& s, const RoadGeometry& road);

// Nearest neighbors of vehicle i, slot-coded as
// [same-lane ahead, same-lane behind, other-lane ahead, other-lane behind].
// Absent slots hold -1. Distance ties break toward the lower vehicle index.
std::array<int, kNeighborSlots> neighbors(const std::vector<VehicleState>& states, int i,
                                          const RoadGeometry& road);

bool collision_check(const std::vector<VehicleState>& states,
                     const std::vector<VehicleParams>& params, const RoadGeometry& road);

bool completion_check(const std::vector<VehicleState>& states, const RoadGeometry& road);

std::vector<double> compute_reward(const EnvConfig& cfg, const std::vector<VehicleState>& states,
                                   const StepEvents& events);

// Pure transition: semi-implicit Euler with per-vehicle acceleration clipping.
StepOutcome step(const EnvConfig& cfg, const std::vector<VehicleState>& states,
                 const std::vector<VehicleParams>& params, const std::vector<double>& actions,
                 int t);

// Stateful wrapper owning the fleet, per-episode vehicle parameters and the
// step counter.
class MergeEnv {
  public:
    explicit MergeEnv(EnvConfig cfg);

    // Places the fleet with same-lane gaps >= min_headway and uniform initial
    // velocities. Deterministic given the seed.
    const std::vector<VehicleState>& reset(std::uint64_t seed);

    StepOutcome step(const std::vector<double>& actions);

    const EnvConfig& config() const { return cfg_; }
    const std::vector<VehicleState>& states() const { return states_; }
    const std::vector<VehicleParams>& vehicle_params() const { return params_; }
    int step_count() const { return step_count_; }

  private:
    EnvConfig cfg_;
    std::vector<VehicleState> states_;
    std::vector<VehicleParams> params_;
    int step_count_ = 0;
};

}  // namespace oft::sim
