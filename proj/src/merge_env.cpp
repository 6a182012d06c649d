#include "oft/merge_env.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "oft/errors.hpp"

namespace oft::sim {

void RoadGeometry::validate() const {
    if (!(0.0 < merge_point && merge_point < goal_point && goal_point <= main_length))
        throw ConfigError("road geometry requires 0 < merge_point < goal_point <= main_length");
    if (!(ramp_length > 0.0)) throw ConfigError("ramp_length must be positive");
}

void EnvConfig::validate() const {
    road.validate();
    if (n_vehicles < 2) throw ConfigError("n_vehicles must be >= 2");
    if (!(dt > 0.0)) throw ConfigError("dt must be positive");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (!(min_headway > vehicle_length)) throw ConfigError("min_headway must exceed vehicle length");
    if (init_vel_hi < init_vel_lo || init_vel_lo < 0.0) throw ConfigError("bad initial velocity range");
    if (!(v_max >= init_vel_hi)) throw ConfigError("v_max below initial velocity range");
    if (!(accel_min < 0.0)) throw ConfigError("accel_min must be negative");
    if (accel_max_choices.empty()) throw ConfigError("accel_max_choices must be non-empty");
    for (double a : accel_max_choices)
        if (!(a > 0.0)) throw ConfigError("accel_max choices must be positive");
    if (ramp_spawn_max > road.merge_point || ramp_spawn_max < road.ramp_start())
        throw ConfigError("ramp_spawn_max must lie on the ramp");
    if (main_spawn_max <= 0.0 || main_spawn_max > road.main_length)
        throw ConfigError("main_spawn_max must lie on the main road");
}

int effective_lane(const VehicleState& s, const RoadGeometry& road) {
    if (s.lane == Lane::main || s.position >= road.merge_point) return 0;
    return 1;
}

std::array<int, kNeighborSlots> neighbors(const std::vector<VehicleState>& states, int i,
                                          const RoadGeometry& road) {
    if (i < 0 || i >= static_cast<int>(states.size()) || !states[static_cast<std::size_t>(i)].exists)
        throw ContractError("neighbors: vehicle does not exist");
    const VehicleState& ego = states[static_cast<std::size_t>(i)];
    const int ego_lane = effective_lane(ego, road);

    std::array<int, kNeighborSlots> out{-1, -1, -1, -1};
    std::array<double, kNeighborSlots> best;
    best.fill(std::numeric_limits<double>::infinity());

    for (int j = 0; j < static_cast<int>(states.size()); ++j) {
        if (j == i) continue;
        const VehicleState& other = states[static_cast<std::size_t>(j)];
        if (!other.exists) continue;
        const bool same_lane = effective_lane(other, road) == ego_lane;
        const bool ahead = other.position > ego.position ||
                           (other.position == ego.position && j > i);
        const int slot = (same_lane ? 0 : 2) + (ahead ? 0 : 1);
        const double dist = std::abs(other.position - ego.position);
        if (dist < best[static_cast<std::size_t>(slot)] ||
            (dist == best[static_cast<std::size_t>(slot)] && j < out[static_cast<std::size_t>(slot)])) {
            best[static_cast<std::size_t>(slot)] = dist;
            out[static_cast<std::size_t>(slot)] = j;
        }
    }
    return out;
}

bool collision_check(const std::vector<VehicleState>& states,
                     const std::vector<VehicleParams>& params, const RoadGeometry& road) {
    const int n = static_cast<int>(states.size());
    for (int i = 0; i < n; ++i) {
        if (!states[static_cast<std::size_t>(i)].exists) continue;
        for (int j = i + 1; j < n; ++j) {
            if (!states[static_cast<std::size_t>(j)].exists) continue;
            if (effective_lane(states[static_cast<std::size_t>(i)], road) !=
                effective_lane(states[static_cast<std::size_t>(j)], road))
                continue;
            const double gap = std::abs(states[static_cast<std::size_t>(i)].position -
                                        states[static_cast<std::size_t>(j)].position);
            const double reach = 0.5 * (params[static_cast<std::size_t>(i)].length +
                                        params[static_cast<std::size_t>(j)].length);
            if (gap < reach) return true;
        }
    }
    return false;
}

bool completion_check(const std::vector<VehicleState>& states, const RoadGeometry& road) {
    bool any = false;
    for (const VehicleState& s : states) {
        if (!s.exists) continue;
        any = true;
        if (s.position < road.goal_point) return false;
    }
    if (!any) throw ContractError("completion_check: no existing vehicles");
    return true;
}

std::vector<double> compute_reward(const EnvConfig& cfg, const std::vector<VehicleState>& states,
                                   const StepEvents& events) {
    std::vector<double> rewards(states.size(), 0.0);
    const double goal_bonus =
        events.completed ? cfg.c_goal * std::pow(cfg.goal_discount, events.t) : 0.0;
    for (std::size_t i = 0; i < states.size(); ++i) {
        double r_vel = cfg.c_vel * (1.0 - std::abs(states[i].velocity - cfg.v_target) / cfg.v_target);
        r_vel = std::clamp(r_vel, 0.0, cfg.c_vel);
        double r = -1.0 + goal_bonus + r_vel;
        if (events.collided) r -= cfg.c_col;
        rewards[i] = r;
    }
    return rewards;
}

StepOutcome step(const EnvConfig& cfg, const std::vector<VehicleState>& states,
                 const std::vector<VehicleParams>& params, const std::vector<double>& actions,
                 int t) {
    if (actions.size() != states.size() || params.size() != states.size())
        throw ContractError("step: action count does not match fleet size");

    StepOutcome out;
    out.next_states = states;
    for (std::size_t i = 0; i < states.size(); ++i) {
        if (!states[i].exists) continue;
        const double a = std::clamp(actions[i], params[i].accel_min, params[i].accel_max);
        VehicleState& s = out.next_states[i];
        s.velocity = std::clamp(states[i].velocity + a * cfg.dt, 0.0, cfg.v_max);
        s.position = states[i].position + s.velocity * cfg.dt;
        if (s.lane == Lane::ramp && s.position >= cfg.road.merge_point) s.lane = Lane::main;
    }

    out.collided = collision_check(out.next_states, params, cfg.road);
    out.completed = completion_check(out.next_states, cfg.road);
    out.done = out.collided || out.completed || (t + 1 >= cfg.max_steps);
    out.rewards = compute_reward(cfg, out.next_states, {out.collided, out.completed, t});
    return out;
}

namespace {

// Sorted uniform offsets stretched to guarantee pairwise gaps >= headway.
std::vector<double> place_lane(Rng& rng, int n, double lo, double hi, double headway) {
    if (n == 0) return {};
    const double slack = (hi - lo) - headway * (n - 1);
    if (slack < 0.0) throw ConfigError("spawn window too short for the requested headway");
    std::vector<double> u(static_cast<std::size_t>(n));
    for (double& x : u) x = rng.uniform(0.0, slack);
    std::sort(u.begin(), u.end());
    for (int k = 0; k < n; ++k) u[static_cast<std::size_t>(k)] += lo + headway * k;
    return u;
}

}  // namespace

MergeEnv::MergeEnv(EnvConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

const std::vector<VehicleState>& MergeEnv::reset(std::uint64_t seed) {
    Rng rng(seed);
    const int n = cfg_.n_vehicles;
    const int n_main = (n + 1) / 2;
    const int n_ramp = n - n_main;

    params_.assign(static_cast<std::size_t>(n), VehicleParams{});
    for (auto& p : params_) {
        p.accel_min = cfg_.accel_min;
        p.accel_max = cfg_.accel_max_choices[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(cfg_.accel_max_choices.size()) - 1))];
        p.length = cfg_.vehicle_length;
    }

    const auto main_pos = place_lane(rng, n_main, 0.0, cfg_.main_spawn_max, cfg_.min_headway);
    const auto ramp_pos =
        place_lane(rng, n_ramp, cfg_.road.ramp_start(), cfg_.ramp_spawn_max, cfg_.min_headway);

    states_.assign(static_cast<std::size_t>(n), VehicleState{});
    for (int k = 0; k < n_main; ++k) {
        states_[static_cast<std::size_t>(k)].lane = Lane::main;
        states_[static_cast<std::size_t>(k)].position = main_pos[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < n_ramp; ++k) {
        states_[static_cast<std::size_t>(n_main + k)].lane = Lane::ramp;
        states_[static_cast<std::size_t>(n_main + k)].position = ramp_pos[static_cast<std::size_t>(k)];
    }
    for (auto& s : states_) {
        s.exists = true;
        s.velocity = rng.uniform(cfg_.init_vel_lo, cfg_.init_vel_hi);
    }
    step_count_ = 0;
    return states_;
}

StepOutcome MergeEnv::step(const std::vector<double>& actions) {
    StepOutcome out = sim::step(cfg_, states_, params_, actions, step_count_);
    states_ = out.next_states;
    ++step_count_;
    return out;
}

}  // namespace oft::sim
