#include "oft/observation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "oft/errors.hpp"

namespace oft::obs {

Obs build_observation(const std::vector<sim::VehicleState>& states, int i,
                      const std::array<int, sim::kNeighborSlots>& nbrs,
                      const sim::RoadGeometry& road) {
    const auto& ego = states.at(static_cast<std::size_t>(i));
    if (!ego.exists) throw ContractError("build_observation: ego vehicle does not exist");

    Obs o = Obs::Zero(kObsDim);
    o[0] = 1.0;
    o[1] = ego.position;
    o[2] = ego.velocity;
    o[3] = static_cast<double>(sim::effective_lane(ego, road));
    for (int slot = 0; slot < sim::kNeighborSlots; ++slot) {
        const int j = nbrs[static_cast<std::size_t>(slot)];
        if (j < 0) continue;
        const auto& nb = states.at(static_cast<std::size_t>(j));
        const int base = (slot + 1) * kStateDim;
        o[base + 0] = 1.0;
        o[base + 1] = nb.position - ego.position;
        o[base + 2] = nb.velocity - ego.velocity;
        o[base + 3] = static_cast<double>(sim::effective_lane(nb, road) -
                                          sim::effective_lane(ego, road));
    }
    return o;
}

std::vector<Obs> build_all_observations(const std::vector<sim::VehicleState>& states,
                                        const sim::RoadGeometry& road) {
    std::vector<Obs> out;
    out.reserve(states.size());
    for (int i = 0; i < static_cast<int>(states.size()); ++i)
        out.push_back(build_observation(states, i, sim::neighbors(states, i, road), road));
    return out;
}

void apply_fault(Eigen::Ref<Eigen::VectorXd> block, const Eigen::Vector2d& b,
                 const Eigen::Vector2d& epsilon) {
    for (int d = 0; d < kPerturbDim; ++d) {
        const double base = block[1 + d];
        double perturbed = base + std::clamp(b[d], -epsilon[d], epsilon[d]);
        // rounding in base + delta can land a hair outside the ball; walk the
        // result back until the representable difference obeys the bound
        while (perturbed - base > epsilon[d])
            perturbed = std::nextafter(perturbed, -std::numeric_limits<double>::infinity());
        while (perturbed - base < -epsilon[d])
            perturbed = std::nextafter(perturbed, std::numeric_limits<double>::infinity());
        block[1 + d] = perturbed;
    }
}

std::vector<Obs> perturb_observations(const std::vector<Obs>& truth, const FaultConfig& fault,
                                      bool active, const Eigen::Vector2d& b,
                                      const PerturbationBudget& budget) {
    std::vector<Obs> out = truth;
    if (!active) return out;
    Obs& target = out.at(static_cast<std::size_t>(fault.recipient));
    const int base = (fault.target_slot + 1) * kStateDim;
    if (target[base] == 0.0)
        throw ContractError("perturb_observations: fault target slot is absent");
    apply_fault(target.segment(base, kStateDim), b, budget.epsilon);
    return out;
}

FaultConfig sample_fault_config(Rng& rng, const std::vector<sim::VehicleState>& states,
                                const sim::RoadGeometry& road, const FaultSchedule& schedule,
                                int max_steps) {
    FaultConfig cfg;
    if (rng.uniform() >= schedule.fault_prob) return cfg;

    std::vector<int> candidates;
    std::vector<std::array<int, sim::kNeighborSlots>> nbrs(states.size());
    for (int i = 0; i < static_cast<int>(states.size()); ++i) {
        if (!states[static_cast<std::size_t>(i)].exists) continue;
        nbrs[static_cast<std::size_t>(i)] = sim::neighbors(states, i, road);
        for (int j : nbrs[static_cast<std::size_t>(i)])
            if (j >= 0) {
                candidates.push_back(i);
                break;
            }
    }
    if (candidates.empty()) return cfg;

    cfg.recipient = candidates[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(candidates.size()) - 1))];
    std::vector<int> slots;
    for (int slot = 0; slot < sim::kNeighborSlots; ++slot)
        if (nbrs[static_cast<std::size_t>(cfg.recipient)][static_cast<std::size_t>(slot)] >= 0)
            slots.push_back(slot);
    cfg.target_slot =
        slots[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(slots.size()) - 1))];

    const int on_hi = std::max(schedule.t_on_lo, max_steps / 2);
    cfg.t_on = static_cast<int>(rng.uniform_int(schedule.t_on_lo, on_hi));
    const int dur_hi = std::max(schedule.min_duration, max_steps - cfg.t_on);
    const int duration = static_cast<int>(rng.uniform_int(schedule.min_duration, dur_hi));
    cfg.t_off = cfg.t_on + duration;
    cfg.enabled = true;
    return cfg;
}

FaultIndicators encode_indicators(const FaultConfig& fault, int n_vehicles, int n_slots) {
    if (!fault.enabled || fault.recipient < 0 || fault.recipient >= n_vehicles ||
        fault.target_slot < 0 || fault.target_slot >= n_slots)
        throw ContractError("encode_indicators: fault is not configured");
    FaultIndicators ind;
    ind.recipient_onehot = Eigen::VectorXd::Zero(n_vehicles);
    ind.target_onehot = Eigen::VectorXd::Zero(n_slots);
    ind.recipient_onehot[fault.recipient] = 1.0;
    ind.target_onehot[fault.target_slot] = 1.0;
    return ind;
}

Eigen::VectorXd build_global_input(const std::vector<Obs>& truth,
                                   const FaultIndicators& indicators) {
    const auto n = static_cast<Eigen::Index>(truth.size());
    const Eigen::Index obs_dim = n > 0 ? truth.front().size() : 0;
    Eigen::VectorXd x(n * obs_dim + indicators.recipient_onehot.size() +
                      indicators.target_onehot.size());
    Eigen::Index at = 0;
    for (const Obs& o : truth) {
        x.segment(at, obs_dim) = o;
        at += obs_dim;
    }
    x.segment(at, indicators.recipient_onehot.size()) = indicators.recipient_onehot;
    at += indicators.recipient_onehot.size();
    x.segment(at, indicators.target_onehot.size()) = indicators.target_onehot;
    return x;
}

Obs scale_observation(const Obs& o, const ObsScale& scale) {
    Obs s = o;
    for (int block = 0; block < sim::kNeighborSlots + 1; ++block) {
        s[block * kStateDim + 1] *= scale.pos;
        s[block * kStateDim + 2] *= scale.vel;
    }
    return s;
}

}  // namespace oft::obs
