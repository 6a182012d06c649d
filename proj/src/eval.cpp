#include "oft/eval.hpp"

#include <cmath>
#include <limits>

#include "oft/csv.hpp"
#include "oft/errors.hpp"

namespace oft::eval {

using agents::Mode;
using nn::Mat;
using nn::Vec;

DetectionMetrics detection_metrics(const ConfusionMatrix& m) {
    if (m.total() <= 0) throw ContractError("detection_metrics: empty confusion matrix");
    DetectionMetrics out;
    out.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.total());
    if (m.tp + m.fp > 0) out.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
    if (m.tp + m.fn > 0) out.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    return out;
}

RecoveryStats recovery_stats(const std::vector<RecoverySample>& samples) {
    RecoveryStats s;
    s.count = static_cast<std::int64_t>(samples.size());
    if (samples.empty()) {
        const double nan = std::numeric_limits<double>::quiet_NaN();
        s.recovery_mae_pos = s.recovery_mse_pos = s.recovery_mae_vel = s.recovery_mse_vel = nan;
        return s;
    }
    for (const auto& sample : samples) {
        s.orig_mae_pos += std::abs(sample.err_observed[0]);
        s.orig_mse_pos += sample.err_observed[0] * sample.err_observed[0];
        s.orig_mae_vel += std::abs(sample.err_observed[1]);
        s.orig_mse_vel += sample.err_observed[1] * sample.err_observed[1];
        s.pred_mae_pos += std::abs(sample.err_predicted[0]);
        s.pred_mse_pos += sample.err_predicted[0] * sample.err_predicted[0];
        s.pred_mae_vel += std::abs(sample.err_predicted[1]);
        s.pred_mse_vel += sample.err_predicted[1] * sample.err_predicted[1];
    }
    const double inv = 1.0 / static_cast<double>(s.count);
    for (double* v : {&s.orig_mae_pos, &s.orig_mse_pos, &s.orig_mae_vel, &s.orig_mse_vel,
                      &s.pred_mae_pos, &s.pred_mse_pos, &s.pred_mae_vel, &s.pred_mse_vel})
        *v *= inv;
    auto pct = [](double orig, double pred) {
        return orig > 0.0 ? 100.0 * (1.0 - pred / orig) : std::numeric_limits<double>::quiet_NaN();
    };
    s.recovery_mae_pos = pct(s.orig_mae_pos, s.pred_mae_pos);
    s.recovery_mse_pos = pct(s.orig_mse_pos, s.pred_mse_pos);
    s.recovery_mae_vel = pct(s.orig_mae_vel, s.pred_mae_vel);
    s.recovery_mse_vel = pct(s.orig_mse_vel, s.pred_mse_vel);
    return s;
}

EvalResult run_evaluation(const RunConfig& cfg, const agents::VehicleAgents& agents,
                          const agents::FaultInjector* injector, const EvalSettings& settings) {
    if (settings.episodes < 1) throw ContractError("run_evaluation: episodes must be >= 1");
    if (settings.source == FaultSource::adversarial && injector == nullptr)
        throw ContractError("run_evaluation: adversarial source needs an injector");

    const int n = cfg.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const Mode mode = agents.mode;
    const bool has_temporal = agents.temporal.has_value();
    const int hidden = has_temporal ? agents.layout.gru_hidden : 0;
    const obs::PerturbationBudget budget{cfg.epsilon};

    sim::MergeEnv env(cfg.env);
    EvalResult result;
    double reward_sum = 0.0;
    std::int64_t collided = 0;
    std::int64_t completed_steps = 0, completed_episodes = 0;

    for (int e = 0; e < settings.episodes; ++e) {
        Rng fault_rng(Rng::mix(settings.seed, 0xFAAA, static_cast<std::uint64_t>(e)));
        auto states = env.reset(Rng::mix(settings.seed, 0xEEAA, static_cast<std::uint64_t>(e)));

        obs::FaultConfig fault;
        if (settings.source != FaultSource::none)
            fault = obs::sample_fault_config(fault_rng, states, cfg.env.road, cfg.schedule,
                                             cfg.env.max_steps);

        Mat h = Mat::Zero(std::max(1, hidden), n);
        EpisodeMetricsRow row;
        row.episode = e;
        double ep_return = 0.0;

        for (int t = 0; t < cfg.env.max_steps; ++t) {
            const auto truth = obs::build_all_observations(states, cfg.env.road);
            std::vector<obs::Obs> truth_scaled(truth.size());
            for (std::size_t i = 0; i < truth.size(); ++i)
                truth_scaled[i] = obs::scale_observation(truth[i], cfg.scale);

            const bool slot_present =
                fault.enabled && truth[static_cast<std::size_t>(std::max(0, fault.recipient))]
                                      [(fault.target_slot + 1) * obs::kStateDim] == 1.0;
            const bool active = fault.in_window(t) && slot_present;

            Eigen::Vector2d b = Eigen::Vector2d::Zero();
            if (active) {
                if (settings.source == FaultSource::adversarial) {
                    const auto ind = obs::encode_indicators(fault, n, sim::kNeighborSlots);
                    const Vec x = obs::build_global_input(truth_scaled, ind);
                    b = agents::fault_act(*injector, x, 0.0, nullptr);
                } else {
                    b[0] = fault_rng.uniform(-cfg.epsilon[0], cfg.epsilon[0]);
                    b[1] = fault_rng.uniform(-cfg.epsilon[1], cfg.epsilon[1]);
                }
            }

            const auto perturbed = obs::perturb_observations(truth, fault, active, b, budget);
            std::vector<obs::Obs> perturbed_scaled(perturbed.size());
            for (std::size_t i = 0; i < perturbed.size(); ++i)
                perturbed_scaled[i] = obs::scale_observation(perturbed[i], cfg.scale);

            Mat prob, recon, h_next = h;
            if (has_temporal) {
                Mat inputs(obs_dim, n);
                for (int i = 0; i < n; ++i)
                    inputs.col(i) = perturbed_scaled[static_cast<std::size_t>(i)];
                const auto out = agents::temporal_forward(*agents.temporal, inputs, h);
                prob = out.prob;
                recon = out.recon;
                h_next = out.h_next;

                for (int i = 0; i < n; ++i) {
                    for (int slot = 0; slot < sim::kNeighborSlots; ++slot) {
                        if (truth[static_cast<std::size_t>(i)][(slot + 1) * obs::kStateDim] != 1.0)
                            continue;
                        const bool judged_fault = prob(slot, i) >= settings.threshold;
                        const bool is_fault = active && i == fault.recipient &&
                                              slot == fault.target_slot;
                        if (is_fault && judged_fault) ++row.confusion.tp;
                        if (is_fault && !judged_fault) ++row.confusion.fn;
                        if (!is_fault && judged_fault) ++row.confusion.fp;
                        if (!is_fault && !judged_fault) ++row.confusion.tn;
                    }
                }
                if (active) {
                    const int base = (fault.target_slot + 1) * obs::kStateDim + 1;
                    const auto& o_true = truth[static_cast<std::size_t>(fault.recipient)];
                    const auto& o_obs = perturbed[static_cast<std::size_t>(fault.recipient)];
                    Eigen::Vector2d pred;
                    if (agents.layout.recon_dim == obs::kPerturbDim) {
                        pred = recon.col(fault.recipient);
                    } else {
                        pred = recon.col(fault.recipient)
                                   .segment(fault.target_slot * obs::kPerturbDim, obs::kPerturbDim);
                    }
                    pred[0] /= cfg.scale.pos;
                    pred[1] /= cfg.scale.vel;
                    RecoverySample sample;
                    sample.err_observed = {o_obs[base] - o_true[base],
                                           o_obs[base + 1] - o_true[base + 1]};
                    sample.err_predicted = {pred[0] - o_true[base], pred[1] - o_true[base + 1]};
                    result.recovery.push_back(sample);
                }
            }

            std::vector<double> actions(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) {
                const Vec input = agents::policy_input(
                    mode, perturbed_scaled[static_cast<std::size_t>(i)],
                    has_temporal ? Vec(prob.col(i)) : Vec(),
                    has_temporal ? Vec(recon.col(i)) : Vec());
                const auto& p = env.vehicle_params()[static_cast<std::size_t>(i)];
                actions[static_cast<std::size_t>(i)] =
                    agents::vehicle_act(agents, input, p.accel_min, p.accel_max, 0.0, nullptr);
            }

            if (settings.per_step_trace) {
                TraceRow tr;
                tr.episode = e;
                tr.t = t;
                for (int i = 0; i < n; ++i) {
                    const auto& s = states[static_cast<std::size_t>(i)];
                    tr.position.push_back(s.position);
                    tr.velocity.push_back(s.velocity);
                    tr.lane.push_back(sim::effective_lane(s, cfg.env.road));
                    tr.action.push_back(actions[static_cast<std::size_t>(i)]);
                }
                tr.fault_active = active;
                tr.recipient = fault.enabled ? fault.recipient : -1;
                tr.target_slot = fault.enabled ? fault.target_slot : -1;
                tr.b = b;
                if (has_temporal && fault.enabled)
                    for (int slot = 0; slot < sim::kNeighborSlots; ++slot)
                        tr.fault_prob.push_back(prob(slot, fault.recipient));
                result.trace.push_back(std::move(tr));
            }

            const auto outcome = env.step(actions);
            for (double r : outcome.rewards) ep_return += r;
            if (active) ++row.fault_active_steps;
            row.steps = t + 1;
            states = outcome.next_states;
            h = h_next;
            if (outcome.done) {
                row.collided = outcome.collided;
                break;
            }
        }

        row.mean_return = ep_return / n;
        reward_sum += row.mean_return;
        if (row.collided) {
            ++collided;
        } else {
            completed_steps += row.steps;
            ++completed_episodes;
        }
        result.confusion.tp += row.confusion.tp;
        result.confusion.fn += row.confusion.fn;
        result.confusion.fp += row.confusion.fp;
        result.confusion.tn += row.confusion.tn;
        result.rows.push_back(std::move(row));
    }

    result.mean_reward = reward_sum / settings.episodes;
    result.collision_rate = static_cast<double>(collided) / settings.episodes;
    if (completed_episodes > 0)
        result.mean_timesteps = static_cast<double>(completed_steps) / completed_episodes;
    return result;
}

agents::FaultInjector retrain_injector(const RunConfig& cfg, const agents::VehicleAgents& agents,
                                       int episodes, std::uint64_t seed) {
    RunConfig rc = cfg;
    rc.fault = "adversarial";
    rc.train_vehicle = false;
    rc.train_injector = true;
    rc.seed = seed;
    rc.episodes = episodes;
    train::Trainer trainer(rc, agents, std::nullopt);
    trainer.run(episodes);
    return *trainer.injector();
}

std::vector<GenCell> generalization_matrix(const RunConfig& cfg,
                                           const std::vector<PolicyUnderHandle>& policies,
                                           const std::vector<GenCondition>& conditions,
                                           int episodes, std::uint64_t seed) {
    if (policies.empty() || conditions.empty())
        throw ContractError("generalization_matrix: need at least one policy and one condition");
    std::vector<GenCell> cells;
    for (const auto& policy : policies) {
        for (const auto& condition : conditions) {
            EvalSettings settings;
            settings.episodes = episodes;
            settings.seed = seed;
            settings.source = condition.source;
            std::optional<agents::FaultInjector> retrained;
            const agents::FaultInjector* injector = condition.injector;
            if (condition.retrain) {
                retrained = retrain_injector(cfg, *policy.agents, condition.retrain_episodes,
                                             Rng::mix(seed, 0x7E7A));
                injector = &*retrained;
            } else if (condition.source == FaultSource::adversarial && injector == nullptr) {
                injector = policy.own_injector;
            }
            const EvalResult r = run_evaluation(cfg, *policy.agents, injector, settings);
            cells.push_back(
                {policy.name, condition.name, r.mean_reward, r.collision_rate, r.mean_timesteps});
        }
    }
    return cells;
}

std::string aggregate_csv_header() {
    return "method,condition,episodes,mean_reward,collision_rate,mean_timesteps";
}

std::string aggregate_csv_row(const std::string& method, const std::string& condition,
                              int episodes, const EvalResult& result) {
    std::string s = method + "," + condition + "," + std::to_string(episodes);
    s += "," + fmt_g17(result.mean_reward);
    s += "," + fmt_g17(result.collision_rate);
    s += "," + (result.mean_timesteps ? fmt_g17(*result.mean_timesteps) : std::string());
    return s;
}

std::string episodes_csv(const EvalResult& result) {
    std::string s = "episode,mean_return,collided,steps,fault_active_steps,tp,fn,fp,tn\n";
    for (const auto& row : result.rows) {
        s += std::to_string(row.episode) + "," + fmt_g17(row.mean_return) + ",";
        s += row.collided ? "1" : "0";
        s += "," + std::to_string(row.steps) + "," + std::to_string(row.fault_active_steps);
        s += "," + std::to_string(row.confusion.tp) + "," + std::to_string(row.confusion.fn);
        s += "," + std::to_string(row.confusion.fp) + "," + std::to_string(row.confusion.tn);
        s += "\n";
    }
    return s;
}

std::string confusion_csv(const ConfusionMatrix& m) {
    std::string s = "actual,predicted_fault,predicted_normal\n";
    s += "fault," + std::to_string(m.tp) + "," + std::to_string(m.fn) + "\n";
    s += "normal," + std::to_string(m.fp) + "," + std::to_string(m.tn) + "\n";
    return s;
}

std::string detection_csv(const ConfusionMatrix& m) {
    const DetectionMetrics d = detection_metrics(m);
    auto cell = [](const std::optional<double>& v) { return v ? fmt_g17(*v) : std::string(); };
    std::string s = "total,tp,fn,fp,tn,accuracy,precision,recall\n";
    s += std::to_string(m.total()) + "," + std::to_string(m.tp) + "," + std::to_string(m.fn);
    s += "," + std::to_string(m.fp) + "," + std::to_string(m.tn);
    s += "," + cell(d.accuracy) + "," + cell(d.precision) + "," + cell(d.recall) + "\n";
    return s;
}

std::string recovery_csv(const RecoveryStats& stats) {
    std::string s = "row,pos_mae,pos_mse,vel_mae,vel_mse\n";
    s += "original," + fmt_g17(stats.orig_mae_pos) + "," + fmt_g17(stats.orig_mse_pos) + "," +
         fmt_g17(stats.orig_mae_vel) + "," + fmt_g17(stats.orig_mse_vel) + "\n";
    s += "prediction," + fmt_g17(stats.pred_mae_pos) + "," + fmt_g17(stats.pred_mse_pos) + "," +
         fmt_g17(stats.pred_mae_vel) + "," + fmt_g17(stats.pred_mse_vel) + "\n";
    s += "recovery_pct," + fmt_cell(stats.recovery_mae_pos) + "," + fmt_cell(stats.recovery_mse_pos) +
         "," + fmt_cell(stats.recovery_mae_vel) + "," + fmt_cell(stats.recovery_mse_vel) + "\n";
    return s;
}

std::string generalization_csv(const std::vector<GenCell>& cells) {
    std::string s = "method,condition,mean_reward,collision_rate,mean_timesteps\n";
    for (const auto& c : cells) {
        s += c.policy + "," + c.condition + "," + fmt_g17(c.mean_reward) + "," +
             fmt_g17(c.collision_rate) + ",";
        s += c.mean_timesteps ? fmt_g17(*c.mean_timesteps) : std::string();
        s += "\n";
    }
    return s;
}

std::string trace_csv(const std::vector<TraceRow>& trace, int n_vehicles) {
    std::string s = "episode,t";
    for (int i = 0; i < n_vehicles; ++i) {
        const std::string k = std::to_string(i);
        s += ",pos_" + k + ",vel_" + k + ",lane_" + k + ",action_" + k;
    }
    s += ",fault_active,recipient,target_slot,b_pos,b_vel";
    for (int j = 0; j < sim::kNeighborSlots; ++j) s += ",prob_" + std::to_string(j);
    s += "\n";
    for (const auto& row : trace) {
        s += std::to_string(row.episode) + "," + std::to_string(row.t);
        for (int i = 0; i < n_vehicles; ++i) {
            s += "," + fmt_g17(row.position[static_cast<std::size_t>(i)]);
            s += "," + fmt_g17(row.velocity[static_cast<std::size_t>(i)]);
            s += "," + fmt_g17(row.lane[static_cast<std::size_t>(i)]);
            s += "," + fmt_g17(row.action[static_cast<std::size_t>(i)]);
        }
        s += row.fault_active ? ",1" : ",0";
        s += "," + std::to_string(row.recipient) + "," + std::to_string(row.target_slot);
        s += "," + fmt_g17(row.b[0]) + "," + fmt_g17(row.b[1]);
        for (int j = 0; j < sim::kNeighborSlots; ++j)
            s += "," + (j < static_cast<int>(row.fault_prob.size())
                            ? fmt_g17(row.fault_prob[static_cast<std::size_t>(j)])
                            : std::string());
        s += "\n";
    }
    return s;
}

}  // namespace oft::eval
