#include "oft/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "oft/csv.hpp"
#include "oft/errors.hpp"

namespace oft::train {

using agents::Mode;

double fault_reward(const std::vector<double>& rewards) {
    double sum = 0.0;
    for (double r : rewards) sum += r;
    return -sum;
}

double temporal_loss(const agents::TemporalNet& net, const SeqBatch& batch,
                     agents::TemporalGrads* grads) {
    const int W = batch.window;
    const int C = batch.cols();
    if (C == 0 || W == 0) return 0.0;
    const double scale = 1.0 / (static_cast<double>(C) * W);

    std::vector<agents::TemporalCache> caches(static_cast<std::size_t>(W));
    Mat h = batch.h0;
    double loss = 0.0;
    for (int t = 0; t < W; ++t) {
        const auto out = agents::temporal_forward(net, batch.obs_hat[static_cast<std::size_t>(t)], h,
                                                  &caches[static_cast<std::size_t>(t)]);
        loss += scale * ((out.prob - batch.prob_target[static_cast<std::size_t>(t)]).squaredNorm() +
                         (out.recon - batch.recon_target[static_cast<std::size_t>(t)]).squaredNorm());
        h = out.h_next;
    }
    if (grads) {
        std::vector<nn::GruCache> gru_caches;
        std::vector<Mat> h_grads;
        gru_caches.reserve(static_cast<std::size_t>(W));
        h_grads.reserve(static_cast<std::size_t>(W));
        for (int t = 0; t < W; ++t) {
            const auto& cache = caches[static_cast<std::size_t>(t)];
            const Mat dprob =
                2.0 * scale * (cache.prob - batch.prob_target[static_cast<std::size_t>(t)]);
            const Mat drecon =
                2.0 * scale * (cache.recon - batch.recon_target[static_cast<std::size_t>(t)]);
            h_grads.push_back(agents::temporal_heads_backward(net, cache, dprob, drecon, *grads));
            gru_caches.push_back(cache.gru);
        }
        nn::gru_backward(net.gru, gru_caches, h_grads, grads->gru);
    }
    return loss;
}

double td_loss(const nn::Mlp& critic, const Mat& inputs, const Eigen::RowVectorXd& targets,
               nn::MlpGrads* grads) {
    const auto k = static_cast<double>(inputs.cols());
    nn::MlpCache cache;
    const Mat q = nn::mlp_forward(critic, inputs, grads ? &cache : nullptr);
    const Eigen::RowVectorXd diff = q.row(0) - targets;
    const double loss = diff.squaredNorm() / k;
    if (grads) {
        Mat dy = (2.0 / k) * diff;
        nn::mlp_backward(critic, cache, dy, *grads);
    }
    return loss;
}

double actor_objective(const nn::Mlp& policy, const std::vector<nn::Mlp>& critics,
                       const ActorBatch& batch, nn::MlpGrads* grads) {
    const auto n = static_cast<int>(batch.policy_in.size());
    const auto k = static_cast<int>(batch.actions.cols());
    const double scale = 1.0 / (static_cast<double>(n) * k);
    const auto obs_rows = batch.critic_obs.rows();
    double objective = 0.0;
    for (int i = 0; i < n; ++i) {
        nn::MlpCache pol_cache;
        const Mat u = nn::mlp_forward(policy, batch.policy_in[static_cast<std::size_t>(i)],
                                      grads ? &pol_cache : nullptr);
        Mat actions = batch.actions;
        actions.row(i) = batch.centers.row(i) + batch.halves.row(i).cwiseProduct(u.row(0));

        Mat critic_in(obs_rows + n, k);
        critic_in << batch.critic_obs, actions;
        nn::MlpCache critic_cache;
        const Mat q = nn::mlp_forward(critics[static_cast<std::size_t>(i)], critic_in,
                                      grads ? &critic_cache : nullptr);
        objective += scale * q.sum();

        if (grads) {
            nn::MlpGrads scratch = nn::zero_grads(critics[static_cast<std::size_t>(i)]);
            const Mat dq = Mat::Constant(1, k, scale);
            const Mat dcritic_in =
                nn::mlp_backward(critics[static_cast<std::size_t>(i)], critic_cache, dq, scratch);
            const Mat du = dcritic_in.row(obs_rows + i).cwiseProduct(batch.halves.row(i));
            nn::mlp_backward(policy, pol_cache, du, *grads);
        }
    }
    return objective;
}

double fault_actor_objective(const nn::Mlp& actor, const nn::Mlp& critic, const Mat& x,
                             const Eigen::Vector2d& epsilon, nn::MlpGrads* grads) {
    const auto k = static_cast<int>(x.cols());
    const double scale = 1.0 / k;
    nn::MlpCache actor_cache;
    const Mat u = nn::mlp_forward(actor, x, grads ? &actor_cache : nullptr);
    const Mat b = epsilon.asDiagonal() * u;
    Mat critic_in(x.rows() + b.rows(), k);
    critic_in << x, b;
    nn::MlpCache critic_cache;
    const Mat q = nn::mlp_forward(critic, critic_in, grads ? &critic_cache : nullptr);
    const double objective = scale * q.sum();
    if (grads) {
        nn::MlpGrads scratch = nn::zero_grads(critic);
        const Mat dq = Mat::Constant(1, k, scale);
        const Mat dcritic_in = nn::mlp_backward(critic, critic_cache, dq, scratch);
        const Mat du = epsilon.asDiagonal() * dcritic_in.bottomRows(b.rows());
        nn::mlp_backward(actor, actor_cache, du, *grads);
    }
    return objective;
}

std::string episode_csv_header(int n_vehicles) {
    std::string h = "episode";
    for (int i = 0; i < n_vehicles; ++i) h += ",return_" + std::to_string(i);
    h += ",mean_return,collided,steps,fault_active_steps,loss_temporal,loss_critic,actor_grad,"
         "loss_fault_critic,fault_actor_grad,updates";
    return h;
}

std::string episode_csv_row(const EpisodeRow& row) {
    std::string s = std::to_string(row.episode);
    for (double r : row.returns) s += "," + fmt_g17(r);
    s += "," + fmt_g17(row.mean_return);
    s += row.collided ? ",1" : ",0";
    s += "," + std::to_string(row.steps);
    s += "," + std::to_string(row.fault_active_steps);
    s += "," + fmt_cell(row.loss_temporal);
    s += "," + fmt_cell(row.loss_critic);
    s += "," + fmt_cell(row.actor_grad);
    s += "," + fmt_cell(row.loss_fault_critic);
    s += "," + fmt_cell(row.fault_actor_grad);
    s += "," + std::to_string(row.updates);
    return s;
}

namespace {

constexpr std::uint64_t kInitTag = 0xA11;
constexpr std::uint64_t kUpdateTag = 0xB22;
constexpr std::uint64_t kEnvTag = 0xE21;
constexpr std::uint64_t kFaultTag = 0xFA17;
constexpr std::uint64_t kExploreTag = 0xE79;

double nan_value() { return std::numeric_limits<double>::quiet_NaN(); }

}  // namespace

Trainer::Trainer(const RunConfig& cfg)
    : cfg_(cfg),
      env_(cfg.env),
      buf_vehicle_(cfg.buffer_vehicle),
      buf_fault_(cfg.buffer_fault),
      update_rng_(Rng::mix(cfg.seed, kUpdateTag)) {
    cfg_.validate();
    Rng init_rng(Rng::mix(cfg_.seed, kInitTag));
    agents_ = agents::make_vehicle_agents(cfg_.parsed_mode(), cfg_.layout(), init_rng);
    if (cfg_.parsed_fault() == FaultSource::adversarial)
        injector_ = agents::make_fault_injector(cfg_.layout(), cfg_.epsilon, init_rng);
    init_optimizers();
}

Trainer::Trainer(const RunConfig& cfg, agents::VehicleAgents vehicle_agents,
                 std::optional<agents::FaultInjector> injector)
    : cfg_(cfg),
      env_(cfg.env),
      buf_vehicle_(cfg.buffer_vehicle),
      buf_fault_(cfg.buffer_fault),
      update_rng_(Rng::mix(cfg.seed, kUpdateTag)) {
    cfg_.validate();
    agents_ = std::move(vehicle_agents);
    injector_ = std::move(injector);
    if (cfg_.parsed_fault() == FaultSource::adversarial && !injector_) {
        Rng init_rng(Rng::mix(cfg_.seed, kInitTag));
        injector_ = agents::make_fault_injector(cfg_.layout(), cfg_.epsilon, init_rng);
    }
    if (agents_.mode != cfg_.parsed_mode())
        throw ContractError("trainer: adopted agents do not match the configured mode");
    init_optimizers();
}

void Trainer::init_optimizers() {
    opt_policy_ = nn::make_adam(nn::total_size(nn::param_refs(agents_.policy, "p")), cfg_.lr_actor);
    opt_critics_.clear();
    for (auto& critic : agents_.critics)
        opt_critics_.push_back(nn::make_adam(nn::total_size(nn::param_refs(critic, "c")),
                                             cfg_.lr_critic));
    if (agents_.temporal)
        opt_temporal_ = nn::make_adam(
            nn::total_size(agents::param_refs(*agents_.temporal, "g")), cfg_.lr_temporal);
    if (injector_) {
        opt_inj_actor_ = nn::make_adam(nn::total_size(nn::param_refs(injector_->actor, "a")),
                                       cfg_.lr_fault_actor);
        opt_inj_critic_ = nn::make_adam(nn::total_size(nn::param_refs(injector_->critic, "c")),
                                        cfg_.lr_fault_critic);
    }
}

std::vector<EpisodeRow> Trainer::run(int count, const std::function<void(const EpisodeRow&)>& on_row) {
    std::vector<EpisodeRow> rows;
    rows.reserve(static_cast<std::size_t>(count));
    for (int e = 0; e < count; ++e) {
        rows.push_back(run_episode());
        if (on_row) on_row(rows.back());
    }
    return rows;
}

EpisodeRow Trainer::run_episode() {
    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const Mode mode = cfg_.parsed_mode();
    const FaultSource source = cfg_.parsed_fault();
    const bool has_temporal = agents_.temporal.has_value();
    const int hidden = has_temporal ? cfg_.gru_hidden : 0;
    const obs::PerturbationBudget budget{cfg_.epsilon};

    Rng fault_rng(Rng::mix(cfg_.seed, kFaultTag, static_cast<std::uint64_t>(episode_)));
    Rng explore_rng(Rng::mix(cfg_.seed, kExploreTag, static_cast<std::uint64_t>(episode_)));

    auto states = env_.reset(Rng::mix(cfg_.seed, kEnvTag, static_cast<std::uint64_t>(episode_)));
    Vec centers(n), halves(n);
    for (int i = 0; i < n; ++i) {
        const auto& p = env_.vehicle_params()[static_cast<std::size_t>(i)];
        centers[i] = 0.5 * (p.accel_max + p.accel_min);
        halves[i] = 0.5 * (p.accel_max - p.accel_min);
    }

    obs::FaultConfig fault;
    if (source != FaultSource::none)
        fault = obs::sample_fault_config(fault_rng, states, cfg_.env.road, cfg_.schedule,
                                         cfg_.env.max_steps);

    const double progress =
        cfg_.episodes > 1 ? std::min(1.0, static_cast<double>(episode_) / (cfg_.episodes - 1)) : 0.0;
    const double sigma =
        cfg_.explore_sigma0 + (cfg_.explore_sigma1 - cfg_.explore_sigma0) * progress;

    Mat h = Mat::Zero(std::max(1, hidden), n);
    std::vector<int> recon_slot(static_cast<std::size_t>(n), 0);
    std::vector<int> last_fault_slot(static_cast<std::size_t>(n), -1);

    EpisodeRow row;
    row.episode = episode_;
    row.returns.assign(static_cast<std::size_t>(n), 0.0);
    row.loss_temporal = row.loss_critic = row.actor_grad = nan_value();
    row.loss_fault_critic = row.fault_actor_grad = nan_value();
    double sum_temporal = 0.0, sum_critic = 0.0, sum_actor = 0.0;
    double sum_fc = 0.0, sum_fa = 0.0;
    int vehicle_cycles = 0, temporal_cycles = 0, injector_cycles = 0;

    const bool injector_training =
        injector_.has_value() && cfg_.train_injector && source == FaultSource::adversarial;

    for (int t = 0; t < cfg_.env.max_steps; ++t) {
        const auto truth = obs::build_all_observations(states, cfg_.env.road);
        std::vector<obs::Obs> truth_scaled(truth.size());
        for (std::size_t i = 0; i < truth.size(); ++i)
            truth_scaled[i] = obs::scale_observation(truth[i], cfg_.scale);

        const bool slot_present =
            fault.enabled &&
            truth[static_cast<std::size_t>(fault.recipient)][(fault.target_slot + 1) * obs::kStateDim] == 1.0;
        const bool active = fault.in_window(t) && slot_present;

        Eigen::Vector2d b = Eigen::Vector2d::Zero();
        Vec x;
        obs::FaultIndicators indicators;
        if (active) {
            indicators = obs::encode_indicators(fault, n, sim::kNeighborSlots);
            if (source == FaultSource::adversarial) {
                x = obs::build_global_input(truth_scaled, indicators);
                b = agents::fault_act(*injector_, x, injector_training ? sigma : 0.0, &explore_rng);
            } else {
                b[0] = fault_rng.uniform(-cfg_.epsilon[0], cfg_.epsilon[0]);
                b[1] = fault_rng.uniform(-cfg_.epsilon[1], cfg_.epsilon[1]);
            }
            if (collect_b_) applied_b_.push_back(b);
        }

        const auto perturbed = obs::perturb_observations(truth, fault, active, b, budget);
        std::vector<obs::Obs> perturbed_scaled(perturbed.size());
        for (std::size_t i = 0; i < perturbed.size(); ++i)
            perturbed_scaled[i] = obs::scale_observation(perturbed[i], cfg_.scale);

        if (active) last_fault_slot[static_cast<std::size_t>(fault.recipient)] = fault.target_slot;
        for (int i = 0; i < n; ++i) {
            if (active && i == fault.recipient)
                recon_slot[static_cast<std::size_t>(i)] = fault.target_slot;
            else
                recon_slot[static_cast<std::size_t>(i)] =
                    last_fault_slot[static_cast<std::size_t>(i)] >= 0
                        ? last_fault_slot[static_cast<std::size_t>(i)]
                        : 0;
        }

        Mat prob, recon, h_next;
        if (has_temporal) {
            Mat inputs(obs_dim, n);
            for (int i = 0; i < n; ++i) inputs.col(i) = perturbed_scaled[static_cast<std::size_t>(i)];
            const auto out = agents::temporal_forward(*agents_.temporal, inputs, h);
            prob = out.prob;
            recon = out.recon;
            h_next = out.h_next;
        } else {
            h_next = h;
        }

        std::vector<double> actions(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const Vec input = agents::policy_input(
                mode, perturbed_scaled[static_cast<std::size_t>(i)],
                has_temporal ? Vec(prob.col(i)) : Vec(), has_temporal ? Vec(recon.col(i)) : Vec());
            const auto& p = env_.vehicle_params()[static_cast<std::size_t>(i)];
            actions[static_cast<std::size_t>(i)] =
                agents::vehicle_act(agents_, input, p.accel_min, p.accel_max,
                                    cfg_.train_vehicle ? sigma : 0.0, &explore_rng);
        }

        const auto outcome = env_.step(actions);
        for (int i = 0; i < n; ++i)
            row.returns[static_cast<std::size_t>(i)] += outcome.rewards[static_cast<std::size_t>(i)];

        const auto next_truth = obs::build_all_observations(outcome.next_states, cfg_.env.road);
        std::vector<obs::Obs> next_truth_scaled(next_truth.size());
        for (std::size_t i = 0; i < next_truth.size(); ++i)
            next_truth_scaled[i] = obs::scale_observation(next_truth[i], cfg_.scale);

        if (active && source == FaultSource::adversarial && injector_training) {
            FaultTransition ft;
            ft.x = x;
            ft.b = b;
            ft.reward = fault_reward(outcome.rewards);
            ft.x_next = obs::build_global_input(next_truth_scaled, indicators);
            ft.done = outcome.done;
            buf_fault_.push(std::move(ft));
        }

        if (cfg_.train_vehicle) {
            VehicleTransition tr;
            tr.o = Vec(n * obs_dim);
            tr.o_hat = Vec(n * obs_dim);
            tr.o_next = Vec(n * obs_dim);
            for (int i = 0; i < n; ++i) {
                tr.o.segment(i * obs_dim, obs_dim) = truth_scaled[static_cast<std::size_t>(i)];
                tr.o_hat.segment(i * obs_dim, obs_dim) =
                    perturbed_scaled[static_cast<std::size_t>(i)];
                tr.o_next.segment(i * obs_dim, obs_dim) =
                    next_truth_scaled[static_cast<std::size_t>(i)];
            }
            tr.actions = Eigen::Map<const Vec>(actions.data(), n);
            tr.rewards = Eigen::Map<const Vec>(outcome.rewards.data(), n);
            if (has_temporal) {
                tr.h = Vec(n * hidden);
                tr.h_next = Vec(n * hidden);
                for (int i = 0; i < n; ++i) {
                    tr.h.segment(i * hidden, hidden) = h.col(i);
                    tr.h_next.segment(i * hidden, hidden) = h_next.col(i);
                }
            }
            tr.centers = centers;
            tr.halves = halves;
            tr.recon_slot = recon_slot;
            tr.done = outcome.done;
            tr.fault_enabled = fault.enabled;
            tr.recipient = fault.recipient;
            tr.target_slot = fault.target_slot;
            tr.active_t = active;
            const bool present_t1 =
                fault.enabled &&
                next_truth[static_cast<std::size_t>(std::max(0, fault.recipient))]
                          [(fault.target_slot + 1) * obs::kStateDim] == 1.0;
            tr.active_t1 = fault.in_window(t + 1) && present_t1;
            tr.episode = episode_;
            tr.step = t;
            buf_vehicle_.push(std::move(tr));
        }

        ++total_steps_;
        row.steps = t + 1;
        if (active) ++row.fault_active_steps;

        if (total_steps_ % cfg_.update_every == 0) {
            const bool veh = cfg_.train_vehicle && buf_vehicle_.size() >= cfg_.batch_size;
            const bool inj = injector_training && buf_fault_.size() >= cfg_.batch_size;
            if (veh || inj) {
                update_steps_.push_back(total_steps_);
                ++row.updates;
            }
            if (veh) {
                const auto batch = sample_vehicle_batch(cfg_.batch_size, update_rng_);
                if (has_temporal) {
                    const auto seq = sample_seq_batch(
                        std::max(1, cfg_.batch_size / cfg_.bptt_window), cfg_.bptt_window,
                        update_rng_);
                    if (seq.cols() > 0) {
                        const double l = temporal_update(seq);
                        if (!std::isfinite(l))
                            throw RuntimeFailure("non-finite temporal loss at episode " +
                                                 std::to_string(episode_));
                        sum_temporal += l;
                        ++temporal_cycles;
                    }
                }
                double critic_sum = 0.0;
                for (int i = 0; i < n; ++i) critic_sum += critic_update(i, batch);
                const double actor = actor_update(batch);
                if (!std::isfinite(critic_sum) || !std::isfinite(actor))
                    throw RuntimeFailure("non-finite vehicle update at episode " +
                                         std::to_string(episode_));
                sum_critic += critic_sum / n;
                sum_actor += actor;
                ++vehicle_cycles;
            }
            if (inj) {
                const auto fb = sample_fault_batch(cfg_.batch_size, update_rng_);
                const double fc = fault_critic_update(fb);
                const double fa = fault_actor_update(fb);
                if (!std::isfinite(fc) || !std::isfinite(fa))
                    throw RuntimeFailure("non-finite injector update at episode " +
                                         std::to_string(episode_));
                sum_fc += fc;
                sum_fa += fa;
                ++injector_cycles;
            }
            if (veh) {
                nn::soft_update(nn::param_refs(agents_.policy_target, "p"),
                                nn::param_refs(agents_.policy, "p"), cfg_.tau);
                for (int i = 0; i < n; ++i)
                    nn::soft_update(
                        nn::param_refs(agents_.critics_target[static_cast<std::size_t>(i)], "c"),
                        nn::param_refs(agents_.critics[static_cast<std::size_t>(i)], "c"),
                        cfg_.tau);
            }
            if (inj) {
                nn::soft_update(nn::param_refs(injector_->actor_target, "a"),
                                nn::param_refs(injector_->actor, "a"), cfg_.tau);
                nn::soft_update(nn::param_refs(injector_->critic_target, "c"),
                                nn::param_refs(injector_->critic, "c"), cfg_.tau);
            }
        }

        states = outcome.next_states;
        h = h_next;
        if (outcome.done) {
            row.collided = outcome.collided;
            break;
        }
    }

    double mean = 0.0;
    for (double r : row.returns) mean += r;
    row.mean_return = mean / n;
    if (temporal_cycles > 0) row.loss_temporal = sum_temporal / temporal_cycles;
    if (vehicle_cycles > 0) {
        row.loss_critic = sum_critic / vehicle_cycles;
        row.actor_grad = sum_actor / vehicle_cycles;
    }
    if (injector_cycles > 0) {
        row.loss_fault_critic = sum_fc / injector_cycles;
        row.fault_actor_grad = sum_fa / injector_cycles;
    }
    ++episode_;
    return row;
}

Trainer::VehicleBatch Trainer::sample_vehicle_batch(int k, Rng& rng) const {
    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = agents_.temporal ? cfg_.gru_hidden : 0;
    VehicleBatch batch;
    batch.o = Mat(n * obs_dim, k);
    batch.o_hat = Mat(n * obs_dim, k);
    batch.o_next = Mat(n * obs_dim, k);
    batch.actions = Mat(n, k);
    batch.rewards = Mat(n, k);
    batch.h = Mat(n * hidden, k);
    batch.h_next = Mat(n * hidden, k);
    batch.centers = Mat(n, k);
    batch.halves = Mat(n, k);
    batch.done = Eigen::RowVectorXd(k);
    batch.rows.resize(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        const auto& tr = buf_vehicle_.at(buf_vehicle_.sample_index(rng));
        batch.rows[static_cast<std::size_t>(c)] = &tr;
        batch.o.col(c) = tr.o;
        batch.o_hat.col(c) = tr.o_hat;
        batch.o_next.col(c) = tr.o_next;
        batch.actions.col(c) = tr.actions;
        batch.rewards.col(c) = tr.rewards;
        if (hidden > 0) {
            batch.h.col(c) = tr.h;
            batch.h_next.col(c) = tr.h_next;
        }
        batch.centers.col(c) = tr.centers;
        batch.halves.col(c) = tr.halves;
        batch.done[c] = tr.done ? 1.0 : 0.0;
    }
    return batch;
}

SeqBatch Trainer::sample_seq_batch(int n_seq, int window, Rng& rng) const {
    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = agents_.temporal ? cfg_.gru_hidden : 0;
    const int recon_dim = cfg_.layout().recon_dim;

    std::vector<std::vector<const VehicleTransition*>> chains;
    int tries = 0;
    const int max_tries = 200 * std::max(1, n_seq);
    while (static_cast<int>(chains.size()) < n_seq && tries < max_tries) {
        ++tries;
        if (buf_vehicle_.size() == 0) break;
        std::int64_t idx = buf_vehicle_.sample_index(rng);
        std::vector<const VehicleTransition*> chain{&buf_vehicle_.at(idx)};
        bool ok = true;
        for (int w = 1; w < window; ++w) {
            idx = buf_vehicle_.next_index(idx);
            if (idx < 0) {
                ok = false;
                break;
            }
            const auto& next = buf_vehicle_.at(idx);
            if (next.episode != chain.front()->episode || next.step != chain.front()->step + w) {
                ok = false;
                break;
            }
            chain.push_back(&next);
        }
        if (ok) chains.push_back(std::move(chain));
    }

    SeqBatch batch;
    batch.window = window;
    const auto cols = static_cast<int>(chains.size()) * n;
    batch.h0 = Mat::Zero(std::max(1, hidden), std::max(cols, 0));
    if (cols == 0) {
        batch.h0 = Mat::Zero(std::max(1, hidden), 0);
        return batch;
    }
    for (int t = 0; t < window; ++t) {
        batch.obs_hat.emplace_back(obs_dim, cols);
        batch.prob_target.emplace_back(Mat::Zero(sim::kNeighborSlots, cols));
        batch.recon_target.emplace_back(Mat::Zero(recon_dim, cols));
    }
    for (std::size_t s = 0; s < chains.size(); ++s) {
        for (int j = 0; j < n; ++j) {
            const int col = static_cast<int>(s) * n + j;
            batch.h0.col(col) = chains[s][0]->h.segment(j * hidden, hidden);
            for (int t = 0; t < window; ++t) {
                const VehicleTransition& tr = *chains[s][static_cast<std::size_t>(t)];
                batch.obs_hat[static_cast<std::size_t>(t)].col(col) =
                    tr.o_hat.segment(j * obs_dim, obs_dim);
                if (tr.active_t && j == tr.recipient)
                    batch.prob_target[static_cast<std::size_t>(t)](tr.target_slot, col) = 1.0;
                if (recon_dim == obs::kPerturbDim) {
                    const int slot = tr.recon_slot[static_cast<std::size_t>(j)];
                    batch.recon_target[static_cast<std::size_t>(t)].col(col) = tr.o.segment(
                        j * obs_dim + (slot + 1) * obs::kStateDim + 1, obs::kPerturbDim);
                } else {
                    for (int slot = 0; slot < sim::kNeighborSlots; ++slot)
                        batch.recon_target[static_cast<std::size_t>(t)]
                            .col(col)
                            .segment(slot * obs::kPerturbDim, obs::kPerturbDim) = tr.o.segment(
                            j * obs_dim + (slot + 1) * obs::kStateDim + 1, obs::kPerturbDim);
                }
            }
        }
    }
    return batch;
}

Trainer::FaultBatch Trainer::sample_fault_batch(int k, Rng& rng) const {
    FaultBatch batch;
    const auto rows = cfg_.layout().global_in();
    batch.x = Mat(rows, k);
    batch.x_next = Mat(rows, k);
    batch.b = Mat(obs::kPerturbDim, k);
    batch.rewards = Eigen::RowVectorXd(k);
    batch.done = Eigen::RowVectorXd(k);
    for (int c = 0; c < k; ++c) {
        const auto& tr = buf_fault_.at(buf_fault_.sample_index(rng));
        batch.x.col(c) = tr.x;
        batch.x_next.col(c) = tr.x_next;
        batch.b.col(c) = tr.b;
        batch.rewards[c] = tr.reward;
        batch.done[c] = tr.done ? 1.0 : 0.0;
    }
    return batch;
}

double Trainer::temporal_update(const SeqBatch& batch) {
    auto grads = agents::zero_grads(*agents_.temporal);
    const double loss = temporal_loss(*agents_.temporal, batch, &grads);
    nn::adam_step(opt_temporal_, agents::param_refs(*agents_.temporal, "g"),
                  agents::grad_refs(*agents_.temporal, grads, "g"));
    return loss;
}

Mat Trainer::reconstruct_next_obs_hat(const VehicleBatch& batch) {
    const int obs_dim = obs::kObsDim;
    Mat out = batch.o_next;
    const FaultSource source = cfg_.parsed_fault();
    for (int c = 0; c < out.cols(); ++c) {
        const VehicleTransition& tr = *batch.rows[static_cast<std::size_t>(c)];
        if (!tr.fault_enabled || !tr.active_t1) continue;
        Eigen::Vector2d b = Eigen::Vector2d::Zero();
        if (source == FaultSource::adversarial && injector_) {
            obs::FaultConfig fc;
            fc.enabled = true;
            fc.recipient = tr.recipient;
            fc.target_slot = tr.target_slot;
            const auto ind = obs::encode_indicators(fc, cfg_.env.n_vehicles, sim::kNeighborSlots);
            Vec x(cfg_.layout().global_in());
            x << batch.o_next.col(c), ind.recipient_onehot, ind.target_onehot;
            b = agents::fault_act(*injector_, x, 0.0, nullptr);
        } else if (source == FaultSource::random) {
            b[0] = update_rng_.uniform(-cfg_.epsilon[0], cfg_.epsilon[0]);
            b[1] = update_rng_.uniform(-cfg_.epsilon[1], cfg_.epsilon[1]);
        }
        const int base = tr.recipient * obs_dim + (tr.target_slot + 1) * obs::kStateDim + 1;
        out(base, c) += b[0] * cfg_.scale.pos;
        out(base + 1, c) += b[1] * cfg_.scale.vel;
    }
    return out;
}

Mat Trainer::critic_inputs(const VehicleBatch& batch) const {
    const bool vanilla = cfg_.parsed_mode() == Mode::vanilla;
    const Mat& obs_part = vanilla ? batch.o_hat : batch.o;
    Mat in(obs_part.rows() + batch.actions.rows(), obs_part.cols());
    in << obs_part, batch.actions;
    return in;
}

Eigen::RowVectorXd Trainer::critic_targets(int vehicle, const VehicleBatch& batch) {
    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = agents_.temporal ? cfg_.gru_hidden : 0;
    const auto k = batch.o.cols();
    const Mode mode = cfg_.parsed_mode();

    const Mat o_hat_next = reconstruct_next_obs_hat(batch);
    Mat a_next(n, k);
    for (int j = 0; j < n; ++j) {
        const Mat obs_j = o_hat_next.middleRows(j * obs_dim, obs_dim);
        Mat pin;
        if (mode == Mode::oft) {
            const auto tout = agents::temporal_forward(*agents_.temporal, obs_j,
                                                       batch.h_next.middleRows(j * hidden, hidden));
            pin = Mat(obs_dim + tout.prob.rows() + tout.recon.rows(), k);
            pin << obs_j, tout.prob, tout.recon;
        } else {
            pin = obs_j;
        }
        const Mat u = nn::mlp_forward(agents_.policy_target, pin);
        a_next.row(j) = batch.centers.row(j) + batch.halves.row(j).cwiseProduct(u.row(0));
    }

    const Mat& next_obs_part = mode == Mode::vanilla ? o_hat_next : batch.o_next;
    Mat tin(next_obs_part.rows() + n, k);
    tin << next_obs_part, a_next;
    const Mat q_next =
        nn::mlp_forward(agents_.critics_target[static_cast<std::size_t>(vehicle)], tin);
    return batch.rewards.row(vehicle) +
           cfg_.gamma * (1.0 - batch.done.array()).matrix().cwiseProduct(q_next.row(0));
}

double Trainer::critic_update(int vehicle, const VehicleBatch& batch) {
    auto& critic = agents_.critics[static_cast<std::size_t>(vehicle)];
    const Mat in = critic_inputs(batch);
    const Eigen::RowVectorXd targets = critic_targets(vehicle, batch);
    auto grads = nn::zero_grads(critic);
    const double loss = td_loss(critic, in, targets, &grads);
    nn::adam_step(opt_critics_[static_cast<std::size_t>(vehicle)], nn::param_refs(critic, "c"),
                  nn::grad_refs(critic, grads, "c"));
    return loss;
}

ActorBatch Trainer::make_actor_batch(const VehicleBatch& batch) const {
    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = agents_.temporal ? cfg_.gru_hidden : 0;
    const Mode mode = cfg_.parsed_mode();
    const auto k = batch.o.cols();

    ActorBatch ab;
    for (int i = 0; i < n; ++i) {
        const Mat obs_i = batch.o_hat.middleRows(i * obs_dim, obs_dim);
        if (mode == Mode::oft) {
            const auto tout = agents::temporal_forward(*agents_.temporal, obs_i,
                                                       batch.h.middleRows(i * hidden, hidden));
            Mat pin(obs_dim + tout.prob.rows() + tout.recon.rows(), k);
            pin << obs_i, tout.prob, tout.recon;
            ab.policy_in.push_back(std::move(pin));
        } else {
            ab.policy_in.push_back(obs_i);
        }
    }
    ab.critic_obs = mode == Mode::vanilla ? batch.o_hat : batch.o;
    ab.actions = batch.actions;
    ab.centers = batch.centers;
    ab.halves = batch.halves;
    return ab;
}

double Trainer::actor_update(const VehicleBatch& batch) {
    const ActorBatch ab = make_actor_batch(batch);
    auto grads = nn::zero_grads(agents_.policy);
    actor_objective(agents_.policy, agents_.critics, ab, &grads);
    const double norm = nn::grad_norm(nn::grad_refs(agents_.policy, grads, "p"));
    for (auto& m : grads.dw) m = -m;
    for (auto& v : grads.db) v = -v;
    nn::adam_step(opt_policy_, nn::param_refs(agents_.policy, "p"),
                  nn::grad_refs(agents_.policy, grads, "p"));
    return norm;
}

double Trainer::fault_critic_update(const FaultBatch& batch) {
    auto& inj = *injector_;
    const Mat u = nn::mlp_forward(inj.actor_target, batch.x_next);
    const Mat b_next = inj.epsilon.asDiagonal() * u;
    Mat tin(batch.x_next.rows() + b_next.rows(), batch.x_next.cols());
    tin << batch.x_next, b_next;
    const Mat q_next = nn::mlp_forward(inj.critic_target, tin);
    const Eigen::RowVectorXd targets =
        batch.rewards +
        cfg_.gamma * (1.0 - batch.done.array()).matrix().cwiseProduct(q_next.row(0));

    Mat in(batch.x.rows() + batch.b.rows(), batch.x.cols());
    in << batch.x, batch.b;
    auto grads = nn::zero_grads(inj.critic);
    const double loss = td_loss(inj.critic, in, targets, &grads);
    nn::adam_step(opt_inj_critic_, nn::param_refs(inj.critic, "c"),
                  nn::grad_refs(inj.critic, grads, "c"));
    return loss;
}

double Trainer::fault_actor_update(const FaultBatch& batch) {
    auto& inj = *injector_;
    auto grads = nn::zero_grads(inj.actor);
    fault_actor_objective(inj.actor, inj.critic, batch.x, inj.epsilon, &grads);
    const double norm = nn::grad_norm(nn::grad_refs(inj.actor, grads, "a"));
    for (auto& m : grads.dw) m = -m;
    for (auto& v : grads.db) v = -v;
    nn::adam_step(opt_inj_actor_, nn::param_refs(inj.actor, "a"),
                  nn::grad_refs(inj.actor, grads, "a"));
    return norm;
}

void Trainer::soft_update_targets() {
    nn::soft_update(nn::param_refs(agents_.policy_target, "p"),
                    nn::param_refs(agents_.policy, "p"), cfg_.tau);
    for (std::size_t i = 0; i < agents_.critics.size(); ++i)
        nn::soft_update(nn::param_refs(agents_.critics_target[i], "c"),
                        nn::param_refs(agents_.critics[i], "c"), cfg_.tau);
    if (injector_) {
        nn::soft_update(nn::param_refs(injector_->actor_target, "a"),
                        nn::param_refs(injector_->actor, "a"), cfg_.tau);
        nn::soft_update(nn::param_refs(injector_->critic_target, "c"),
                        nn::param_refs(injector_->critic, "c"), cfg_.tau);
    }
}

namespace {

void dump_refs(Checkpoint& ck, const std::vector<nn::ParamRef>& refs) {
    for (const auto& r : refs)
        ck.arrays["param/" + r.name] = std::vector<double>(r.data, r.data + r.size);
}

void load_refs(const Checkpoint& ck, const std::vector<nn::ParamRef>& refs) {
    for (const auto& r : refs) {
        const auto& src = ck.array_at("param/" + r.name);
        if (static_cast<std::int64_t>(src.size()) != r.size)
            throw RuntimeFailure("checkpoint: shape mismatch for '" + r.name + "'");
        std::copy(src.begin(), src.end(), r.data);
    }
}

void dump_adam(Checkpoint& ck, const std::string& name, const nn::AdamState& s) {
    ck.arrays["opt/" + name + "/m"] = std::vector<double>(s.m.data(), s.m.data() + s.m.size());
    ck.arrays["opt/" + name + "/v"] = std::vector<double>(s.v.data(), s.v.data() + s.v.size());
    ck.arrays["opt/" + name + "/meta"] = {static_cast<double>(s.step), s.lr};
}

void load_adam(const Checkpoint& ck, const std::string& name, nn::AdamState& s) {
    const auto& m = ck.array_at("opt/" + name + "/m");
    const auto& v = ck.array_at("opt/" + name + "/v");
    if (static_cast<std::int64_t>(m.size()) != s.m.size() ||
        static_cast<std::int64_t>(v.size()) != s.v.size())
        throw RuntimeFailure("checkpoint: optimizer state mismatch for '" + name + "'");
    std::copy(m.begin(), m.end(), s.m.data());
    std::copy(v.begin(), v.end(), s.v.data());
    const auto& meta = ck.array_at("opt/" + name + "/meta");
    s.step = static_cast<std::int64_t>(meta.at(0));
    s.lr = meta.at(1);
}

std::vector<nn::ParamRef> all_vehicle_refs(agents::VehicleAgents& a) {
    std::vector<nn::ParamRef> refs = nn::param_refs(a.policy, "policy");
    const auto tgt = nn::param_refs(a.policy_target, "policy_target");
    refs.insert(refs.end(), tgt.begin(), tgt.end());
    for (std::size_t i = 0; i < a.critics.size(); ++i) {
        const auto c = nn::param_refs(a.critics[i], "critic" + std::to_string(i));
        refs.insert(refs.end(), c.begin(), c.end());
        const auto ct = nn::param_refs(a.critics_target[i], "critic_target" + std::to_string(i));
        refs.insert(refs.end(), ct.begin(), ct.end());
    }
    if (a.temporal) {
        const auto g = agents::param_refs(*a.temporal, "temporal");
        refs.insert(refs.end(), g.begin(), g.end());
    }
    return refs;
}

std::vector<nn::ParamRef> all_injector_refs(agents::FaultInjector& inj) {
    std::vector<nn::ParamRef> refs = nn::param_refs(inj.actor, "inj_actor");
    for (const auto& [net, name] :
         std::vector<std::pair<nn::Mlp*, std::string>>{{&inj.actor_target, "inj_actor_target"},
                                                       {&inj.critic, "inj_critic"},
                                                       {&inj.critic_target, "inj_critic_target"}}) {
        const auto r = nn::param_refs(*net, name);
        refs.insert(refs.end(), r.begin(), r.end());
    }
    return refs;
}

}  // namespace

Checkpoint Trainer::to_checkpoint() const {
    Checkpoint ck;
    ck.strings["config"] = dump_config(cfg_);
    ck.strings["mode"] = cfg_.mode;
    ck.strings["update_rng"] = update_rng_.serialize();
    ck.arrays["trainer/episode"] = {static_cast<double>(episode_)};
    ck.arrays["trainer/total_steps"] = {static_cast<double>(total_steps_)};

    auto& self = const_cast<Trainer&>(*this);
    dump_refs(ck, all_vehicle_refs(self.agents_));
    dump_adam(ck, "policy", opt_policy_);
    for (std::size_t i = 0; i < opt_critics_.size(); ++i)
        dump_adam(ck, "critic" + std::to_string(i), opt_critics_[i]);
    if (agents_.temporal) dump_adam(ck, "temporal", opt_temporal_);
    if (injector_) {
        dump_refs(ck, all_injector_refs(*self.injector_));
        dump_adam(ck, "inj_actor", opt_inj_actor_);
        dump_adam(ck, "inj_critic", opt_inj_critic_);
        ck.arrays["inj/epsilon"] = {injector_->epsilon[0], injector_->epsilon[1]};
    }

    const int n = cfg_.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = agents_.temporal ? cfg_.gru_hidden : 0;
    {
        const std::int64_t stride = 3 * n * obs_dim + 4 * n + 2 * n * hidden + n + 8;
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(stride * buf_vehicle_.size()));
        for (const auto& tr : buf_vehicle_.raw()) {
            auto append = [&flat](const Vec& v) {
                flat.insert(flat.end(), v.data(), v.data() + v.size());
            };
            append(tr.o);
            append(tr.o_hat);
            append(tr.o_next);
            append(tr.actions);
            append(tr.rewards);
            append(tr.h);
            append(tr.h_next);
            append(tr.centers);
            append(tr.halves);
            for (int s : tr.recon_slot) flat.push_back(s);
            flat.push_back(tr.done ? 1.0 : 0.0);
            flat.push_back(tr.fault_enabled ? 1.0 : 0.0);
            flat.push_back(tr.recipient);
            flat.push_back(tr.target_slot);
            flat.push_back(tr.active_t ? 1.0 : 0.0);
            flat.push_back(tr.active_t1 ? 1.0 : 0.0);
            flat.push_back(static_cast<double>(tr.episode));
            flat.push_back(tr.step);
        }
        ck.arrays["buffer_v/data"] = std::move(flat);
        ck.arrays["buffer_v/meta"] = {static_cast<double>(buf_vehicle_.size()),
                                      static_cast<double>(buf_vehicle_.head()),
                                      static_cast<double>(stride)};
    }
    {
        const std::int64_t g = cfg_.layout().global_in();
        const std::int64_t stride = 2 * g + 4;
        std::vector<double> flat;
        flat.reserve(static_cast<std::size_t>(stride * buf_fault_.size()));
        for (const auto& tr : buf_fault_.raw()) {
            flat.insert(flat.end(), tr.x.data(), tr.x.data() + tr.x.size());
            flat.push_back(tr.b[0]);
            flat.push_back(tr.b[1]);
            flat.push_back(tr.reward);
            flat.insert(flat.end(), tr.x_next.data(), tr.x_next.data() + tr.x_next.size());
            flat.push_back(tr.done ? 1.0 : 0.0);
        }
        ck.arrays["buffer_f/data"] = std::move(flat);
        ck.arrays["buffer_f/meta"] = {static_cast<double>(buf_fault_.size()),
                                      static_cast<double>(buf_fault_.head()),
                                      static_cast<double>(stride)};
    }
    return ck;
}

Trainer Trainer::resume(const Checkpoint& ck) {
    const RunConfig cfg = parse_config_text(ck.string_at("config"));
    Trainer t(cfg);
    load_refs(ck, all_vehicle_refs(t.agents_));
    load_adam(ck, "policy", t.opt_policy_);
    for (std::size_t i = 0; i < t.opt_critics_.size(); ++i)
        load_adam(ck, "critic" + std::to_string(i), t.opt_critics_[i]);
    if (t.agents_.temporal) load_adam(ck, "temporal", t.opt_temporal_);
    if (t.injector_) {
        load_refs(ck, all_injector_refs(*t.injector_));
        load_adam(ck, "inj_actor", t.opt_inj_actor_);
        load_adam(ck, "inj_critic", t.opt_inj_critic_);
    }
    t.update_rng_ = Rng::deserialize(ck.string_at("update_rng"));
    t.episode_ = static_cast<std::int64_t>(ck.array_at("trainer/episode").at(0));
    t.total_steps_ = static_cast<std::int64_t>(ck.array_at("trainer/total_steps").at(0));

    const int n = cfg.env.n_vehicles;
    const int obs_dim = obs::kObsDim;
    const int hidden = t.agents_.temporal ? cfg.gru_hidden : 0;
    {
        const auto& meta = ck.array_at("buffer_v/meta");
        const auto size = static_cast<std::int64_t>(meta.at(0));
        const auto head = static_cast<std::int64_t>(meta.at(1));
        const auto stride = static_cast<std::int64_t>(meta.at(2));
        const auto& flat = ck.array_at("buffer_v/data");
        if (static_cast<std::int64_t>(flat.size()) != size * stride)
            throw RuntimeFailure("checkpoint: vehicle buffer payload mismatch");
        std::vector<VehicleTransition> data(static_cast<std::size_t>(size));
        const double* p = flat.data();
        for (auto& tr : data) {
            auto take = [&p](Vec& v, int len) {
                v = Eigen::Map<const Vec>(p, len);
                p += len;
            };
            take(tr.o, n * obs_dim);
            take(tr.o_hat, n * obs_dim);
            take(tr.o_next, n * obs_dim);
            take(tr.actions, n);
            take(tr.rewards, n);
            take(tr.h, n * hidden);
            take(tr.h_next, n * hidden);
            take(tr.centers, n);
            take(tr.halves, n);
            tr.recon_slot.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) tr.recon_slot[static_cast<std::size_t>(i)] = static_cast<int>(*p++);
            tr.done = *p++ != 0.0;
            tr.fault_enabled = *p++ != 0.0;
            tr.recipient = static_cast<int>(*p++);
            tr.target_slot = static_cast<int>(*p++);
            tr.active_t = *p++ != 0.0;
            tr.active_t1 = *p++ != 0.0;
            tr.episode = static_cast<std::int64_t>(*p++);
            tr.step = static_cast<int>(*p++);
        }
        t.buf_vehicle_.restore(std::move(data), head);
    }
    {
        const auto& meta = ck.array_at("buffer_f/meta");
        const auto size = static_cast<std::int64_t>(meta.at(0));
        const auto head = static_cast<std::int64_t>(meta.at(1));
        const auto g = cfg.layout().global_in();
        const auto& flat = ck.array_at("buffer_f/data");
        if (static_cast<std::int64_t>(flat.size()) != size * (2 * g + 4))
            throw RuntimeFailure("checkpoint: fault buffer payload mismatch");
        std::vector<FaultTransition> data(static_cast<std::size_t>(size));
        const double* p = flat.data();
        for (auto& tr : data) {
            tr.x = Eigen::Map<const Vec>(p, g);
            p += g;
            tr.b[0] = *p++;
            tr.b[1] = *p++;
            tr.reward = *p++;
            tr.x_next = Eigen::Map<const Vec>(p, g);
            p += g;
            tr.done = *p++ != 0.0;
        }
        t.buf_fault_.restore(std::move(data), head);
    }
    return t;
}

LoadedPolicy load_policy(const Checkpoint& ck) {
    LoadedPolicy out{parse_config_text(ck.string_at("config")),
                     agents::VehicleAgents{},
                     std::nullopt,
                     static_cast<std::int64_t>(ck.array_at("trainer/episode").at(0))};
    Rng scratch(0);
    out.agents = agents::make_vehicle_agents(out.cfg.parsed_mode(), out.cfg.layout(), scratch);
    load_refs(ck, all_vehicle_refs(out.agents));
    if (ck.has_array("inj/epsilon")) {
        const auto& eps = ck.array_at("inj/epsilon");
        out.injector = agents::make_fault_injector(out.cfg.layout(),
                                                   Eigen::Vector2d(eps.at(0), eps.at(1)), scratch);
        load_refs(ck, all_injector_refs(*out.injector));
    }
    return out;
}

}  // namespace oft::train
