#include "oft/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "oft/errors.hpp"

namespace oft {

FaultSource parse_fault_source(const std::string& text) {
    if (text == "none") return FaultSource::none;
    if (text == "random") return FaultSource::random;
    if (text == "adversarial") return FaultSource::adversarial;
    throw ConfigError("unknown fault source '" + text + "' (expected none|random|adversarial)");
}

std::string fault_source_name(FaultSource source) {
    switch (source) {
        case FaultSource::none: return "none";
        case FaultSource::random: return "random";
        case FaultSource::adversarial: return "adversarial";
    }
    return "?";
}

agents::AgentLayout RunConfig::layout() const {
    agents::AgentLayout l;
    l.n_vehicles = env.n_vehicles;
    l.obs_dim = obs::kObsDim;
    l.n_slots = sim::kNeighborSlots;
    l.recon_dim = recon_all_slots ? sim::kNeighborSlots * obs::kPerturbDim : obs::kPerturbDim;
    l.gru_hidden = gru_hidden;
    l.mlp_hidden = mlp_hidden;
    return l;
}

void RunConfig::validate() const {
    env.validate();
    parsed_mode();
    parsed_fault();
    if (episodes < 1) throw ConfigError("episodes must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (update_every < 1) throw ConfigError("update_every must be >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
    if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in (0, 1]");
    if (buffer_vehicle < batch_size || buffer_fault < batch_size)
        throw ConfigError("buffer capacity below batch size");
    if (gru_hidden < 1 || mlp_hidden < 1) throw ConfigError("hidden sizes must be >= 1");
    if (bptt_window < 1) throw ConfigError("bptt_window must be >= 1");
    if (!(epsilon[0] > 0.0 && epsilon[1] > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(schedule.fault_prob >= 0.0 && schedule.fault_prob <= 1.0))
        throw ConfigError("fault_prob must lie in [0, 1]");
    if (!(scale.pos > 0.0 && scale.vel > 0.0)) throw ConfigError("scale factors must be positive");
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::int64_t x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true|false, got '" + v + "'");
}

struct KeyEntry {
    std::string key;
    std::string doc;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::vector<KeyEntry> make_registry() {
    std::vector<KeyEntry> reg;
    auto num = [&reg](const std::string& key, const std::string& doc, auto member) {
        reg.push_back({key, doc,
                       [member, key](RunConfig& c, const std::string& v) { c.*member = to_double(key, v); },
                       [member](const RunConfig& c) { return fmt_double(c.*member); }});
    };
    auto env_num = [&reg](const std::string& key, const std::string& doc, auto member) {
        reg.push_back({key, doc,
                       [member, key](RunConfig& c, const std::string& v) { c.env.*member = to_double(key, v); },
                       [member](const RunConfig& c) { return fmt_double(c.env.*member); }});
    };
    auto int_of = [&reg](const std::string& key, const std::string& doc, auto get, auto set) {
        reg.push_back({key, doc,
                       [set, key](RunConfig& c, const std::string& v) { set(c, to_int(key, v)); },
                       [get](const RunConfig& c) { return std::to_string(get(c)); }});
    };
    auto bool_of = [&reg](const std::string& key, const std::string& doc, auto member) {
        reg.push_back({key, doc,
                       [member, key](RunConfig& c, const std::string& v) { c.*member = to_bool(key, v); },
                       [member](const RunConfig& c) { return std::string(c.*member ? "true" : "false"); }});
    };

    int_of("n_vehicles", "fleet size N", [](const RunConfig& c) { return c.env.n_vehicles; },
           [](RunConfig& c, std::int64_t v) { c.env.n_vehicles = static_cast<int>(v); });
    env_num("dt", "simulation step length [s]", &sim::EnvConfig::dt);
    int_of("max_steps", "episode step cap S", [](const RunConfig& c) { return c.env.max_steps; },
           [](RunConfig& c, std::int64_t v) { c.env.max_steps = static_cast<int>(v); });
    env_num("init_vel_lo", "initial velocity lower bound [m/s]", &sim::EnvConfig::init_vel_lo);
    env_num("init_vel_hi", "initial velocity upper bound [m/s]", &sim::EnvConfig::init_vel_hi);
    env_num("min_headway", "minimum same-lane spawn gap [m]", &sim::EnvConfig::min_headway);
    env_num("v_max", "velocity ceiling [m/s]", &sim::EnvConfig::v_max);
    env_num("vehicle_length", "vehicle length [m]", &sim::EnvConfig::vehicle_length);
    env_num("accel_min", "braking limit [m/s^2], negative", &sim::EnvConfig::accel_min);
    reg.push_back({"accel_max_choices", "comma list of per-vehicle acceleration limits [m/s^2]",
                   [](RunConfig& c, const std::string& v) {
                       std::vector<double> out;
                       std::stringstream ss(v);
                       std::string item;
                       while (std::getline(ss, item, ','))
                           out.push_back(to_double("accel_max_choices", item));
                       if (out.empty()) throw ConfigError("accel_max_choices: empty list");
                       c.env.accel_max_choices = out;
                   },
                   [](const RunConfig& c) {
                       std::string s;
                       for (std::size_t i = 0; i < c.env.accel_max_choices.size(); ++i)
                           s += (i ? "," : "") + fmt_double(c.env.accel_max_choices[i]);
                       return s;
                   }});
    env_num("main_spawn_max", "main-lane spawn window end [m]", &sim::EnvConfig::main_spawn_max);
    env_num("ramp_spawn_max", "ramp spawn window end on the shared axis [m]",
            &sim::EnvConfig::ramp_spawn_max);
    env_num("v_target", "velocity-reward target [m/s]", &sim::EnvConfig::v_target);
    env_num("c_vel", "velocity reward coefficient", &sim::EnvConfig::c_vel);
    env_num("c_col", "collision penalty", &sim::EnvConfig::c_col);
    env_num("c_goal", "completion bonus base", &sim::EnvConfig::c_goal);
    env_num("goal_discount", "completion bonus decay per step", &sim::EnvConfig::goal_discount);
    reg.push_back({"main_length", "main road length [m]",
                   [](RunConfig& c, const std::string& v) { c.env.road.main_length = to_double("main_length", v); },
                   [](const RunConfig& c) { return fmt_double(c.env.road.main_length); }});
    reg.push_back({"ramp_length", "ramp length [m]",
                   [](RunConfig& c, const std::string& v) { c.env.road.ramp_length = to_double("ramp_length", v); },
                   [](const RunConfig& c) { return fmt_double(c.env.road.ramp_length); }});
    reg.push_back({"merge_point", "merge point position [m]",
                   [](RunConfig& c, const std::string& v) { c.env.road.merge_point = to_double("merge_point", v); },
                   [](const RunConfig& c) { return fmt_double(c.env.road.merge_point); }});
    reg.push_back({"goal_point", "completion line position [m]",
                   [](RunConfig& c, const std::string& v) { c.env.road.goal_point = to_double("goal_point", v); },
                   [](const RunConfig& c) { return fmt_double(c.env.road.goal_point); }});

    reg.push_back({"epsilon_pos", "position perturbation budget [m]",
                   [](RunConfig& c, const std::string& v) { c.epsilon[0] = to_double("epsilon_pos", v); },
                   [](const RunConfig& c) { return fmt_double(c.epsilon[0]); }});
    reg.push_back({"epsilon_vel", "velocity perturbation budget [m/s]",
                   [](RunConfig& c, const std::string& v) { c.epsilon[1] = to_double("epsilon_vel", v); },
                   [](const RunConfig& c) { return fmt_double(c.epsilon[1]); }});
    reg.push_back({"fault_prob", "per-episode fault probability",
                   [](RunConfig& c, const std::string& v) { c.schedule.fault_prob = to_double("fault_prob", v); },
                   [](const RunConfig& c) { return fmt_double(c.schedule.fault_prob); }});
    int_of("fault_t_on_lo", "earliest fault onset step",
           [](const RunConfig& c) { return c.schedule.t_on_lo; },
           [](RunConfig& c, std::int64_t v) { c.schedule.t_on_lo = static_cast<int>(v); });
    int_of("fault_min_duration", "minimum fault window length [steps]",
           [](const RunConfig& c) { return c.schedule.min_duration; },
           [](RunConfig& c, std::int64_t v) { c.schedule.min_duration = static_cast<int>(v); });
    reg.push_back({"pos_scale", "network input scale for positions",
                   [](RunConfig& c, const std::string& v) { c.scale.pos = to_double("pos_scale", v); },
                   [](const RunConfig& c) { return fmt_double(c.scale.pos); }});
    reg.push_back({"vel_scale", "network input scale for velocities",
                   [](RunConfig& c, const std::string& v) { c.scale.vel = to_double("vel_scale", v); },
                   [](const RunConfig& c) { return fmt_double(c.scale.vel); }});

    reg.push_back({"mode", "policy variant: oft | oft_no_gru | vanilla",
                   [](RunConfig& c, const std::string& v) { c.mode = v; },
                   [](const RunConfig& c) { return c.mode; }});
    reg.push_back({"fault", "fault source: none | random | adversarial",
                   [](RunConfig& c, const std::string& v) { c.fault = v; },
                   [](const RunConfig& c) { return c.fault; }});
    bool_of("train_vehicle", "update vehicle networks during training", &RunConfig::train_vehicle);
    bool_of("train_injector", "update the fault injector during training", &RunConfig::train_injector);
    bool_of("recon_all_slots", "reconstruct all neighbor slots instead of the faulted one",
            &RunConfig::recon_all_slots);

    int_of("episodes", "training episodes E", [](const RunConfig& c) { return c.episodes; },
           [](RunConfig& c, std::int64_t v) { c.episodes = static_cast<int>(v); });
    int_of("batch_size", "minibatch size k", [](const RunConfig& c) { return c.batch_size; },
           [](RunConfig& c, std::int64_t v) { c.batch_size = static_cast<int>(v); });
    int_of("update_every", "environment steps between update cycles K",
           [](const RunConfig& c) { return c.update_every; },
           [](RunConfig& c, std::int64_t v) { c.update_every = static_cast<int>(v); });
    num("gamma", "discount factor", &RunConfig::gamma);
    num("tau", "soft target update rate", &RunConfig::tau);
    num("lr_critic", "vehicle critic learning rate", &RunConfig::lr_critic);
    num("lr_actor", "vehicle actor learning rate", &RunConfig::lr_actor);
    num("lr_temporal", "temporal network learning rate", &RunConfig::lr_temporal);
    num("lr_fault_critic", "injector critic learning rate", &RunConfig::lr_fault_critic);
    num("lr_fault_actor", "injector actor learning rate", &RunConfig::lr_fault_actor);
    int_of("buffer_vehicle", "vehicle replay capacity",
           [](const RunConfig& c) { return c.buffer_vehicle; },
           [](RunConfig& c, std::int64_t v) { c.buffer_vehicle = v; });
    int_of("buffer_fault", "injector replay capacity",
           [](const RunConfig& c) { return c.buffer_fault; },
           [](RunConfig& c, std::int64_t v) { c.buffer_fault = v; });
    int_of("gru_hidden", "GRU hidden width", [](const RunConfig& c) { return c.gru_hidden; },
           [](RunConfig& c, std::int64_t v) { c.gru_hidden = static_cast<int>(v); });
    int_of("mlp_hidden", "MLP hidden width", [](const RunConfig& c) { return c.mlp_hidden; },
           [](RunConfig& c, std::int64_t v) { c.mlp_hidden = static_cast<int>(v); });
    int_of("bptt_window", "truncation window for recurrent training",
           [](const RunConfig& c) { return c.bptt_window; },
           [](RunConfig& c, std::int64_t v) { c.bptt_window = static_cast<int>(v); });
    num("explore_sigma0", "initial exploration noise (fraction of action range)",
        &RunConfig::explore_sigma0);
    num("explore_sigma1", "final exploration noise (fraction of action range)",
        &RunConfig::explore_sigma1);
    int_of("checkpoint_every", "episodes between periodic checkpoints (0 = final only)",
           [](const RunConfig& c) { return c.checkpoint_every; },
           [](RunConfig& c, std::int64_t v) { c.checkpoint_every = static_cast<int>(v); });
    reg.push_back({"seed", "master seed; all randomness derives from it",
                   [](RunConfig& c, const std::string& v) {
                       c.seed = static_cast<std::uint64_t>(to_int("seed", v));
                   },
                   [](const RunConfig& c) { return std::to_string(c.seed); }});

    std::sort(reg.begin(), reg.end(),
              [](const KeyEntry& a, const KeyEntry& b) { return a.key < b.key; });
    return reg;
}

const std::vector<KeyEntry>& registry() {
    static const std::vector<KeyEntry> reg = make_registry();
    return reg;
}

const KeyEntry& find_key(const std::string& key) {
    for (const KeyEntry& e : registry())
        if (e.key == key) return e;
    throw ConfigError("unknown config key '" + key + "'");
}

std::string strip(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> config_keys() {
    std::vector<std::pair<std::string, std::string>> out;
    for (const KeyEntry& e : registry()) out.emplace_back(e.key, e.doc);
    return out;
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    find_key(key).set(cfg, value);
}

RunConfig parse_config_text(const std::string& text, RunConfig base) {
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        apply_override(base, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
    return base;
}

RunConfig parse_config_file(const std::string& path, RunConfig base) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

std::string dump_config(const RunConfig& cfg) {
    std::string out;
    for (const KeyEntry& e : registry()) out += e.key + "=" + e.get(cfg) + "\n";
    return out;
}

}  // namespace oft
