#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "oft/agents.hpp"
#include "oft/merge_env.hpp"
#include "oft/observation.hpp"

namespace oft {

enum class FaultSource { none, random, adversarial };

FaultSource parse_fault_source(const std::string& text);
std::string fault_source_name(FaultSource source);

// Flat run configuration: environment, fault model, networks, training loop.
// Every field has a default; file values override defaults, command-line
// overrides beat the file.
struct RunConfig {
    sim::EnvConfig env;
    obs::FaultSchedule schedule;
    obs::ObsScale scale;
    Eigen::Vector2d epsilon{10.0, 5.0};

    std::string mode = "oft";        // oft | oft_no_gru | vanilla
    std::string fault = "adversarial";  // none | random | adversarial
    bool train_vehicle = true;
    bool train_injector = true;  // effective only when fault == adversarial
    bool recon_all_slots = false;

    int episodes = 2000;
    int batch_size = 128;
    int update_every = 4;
    double gamma = 0.99;
    double tau = 0.01;
    double lr_critic = 1e-3;
    double lr_actor = 1e-4;
    double lr_temporal = 1e-3;
    double lr_fault_critic = 1e-3;
    double lr_fault_actor = 1e-4;
    std::int64_t buffer_vehicle = 100000;
    std::int64_t buffer_fault = 50000;
    int gru_hidden = 64;
    int mlp_hidden = 64;
    int bptt_window = 8;
    double explore_sigma0 = 0.1;
    double explore_sigma1 = 0.01;
    int checkpoint_every = 0;  // episodes between checkpoints; 0 = final only
    std::uint64_t seed = 1;

    agents::Mode parsed_mode() const { return agents::parse_mode(mode); }
    FaultSource parsed_fault() const { return parse_fault_source(fault); }
    agents::AgentLayout layout() const;
    void validate() const;
};

// Known keys with one-line documentation, for --help and the README table.
std::vector<std::pair<std::string, std::string>> config_keys();

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{});
RunConfig parse_config_file(const std::string& path, RunConfig base = RunConfig{});

// Canonical sorted key=value dump; parse_config_text(dump_config(c)) == c.
std::string dump_config(const RunConfig& cfg);

}  // namespace oft
