#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "oft/checkpoint.hpp"
#include "oft/config.hpp"
#include "oft/csv.hpp"
#include "oft/errors.hpp"
#include "oft/eval.hpp"
#include "oft/log.hpp"
#include "oft/training.hpp"

namespace fs = std::filesystem;
using namespace oft;

namespace {

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeFailure("cannot write '" + path.string() + "'");
    out << content;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

RunConfig resolve_config(const std::string& config_path,
                         const std::vector<std::string>& overrides) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = parse_config_file(config_path);
    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return cfg;
}

struct EvalCondition {
    FaultSource source;
    std::optional<agents::FaultInjector> injector;
    std::string name;
};

EvalCondition parse_condition(const std::string& text) {
    EvalCondition c;
    if (text == "none" || text == "random") {
        c.source = parse_fault_source(text);
        c.name = text;
        return c;
    }
    if (!fs::exists(text))
        throw ConfigError("fault condition '" + text +
                          "' is neither none|random nor an injector checkpoint path");
    const auto loaded = train::load_policy(load_checkpoint(text));
    if (!loaded.injector)
        throw ConfigError("checkpoint '" + text + "' holds no fault injector");
    c.source = FaultSource::adversarial;
    c.injector = *loaded.injector;
    c.name = "injector:" + fs::path(text).filename().string();
    return c;
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides,
              const std::string& out_dir, const std::string& resume_path) {
    fs::create_directories(out_dir);
    std::optional<train::Trainer> trainer;
    if (!resume_path.empty()) {
        trainer.emplace(train::Trainer::resume(load_checkpoint(resume_path)));
        log_info("resumed from '" + resume_path + "' at episode " +
                 std::to_string(trainer->episode()));
    } else {
        trainer.emplace(resolve_config(config_path, overrides));
    }
    const RunConfig& cfg = trainer->config();
    write_file(fs::path(out_dir) / "config_resolved.cfg", dump_config(cfg));

    const fs::path metrics_path = fs::path(out_dir) / "metrics.csv";
    const bool append = !resume_path.empty() && fs::exists(metrics_path);
    std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
    if (!metrics) throw RuntimeFailure("cannot write metrics.csv");
    if (!append) metrics << train::episode_csv_header(cfg.env.n_vehicles) << "\n";

    const int remaining = cfg.episodes - static_cast<int>(trainer->episode());
    log_info("training mode=" + cfg.mode + " fault=" + cfg.fault + " episodes=" +
             std::to_string(remaining));
    try {
        int since_checkpoint = 0;
        trainer->run(std::max(0, remaining), [&](const train::EpisodeRow& row) {
            metrics << train::episode_csv_row(row) << "\n";
            ++since_checkpoint;
            if (cfg.checkpoint_every > 0 && since_checkpoint >= cfg.checkpoint_every) {
                since_checkpoint = 0;
                save_checkpoint(trainer->to_checkpoint(),
                                (fs::path(out_dir) / ("checkpoint_" + std::to_string(row.episode + 1) +
                                                      ".ckpt")).string());
            }
            if (static_cast<int>(row.episode) % 100 == 99)
                log_debug("episode " + std::to_string(row.episode) + " mean return " +
                          fmt_g17(row.mean_return));
        });
    } catch (const RuntimeFailure& failure) {
        metrics.flush();
        write_file(fs::path(out_dir) / "abort_dump.txt",
                   std::string("training aborted: ") + failure.what() + "\nepisode=" +
                       std::to_string(trainer->episode()) + "\ntotal_steps=" +
                       std::to_string(trainer->total_steps()) + "\n");
        log_error(failure.what());
        return 3;
    }
    metrics.flush();
    save_checkpoint(trainer->to_checkpoint(), (fs::path(out_dir) / "checkpoint.ckpt").string());
    log_info("wrote " + (fs::path(out_dir) / "checkpoint.ckpt").string());
    return 0;
}

int cmd_eval(const std::string& policy_path, const std::string& condition_text, int episodes,
             std::uint64_t seed, const std::string& out_dir) {
    if (episodes < 1) throw ConfigError("--episodes must be >= 1");
    const auto loaded = train::load_policy(load_checkpoint(policy_path));
    EvalCondition condition = parse_condition(condition_text);

    eval::EvalSettings settings;
    settings.episodes = episodes;
    settings.seed = seed;
    settings.source = condition.source;
    const agents::FaultInjector* injector =
        condition.injector ? &*condition.injector : nullptr;
    const auto result = eval::run_evaluation(loaded.cfg, loaded.agents, injector, settings);

    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "aggregate.csv",
               eval::aggregate_csv_header() + "\n" +
                   eval::aggregate_csv_row(loaded.cfg.mode, condition.name, episodes, result) + "\n");
    write_file(fs::path(out_dir) / "episodes.csv", eval::episodes_csv(result));
    if (loaded.agents.temporal) {
        write_file(fs::path(out_dir) / "confusion.csv", eval::confusion_csv(result.confusion));
        if (result.confusion.total() > 0)
            write_file(fs::path(out_dir) / "detection.csv", eval::detection_csv(result.confusion));
        std::string samples = "err_obs_pos,err_obs_vel,err_pred_pos,err_pred_vel\n";
        for (const auto& s : result.recovery) {
            samples += fmt_g17(s.err_observed[0]) + "," + fmt_g17(s.err_observed[1]) + "," +
                       fmt_g17(s.err_predicted[0]) + "," + fmt_g17(s.err_predicted[1]) + "\n";
        }
        write_file(fs::path(out_dir) / "recovery_samples.csv", samples);
        write_file(fs::path(out_dir) / "recovery.csv",
                   eval::recovery_csv(eval::recovery_stats(result.recovery)));
    }
    log_info("evaluated " + std::to_string(episodes) + " episodes: mean reward " +
             fmt_g17(result.mean_reward) + ", collision rate " + fmt_g17(result.collision_rate));
    return 0;
}

int cmd_report(const std::string& run_dir) {
    if (!fs::is_directory(run_dir)) throw ConfigError("'" + run_dir + "' is not a directory");
    eval::ConfusionMatrix confusion;
    std::vector<eval::RecoverySample> samples;
    bool any = false;
    std::vector<fs::path> paths;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir))
        if (entry.is_regular_file()) paths.push_back(entry.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& path : paths) {
        if (path.filename() == "episodes.csv") {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);  // header
            const auto header = split_csv_line(line);
            int tp_col = -1;
            for (std::size_t c = 0; c < header.size(); ++c)
                if (header[c] == "tp") tp_col = static_cast<int>(c);
            if (tp_col < 0) continue;
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto cells = split_csv_line(line);
                confusion.tp += std::stoll(cells.at(static_cast<std::size_t>(tp_col)));
                confusion.fn += std::stoll(cells.at(static_cast<std::size_t>(tp_col) + 1));
                confusion.fp += std::stoll(cells.at(static_cast<std::size_t>(tp_col) + 2));
                confusion.tn += std::stoll(cells.at(static_cast<std::size_t>(tp_col) + 3));
                any = true;
            }
        } else if (path.filename() == "recovery_samples.csv") {
            std::ifstream in(path);
            std::string line;
            std::getline(in, line);  // header
            while (std::getline(in, line)) {
                if (line.empty()) continue;
                const auto cells = split_csv_line(line);
                eval::RecoverySample s;
                s.err_observed = {std::stod(cells.at(0)), std::stod(cells.at(1))};
                s.err_predicted = {std::stod(cells.at(2)), std::stod(cells.at(3))};
                samples.push_back(s);
                any = true;
            }
        }
    }
    if (!any) {
        log_error("no evaluation data found under '" + run_dir + "'");
        return 2;
    }
    if (confusion.total() > 0) {
        write_file(fs::path(run_dir) / "report_confusion.csv", eval::confusion_csv(confusion));
        write_file(fs::path(run_dir) / "report_detection.csv", eval::detection_csv(confusion));
    }
    write_file(fs::path(run_dir) / "report_recovery.csv",
               eval::recovery_csv(eval::recovery_stats(samples)));
    log_info("report written to '" + run_dir + "'");
    return 0;
}

int cmd_replay(const std::string& policy_path, const std::string& condition_text, int episodes,
               std::uint64_t seed, const std::string& out_dir) {
    if (episodes < 1) throw ConfigError("--episodes must be >= 1");
    const auto loaded = train::load_policy(load_checkpoint(policy_path));
    EvalCondition condition = parse_condition(condition_text);
    eval::EvalSettings settings;
    settings.episodes = episodes;
    settings.seed = seed;
    settings.source = condition.source;
    settings.per_step_trace = true;
    const auto result = eval::run_evaluation(
        loaded.cfg, loaded.agents, condition.injector ? &*condition.injector : nullptr, settings);
    fs::create_directories(out_dir);
    write_file(fs::path(out_dir) / "trace.csv",
               eval::trace_csv(result.trace, loaded.cfg.env.n_vehicles));
    log_info("trace written to '" + (fs::path(out_dir) / "trace.csv").string() + "'");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"observation-fault-tolerant merging lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir = "run", resume_path;
    std::vector<std::string> overrides;
    std::string train_seed, train_mode, train_fault, train_episodes;
    std::string policy_path, condition = "none", run_dir;
    int episodes = 100;
    std::uint64_t seed = 1;

    auto* train = app.add_subcommand("train", "train policies and/or the fault injector");
    train->add_option("--config", config_path, "key=value config file");
    train->add_option("--set", overrides, "override a config key, e.g. --set episodes=500");
    train->add_option("--seed", train_seed, "master seed (shorthand for --set seed=N)");
    train->add_option("--mode", train_mode, "policy variant (shorthand for --set mode=...)");
    train->add_option("--fault", train_fault, "fault source (shorthand for --set fault=...)");
    train->add_option("--episodes", train_episodes,
                      "episode count (shorthand for --set episodes=N)");
    train->add_option("--out", out_dir, "output directory");
    train->add_option("--resume", resume_path, "continue from a training checkpoint");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a frozen policy checkpoint");
    eval_cmd->add_option("--policy", policy_path, "policy checkpoint")->required();
    eval_cmd->add_option("--fault", condition, "none | random | <injector checkpoint path>");
    eval_cmd->add_option("--episodes", episodes, "evaluation episodes");
    eval_cmd->add_option("--seed", seed, "evaluation seed");
    eval_cmd->add_option("--out", out_dir, "output directory");

    auto* report = app.add_subcommand("report", "aggregate detection/recovery reports");
    report->add_option("--run", run_dir, "directory holding evaluation outputs")->required();

    auto* replay = app.add_subcommand("replay", "dump a per-step trajectory table");
    replay->add_option("--policy", policy_path, "policy checkpoint")->required();
    replay->add_option("--fault", condition, "none | random | <injector checkpoint path>");
    replay->add_option("--episodes", episodes, "episodes to trace");
    replay->add_option("--seed", seed, "replay seed");
    replay->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            if (!train_seed.empty()) overrides.push_back("seed=" + train_seed);
            if (!train_mode.empty()) overrides.push_back("mode=" + train_mode);
            if (!train_fault.empty()) overrides.push_back("fault=" + train_fault);
            if (!train_episodes.empty()) overrides.push_back("episodes=" + train_episodes);
            return cmd_train(config_path, overrides, out_dir, resume_path);
        }
        if (eval_cmd->parsed()) return cmd_eval(policy_path, condition, episodes, seed, out_dir);
        if (report->parsed()) return cmd_report(run_dir);
        if (replay->parsed()) return cmd_replay(policy_path, condition, episodes, seed, out_dir);
    } catch (const ConfigError& e) {
        log_error(e.what());
        return 2;
    } catch (const std::exception& e) {
        log_error(e.what());
        return 3;
    }
    return 0;
}
