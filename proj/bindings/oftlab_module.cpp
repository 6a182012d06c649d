#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "oft/checkpoint.hpp"
#include "oft/config.hpp"
#include "oft/eval.hpp"
#include "oft/merge_env.hpp"
#include "oft/observation.hpp"
#include "oft/training.hpp"

namespace py = pybind11;
using namespace oft;

namespace {

RunConfig config_from_text(const std::string& text) { return parse_config_text(text); }

std::array<int, sim::kNeighborSlots> neighbors_of(const std::vector<sim::VehicleState>& states,
                                                  int i, const sim::RoadGeometry& road) {
    return sim::neighbors(states, i, road);
}

py::dict eval_result_dict(const eval::EvalResult& r) {
    py::dict d;
    d["mean_reward"] = r.mean_reward;
    d["collision_rate"] = r.collision_rate;
    d["mean_timesteps"] = r.mean_timesteps ? py::object(py::float_(*r.mean_timesteps))
                                           : py::object(py::none());
    d["tp"] = r.confusion.tp;
    d["fn"] = r.confusion.fn;
    d["fp"] = r.confusion.fp;
    d["tn"] = r.confusion.tn;
    return d;
}

}  // namespace

PYBIND11_MODULE(_oftlab, m) {
    m.doc() = "on-ramp merging lab: simulator, fault model, agents, training and evaluation";

    py::enum_<sim::Lane>(m, "Lane").value("main", sim::Lane::main).value("ramp", sim::Lane::ramp);

    py::class_<sim::RoadGeometry>(m, "RoadGeometry")
        .def(py::init<>())
        .def_readwrite("main_length", &sim::RoadGeometry::main_length)
        .def_readwrite("ramp_length", &sim::RoadGeometry::ramp_length)
        .def_readwrite("merge_point", &sim::RoadGeometry::merge_point)
        .def_readwrite("goal_point", &sim::RoadGeometry::goal_point);

    py::class_<sim::VehicleState>(m, "VehicleState")
        .def(py::init<>())
        .def_readwrite("exists", &sim::VehicleState::exists)
        .def_readwrite("position", &sim::VehicleState::position)
        .def_readwrite("velocity", &sim::VehicleState::velocity)
        .def_readwrite("lane", &sim::VehicleState::lane);

    py::class_<sim::StepOutcome>(m, "StepOutcome")
        .def_readonly("next_states", &sim::StepOutcome::next_states)
        .def_readonly("rewards", &sim::StepOutcome::rewards)
        .def_readonly("collided", &sim::StepOutcome::collided)
        .def_readonly("completed", &sim::StepOutcome::completed)
        .def_readonly("done", &sim::StepOutcome::done);

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("from_text", &config_from_text)
        .def("dump", [](const RunConfig& c) { return dump_config(c); })
        .def("set", [](RunConfig& c, const std::string& k, const std::string& v) {
            apply_override(c, k, v);
        });

    py::class_<sim::MergeEnv>(m, "MergeEnv")
        .def(py::init([](const RunConfig& cfg) { return sim::MergeEnv(cfg.env); }))
        .def("reset", &sim::MergeEnv::reset, py::return_value_policy::copy)
        .def("step", &sim::MergeEnv::step)
        .def("states", &sim::MergeEnv::states, py::return_value_policy::copy)
        .def("step_count", &sim::MergeEnv::step_count);

    m.def("neighbors", &neighbors_of, "nearest-neighbor slots of vehicle i (-1 = absent)");
    m.def("build_observation",
          [](const std::vector<sim::VehicleState>& states, int i, const sim::RoadGeometry& road) {
              return obs::build_observation(states, i, sim::neighbors(states, i, road), road);
          });
    m.def("apply_fault",
          [](Eigen::VectorXd block, const Eigen::Vector2d& b, const Eigen::Vector2d& eps) {
              obs::apply_fault(block, b, eps);
              return block;
          });
    m.def("encode_indicators", [](int recipient, int slot, int n, int m_slots) {
        obs::FaultConfig fc;
        fc.enabled = true;
        fc.recipient = recipient;
        fc.target_slot = slot;
        const auto ind = obs::encode_indicators(fc, n, m_slots);
        return py::make_tuple(ind.recipient_onehot, ind.target_onehot);
    });
    m.def("build_global_input",
          [](const std::vector<Eigen::VectorXd>& truth, int recipient, int slot, int n,
             int m_slots) {
              obs::FaultConfig fc;
              fc.enabled = true;
              fc.recipient = recipient;
              fc.target_slot = slot;
              return obs::build_global_input(truth, obs::encode_indicators(fc, n, m_slots));
          });

    m.def("detection_metrics",
          [](std::int64_t tp, std::int64_t fn, std::int64_t fp, std::int64_t tn) {
              const auto d = eval::detection_metrics({tp, fn, fp, tn});
              py::dict out;
              out["accuracy"] = d.accuracy ? py::object(py::float_(*d.accuracy)) : py::none();
              out["precision"] = d.precision ? py::object(py::float_(*d.precision)) : py::none();
              out["recall"] = d.recall ? py::object(py::float_(*d.recall)) : py::none();
              return out;
          });
    m.def("recovery_percentages",
          [](double orig_mae_pos, double pred_mae_pos, double orig_mse_pos, double pred_mse_pos,
             double orig_mae_vel, double pred_mae_vel, double orig_mse_vel, double pred_mse_vel) {
              auto pct = [](double o, double p) { return 100.0 * (1.0 - p / o); };
              return py::make_tuple(pct(orig_mae_pos, pred_mae_pos), pct(orig_mse_pos, pred_mse_pos),
                                    pct(orig_mae_vel, pred_mae_vel), pct(orig_mse_vel, pred_mse_vel));
          });

    m.def(
        "train",
        [](const RunConfig& cfg, const std::string& checkpoint_path) {
            train::Trainer trainer(cfg);
            const auto rows = trainer.run(cfg.episodes);
            if (!checkpoint_path.empty())
                save_checkpoint(trainer.to_checkpoint(), checkpoint_path);
            py::list out;
            for (const auto& row : rows) {
                py::dict d;
                d["episode"] = row.episode;
                d["mean_return"] = row.mean_return;
                d["collided"] = row.collided;
                d["steps"] = row.steps;
                d["fault_active_steps"] = row.fault_active_steps;
                out.append(d);
            }
            return out;
        },
        py::arg("config"), py::arg("checkpoint_path") = std::string());

    m.def(
        "evaluate",
        [](const std::string& policy_path, const std::string& condition, int episodes,
           std::uint64_t seed) {
            const auto loaded = train::load_policy(load_checkpoint(policy_path));
            eval::EvalSettings settings;
            settings.episodes = episodes;
            settings.seed = seed;
            const agents::FaultInjector* injector = nullptr;
            std::optional<train::LoadedPolicy> other;
            if (condition == "none" || condition == "random") {
                settings.source = parse_fault_source(condition);
            } else {
                other = train::load_policy(load_checkpoint(condition));
                if (!other->injector)
                    throw ConfigError("checkpoint '" + condition + "' holds no fault injector");
                settings.source = FaultSource::adversarial;
                injector = &*other->injector;
            }
            return eval_result_dict(
                eval::run_evaluation(loaded.cfg, loaded.agents, injector, settings));
        },
        py::arg("policy_path"), py::arg("condition") = "none", py::arg("episodes") = 100,
        py::arg("seed") = 0);

    m.attr("OBS_DIM") = obs::kObsDim;
    m.attr("PERTURB_DIM") = obs::kPerturbDim;
    m.attr("NEIGHBOR_SLOTS") = sim::kNeighborSlots;
}
