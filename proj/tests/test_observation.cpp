#include <doctest.h>

#include <cmath>
#include <map>

#include "oft/errors.hpp"
#include "oft/observation.hpp"
#include "test_helpers.hpp"

using namespace oft;
using namespace oft::obs;

namespace {

std::vector<sim::VehicleState> canonical_states() {
    std::vector<sim::VehicleState> states(4);
    states[0] = {true, 100.0, 20.0, sim::Lane::main};
    states[1] = {true, 130.0, 25.0, sim::Lane::main};
    states[2] = {true, 90.0, 18.0, sim::Lane::ramp};
    states[3] = {true, 110.0, 22.0, sim::Lane::ramp};
    return states;
}

}  // namespace

TEST_CASE("build_observation lays out ego and relative neighbor blocks") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    const auto nbrs = sim::neighbors(states, 0, road);
    const Obs o = build_observation(states, 0, nbrs, road);
    CHECK(o.size() == 20);

    // ego block holds absolute values
    CHECK(o[0] == 1.0);
    CHECK(o[1] == 100.0);
    CHECK(o[2] == 20.0);
    CHECK(o[3] == 0.0);
    // front neighbor: vehicle at 130 m, 25 m/s, same lane
    CHECK(o[4] == 1.0);
    CHECK(o[5] == 30.0);
    CHECK(o[6] == 5.0);
    CHECK(o[7] == 0.0);
    // rear slot absent -> zero block
    for (int d = 0; d < 4; ++d) CHECK(o[8 + d] == 0.0);
    // side front: ramp vehicle at 110
    CHECK(o[12] == 1.0);
    CHECK(o[13] == 10.0);
    CHECK(o[14] == 2.0);
    CHECK(o[15] == 1.0);  // ramp minus main
}

TEST_CASE("apply_fault adds the clipped perturbation to the two open entries") {
    Eigen::VectorXd block(4);
    block << 1.0, 10.0, 2.0, 0.0;
    const Eigen::Vector2d eps(2.0, 2.0);

    Eigen::VectorXd b1 = block;
    apply_fault(b1, {3.0, -0.5}, eps);
    CHECK(b1[1] == doctest::Approx(12.0).epsilon(1e-15));
    CHECK(b1[2] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(b1[0] == 1.0);
    CHECK(b1[3] == 0.0);

    Eigen::VectorXd b2 = block;
    apply_fault(b2, {0.0, 0.0}, eps);
    CHECK((b2.array() == block.array()).all());

    Eigen::VectorXd b3 = block;
    apply_fault(b3, {-50.0, 50.0}, eps);
    CHECK(b3[1] == doctest::Approx(8.0));
    CHECK(b3[2] == doctest::Approx(4.0));
}

TEST_CASE("perturbation stays inside the infinity-norm ball on random draws") {
    Rng rng(11);
    for (int trial = 0; trial < 20000; ++trial) {
        Eigen::VectorXd block(4);
        block << 1.0, rng.uniform(-200, 200), rng.uniform(-30, 30), rng.uniform(-1, 1);
        const Eigen::VectorXd original = block;
        const Eigen::Vector2d eps(rng.uniform(1e-3, 20.0), rng.uniform(1e-3, 10.0));
        const Eigen::Vector2d b(rng.uniform(-50, 50), rng.uniform(-50, 50));
        apply_fault(block, b, eps);
        CHECK(std::abs(block[1] - original[1]) <= eps[0]);
        CHECK(std::abs(block[2] - original[2]) <= eps[1]);
        CHECK(block[0] == original[0]);
        CHECK(block[3] == original[3]);
    }
}

TEST_CASE("perturb_observations touches exactly one block of one vehicle") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    const auto truth = build_all_observations(states, road);

    FaultConfig fault;
    fault.enabled = true;
    fault.recipient = 0;
    fault.target_slot = 3;  // side rear: vehicle index 2
    fault.t_on = 0;
    fault.t_off = 10;
    PerturbationBudget budget;

    const auto hat = perturb_observations(truth, fault, true, {5.0, -1.0}, budget);
    int differing_entries = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        for (int d = 0; d < 20; ++d)
            if (hat[i][d] != truth[i][d]) ++differing_entries;
    CHECK(differing_entries == 2);
    CHECK(hat[0][4 * 4 + 1] == doctest::Approx(truth[0][4 * 4 + 1] + 5.0));
    CHECK(hat[0][4 * 4 + 2] == doctest::Approx(truth[0][4 * 4 + 2] - 1.0));
    // ego block identical
    for (int d = 0; d < 4; ++d) CHECK(hat[0][d] == truth[0][d]);

    SUBCASE("inactive fault is the identity") {
        const auto same = perturb_observations(truth, fault, false, {5.0, -1.0}, budget);
        for (std::size_t i = 0; i < truth.size(); ++i)
            CHECK((same[i].array() == truth[i].array()).all());
    }
    SUBCASE("purity: identical inputs give identical outputs") {
        const auto again = perturb_observations(truth, fault, true, {5.0, -1.0}, budget);
        for (std::size_t i = 0; i < truth.size(); ++i)
            CHECK((again[i].array() == hat[i].array()).all());
    }
    SUBCASE("absent target slot is a contract violation") {
        FaultConfig bad = fault;
        bad.recipient = 0;
        bad.target_slot = 1;  // rear slot of vehicle 0 is absent
        CHECK_THROWS_AS(perturb_observations(truth, bad, true, {1.0, 1.0}, budget), ContractError);
    }
}

TEST_CASE("sample_fault_config avoids absent slots and is deterministic") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    FaultSchedule schedule;
    schedule.fault_prob = 1.0;

    Rng rng1(3), rng2(3);
    const auto a = sample_fault_config(rng1, states, road, schedule, 30);
    const auto b = sample_fault_config(rng2, states, road, schedule, 30);
    CHECK(a.enabled);
    CHECK(a.recipient == b.recipient);
    CHECK(a.target_slot == b.target_slot);
    CHECK(a.t_on == b.t_on);
    CHECK(a.t_off == b.t_off);

    Rng rng(17);
    for (int trial = 0; trial < 500; ++trial) {
        const auto fc = sample_fault_config(rng, states, road, schedule, 30);
        REQUIRE(fc.enabled);
        const auto nbrs = sim::neighbors(states, fc.recipient, road);
        CHECK(nbrs[static_cast<std::size_t>(fc.target_slot)] >= 0);  // never an absent slot
        CHECK(fc.t_on >= 2);
        CHECK(fc.t_off - fc.t_on >= 3);
        if (fc.recipient == 0) CHECK(fc.target_slot != 1);
    }
}

TEST_CASE("fault recipient/slot frequencies match the two-stage model (chi-square)") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    FaultSchedule schedule;
    schedule.fault_prob = 1.0;
    Rng rng(1234);

    // Recipient uniform over vehicles with neighbors; slot uniform over that
    // recipient's present slots. Expected cell mass is the product.
    std::map<std::pair<int, int>, double> expected_p;
    const int n = static_cast<int>(states.size());
    for (int i = 0; i < n; ++i) {
        const auto nbrs = sim::neighbors(states, i, road);
        std::vector<int> present;
        for (int slot = 0; slot < sim::kNeighborSlots; ++slot)
            if (nbrs[static_cast<std::size_t>(slot)] >= 0) present.push_back(slot);
        for (int slot : present)
            expected_p[{i, slot}] = 1.0 / n / static_cast<double>(present.size());
    }

    const int trials = 100000;
    std::map<std::pair<int, int>, int> counts;
    for (int t = 0; t < trials; ++t) {
        const auto fc = sample_fault_config(rng, states, road, schedule, 30);
        ++counts[{fc.recipient, fc.target_slot}];
    }
    for (const auto& [key, count] : counts) CHECK(expected_p.count(key) == 1);

    double chi2 = 0.0;
    for (const auto& [key, p] : expected_p) {
        const double expected = trials * p;
        const double observed = counts.count(key) ? counts[key] : 0.0;
        chi2 += (observed - expected) * (observed - expected) / expected;
    }
    const double dof = static_cast<double>(expected_p.size()) - 1.0;
    CHECK(chi2 < dof + 3.0 * std::sqrt(2.0 * dof));
}

TEST_CASE("no vehicle with neighbors yields an inactive config") {
    std::vector<sim::VehicleState> lone(1);
    lone[0] = {true, 50.0, 20.0, sim::Lane::main};
    FaultSchedule schedule;
    schedule.fault_prob = 1.0;
    Rng rng(1);
    const auto fc = sample_fault_config(rng, lone, sim::RoadGeometry{}, schedule, 30);
    CHECK_FALSE(fc.enabled);
}

TEST_CASE("indicators are one-hot at the configured recipient and slot") {
    FaultConfig fault;
    fault.enabled = true;
    fault.recipient = 0;
    fault.target_slot = 3;
    const auto ind = encode_indicators(fault, 4, 4);
    CHECK(ind.recipient_onehot.sum() == 1.0);
    CHECK(ind.target_onehot.sum() == 1.0);
    CHECK(ind.recipient_onehot[0] == 1.0);
    CHECK(ind.target_onehot[3] == 1.0);

    fault.recipient = 2;
    fault.target_slot = 0;
    const auto ind2 = encode_indicators(fault, 4, 4);
    CHECK(ind2.recipient_onehot[2] == 1.0);
    CHECK(ind2.recipient_onehot.sum() == 1.0);

    FaultConfig unset;
    CHECK_THROWS_AS(encode_indicators(unset, 4, 4), ContractError);
}

TEST_CASE("global input concatenates observations and indicators") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    const auto truth = build_all_observations(states, road);
    FaultConfig fault;
    fault.enabled = true;
    fault.recipient = 0;
    fault.target_slot = 0;
    const auto ind = encode_indicators(fault, 4, 4);
    const auto x = build_global_input(truth, ind);
    CHECK(x.size() == 88);
    for (int i = 0; i < 4; ++i)
        for (int d = 0; d < 20; ++d) CHECK(x[i * 20 + d] == truth[static_cast<std::size_t>(i)][d]);
    CHECK(x[80] == 1.0);
    CHECK(x[84] == 1.0);

    SUBCASE("zero observations leave only the two indicator ones") {
        std::vector<Obs> zeros(4, Obs::Zero(20));
        const auto xz = build_global_input(zeros, ind);
        CHECK(xz.sum() == 2.0);
        CHECK(xz[80] == 1.0);
        CHECK(xz[84] == 1.0);
    }
}

TEST_CASE("scaling touches positions and velocities only") {
    const auto states = canonical_states();
    sim::RoadGeometry road;
    const auto o = build_observation(states, 0, sim::neighbors(states, 0, road), road);
    ObsScale scale;
    const auto s = scale_observation(o, scale);
    for (int block = 0; block < 5; ++block) {
        CHECK(s[block * 4 + 0] == o[block * 4 + 0]);
        CHECK(s[block * 4 + 1] == doctest::Approx(o[block * 4 + 1] * 0.01).epsilon(1e-15));
        CHECK(s[block * 4 + 2] == doctest::Approx(o[block * 4 + 2] / 30.0).epsilon(1e-15));
        CHECK(s[block * 4 + 3] == o[block * 4 + 3]);
    }
}
