"""Closed-loop print simulation tests: plant exactness and determinism,
conjugate estimator behavior, controller compensation against the
series-spring oracle, abort certificates, and file round-trips."""

import dataclasses
import json
import math

import numpy as np
import pytest
from conftest import bar_tip_displacement, layered_bar_problem

from semfab import optimize, printsim
from semfab.errors import CalibrationError, PrintCompleteError

E_HI = 120000.0
BOX = (60000.0, E_HI)


@pytest.fixture(scope="module")
def bar():
    """4-layer bar with the displacement bound sized so a gain-0.85 plant
    fails uncontrolled but can be compensated within the box."""
    probe = layered_bar_problem(4, d_max=1.0, young_box=BOX)
    nominal = bar_tip_displacement(probe, np.full(24, E_HI))
    problem = layered_bar_problem(4, d_max=1.08 * nominal, young_box=BOX)
    plan = optimize.inversion_solve(problem)
    assert plan.feasible
    return problem, plan, nominal


def full_print(problem, plan, actuator, seed=7):
    state = printsim.initial_state(problem, plan.values, seed, 1.0)
    while not state.done:
        state = printsim.print_layer(state, actuator)
    return state


# ---------------------------------------------------------------------------
# actuator and print mechanics


def test_identity_plant_achieves_commanded_exactly(bar):
    problem, plan, _ = bar
    state = full_print(problem, plan, printsim.ActuatorModel(gain=1.0))
    assert np.array_equal(state.achieved.values("young"), plan.values)
    assert all(state.achieved.provenance == "achieved")


def test_plain_gain_scales_exactly(bar):
    problem, plan, _ = bar
    state = full_print(problem, plan, printsim.ActuatorModel(gain=0.8))
    assert np.array_equal(state.achieved.values("young"), 0.8 * plan.values)


def test_seeded_noise_replays_bitwise(bar):
    problem, plan, _ = bar
    noisy = printsim.ActuatorModel(gain=0.9, drift_rate=0.01, noise_sd=0.05)
    a = full_print(problem, plan, noisy, seed=42)
    b = full_print(problem, plan, noisy, seed=42)
    c = full_print(problem, plan, noisy, seed=43)
    assert np.array_equal(a.achieved.values("young"), b.achieved.values("young"))
    assert not np.array_equal(
        a.achieved.values("young"), c.achieved.values("young")
    )


def test_achieved_values_hidden_above_frontier(bar):
    problem, plan, _ = bar
    state = printsim.initial_state(problem, plan.values, 7, 1.0)
    state = printsim.print_layer(state, printsim.ActuatorModel(gain=1.0))
    printed = state.printed_elements()
    unprinted = state.unprinted_elements()
    achieved = state.achieved.values("young")
    assert np.all(np.isfinite(achieved[printed]))
    assert np.all(np.isnan(achieved[unprinted]))
    assert all(state.achieved.provenance[printed] == "achieved")


def test_printing_past_the_last_layer_raises(bar):
    problem, plan, _ = bar
    state = full_print(problem, plan, printsim.ActuatorModel(gain=1.0))
    with pytest.raises(PrintCompleteError):
        printsim.print_layer(state, printsim.ActuatorModel(gain=1.0))


def test_actuator_validation():
    with pytest.raises(ValueError):
        printsim.ActuatorModel(gain=0.0)
    with pytest.raises(ValueError):
        printsim.ActuatorModel(gain=1.0, noise_sd=-0.1)
    with pytest.raises(ValueError):
        printsim.SensorModel(noise_sd=-1.0)


def test_observation_requires_a_printed_layer(bar):
    problem, plan, _ = bar
    state = printsim.initial_state(problem, plan.values, 7, 1.0)
    est = printsim.EstimatorState.from_commanded(plan.values)
    with pytest.raises(ValueError):
        printsim.observe_and_update(state, printsim.SensorModel(), est)


# ---------------------------------------------------------------------------
# estimator


def test_exact_sensor_posterior_equals_measurement():
    est = printsim.EstimatorState.from_commanded(np.array([2.0, 3.0]))
    out = est.updated([0], np.log([2.5]), noise_sd=0.0, layer=0)
    assert out.value[0] == pytest.approx(2.5, abs=1e-9)
    assert out.variance[0] == 0.0
    assert out.counts[0] == 1


def test_tie_measurement_keeps_mean_and_shrinks_variance():
    est = printsim.EstimatorState.from_commanded(np.array([3.0]))
    out = est.updated([0], np.array([est.mean_log[0]]), noise_sd=0.05, layer=0)
    assert out.mean_log[0] == est.mean_log[0]
    assert out.value[0] == 3.0  # linear cache untouched by a tie
    assert out.variance[0] < est.variance[0]


def test_untouched_elements_keep_commanded_prior():
    est = printsim.EstimatorState.from_commanded(np.array([2.0, 3.0, 4.0]))
    out = est.updated([1], np.log([3.3]), noise_sd=0.1, layer=0)
    for idx in (0, 2):
        assert out.mean_log[idx] == est.mean_log[idx]
        assert out.variance[idx] == est.variance[idx]
        assert out.value[idx] == est.value[idx]


def test_posterior_variance_nonincreasing_over_measurements():
    est = printsim.EstimatorState.from_commanded(np.array([5.0]))
    variances = [est.variance[0]]
    rng = np.random.default_rng(0)
    for k in range(20):
        m = np.log(5.0) + 0.05 * rng.standard_normal(1)
        est = est.updated([0], m, noise_sd=0.05, layer=k)
        variances.append(est.variance[0])
    assert np.all(np.diff(variances) < 0)


def test_conjugate_update_matches_closed_form():
    est = printsim.EstimatorState.from_commanded(np.array([2.0]), prior_sd=0.3)
    m = math.log(2.6)
    out = est.updated([0], np.array([m]), noise_sd=0.1, layer=0)
    p0, pm = 1 / 0.3**2, 1 / 0.1**2
    expected_mean = (p0 * math.log(2.0) + pm * m) / (p0 + pm)
    assert out.mean_log[0] == pytest.approx(expected_mean, rel=1e-14)
    assert out.variance[0] == pytest.approx(1 / (p0 + pm), rel=1e-14)


def test_replanned_commands_become_the_prior_on_first_measurement():
    est = printsim.EstimatorState.from_commanded(np.array([2.0]))
    m = math.log(3.0)
    out = est.updated(
        [0], np.array([m]), noise_sd=0.1, layer=0,
        prior_log=np.array([math.log(2.5)]), prior_value=np.array([2.5]),
    )
    p0, pm = 1 / est.prior_variance, 1 / 0.1**2
    expected = (p0 * math.log(2.5) + pm * m) / (p0 + pm)
    assert out.mean_log[0] == pytest.approx(expected, rel=1e-14)


def test_estimator_monte_carlo_consistency():
    truth = 5.0
    sd, n = 0.05, 100
    se = sd / math.sqrt(n)
    hits = 0
    seeds = 200
    for s in range(seeds):
        rng = np.random.Generator(
            np.random.Philox(key=np.array([s, 0], dtype=np.uint64))
        )
        est = printsim.EstimatorState.from_commanded(np.array([truth]))
        draws = np.log(truth) + sd * rng.standard_normal(n)
        for k in range(n):
            est = est.updated([0], draws[k:k + 1], noise_sd=sd, layer=k)
        hits += abs(est.mean_log[0] - np.log(truth)) <= 3 * se
    assert hits / seeds >= 0.99


# ---------------------------------------------------------------------------
# closed loop


def test_zero_drift_keeps_plan_with_zero_control_solves(bar):
    problem, plan, _ = bar
    report = printsim.run_print(
        problem, plan, printsim.ActuatorModel(gain=1.0),
        printsim.SensorModel(noise_sd=0.0), printsim.ControlPolicy(),
        seed=7, layer_height=1.0,
    )
    assert report.outcome == "success"
    assert np.array_equal(report.commanded.values("young"), plan.values)
    assert all(rec.strategy == "warm_start" for rec in report.history)
    assert all(rec.fem_solves == 0 for rec in report.history)


def test_control_disabled_identity_plant_keeps_plan_exactly(bar):
    problem, plan, _ = bar
    report = printsim.run_print(
        problem, plan, printsim.ActuatorModel(gain=1.0),
        printsim.SensorModel(noise_sd=0.0),
        printsim.ControlPolicy(control_enabled=False),
        seed=7, layer_height=1.0,
    )
    assert report.outcome == "success"
    assert np.array_equal(report.commanded.values("young"), plan.values)
    assert all(rec.strategy == "none" for rec in report.history)


def test_uncontrolled_degradation_fails_final_verification(bar):
    problem, plan, nominal = bar
    report = printsim.run_print(
        problem, plan, printsim.ActuatorModel(gain=0.85),
        printsim.SensorModel(noise_sd=0.0),
        printsim.ControlPolicy(control_enabled=False),
        seed=7, layer_height=1.0,
    )
    assert report.outcome == "spec_fail"
    tip = next(v for v in report.verdicts if v.name == "tip")
    assert not tip.passed
    assert tip.measured == pytest.approx(nominal / 0.85, rel=1e-9)


def test_controlled_degradation_compensates_and_passes(bar):
    problem, plan, nominal = bar
    actuator = printsim.ActuatorModel(gain=0.85)
    cmd = np.full(6, 100.0)
    calibrated = printsim.calibrate_actuator(
        [(cmd, actuator.apply(cmd, layer, seed=123)) for layer in range(3)]
    )
    report = printsim.run_print(
        problem, plan, actuator, printsim.SensorModel(noise_sd=0.0),
        printsim.ControlPolicy(plant_model=calibrated),
        seed=7, layer_height=1.0,
    )
    assert report.outcome == "success"
    tip = next(v for v in report.verdicts if v.name == "tip")
    assert tip.passed
    # only the first layer printed soft; compensation is visible as raised
    # commands for everything above it
    assert report.history[0].mean_commanded > plan.values.mean()
    bound = next(p for p in problem.spec.properties if p.name == "tip").bound
    assert tip.measured <= bound
    assert tip.measured > nominal  # layer 0 remains degraded


def test_same_seed_reports_are_bitwise_identical(bar):
    problem, plan, _ = bar
    actuator = printsim.ActuatorModel(gain=0.9, noise_sd=0.02)
    kwargs = dict(
        actuator=actuator,
        sensor=printsim.SensorModel(noise_sd=0.01),
        policy=printsim.ControlPolicy(strategy="full"),
        layer_height=1.0,
    )
    a = printsim.run_print(problem, plan, seed=11, **kwargs)
    b = printsim.run_print(problem, plan, seed=11, **kwargs)
    c = printsim.run_print(problem, plan, seed=12, **kwargs)
    assert printsim.report_to_dict(a) == printsim.report_to_dict(b)
    assert printsim.report_to_dict(a) != printsim.report_to_dict(c)


def test_severe_degradation_aborts_with_certificate(bar):
    problem, plan, _ = bar
    report = printsim.run_print(
        problem, plan, printsim.ActuatorModel(gain=0.4),
        printsim.SensorModel(noise_sd=0.0), printsim.ControlPolicy(),
        seed=7, layer_height=1.0,
    )
    assert report.outcome == "aborted"
    assert report.abort is not None
    assert report.abort.layer == 0  # caught right away, not at the end
    assert "tip" in report.abort.violated
    assert report.verdicts == ()
    assert report.history[-1].strategy == "abort"


def test_controller_never_reads_achieved_values(bar):
    problem, plan, _ = bar
    state = printsim.initial_state(problem, plan.values, 7, 1.0)
    est = printsim.EstimatorState.from_commanded(plan.values)
    state = printsim.print_layer(state, printsim.ActuatorModel(gain=0.85))
    est = printsim.observe_and_update(state, printsim.SensorModel(), est)
    state = printsim.apply_estimates(state, est)
    tampered_field = state.achieved.copy()
    tampered_field.young[:] = 1e12  # sentinel the controller must not see
    tampered = dataclasses.replace(state, achieved=tampered_field)
    out_clean = printsim.control_step(state, problem, "full", plan)
    out_tampered = printsim.control_step(tampered, problem, "full", plan)
    assert np.array_equal(
        out_clean.commanded.values("young"),
        out_tampered.commanded.values("young"),
    )


def test_estimated_field_provenance_split(bar):
    problem, plan, _ = bar
    state = printsim.initial_state(problem, plan.values, 7, 1.0)
    est = printsim.EstimatorState.from_commanded(plan.values)
    state = printsim.print_layer(state, printsim.ActuatorModel(gain=0.9))
    est = printsim.observe_and_update(state, printsim.SensorModel(), est)
    state = printsim.apply_estimates(state, est)
    printed = state.printed_elements()
    unprinted = state.unprinted_elements()
    assert all(state.estimated.provenance[printed] == "estimated")
    assert all(state.estimated.provenance[unprinted] == "commanded")
    assert state.estimated.values("young")[printed] == pytest.approx(
        0.9 * plan.values[printed], rel=1e-12
    )


def test_infeasible_plan_is_rejected(bar):
    problem, plan, _ = bar
    bad_plan = dataclasses.replace(plan, feasible=False)
    with pytest.raises(ValueError, match="feasible"):
        printsim.run_print(
            problem, bad_plan, printsim.ActuatorModel(gain=1.0),
            printsim.SensorModel(), printsim.ControlPolicy(),
            seed=7, layer_height=1.0,
        )


# ---------------------------------------------------------------------------
# calibration


def test_calibration_recovers_noiseless_plant_exactly():
    plant = printsim.ActuatorModel(gain=0.9, drift_rate=0.01)
    commanded = np.array([50.0, 80.0, 120.0])
    records = [
        (commanded, commanded * plant.deterministic_factor(layer))
        for layer in range(5)
    ]
    fitted = printsim.calibrate_actuator(records)
    assert fitted.gain == pytest.approx(0.9, abs=1e-9)
    assert fitted.drift_rate == pytest.approx(0.01, abs=1e-9)
    assert fitted.noise_sd == pytest.approx(0.0, abs=1e-9)


def test_calibration_with_noise_recovers_gain():
    plant = printsim.ActuatorModel(gain=0.9, drift_rate=0.01, noise_sd=0.05)
    commanded = np.full(40, 100.0)
    records = [
        (commanded, plant.apply(commanded, layer, seed=5))
        for layer in range(5)
    ]
    fitted = printsim.calibrate_actuator(records)
    assert fitted.gain == pytest.approx(0.9, rel=0.02)
    assert fitted.noise_sd == pytest.approx(0.05, rel=0.35)


def test_calibration_needs_at_least_two_layers():
    with pytest.raises(CalibrationError):
        printsim.calibrate_actuator([(np.array([1.0]), np.array([0.9]))])


def test_calibration_rejects_bad_records():
    a = np.array([1.0, 2.0])
    with pytest.raises(CalibrationError):
        printsim.calibrate_actuator([(a, a[:1]), (a, a)])
    with pytest.raises(CalibrationError):
        printsim.calibrate_actuator([(a, -a), (a, a)])


# ---------------------------------------------------------------------------
# files


def test_scenario_round_trip(tmp_path):
    scenario = printsim.Scenario(
        mesh_path="bar.mesh.json",
        annotation_path="bar.sem.json",
        actuator=printsim.ActuatorModel(gain=0.85, drift_rate=0.0,
                                        noise_sd=0.01),
        sensor=printsim.SensorModel(noise_sd=0.02, availability="all"),
        policy=printsim.ControlPolicy(
            strategy="full", control_enabled=True,
            plant_model=printsim.ActuatorModel(gain=0.85),
        ),
        seed=42,
        layer_height=1.0,
        objective="compliance",
        parameter="young",
    )
    path = tmp_path / "scenario.json"
    printsim.save_scenario(scenario, path)
    loaded = printsim.load_scenario(path)
    assert loaded == scenario
    assert printsim.scenario_to_dict(loaded) == printsim.scenario_to_dict(
        scenario
    )


def test_scenario_rejects_unknown_and_missing_keys():
    doc = printsim.scenario_to_dict(
        printsim.Scenario(
            "m", "a", printsim.ActuatorModel(gain=1.0),
            printsim.SensorModel(), printsim.ControlPolicy(), 1, 1.0,
        )
    )
    with pytest.raises(ValueError, match="unknown"):
        printsim.scenario_from_dict({**doc, "extra": 1})
    missing = dict(doc)
    del missing["seed"]
    with pytest.raises(ValueError, match="seed"):
        printsim.scenario_from_dict(missing)


def test_report_and_csv_serialization(bar, tmp_path):
    problem, plan, _ = bar
    report = printsim.run_print(
        problem, plan, printsim.ActuatorModel(gain=0.4),
        printsim.SensorModel(noise_sd=0.0), printsim.ControlPolicy(),
        seed=7, layer_height=1.0,
    )
    json_path = tmp_path / "report.json"
    printsim.save_report(report, json_path)  # NaNs must serialize as null
    doc = json.loads(json_path.read_text())
    assert doc["outcome"] == "aborted"
    assert doc["abort"]["violated"] == ["tip"]
    assert any(v is None for v in doc["fields"]["achieved"]["young"])

    csv_path = tmp_path / "history.csv"
    printsim.history_to_csv(report, csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ("layer,strategy,objective,max_violation,"
                        "fem_solves,mean_commanded")
    assert len(lines) == 1 + len(report.history)
