import numpy as np
import pytest

from relaycap.estimators import EstimatorKind, QuantizationGrid
from relaycap.metrics import ideal_weights
from relaycap.network import Network
from relaycap.simulator import (
    NoiseModel, SimConfig, SimulationError, run_monte_carlo, run_simulation, with_method,
)

SMALL = SimConfig(lambda_s=800, rounds=6, seed=4)


def same_records(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        for name in ("estimate", "m1", "m2", "weight_exit", "weight_guard", "weight_middle",
                     "client_flow_count", "client_throughput", "path_rates"):
            assert np.array_equal(getattr(x, name), getattr(y, name)), name
        assert x.user_count == y.user_count


def test_actual_control_arm(desk_network):
    recs = run_simulation(desk_network, with_method(SMALL, "actual"))
    ideal = ideal_weights(desk_network)
    for r in recs:
        assert np.array_equal(r.estimate, desk_network.capacities)
        assert np.allclose(r.weight_exit, ideal.weight_exit)
        assert np.allclose(r.weight_middle, ideal.weight_middle)


def test_control_arm_equal_per_path_bandwidth_across_exits(desk_network):
    recs = run_simulation(desk_network, SimConfig(lambda_s=5000, rounds=10, method=EstimatorKind.ACTUAL, seed=1))
    e = desk_network.exits
    per_path = np.mean([r.client_throughput[e] / r.client_flow_count[e] for r in recs], axis=0)
    assert per_path.std() / per_path.mean() < 0.02


def test_initial_weights_uniform_within_role(desk_network):
    r0 = run_simulation(desk_network, SMALL)[0]
    for vec, mask in ((r0.weight_exit, desk_network.exits), (r0.weight_guard, desk_network.guards),
                      (r0.weight_middle, desk_network.middles)):
        assert np.allclose(vec[mask], vec[mask][0])


def test_three_relay_closed_form_after_one_round():
    # Every path is (guard, middle, exit); the 100 kb/s exit is the bottleneck.
    net = Network.from_arrays(["guard", "middle", "exit"], [1000.0, 800.0, 100.0])
    recs = run_simulation(net, SimConfig(lambda_s=5000, rounds=1, method=EstimatorKind.DIPROBER_O, seed=1))
    grid = QuantizationGrid.for_capacities(net.capacities, 1.1)
    assert abs(int(grid.bin_index(recs[0].estimate[2])) - int(grid.bin_index(100.0))) <= 1


@pytest.mark.parametrize("method", [k.value for k in EstimatorKind])
def test_every_method_runs_and_keeps_weights_valid(desk_network, method):
    for r in run_simulation(desk_network, with_method(SMALL, method)):
        for vec in (r.weight_exit, r.weight_guard, r.weight_middle):
            assert vec.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(r.estimate > 0)
        assert r.user_count >= 0


def test_deterministic(desk_network):
    same_records(run_simulation(desk_network, SMALL), run_simulation(desk_network, SMALL))


def test_underloaded_and_noise_deterministic(desk_network):
    cfg = SimConfig(lambda_s=500, rounds=4, seed=2, underloaded=True, noise=NoiseModel())
    same_records(run_simulation(desk_network, cfg), run_simulation(desk_network, cfg))


def test_noise_factors_bounded(desk_network):
    clean = run_simulation(desk_network, SMALL)
    noisy = run_simulation(desk_network, SimConfig(lambda_s=800, rounds=1, seed=4, noise=NoiseModel()))
    ratio = noisy[0].m1 / clean[0].m1
    assert np.all((ratio >= 0.7) & (ratio <= 1.3))
    assert not np.allclose(ratio, 1.0)
    with pytest.raises(ValueError):
        NoiseModel(std=0.0)
    with pytest.raises(ValueError):
        NoiseModel(y_min=1.1)


def test_monte_carlo_single_trial_is_plain_run(desk_network):
    mc = run_monte_carlo(desk_network, SMALL, 1)
    same_records(mc.trials[0], run_simulation(desk_network, SMALL))
    assert np.all(mc.variance == 0)


def test_monte_carlo_independent_of_workers(desk_network):
    a = run_monte_carlo(desk_network, SMALL, 4, workers=1)
    b = run_monte_carlo(desk_network, SMALL, 4, workers=3)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.variance, b.variance)
    assert not np.array_equal(a.trials[0][-1].estimate, a.trials[1][-1].estimate)


def test_errors_carry_round_context():
    # One guard and nothing else for the middle position: path sampling cannot finish.
    net = Network.from_arrays(["guard", "exit"], [10.0, 5.0])
    with pytest.raises(SimulationError, match="round 0"):
        run_simulation(net, SimConfig(lambda_s=10, rounds=2))


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(rounds=0)
    with pytest.raises(ValueError):
        SimConfig(cap_range=(5.0, 1.0))
