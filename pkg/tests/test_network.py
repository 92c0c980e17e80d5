import numpy as np
import pytest
from hypothesis import given, strategies as st

from relaycap.network import (
    Network, Relay, RelayClass, compute_weights, load_relays_csv, sample_paths,
    sample_user_count, synthetic_network, write_relays_csv,
)


def net_of(guards, middles, exits):
    classes = ["guard"] * len(guards) + ["middle"] * len(middles) + ["exit"] * len(exits)
    return Network.from_arrays(classes, list(guards) + list(middles) + list(exits))


def test_equal_exits_split_evenly():
    net = Network.from_arrays(["guard", "middle", "exit", "exit"], [1, 1, 7, 7])
    cw = compute_weights(net.capacities, net)
    assert cw.weight_exit[2:] == pytest.approx([0.5, 0.5])


def test_middle_multiplier_formula():
    # Guards total 300, middles total 100: W_mg = 1/3 and the 30 kb/s guard gets 0.05.
    net = net_of([30, 270], [100], [10])
    cw = compute_weights(net.capacities, net)
    assert cw.w_mg == pytest.approx(1 / 3)
    assert cw.weight_middle[0] == pytest.approx(0.05)


def test_middle_multiplier_clamped_at_zero():
    net = net_of([100], [300], [10])
    cw = compute_weights(net.capacities, net)
    assert cw.w_mg == 0.0
    assert cw.weight_middle[0] == 0.0


def test_degenerate_consensus_rejected():
    net = net_of([10], [10], [10])
    with pytest.raises(ValueError, match="exit"):
        compute_weights([10, 10, 0], net)


@given(st.lists(st.floats(0.1, 1e5), min_size=6, max_size=15))
def test_weight_vectors_normalised_on_legal_support(caps):
    k = len(caps) // 3
    net = net_of(caps[:k], caps[k:2 * k], caps[2 * k:])
    cw = compute_weights(net.capacities, net)
    for vec, support in ((cw.weight_exit, net.exits), (cw.weight_guard, net.guards),
                         (cw.weight_middle, net.guards | net.middles)):
        assert vec.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(vec >= 0)
        assert np.all(vec[~support] == 0)


def test_effective_weight_is_inclusion_probability(tiny_network):
    cw = compute_weights(tiny_network.capacities, tiny_network)
    paths = sample_paths(200_000, cw, np.random.default_rng(0))
    freq = np.bincount(paths.relay_matrix().ravel(), minlength=tiny_network.n) / len(paths)
    p = cw.effective_weight
    band = 4 * np.sqrt(p * (1 - p) / len(paths))
    assert np.all(np.abs(freq - p) <= band)


def test_exit_frequencies_within_binomial_band(desk_network):
    cw = compute_weights(desk_network.capacities, desk_network)
    k = 100_000
    paths = sample_paths(k, cw, np.random.default_rng(5))
    freq = np.bincount(paths.exit, minlength=desk_network.n) / k
    p = cw.weight_exit
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / k) + 1e-12)


def test_paths_are_distinct_and_typed(desk_network):
    cw = compute_weights(desk_network.capacities, desk_network)
    paths = sample_paths(5000, cw, np.random.default_rng(1))
    assert np.all(paths.guard != paths.middle)
    assert desk_network.guards[paths.guard].all()
    assert (desk_network.guards | desk_network.middles)[paths.middle].all()
    assert desk_network.exits[paths.exit].all()


def test_zero_count_and_forced_triple():
    net = net_of([5], [5], [5])
    cw = compute_weights(net.capacities, net)
    assert len(sample_paths(0, cw, np.random.default_rng(0))) == 0
    paths = list(sample_paths(50, cw, np.random.default_rng(0)))
    assert {(p.guard_id, p.middle_id, p.exit_id) for p in paths} == {(0, 1, 2)}


def test_sampling_is_deterministic(desk_network):
    cw = compute_weights(desk_network.capacities, desk_network)
    a = sample_paths(300, cw, np.random.default_rng(9), underloaded=True)
    b = sample_paths(300, cw, np.random.default_rng(9), underloaded=True)
    assert list(a) == list(b)


def test_underloaded_caps_in_range(desk_network):
    cw = compute_weights(desk_network.capacities, desk_network)
    paths = sample_paths(1000, cw, np.random.default_rng(2), underloaded=True, cap_range=(64, 144))
    assert paths.caps.min() >= 64 and paths.caps.max() <= 144


def test_unresolvable_collision_fails():
    # A single guard that is also the only middle-position candidate.
    net = Network.from_arrays(["guard", "exit"], [10, 1])
    cw = compute_weights(net.capacities, net)
    with pytest.raises(RuntimeError, match="only relay"):
        sample_paths(3, cw, np.random.default_rng(0))


def test_user_count():
    assert sample_user_count(0, np.random.default_rng(0)) == 0
    rng = np.random.default_rng(3)
    draws = [sample_user_count(1e4, rng) for _ in range(10_000)]
    # Mean of 10^4 draws has sd 1; a 300 band is the loose bound from the CLT.
    assert abs(np.mean(draws) - 1e4) <= 300
    r1, r2 = np.random.default_rng(4), np.random.default_rng(4)
    assert [sample_user_count(50, r1) for _ in range(20)] == [sample_user_count(50, r2) for _ in range(20)]
    with pytest.raises(ValueError):
        sample_user_count(-1, rng)


def test_synthetic_population_keeps_class_shares():
    net = synthetic_network({"guard": 24, "middle": 22, "exit": 14}, np.random.default_rng(0))
    c = net.capacities
    totals = np.array([c[net.guards].sum(), c[net.middles].sum(), c[net.exits].sum()])
    assert totals / totals.sum() == pytest.approx(np.array([42.6, 6.7, 17.7]) / 67.0)


def test_relay_validation():
    with pytest.raises(ValueError):
        Relay(0, RelayClass.GUARD, 0.0)
    with pytest.raises(ValueError):
        Network((Relay(1, RelayClass.GUARD, 1.0),))
    with pytest.raises(ValueError, match="expected one of"):
        RelayClass.parse("bridge")


def test_csv_round_trip(tmp_path, desk_network):
    path = tmp_path / "relays.csv"
    write_relays_csv(desk_network, path)
    back = load_relays_csv(path)
    assert back.class_labels() == desk_network.class_labels()
    assert np.array_equal(back.capacities, desk_network.capacities)


def test_csv_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,class,cap\n0,guard,1\n")
    with pytest.raises(ValueError, match="header"):
        load_relays_csv(bad)
    bad.write_text("relay_id,class,capacity_kbps\n0,guard,-3\n")
    with pytest.raises(ValueError, match=":2:"):
        load_relays_csv(bad)
