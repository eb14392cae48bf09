import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isingcontrol.control import ControllerConfig
from isingcontrol.harness.session import ControlSession
from isingcontrol.ising import (InternalModel, IsingInstance, build_internal_model, compile_ising,
                                compute_bias_vector, horizon_objective, predict_bias, read_instance,
                                write_instance)
from isingcontrol.mesosim import SimConfig, Simulator
from isingcontrol.network import RoadNetwork, assign_signal_groups, compute_eta, generate_lattice

from conftest import star_network


def all_states(n):
    return np.array(list(itertools.product([-1, 1], repeat=n)), dtype=float)


def random_stats(net, rng, scale=0.5):
    R = net.n_roads
    return SimpleNamespace(a0=scale * rng.random(R), a1=scale * rng.random(R),
                           o_g=scale * rng.random(), o_r=0.0)


def reference_model(net, stats, half=True):
    """Per-road loop evaluation of dx/dt = A sigma + b."""
    n = net.n_controlled
    A, b = np.zeros((n, n)), np.zeros(n)
    f = 0.5 if half else 1.0
    R = net.n_roads
    a0 = np.broadcast_to(stats.a0, (R,))
    a1 = np.broadcast_to(stats.a1, (R,))
    og = np.broadcast_to(stats.o_g, (R,))
    orr = np.broadcast_to(stats.o_r, (R,))
    for k, r in enumerate(net.roads):
        i = net.control_index[r.dst]
        if i < 0:
            continue
        j = net.control_index[r.src]
        A[i, i] -= f * r.eta * (og[k] - orr[k])
        if j >= 0:
            A[i, j] += f * r.eta * r.sign * (a0[k] - a1[k])
        b[i] += f * r.eta * r.sign * ((a0[k] + a1[k]) - (og[k] + orr[k]))
    return A, b


def rollout_cost(A, b, tau, Q, x0, plan):
    x = np.array(x0, float)
    total = 0.0
    for sigma in plan:
        x = x + tau * (A @ sigma) + tau * b
        total += float(np.sum(Q * x * x))
    return total


def tee_net(n_ref=1.0, length=100.0):
    net = star_network([0, 180, 90], length=length)
    return compute_eta(assign_signal_groups(RoadNetwork(net.intersections, net.roads, 100.0, n_ref)))


def test_zero_flow_freezes_bias(lattice3, rng):
    R = lattice3.n_roads
    m = build_internal_model(lattice3, SimpleNamespace(a0=np.zeros(R), a1=np.zeros(R), o_g=0.0, o_r=0.0))
    assert not m.A.any() and not m.b.any()
    x0 = rng.normal(size=lattice3.n_controlled)
    np.testing.assert_array_equal(predict_bias(m, x0, np.ones((1, lattice3.n_controlled)))[0], x0)


def test_single_road_hand_values():
    net = tee_net()
    road = net.road_index[1, 0]  # the east approach: s=+1, c=1, eta=1
    assert (net.roads[road].sign, net.roads[road].eta) == (1, 1.0)
    og = np.zeros(net.n_roads)
    og[road] = 0.5
    stats = SimpleNamespace(a0=np.zeros(net.n_roads), a1=np.zeros(net.n_roads), o_g=og, o_r=0.0)
    literal = build_internal_model(net, stats, convention="doubled")
    assert literal.A[0, 0] == pytest.approx(-0.5)
    assert literal.b[0] == pytest.approx(-0.5)
    halved = build_internal_model(net, stats)
    assert halved.A[0, 0] == pytest.approx(-0.25)
    assert halved.b[0] == pytest.approx(-0.25)


@pytest.mark.parametrize("convention,half", [("consistent", True), ("doubled", False)])
def test_model_matches_loop_reference(lattice5, rng, convention, half):
    stats = random_stats(lattice5, rng)
    m = build_internal_model(lattice5, stats, tau=45, convention=convention)
    A, b = reference_model(lattice5, stats, half)
    np.testing.assert_allclose(m.A, A, atol=1e-15)
    np.testing.assert_allclose(m.b, b, atol=1e-15)
    np.testing.assert_allclose(m.A_tilde, 45 * A)
    np.testing.assert_allclose(m.b_tilde, 45 * b)


def test_model_structure(lattice5, rng):
    m = build_internal_model(lattice5, random_stats(lattice5, rng))
    assert np.all(np.diag(m.A) <= 0)
    ids = lattice5.controlled
    for a, c in zip(*np.nonzero(m.A)):
        if a != c:
            assert (ids[c], ids[a]) in lattice5.road_index


def test_model_argument_validation(lattice3, rng):
    stats = random_stats(lattice3, rng)
    n = lattice3.n_controlled
    for kw in ({"tau": 0}, {"k_h": 0}, {"Q": -np.ones(n)}, {"Q": np.ones(n + 1)},
               {"Q": np.ones((n, n))}, {"convention": "other"}):
        with pytest.raises(ValueError):
            build_internal_model(lattice3, stats, **kw)
    m = build_internal_model(lattice3, stats, Q=np.diag(np.arange(1.0, n + 1)))
    np.testing.assert_array_equal(m.Q, np.arange(1.0, n + 1))


def test_prediction_beats_persistence_in_simulation(lattice5):
    """One-cycle predictions under local control beat 'nothing changes' and the un-halved rates."""
    cfg = SimConfig(generation_rate=1.25, duration=1800, seed=1)
    sim = Simulator(lattice5, cfg)
    session = ControlSession(lattice5, ControllerConfig("local"), cfg.saturation_flow, routes=sim.routes)
    exited = np.zeros(lattice5.n_roads)
    errors = {"consistent": [], "doubled": [], "persist": []}
    pending = None
    for t in range(cfg.duration):
        if t % 60 == 0:
            x = compute_bias_vector(lattice5, sim.count)
            if pending is not None:
                for key, guess in pending.items():
                    errors[key].append(np.sum((guess - x) ** 2))
            sigma = session.update(t, sim.count.copy(), exited)
            exited[:] = 0
            pending = {"persist": x}
            for conv in ("consistent", "doubled"):
                model = build_internal_model(lattice5, session.stats, convention=conv)
                pending[conv] = predict_bias(model, x, sigma[None])[0]
        exited += sim.step(sigma).departures
    mse = {k: np.mean(v) for k, v in errors.items()}
    assert mse["consistent"] < mse["persist"]
    assert mse["consistent"] < mse["doubled"]


def _model(A, b, tau=1.0, k_h=1, Q=None):
    n = len(b)
    return InternalModel(np.asarray(A, float), np.asarray(b, float), tau, k_h,
                         np.ones(n) if Q is None else np.asarray(Q, float))


def test_predict_constant_without_dynamics(rng):
    m = _model(np.zeros((3, 3)), np.zeros(3), tau=60, k_h=4)
    x0 = rng.normal(size=3)
    xs = predict_bias(m, x0, rng.choice([-1, 1], (4, 3)))
    np.testing.assert_array_equal(xs, np.tile(x0, (4, 1)))


def test_predict_single_step(rng):
    A, b = rng.normal(size=(3, 3)), rng.normal(size=3)
    m = _model(A, b, tau=30)
    x0, s = rng.normal(size=3), np.array([1, -1, 1])
    np.testing.assert_allclose(predict_bias(m, x0, s[None])[0], x0 + 30 * A @ s + 30 * b, rtol=1e-14)


def test_predict_three_steps_manual(rng):
    A, b = 0.1 * rng.normal(size=(4, 4)), 0.1 * rng.normal(size=4)
    m = _model(A, b, tau=60, k_h=3)
    x = x0 = rng.normal(size=4)
    plan = rng.choice([-1, 1], (3, 4))
    manual = []
    for k in range(3):
        x = x + 60 * A @ plan[k] + 60 * b
        manual.append(x)
    np.testing.assert_allclose(predict_bias(m, x0, plan), manual, atol=1e-12)
    np.testing.assert_allclose(predict_bias(m, x0, plan.ravel()), manual, atol=1e-12)


def test_predict_shape_errors(rng):
    m = _model(np.zeros((3, 3)), np.zeros(3), k_h=2)
    with pytest.raises(ValueError):
        predict_bias(m, np.zeros(3), np.ones((1, 3)))
    with pytest.raises(ValueError):
        predict_bias(m, np.zeros(4), np.ones((2, 3)))


def test_two_spin_hand_expansion():
    At = np.array([[-0.7, 0.2], [0.4, -1.1]])
    bt = np.array([0.3, -0.2])
    x0 = np.array([1.5, -0.5])
    inst = compile_ising(_model(At, bt), x0)
    c = x0 + bt
    assert inst.J[0, 1] == pytest.approx(2 * (At[0, 0] * At[0, 1] + At[1, 0] * At[1, 1]))
    assert inst.h[0] == pytest.approx(2 * (c[0] * At[0, 0] + c[1] * At[1, 0]))
    assert inst.h[1] == pytest.approx(2 * (c[0] * At[0, 1] + c[1] * At[1, 1]))
    assert inst.offset == pytest.approx(c @ c + np.sum(At ** 2))
    assert inst.J[1, 0] == 0


def test_no_control_authority_gives_constant_energy(rng):
    bt, x0 = rng.normal(size=3), rng.normal(size=3)
    Q = rng.uniform(0.5, 2, 3)
    inst = compile_ising(_model(np.zeros((3, 3)), bt, k_h=3, Q=Q), x0)
    assert not inst.J.any() and not inst.h.any()
    expected = sum(float(np.sum(Q * (x0 + k * bt) ** 2)) for k in (1, 2, 3))
    assert inst.offset == pytest.approx(expected)


def test_exhaustive_equivalence_four_by_two(rng):
    A, b = 0.05 * rng.normal(size=(4, 4)), 0.05 * rng.normal(size=4)
    Q = rng.uniform(0.5, 2, 4)
    m = _model(A, b, tau=60, k_h=2, Q=Q)
    x0 = rng.normal(scale=3, size=4)
    inst = compile_ising(m, x0)
    states = all_states(8)
    energies = inst.energy(states)
    for s, e in zip(states, energies):
        assert abs(e - rollout_cost(A, b, 60, Q, x0, s.reshape(2, 4))) < 1e-9


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 4), k_h=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_energy_equals_objective(n, k_h, seed):
    rng = np.random.default_rng(seed)
    m = _model(rng.normal(size=(n, n)), rng.normal(size=n), tau=rng.uniform(1, 60), k_h=k_h,
               Q=rng.uniform(0.1, 3, n))
    x0 = rng.normal(scale=5, size=n)
    inst = compile_ising(m, x0)
    states = all_states(n * k_h)
    predicted = np.array([horizon_objective(m, x0, s) for s in states])
    np.testing.assert_allclose(inst.energy(states), predicted, rtol=1e-9, atol=1e-9 * max(1, predicted.max()))


def test_coupling_sparsity(lattice5, rng):
    """Spins couple only when their intersections are adjacent or feed a common one."""
    m = build_internal_model(lattice5, random_stats(lattice5, rng), k_h=2)
    inst = compile_ising(m, rng.normal(size=lattice5.n_controlled))
    ids, n = lattice5.controlled, lattice5.n_controlled
    neighbours = {i: {i} | {r.src for r in lattice5.roads if r.dst == i} for i in ids}
    for p, q in zip(*np.nonzero(inst.J)):
        i, j = ids[p % n], ids[q % n]
        shared = any({i, j} <= neighbours[d] for d in ids)
        assert i == j or (j, i) in lattice5.road_index or shared


def test_q_scaling(lattice3, rng):
    stats = random_stats(lattice3, rng)
    x0 = rng.normal(scale=2, size=lattice3.n_controlled)
    base = compile_ising(build_internal_model(lattice3, stats, k_h=2), x0)
    scaled = compile_ising(build_internal_model(lattice3, stats, k_h=2, Q=3.5 * np.ones(lattice3.n_controlled)), x0)
    np.testing.assert_allclose(scaled.J, 3.5 * base.J)
    np.testing.assert_allclose(scaled.h, 3.5 * base.h)
    assert scaled.offset == pytest.approx(3.5 * base.offset)
    states = all_states(base.n_spins)
    e1, e2 = base.energy(states), scaled.energy(states)
    assert np.array_equal(np.flatnonzero(e1 <= e1.min() + 1e-9), np.flatnonzero(e2 <= e2.min() + 1e-9))


def test_compile_is_pure(lattice3, rng):
    m = build_internal_model(lattice3, random_stats(lattice3, rng), k_h=2)
    x0 = rng.normal(size=lattice3.n_controlled)
    a, b = compile_ising(m, x0), compile_ising(m, x0)
    assert np.array_equal(a.J, b.J) and np.array_equal(a.h, b.h) and a.offset == b.offset
    assert a.n_spins == 2 * lattice3.n_controlled


def test_bias_of_balanced_four_way():
    net = compute_eta(assign_signal_groups(RoadNetwork(*(lambda s: (s.intersections, s.roads))(
        star_network([0, 180, 90, 270])), 100.0, 1.0)))
    q = np.zeros(net.n_roads)
    for angle_src, count in ((1, 3), (2, 2), (3, 4), (4, 1)):  # 0, 180 (+1); 90, 270 (-1)
        q[net.road_index[angle_src, 0]] = count
    assert compute_bias_vector(net, q)[0] == 3 + 2 - 4 - 1 == 0


def test_bias_empty_and_sign_flip(lattice3, rng):
    assert not compute_bias_vector(lattice3, np.zeros(lattice3.n_roads)).any()
    q = rng.integers(0, 9, lattice3.n_roads)
    flipped = RoadNetwork(lattice3.intersections,
                          tuple(r if r.dst != 4 else type(r)(r.src, r.dst, r.length, -r.sign, r.coeff, r.eta)
                                for r in lattice3.roads))
    x, y = compute_bias_vector(lattice3, q), compute_bias_vector(flipped, q)
    i = lattice3.control_index[4]
    assert y[i] == -x[i]
    assert np.array_equal(np.delete(x, i), np.delete(y, i))
    with pytest.raises(ValueError):
        compute_bias_vector(lattice3, np.zeros(3))


def test_instance_validation_and_energy(rng):
    with pytest.raises(ValueError):
        IsingInstance(np.tril(np.ones((3, 3))), np.zeros(3))
    with pytest.raises(ValueError):
        IsingInstance(np.zeros((2, 3)), np.zeros(2))
    J = np.triu(rng.normal(size=(5, 5)), 1)
    inst = IsingInstance(J, rng.normal(size=5), 1.25)
    states = all_states(5)
    single = np.array([inst.energy(s) for s in states])
    np.testing.assert_allclose(inst.energy(states), single)
    s = states[7]
    assert inst.energy(s) == pytest.approx(0.5 * s @ inst.symmetric() @ s + inst.h @ s + 1.25)


def test_instance_file_round_trip(tmp_path, rng):
    inst = IsingInstance(np.triu(rng.normal(size=(6, 6)), 1) * (rng.random((6, 6)) < 0.5),
                         rng.normal(size=6) * (rng.random(6) < 0.7), -3.75)
    path = tmp_path / "p.ising"
    write_instance(inst, path)
    back = read_instance(path)
    assert np.array_equal(back.J, inst.J) and np.array_equal(back.h, inst.h)
    assert back.offset == inst.offset
    assert path.read_text().startswith("p ising 6\n")


def test_instance_reader_errors(tmp_path):
    path = tmp_path / "bad.ising"
    path.write_text("p ising 2\nJ 0 1\n")
    with pytest.raises(ValueError, match=":2:"):
        read_instance(path)
    path.write_text("h 0 1.0\n")
    with pytest.raises(ValueError, match="header"):
        read_instance(path)
    path.write_text("# comment\np ising 2\nJ 1 0 2.0  # reversed indices are folded\n")
    assert read_instance(path).J[0, 1] == 2.0
