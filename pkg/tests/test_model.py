import numpy as np
import pytest

from framepot import autodiff as ad
from framepot import network as net
from framepot.geometry import AtomicSystem
from conftest import random_rotation

SMALL = net.ModelConfig(num_layers=2, hidden_channels=16, num_heads=4,
                        num_basis=6, cutoff=3.0)


def cluster(n, seed, spread=2.4, species_pool=(1, 6, 8)):
    rng = np.random.default_rng(seed)
    while True:
        positions = rng.uniform(-spread, spread, size=(n, 3))
        deltas = positions[:, None, :] - positions[None, :, :]
        dists = np.linalg.norm(deltas, axis=-1) + np.eye(n) * 10.0
        if dists.min() > 0.8:
            return AtomicSystem(rng.choice(species_pool, size=n), positions)


def randomized_state(config, seed=0):
    """init_state plus nonzero RoPE/temporal weights so toggles matter."""
    state = net.init_state(config, seed)
    rng = np.random.default_rng(seed + 1)
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        state.params[p + "w_rope"] = rng.normal(scale=0.3, size=state.params[p + "w_rope"].shape)
        state.params[p + "b_rope"] = rng.normal(scale=0.3, size=state.params[p + "b_rope"].shape)
        state.params[p + "temporal"] = rng.normal(scale=0.2, size=(config.hidden_channels,) * 2)
    return state


# ---------------------------------------------------------------------------
# config and parameter bookkeeping

def test_config_validation():
    with pytest.raises(ValueError):
        net.ModelConfig(hidden_channels=15)  # odd
    with pytest.raises(ValueError):
        net.ModelConfig(hidden_channels=16, num_heads=3)  # not divisible
    with pytest.raises(ValueError):
        net.ModelConfig(hidden_channels=12, num_heads=4)  # pairs straddle heads
    with pytest.raises(ValueError):
        net.ModelConfig(cutoff=0.0)
    with pytest.raises(ValueError):
        net.ModelConfig(num_layers=0)
    defaults = net.ModelConfig()
    assert (defaults.num_layers, defaults.hidden_channels) == (3, 128)
    assert (defaults.num_heads, defaults.num_basis, defaults.cutoff) == (16, 32, 5.0)


def test_parameter_count_matches_shapes():
    config = SMALL
    d, h, b = config.hidden_channels, config.num_heads, config.num_basis
    per_layer = (
        2 * d                 # layer norm
        + 2 * d * d           # w_hi, w_hj
        + d * h + h           # rope head
        + d * d + 3 * d + d + d * d   # lse
        + d * d               # w_msg_a
        + 3 * d * d           # w_msg_sv
        + b * d + d           # rbf projection + bias
        + d * d + d           # f_m second layer
        + d                   # head scores
        + 4 * d * d           # vector head
        + 2 * d * d           # f_u
        + d * d               # temporal kernel
    )
    expected = (
        118 * d + 118 + 1
        + d * d + d + d + 1   # readout
        + config.num_layers * per_layer
    )
    assert net.init_state(config).parameter_count() == expected


# ---------------------------------------------------------------------------
# reference pieces

def test_rbf_envelope_limits():
    config = net.ModelConfig(num_basis=4, cutoff=5.0, hidden_channels=16, num_heads=4)
    at_cut = net.rbf_expand(np.array([5.0]), config)
    np.testing.assert_array_equal(at_cut, np.zeros((1, 4)))
    tiny = net.rbf_expand(np.array([1e-12]), config)[0]
    centers = np.linspace(0.0, 5.0, 4)
    np.testing.assert_allclose(tiny, np.exp(-0.64 * centers**2), atol=1e-9)
    with pytest.raises(ValueError):
        net.rbf_expand(np.array([5.1]), config)


def test_rbf_midpoint_formula():
    config = net.ModelConfig(num_basis=4, cutoff=5.0, hidden_channels=16, num_heads=4)
    got = net.rbf_expand(np.array([2.5]), config)[0]
    # independent evaluation: gamma = (4/5)^2, centers 0, 5/3, 10/3, 5,
    # envelope at cutoff/2 is exactly 1/2
    gamma = 0.64
    expected = [0.5 * np.exp(-gamma * (2.5 - mu) ** 2)
                for mu in (0.0, 5.0 / 3.0, 10.0 / 3.0, 5.0)]
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_rope_thetas():
    config = net.ModelConfig(hidden_channels=4, num_heads=2, num_basis=4)
    thetas = net.rope_thetas(config)
    assert thetas[0] == 1.0
    assert thetas[1] == pytest.approx(10000.0 ** -0.5)
    assert thetas[1] == pytest.approx(0.01)


def test_rope_angles_zero_head_is_identity():
    config = SMALL
    d, h = config.hidden_channels, config.num_heads
    angles = net.rope_angles(np.random.default_rng(0).normal(size=(5, d)),
                             np.zeros((d, h)), np.zeros(h), config)
    np.testing.assert_array_equal(angles, np.zeros((5, d // 2)))


def test_rope_angles_broadcast_per_head():
    config = net.ModelConfig(hidden_channels=8, num_heads=2, num_basis=4)
    w = np.zeros((8, 2))
    b = np.array([2.0, -1.0])
    angles = net.rope_angles(np.zeros((1, 8)), w, b, config)[0]
    thetas = net.rope_thetas(config)
    np.testing.assert_allclose(angles, thetas * np.array([2.0, 2.0, -1.0, -1.0]))


def test_temporal_connect_examples():
    rng = np.random.default_rng(3)
    h1, h2 = rng.normal(size=(2, 4, 8))
    assert np.all(net.temporal_connect(h1, h2, np.zeros((8, 8))) == 0)
    np.testing.assert_allclose(
        net.temporal_connect(h1, np.ones_like(h2), np.eye(8)), h1
    )
    m = rng.normal(size=(8, 8))
    np.testing.assert_allclose(
        net.temporal_connect(2 * h1, h2, m), 2 * net.temporal_connect(h1, h2, m)
    )
    np.testing.assert_allclose(
        net.temporal_connect(h1, 2 * h2, m), 2 * net.temporal_connect(h1, h2, m)
    )


# ---------------------------------------------------------------------------
# full-model symmetry suite

def test_translation_invariance():
    system = cluster(10, seed=1)
    state = randomized_state(SMALL)
    base = net.predict(system, SMALL, state)
    moved = AtomicSystem(system.species, system.positions + [11.0, -7.0, 3.0])
    shifted = net.predict(moved, SMALL, state)
    assert abs(shifted.energy - base.energy) < 1e-9
    np.testing.assert_allclose(shifted.forces, base.forces, atol=1e-9)


def test_rotation_invariance_of_energy_and_equivariance_of_forces():
    system = cluster(12, seed=2)
    state = randomized_state(SMALL)
    base = net.predict(system, SMALL, state)
    rng = np.random.default_rng(5)
    scale = np.abs(base.forces).max()
    for _ in range(20):
        rot = random_rotation(rng)
        moved = AtomicSystem(system.species, system.positions @ rot.T)
        out = net.predict(moved, SMALL, state)
        assert abs(out.energy - base.energy) < 1e-7
        np.testing.assert_allclose(out.forces, base.forces @ rot.T, atol=1e-7 * max(scale, 1.0))


def test_node_features_transform_correctly():
    system = cluster(9, seed=7)
    state = randomized_state(SMALL)
    h, v = net.node_features(system, SMALL, state)
    rng = np.random.default_rng(11)
    rot = random_rotation(rng)
    moved = AtomicSystem(system.species, system.positions @ rot.T + rng.normal(size=3))
    h_rot, v_rot = net.node_features(moved, SMALL, state)
    h_scale = np.abs(h).max()
    assert np.abs(h_rot - h).max() < 1e-8 * max(h_scale, 1.0)
    np.testing.assert_allclose(v_rot, np.einsum("ab,nbd->nad", rot, v), atol=1e-8)


def test_permutation_invariance_is_exact():
    system = cluster(11, seed=3)
    state = randomized_state(SMALL)
    base = net.predict(system, SMALL, state)
    perm = np.random.default_rng(8).permutation(11)
    permuted = AtomicSystem(system.species[perm], system.positions[perm])
    out = net.predict(permuted, SMALL, state)
    assert out.energy == base.energy  # bit-identical by canonical aggregation
    # backward-pass accumulation order may differ by a few ulp
    np.testing.assert_allclose(out.forces, base.forces[perm], atol=1e-12)


def test_single_atom_features_unchanged():
    system = AtomicSystem([8], [[0.0, 0.0, 0.0]])
    state = net.init_state(SMALL, seed=4)
    h, v = net.node_features(system, SMALL, state)
    np.testing.assert_array_equal(h[0], state.params["embed"][7])
    np.testing.assert_array_equal(v, np.zeros_like(v))
    pred = net.predict(system, SMALL, state)
    assert np.isfinite(pred.energy)
    np.testing.assert_array_equal(pred.forces, np.zeros((1, 3)))


def test_forward_determinism():
    system = cluster(10, seed=9)
    state = randomized_state(SMALL)
    a = net.predict(system, SMALL, state)
    b = net.predict(system, SMALL, state)
    assert a.energy == b.energy
    np.testing.assert_array_equal(a.forces, b.forces)


def test_ablation_toggles_change_outputs_but_keep_symmetry():
    system = cluster(10, seed=12)
    rng = np.random.default_rng(13)
    rot = random_rotation(rng)
    energies = {}
    for rope in (True, False):
        for temporal in (True, False):
            for lse in (True, False):
                config = net.ModelConfig(
                    num_layers=2, hidden_channels=16, num_heads=4, num_basis=6,
                    cutoff=3.0, rope_enabled=rope, temporal_enabled=temporal,
                    lse_enabled=lse,
                )
                state = randomized_state(config, seed=21)
                pred = net.predict(system, config, state)
                moved = AtomicSystem(system.species, system.positions @ rot.T)
                rotated = net.predict(moved, config, state)
                assert abs(rotated.energy - pred.energy) < 1e-7
                np.testing.assert_allclose(rotated.forces, pred.forces @ rot.T, atol=1e-6)
                energies[(rope, temporal, lse)] = pred.energy
    assert len(set(energies.values())) == 8  # every toggle matters


def test_locality_receptive_field():
    # two compact clusters farther apart than (num_layers + 1) * cutoff:
    # no atom lies in both receptive fields, so cross-forces vanish exactly
    rng = np.random.default_rng(17)
    near = rng.uniform(-1.0, 1.0, size=(5, 3))
    separation = (SMALL.num_layers + 1) * SMALL.cutoff + 3.0
    far = rng.uniform(-1.0, 1.0, size=(4, 3)) + [separation, 0.0, 0.0]
    species = np.full(9, 6)
    state = randomized_state(SMALL)
    base = net.predict(AtomicSystem(species, np.vstack([near, far])), SMALL, state)
    moved_far = far.copy()
    moved_far[0] += [0.3, -0.2, 0.1]
    out = net.predict(AtomicSystem(species, np.vstack([near, moved_far])), SMALL, state)
    np.testing.assert_allclose(out.forces[:5], base.forces[:5], atol=1e-10)


# ---------------------------------------------------------------------------
# forces and stress against finite differences

def test_forces_match_finite_differences():
    system = cluster(8, seed=6)
    state = randomized_state(SMALL)
    pred = net.predict(system, SMALL, state)
    np.testing.assert_allclose(pred.forces.sum(axis=0), np.zeros(3), atol=1e-8)
    h = 1e-4
    for atom in range(0, 8, 2):
        for axis in range(3):
            plus = system.copy()
            plus.positions[atom, axis] += h
            minus = system.copy()
            minus.positions[atom, axis] -= h
            e_plus = net.predict(plus, SMALL, state).energy
            e_minus = net.predict(minus, SMALL, state).energy
            fd = -(e_plus - e_minus) / (2 * h)
            assert abs(fd - pred.forces[atom, axis]) < 1e-5


def periodic_system(seed=19):
    rng = np.random.default_rng(seed)
    cell = np.array([[5.2, 0.0, 0.0], [0.4, 4.8, 0.0], [0.0, 0.3, 5.5]])
    frac = rng.uniform(0.05, 0.95, size=(6, 3))
    jitter = rng.normal(scale=0.05, size=(6, 3))
    return AtomicSystem(rng.choice([6, 8], size=6), frac @ cell + jitter, cell, (True,) * 3)


def test_stress_symmetry_and_finite_differences():
    system = periodic_system()
    state = randomized_state(SMALL)
    pred = net.predict(system, SMALL, state)
    assert pred.stress is not None
    np.testing.assert_allclose(pred.stress, pred.stress.T, atol=1e-10)

    volume = abs(np.linalg.det(system.cell))
    h = 1e-5
    for a in range(3):
        for b in range(a, 3):
            strain = np.zeros((3, 3))
            strain[a, b] = strain[b, a] = h
            energies = []
            for sign in (1.0, -1.0):
                deform = np.eye(3) + sign * strain
                moved = AtomicSystem(
                    system.species, system.positions @ deform,
                    system.cell @ deform, system.pbc,
                )
                energies.append(net.predict(moved, SMALL, state,
                                            compute_stress=False).energy)
            fd = (energies[0] - energies[1]) / (2 * h)
            expected = volume * pred.stress[a, b] * (2.0 if a != b else 1.0)
            assert abs(fd - expected) < 1e-6


def test_stress_volume_scaling():
    dimer = AtomicSystem([18, 18], [[0.0, 0.0, 0.0], [2.8, 0.0, 0.0]],
                         20.0 * np.eye(3), (True,) * 3)
    bigger = AtomicSystem([18, 18], dimer.positions,
                          20.0 * 2.0 ** (1.0 / 3.0) * np.eye(3), (True,) * 3)
    state = randomized_state(SMALL)
    small_box = net.predict(dimer, SMALL, state)
    big_box = net.predict(bigger, SMALL, state)
    assert abs(big_box.energy - small_box.energy) < 1e-12
    np.testing.assert_allclose(big_box.stress, small_box.stress / 2.0, atol=1e-15)


def test_stress_requires_periodicity():
    system = cluster(4, seed=23)
    state = net.init_state(SMALL)
    with pytest.raises(ValueError):
        net.predict(system, SMALL, state, compute_stress=True)


def test_forces_are_exact_tape_gradient():
    system = cluster(6, seed=27)
    state = randomized_state(SMALL)
    pred = net.predict(system, SMALL, state)
    tape, energy, x_leaf = net.forward_energy(system, SMALL, state)
    grad = ad.gradient(energy, x_leaf)
    np.testing.assert_array_equal(pred.forces, -grad.data)
    assert pred.energy == float(energy.data)


def test_non_finite_parameters_raise_with_op():
    system = cluster(5, seed=31)
    state = net.init_state(SMALL)
    state.params["embed"] = state.params["embed"].copy()
    state.params["embed"][5, 0] = np.inf
    with pytest.raises(FloatingPointError):
        state.check_finite()
    poisoned = state  # forward must also flag it, carrying the op name
    with pytest.raises(ad.NonFiniteError) as err:
        net.predict(AtomicSystem([6] * 5, system.positions), SMALL, poisoned)
    assert err.value.op


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_bit_identical(tmp_path):
    config = SMALL
    state = randomized_state(config, seed=34)
    system = cluster(7, seed=35)
    before = net.predict(system, config, state)
    path = tmp_path / "model.ckpt"
    net.save_checkpoint(path, config, state, extra={"step": 120})
    loaded_config, loaded_state, extra = net.load_checkpoint(path)
    assert loaded_config == config
    assert extra == {"step": 120}
    for name, array in state.params.items():
        np.testing.assert_array_equal(loaded_state.params[name], array)
    after = net.predict(system, loaded_config, loaded_state)
    assert after.energy == before.energy
    np.testing.assert_array_equal(after.forces, before.forces)

    net.save_checkpoint(tmp_path / "again.ckpt", config, state, extra={"step": 120})
    assert (tmp_path / "model.ckpt").read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        net.load_checkpoint(path)
    good = tmp_path / "good.ckpt"
    net.save_checkpoint(good, SMALL, net.init_state(SMALL))
    truncated = good.read_bytes()[:-16]
    (tmp_path / "trunc.ckpt").write_bytes(truncated)
    with pytest.raises(ValueError):
        net.load_checkpoint(tmp_path / "trunc.ckpt")
