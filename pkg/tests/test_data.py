import io
import json

import numpy as np
import pytest

from framepot import data as dat
from framepot.geometry import AtomicSystem
from conftest import random_rotation


def roundtrip(frames):
    buffer = io.StringIO()
    dat.write_extxyz(buffer, frames)
    return buffer.getvalue()


# ---------------------------------------------------------------------------
# parsing

def test_minimal_single_atom_frame():
    text = "1\nenergy=-1.0\nAr 0.0 0.0 0.0\n"
    frames = dat.parse_extxyz(text)
    assert len(frames) == 1
    frame = frames[0]
    assert frame.energy == -1.0
    assert frame.has_energy
    assert not frame.has_forces
    np.testing.assert_array_equal(frame.forces, np.zeros((1, 3)))
    assert frame.system.species.tolist() == [18]
    assert frame.system.cell is None


def test_lattice_and_forces_round_trip():
    text = (
        "2\n"
        'Lattice="4.0 0.0 0.0 0.0 4.0 0.0 0.0 0.0 4.0" '
        "Properties=species:S:1:pos:R:3:forces:R:3 energy=-3.5 "
        'pbc="T T T"\n'
        "Si 0.1 0.2 0.3 0.01 -0.02 0.03\n"
        "O 1.0 1.1 1.2 -0.01 0.02 -0.03\n"
    )
    frame = dat.parse_extxyz(text)[0]
    assert frame.has_forces and frame.has_energy
    assert frame.system.species.tolist() == [14, 8]
    np.testing.assert_allclose(frame.system.cell, 4.0 * np.eye(3))
    np.testing.assert_allclose(frame.forces[1], [-0.01, 0.02, -0.03])
    first = roundtrip(frame)
    again = roundtrip(dat.parse_extxyz(first))
    assert first == again


def test_write_parse_write_byte_identical():
    rng = np.random.default_rng(2)
    frames = []
    for k in range(4):
        n = int(rng.integers(1, 6))
        system = AtomicSystem(
            rng.integers(1, 90, size=n),
            rng.normal(size=(n, 3)) * 3.0,
            np.eye(3) * rng.uniform(5, 9) + rng.normal(size=(3, 3)) * 0.1,
            (True, True, True),
        )
        frame = dat.LabeledFrame(
            system,
            energy=float(rng.normal()),
            forces=rng.normal(size=(n, 3)),
            stress=rng.normal(size=(3, 3)) if k % 2 == 0 else None,
            weight=2.0 if k == 1 else 1.0,
            metadata={"origin": "unit-test", "note": "two words"} if k == 2 else {},
        )
        frames.append(frame)
    first = roundtrip(frames)
    again = roundtrip(dat.parse_extxyz(first))
    assert first == again


def test_unknown_keys_preserved():
    text = '1\nenergy=1.0 label="my frame" step=12\nH 0 0 0\n'
    frame = dat.parse_extxyz(text)[0]
    assert frame.metadata == {"label": "my frame", "step": "12"}


def test_species_accepted_as_numbers():
    text = "1\nenergy=0.5\n18 1.0 2.0 3.0\n"
    frame = dat.parse_extxyz(text)[0]
    assert frame.system.species.tolist() == [18]


def test_lattice_without_pbc_defaults_periodic():
    text = '1\nLattice="3 0 0 0 3 0 0 0 3" energy=0\nAr 0 0 0\n'
    frame = dat.parse_extxyz(text)[0]
    assert frame.system.pbc == (True, True, True)
    text = '1\nLattice="3 0 0 0 3 0 0 0 3" pbc="F F F" energy=0\nAr 0 0 0\n'
    frame = dat.parse_extxyz(text)[0]
    assert frame.system.cell is None  # lattice dropped for isolated system


def test_multi_frame_with_blank_lines():
    text = "1\nenergy=1\nAr 0 0 0\n\n1\nenergy=2\nAr 1 0 0\n"
    frames = dat.parse_extxyz(text)
    assert [f.energy for f in frames] == [1.0, 2.0]


def test_missing_rows_error_names_line():
    text = "3\nenergy=0\nAr 0 0 0\nAr 1 0 0\n"
    with pytest.raises(dat.ExtxyzError) as err:
        dat.parse_extxyz(text)
    assert err.value.line == 5  # where the third row should be
    assert "3 atom rows" in str(err.value)


def test_wrong_column_count_error():
    text = "1\nenergy=0\nAr 0 0\n"
    with pytest.raises(dat.ExtxyzError) as err:
        dat.parse_extxyz(text)
    assert err.value.line == 3
    assert "columns" in str(err.value)


def test_unparsable_float_error():
    text = "1\nenergy=0\nAr 0 zero 0\n"
    with pytest.raises(dat.ExtxyzError) as err:
        dat.parse_extxyz(text)
    assert err.value.line == 3


def test_short_lattice_error():
    text = '1\nLattice="1 2 3" energy=0\nAr 0 0 0\n'
    with pytest.raises(dat.ExtxyzError) as err:
        dat.parse_extxyz(text)
    assert err.value.line == 2
    assert "Lattice" in str(err.value)


def test_bad_species_error():
    text = "1\nenergy=0\nXx 0 0 0\n"
    with pytest.raises(dat.ExtxyzError) as err:
        dat.parse_extxyz(text)
    assert err.value.line == 3


# ---------------------------------------------------------------------------
# LJ oracle

EPS, SIG = 0.0104, 3.4


def dimer(r):
    return AtomicSystem([18, 18], [[0.0, 0.0, 0.0], [r, 0.0, 0.0]])


def test_lj_dimer_minimum():
    r0 = 2.0 ** (1.0 / 6.0) * SIG
    frame = dat.lj_oracle(dimer(r0), EPS, SIG, cutoff=12.0, shift=False)
    np.testing.assert_allclose(frame.forces, np.zeros((2, 3)), atol=1e-12)
    assert frame.energy == pytest.approx(-EPS, abs=1e-15)
    shifted = dat.lj_oracle(dimer(r0), EPS, SIG, cutoff=12.0, shift=True)
    np.testing.assert_allclose(shifted.forces, frame.forces, atol=1e-15)
    assert shifted.energy > frame.energy  # shift removes negative tail value


def test_lj_overlap_rejected():
    with pytest.raises(ValueError):
        dat.lj_oracle(dimer(0.05 * SIG), EPS, SIG, cutoff=6.0)


def test_lj_forces_match_finite_differences():
    rng = np.random.default_rng(4)
    system = dat.fcc_supercell(18, 5.4, (1, 1, 2), rattle=0.12, rng=rng)
    cutoff = 5.0
    frame = dat.lj_oracle(system, EPS, SIG, cutoff)
    # keep every pair clear of the cutoff so FD does not straddle the edge
    from framepot.geometry import build_neighbor_list
    dij = build_neighbor_list(system, cutoff + 0.1).dij
    assert np.abs(dij - cutoff).min() > 1e-3

    h = 1e-5
    for atom in range(0, system.n_atoms, 3):
        for axis in range(3):
            plus = system.copy()
            plus.positions[atom, axis] += h
            minus = system.copy()
            minus.positions[atom, axis] -= h
            e_plus = dat.lj_oracle(plus, EPS, SIG, cutoff).energy
            e_minus = dat.lj_oracle(minus, EPS, SIG, cutoff).energy
            fd = -(e_plus - e_minus) / (2 * h)
            assert abs(fd - frame.forces[atom, axis]) < 1e-8


def test_lj_stress_matches_strain_derivative():
    rng = np.random.default_rng(9)
    system = dat.fcc_supercell(18, 5.4, (1, 1, 1), rattle=0.1, rng=rng)
    cutoff = 4.9
    frame = dat.lj_oracle(system, EPS, SIG, cutoff)
    volume = abs(np.linalg.det(system.cell))
    h = 1e-6
    for a in range(3):
        for b in range(a, 3):
            strain = np.zeros((3, 3))
            strain[a, b] = strain[b, a] = h
            energies = []
            for direction in (1.0, -1.0):
                eps = direction * strain
                moved = AtomicSystem(
                    system.species,
                    system.positions @ (np.eye(3) + eps),
                    system.cell @ (np.eye(3) + eps),
                    system.pbc,
                )
                energies.append(dat.lj_oracle(moved, EPS, SIG, cutoff).energy)
            fd = (energies[0] - energies[1]) / (2 * h)
            expected = volume * frame.stress[a, b] * (2.0 if a != b else 1.0)
            assert abs(fd - expected) < 1e-6


def test_lj_equivariance_suite():
    rng = np.random.default_rng(14)
    system = dat.fcc_supercell(18, 5.6, (1, 1, 1), rattle=0.15, rng=rng)
    base = dat.lj_oracle(system, EPS, SIG, 4.5)

    rot = random_rotation(rng)
    shift = rng.normal(size=3) * 5.0
    moved = AtomicSystem(
        system.species, system.positions @ rot.T + shift, system.cell @ rot.T, system.pbc
    )
    rotated = dat.lj_oracle(moved, EPS, SIG, 4.5)
    assert rotated.energy == pytest.approx(base.energy, abs=1e-10)
    np.testing.assert_allclose(rotated.forces, base.forces @ rot.T, atol=1e-10)
    np.testing.assert_allclose(rotated.stress, rot @ base.stress @ rot.T, atol=1e-12)

    perm = rng.permutation(system.n_atoms)
    permuted = AtomicSystem(
        system.species[perm], system.positions[perm], system.cell, system.pbc
    )
    shuffled = dat.lj_oracle(permuted, EPS, SIG, 4.5)
    assert shuffled.energy == pytest.approx(base.energy, abs=1e-10)
    np.testing.assert_allclose(shuffled.forces, base.forces[perm], atol=1e-10)


# ---------------------------------------------------------------------------
# splits

def make_frames(count, seed=0):
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(count):
        system = AtomicSystem([18], rng.normal(size=(1, 3)))
        frames.append(dat.LabeledFrame(system, float(rng.normal())))
    return frames


def test_split_sizes_and_determinism():
    dataset = dat.Dataset(make_frames(10))
    result = dat.split(dataset, (0.6, 0.2, 0.2), seed=0)
    counts = [len(result.subset(name)) for name in dat.SPLIT_NAMES]
    assert counts == [6, 2, 2]
    again = dat.split(dataset, (0.6, 0.2, 0.2), seed=0)
    np.testing.assert_array_equal(result.assignments, again.assignments)
    other = dat.split(dataset, (0.6, 0.2, 0.2), seed=1)
    assert not np.array_equal(result.assignments, other.assignments)


def test_split_depends_on_content_not_source():
    frames = make_frames(12)
    a = dat.split(dat.Dataset(frames, source="path/a.xyz"), (0.6, 0.2, 0.2), 7)
    b = dat.split(dat.Dataset(frames, source="path/b.xyz"), (0.6, 0.2, 0.2), 7)
    np.testing.assert_array_equal(a.assignments, b.assignments)


def test_split_disjoint_exhaustive_and_rounding():
    dataset = dat.Dataset(make_frames(11))
    result = dat.split(dataset, (0.6, 0.2, 0.2), seed=5)
    counts = np.bincount(result.assignments, minlength=3)
    assert counts.sum() == 11
    for count, ratio in zip(counts, (0.6, 0.2, 0.2)):
        assert abs(count - ratio * 11) <= 1


def test_split_input_guards():
    dataset = dat.Dataset(make_frames(10))
    with pytest.raises(ValueError):
        dat.split(dataset, (0.5, 0.2, 0.2), seed=0)  # does not sum to 1
    with pytest.raises(ValueError):
        dat.split(dataset, (0.8, 0.2, 0.0), seed=0)  # non-positive ratio
    with pytest.raises(ValueError):
        dat.split(dat.Dataset(make_frames(2)), (0.6, 0.2, 0.2), seed=0)


def test_manifest_round_trip(tmp_path):
    dataset = dat.split(dat.Dataset(make_frames(10), source="mem"), (0.6, 0.2, 0.2), 3)
    path = tmp_path / "manifest.json"
    dat.save_manifest(path, dataset)
    loaded = json.loads(path.read_text())
    entry = loaded["datasets"][0]
    assert entry["content_hash"] == dataset.content_hash
    assert entry["counts"] == {"train": 6, "val": 2, "test": 2}
    assert entry["seed"] == 3


def test_load_save_files(tmp_path):
    frames = [
        dat.lj_oracle(dat.fcc_supercell(18, 5.4, (1, 1, 1), 0.1, np.random.default_rng(k)),
                      EPS, SIG, 4.5)
        for k in range(3)
    ]
    path = tmp_path / "frames.xyz"
    dat.save_extxyz(path, frames)
    loaded = dat.load_extxyz(path)
    assert len(loaded) == 3
    assert loaded.content_hash == dat.content_hash(frames)
    for original, parsed in zip(frames, loaded.frames):
        assert parsed.energy == original.energy
        np.testing.assert_array_equal(parsed.forces, original.forces)


# ---------------------------------------------------------------------------
# synthetic structures

def test_fcc_supercell_geometry():
    system = dat.fcc_supercell(18, 5.4, (2, 2, 2))
    assert system.n_atoms == 32
    np.testing.assert_allclose(system.cell, np.diag([10.8, 10.8, 10.8]))
    from framepot.geometry import build_neighbor_list
    graph = build_neighbor_list(system, 4.0)
    # perfect fcc first shell at a/sqrt(2), 12 neighbors each
    np.testing.assert_allclose(graph.dij, 5.4 / np.sqrt(2), atol=1e-10)
    assert graph.n_edges == 32 * 12


def test_make_lj_argon_dataset_reproducible():
    a = dat.make_lj_argon_dataset(3, seed=11)
    b = dat.make_lj_argon_dataset(3, seed=11)
    assert a.content_hash == b.content_hash
    assert len(a) == 3 and a.frames[0].has_forces
