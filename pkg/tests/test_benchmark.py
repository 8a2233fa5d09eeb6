import numpy as np
import pytest

from framepot import benchmark as bench
from framepot.data import fcc_supercell, lj_oracle
from framepot.geometry import AtomicSystem
from framepot.network import ModelConfig, init_state, predict

TINY = ModelConfig(num_layers=1, hidden_channels=8, num_heads=2,
                   num_basis=4, cutoff=4.0)


def unit_cell():
    return AtomicSystem([18, 18],
                        [[0.0, 0.0, 0.0], [2.7, 2.7, 2.7]],
                        5.4 * np.eye(3), (True,) * 3)


def test_supercell_identity():
    base = unit_cell()
    same = bench.supercell(base, (1, 1, 1))
    np.testing.assert_array_equal(same.positions, base.positions)
    np.testing.assert_array_equal(same.cell, base.cell)
    np.testing.assert_array_equal(same.species, base.species)


def test_supercell_counts_and_cell():
    big = bench.supercell(unit_cell(), (2, 2, 2))
    assert big.n_atoms == 16
    np.testing.assert_array_equal(big.cell, 10.8 * np.eye(3))
    # all replicas preserve the intra-cell geometry
    assert np.isclose(
        np.linalg.norm(big.positions[1] - big.positions[0]),
        np.linalg.norm(unit_cell().positions[1] - unit_cell().positions[0]))


def test_supercell_rejects_free_clusters():
    with pytest.raises(ValueError):
        bench.supercell(AtomicSystem([18], [[0.0, 0.0, 0.0]]), (2, 2, 2))
    with pytest.raises(ValueError):
        bench.supercell(unit_cell(), (0, 1, 1))


def test_lj_extensivity_over_replication():
    base = fcc_supercell(element=18, lattice_constant=5.4, reps=(1, 1, 1))
    unit = lj_oracle(base, epsilon=0.0104, sigma=3.4, cutoff=5.0)
    doubled = bench.supercell(base, (2, 2, 2))
    big = lj_oracle(doubled, epsilon=0.0104, sigma=3.4, cutoff=5.0)
    assert big.energy == pytest.approx(8.0 * unit.energy, rel=1e-8)


def test_run_bench_rows_and_determinism():
    state = init_state(TINY, seed=0)
    base = unit_cell()
    results = bench.run_bench(TINY, state, base,
                              repeats=[(1, 1, 1), (2, 1, 1)], reps=5)
    assert [r.n_atoms for r in results] == [2, 4]
    for r in results:
        assert r.error is None
        assert r.repetitions == 5
        assert r.min_ms <= r.mean_ms <= r.max_ms
    direct = predict(bench.supercell(base, (2, 1, 1)), TINY, state,
                     compute_stress=False)
    assert results[1].energy == direct.energy  # benchmark never alters outputs


def test_run_bench_validates_reps():
    state = init_state(TINY, seed=0)
    with pytest.raises(ValueError):
        bench.run_bench(TINY, state, unit_cell(), repeats=[(1, 1, 1)], reps=3)


def test_table_and_records(tmp_path):
    state = init_state(TINY, seed=0)
    results = bench.run_bench(TINY, state, unit_cell(),
                              repeats=[(1, 1, 1)], reps=5)
    table = bench.format_table(results, threads=1)
    assert table.startswith(bench.TABLE_HEADER)
    assert "threads: 1" in table
    assert str(results[0].n_atoms) in table

    failed = results + [bench.BenchResult(
        n_atoms=999, mean_ms=float("nan"), min_ms=float("nan"),
        max_ms=float("nan"), peak_rss_delta_mb=float("nan"),
        batch_size=1, repetitions=0, energy=float("nan"),
        error="out of memory")]
    assert "failed: out of memory" in bench.format_table(failed)

    path = tmp_path / "bench.jsonl"
    bench.write_records(results, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1
    import json
    record = json.loads(lines[0])
    assert record["n_atoms"] == 2
    assert record["repetitions"] == 5


def test_batch_size_amortizes_evaluations():
    state = init_state(TINY, seed=0)
    results = bench.run_bench(TINY, state, unit_cell(),
                              repeats=[(1, 1, 1)], batch_size=3, reps=5)
    assert results[0].batch_size == 3
    direct = predict(unit_cell(), TINY, state, compute_stress=False)
    assert results[0].energy == pytest.approx(direct.energy, rel=1e-12)
