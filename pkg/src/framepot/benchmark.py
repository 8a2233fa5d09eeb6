"""Inference-cost benchmark: wall time and peak memory per energy+force
evaluation across replicated supercells.

CPU desk-scale trends only; timings use the monotonic clock and memory is
the before/after delta of the process peak RSS.
"""

from __future__ import annotations

import json
import resource
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import AtomicSystem
from .network import ModelConfig, ModelState, build_cache, forward_packed, pack, _taped_params

TABLE_HEADER = "CPU desk-scale benchmark (wall ms per energy+force evaluation)"


def supercell(system: AtomicSystem, repeat) -> AtomicSystem:
    """Replicate a periodic cell over lattice translations."""
    if system.cell is None:
        raise ValueError("supercell requires a periodic system")
    repeat = np.asarray(repeat, dtype=np.int64)
    if repeat.shape != (3,) or np.any(repeat < 1):
        raise ValueError("repeat must be three integers >= 1")
    shifts = np.array([
        [i, j, k]
        for i in range(repeat[0]) for j in range(repeat[1]) for k in range(repeat[2])
    ])
    n_copies = len(shifts)
    positions = (system.positions[None, :, :]
                 + (shifts @ system.cell)[:, None, :]).reshape(-1, 3)
    species = np.tile(system.species, n_copies)
    cell = system.cell * repeat[:, None]
    return AtomicSystem(species, positions, cell, system.pbc)


@dataclass
class BenchResult:
    n_atoms: int
    mean_ms: float
    min_ms: float
    max_ms: float
    peak_rss_delta_mb: float
    batch_size: int
    repetitions: int
    energy: float  # per-evaluation total energy, for determinism checksums
    error: str | None = None

    def record(self):
        out = {
            "n_atoms": self.n_atoms,
            "mean_ms": self.mean_ms,
            "min_ms": self.min_ms,
            "max_ms": self.max_ms,
            "peak_rss_delta_mb": self.peak_rss_delta_mb,
            "batch_size": self.batch_size,
            "repetitions": self.repetitions,
            "energy": self.energy,
        }
        if self.error is not None:
            out["error"] = self.error
        return out


def _peak_rss_mb() -> float:
    # ru_maxrss is KiB on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024.0


def evaluate_batch(config: ModelConfig, state: ModelState, caches) -> np.ndarray:
    """One packed energy+forces evaluation; returns per-frame energies."""
    tape = ad.Tape()
    try:
        tp = _taped_params(tape, state, as_leaves=False)
        batch = pack(list(caches))
        frame_e, x = forward_packed(tape, batch, config, tp)
        total = ad.reshape(ad.canonical_sum(frame_e), ())
        ad.gradient(total, x)  # forces; timed work must include them
        return frame_e.data[:, 0].copy()
    finally:
        tape.release()


def run_bench(config: ModelConfig, state: ModelState, base: AtomicSystem,
              repeats, batch_size: int = 1, reps: int = 5,
              warmup: int = 1) -> list[BenchResult]:
    """Benchmark each supercell size; failures become per-size rows."""
    if reps < 5:
        raise ValueError("need at least 5 timed repetitions")
    if batch_size < 1 or warmup < 0:
        raise ValueError("batch_size must be >= 1 and warmup >= 0")
    results = []
    for repeat in repeats:
        system = supercell(base, repeat)
        try:
            cache = build_cache(system, config)
            caches = [cache] * batch_size
            for _ in range(warmup):
                evaluate_batch(config, state, caches)
            before = _peak_rss_mb()
            times = np.empty(reps)
            energies = np.empty(reps)
            for r in range(reps):
                t0 = time.perf_counter()
                frame_e = evaluate_batch(config, state, caches)
                times[r] = (time.perf_counter() - t0) * 1000.0 / batch_size
                energies[r] = frame_e.sum()
            after = _peak_rss_mb()
            if not np.all(energies == energies[0]):
                raise RuntimeError("nondeterministic energies during timing")
            results.append(BenchResult(
                n_atoms=system.n_atoms,
                mean_ms=float(times.mean()),
                min_ms=float(times.min()),
                max_ms=float(times.max()),
                peak_rss_delta_mb=after - before,
                batch_size=batch_size,
                repetitions=reps,
                energy=float(energies[0] / batch_size),
            ))
        except MemoryError:
            results.append(BenchResult(
                n_atoms=system.n_atoms, mean_ms=float("nan"),
                min_ms=float("nan"), max_ms=float("nan"),
                peak_rss_delta_mb=float("nan"), batch_size=batch_size,
                repetitions=0, energy=float("nan"),
                error="out of memory"))
    return results


def format_table(results, threads: int | None = None) -> str:
    lines = [TABLE_HEADER]
    if threads is not None:
        lines.append(f"threads: {threads}")
    lines.append(f"{'atoms':>8} {'mean ms':>10} {'min ms':>10} {'max ms':>10} "
                 f"{'us/atom':>10} {'rss MB':>8}")
    for r in results:
        if r.error is not None:
            lines.append(f"{r.n_atoms:>8} failed: {r.error}")
            continue
        per_atom_us = 1000.0 * r.mean_ms / r.n_atoms
        lines.append(f"{r.n_atoms:>8} {r.mean_ms:>10.2f} {r.min_ms:>10.2f} "
                     f"{r.max_ms:>10.2f} {per_atom_us:>10.1f} "
                     f"{r.peak_rss_delta_mb:>8.1f}")
    return "\n".join(lines) + "\n"


def write_records(results, path):
    with open(path, "w") as handle:
        for r in results:
            handle.write(json.dumps(r.record(), sort_keys=True) + "\n")
