"""NVE molecular dynamics: velocity-Verlet driven by any conservative
force provider, with conservation diagnostics.

The provider is a callable system -> (potential energy eV, forces eV/A).
Neighbor lists are implicitly fresh because the model provider rebuilds
them per call; positions are never wrapped for integration state, only
when a trajectory frame is emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledFrame
from .elements import atomic_mass
from .geometry import AtomicSystem, wrap_positions
from .units import BOLTZMANN_EV_K, FORCE_OVER_MASS_TO_ACC, MASS_VEL2_TO_EV


class MDError(Exception):
    """Force evaluation failed mid-trajectory; carries the step index."""

    def __init__(self, step, cause):
        super().__init__(f"force evaluation failed at step {step}: {cause}")
        self.step = step


@dataclass
class MDState:
    system: AtomicSystem
    velocities: np.ndarray  # (n, 3) A/fs
    masses: np.ndarray      # (n,) amu
    time: float = 0.0       # fs
    step: int = 0

    def __post_init__(self):
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.masses = np.asarray(self.masses, dtype=np.float64)
        n = self.system.n_atoms
        if self.velocities.shape != (n, 3):
            raise ValueError(f"velocities must have shape ({n}, 3)")
        if self.masses.shape != (n,):
            raise ValueError(f"masses must have shape ({n},)")
        if np.any(self.masses <= 0.0):
            raise ValueError("masses must be positive")
        if not np.isfinite(self.velocities).all():
            raise ValueError("velocities must be finite")

    def kinetic_energy(self) -> float:
        return 0.5 * MASS_VEL2_TO_EV * float(
            np.sum(self.masses[:, None] * self.velocities ** 2))

    def temperature(self) -> float:
        return 2.0 * self.kinetic_energy() / (3.0 * self.system.n_atoms * BOLTZMANN_EV_K)


@dataclass
class MDReport:
    times: np.ndarray        # fs
    potential: np.ndarray    # eV
    kinetic: np.ndarray      # eV
    total: np.ndarray        # eV
    temperature: np.ndarray  # K
    drift: float             # meV/atom/ps, least-squares slope of total energy
    n_atoms: int
    frames: list = field(default_factory=list)

    def records(self):
        for k in range(len(self.times)):
            yield {
                "time_fs": float(self.times[k]),
                "potential_ev": float(self.potential[k]),
                "kinetic_ev": float(self.kinetic[k]),
                "total_ev": float(self.total[k]),
                "temperature_k": float(self.temperature[k]),
            }


def default_masses(system: AtomicSystem) -> np.ndarray:
    return np.array([atomic_mass(int(z)) for z in system.species])


def maxwell_boltzmann_velocities(system: AtomicSystem, temperature: float,
                                 masses: np.ndarray, rng) -> np.ndarray:
    """Gaussian velocities at the target temperature with the net momentum
    removed (the removal slightly lowers the realized temperature)."""
    sigma = np.sqrt(BOLTZMANN_EV_K * temperature / (masses * MASS_VEL2_TO_EV))
    v = rng.normal(size=(system.n_atoms, 3)) * sigma[:, None]
    v -= np.average(v, axis=0, weights=masses)
    return v


def verlet_step(state: MDState, provider, dt: float,
                forces: np.ndarray | None = None) -> tuple[MDState, np.ndarray, float]:
    """One velocity-Verlet step; returns (state, forces, potential).

    ``forces`` are the forces at the current positions, if already known;
    passing them avoids one provider call per step.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    if forces is None:
        try:
            _, forces = provider(state.system)
        except Exception as err:  # noqa: BLE001 - wrapped with step index
            raise MDError(state.step, err) from err
    inv_m = FORCE_OVER_MASS_TO_ACC / state.masses[:, None]
    half_kicked = state.velocities + 0.5 * dt * forces * inv_m
    moved = state.system.copy()
    moved.positions = state.system.positions + dt * half_kicked
    try:
        potential, new_forces = provider(moved)
    except Exception as err:  # noqa: BLE001
        raise MDError(state.step + 1, err) from err
    velocities = half_kicked + 0.5 * dt * new_forces * inv_m
    new_state = MDState(system=moved, velocities=velocities, masses=state.masses,
                        time=state.time + dt, step=state.step + 1)
    return new_state, new_forces, potential


def run_nve(initial: MDState, provider, dt: float, n_steps: int,
            sample_every: int = 1, keep_frames: bool = False) -> MDReport:
    """Integrate n_steps and report sampled energies plus the drift slope."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if sample_every < 1:
        raise ValueError("sample_every must be at least 1")

    state = initial
    try:
        potential, forces = provider(state.system)
    except Exception as err:  # noqa: BLE001
        raise MDError(state.step, err) from err

    times, pot, kin = [], [], []
    frames = []

    def sample(current, potential_now):
        times.append(current.time)
        pot.append(potential_now)
        kin.append(current.kinetic_energy())
        if keep_frames:
            out = current.system.copy()
            if out.cell is not None:
                out.positions = wrap_positions(out)
            frames.append(LabeledFrame(
                system=out, energy=potential_now + kin[-1],
                forces=np.zeros((out.n_atoms, 3)),
                metadata={"time_fs": repr(float(current.time))}))

    sample(state, potential)
    for k in range(n_steps):
        state, forces, potential = verlet_step(state, provider, dt, forces=forces)
        if (k + 1) % sample_every == 0:
            sample(state, potential)

    times_arr = np.array(times)
    pot_arr = np.array(pot)
    kin_arr = np.array(kin)
    total = pot_arr + kin_arr
    n = initial.system.n_atoms
    temp = 2.0 * kin_arr / (3.0 * n * BOLTZMANN_EV_K)
    return MDReport(times=times_arr, potential=pot_arr, kinetic=kin_arr,
                    total=total, temperature=temp,
                    drift=drift_slope(times_arr, total, n),
                    n_atoms=n, frames=frames)


def drift_slope(times_fs: np.ndarray, total_ev: np.ndarray, n_atoms: int) -> float:
    """Least-squares slope of total energy, in meV/atom/ps."""
    if len(times_fs) < 2:
        return 0.0
    slope_ev_fs = np.polyfit(times_fs, total_ev, 1)[0]
    # eV/fs -> meV/ps is *1e3 *1e3
    return float(slope_ev_fs * 1e6 / n_atoms)


def model_provider(config, state, compute_stress: bool = False):
    """Force provider backed by the potential."""
    from .network import predict

    def provider(system):
        pred = predict(system, config, state, compute_stress=compute_stress)
        return pred.energy, pred.forces

    return provider


def lj_provider(epsilon: float, sigma: float, cutoff: float, shift: bool = True):
    """Force provider backed by the analytic oracle (testing and baselines)."""
    from .data import lj_oracle

    def provider(system):
        frame = lj_oracle(system, epsilon=epsilon, sigma=sigma, cutoff=cutoff,
                          shift=shift)
        return frame.energy, frame.forces

    return provider
