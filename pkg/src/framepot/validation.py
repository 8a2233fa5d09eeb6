"""Input validation helpers shared by the estimator and the CLI."""

from __future__ import annotations

import warnings

import numpy as np

from .data import LabeledFrame
from .geometry import AtomicSystem


def ensure_frames(X) -> list[LabeledFrame]:
    """Validate a sequence of labeled frames (energies present)."""
    frames = list(X)
    if not frames:
        raise ValueError("expected at least one labeled frame")
    for k, frame in enumerate(frames):
        if not isinstance(frame, LabeledFrame):
            raise TypeError(f"item {k} is {type(frame).__name__}, not LabeledFrame")
        if not frame.has_energy:
            raise ValueError(f"frame {k} has no energy label")
    return frames


def ensure_systems(X) -> list[AtomicSystem]:
    """Coerce a sequence of systems or labeled frames to systems."""
    systems = []
    for k, item in enumerate(X):
        if isinstance(item, AtomicSystem):
            systems.append(item)
        elif isinstance(item, LabeledFrame):
            systems.append(item.system)
        else:
            raise TypeError(
                f"item {k} is {type(item).__name__}, not AtomicSystem or LabeledFrame")
    if not systems:
        raise ValueError("expected at least one system")
    return systems


def fitted_species(frames) -> np.ndarray:
    """Sorted unique atomic numbers present in the frames."""
    return np.unique(np.concatenate([f.system.species for f in frames]))


def flag_unknown_species(systems, known: np.ndarray) -> np.ndarray:
    """Per-frame True where a species was never seen in training.

    Emits one warning naming the offending species; callers attach the
    flags to their reports.
    """
    known = np.asarray(known)
    flags = np.array([bool(np.setdiff1d(s.species, known).size) for s in systems])
    if flags.any():
        strange = np.unique(np.concatenate(
            [np.setdiff1d(s.species, known) for s in systems]))
        warnings.warn(
            f"species {strange.tolist()} absent from training shifts; "
            f"{int(flags.sum())} frame(s) flagged", stacklevel=2)
    return flags
