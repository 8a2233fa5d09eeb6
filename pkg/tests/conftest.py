"""Shared test helpers: rotations and brute-force neighbor enumeration."""

import numpy as np


def random_rotation(rng):
    """Haar-ish random proper rotation via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def brute_force_edges(system, cutoff):
    """Every directed edge within cutoff by exhaustive shift enumeration.

    Shift range per the oracle bound: ||s||_inf <= ceil(cutoff / shortest
    cell height) + 1 along periodic axes, 0 along free axes.
    """
    n = system.positions.shape[0]
    if system.cell is not None:
        inv = np.linalg.inv(system.cell)
        heights = 1.0 / np.linalg.norm(inv, axis=0)
        reach = int(np.ceil(cutoff / heights.min())) + 1
    else:
        reach = 0
    ranges = [range(-reach, reach + 1) if p else range(1) for p in system.pbc]
    edges = []
    for i in range(n):
        for j in range(n):
            for s0 in ranges[0]:
                for s1 in ranges[1]:
                    for s2 in ranges[2]:
                        s = np.array([s0, s1, s2])
                        if i == j and not s.any():
                            continue
                        r = system.positions[i] - system.positions[j]
                        if system.cell is not None:
                            r = r + s @ system.cell
                        d = float(np.linalg.norm(r))
                        if 0.0 < d <= cutoff:
                            edges.append((i, j, (s0, s1, s2)))
    return sorted(edges)
