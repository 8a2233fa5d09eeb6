"""Atomic systems, periodic neighbor lists, and per-edge local frames.

The neighbor list bins atoms in fractional space; bins never get smaller
than the cutoff along any cell height, so scanning adjacent bins (with
wrap-around bookkeeping) finds every periodic image within the cutoff.
For cells thinner than the cutoff the bin count along that axis is one
and the offset range widens, which degenerates into an exhaustive image
enumeration — small and large cells share one code path.

Frames, scalarization, and centroids here are plain-numpy reference
implementations; the network re-derives them on the autodiff tape and is
tested against these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .elements import MAX_SPECIES

MAX_CUTOFF = 50.0  # A; guard against accidental O(n^2 * images) blowups
FRAME_EPSILON = 1e-3  # A^2; degeneracy gate width
DEGENERATE_CROSS = 1e-12  # A^2; below this the frame collapses exactly
SWITCH_ON_FRACTION = 0.9  # membership weights fade over the last 10% of the cutoff


class GeometryError(ValueError):
    """Invalid system or neighbor-list input."""


@dataclass
class AtomicSystem:
    """Atom species/positions plus an optional periodic cell.

    species are atomic numbers (1..118), positions are n x 3 in angstrom,
    cell rows are lattice vectors in angstrom.  A cell is present exactly
    when at least one pbc flag is set.
    """

    species: np.ndarray
    positions: np.ndarray
    cell: np.ndarray | None = None
    pbc: tuple[bool, bool, bool] = (False, False, False)

    def __post_init__(self):
        self.species = np.ascontiguousarray(np.asarray(self.species, dtype=np.int64).reshape(-1))
        self.positions = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        self.pbc = tuple(bool(p) for p in self.pbc)
        if len(self.pbc) != 3:
            raise GeometryError("pbc must have exactly three flags")
        n = self.species.shape[0]
        if n < 1:
            raise GeometryError("system needs at least one atom")
        if self.positions.shape != (n, 3):
            raise GeometryError(f"positions shape {self.positions.shape} does not match {n} atoms")
        if self.species.min(initial=MAX_SPECIES) < 1 or self.species.max(initial=1) > MAX_SPECIES:
            raise GeometryError("species must be atomic numbers in 1..118")
        if not np.isfinite(self.positions).all():
            raise GeometryError("positions must be finite")
        if any(self.pbc):
            if self.cell is None:
                raise GeometryError("periodic flags set but no cell given")
            self.cell = np.ascontiguousarray(np.asarray(self.cell, dtype=np.float64))
            if self.cell.shape != (3, 3):
                raise GeometryError(f"cell shape {self.cell.shape}, expected (3, 3)")
            if abs(float(np.linalg.det(self.cell))) <= 1e-6:
                raise GeometryError("cell is degenerate (|det| <= 1e-6 A^3)")
        elif self.cell is not None:
            raise GeometryError("cell given but all pbc flags false")

    @property
    def n_atoms(self) -> int:
        return self.species.shape[0]

    def copy(self) -> "AtomicSystem":
        return AtomicSystem(
            self.species.copy(),
            self.positions.copy(),
            None if self.cell is None else self.cell.copy(),
            self.pbc,
        )


@dataclass
class Graph:
    """Directed edge list with periodic shifts and edge geometry.

    Edge e runs j -> i with displacement rij = x_i - x_j + shift . cell.
    Edges are sorted by (i, j, shift); neighbor_offsets/neighbor_edges
    form a CSR view of the edges whose target is each atom.
    """

    n_atoms: int
    cutoff: float
    edge_index: np.ndarray        # (E, 2) target i, source j
    shifts: np.ndarray            # (E, 3) integer
    rij: np.ndarray               # (E, 3)
    dij: np.ndarray               # (E,)
    neighbor_offsets: np.ndarray  # (n_atoms + 1,)
    neighbor_edges: np.ndarray    # (E,) edge ids grouped by target atom

    @property
    def n_edges(self) -> int:
        return self.edge_index.shape[0]

    def edges(self) -> list[tuple[int, int, tuple[int, int, int]]]:
        return [
            (int(i), int(j), tuple(int(s) for s in shift))
            for (i, j), shift in zip(self.edge_index, self.shifts)
        ]

    def incident_edges(self, atom: int) -> np.ndarray:
        lo, hi = self.neighbor_offsets[atom], self.neighbor_offsets[atom + 1]
        return self.neighbor_edges[lo:hi]


def cell_heights(cell: np.ndarray) -> np.ndarray:
    """Perpendicular heights of the cell along each lattice direction."""
    inverse = np.linalg.inv(cell)
    return 1.0 / np.linalg.norm(inverse, axis=0)


def _expand_csr(offsets: np.ndarray, data: np.ndarray, keys: np.ndarray):
    """Return (owner, values) concatenating data[offsets[k]:offsets[k+1]] per key."""
    counts = offsets[keys + 1] - offsets[keys]
    total = int(counts.sum())
    owner = np.repeat(np.arange(len(keys)), counts)
    if total == 0:
        return owner, np.empty(0, dtype=data.dtype)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    local = np.arange(total) - np.repeat(starts, counts)
    values = data[np.repeat(offsets[keys], counts) + local]
    return owner, values


def build_neighbor_list(system: AtomicSystem, cutoff: float) -> Graph:
    """All directed edges (both directions, all periodic images) within cutoff."""
    if not 0.0 < cutoff <= MAX_CUTOFF:
        raise GeometryError(f"cutoff must be in (0, {MAX_CUTOFF}] A, got {cutoff}")
    n = system.n_atoms
    if any(system.pbc):
        i_idx, j_idx, shifts = _periodic_candidates(system, cutoff)
        offsets = shifts @ system.cell
    else:
        i_idx, j_idx = _nonperiodic_candidates(system, cutoff)
        shifts = np.zeros((len(i_idx), 3), dtype=np.int64)
        offsets = np.zeros((len(i_idx), 3))

    rij = system.positions[i_idx] - system.positions[j_idx] + offsets
    dij = np.linalg.norm(rij, axis=1)
    keep = dij <= cutoff
    self_pair = (i_idx == j_idx) & np.all(shifts == 0, axis=1)
    keep &= ~self_pair
    if np.any(keep & (dij <= DEGENERATE_CROSS)):
        raise GeometryError("overlapping atoms: zero-distance pair within cutoff")
    i_idx, j_idx, shifts, rij, dij = (
        i_idx[keep], j_idx[keep], shifts[keep], rij[keep], dij[keep],
    )

    order = np.lexsort((shifts[:, 2], shifts[:, 1], shifts[:, 0], j_idx, i_idx))
    edge_index = np.stack([i_idx[order], j_idx[order]], axis=1)
    shifts = np.ascontiguousarray(shifts[order])
    rij = np.ascontiguousarray(rij[order])
    dij = np.ascontiguousarray(dij[order])

    neighbor_offsets = np.searchsorted(edge_index[:, 0], np.arange(n + 1))
    neighbor_edges = np.arange(edge_index.shape[0])
    return Graph(n, float(cutoff), edge_index, shifts, rij, dij, neighbor_offsets, neighbor_edges)


def _nonperiodic_candidates(system: AtomicSystem, cutoff: float):
    n = system.n_atoms
    pos = system.positions
    rows_i, rows_j = [], []
    chunk = max(1, int(2**22 // max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        d2 = np.sum((pos[start:stop, None, :] - pos[None, :, :]) ** 2, axis=-1)
        ii, jj = np.nonzero(d2 <= cutoff * cutoff)
        rows_i.append(ii + start)
        rows_j.append(jj)
    return np.concatenate(rows_i), np.concatenate(rows_j)


def _periodic_candidates(system: AtomicSystem, cutoff: float):
    n = system.n_atoms
    cell = system.cell
    periodic = np.array(system.pbc)
    heights = cell_heights(cell)

    frac = system.positions @ np.linalg.inv(cell)
    wraps = np.where(periodic, np.floor(frac), 0.0)
    frac_w = frac - wraps  # wrapped into [0,1) along periodic axes
    wraps = wraps.astype(np.int64)

    # Bin counts: at least the cutoff per bin along each height.
    lo = np.where(periodic, 0.0, frac_w.min(axis=0))
    hi = np.where(periodic, 1.0, frac_w.max(axis=0) + 1e-9)
    extent = np.maximum(hi - lo, 1e-9)
    m = np.maximum(1, np.floor(extent * heights / cutoff).astype(np.int64))
    bin_frac = extent / m

    bins = np.floor((frac_w - lo) / bin_frac).astype(np.int64)
    bins = np.minimum(np.maximum(bins, 0), m - 1)

    flat = (bins[:, 0] * m[1] + bins[:, 1]) * m[2] + bins[:, 2]
    atom_order = np.argsort(flat, kind="stable")
    sorted_flat = flat[atom_order]
    nbins = int(np.prod(m))
    bin_offsets = np.searchsorted(sorted_flat, np.arange(nbins + 1))

    # Offset ranges: 1 when bins are at least cutoff wide, larger for thin cells.
    reach = np.ceil(cutoff / (bin_frac * heights)).astype(np.int64)
    reach = np.where(periodic, reach, np.minimum(reach, m))
    axes_ranges = [np.arange(-int(r), int(r) + 1) for r in reach]

    atom_ids = np.arange(n)
    out_i, out_j, out_shift = [], [], []
    for o0 in axes_ranges[0]:
        for o1 in axes_ranges[1]:
            for o2 in axes_ranges[2]:
                offset = np.array([o0, o1, o2])
                tiled = bins + offset
                wrap_count = np.where(periodic, np.floor_divide(tiled, m), 0)
                nb = tiled - wrap_count * m
                valid = np.all((nb >= 0) & (nb < m), axis=1)
                if not valid.any():
                    continue
                ids = atom_ids[valid]
                nb_flat = (nb[valid, 0] * m[1] + nb[valid, 1]) * m[2] + nb[valid, 2]
                owner, members = _expand_csr(bin_offsets, atom_order, nb_flat)
                if len(members) == 0:
                    continue
                i_sel = ids[owner]
                u = wrap_count[valid][owner]
                # shift in original coordinates; r = x_i - x_j + shift . cell
                shift = -u - wraps[i_sel] + wraps[members]
                out_i.append(i_sel)
                out_j.append(members)
                out_shift.append(shift)
    if not out_i:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty((0, 3), dtype=np.int64)
    return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_shift)


# ---------------------------------------------------------------------------
# minimum image and edge environments

def minimum_image_shift(vectors: np.ndarray, cell: np.ndarray | None, pbc) -> np.ndarray:
    """Integer shifts s minimizing |vectors - s . cell| along periodic axes.

    Fractional rounding plus a +-1 refinement, exact for every cell whose
    nearest image lies within one lattice step of the rounded guess (all
    non-pathological cells).
    """
    vectors = np.atleast_2d(vectors)
    if cell is None or not any(pbc):
        return np.zeros((len(vectors), 3), dtype=np.int64)
    periodic = np.array(pbc)
    frac = vectors @ np.linalg.inv(cell)
    guess = np.where(periodic, np.round(frac), 0.0).astype(np.int64)
    best_shift = guess.copy()
    best_d2 = np.full(len(vectors), np.inf)
    deltas = [np.arange(-1, 2) if p else np.arange(1) for p in periodic]
    for d0 in deltas[0]:
        for d1 in deltas[1]:
            for d2_ in deltas[2]:
                cand = guess + np.array([d0, d1, d2_])
                disp = vectors - cand @ cell
                dist2 = np.sum(disp * disp, axis=1)
                better = dist2 < best_d2
                best_d2[better] = dist2[better]
                best_shift[better] = cand[better]
    return best_shift


@dataclass
class EdgeEnvironment:
    """Per-edge atom memberships used by frames and structure encoding.

    Members are (atom, image) pairs drawn from the endpoints' own neighbor
    lists: union_* covers everything within the cutoff of either endpoint
    (the centroid neighborhood, endpoints themselves excluded -- they enter
    the centroid analytically at weight one); inter_* covers the common
    neighbors within the cutoff of both.  member shifts realize the image
    each entry was found at, in the frame of reference of the edge's
    target atom.  Membership itself is discrete; the smooth part is the
    switch_weight factor consumers apply per member, which reaches zero
    exactly where an entry drops off these lists, so energies stay
    continuous as atoms cross the cutoff.
    """

    union_offsets: np.ndarray
    union_atoms: np.ndarray
    union_shifts: np.ndarray
    inter_offsets: np.ndarray
    inter_atoms: np.ndarray
    inter_shifts: np.ndarray


def edge_environment(graph: Graph, system: AtomicSystem) -> EdgeEnvironment:
    """Compute centroid-member and common-neighbor images for every edge."""
    edge = graph.edge_index
    n_edges = graph.n_edges
    shifts = graph.shifts

    # Both endpoints contribute their incident edges as members.  A member
    # found from the source side lives near the source's edge image, so its
    # shift is translated by the owning edge's shift into the target frame.
    own_i, eid_i = _expand_csr(graph.neighbor_offsets, graph.neighbor_edges, edge[:, 0])
    own_j, eid_j = _expand_csr(graph.neighbor_offsets, graph.neighbor_edges, edge[:, 1])

    owners = np.concatenate([own_i, own_j])
    atoms = np.concatenate([edge[eid_i, 1], edge[eid_j, 1]])
    tot_shifts = np.concatenate([shifts[eid_i], shifts[eid_j] + shifts[own_j]])

    # Drop the endpoints: the target is (i, 0), the source image (j, s_e).
    at_target = (atoms == edge[owners, 0]) & np.all(tot_shifts == 0, axis=1)
    at_source = (atoms == edge[owners, 1]) & np.all(tot_shifts == shifts[owners], axis=1)
    keep = ~(at_target | at_source)
    owners, atoms, tot_shifts = owners[keep], atoms[keep], tot_shifts[keep]

    # Sort so duplicates (members reachable from both endpoints at the same
    # image) are adjacent; those duplicates are exactly the common neighbors.
    order = np.lexsort((tot_shifts[:, 2], tot_shifts[:, 1], tot_shifts[:, 0], atoms, owners))
    owners, atoms, tot_shifts = owners[order], atoms[order], tot_shifts[order]
    same = np.zeros(len(owners), dtype=bool)
    if len(owners) > 1:
        same[1:] = (
            (owners[1:] == owners[:-1]) & (atoms[1:] == atoms[:-1])
            & np.all(tot_shifts[1:] == tot_shifts[:-1], axis=1)
        )
    first = ~same
    union_owners, union_atoms = owners[first], atoms[first]
    union_shifts = tot_shifts[first]
    union_offsets = np.searchsorted(union_owners, np.arange(n_edges + 1))

    followed_by_dup = np.zeros(len(owners), dtype=bool)
    if len(owners) > 1:
        followed_by_dup[:-1] = same[1:]
    shared = first & followed_by_dup
    inter_owners, inter_atoms = owners[shared], atoms[shared]
    inter_shifts = tot_shifts[shared]
    inter_offsets = np.searchsorted(inter_owners, np.arange(n_edges + 1))

    return EdgeEnvironment(
        union_offsets, union_atoms, union_shifts,
        inter_offsets, inter_atoms, inter_shifts,
    )


# ---------------------------------------------------------------------------
# frames

@dataclass
class Frame:
    """Per-edge orthonormal triad with a smooth degeneracy gate."""

    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray
    gate: float


def switch_weight(distance, cutoff: float):
    """Membership weight: one inside SWITCH_ON_FRACTION * cutoff, zero beyond.

    The cosine ramp has zero slope at both ends, so weighted sums stay
    continuously differentiable as atoms cross the cutoff.  Everything the
    model aggregates over neighbor sets must be scaled by this factor (or a
    product of them); otherwise set membership flips would step the energy
    and molecular dynamics would not conserve it.
    """
    r_on = SWITCH_ON_FRACTION * cutoff
    u = np.clip((np.asarray(distance, dtype=np.float64) - r_on) / (cutoff - r_on), 0.0, 1.0)
    return 0.5 * (np.cos(np.pi * u) + 1.0)


def local_centroid(edge_id: int, graph: Graph, system: AtomicSystem,
                   environment: EdgeEnvironment | None = None) -> np.ndarray:
    """Weighted mean position of the edge neighborhood N(i) | N(j) | {i, j}.

    The endpoints enter at weight one; every other member is weighted by
    1 - (1 - w(d_i)) * (1 - w(d_j)) with w the switch_weight of its distance
    to each endpoint, a smooth union that equals the plain set mean whenever
    all members sit inside SWITCH_ON_FRACTION * cutoff and fades each member
    out exactly where it leaves the neighbor lists.
    """
    if environment is None:
        environment = edge_environment(graph, system)
    lo, hi = environment.union_offsets[edge_id], environment.union_offsets[edge_id + 1]
    atoms = environment.union_atoms[lo:hi]
    shifts = environment.union_shifts[lo:hi]
    positions = system.positions[atoms]
    offset = np.zeros(3) if system.cell is None else graph.shifts[edge_id] @ system.cell
    if system.cell is not None:
        positions = positions - shifts @ system.cell
    xi = system.positions[graph.edge_index[edge_id, 0]]
    xj = system.positions[graph.edge_index[edge_id, 1]] - offset
    d_i = np.linalg.norm(positions - xi, axis=1)
    d_j = np.linalg.norm(positions - xj, axis=1)
    w = 1.0 - (1.0 - switch_weight(d_i, graph.cutoff)) * (1.0 - switch_weight(d_j, graph.cutoff))
    return (xi + xj + (w[:, None] * positions).sum(axis=0)) / (2.0 + w.sum())


def compute_frame(rij: np.ndarray, xi: np.ndarray, xj: np.ndarray, xbar: np.ndarray) -> Frame:
    """Orthonormal edge frame (e1, e2, e3) and its degeneracy gate."""
    rij = np.asarray(rij, dtype=np.float64)
    dij = np.linalg.norm(rij)
    if dij <= 0.0:
        raise GeometryError("compute_frame requires dij > 0")
    e1 = rij / dij
    a = np.asarray(xi, dtype=np.float64) - xbar
    b = np.asarray(xj, dtype=np.float64) - xbar
    cvec = np.cross(a, b)
    c = np.linalg.norm(cvec)
    if c < DEGENERATE_CROSS:
        zero = np.zeros(3)
        return Frame(e1, zero, zero, 0.0)
    e2 = cvec / c
    wvec = np.cross(rij, cvec)
    e3 = wvec / np.linalg.norm(wvec)
    gate = c * c / (c * c + FRAME_EPSILON * FRAME_EPSILON)
    return Frame(e1, e2, e3, float(gate))


def scalarize(v: np.ndarray, frame: Frame) -> np.ndarray:
    """Project a vector onto the frame; the gate multiplies the axes that
    collapse at degeneracy so outputs stay smooth there."""
    v = np.asarray(v, dtype=np.float64)
    return np.array([
        frame.e1 @ v,
        frame.gate * (frame.e2 @ v),
        frame.gate * (frame.e3 @ v),
    ])


def tensorize(s: np.ndarray, frame: Frame) -> np.ndarray:
    """Rebuild a vector from an invariant triple."""
    s = np.asarray(s, dtype=np.float64)
    return s[0] * frame.e1 + s[1] * frame.e2 + s[2] * frame.e3


def wrap_positions(system: AtomicSystem) -> np.ndarray:
    """Positions wrapped into the cell along periodic axes (for output only)."""
    if system.cell is None:
        return system.positions.copy()
    frac = system.positions @ np.linalg.inv(system.cell)
    periodic = np.array(system.pbc)
    frac = np.where(periodic, frac - np.floor(frac), frac)
    return frac @ system.cell
