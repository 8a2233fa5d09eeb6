"""Local-frame equivariant interatomic potential.

Per edge, an orthonormal frame (e1 from the bond, e2/e3 from centroid
cross products with a smooth degeneracy gate) turns vector geometry into
invariant scalars and back.  Messages mix invariant features of both
endpoints (with a rotary frame-transition on the h-derived block), a
radial basis, the local structure encoding over common neighbors, and
scalarized vector features; gated heads weight the message, and both the
invariant and vector residual streams aggregate by canonical sums so a
relabeling of atoms reproduces outputs bit for bit.

Everything runs on the diffcore tape: forces are the exact reverse-mode
gradient of the energy, and stress comes from a symmetric strain leaf
applied to positions and cell in the same pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .elements import MAX_SPECIES
from .geometry import (
    DEGENERATE_CROSS,
    FRAME_EPSILON,
    AtomicSystem,
    EdgeEnvironment,
    Graph,
    build_neighbor_list,
    edge_environment,
)

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters (defaults follow the small setup)."""

    num_layers: int = 3
    hidden_channels: int = 128
    num_heads: int = 16
    num_basis: int = 32
    cutoff: float = 5.0
    rope_enabled: bool = True
    temporal_enabled: bool = True
    lse_enabled: bool = True

    def __post_init__(self):
        d, heads = self.hidden_channels, self.num_heads
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if d < 2 or d % 2 != 0:
            raise ValueError("hidden_channels must be even (channels pair up)")
        if heads < 1 or d % heads != 0:
            raise ValueError("hidden_channels must be divisible by num_heads")
        if (d // heads) % 2 != 0:
            # a channel pair must never straddle two heads
            raise ValueError("hidden_channels / num_heads must be even")
        if self.num_basis < 1:
            raise ValueError("num_basis must be >= 1")
        if not 0.0 < self.cutoff <= 50.0:
            raise ValueError("cutoff must be in (0, 50] A")

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_channels": self.hidden_channels,
            "num_heads": self.num_heads,
            "num_basis": self.num_basis,
            "cutoff": self.cutoff,
            "rope_enabled": self.rope_enabled,
            "temporal_enabled": self.temporal_enabled,
            "lse_enabled": self.lse_enabled,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "ModelConfig":
        return cls(**payload)


@dataclass
class ModelState:
    """All trainable arrays, keyed by name; float64 throughout."""

    params: dict[str, np.ndarray]

    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def copy(self) -> "ModelState":
        return ModelState({k: v.copy() for k, v in self.params.items()})

    def check_finite(self) -> None:
        for name, array in self.params.items():
            if not np.isfinite(array).all():
                raise FloatingPointError(f"parameter {name} contains non-finite values")


@dataclass
class Prediction:
    energy: float
    forces: np.ndarray
    stress: np.ndarray | None = None


def init_state(config: ModelConfig, seed: int = 0) -> ModelState:
    """Random parameters; zero-init for RoPE head and temporal kernels so
    the model starts as a plain message-passing network."""
    rng = np.random.default_rng(seed)
    d, heads, basis = config.hidden_channels, config.num_heads, config.num_basis

    def linear(fan_in, fan_out):
        return rng.normal(scale=1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    params: dict[str, np.ndarray] = {
        "embed": rng.normal(scale=1.0, size=(MAX_SPECIES, d)),
        "shifts": np.zeros(MAX_SPECIES),
        "scale": np.ones(1),
        "readout.w1": linear(d, d),
        "readout.b1": np.zeros(d),
        "readout.w2": linear(d, 1),
        "readout.b2": np.zeros(1),
    }
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        params[p + "ln_gain"] = np.ones(d)
        params[p + "ln_bias"] = np.zeros(d)
        params[p + "w_hi"] = linear(d, d)
        params[p + "w_hj"] = linear(d, d)
        params[p + "w_rope"] = np.zeros((d, heads))
        params[p + "b_rope"] = np.zeros(heads)
        params[p + "w_lse_h"] = linear(d, d)
        params[p + "w_lse_s"] = linear(3, d)
        params[p + "b_lse"] = np.zeros(d)
        params[p + "w_lse_out"] = linear(d, d)
        params[p + "w_msg_a"] = linear(d, d)
        params[p + "w_msg_sv"] = linear(3 * d, d)
        params[p + "w_msg_rbf"] = linear(basis, d)
        params[p + "b_msg"] = np.zeros(d)
        params[p + "w_msg_out"] = linear(d, d)
        params[p + "b_msg_out"] = np.zeros(d)
        params[p + "w_score"] = rng.normal(scale=1.0 / np.sqrt(d), size=(1, d))
        params[p + "w_vec"] = linear(d, 4 * d)
        params[p + "w_upd1"] = linear(d, d)
        params[p + "w_upd2"] = linear(d, d)
        params[p + "temporal"] = np.zeros((d, d))
    return ModelState(params)


# ---------------------------------------------------------------------------
# reference pieces (numpy, mirrored on the tape in _forward)

def rbf_expand(distance, config: ModelConfig) -> np.ndarray:
    """Gaussian basis on [0, cutoff] under a cosine cutoff envelope."""
    d = np.asarray(distance, dtype=np.float64)
    if np.any(d <= 0.0) or np.any(d > config.cutoff):
        raise ValueError("distances must lie in (0, cutoff]")
    centers = np.linspace(0.0, config.cutoff, config.num_basis)
    gamma = (config.num_basis / config.cutoff) ** 2
    envelope = 0.5 * (np.cos(np.pi * d / config.cutoff) + 1.0)
    return np.exp(-gamma * (d[..., None] - centers) ** 2) * envelope[..., None]


def rope_thetas(config: ModelConfig) -> np.ndarray:
    """Base frequencies theta_n = 10000^(-2(n-1)/d) for pair index n."""
    d = config.hidden_channels
    n = np.arange(1, d // 2 + 1)
    return 10000.0 ** (-2.0 * (n - 1) / d)


def _pair_head_map(config: ModelConfig) -> np.ndarray:
    """(heads, d/2) one-hot: which head owns each channel pair."""
    d, heads = config.hidden_channels, config.num_heads
    pair_head = (np.arange(d // 2) * 2) // (d // heads)
    onehot = np.zeros((heads, d // 2))
    onehot[pair_head, np.arange(d // 2)] = 1.0
    return onehot


def rope_angles(h: np.ndarray, w: np.ndarray, b: np.ndarray,
                config: ModelConfig) -> np.ndarray:
    """Per-pair rotation angles theta_n * a[head(n)] from a scalar head."""
    a = h @ w + b  # (..., heads)
    return (a @ _pair_head_map(config)) * rope_thetas(config)


def temporal_connect(h_l1: np.ndarray, h_l2: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Channelwise bilinear form h_l3[c] = (M h_l2)[c] * h_l1[c]."""
    return (h_l2 @ kernel.T) * h_l1


def _head_pool(config: ModelConfig) -> np.ndarray:
    """(d, heads) one-hot pooling of channels into their heads."""
    d, heads = config.hidden_channels, config.num_heads
    pool = np.zeros((d, heads))
    pool[np.arange(d), np.arange(d) // (d // heads)] = 1.0
    return pool


# ---------------------------------------------------------------------------
# batch packing

@dataclass
class GraphCache:
    """Neighbor list plus edge environments for one system (integers only
    depend on the topology, so MD/training reuse them per configuration)."""

    system: AtomicSystem
    graph: Graph
    env: EdgeEnvironment


def build_cache(system: AtomicSystem, config: ModelConfig) -> GraphCache:
    graph = build_neighbor_list(system, config.cutoff)
    return GraphCache(system, graph, edge_environment(graph, system))


@dataclass
class PackedBatch:
    """Frames concatenated into one graph with per-frame bookkeeping."""

    species: np.ndarray          # (N,)
    positions: np.ndarray        # (N, 3)
    frame_of_atom: np.ndarray    # (N,)
    n_frames: int
    atoms_per_frame: np.ndarray  # (F,)
    edge_target: np.ndarray      # (E,) global atom ids
    edge_source: np.ndarray
    edge_offsets: np.ndarray     # (E, 3) cartesian shift . cell
    union_owner: np.ndarray      # (U,) edge ids
    union_atoms: np.ndarray      # (U,) global atom ids
    union_offsets: np.ndarray    # (U, 3) cartesian
    inter_owner: np.ndarray      # (C,)
    inter_atoms: np.ndarray
    inter_offsets: np.ndarray    # (C, 3)
    # raw integer shifts so a taped cell can rebuild the offsets (stress)
    edge_shifts: np.ndarray
    union_shifts_int: np.ndarray
    inter_shifts_int: np.ndarray


def pack(caches: list[GraphCache]) -> PackedBatch:
    species, positions, frame_of_atom, atoms_per_frame = [], [], [], []
    tgt, src, e_off, e_shift = [], [], [], []
    u_own, u_atom, u_off, u_shift = [], [], [], []
    c_own, c_atom, c_off, c_shift = [], [], [], []
    atom_base = 0
    edge_base = 0
    for f, cache in enumerate(caches):
        system, graph, env = cache.system, cache.graph, cache.env
        n = system.n_atoms
        cell = system.cell if system.cell is not None else np.zeros((3, 3))
        species.append(system.species)
        positions.append(system.positions)
        frame_of_atom.append(np.full(n, f))
        atoms_per_frame.append(n)
        tgt.append(graph.edge_index[:, 0] + atom_base)
        src.append(graph.edge_index[:, 1] + atom_base)
        e_off.append(graph.shifts @ cell)
        e_shift.append(graph.shifts)
        counts = np.diff(env.union_offsets)
        u_own.append(np.repeat(np.arange(graph.n_edges), counts) + edge_base)
        u_atom.append(env.union_atoms + atom_base)
        u_off.append(env.union_shifts @ cell)
        u_shift.append(env.union_shifts)
        inter_counts = np.diff(env.inter_offsets)
        c_own.append(np.repeat(np.arange(graph.n_edges), inter_counts) + edge_base)
        c_atom.append(env.inter_atoms + atom_base)
        c_off.append(env.inter_shifts @ cell)
        c_shift.append(env.inter_shifts)
        atom_base += n
        edge_base += graph.n_edges

    def cat(parts, dtype=None, width=None):
        if not parts or sum(len(p) for p in parts) == 0:
            shape = (0,) if width is None else (0, width)
            return np.zeros(shape, dtype=dtype or np.float64)
        return np.concatenate(parts).astype(dtype) if dtype else np.concatenate(parts)

    return PackedBatch(
        species=cat(species, np.int64),
        positions=np.concatenate(positions, axis=0),
        frame_of_atom=cat(frame_of_atom, np.int64),
        n_frames=len(caches),
        atoms_per_frame=np.array(atoms_per_frame, dtype=np.int64),
        edge_target=cat(tgt, np.int64),
        edge_source=cat(src, np.int64),
        edge_offsets=cat(e_off, width=3),
        union_owner=cat(u_own, np.int64),
        union_atoms=cat(u_atom, np.int64),
        union_offsets=cat(u_off, width=3),
        inter_owner=cat(c_own, np.int64),
        inter_atoms=cat(c_atom, np.int64),
        inter_offsets=cat(c_off, width=3),
        edge_shifts=cat(e_shift, np.int64, width=3),
        union_shifts_int=cat(u_shift, np.int64, width=3),
        inter_shifts_int=cat(c_shift, np.int64, width=3),
    )


# ---------------------------------------------------------------------------
# taped forward

def _layer_norm(g, gain, bias):
    mu = ad.mean(g, axis=1, keepdims=True)
    centered = ad.sub(g, mu)
    var = ad.mean(ad.mul(centered, centered), axis=1, keepdims=True)
    inv = ad.power(ad.add(var, var.tape.constant(LN_EPS)), -0.5)
    return ad.add(ad.mul(ad.mul(centered, inv), gain), bias)


def _axis_cols(t):
    return [ad.slice_axis(t, 1, k, k + 1) for k in range(3)]


def _forward(tape, config, tp, batch, x, edge_off, union_off, inter_off,
             return_features: bool = False):
    """Per-atom energies (N, 1) on the tape.

    tp maps parameter names to taped tensors; x is the (possibly strained)
    positions tensor; the *_off tensors are cartesian image offsets.  With
    return_features, also hands back the invariant stream fed to the
    readout and the vector features (N, 3d in x|y|z blocks).
    """
    d = config.hidden_channels
    n_atoms = batch.species.shape[0]
    tgt, src = batch.edge_target, batch.edge_source

    xi = ad.gather(x, tgt)
    xj = ad.gather(x, src)
    rij = ad.add(ad.sub(xi, xj), edge_off)
    dij2 = ad.sum_(ad.mul(rij, rij), axis=1, keepdims=True)
    dij = ad.sqrt(dij2)

    # radial basis under the cosine envelope
    envelope = ad.mul_const(
        ad.add(ad.cos(ad.mul_const(dij, np.pi / config.cutoff)), tape.constant(1.0)), 0.5
    )
    centers = tape.constant(np.linspace(0.0, config.cutoff, config.num_basis)[None, :])
    gamma = (config.num_basis / config.cutoff) ** 2
    offsets = ad.sub(dij, centers)
    rbf = ad.mul(ad.exp(ad.mul_const(ad.mul(offsets, offsets), -gamma)), envelope)

    # membership switch: weight one well inside the cutoff, smooth fade to
    # zero at it, so set changes never step the energy
    r_on = SWITCH_ON_FRACTION * config.cutoff
    inv_ramp = 1.0 / (config.cutoff - r_on)
    one = tape.constant(1.0)

    def member_weight(delta):
        d = ad.sqrt(ad.sum_(ad.mul(delta, delta), axis=1, keepdims=True))
        u = ad.clip(ad.mul_const(ad.sub(d, tape.constant(r_on)), inv_ramp), 0.0, 1.0)
        return ad.mul_const(ad.add(ad.cos(ad.mul_const(u, np.pi)), one), 0.5)

    # weighted local centroid over union members, then the edge frame; the
    # endpoints enter at weight one, members by the smooth union of their
    # switch weights to either endpoint
    xj_img = ad.sub(xi, rij)
    members = ad.sub(ad.gather(x, batch.union_atoms), union_off)
    w_i = member_weight(ad.sub(members, ad.gather(xi, batch.union_owner)))
    w_j = member_weight(ad.sub(members, ad.gather(xj_img, batch.union_owner)))
    w_union = ad.sub(one, ad.mul(ad.sub(one, w_i), ad.sub(one, w_j)))
    centroid_sum = ad.segment_sum(ad.mul(members, w_union), batch.union_owner, len(tgt))
    weight_sum = ad.segment_sum(w_union, batch.union_owner, len(tgt))
    num = ad.add(ad.add(xi, xj_img), centroid_sum)
    xbar = ad.div(num, ad.add(weight_sum, tape.constant(2.0)))
    a_vec = ad.sub(xi, xbar)
    b_vec = ad.sub(xj, xbar)
    cvec = ad.cross(a_vec, b_vec)
    c2 = ad.sum_(ad.mul(cvec, cvec), axis=1, keepdims=True)
    mask = tape.constant((c2.data >= DEGENERATE_CROSS**2).astype(np.float64))
    gate = ad.mul(ad.div(c2, ad.add(c2, tape.constant(FRAME_EPSILON**2))), mask)
    safe_c = ad.sqrt(ad.add(c2, ad.sub(tape.constant(1.0), mask)))
    e1 = ad.div(rij, dij)
    e2g = ad.mul(ad.div(cvec, safe_c), gate)
    wvec = ad.cross(rij, cvec)
    w2 = ad.sum_(ad.mul(wvec, wvec), axis=1, keepdims=True)
    safe_w = ad.sqrt(ad.add(w2, ad.sub(tape.constant(1.0), mask)))
    e3g = ad.mul(ad.div(wvec, safe_w), gate)
    e1c, e2c, e3c = _axis_cols(e1), _axis_cols(e2g), _axis_cols(e3g)

    midpoint = ad.sub(xi, ad.mul_const(rij, 0.5))
    if config.lse_enabled:
        inter_pos = ad.sub(ad.gather(x, batch.inter_atoms), inter_off)
        disp = ad.sub(inter_pos, ad.gather(midpoint, batch.inter_owner))
        s_cols = [
            ad.dot(ad.gather(axes, batch.inter_owner), disp, keepdims=True)
            for axes in (e1, e2g, e3g)
        ]
        s_inter = ad.concat(s_cols, axis=1)

    thetas = tape.constant(rope_thetas(config)[None, :])
    head_map = tape.constant(_pair_head_map(config))
    head_pool = tape.constant(_head_pool(config))
    head_expand = ad.transpose(head_pool)

    g_stream = ad.gather(tp["embed"], batch.species - 1)
    v = tape.constant(np.zeros((n_atoms, 3 * d)))
    temporal_total = None

    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        hn = _layer_norm(g_stream, tp[p + "ln_gain"], tp[p + "ln_bias"])

        base = ad.add(
            ad.matmul(ad.gather(hn, tgt), tp[p + "w_hi"]),
            ad.matmul(ad.gather(hn, src), tp[p + "w_hj"]),
        )
        if config.rope_enabled:
            a_scal = ad.add(ad.matmul(hn, tp[p + "w_rope"]), tp[p + "b_rope"])
            angles = ad.mul(ad.matmul(a_scal, head_map), thetas)
            rel = ad.sub(ad.gather(angles, tgt), ad.gather(angles, src))
            base = ad.rotate_pairs(base, rel)

        z = ad.add(ad.add(base, ad.matmul(rbf, tp[p + "w_msg_rbf"])), tp[p + "b_msg"])

        if config.lse_enabled:
            sender = ad.matmul(ad.gather(hn, batch.inter_atoms), tp[p + "w_lse_h"])
            lse_pre = ad.silu(ad.add(
                ad.add(sender, ad.matmul(s_inter, tp[p + "w_lse_s"])), tp[p + "b_lse"]
            ))
            lse = ad.matmul(
                ad.segment_sum(lse_pre, batch.inter_owner, len(tgt)), tp[p + "w_lse_out"]
            )
            z = ad.add(z, ad.matmul(lse, tp[p + "w_msg_a"]))

        vj = ad.gather(v, src)
        vj_cols = [ad.slice_axis(vj, 1, k * d, (k + 1) * d) for k in range(3)]
        sv = []
        for axis_cols in (e1c, e2c, e3c):
            acc = ad.mul(axis_cols[0], vj_cols[0])
            acc = ad.add(acc, ad.mul(axis_cols[1], vj_cols[1]))
            acc = ad.add(acc, ad.mul(axis_cols[2], vj_cols[2]))
            sv.append(acc)
        z = ad.add(z, ad.matmul(ad.concat(sv, axis=1), tp[p + "w_msg_sv"]))

        m_pre = ad.silu(z)

        scores = ad.matmul(ad.mul(m_pre, tp[p + "w_score"]), head_pool)
        stable = ad.sub(scores, tape.constant(
            scores.data.max(axis=1, keepdims=True) if scores.shape[0] else
            np.zeros((0, scores.shape[1]))
        ))
        exp_s = ad.exp(stable)
        head_gates = ad.div(exp_s, ad.sum_(exp_s, axis=1, keepdims=True))
        gates_full = ad.matmul(head_gates, head_expand)

        message = ad.mul(ad.add(ad.matmul(m_pre, tp[p + "w_msg_out"]), tp[p + "b_msg_out"]),
                         gates_full)
        message = ad.mul(message, envelope)

        agg = ad.segment_sum(message, tgt, n_atoms)
        delta = ad.matmul(ad.silu(ad.matmul(agg, tp[p + "w_upd1"])), tp[p + "w_upd2"])
        g_new = ad.add(g_stream, delta)

        alpha = ad.matmul(message, tp[p + "w_vec"])
        a_parts = [ad.slice_axis(alpha, 1, k * d, (k + 1) * d) for k in range(4)]
        dv = []
        for k in range(3):
            acc = ad.mul(e1c[k], a_parts[0])
            acc = ad.add(acc, ad.mul(e2c[k], a_parts[1]))
            acc = ad.add(acc, ad.mul(e3c[k], a_parts[2]))
            acc = ad.add(acc, ad.mul(a_parts[3], vj_cols[k]))
            dv.append(acc)
        v = ad.add(v, ad.segment_sum(ad.concat(dv, axis=1), tgt, n_atoms))

        if config.temporal_enabled:
            t_res = ad.mul(ad.matmul(g_new, ad.transpose(tp[p + "temporal"])), g_stream)
            temporal_total = t_res if temporal_total is None else ad.add(temporal_total, t_res)
            g_stream = ad.add(g_new, t_res)
        else:
            g_stream = g_new

    readout_in = g_stream if temporal_total is None else ad.add(g_stream, temporal_total)
    hidden = ad.silu(ad.add(ad.matmul(readout_in, tp["readout.w1"]), tp["readout.b1"]))
    per_atom = ad.add(ad.matmul(hidden, tp["readout.w2"]), tp["readout.b2"])
    shift_rows = ad.reshape(ad.gather(tp["shifts"], batch.species - 1), (n_atoms, 1))
    atom_e = ad.add(shift_rows, ad.mul(per_atom, tp["scale"]))
    if return_features:
        return atom_e, readout_in, v
    return atom_e


def _taped_params(tape, state: ModelState, as_leaves: bool):
    record = tape.leaf if as_leaves else tape.constant
    return {name: record(array) for name, array in sorted(state.params.items())}


def forward_packed(tape, batch: PackedBatch, config: ModelConfig, tp):
    """Per-frame energies (F, 1) plus the positions leaf (for forces)."""
    x = tape.leaf(batch.positions)
    edge_off = tape.constant(batch.edge_offsets)
    union_off = tape.constant(batch.union_offsets)
    inter_off = tape.constant(batch.inter_offsets)
    atom_e = _forward(tape, config, tp, batch, x, edge_off, union_off, inter_off)
    frame_e = ad.segment_sum(atom_e, batch.frame_of_atom, batch.n_frames)
    return frame_e, x


def node_features(system: AtomicSystem, config: ModelConfig, state: ModelState,
                  cache: GraphCache | None = None):
    """Final invariant features (n, d) and vector features (n, 3, d), numpy."""
    if cache is None:
        cache = build_cache(system, config)
    batch = pack([cache])
    tape = ad.Tape()
    tp = _taped_params(tape, state, as_leaves=False)
    x = tape.constant(batch.positions)
    _, h, v = _forward(
        tape, config, tp, batch, x,
        tape.constant(batch.edge_offsets), tape.constant(batch.union_offsets),
        tape.constant(batch.inter_offsets), return_features=True,
    )
    d = config.hidden_channels
    vectors = np.stack([v.data[:, k * d:(k + 1) * d] for k in range(3)], axis=1)
    features = h.data.copy()
    tape.release()
    return features, vectors


def forward_energy(system: AtomicSystem, config: ModelConfig, state: ModelState,
                   cache: GraphCache | None = None):
    """Single-system energy on a fresh tape; returns (tape, energy, x_leaf)."""
    if cache is None:
        cache = build_cache(system, config)
    batch = pack([cache])
    tape = ad.Tape()
    tp = _taped_params(tape, state, as_leaves=False)
    frame_e, x = forward_packed(tape, batch, config, tp)
    energy = ad.reshape(frame_e, ())
    return tape, energy, x


def predict(system: AtomicSystem, config: ModelConfig, state: ModelState,
            cache: GraphCache | None = None, compute_stress: bool | None = None) -> Prediction:
    """Energy, forces, and (for periodic systems) virial stress.

    Forces are -dE/dx from the same tape; stress is (1/V) dE/de under a
    symmetric strain e applied to positions and cell at e = 0.
    """
    if compute_stress is None:
        compute_stress = system.cell is not None
    if compute_stress and system.cell is None:
        raise ValueError("stress requires a periodic system")
    if cache is None:
        cache = build_cache(system, config)
    batch = pack([cache])
    tape = ad.Tape()
    tp = _taped_params(tape, state, as_leaves=False)

    x_leaf = tape.leaf(batch.positions)
    if compute_stress:
        strain = tape.leaf(np.zeros((3, 3)))
        sym = ad.mul_const(ad.add(strain, ad.transpose(strain)), 0.5)
        deform = ad.add(tape.constant(np.eye(3)), sym)
        x = ad.matmul(x_leaf, deform)
        cell_t = ad.matmul(tape.constant(system.cell), deform)
        edge_off = ad.matmul(tape.constant(batch.edge_shifts.astype(np.float64)), cell_t)
        union_off = ad.matmul(tape.constant(batch.union_shifts_int.astype(np.float64)), cell_t)
        inter_off = ad.matmul(tape.constant(batch.inter_shifts_int.astype(np.float64)), cell_t)
    else:
        x = x_leaf
        edge_off = tape.constant(batch.edge_offsets)
        union_off = tape.constant(batch.union_offsets)
        inter_off = tape.constant(batch.inter_offsets)

    try:
        atom_e = _forward(tape, config, tp, batch, x, edge_off, union_off, inter_off)
        energy = ad.reshape(ad.canonical_sum(atom_e), ())

        if compute_stress:
            grad_x, grad_eps = ad.gradient(energy, [x_leaf, strain])
            volume = abs(float(np.linalg.det(system.cell)))
            stress = grad_eps.data / volume
        else:
            grad_x = ad.gradient(energy, x_leaf)
            stress = None
        return Prediction(float(energy.data), -grad_x.data, stress)
    finally:
        tape.release()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"FPOT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, state: ModelState, extra: dict | None = None):
    """Self-describing binary checkpoint; identical inputs give identical bytes."""
    names = sorted(state.params)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "arrays": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(CHECKPOINT_VERSION.to_bytes(4, "little"))
        handle.write(len(blob).to_bytes(8, "little"))
        handle.write(blob)
        for name in names:
            handle.write(np.ascontiguousarray(state.params[name], dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Returns (config, state, extra); raises ValueError on malformed files."""
    with open(path, "rb") as handle:
        magic = handle.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version = int.from_bytes(handle.read(4), "little")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = int.from_bytes(handle.read(8), "little")
        header = json.loads(handle.read(header_len).decode())
        params = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = handle.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated checkpoint at array {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
        trailing = handle.read(1)
        if trailing:
            raise ValueError("trailing bytes after checkpoint payload")
    config = ModelConfig.from_dict(header["config"])
    return config, ModelState(params), header.get("extra", {})
