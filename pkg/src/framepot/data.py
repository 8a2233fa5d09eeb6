"""Labeled configurations: extended-XYZ ingestion, splits, and an LJ oracle.

Energies are stored extensively (total eV per frame); error metrics are
reported intensively (meV/atom) elsewhere.  The writer emits a canonical
key order and shortest round-trip float formatting, so write -> parse ->
write is byte-identical.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .elements import MASSES, SYMBOLS, atomic_number
from .geometry import AtomicSystem, build_neighbor_list

SPLIT_NAMES = ("train", "val", "test")


class ExtxyzError(ValueError):
    """Malformed extended-XYZ input, carrying the offending line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class LabeledFrame:
    """One configuration with reference labels.

    has_energy/has_forces record whether the labels were present in the
    source; absent labels are zero-filled so shapes stay regular.
    """

    system: AtomicSystem
    energy: float = 0.0
    forces: np.ndarray | None = None
    stress: np.ndarray | None = None
    weight: float = 1.0
    has_energy: bool = True
    has_forces: bool = True
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.system.n_atoms
        if self.forces is None:
            self.forces = np.zeros((n, 3))
            self.has_forces = False
        self.forces = np.asarray(self.forces, dtype=np.float64)
        if self.forces.shape != (n, 3):
            raise ValueError(f"forces shape {self.forces.shape} does not match {n} atoms")
        self.energy = float(self.energy)
        if not np.isfinite(self.energy):
            raise ValueError("energy must be finite")
        if self.stress is not None:
            self.stress = np.asarray(self.stress, dtype=np.float64)
            if self.stress.shape != (3, 3):
                raise ValueError("stress must be 3x3")
        if self.weight < 0:
            raise ValueError("weight must be >= 0")


@dataclass
class Dataset:
    frames: list[LabeledFrame]
    source: str = "memory"
    content_hash: str = ""
    assignments: np.ndarray | None = None  # index into SPLIT_NAMES per frame
    split_seed: int | None = None
    split_ratios: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.content_hash:
            self.content_hash = content_hash(self.frames)

    def __len__(self) -> int:
        return len(self.frames)

    def subset(self, name: str) -> list[LabeledFrame]:
        if self.assignments is None:
            raise ValueError("dataset has not been split")
        tag = SPLIT_NAMES.index(name)
        return [f for f, a in zip(self.frames, self.assignments) if a == tag]


def content_hash(frames: list[LabeledFrame]) -> str:
    digest = hashlib.sha256()
    buffer = io.StringIO()
    write_extxyz(buffer, frames)
    digest.update(buffer.getvalue().encode())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# extended XYZ

def _format_float(x: float) -> str:
    return repr(float(x))


def _tokenize_comment(line: str, lineno: int) -> list[str]:
    tokens, current, quoted = [], [], False
    for ch in line:
        if ch == '"':
            quoted = not quoted
            current.append(ch)
        elif ch.isspace() and not quoted:
            if current:
                tokens.append("".join(current))
                current = []
        else:
            current.append(ch)
    if quoted:
        raise ExtxyzError(lineno, "unterminated quote in comment line")
    if current:
        tokens.append("".join(current))
    return tokens


def _parse_floats(text: str, count: int, lineno: int, what: str) -> np.ndarray:
    parts = text.split()
    if len(parts) != count:
        raise ExtxyzError(lineno, f"{what} needs {count} numbers, got {len(parts)}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ExtxyzError(lineno, f"unparsable float in {what}: {exc}") from None


def _parse_properties(spec: str, lineno: int):
    fields = spec.split(":")
    if len(fields) % 3 != 0 or not fields:
        raise ExtxyzError(lineno, f"malformed Properties spec {spec!r}")
    columns = []
    for name, kind, width in zip(fields[0::3], fields[1::3], fields[2::3]):
        if kind not in ("S", "R", "I", "L"):
            raise ExtxyzError(lineno, f"unknown Properties column type {kind!r}")
        try:
            width = int(width)
        except ValueError:
            raise ExtxyzError(lineno, f"bad column width in Properties spec {spec!r}") from None
        columns.append((name, kind, width))
    return columns


def parse_extxyz(stream) -> list[LabeledFrame]:
    """Parse a multi-frame extended-XYZ stream into labeled frames.

    Unknown comment-line keys are preserved verbatim in frame metadata;
    unknown per-atom columns are parsed and kept under metadata["columns"].
    A Lattice with all-false pbc is dropped (the system is treated as
    isolated).  Errors carry 1-based line numbers.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = stream.read().splitlines()
    frames = []
    lineno = 0
    while lineno < len(lines):
        if not lines[lineno].strip():  # tolerate blank lines between frames
            lineno += 1
            continue
        frames.append(_parse_frame(lines, lineno))
        n_atoms = int(lines[lineno].strip())
        lineno += 2 + n_atoms
    return frames


def _parse_frame(lines: list[str], start: int) -> LabeledFrame:
    header_no = start + 1
    try:
        n_atoms = int(lines[start].strip())
    except ValueError:
        raise ExtxyzError(header_no, f"expected atom count, got {lines[start]!r}") from None
    if n_atoms < 1:
        raise ExtxyzError(header_no, "atom count must be positive")
    if start + 1 >= len(lines):
        raise ExtxyzError(header_no + 1, "missing comment line")

    comment_no = header_no + 1
    keys: dict[str, str] = {}
    for token in _tokenize_comment(lines[start + 1], comment_no):
        key, sep, value = token.partition("=")
        if not sep:
            keys[token] = ""
            continue
        keys[key] = value.strip('"')

    cell = None
    if "Lattice" in keys:
        cell = _parse_floats(keys.pop("Lattice"), 9, comment_no, "Lattice").reshape(3, 3)
    if "pbc" in keys:
        flags = keys.pop("pbc").split()
        if len(flags) != 3 or any(f not in ("T", "F") for f in flags):
            raise ExtxyzError(comment_no, f"pbc must be three T/F flags")
        pbc = tuple(f == "T" for f in flags)
    else:
        pbc = (True, True, True) if cell is not None else (False, False, False)
    if not any(pbc):
        cell = None

    columns = _parse_properties(keys.pop("Properties", "species:S:1:pos:R:3"), comment_no)
    names = [c[0] for c in columns]
    if "species" not in names or "pos" not in names:
        raise ExtxyzError(comment_no, "Properties must include species and pos")
    total_cols = sum(width for _, _, width in columns)

    has_energy = "energy" in keys
    energy = float(_parse_floats(keys.pop("energy"), 1, comment_no, "energy")[0]) \
        if has_energy else 0.0
    stress = None
    if "stress" in keys:
        stress = _parse_floats(keys.pop("stress"), 9, comment_no, "stress").reshape(3, 3)
    weight = 1.0
    if "weight" in keys:
        weight = float(_parse_floats(keys.pop("weight"), 1, comment_no, "weight")[0])

    species = np.zeros(n_atoms, dtype=np.int64)
    data: dict[str, list] = {name: [] for name, _, _ in columns}
    for row in range(n_atoms):
        lineno = comment_no + 1 + row
        if start + 2 + row >= len(lines) or not lines[start + 2 + row].strip():
            raise ExtxyzError(lineno, f"expected {n_atoms} atom rows, file ends at row {row}")
        parts = lines[start + 2 + row].split()
        if len(parts) != total_cols:
            raise ExtxyzError(lineno, f"expected {total_cols} columns, got {len(parts)}")
        cursor = 0
        for name, kind, width in columns:
            chunk = parts[cursor:cursor + width]
            cursor += width
            if kind == "R":
                try:
                    data[name].append([float(p) for p in chunk])
                except ValueError as exc:
                    raise ExtxyzError(lineno, f"unparsable float in column {name}: {exc}") from None
            elif kind == "I":
                try:
                    data[name].append([int(p) for p in chunk])
                except ValueError as exc:
                    raise ExtxyzError(lineno, f"unparsable int in column {name}: {exc}") from None
            else:
                data[name].append(chunk if width > 1 else chunk[0])

    for row, label in enumerate(data["species"]):
        lineno = comment_no + 1 + row
        try:
            species[row] = int(label) if label.isdigit() else atomic_number(label)
        except (KeyError, ValueError):
            raise ExtxyzError(lineno, f"unknown species {label!r}") from None

    positions = np.array(data["pos"], dtype=np.float64)
    system = AtomicSystem(species, positions, cell, pbc)
    forces = np.array(data["forces"], dtype=np.float64) if "forces" in data else None

    metadata = dict(keys)
    extra = {n: np.array(v) for n, v in data.items() if n not in ("species", "pos", "forces")}
    if extra:
        metadata["columns"] = extra
    frame = LabeledFrame(
        system, energy, forces, stress, weight, metadata=metadata,
    )
    frame.has_energy = has_energy
    return frame


def write_extxyz(stream, frames) -> None:
    """Write frames in canonical extended-XYZ (fixed key order, repr floats)."""
    if isinstance(frames, LabeledFrame):
        frames = [frames]
    for frame in frames:
        system = frame.system
        n = system.n_atoms
        parts = []
        if system.cell is not None:
            flat = " ".join(_format_float(x) for x in system.cell.reshape(-1))
            parts.append(f'Lattice="{flat}"')
        props = "species:S:1:pos:R:3"
        if frame.has_forces:
            props += ":forces:R:3"
        parts.append(f"Properties={props}")
        if frame.has_energy:
            parts.append(f"energy={_format_float(frame.energy)}")
        if frame.stress is not None:
            flat = " ".join(_format_float(x) for x in frame.stress.reshape(-1))
            parts.append(f'stress="{flat}"')
        if system.cell is not None:
            parts.append('pbc="' + " ".join("T" if p else "F" for p in system.pbc) + '"')
        if frame.weight != 1.0:
            parts.append(f"weight={_format_float(frame.weight)}")
        for key in sorted(k for k in frame.metadata if k != "columns"):
            value = frame.metadata[key]
            value = f'"{value}"' if " " in str(value) else str(value)
            parts.append(f"{key}={value}")

        stream.write(f"{n}\n")
        stream.write(" ".join(parts) + "\n")
        for row in range(n):
            fields = [SYMBOLS[system.species[row] - 1]]
            fields += [_format_float(x) for x in system.positions[row]]
            if frame.has_forces:
                fields += [_format_float(x) for x in frame.forces[row]]
            stream.write(" ".join(fields) + "\n")


def load_extxyz(path) -> Dataset:
    with open(path, encoding="utf-8") as handle:
        frames = parse_extxyz(handle)
    return Dataset(frames, source=str(path))


def save_extxyz(path, frames) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        write_extxyz(handle, frames)


# ---------------------------------------------------------------------------
# splitting

def split(dataset: Dataset, ratios, seed: int) -> Dataset:
    """Deterministic shuffle + contiguous assignment into train/val/test.

    The permutation is keyed by (content hash, seed), so the same data and
    seed always reproduce the same split regardless of source path.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLIT_NAMES):
        raise ValueError(f"need {len(SPLIT_NAMES)} ratios, got {len(ratios)}")
    if any(r <= 0 for r in ratios):
        raise ValueError("ratios must be positive")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset.frames)
    if n < len(ratios):
        raise ValueError(f"{n} frames cannot fill {len(ratios)} splits")

    counts = [int(np.floor(r * n)) for r in ratios]
    remainders = [r * n - c for r, c in zip(ratios, counts)]
    for _ in range(n - sum(counts)):
        best = int(np.argmax(remainders))
        counts[best] += 1
        remainders[best] = -1.0
    # every split non-empty (n >= len(ratios) guarantees enough to steal)
    for idx, count in enumerate(counts):
        if count == 0:
            donor = int(np.argmax(counts))
            counts[donor] -= 1
            counts[idx] += 1

    key = int.from_bytes(bytes.fromhex(dataset.content_hash[:16]), "big")
    rng = np.random.default_rng(np.random.SeedSequence([seed, key]))
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    start = 0
    for tag, count in enumerate(counts):
        assignments[order[start:start + count]] = tag
        start += count
    return Dataset(
        dataset.frames, dataset.source, dataset.content_hash,
        assignments, seed, ratios,
    )


def manifest(dataset: Dataset) -> dict:
    """Structured description of a split dataset (JSON-serializable)."""
    entry = {
        "source": dataset.source,
        "content_hash": dataset.content_hash,
        "n_frames": len(dataset.frames),
    }
    if dataset.assignments is not None:
        entry["seed"] = dataset.split_seed
        entry["ratios"] = list(dataset.split_ratios)
        entry["counts"] = {
            name: int(np.sum(dataset.assignments == tag))
            for tag, name in enumerate(SPLIT_NAMES)
        }
    return entry


def save_manifest(path, datasets) -> None:
    if isinstance(datasets, Dataset):
        datasets = [datasets]
    payload = {"datasets": [manifest(d) for d in datasets]}
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")


# ---------------------------------------------------------------------------
# Lennard-Jones oracle

def lj_oracle(system: AtomicSystem, epsilon: float, sigma: float, cutoff: float,
              shift: bool = True) -> LabeledFrame:
    """Exact LJ energy/forces/stress labels, periodic images included.

    Energy is shifted to zero at the cutoff unless shift=False.  Stress is
    the strain derivative of the energy per volume, populated only for
    periodic systems.
    """
    graph = build_neighbor_list(system, cutoff)
    d = graph.dij
    if np.any(d < 0.1 * sigma):
        raise ValueError(f"overlapping atoms: min distance {d.min():.4f} < 0.1 sigma")

    inv6 = (sigma / d) ** 6 if len(d) else np.zeros(0)
    pair_e = 4.0 * epsilon * (inv6 * inv6 - inv6)
    if shift:
        cut6 = (sigma / cutoff) ** 6
        pair_e = pair_e - 4.0 * epsilon * (cut6 * cut6 - cut6)
    energy = 0.5 * float(pair_e.sum())

    # u'(r) = (24 eps / r) (inv6 - 2 inv6^2)
    du = 24.0 * epsilon / d * (inv6 - 2.0 * inv6 * inv6) if len(d) else np.zeros(0)
    unit = graph.rij / d[:, None] if len(d) else np.zeros((0, 3))
    forces = np.zeros((system.n_atoms, 3))
    np.add.at(forces, graph.edge_index[:, 0], -du[:, None] * unit)

    stress = None
    if system.cell is not None:
        volume = abs(float(np.linalg.det(system.cell)))
        outer = graph.rij[:, :, None] * graph.rij[:, None, :]
        stress = 0.5 * np.einsum("e,eab->ab", du / d, outer) / volume

    return LabeledFrame(system, energy, forces, stress)


# ---------------------------------------------------------------------------
# synthetic structures

def fcc_supercell(element: int, lattice_constant: float, reps: tuple[int, int, int],
                  rattle: float = 0.0, rng=None) -> AtomicSystem:
    """FCC supercell with optional Gaussian displacement of every atom."""
    basis = np.array([
        [0.0, 0.0, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0],
    ])
    cells = np.array([
        [i, j, k]
        for i in range(reps[0]) for j in range(reps[1]) for k in range(reps[2])
    ])
    frac = (cells[:, None, :] + basis[None, :, :]).reshape(-1, 3)
    frac = frac / np.array(reps, dtype=float)
    cell = np.diag([lattice_constant * r for r in reps]).astype(float)
    positions = frac @ cell
    if rattle > 0.0:
        if rng is None:
            rng = np.random.default_rng(0)
        positions = positions + rng.normal(scale=rattle, size=positions.shape)
    species = np.full(len(positions), element)
    return AtomicSystem(species, positions, cell, (True, True, True))


ARGON = {"element": 18, "epsilon": 0.0104, "sigma": 3.4}  # eV, A


def make_lj_argon_dataset(n_frames: int, seed: int, reps=(2, 2, 2),
                          lattice_constant: float = 5.4, rattle: float = 0.18,
                          cutoff: float = 5.0) -> Dataset:
    """Rattled FCC argon frames labeled by the LJ oracle."""
    rng = np.random.default_rng(seed)
    frames = []
    for _ in range(n_frames):
        system = fcc_supercell(ARGON["element"], lattice_constant, reps, rattle, rng)
        frames.append(lj_oracle(system, ARGON["epsilon"], ARGON["sigma"], cutoff))
    return Dataset(frames, source=f"synthetic:lj-argon:{seed}")
