"""Command-line entry point: train / eval / md / bench / inspect.

One JSON config file drives training; flags override. Every run writes
exactly one manifest.json into its output directory recording the
resolved config snapshot, the seed, input content hashes, and artifact
paths, so a run is reproducible from the manifest alone.

Exit codes: 0 success, 1 usage or config error, 2 runtime or numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import benchmark as bench_mod
from . import dynamics as md_mod
from .data import (
    ExtxyzError,
    load_extxyz,
    parse_extxyz,
    save_extxyz,
    split,
)
from .network import ModelConfig, load_checkpoint
from .training import (
    DynamicWeights,
    TrainConfig,
    TrainingError,
    evaluate,
    load_model_state,
    train,
)
from .validation import flag_unknown_species

OUT_DIR_ENV = "FRAMEPOT_OUT_DIR"

# config schema: (section, field, type, required, constraint text with units)
CONFIG_FIELDS = [
    ("model", "num_layers", int, False, "message-passing layers, >= 1"),
    ("model", "hidden_channels", int, False,
     "feature width, even, divisible by num_heads into even pair counts"),
    ("model", "num_heads", int, False, "gating heads, divides hidden_channels"),
    ("model", "num_basis", int, False, "radial basis functions, >= 1"),
    ("model", "cutoff", float, False, "neighbor cutoff in angstrom, (0, 50]"),
    ("model", "rope_enabled", bool, False, "rotary relative-position encoding"),
    ("model", "temporal_enabled", bool, False, "cross-layer temporal residuals"),
    ("model", "lse_enabled", bool, False, "local structure encoding term"),
    ("train", "lr", float, False, "initial learning rate, eV-loss units per step"),
    ("train", "grad_clip", float, False, "max global gradient norm, > 0"),
    ("train", "epochs", int, False, "full passes over the training split, >= 1"),
    ("train", "batch_size", int, False, "frames per optimizer step, >= 1"),
    ("train", "lambda_e", float, False, "energy-loss weight (per-atom eV), >= 0"),
    ("train", "lambda_f", float, False, "force-loss weight (eV/angstrom), > 0"),
    ("train", "dynamic_weights", dict, False,
     "optional {lambda_e_start, lambda_e_end, ramp_fraction}"),
    ("train", "seed", int, False, "RNG seed for init and batch order"),
    ("data", "path", str, True, "extended-XYZ dataset file"),
    ("data", "split_seed", int, False, "seed for the train/val/test split"),
    ("data", "split_ratios", list, False, "three fractions summing to 1, default 0.6/0.2/0.2"),
]

CONFIG_HELP = "config file fields (JSON):\n" + "\n".join(
    f"  {section}.{name}" + (" (required)" if required else "")
    + f": {text}"
    for section, name, _, required, text in CONFIG_FIELDS)


def _type_name(t):
    return {int: "integer", float: "number", bool: "boolean",
            str: "string", list: "list", dict: "object"}[t]


def validate_config(raw: dict):
    """Full-config validation; returns (model, train, data, errors).

    Collects every violation instead of stopping at the first.
    """
    errors = []
    known_sections = {"model", "train", "data"}
    for section in raw:
        if section not in known_sections:
            errors.append(f"unknown section {section!r}")
    by_section = {s: dict(raw.get(s, {})) for s in known_sections}
    for s, body in by_section.items():
        if not isinstance(raw.get(s, {}), dict):
            errors.append(f"section {s!r} must be an object")
            by_section[s] = {}

    fields = {(s, n): (t, required, text) for s, n, t, required, text in CONFIG_FIELDS}
    for section, body in by_section.items():
        for name in body:
            if (section, name) not in fields:
                errors.append(f"unknown field {section}.{name}")
    for (section, name), (ftype, required, _) in fields.items():
        if name not in by_section[section]:
            if required:
                errors.append(f"missing required field {section}.{name}")
            continue
        value = by_section[section][name]
        if ftype is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
            by_section[section][name] = value
        if name == "dynamic_weights" and value is None:
            continue
        if not isinstance(value, ftype) or isinstance(value, bool) != (ftype is bool):
            errors.append(f"{section}.{name} must be a {_type_name(ftype)}")

    model_cfg = train_cfg = data_cfg = None
    if not errors:
        try:
            model_cfg = ModelConfig(**by_section["model"])
        except (TypeError, ValueError) as err:
            errors.append(f"model: {err}")
        try:
            train_cfg = TrainConfig.from_dict(by_section["train"])
        except (TypeError, ValueError) as err:
            errors.append(f"train: {err}")
        data_cfg = {
            "path": by_section["data"].get("path"),
            "split_seed": by_section["data"].get("split_seed", 0),
            "split_ratios": tuple(by_section["data"].get("split_ratios",
                                                         (0.6, 0.2, 0.2))),
        }
        ratios = data_cfg["split_ratios"]
        if len(ratios) != 3 or not all(isinstance(r, (int, float)) for r in ratios):
            errors.append("data.split_ratios must be three numbers")
    return model_cfg, train_cfg, data_cfg, errors


def load_config(path):
    text = Path(path).read_text()
    return json.loads(text)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_out_dir(args, subcommand) -> Path:
    if args.out_dir is not None:
        return Path(args.out_dir)
    env = os.environ.get(OUT_DIR_ENV)
    if env:
        return Path(env) / subcommand
    return Path(f"framepot-{subcommand}")


def write_manifest(out_dir: Path, record: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = dict(record)
    record["version"] = __version__
    (out_dir / "manifest.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n")


def _apply_ablations(model_cfg: ModelConfig, ablate) -> ModelConfig:
    if not ablate:
        return model_cfg
    fields = model_cfg.to_dict()
    for name in ablate:
        fields[f"{name}_enabled"] = False
    return ModelConfig.from_dict(fields)


def _limit_threads(n):
    if n is None:
        return
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    try:
        raw = load_config(args.config)
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as err:
        print(f"error: config is not valid JSON: {err}", file=sys.stderr)
        return 1
    model_cfg, train_cfg, data_cfg, errors = validate_config(raw)
    if errors:
        for line in errors:
            print(f"config error: {line}", file=sys.stderr)
        return 1
    model_cfg = _apply_ablations(model_cfg, args.ablate)
    if args.seed is not None:
        fields = train_cfg.to_dict()
        fields["seed"] = args.seed
        train_cfg = TrainConfig.from_dict(fields)

    data_path = Path(data_cfg["path"])
    if not data_path.exists():
        print(f"error: dataset path does not exist: {data_path}", file=sys.stderr)
        return 1
    try:
        dataset = load_extxyz(data_path)
    except ExtxyzError as err:
        print(f"error: {data_path}: {err}", file=sys.stderr)
        return 1
    dataset = split(dataset, ratios=data_cfg["split_ratios"],
                    seed=data_cfg["split_seed"])
    out_dir = _resolve_out_dir(args, "train")

    try:
        result = train(model_cfg, train_cfg, dataset.subset("train"),
                       val_frames=dataset.subset("val"), out_dir=out_dir)
    except TrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    write_manifest(out_dir, {
        "subcommand": "train",
        "config_path": str(args.config),
        "config_snapshot": {
            "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(),
            "data": {"path": str(data_path),
                     "split_seed": data_cfg["split_seed"],
                     "split_ratios": list(data_cfg["split_ratios"])},
        },
        "seed": train_cfg.seed,
        "input_hashes": {"dataset": dataset.content_hash},
        "artifacts": {
            "model": str(out_dir / "model.ckpt"),
            "checkpoint": str(out_dir / "checkpoint.ckpt"),
            "log": str(out_dir / "train_log.jsonl"),
        },
    })
    final = result.final_metrics
    print(f"trained {train_cfg.epochs} epoch(s); "
          f"val energy MAE {final.get('energy_mae_mev_per_atom', float('nan')):.3f} meV/atom, "
          f"val force MAE {final.get('force_mae_mev_per_ang', float('nan')):.3f} meV/A")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    try:
        config, state = load_model_state(args.checkpoint)
        _, _, extra = load_checkpoint(args.checkpoint)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: cannot load checkpoint: {err}", file=sys.stderr)
        return 1
    try:
        dataset = load_extxyz(args.dataset)
    except FileNotFoundError:
        print(f"error: dataset path does not exist: {args.dataset}", file=sys.stderr)
        return 1
    except ExtxyzError as err:
        print(f"error: {args.dataset}: {err}", file=sys.stderr)
        return 1
    frames = dataset.frames
    if not frames:
        print("error: dataset is empty", file=sys.stderr)
        return 1
    out_dir = _resolve_out_dir(args, "eval")
    out_dir.mkdir(parents=True, exist_ok=True)

    known = np.array(extra.get("species_seen", range(1, 119)), dtype=np.int64)
    flags = flag_unknown_species([f.system for f in frames], known)

    from .network import predict

    energy_rows = []
    force_rows = []
    energy_errors = []
    force_errors = []
    try:
        for index, frame in enumerate(frames):
            pred = predict(frame.system, config, state, compute_stress=False)
            n = frame.system.n_atoms
            energy_rows.append((index, n, frame.energy, pred.energy, int(flags[index])))
            energy_errors.append(abs(pred.energy - frame.energy) / n)
            force_errors.append(np.abs(pred.forces - frame.forces).ravel())
            for atom in range(n):
                for axis in range(3):
                    force_rows.append((index, atom, axis,
                                       frame.forces[atom, axis],
                                       pred.forces[atom, axis]))
    except Exception as err:  # noqa: BLE001 - numeric failure path
        print(f"error: evaluation failed: {err}", file=sys.stderr)
        return 2

    metrics = {
        "energy_mae_mev_per_atom": 1000.0 * float(np.mean(energy_errors)),
        "force_mae_mev_per_ang": 1000.0 * float(np.mean(np.concatenate(force_errors))),
        "n_frames": len(frames),
        "flagged_frames": [int(i) for i in np.flatnonzero(flags)],
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    with open(out_dir / "parity_energy.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "n_atoms", "true_ev", "pred_ev", "flagged"])
        writer.writerows(energy_rows)
    with open(out_dir / "parity_forces.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["frame", "atom", "axis", "true_ev_per_ang", "pred_ev_per_ang"])
        writer.writerows(force_rows)
    write_manifest(out_dir, {
        "subcommand": "eval",
        "config_path": None,
        "config_snapshot": {"model": config.to_dict()},
        "seed": args.seed,
        "input_hashes": {"checkpoint": _sha256(args.checkpoint),
                         "dataset": dataset.content_hash},
        "artifacts": {
            "metrics": str(out_dir / "metrics.json"),
            "parity_energy": str(out_dir / "parity_energy.csv"),
            "parity_forces": str(out_dir / "parity_forces.csv"),
        },
    })
    print(f"energy MAE {metrics['energy_mae_mev_per_atom']:.3f} meV/atom, "
          f"force MAE {metrics['force_mae_mev_per_ang']:.3f} meV/A "
          f"over {len(frames)} frame(s)")
    return 0


def cmd_md(args) -> int:
    if args.steps < 1:
        print("error: steps must be at least 1", file=sys.stderr)
        return 1
    if args.dt <= 0:
        print("error: dt must be positive", file=sys.stderr)
        return 1
    try:
        config, state = load_model_state(args.checkpoint)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: cannot load checkpoint: {err}", file=sys.stderr)
        return 1
    try:
        frames = parse_extxyz(Path(args.structure).read_text())
    except FileNotFoundError:
        print(f"error: structure path does not exist: {args.structure}", file=sys.stderr)
        return 1
    except ExtxyzError as err:
        print(f"error: {args.structure}: {err}", file=sys.stderr)
        return 1
    if not frames:
        print("error: structure file has no frames", file=sys.stderr)
        return 1
    system = frames[0].system
    masses = md_mod.default_masses(system)
    seed = args.seed if args.seed is not None else 0
    rng = np.random.default_rng(seed)
    velocities = md_mod.maxwell_boltzmann_velocities(
        system, args.temperature, masses, rng)
    initial = md_mod.MDState(system, velocities, masses)
    provider = md_mod.model_provider(config, state)
    out_dir = _resolve_out_dir(args, "md")
    out_dir.mkdir(parents=True, exist_ok=True)

    try:
        report = md_mod.run_nve(initial, provider, dt=args.dt,
                                n_steps=args.steps,
                                sample_every=args.sample_every,
                                keep_frames=True)
    except md_mod.MDError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    save_extxyz(out_dir / "trajectory.extxyz", report.frames)
    with open(out_dir / "report.jsonl", "w") as handle:
        for record in report.records():
            handle.write(json.dumps(record, sort_keys=True) + "\n")
    summary = {
        "drift_mev_per_atom_per_ps": report.drift,
        "samples": len(report.times),
        "n_atoms": report.n_atoms,
        "dt_fs": args.dt,
        "steps": args.steps,
        "mean_temperature_k": float(report.temperature.mean()),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    write_manifest(out_dir, {
        "subcommand": "md",
        "config_path": None,
        "config_snapshot": {"model": config.to_dict(),
                            "md": {"dt_fs": args.dt, "steps": args.steps,
                                   "sample_every": args.sample_every,
                                   "temperature_k": args.temperature}},
        "seed": seed,
        "input_hashes": {"checkpoint": _sha256(args.checkpoint),
                         "structure": _sha256(args.structure)},
        "artifacts": {
            "trajectory": str(out_dir / "trajectory.extxyz"),
            "report": str(out_dir / "report.jsonl"),
            "summary": str(out_dir / "summary.json"),
        },
    })
    print(f"{args.steps} step(s) at dt {args.dt} fs; "
          f"drift {report.drift:+.4f} meV/atom/ps")
    return 0


def cmd_bench(args) -> int:
    try:
        config, state = load_model_state(args.checkpoint)
    except (FileNotFoundError, ValueError) as err:
        print(f"error: cannot load checkpoint: {err}", file=sys.stderr)
        return 1
    if args.structure is not None:
        try:
            frames = parse_extxyz(Path(args.structure).read_text())
        except FileNotFoundError:
            print(f"error: structure path does not exist: {args.structure}",
                  file=sys.stderr)
            return 1
        except ExtxyzError as err:
            print(f"error: {args.structure}: {err}", file=sys.stderr)
            return 1
        if not frames or frames[0].system.cell is None:
            print("error: bench needs a periodic base structure", file=sys.stderr)
            return 1
        base = frames[0].system
    else:
        from .data import fcc_supercell

        base = fcc_supercell(element=18, lattice_constant=5.4, reps=(2, 2, 2))
    try:
        repeats = [(r, r, r) for r in (int(v) for v in args.repeats.split(","))]
        if any(r[0] < 1 for r in repeats):
            raise ValueError
    except ValueError:
        print("error: --repeats must be comma-separated positive integers",
              file=sys.stderr)
        return 1
    out_dir = _resolve_out_dir(args, "bench")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        results = bench_mod.run_bench(config, state, base, repeats,
                                      batch_size=args.batch_size, reps=args.reps)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    table = bench_mod.format_table(results, threads=args.device_threads)
    print(table, end="")
    (out_dir / "bench.txt").write_text(table)
    bench_mod.write_records(results, out_dir / "bench.jsonl")
    write_manifest(out_dir, {
        "subcommand": "bench",
        "config_path": None,
        "config_snapshot": {"model": config.to_dict(),
                            "bench": {"repeats": args.repeats,
                                      "batch_size": args.batch_size,
                                      "reps": args.reps}},
        "seed": args.seed,
        "input_hashes": {"checkpoint": _sha256(args.checkpoint)},
        "artifacts": {"table": str(out_dir / "bench.txt"),
                      "records": str(out_dir / "bench.jsonl")},
    })
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        print(f"error: path does not exist: {path}", file=sys.stderr)
        return 1
    header = path.open("rb").read(4)
    out_dir = _resolve_out_dir(args, "inspect")
    if header == b"FPOT":
        try:
            config, state, extra = load_checkpoint(path)
        except ValueError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1
        n_params = sum(a.size for k, a in state.params.items()
                       if not k.startswith("adam."))
        info = {
            "type": "checkpoint",
            "model": config.to_dict(),
            "parameters": int(n_params),
            "extra": extra,
        }
    else:
        try:
            dataset = load_extxyz(path)
        except ExtxyzError as err:
            print(f"error: {path}: {err}", file=sys.stderr)
            return 1
        sizes = [f.system.n_atoms for f in dataset.frames]
        species = sorted({int(z) for f in dataset.frames for z in f.system.species})
        info = {
            "type": "dataset",
            "frames": len(dataset.frames),
            "atoms_min": int(min(sizes)),
            "atoms_max": int(max(sizes)),
            "species": species,
            "content_hash": dataset.content_hash,
            "with_energy": sum(1 for f in dataset.frames if f.has_energy),
            "with_forces": sum(1 for f in dataset.frames if f.has_forces),
        }
    print(json.dumps(info, sort_keys=True, indent=2))
    write_manifest(out_dir, {
        "subcommand": "inspect",
        "config_path": None,
        "config_snapshot": info if info["type"] == "checkpoint" else None,
        "seed": args.seed,
        "input_hashes": {"path": _sha256(path)},
        "artifacts": {},
    })
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="framepot",
        description="Local-frame equivariant interatomic potential toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed")
        p.add_argument("--out-dir", default=None,
                       help=f"output directory (default ${OUT_DIR_ENV} or ./framepot-<cmd>)")
        p.add_argument("--device-threads", type=int, default=None,
                       help="cap BLAS threads for the run")

    p_train = sub.add_parser(
        "train", help="train a potential from a config file",
        epilog=CONFIG_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    p_train.add_argument("--config", required=True, help="JSON run config")
    p_train.add_argument("--ablate", action="append", default=None,
                         choices=["rope", "temporal", "lse"],
                         help="disable a component (repeatable)")
    common(p_train)

    p_eval = sub.add_parser("eval", help="compute MAE metrics and parity data")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True, help="extended-XYZ file")
    common(p_eval)

    p_md = sub.add_parser("md", help="NVE molecular dynamics from a checkpoint")
    p_md.add_argument("--checkpoint", required=True)
    p_md.add_argument("--structure", required=True, help="extended-XYZ file, first frame")
    p_md.add_argument("--dt", type=float, default=1.0, help="time step in fs")
    p_md.add_argument("--steps", type=int, required=True)
    p_md.add_argument("--sample-every", type=int, default=10)
    p_md.add_argument("--temperature", type=float, default=30.0,
                      help="initial velocity distribution, K")
    common(p_md)

    p_bench = sub.add_parser("bench", help="inference-cost scaling benchmark")
    p_bench.add_argument("--checkpoint", required=True)
    p_bench.add_argument("--structure", default=None,
                         help="periodic base cell (default: 32-atom argon fcc)")
    p_bench.add_argument("--repeats", default="1,2",
                         help="comma list of cubic repeat factors")
    p_bench.add_argument("--batch-size", type=int, default=1)
    p_bench.add_argument("--reps", type=int, default=5)
    common(p_bench)

    p_inspect = sub.add_parser("inspect", help="describe a checkpoint or dataset")
    p_inspect.add_argument("path")
    common(p_inspect)
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "md": cmd_md,
    "bench": cmd_bench,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        # argparse exits 2 on usage errors; remap to the documented code 1
        return 0 if err.code == 0 else 1
    _limit_threads(args.device_threads)
    try:
        return COMMANDS[args.subcommand](args)
    except TrainingError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except md_mod.MDError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
