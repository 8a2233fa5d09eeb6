"""Optimization loop for the potential.

Weighted MAE loss over per-atom energies and force components, cosine
learning-rate schedule, global-norm gradient clipping, an optional linear
ramp of the energy-loss weight, Adam updates, JSONL metric logging, and
bit-reproducible checkpoint resume (optimizer moments travel with the
model parameters).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import LabeledFrame
from .network import (
    GraphCache,
    ModelConfig,
    ModelState,
    build_cache,
    forward_packed,
    init_state,
    load_checkpoint,
    pack,
    predict,
    save_checkpoint,
    _taped_params,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(Exception):
    """Aborted optimization; ``checkpoint`` names the last good state on disk."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class DynamicWeights:
    """Linear ramp of the energy weight over the first part of training."""

    lambda_e_start: float = 0.05
    lambda_e_end: float = 4.0
    ramp_fraction: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1]")
        if self.lambda_e_start < 0.0 or self.lambda_e_end < 0.0:
            raise ValueError("energy weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    grad_clip: float = 0.5
    epochs: int = 1
    batch_size: int = 8
    lambda_e: float = 4.0
    lambda_f: float = 100.0
    dynamic_weights: DynamicWeights | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lambda_f <= 0.0:
            raise ValueError("lambda_f must be positive")
        if self.lambda_e < 0.0:
            raise ValueError("lambda_e must be non-negative")
        if self.grad_clip <= 0.0:
            raise ValueError("grad_clip must be positive")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")

    def to_dict(self):
        out = {
            "lr": self.lr,
            "grad_clip": self.grad_clip,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lambda_e": self.lambda_e,
            "lambda_f": self.lambda_f,
            "seed": self.seed,
        }
        if self.dynamic_weights is not None:
            dw = self.dynamic_weights
            out["dynamic_weights"] = {
                "lambda_e_start": dw.lambda_e_start,
                "lambda_e_end": dw.lambda_e_end,
                "ramp_fraction": dw.ramp_fraction,
            }
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        dw = data.pop("dynamic_weights", None)
        if dw is not None:
            dw = DynamicWeights(**dw)
        return cls(dynamic_weights=dw, **data)


class TrainLog:
    """Ordered stream of structured metric records.

    Serializes to line-delimited JSON with sorted keys, so two runs are
    comparable by string equality.
    """

    def __init__(self):
        self.records = []
        self._last_step = -1

    def add(self, record):
        step = record["step"]
        if step < self._last_step:
            raise ValueError(f"step counter went backwards: {step} < {self._last_step}")
        self._last_step = step
        self.records.append(record)

    def step(self, step, lr, lambda_e, loss_value, energy_term, force_term, grad_norm):
        self.add({
            "kind": "step", "step": step, "lr": lr, "lambda_e": lambda_e,
            "loss": loss_value, "energy_term": energy_term,
            "force_term": force_term, "grad_norm": grad_norm,
        })

    def epoch(self, epoch, step, energy_mae, force_mae):
        # units: meV/atom and meV/Angstrom
        self.add({
            "kind": "epoch", "epoch": epoch, "step": step,
            "val_energy_mae_mev_per_atom": energy_mae,
            "val_force_mae_mev_per_ang": force_mae,
        })

    def lines(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path):
        Path(path).write_text(self.lines())


# ---------------------------------------------------------------------------
# schedule pieces

def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def dynamic_lambda_e(step: int, total_steps: int, schedule: DynamicWeights) -> float:
    ramp_steps = schedule.ramp_fraction * total_steps
    if step >= ramp_steps:
        return schedule.lambda_e_end
    frac = step / ramp_steps
    return schedule.lambda_e_start + (schedule.lambda_e_end - schedule.lambda_e_start) * frac


def lambda_e_at(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.dynamic_weights is None:
        return config.lambda_e
    return dynamic_lambda_e(step, total_steps, config.dynamic_weights)


# ---------------------------------------------------------------------------
# loss

def loss(predictions, targets, lambda_e: float, lambda_f: float) -> float:
    """Weighted MAE: lambda_e * mean |per-atom energy error| plus
    lambda_f * mean |force component error| over the whole batch."""
    if len(predictions) == 0 or len(predictions) != len(targets):
        raise ValueError("predictions and targets must be equal-length and nonempty")
    energy_errors = []
    force_errors = []
    for pred, target in zip(predictions, targets):
        n = target.system.n_atoms
        if pred.forces.shape != target.forces.shape:
            raise ValueError(
                f"force shape mismatch: {pred.forces.shape} vs {target.forces.shape}")
        energy_errors.append(abs(pred.energy - target.energy) / n)
        force_errors.append(np.abs(pred.forces - target.forces).ravel())
    energy_term = float(np.mean(energy_errors))
    force_term = float(np.mean(np.concatenate(force_errors)))
    return lambda_e * energy_term + lambda_f * force_term


def _taped_loss(tape, frame_e, forces, targets, lambda_e, lambda_f):
    """Same arithmetic as loss(), built on the tape for differentiation."""
    n_atoms = np.array([[t.system.n_atoms] for t in targets], dtype=np.float64)
    e_true = np.array([[t.energy] for t in targets], dtype=np.float64)
    f_true = np.concatenate([t.forces for t in targets], axis=0)
    per_atom_err = ad.div(ad.sub(frame_e, tape.constant(e_true)), tape.constant(n_atoms))
    energy_term = ad.mean(ad.abs_(per_atom_err))
    force_term = ad.mean(ad.abs_(ad.sub(forces, tape.constant(f_true))))
    total = ad.add(ad.mul_const(energy_term, lambda_e), ad.mul_const(force_term, lambda_f))
    return total, float(energy_term.data), float(force_term.data)


# ---------------------------------------------------------------------------
# reference-energy initialization

def initialize_references(state: ModelState, frames) -> ModelState:
    """Least-squares per-species shifts from training energies; scale from
    the standard deviation of the per-atom residuals."""
    counts = np.zeros((len(frames), 118))
    energies = np.empty(len(frames))
    n_atoms = np.empty(len(frames))
    for row, frame in enumerate(frames):
        np.add.at(counts[row], frame.system.species - 1, 1.0)
        energies[row] = frame.energy
        n_atoms[row] = frame.system.n_atoms
    shifts, *_ = np.linalg.lstsq(counts, energies, rcond=None)
    residual = (energies - counts @ shifts) / n_atoms
    scale = float(np.std(residual))
    if not np.isfinite(scale) or scale < 1e-12:
        scale = 1.0
    state.params["shifts"] = shifts
    state.params["scale"] = np.array([scale])
    return state


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_model(cls, state: ModelState) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in state.params.items()},
            v={k: np.zeros_like(p) for k, p in state.params.items()},
        )


def clip_gradients(grads: dict, max_norm: float):
    """Global-norm clip; returns (clipped grads, pre-clip norm)."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm and total > 0.0:
        factor = max_norm / total
        grads = {k: g * factor for k, g in grads.items()}
    return grads, total


def adam_update(state: ModelState, opt: AdamState, grads: dict, lr: float):
    opt.t += 1
    bias1 = 1.0 - ADAM_BETA1 ** opt.t
    bias2 = 1.0 - ADAM_BETA2 ** opt.t
    for name in sorted(grads):
        g = grads[name]
        opt.m[name] = ADAM_BETA1 * opt.m[name] + (1.0 - ADAM_BETA1) * g
        opt.v[name] = ADAM_BETA2 * opt.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = opt.m[name] / bias1
        v_hat = opt.v[name] / bias2
        state.params[name] = state.params[name] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# the step and the loop

def train_step(state: ModelState, opt: AdamState, model_config: ModelConfig,
               caches, targets, lr, lambda_e, lambda_f, grad_clip):
    """One optimization step on a minibatch; returns a metrics dict.

    Forces inside the loss come from a taped gradient of the batch energy,
    so the parameter gradient differentiates through them (second order).
    """
    tape = ad.Tape()
    try:
        tp = _taped_params(tape, state, as_leaves=True)
        batch = pack(list(caches))
        frame_e, x = forward_packed(tape, batch, model_config, tp)
        total_e = ad.reshape(ad.canonical_sum(frame_e), ())
        forces = ad.neg(ad.gradient(total_e, x))
        loss_t, energy_term, force_term = _taped_loss(
            tape, frame_e, forces, targets, lambda_e, lambda_f)
        loss_value = float(loss_t.data)
        if not np.isfinite(loss_value):
            raise ad.NonFiniteError("loss", loss_t.index)
        names = sorted(tp)
        grad_list = ad.gradient(loss_t, [tp[n] for n in names])
        grads = {n: g.data for n, g in zip(names, grad_list)}
    finally:
        tape.release()
    grads, grad_norm = clip_gradients(grads, grad_clip)
    adam_update(state, opt, grads, lr)
    return {
        "loss": loss_value,
        "energy_term": energy_term,
        "force_term": force_term,
        "grad_norm": grad_norm,
    }


@dataclass
class TrainResult:
    state: ModelState
    log: TrainLog
    checkpoint_path: Path | None = None
    final_metrics: dict = field(default_factory=dict)


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    # stateless: resuming at any step reproduces the same batch sequence
    return np.random.default_rng([seed, epoch]).permutation(n)


def _save_train_checkpoint(path, model_config, state, opt, next_step, train_config,
                           species_seen):
    combined = dict(state.params)
    for name in state.params:
        combined["adam.m." + name] = opt.m[name]
        combined["adam.v." + name] = opt.v[name]
    extra = {"kind": "train", "step": next_step, "adam_t": opt.t,
             "train_config": train_config.to_dict(), "species_seen": species_seen}
    save_checkpoint(path, model_config, ModelState(params=combined), extra=extra)


def load_train_checkpoint(path):
    """Returns (model_config, state, adam, next_step, train_config dict)."""
    model_config, combined, extra = load_checkpoint(path)
    if extra.get("kind") != "train":
        raise ValueError(f"{path} is not a training checkpoint")
    params, m, v = {}, {}, {}
    for name, array in combined.params.items():
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = array
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = array
        else:
            params[name] = array
    opt = AdamState(m=m, v=v, t=int(extra["adam_t"]))
    return model_config, ModelState(params=params), opt, int(extra["step"]), extra["train_config"]


def load_model_state(path):
    """Load any checkpoint (training or final) as (config, inference state)."""
    model_config, combined, _ = load_checkpoint(path)
    params = {k: v for k, v in combined.params.items() if not k.startswith("adam.")}
    return model_config, ModelState(params=params)


def evaluate(model_config: ModelConfig, state: ModelState, frames,
             caches=None) -> dict:
    """Validation metrics in the units of the log: meV/atom and meV/Angstrom."""
    if caches is None:
        caches = [build_cache(f.system, model_config) for f in frames]
    energy_errors = []
    force_errors = []
    for frame, cache in zip(frames, caches):
        pred = predict(frame.system, model_config, state, cache=cache,
                       compute_stress=False)
        n = frame.system.n_atoms
        energy_errors.append(abs(pred.energy - frame.energy) / n)
        force_errors.append(np.abs(pred.forces - frame.forces).ravel())
    return {
        "energy_mae_mev_per_atom": 1000.0 * float(np.mean(energy_errors)),
        "force_mae_mev_per_ang": 1000.0 * float(np.mean(np.concatenate(force_errors))),
    }


def train(model_config: ModelConfig, train_config: TrainConfig,
          train_frames, val_frames=None, out_dir=None,
          resume_from=None, stop_after: int | None = None,
          initial_state: ModelState | None = None) -> TrainResult:
    """Run the optimization loop.

    The batch sequence is a pure function of (seed, epoch), and the Adam
    moments ride along in every checkpoint, so training N steps equals
    training fewer, checkpointing, and resuming, to the bit.

    ``stop_after`` halts after that many optimizer steps of the full
    schedule (checkpointing first if ``out_dir`` is set); ``resume_from``
    continues a halted run toward the same schedule.
    """
    train_frames = list(train_frames)
    if not train_frames:
        raise ValueError("training set is empty")
    steps_per_epoch = math.ceil(len(train_frames) / train_config.batch_size)
    total_steps = train_config.epochs * steps_per_epoch

    if resume_from is not None:
        ckpt_config, state, opt, start_step, _ = load_train_checkpoint(resume_from)
        if ckpt_config != model_config:
            raise ValueError("checkpoint model config does not match")
    else:
        if initial_state is not None:
            state = initial_state.copy()
        else:
            state = init_state(model_config, seed=train_config.seed)
            initialize_references(state, train_frames)
        opt = AdamState.for_model(state)
        start_step = 0

    caches = [build_cache(f.system, model_config) for f in train_frames]
    val_caches = None
    if val_frames:
        val_frames = list(val_frames)
        val_caches = [build_cache(f.system, model_config) for f in val_frames]

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainLog()
    last_checkpoint = None
    species_seen = sorted(
        int(z) for z in np.unique(np.concatenate(
            [f.system.species for f in train_frames])))

    def checkpoint(next_step):
        nonlocal last_checkpoint
        if out_dir is None:
            return
        path = out_dir / "checkpoint.ckpt"
        _save_train_checkpoint(path, model_config, state, opt, next_step,
                               train_config, species_seen)
        last_checkpoint = path

    stop_at = total_steps if stop_after is None else min(total_steps, stop_after)
    for step in range(start_step, stop_at):
        epoch = step // steps_per_epoch
        position = step % steps_per_epoch
        order = _epoch_order(train_config.seed, epoch, len(train_frames))
        picked = order[position * train_config.batch_size:
                       (position + 1) * train_config.batch_size]
        lr = cosine_lr(step, total_steps, train_config.lr)
        lam_e = lambda_e_at(train_config, step, total_steps)
        try:
            metrics = train_step(
                state, opt, model_config,
                [caches[i] for i in picked], [train_frames[i] for i in picked],
                lr, lam_e, train_config.lambda_f, train_config.grad_clip)
        except ad.NonFiniteError as err:
            reference = str(last_checkpoint) if last_checkpoint else "none written"
            raise TrainingError(
                f"non-finite value at step {step} ({err}); "
                f"last good checkpoint: {reference}",
                checkpoint=last_checkpoint) from err
        log.step(step, lr, lam_e, metrics["loss"], metrics["energy_term"],
                 metrics["force_term"], metrics["grad_norm"])
        if position == steps_per_epoch - 1:
            if val_caches is not None:
                val = evaluate(model_config, state, val_frames, val_caches)
                log.epoch(epoch, step, val["energy_mae_mev_per_atom"],
                          val["force_mae_mev_per_ang"])
            checkpoint(step + 1)

    if stop_at < total_steps or last_checkpoint is None:
        checkpoint(stop_at)

    train_metrics = evaluate(model_config, state, train_frames, caches)
    log.add({
        "kind": "final", "step": stop_at,
        "train_energy_mae_mev_per_atom": train_metrics["energy_mae_mev_per_atom"],
        "train_force_mae_mev_per_ang": train_metrics["force_mae_mev_per_ang"],
    })
    final_metrics = dict(train_metrics)
    if val_caches is not None:
        val = evaluate(model_config, state, val_frames, val_caches)
        final_metrics = val
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model_config, state,
                        extra={"kind": "model", "step": stop_at,
                               "species_seen": species_seen})
        log.write(out_dir / "train_log.jsonl")
    return TrainResult(state=state, log=log,
                       checkpoint_path=last_checkpoint, final_metrics=final_metrics)
