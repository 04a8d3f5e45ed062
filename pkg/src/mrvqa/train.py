"""L2 regression training: SGD with momentum and cosine learning-rate decay.

Batches are processed clip by clip (gradient accumulation), so batch size is
independent of memory. All randomness (shuffling, alignment centers,
dropout) flows from the run seed through named streams, making runs with
identical configs bit-reproducible.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nm
from .metrics import UndefinedCorrelationError, plcc, srcc
from .model import ModelConfig, ModelParams, init_random, predict, score_clip
from .seeding import derive_rng, stream_key
from .videoio import FrameSequence

# The reference schedule starts at 0.3, which pairs with batch-256 training
# from a pretrained backbone; from-scratch desk runs default lower.
PAPER_BASE_LR = 0.3
HISTORY_COLUMNS = ("epoch", "step", "lr", "train_loss", "val_srcc", "val_plcc")


class TrainError(Exception):
    pass


class DivergenceError(TrainError):
    """Loss or gradients went non-finite; the last good state is attached."""

    def __init__(self, message: str, result: "TrainResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.003
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 10
    seed: int = 0
    deterministic: bool = False
    mos_normalization: bool = False
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    mode: str = "mret"
    strategy: str = "uniform"

    def __post_init__(self):
        if self.base_lr <= 0:
            raise TrainError(f"base_lr must be > 0, got {self.base_lr}")
        if self.batch_size < 1 or self.epochs < 1:
            raise TrainError("batch_size and epochs must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise TrainError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class OptState:
    velocities: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "OptState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()})


def l2_loss(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Mean squared error over a batch."""
    p = np.asarray(predictions, dtype=np.float64)
    l = np.asarray(labels, dtype=np.float64)
    if p.size == 0 or p.shape != l.shape:
        raise TrainError(f"need equal-length non-empty batches, got {p.shape} vs {l.shape}")
    return float(np.mean((p - l) ** 2))


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    """Cosine decay from ``base`` at step 0 to exactly 0 at ``total_steps``."""
    if total_steps < 1:
        raise TrainError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * base * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: OptState,
    lr: float,
    momentum: float,
    grad_clip: float = 0.0,
) -> None:
    """Classical momentum update in place: v <- m*v + g; theta <- theta - lr*v."""
    for name in params.names():
        g = grads.get(name)
        if g is None:
            raise TrainError(f"missing gradient for {name}")
        if not np.all(np.isfinite(g)):
            raise TrainError(f"non-finite gradient in tensor {name}")
    if grad_clip > 0.0:
        total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        if total > grad_clip:
            scale = grad_clip / total
            grads = {name: g * scale for name, g in grads.items()}
    # Stage the whole update, then commit, so a blow-up never corrupts params.
    staged = {}
    for name, t in params.items():
        v = momentum * state.velocities[name] + grads[name]
        new = t.data - (lr * v).astype(t.data.dtype, copy=False)
        if not np.all(np.isfinite(new)):
            raise TrainError(f"non-finite parameter values in tensor {name} after update")
        staged[name] = (v, new)
    for name, t in params.items():
        v, new = staged[name]
        state.velocities[name][...] = v
        t.data[...] = new
    state.step += 1


def normalize_mos(tcfg: TrainConfig, mos: float, mos_range: tuple[float, float]) -> float:
    if not tcfg.mos_normalization:
        return mos
    lo, hi = mos_range
    return (mos - lo) / (hi - lo)


def denormalize_score(tcfg: TrainConfig, score: float, mos_range: tuple[float, float] = (0.0, 100.0)) -> float:
    if not tcfg.mos_normalization:
        return score
    lo, hi = mos_range
    return lo + score * (hi - lo)


@dataclass
class TrainResult:
    final_params: ModelParams
    best_params_arrays: dict[str, np.ndarray]
    best_epoch: int
    history: list[dict]
    opt_state: OptState
    diverged: bool = False
    divergence_reason: str = ""


def _evaluate(
    videos: Sequence[FrameSequence],
    params: ModelParams,
    mcfg: ModelConfig,
    tcfg: TrainConfig,
) -> tuple[float | None, float | None]:
    if len(videos) < 2:
        return None, None
    preds, labels = [], []
    for seq in videos:
        score, _ = predict(seq, params, mcfg, mode=tcfg.mode, strategy=tcfg.strategy)
        preds.append(denormalize_score(tcfg, score, seq.mos_range))
        labels.append(seq.mos)
    try:
        return srcc(preds, labels), plcc(preds, labels)
    except UndefinedCorrelationError:
        return None, None


def train_loop(
    dataset: Sequence[FrameSequence],
    mcfg: ModelConfig,
    tcfg: TrainConfig,
    val: Sequence[FrameSequence] | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Train on labeled sequences; returns final and best-SRCC parameters.

    Raises DivergenceError (with the last good state attached) if the loss or
    any gradient goes non-finite; parameters are never left in a broken state
    because updates are applied only after all gradients validate.
    """
    if not dataset:
        raise TrainError("training dataset is empty")
    for i, seq in enumerate(dataset):
        if seq.mos is None:
            raise TrainError(f"dataset item {i} has no mos label")
    if params is None:
        params = init_random(mcfg, tcfg.seed)
    state = OptState.zeros_like(params)
    names = params.names()

    steps_per_epoch = math.ceil(len(dataset) / tcfg.batch_size)
    total_steps = tcfg.epochs * steps_per_epoch
    center_rng = derive_rng(tcfg.seed, "center-draw")
    drop_rng = derive_rng(tcfg.seed, "dropout") if mcfg.dropout > 0 else None
    eval_videos = val if val is not None else dataset

    history: list[dict] = []
    best_srcc = -math.inf
    best_epoch = -1
    best_arrays = {name: params[name].data.copy() for name in names}

    def fail(reason: str) -> DivergenceError:
        result = TrainResult(params, best_arrays, best_epoch, history, state,
                             diverged=True, divergence_reason=reason)
        return DivergenceError(reason, result)

    global_step = 0
    for epoch in range(tcfg.epochs):
        order = derive_rng(tcfg.seed, "data-shuffle", epoch).permutation(len(dataset))
        for b in range(steps_per_epoch):
            batch = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
            lr = cosine_lr(global_step, total_steps, tcfg.base_lr)
            batch_grads = {name: np.zeros_like(params[name].data) for name in names}
            batch_loss = 0.0
            for j, vid_idx in enumerate(batch):
                seq = dataset[int(vid_idx)]
                target = normalize_mos(tcfg, seq.mos, seq.mos_range)
                tube_seed = None
                if tcfg.mode == "random":
                    tube_seed = stream_key("train-tubes", global_step * tcfg.batch_size + j) ^ tcfg.seed
                tape = nm.Tape()
                try:
                    with tape:
                        score_t, _ = score_clip(
                            seq, params, mcfg, mode=tcfg.mode, strategy=tcfg.strategy,
                            center_mode="train", center_rng=center_rng,
                            tube_seed=tube_seed, drop_rng=drop_rng,
                        )
                        diff = nm.sub(score_t, target)
                        loss_t = nm.mul(diff, diff)
                    grads = tape.backward(loss_t, list(params.tensors.values()))
                except nm.NonFiniteError as exc:
                    raise fail(f"non-finite forward/backward at step {global_step}: {exc}") from exc
                loss_val = loss_t.item()
                if not math.isfinite(loss_val):
                    raise fail(f"non-finite loss at step {global_step}")
                batch_loss += loss_val
                for name in names:
                    batch_grads[name] += grads[id(params[name])].data
            n_clips = len(batch)
            batch_loss /= n_clips
            for name in names:
                batch_grads[name] /= n_clips
            try:
                sgd_step(params, batch_grads, state, lr, tcfg.momentum, tcfg.grad_clip)
            except TrainError as exc:
                raise fail(str(exc)) from exc
            row = {
                "epoch": epoch, "step": global_step, "lr": lr,
                "train_loss": batch_loss, "val_srcc": None, "val_plcc": None,
            }
            history.append(row)
            global_step += 1
        try:
            val_srcc, val_plcc = _evaluate(eval_videos, params, mcfg, tcfg)
        except nm.NonFiniteError as exc:
            raise fail(f"non-finite activations during epoch {epoch} validation: {exc}") from exc
        history[-1]["val_srcc"] = val_srcc
        history[-1]["val_plcc"] = val_plcc
        if val_srcc is not None and val_srcc > best_srcc:
            best_srcc = val_srcc
            best_epoch = epoch
            best_arrays = {name: params[name].data.copy() for name in names}

    if best_epoch < 0:
        best_arrays = {name: params[name].data.copy() for name in names}
        best_epoch = tcfg.epochs - 1
    return TrainResult(params, best_arrays, best_epoch, history, state)


def write_history_csv(path: str | Path, history: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([
                row["epoch"], row["step"], repr(row["lr"]), repr(row["train_loss"]),
                "" if row["val_srcc"] is None else repr(row["val_srcc"]),
                "" if row["val_plcc"] is None else repr(row["val_plcc"]),
            ])


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(
    base: str | Path,
    params: ModelParams,
    tcfg: TrainConfig,
    history: list[dict] | None = None,
    opt_state: OptState | None = None,
    run_config: dict | None = None,
) -> None:
    """Write params (+ optimizer velocities) in the shared tensor format."""
    from .config import model_config_to_dict, multires_config_to_dict, train_config_to_dict

    tensors: dict[str, np.ndarray] = {}
    for name, t in params.items():
        tensors[f"param/{name}"] = t.data
    extra = {
        "config": run_config if run_config is not None else {
            "model": model_config_to_dict(params.cfg),
            "multires": multires_config_to_dict(params.cfg.multires),
            "train": train_config_to_dict(tcfg),
            "data": {},
        },
        "history": history or [],
    }
    if opt_state is not None:
        for name, v in opt_state.velocities.items():
            tensors[f"opt/velocity/{name}"] = v
        extra["optimizer"] = {"step": opt_state.step}
    nm.save_tensors(base, tensors, extra)


@dataclass
class Checkpoint:
    params: ModelParams
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    history: list[dict]
    opt_state: OptState | None
    run_config: dict


def load_checkpoint(base: str | Path) -> Checkpoint:
    from .config import run_config_from_dict

    tensors, manifest = nm.load_tensors(base)
    cfg_doc = manifest.get("config")
    if cfg_doc is None:
        raise TrainError(f"checkpoint {base} has no config section")
    run = run_config_from_dict(cfg_doc)
    arrays = {name[len("param/"):]: arr for name, arr in tensors.items() if name.startswith("param/")}
    params = ModelParams.from_arrays(run.model, arrays)
    opt_state = None
    vel = {name[len("opt/velocity/"):]: arr for name, arr in tensors.items() if name.startswith("opt/velocity/")}
    if vel:
        opt_state = OptState(vel, step=int(manifest.get("optimizer", {}).get("step", 0)))
    return Checkpoint(params, run.model, run.train, manifest.get("history", []), opt_state, cfg_doc)
