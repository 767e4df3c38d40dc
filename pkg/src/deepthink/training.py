"""Deterministic training loops for maze solvers and toy classifiers."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .models import Model, ModelSpec, save_checkpoint
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")
LOSSES = ("per_pixel_xent", "classification_xent")
SCHEDULES = ("step", "cosine")
SUPERVISION = ("final", "all")


class NumericalError(FloatingPointError):
    """Training produced NaN or infinite values."""


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 1
    lr_decay: float = 0.1
    milestones: tuple = ()
    schedule: str = "step"
    warmup_steps: int = 0
    grad_clip: float = 0.0
    supervise: str = "final"
    augment: bool = False
    seed: int = 0
    loss: str = "per_pixel_xent"

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.supervise not in SUPERVISION:
            raise ValueError(f"supervise must be one of {SUPERVISION}, got {self.supervise!r}")
        for name in ("learning_rate", "adam_eps", "lr_decay"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_steps < 0 or self.grad_clip < 0:
            raise ValueError("batch_size must be positive; epochs, warmup_steps, grad_clip nonnegative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def default_config(spec: ModelSpec, epochs: int, seed: int = 0) -> TrainConfig:
    """SGD with step decay for shallow recurrences, Adam for long ones."""
    if spec.iterations >= 12:
        return TrainConfig(optimizer="adam", learning_rate=1e-3, epochs=epochs, seed=seed)
    marks = tuple(sorted({m for m in (epochs // 2, (3 * epochs) // 4) if 0 < m}))
    return TrainConfig(
        optimizer="sgd", learning_rate=0.1, momentum=0.9, epochs=epochs, milestones=marks, seed=seed
    )


def _parse_value(kind, raw: str):
    if kind in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def parse_config_text(text: str) -> tuple[TrainConfig, dict]:
    """Parse ``key=value`` lines.

    Training keys map onto :class:`TrainConfig`; keys prefixed ``model.``
    are returned separately as raw strings for :class:`ModelSpec`. Any other
    key is an error.
    """
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    model_keys = {f.name for f in fields(ModelSpec)}
    train_kwargs, model_kwargs = {}, {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key.startswith("model."):
            name = key[len("model.") :]
            if name not in model_keys:
                raise ValueError(f"line {lineno}: unknown model key {name!r}")
            model_kwargs[name] = raw
        elif key in kinds:
            try:
                train_kwargs[key] = _parse_value(kinds[key], raw)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
        else:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
    return TrainConfig(**train_kwargs), model_kwargs


def load_config(path) -> tuple[TrainConfig, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    step: int = 0
    buffers: list = field(default_factory=list)  # SGD velocity, or Adam (m, v) pairs


def optimizer_step(
    params: list[np.ndarray], grads: list[np.ndarray], state: OptimizerState, config: TrainConfig, lr=None
) -> None:
    """Update ``params`` in place.

    SGD: ``v = momentum * v + g; p -= lr * v``. Adam uses bias-corrected
    first and second moments.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter of shape {p.shape}")
    lr = config.learning_rate if lr is None else lr
    if not state.buffers:
        if config.optimizer == "sgd":
            state.buffers = [np.zeros_like(p) for p in params]
        else:
            state.buffers = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
    state.step += 1
    if config.optimizer == "sgd":
        for p, g, v in zip(params, grads, state.buffers):
            v *= config.momentum
            v += g
            p -= lr * v
        return
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, (m, v) in zip(params, grads, state.buffers):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)


def learning_rate_at(config: TrainConfig, step: int, steps_per_epoch: int) -> float:
    lr = config.learning_rate
    total = max(1, config.epochs * steps_per_epoch)
    if config.schedule == "cosine":
        lr *= 0.5 * (1 + math.cos(math.pi * min(step, total) / total))
    else:
        epoch = step // max(1, steps_per_epoch)
        lr *= config.lr_decay ** sum(1 for m in config.milestones if epoch >= m)
    if config.warmup_steps and step < config.warmup_steps:
        lr *= (step + 1) / config.warmup_steps
    return lr


def clip_gradients(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list = field(default_factory=list)
    train_accuracy: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    final_train_accuracy: Optional[float] = None
    checkpoint: Optional[str] = None
    steps: int = 0


def _dihedral(x: np.ndarray, y: np.ndarray, k: int):
    """Apply one of the eight square symmetries to NCHW inputs and NHW targets."""
    x = np.rot90(x, k % 4, axes=(2, 3))
    y = np.rot90(y, k % 4, axes=(1, 2))
    if k >= 4:
        x = x[:, :, :, ::-1]
        y = y[:, :, ::-1]
    return np.ascontiguousarray(x), np.ascontiguousarray(y)


def batch_loss(model: Model, x: Tensor, y: np.ndarray, config: TrainConfig):
    """Loss and final-iteration output for one batch (call inside a tape)."""
    if config.loss == "classification_xent":
        out = model(x, train=True)
        return T.softmax_cross_entropy(out, y, class_axis=1), out
    if config.supervise == "all" and model.recurrent:
        outs = model.forward_iterations(x, model.spec.iterations, train=True)
        total = T.softmax_cross_entropy(outs[0], y, class_axis=1)
        for o in outs[1:]:
            total = T.add(total, T.softmax_cross_entropy(o, y, class_axis=1))
        return T.scale(total, 1.0 / len(outs)), outs[-1]
    out = model(x, train=True)
    return T.softmax_cross_entropy(out, y, class_axis=1), out


def _exact_matches(out: np.ndarray, y: np.ndarray) -> int:
    if out.ndim == 2:
        return int((out.argmax(axis=1) == y).sum())
    pred = out[:, 1] > out[:, 0]
    return int((pred == y.astype(bool)).reshape(len(y), -1).all(axis=1).sum())


def _snapshot(model: Model) -> list[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: Model, snap: list[np.ndarray]) -> None:
    for p, arr in zip(model.parameters(), snap):
        p.data = arr.copy()


def train(
    model: Model,
    ds,
    config: TrainConfig,
    checkpoint_path=None,
    callback=None,
) -> TrainReport:
    """Optimise ``model`` on ``ds`` for ``config.epochs`` epochs.

    ``ds`` must provide ``inputs(index)`` returning float NCHW arrays and a
    ``targets`` array (per-pixel maps or class labels). The per-epoch
    accuracy is measured on the training batches as they are seen; the final
    accuracy is an eval-mode pass at the trained iteration count.
    """
    report = TrainReport()
    if config.loss == "per_pixel_xent" and model.spec.family != "maze_residual":
        raise ValueError("per_pixel_xent needs a maze_residual model")
    if config.loss == "classification_xent" and model.spec.family == "maze_residual":
        raise ValueError("classification_xent needs a classification model")
    params = model.parameters()
    state = OptimizerState()
    rng = np.random.default_rng(config.seed)
    count = len(ds)
    steps_per_epoch = max(1, math.ceil(count / config.batch_size))
    last_good = _snapshot(model)

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(count)
        total_loss, seen, correct = 0.0, 0, 0
        for start in range(0, count, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = ds.inputs(idx)
            yb = ds.targets[idx]
            if config.augment and config.loss == "per_pixel_xent":
                xb, yb = _dihedral(xb, yb, int(rng.integers(8)))
            lr = learning_rate_at(config, report.steps, steps_per_epoch)
            try:
                with Tape() as tape:
                    loss, out = batch_loss(model, Tensor(xb), yb, config)
                tape.backward(loss)
                grads = [p.grad for p in params]
                clip_gradients(grads, config.grad_clip)
                optimizer_step([p.data for p in params], grads, state, config, lr)
            except FloatingPointError as exc:
                _restore(model, last_good)
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
                    report.checkpoint = str(checkpoint_path)
                raise TrainingDiverged(
                    f"training diverged in epoch {epoch + 1} at step {report.steps + 1}: {exc}", report
                ) from exc
            report.steps += 1
            total_loss += loss.item() * len(idx)
            seen += len(idx)
            correct += _exact_matches(out.data, yb)
        report.losses.append(total_loss / seen)
        report.train_accuracy.append(correct / seen)
        report.wall_time.append(time.perf_counter() - t0)
        last_good = _snapshot(model)
        log.info(
            "epoch %d/%d loss %.5f train-acc %.4f (%.1fs)",
            epoch + 1,
            config.epochs,
            report.losses[-1],
            report.train_accuracy[-1],
            report.wall_time[-1],
        )
        if callback is not None:
            callback(epoch, report)

    if config.epochs > 0:
        report.final_train_accuracy = final_accuracy(model, ds, config)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
        report.checkpoint = str(checkpoint_path)
    return report


def final_accuracy(model: Model, ds, config: TrainConfig, batch_size: int = 64) -> float:
    if config.loss == "per_pixel_xent":
        from .evaluation import ExitRule, evaluate

        n = model.spec.iterations
        return evaluate(model, ds, ExitRule("baseline", n, n), batch_size=batch_size).accuracy
    correct = 0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(len(ds), start + batch_size))
        out = model(Tensor(ds.inputs(idx)), train=False)
        correct += int((out.data.argmax(axis=1) == ds.targets[idx]).sum())
    return correct / len(ds)
