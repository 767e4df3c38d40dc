"""Exit rules, exact-match maze accuracy and iteration-budget sweeps.

Iterations are 1-indexed throughout: iteration ``t`` is the output after the
internal module has been applied ``t`` times.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, softmax

RULES = ("baseline", "n_plus_2", "agreement", "max_confidence")
SWEEP_RULES = ("last",) + RULES


def _logits(output) -> np.ndarray:
    arr = output.data if isinstance(output, Tensor) else np.asarray(output)
    if arr.ndim < 1 or arr.shape[0] != 2:
        raise ValueError(f"expected a two-channel output (2 x H x W), got shape {arr.shape}")
    return arr


def predict_map(output) -> np.ndarray:
    """Per-pixel argmax over two channels; ties go to class 0."""
    arr = _logits(output)
    return (arr[1] > arr[0]).astype(np.uint8)


def confidence(output) -> float:
    """Mean over pixels of the larger of the two class probabilities."""
    arr = _logits(output).astype(np.float64)
    return float(softmax(arr, axis=0).max(axis=0).mean())


@dataclass(frozen=True)
class ExitRule:
    kind: str
    train_iters: int
    budget: int

    def __post_init__(self):
        if self.kind not in SWEEP_RULES:
            raise ValueError(f"unknown exit rule {self.kind!r}; expected one of {RULES}")
        if self.train_iters < 1 or self.budget < 1:
            raise ValueError("train_iters and budget must be positive")
        if self.kind in ("baseline", "n_plus_2") and self.budget < self.train_iters:
            raise ValueError(
                f"{self.kind} needs budget >= train_iters ({self.budget} < {self.train_iters})"
            )

    def fixed_index(self) -> Optional[int]:
        """1-based exit iteration for rules that do not look at the outputs."""
        if self.kind == "baseline":
            return self.train_iters
        if self.kind == "n_plus_2":
            return min(self.train_iters + 2, self.budget)
        if self.kind == "last":
            return self.budget
        return None


def select_exit(outputs: Sequence, rule: ExitRule) -> tuple[int, np.ndarray]:
    """Pick the exit iteration (1-based) and its binary map from one thought process."""
    if len(outputs) != rule.budget:
        raise ValueError(f"rule budget is {rule.budget} but {len(outputs)} outputs were given")
    maps = [predict_map(o) for o in outputs]
    fixed = rule.fixed_index()
    if fixed is not None:
        return fixed, maps[fixed - 1]
    if rule.kind == "agreement":
        for t in range(1, len(maps)):
            if np.array_equal(maps[t], maps[t - 1]):
                return t + 1, maps[t]
        return rule.budget, maps[-1]
    confs = [confidence(o) for o in outputs]
    best = int(np.argmax(confs))  # first maximum wins ties
    return best + 1, maps[best]


# ---------------------------------------------------------------------------
# batched evaluation


@dataclass
class ThoughtRecord:
    """Per-sample, per-iteration summaries of a model's outputs."""

    correct: np.ndarray  # (N, T) bool, exact match at iteration t
    agree: np.ndarray  # (N, T) bool, map at t equals map at t-1 (False at t=1)
    confidence: np.ndarray  # (N, T) float64
    pixel_accuracy: np.ndarray  # (N, T) float64

    @property
    def iterations(self) -> int:
        return self.correct.shape[1]

    def truncate(self, budget: int) -> "ThoughtRecord":
        return ThoughtRecord(
            self.correct[:, :budget], self.agree[:, :budget], self.confidence[:, :budget],
            self.pixel_accuracy[:, :budget],
        )


def summarize_outputs(logits: np.ndarray, targets: np.ndarray) -> ThoughtRecord:
    """Build a :class:`ThoughtRecord` from stacked logits of shape (N, T, 2, H, W)."""
    maps = logits[:, :, 1] > logits[:, :, 0]
    tgt = targets.astype(bool)[:, None]
    match = maps == tgt
    n, t = maps.shape[:2]
    correct = match.reshape(n, t, -1).all(axis=2)
    pix = match.reshape(n, t, -1).mean(axis=2)
    agree = np.zeros((n, t), bool)
    if t > 1:
        agree[:, 1:] = (maps[:, 1:] == maps[:, :-1]).reshape(n, t - 1, -1).all(axis=2)
    probs = softmax(logits.astype(np.float64), axis=2)
    conf = probs.max(axis=2).reshape(n, t, -1).mean(axis=2)
    return ThoughtRecord(correct, agree, conf, pix)


def record_thoughts(model, ds, iterations: int, batch_size: int = 64) -> ThoughtRecord:
    family = getattr(getattr(model, "spec", None), "family", None)
    if family != "maze_residual":
        raise ValueError(f"maze evaluation needs a maze model, got family {family!r}")
    parts = []
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(len(ds), start + batch_size))
        outs = model.forward_iterations(Tensor(ds.inputs(idx)), iterations)
        logits = np.stack([o.data for o in outs], axis=1)
        parts.append(summarize_outputs(logits, ds.targets[idx]))
    return ThoughtRecord(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                           ("correct", "agree", "confidence", "pixel_accuracy")))


def exit_indices(record: ThoughtRecord, rule: ExitRule) -> np.ndarray:
    """Zero-based exit iteration per sample."""
    if record.iterations < rule.budget:
        raise ValueError(f"record holds {record.iterations} iterations, rule needs {rule.budget}")
    n = record.correct.shape[0]
    fixed = rule.fixed_index()
    if fixed is not None:
        return np.full(n, fixed - 1)
    if rule.kind == "agreement":
        agree = record.agree[:, : rule.budget]
        hit = agree.any(axis=1)
        return np.where(hit, agree.argmax(axis=1), rule.budget - 1)
    return record.confidence[:, : rule.budget].argmax(axis=1)


@dataclass
class EvalReport:
    rule: ExitRule
    accuracy: float
    stderr: float
    n_samples: int
    exit_histogram: dict = field(default_factory=dict)  # 1-based iteration -> count
    solved_histogram: dict = field(default_factory=dict)
    pixel_accuracy: float = 0.0  # diagnostic only

    def row(self, dataset: str = "") -> dict:
        return {
            "dataset": dataset,
            "rule": self.rule.kind,
            "budget": self.rule.budget,
            "accuracy": self.accuracy,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
        }


def binomial_stderr(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n) if n > 0 else 0.0


def report_from_record(record: ThoughtRecord, rule: ExitRule) -> EvalReport:
    idx = exit_indices(record, rule)
    rows = np.arange(len(idx))
    solved = record.correct[rows, idx]
    n = len(idx)
    acc = float(solved.mean()) if n else 0.0
    hist = {int(t) + 1: int(c) for t, c in zip(*np.unique(idx, return_counts=True))}
    solved_hist = {int(t) + 1: int(c) for t, c in zip(*np.unique(idx[solved], return_counts=True))}
    pix = float(record.pixel_accuracy[rows, idx].mean()) if n else 0.0
    return EvalReport(rule, acc, binomial_stderr(acc, n), n, hist, solved_hist, pix)


def evaluate(model, ds, rule: ExitRule, batch_size: int = 64) -> EvalReport:
    """Exact-match accuracy of ``model`` on ``ds`` under one exit rule.

    A feed-forward model has no extra iterations to offer, so it can only be
    evaluated with a budget equal to its trained depth.
    """
    if not getattr(model, "recurrent", True) and rule.budget != model.spec.iterations:
        raise ValueError(
            f"feed-forward model has depth {model.spec.iterations}; budget {rule.budget} is not available"
        )
    record = record_thoughts(model, ds, rule.budget, batch_size)
    if record.iterations == rule.budget:
        return report_from_record(record, rule)
    # feed-forward: a single output at the trained depth, whatever the rule
    rep = report_from_record(record, ExitRule("last", 1, 1))
    n = model.spec.iterations
    rep.rule = rule
    rep.exit_histogram = {n: c for c in rep.exit_histogram.values()}
    rep.solved_histogram = {n: c for c in rep.solved_histogram.values()}
    return rep


def sweep(
    model,
    datasets: dict,
    budgets: Sequence[int],
    rules: Sequence[str] = SWEEP_RULES,
    train_iters: Optional[int] = None,
    batch_size: int = 64,
) -> list[dict]:
    """Accuracy for every (dataset, rule, budget) combination.

    ``last`` reads the output at the budget itself (the iteration heatmap).
    Every rule gets one row per budget: where the budget is smaller than the
    index a fixed rule wants, the budget acts as a hard cap and the rule
    reads the last available output. Outputs are computed once per dataset
    at the largest budget.
    """
    if not budgets:
        raise ValueError("sweep needs at least one budget")
    train_iters = train_iters or model.spec.iterations
    rows = []
    top = max(budgets)
    if not getattr(model, "recurrent", True) and set(budgets) != {model.spec.iterations}:
        raise ValueError(
            f"feed-forward model has depth {model.spec.iterations}; sweep budgets must equal it"
        )
    for name, ds in datasets.items():
        if not getattr(model, "recurrent", True):
            for kind in rules:
                rule = ExitRule(kind, train_iters, top)
                row = evaluate(model, ds, rule, batch_size).row(name)
                rows.append(row)
            continue
        record = record_thoughts(model, ds, top, batch_size)
        for kind in rules:
            for b in sorted(budgets):
                if kind in ("baseline", "n_plus_2") and b < train_iters:
                    rule = ExitRule("last", train_iters, b)
                else:
                    rule = ExitRule(kind, train_iters, b)
                row = report_from_record(record, rule).row(name)
                row["rule"] = kind
                rows.append(row)
    return rows


SWEEP_HEADER = ("dataset", "rule", "budget", "accuracy", "stderr", "n_samples")


def write_rows_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({**r, "accuracy": f"{r['accuracy']:.6f}", "stderr": f"{r['stderr']:.6f}"})


def write_histogram_csv(hist: dict, path, header=("iteration", "count")) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in sorted(hist):
            w.writerow([k, hist[k]])
