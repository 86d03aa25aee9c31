"""Training: AdamW with warmup+cosine schedule, multi-exit loss, CSV metrics.

A run is a pure function of (config, plan, corpus): parameter init, batch
order and the schedule all derive from plan.seed, and resuming from a saved
step continues the identical trajectory because the optimizer moments and
step counter travel with the checkpoint.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward
from .config import RunConfig
from .data import BatchPlan, next_batch
from .errors import ConfigError, TrainingDiverged
from .model import ModelConfig, ModelParameters, forward, init_parameters
from .optim import AdamW
from .telemetry import CycleTelemetry

METRICS_HEADER = "step,split,exit,loss,ppl,cycle,zero_attn_mean,gate_mean,lr,avg_loop"


@dataclass(frozen=True)
class TrainPlan:
    steps: int
    batch: int = 8
    grad_accum: int = 1
    lr: float = 1e-3
    warmup_frac: float = 0.01
    weight_decay: float = 0.01
    seed: int = 0
    exit_loss_weights: tuple[float, ...] | None = None
    log_interval: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.batch < 1 or self.grad_accum < 1:
            raise ConfigError("batch and grad_accum must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError(f"warmup_frac must be in [0, 1], got {self.warmup_frac}")
        if self.exit_loss_weights is not None:
            w = self.exit_loss_weights
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-6:
                raise ConfigError(f"exit loss weights must be nonnegative and sum to 1, got {w}")


def plan_from_run(rc: RunConfig) -> TrainPlan:
    return TrainPlan(
        steps=rc.steps,
        batch=rc.batch,
        grad_accum=rc.grad_accum,
        lr=rc.lr,
        warmup_frac=rc.warmup_frac,
        weight_decay=rc.weight_decay,
        seed=rc.seed,
    )


def learning_rate_at(step: int, plan: TrainPlan) -> float:
    """Linear warmup from 0 over warmup_frac of the run, then cosine to ~0."""
    warmup = max(1, int(round(plan.warmup_frac * plan.steps)))
    if step < warmup:
        return plan.lr * step / warmup
    if plan.steps <= warmup:
        return plan.lr
    progress = (step - warmup) / (plan.steps - warmup)
    return plan.lr * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))


def multi_exit_loss(
    exit_logits: list[Tensor],
    targets: np.ndarray,
    weights: tuple[float, ...] | None = None,
) -> tuple[Tensor, list[float]]:
    """Weighted sum of per-exit mean NLL (uniform by default).

    Gradients flow through every exit; intermediate exits share the tail and
    head, so deep supervision reaches the cycled block at every depth.
    """
    k = len(exit_logits)
    if weights is None:
        weights = tuple(1.0 / k for _ in range(k))
    if len(weights) != k:
        raise ConfigError(f"{len(weights)} exit weights for {k} exits")
    flat_targets = targets.reshape(-1)
    total = None
    per_exit: list[float] = []
    for w, logits in zip(weights, exit_logits):
        v = logits.shape[-1]
        flat = ad.reshape(logits, (-1, v)) if logits.data.ndim == 3 else logits
        ce = ad.cross_entropy(flat, flat_targets)
        per_exit.append(ce.item())
        term = ad.scale(ce, w)
        total = term if total is None else ad.add(total, term)
    return total, per_exit


class MetricsWriter:
    """Append-friendly CSV stream with one fixed header."""

    def __init__(self, path: str, append: bool = False):
        self.path = path
        exists = os.path.exists(path) and os.path.getsize(path) > 0
        self._fh = open(path, "a" if append else "w", encoding="utf-8")
        if not (append and exists):
            self._fh.write(METRICS_HEADER + "\n")

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, (int, np.integer)):
            return str(int(value))
        return f"{float(value):.6g}"

    def row(
        self,
        step: int,
        split: str,
        exit_index=None,
        loss=None,
        ppl=None,
        cycle=None,
        zero_attn=None,
        gate=None,
        lr=None,
        avg_loop=None,
    ) -> None:
        cells = [
            str(step), split, self._fmt(exit_index), self._fmt(loss), self._fmt(ppl),
            self._fmt(cycle), self._fmt(zero_attn), self._fmt(gate), self._fmt(lr),
            self._fmt(avg_loop),
        ]
        self._fh.write(",".join(cells) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrainResult:
    params: ModelParameters
    optimizer: AdamW
    losses: list[float] = field(default_factory=list)
    steps_done: int = 0


def _log_step(metrics, step, plan, per_exit, telemetry: CycleTelemetry, lr):
    for i, loss in enumerate(per_exit, start=1):
        metrics.row(step, "train", exit_index=i, loss=loss, ppl=math.exp(min(loss, 30.0)), lr=lr)
    for cycle, z in telemetry.zero_attn_by_cycle().items():
        gate = telemetry.gate_by_cycle().get(cycle)
        metrics.row(step, "train", cycle=cycle, zero_attn=z, gate=gate, lr=lr)
    if not telemetry.zero_attn_by_cycle():
        for cycle, gate in telemetry.gate_by_cycle().items():
            metrics.row(step, "train", cycle=cycle, gate=gate, lr=lr)
    metrics.flush()


def train(
    config: ModelConfig,
    plan: TrainPlan,
    train_ids: np.ndarray,
    params: ModelParameters | None = None,
    optimizer: AdamW | None = None,
    start_step: int = 0,
    stop_step: int | None = None,
    metrics: MetricsWriter | None = None,
) -> TrainResult:
    """Run optimizer updates for steps [start_step, stop_step or plan.steps).

    The batch order and learning-rate schedule are functions of the absolute
    step and the full plan, so a run split at any step and resumed from its
    checkpoint retraces the uninterrupted trajectory bit for bit.
    """
    if params is None:
        params = init_parameters(config, seed=plan.seed)
    named = params.named()
    if optimizer is None:
        optimizer = AdamW(named, weight_decay=plan.weight_decay)
    if config.early_exit_heads and plan.exit_loss_weights is not None:
        if len(plan.exit_loss_weights) != config.n_exits:
            raise ConfigError(
                f"{len(plan.exit_loss_weights)} exit weights for {config.n_exits} exits"
            )
    bp = BatchPlan(seq_len=config.t_max, batch=plan.batch, seed=plan.seed)
    end = plan.steps if stop_step is None else min(stop_step, plan.steps)
    losses: list[float] = []
    for step in range(start_step, end):
        lr = learning_rate_at(step, plan)
        optimizer.zero_grad()
        step_loss = 0.0
        per_exit_acc: list[float] | None = None
        telemetry = CycleTelemetry()
        for micro in range(plan.grad_accum):
            inputs, targets = next_batch(bp, train_ids, step * plan.grad_accum + micro)
            with Tape() as tape:
                res = forward(inputs, params, config, capture_exits=config.early_exit_heads)
                weights = plan.exit_loss_weights if config.early_exit_heads else None
                loss, per_exit = multi_exit_loss(res.exit_logits, targets, weights)
                scaled = ad.scale(loss, 1.0 / plan.grad_accum)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step, value)
            backward(tape, scaled)
            step_loss += value / plan.grad_accum
            if per_exit_acc is None:
                per_exit_acc = [x / plan.grad_accum for x in per_exit]
            else:
                per_exit_acc = [a + x / plan.grad_accum for a, x in zip(per_exit_acc, per_exit)]
            telemetry = res.telemetry
        optimizer.step(lr)
        losses.append(step_loss)
        if metrics is not None and (step % plan.log_interval == 0 or step == plan.steps - 1):
            _log_step(metrics, step, plan, per_exit_acc, telemetry, lr)
    return TrainResult(params, optimizer, losses, steps_done=end)
