"""Context absorption: fit low-rank adapters so the contextless model run on Y
reproduces what the frozen model computes on XY.

The frozen model's trace on XY is captured once; each step runs the adapted
model on Y alone, measures the gap, and takes an AdamW step on the adapter
parameters. Base weights are never touched.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, asdict, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .model import (LINEAR_TARGETS, HiddenStateTrace, LoraAdapterSet, ModelWeights, forward_full,
                    forward_nodes, init_adapters)
from .optim import AdamState, adamw_step

NORM_MODES = ("per_position", "per_element")
LOSS_NORMS = ("L1", "L2")
ALIGNMENT_TARGETS = ("hidden_states", "token_distribution", "ttt_reconstruction")
POSITION_MODES = ("absolute_offset", "reset")
PER_ELEMENT_EPSILON = 0.01


class OptimizationError(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"absorption diverged at step {step}: {detail}")
        self.step = step


class AbsorptionConfigError(ValueError):
    pass


@dataclass
class AbsorptionConfig:
    n: int = 32
    m: int = 64
    max_steps: int = 200
    lr: float = 5e-4
    epsilon: float | None = None  # None: 0.01 per element, scaled to the norm mode
    norm_mode: str = "per_position"
    loss_norm: str = "L1"
    alignment_target: str = "hidden_states"
    position_mode: str = "absolute_offset"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_targets: tuple[str, ...] = LINEAR_TARGETS
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0

    def __post_init__(self):
        self.lora_targets = tuple(self.lora_targets)
        self.validate()

    def validate(self) -> None:
        if self.n < 0:
            raise AbsorptionConfigError(f"n must be >= 0 (absorbed token count), got {self.n}")
        if self.m < 1:
            raise AbsorptionConfigError(f"m must be >= 1 (synchronization token count), got {self.m}")
        if self.max_steps < 0:
            raise AbsorptionConfigError(f"max_steps (K) must be >= 0, got {self.max_steps}")
        if not self.lr > 0:
            raise AbsorptionConfigError(f"lr (eta) must be > 0, got {self.lr}")
        if self.epsilon is not None and self.epsilon < 0:
            raise AbsorptionConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        for name, allowed in (("norm_mode", NORM_MODES), ("loss_norm", LOSS_NORMS),
                              ("alignment_target", ALIGNMENT_TARGETS), ("position_mode", POSITION_MODES)):
            if getattr(self, name) not in allowed:
                raise AbsorptionConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.lora_rank < 1:
            raise AbsorptionConfigError(f"lora_rank must be >= 1, got {self.lora_rank}")
        bad = set(self.lora_targets) - set(LINEAR_TARGETS)
        if bad or not self.lora_targets:
            raise AbsorptionConfigError(f"lora_targets must be a nonempty subset of {LINEAR_TARGETS}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise AbsorptionConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.weight_decay < 0:
            raise AbsorptionConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def resolved_epsilon(self, num_layers: int, hidden_dim: int) -> float:
        if self.epsilon is not None:
            return self.epsilon
        if self.norm_mode == "per_element" or self.alignment_target != "hidden_states":
            return PER_ELEMENT_EPSILON
        return PER_ELEMENT_EPSILON * (num_layers + 1) * hidden_dim

    def replace(self, **changes) -> AbsorptionConfig:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return AbsorptionConfig(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class AbsorptionReport:
    losses: list[float] = field(default_factory=list)
    terminated_by: str = "max_steps"
    optimizer_steps: int = 0
    wall_time: float = 0.0
    epsilon: float = 0.0

    @property
    def steps(self) -> int:
        return len(self.losses)

    @property
    def initial_loss(self) -> float:
        return self.losses[0] if self.losses else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    def summary(self) -> dict:
        return {
            "steps": self.steps,
            "optimizer_steps": self.optimizer_steps,
            "terminated_by": self.terminated_by,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "epsilon": self.epsilon,
            "wall_time": self.wall_time,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(self.losses):
            writer.writerow([i, repr(loss)])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# objectives


def _oracle_pass(weights: ModelWeights, xy_tokens, n: int, m: int, start_position: int = 0):
    if len(xy_tokens) != n + m:
        raise T.ContractError(f"oracle: expected {n + m} tokens (n={n}, m={m}), got {len(xy_tokens)}")
    logits, trace = forward_full(weights, xy_tokens, start_position, capture=True)
    return trace.select(n, n + m).detach(), logits[n:n + m].copy()


def capture_oracle_trace(weights: ModelWeights, xy_tokens, n: int, m: int,
                         start_position: int = 0) -> HiddenStateTrace:
    """Hidden states of the frozen model on XY at the last ``m`` positions."""
    return _oracle_pass(weights, xy_tokens, n, m, start_position)[0]


def sync_loss(target: HiddenStateTrace, student: HiddenStateTrace, cfg: AbsorptionConfig) -> T.TensorNode:
    t, s = target.states, student.states
    if t.shape[1] != s.shape[1]:
        raise T.ContractError(f"sync_loss: layer counts differ ({t.shape[1] - 1} vs {s.shape[1] - 1})")
    if t.shape != s.shape:
        raise T.ContractError(f"sync_loss: trace shapes differ, {t.shape} vs {s.shape}")
    target_states = T.constant(t.data)
    if cfg.loss_norm == "L1":
        return T.l1_loss(s, target_states, cfg.norm_mode)
    return T.mse_loss(s, target_states, cfg.norm_mode)


def token_distribution_loss(oracle_logits, student_logits: T.TensorNode) -> T.TensorNode:
    """Mean over positions of KL(oracle || student)."""
    oracle = oracle_logits.data if isinstance(oracle_logits, T.TensorNode) else np.asarray(oracle_logits)
    student_logits = T.as_tensor(student_logits)
    if oracle.shape != student_logits.shape:
        raise T.ContractError(f"token_distribution_loss: shapes differ, {oracle.shape} vs {student_logits.shape}")
    return T.kl_divergence_lastdim(T.constant(oracle.astype(student_logits.dtype)), student_logits)


def _ttt_loss_nodes(config, params, lora, lora_scale, x_tokens, start_position: int = 0) -> T.TensorNode:
    x = np.asarray(x_tokens, dtype=np.int64)
    if len(x) < 2:
        raise T.ContractError(f"ttt_reconstruction_loss: need at least 2 tokens, got {len(x)}")
    logits, _ = forward_nodes(config, params, x[:-1], start_position, lora, lora_scale)
    return T.cross_entropy(logits, x[1:])


def ttt_reconstruction_loss(weights: ModelWeights, x_tokens, adapters: LoraAdapterSet | None = None) -> T.TensorNode:
    """Reconstruction baseline: next-token loss of the adapted model on X itself
    (keys x[:-1], targets x[1:])."""
    return _ttt_loss_nodes(weights.config, weights.as_nodes(),
                           adapters.as_nodes() if adapters is not None else None,
                           adapters.scaling if adapters is not None else 1.0, x_tokens)


# ---------------------------------------------------------------------------
# the absorption loop


def absorb_context(weights: ModelWeights, x_tokens: Sequence[int], y_tokens: Sequence[int],
                   cfg: AbsorptionConfig, seed: int = 0, start_position: int = 0,
                   callback: Callable[[int, float], None] | None = None) -> tuple[LoraAdapterSet, AbsorptionReport]:
    """Fit fresh adapters so the model on Y alone tracks the frozen model on XY.

    Returns the trained adapters (base ``weights`` untouched) and a report of
    the per-step loss trajectory. ``start_position`` is the absolute position
    of X[0]; the student sees Y at ``start_position + n`` in absolute_offset
    mode and at ``start_position`` in reset mode.
    """
    x = np.asarray(x_tokens, dtype=np.int64).reshape(-1)
    y = np.asarray(y_tokens, dtype=np.int64).reshape(-1)
    if len(x) != cfg.n or len(y) != cfg.m:
        raise T.ContractError(f"absorb_context: got |X|={len(x)}, |Y|={len(y)} for n={cfg.n}, m={cfg.m}")
    config = weights.config
    start_time = time.perf_counter()
    eps = cfg.resolved_epsilon(config.num_layers, config.hidden_dim)
    dtype = weights.tensors["tok_embedding"].dtype
    adapters = init_adapters(config, cfg.lora_rank, cfg.lora_alpha, seed, cfg.lora_targets, dtype)
    report = AbsorptionReport(epsilon=eps)

    target = oracle_logits = None
    if cfg.alignment_target != "ttt_reconstruction":
        target, oracle_logits = _oracle_pass(weights, np.concatenate([x, y]), cfg.n, cfg.m, start_position)
    start = start_position + (cfg.n if cfg.position_mode == "absolute_offset" else 0)

    base = weights.as_nodes()
    flat = {}
    for name, (a, b) in adapters.pairs.items():
        flat[name + ".A"] = a
        flat[name + ".B"] = b
    opt_state = AdamState()

    for step in range(cfg.max_steps):
        leaves = {k: T.TensorNode(v, requires_grad=True) for k, v in flat.items()}
        lora = {name: (leaves[name + ".A"], leaves[name + ".B"]) for name in adapters.pairs}
        try:
            if cfg.alignment_target == "ttt_reconstruction":
                loss = _ttt_loss_nodes(config, base, lora, adapters.scaling, x, start_position)
            else:
                capture = cfg.alignment_target == "hidden_states"
                logits, trace = forward_nodes(config, base, y, start, lora, adapters.scaling, capture=capture)
                if capture:
                    loss = sync_loss(target, trace, cfg)
                else:
                    loss = token_distribution_loss(oracle_logits, logits)
        except T.NonFiniteError as exc:
            raise OptimizationError(step, str(exc)) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise OptimizationError(step, f"loss is {value}")
        report.losses.append(value)
        if callback is not None:
            callback(step, value)
        if value < eps:
            report.terminated_by = "threshold"
            break
        try:
            T.backward(loss)
        except T.NonFiniteError as exc:
            raise OptimizationError(step, str(exc)) from exc
        grads = {k: leaf.grad for k, leaf in leaves.items() if leaf.grad is not None}
        adamw_step(flat, grads, opt_state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay)
        report.optimizer_steps += 1
        for k, v in flat.items():
            if not np.isfinite(v).all():
                raise OptimizationError(step, f"non-finite adapter parameter {k}")

    report.wall_time = time.perf_counter() - start_time
    return adapters, report
