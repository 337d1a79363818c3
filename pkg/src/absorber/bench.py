"""Latency sweeps, post-absorption agreement, token F1 and ablation grids."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import statistics
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable, Sequence

import numpy as np

from .absorption import AbsorptionConfig, absorb_context
from .corpus import encode, make_recall_task
from .model import (DecodeCache, ModelWeights, forward_full, forward_incremental, greedy_next_token, lora_merge,
                    prefill, track_attention)
from .streaming import attended_positions_per_token

log = logging.getLogger(__name__)

LATENCY_COLUMNS = ("mode", "N", "K_gen", "T_prefill", "T_gen", "L_N", "cost_model")


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyRecord:
    mode: str
    N: int
    K_gen: int
    T_prefill: float
    T_gen: float
    L_N: float
    cost_model: int
    max_attention_width: int = 0
    trials: list[float] = field(default_factory=list)

    def csv_row(self) -> list:
        return [self.mode, self.N, self.K_gen, f"{self.T_prefill:.6f}", f"{self.T_gen:.6f}", f"{self.L_N:.6e}",
                self.cost_model]


def latency_csv(records: Iterable[LatencyRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LATENCY_COLUMNS)
    for r in records:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def _absorber_window_len(N: int, n: int, m: int) -> int:
    # tokens left in the window once every full round over the prefix has run
    return N if N < n + m else m + (N - m) % n


def _timed_decode(weights: ModelWeights, prefix: np.ndarray, start: int, K_gen: int, capacity: int,
                  slide: int) -> tuple[float, float, int]:
    dtype = weights.tensors["tok_embedding"].dtype
    cache = DecodeCache.empty(weights.config, capacity=capacity, start_position=start, dtype=dtype)
    with track_attention() as widths:
        t0 = time.perf_counter()
        logits = prefill(weights, cache, prefix)[-1]
        t1 = time.perf_counter()
        for _ in range(K_gen):
            tok = greedy_next_token(logits)
            if cache.length == capacity:
                cache.drop_front(slide)
            logits = forward_incremental(weights, cache, tok)
        t2 = time.perf_counter()
    return t1 - t0, t2 - t0, max(widths)


def measure_latency(weights: ModelWeights, mode: str, N: int, K_gen: int = 128, trials: int = 5,
                    n: int = 32, m: int = 64, seed: int = 0) -> LatencyRecord:
    """Median amortized per-token latency L(N) = (T_gen(N+K) - T_prefill(N)) / K.

    ``standard`` keeps the whole prefix in the KV cache. ``absorber`` keeps only
    the unabsorbed window (at most n+m tokens, at their absolute positions)
    and slides it by n when it fills; absorption rounds themselves are not
    timed.
    """
    if N < 1 or trials < 1 or K_gen < 1:
        raise ValueError("measure_latency needs N >= 1, K_gen >= 1, trials >= 1")
    config = weights.config
    if N + K_gen > config.max_positions:
        raise ValueError(f"N + K_gen = {N + K_gen} exceeds max_positions {config.max_positions}")
    prefix = np.random.default_rng(seed).integers(0, 256, size=N)
    if mode == "standard":
        window, start, capacity, slide = prefix, 0, N + K_gen, 0
    elif mode == "absorber":
        w = _absorber_window_len(N, n, m)
        window, start, capacity, slide = prefix[N - w:], N - w, n + m, n
    else:
        raise ValueError(f"unknown latency mode {mode!r}")

    rows = []
    width = 0
    for _ in range(trials):
        t_pre, t_gen, wmax = _timed_decode(weights, window, start, K_gen, capacity, slide)
        rows.append((t_pre, t_gen, (t_gen - t_pre) / K_gen))
        width = max(width, wmax)
    med = statistics.median(r[2] for r in rows)
    t_pre = statistics.median(r[0] for r in rows)
    t_gen = statistics.median(r[1] for r in rows)
    return LatencyRecord(mode, N, K_gen, t_pre, t_gen, max(0.0, med),
                         attended_positions_per_token(mode, N, n, m), width, [r[2] for r in rows])


def latency_sweep(weights: ModelWeights, modes: Sequence[str], Ns: Sequence[int], K_gen: int = 128,
                  trials: int = 5, n: int = 32, m: int = 64, seed: int = 0) -> list[LatencyRecord]:
    return [measure_latency(weights, mode, N, K_gen, trials, n, m, seed) for mode in modes for N in Ns]


# ---------------------------------------------------------------------------
# agreement


@dataclass
class ArmMetrics:
    top1_agreement: float
    mean_abs_logit_diff: float
    hidden_l1: float


@dataclass
class AgreementReport:
    """Each arm is compared with the full-context oracle on the held-out tokens."""

    arms: dict[str, ArmMetrics]
    holdout: list[int]

    @property
    def pre(self) -> ArmMetrics:
        return self.arms["pre_absorption"]

    @property
    def post(self) -> ArmMetrics:
        return self.arms["post_absorption"]

    def to_dict(self) -> dict:
        return {"arms": {k: asdict(v) for k, v in self.arms.items()}, "holdout": self.holdout}


def greedy_rollout(weights: ModelWeights, prompt, length: int, start_position: int = 0) -> list[int]:
    """Greedy continuation without EOS handling; exactly ``length`` tokens."""
    dtype = weights.tensors["tok_embedding"].dtype
    cache = DecodeCache.empty(weights.config, capacity=len(prompt) + length, start_position=start_position,
                              dtype=dtype)
    logits = prefill(weights, cache, prompt)[-1]
    out = []
    for i in range(length):
        tok = greedy_next_token(logits)
        out.append(tok)
        if i + 1 < length:
            logits = forward_incremental(weights, cache, tok)
    return out


def _compare(oracle_logits, oracle_states, logits, states) -> ArmMetrics:
    return ArmMetrics(
        float(np.mean(oracle_logits.argmax(-1) == logits.argmax(-1))),
        float(np.mean(np.abs(oracle_logits - logits))),
        float(np.mean(np.abs(oracle_states - states))),
    )


def agreement_eval(base_weights: ModelWeights, absorbed_weights: ModelWeights, x_tokens, y_tokens,
                   holdout_len: int, start_position: int = 0) -> AgreementReport:
    """Compare contextless models on Y Y' with the frozen model on X Y Y'.

    Y' is the oracle's own greedy continuation of XY. Only predictions of Y'
    tokens are scored, i.e. positions outside the synchronization window. The
    contextless arms see Y at the same absolute positions as the oracle.
    """
    if holdout_len < 1:
        raise ValueError("holdout_len must be >= 1")
    x = [int(t) for t in x_tokens]
    y = [int(t) for t in y_tokens]
    n, m = len(x), len(y)
    if m < 1:
        raise ValueError("agreement_eval needs a non-empty Y")
    holdout = greedy_rollout(base_weights, x + y, holdout_len, start_position)
    seq = x + y + holdout[:-1]
    o_logits, o_trace = forward_full(base_weights, seq, start_position, capture=True)
    lo = n + m - 1
    o_logits, o_states = o_logits[lo:lo + holdout_len], o_trace.array()[lo:lo + holdout_len]

    arms = {"oracle": _compare(o_logits, o_states, o_logits, o_states)}
    for label, w in (("pre_absorption", base_weights), ("post_absorption", absorbed_weights)):
        logits, trace = forward_full(w, y + holdout[:-1], start_position + n, capture=True)
        arms[label] = _compare(o_logits, o_states, logits[m - 1:m - 1 + holdout_len],
                               trace.array()[m - 1:m - 1 + holdout_len])
    return AgreementReport(arms, holdout)


# ---------------------------------------------------------------------------
# token F1


def token_f1(predicted: Sequence, reference: Sequence) -> float:
    """Bag-of-tokens F1; 0 when either side is empty or nothing is shared."""
    if not predicted or not reference:
        return 0.0
    shared = sum((Counter(predicted) & Counter(reference)).values())
    if shared == 0:
        return 0.0
    precision = shared / len(predicted)
    recall = shared / len(reference)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# ablation grid

GRID_AXES = ("n", "m", "alignment_target", "loss_norm", "position_mode")


def recall_stream(seed: int, length: int, num_pairs: int = 8) -> list[int]:
    """Recall-task text (facts then restatements) at least ``length`` tokens long."""
    tokens: list[int] = []
    k = 0
    while len(tokens) < length:
        task = make_recall_task(num_pairs, seed * 1009 + k)
        tokens += encode(task.context + task.probe_text)
        k += 1
    return tokens[:length]


@dataclass
class AblationCell:
    axes: dict
    seed: int
    metrics: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> str:
        return json.dumps({"axes": self.axes, "seed": self.seed, "metrics": self.metrics, "error": self.error},
                          sort_keys=True)


def run_cell(base_weights: ModelWeights, cfg: AbsorptionConfig, x, y, holdout_len: int, seed: int,
             axes: dict) -> AblationCell:
    cell = AblationCell(dict(axes), seed)
    try:
        adapters, report = absorb_context(base_weights, x, y, cfg, seed=seed)
        absorbed = lora_merge(base_weights, adapters)
        agreement = agreement_eval(base_weights, absorbed, x, y, holdout_len)
        student = greedy_rollout(absorbed, list(y), holdout_len, cfg.n)
        cell.metrics = {
            "initial_loss": report.initial_loss,
            "final_loss": report.final_loss,
            "steps": report.steps,
            "agreement": agreement.post.top1_agreement,
            "pre_agreement": agreement.pre.top1_agreement,
            "logit_diff": agreement.post.mean_abs_logit_diff,
            "pre_logit_diff": agreement.pre.mean_abs_logit_diff,
            "hidden_l1": agreement.post.hidden_l1,
            "f1": token_f1(student, agreement.holdout),
        }
    except Exception as exc:  # recorded in-cell; the grid keeps going
        log.warning("ablation cell %s seed %d failed: %s", axes, seed, exc)
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_ablation_grid(grid: dict[str, Sequence], base_weights: ModelWeights, seeds: Sequence[int],
                      base_cfg: AbsorptionConfig | None = None, holdout_len: int = 32,
                      token_source: Callable[[int, int], list[int]] = recall_stream) -> tuple[list[AblationCell], str]:
    """Run every grid combination for every seed; returns cells and a Markdown table."""
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("ablation grid must have at least one value per axis")
    unknown = set(grid) - set(GRID_AXES)
    if unknown:
        raise ValueError(f"unknown grid axes {sorted(unknown)}; choose from {GRID_AXES}")
    base_cfg = base_cfg or AbsorptionConfig()
    names = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in names)):
        axes = dict(zip(names, combo))
        for seed in seeds:
            try:
                cfg = base_cfg.replace(**axes)
            except ValueError as exc:
                cells.append(AblationCell(axes, seed, error=str(exc)))
                continue
            stream = token_source(seed, cfg.n + cfg.m)
            cells.append(run_cell(base_weights, cfg, stream[:cfg.n], stream[cfg.n:cfg.n + cfg.m],
                                  holdout_len, seed, axes))
    return cells, render_markdown(cells, grid)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else float("nan")


def summarize(cells: Sequence[AblationCell], key: Callable[[AblationCell], tuple]) -> dict:
    groups: dict[tuple, list[AblationCell]] = {}
    for c in cells:
        groups.setdefault(key(c), []).append(c)
    out = {}
    for k, group in groups.items():
        ok = [c for c in group if c.error is None]
        out[k] = {metric: _mean([c.metrics.get(metric) for c in ok])
                  for metric in ("agreement", "pre_agreement", "logit_diff", "f1", "final_loss")}
        out[k]["failed"] = len(group) - len(ok)
    return out


def render_markdown(cells: Sequence[AblationCell], grid: dict[str, Sequence]) -> str:
    """n x m agreement table when both axes vary, otherwise one row per setting."""
    if len(grid.get("n", ())) > 1 and len(grid.get("m", ())) > 1 and len(grid) == 2:
        stats = summarize(cells, lambda c: (c.axes["n"], c.axes["m"]))
        lines = ["| Agreement (%) | " + " | ".join(f"m={m}" for m in grid["m"]) + " |",
                 "|---|" + "---|" * len(grid["m"])]
        for n in grid["n"]:
            vals = [f"{100 * stats[(n, m)]['agreement']:.1f}" for m in grid["m"]]
            lines.append(f"| n={n} | " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"
    names = list(grid)
    stats = summarize(cells, lambda c: tuple(c.axes[k] for k in names))
    header = [*names, "F1 (%)", "Agreement (%)", "Logit diff", "Final loss", "Failed"]
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for k, s in stats.items():
        row = [str(v) for v in k] + [f"{100 * s['f1']:.1f}", f"{100 * s['agreement']:.1f}",
                                     f"{s['logit_diff']:.4f}", f"{s['final_loss']:.4f}", str(s["failed"])]
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"


def cells_csv(cells: Sequence[AblationCell]) -> str:
    metric_names = sorted({k for c in cells for k in c.metrics})
    axis_names = sorted({k for c in cells for k in c.axes})
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*axis_names, "seed", *metric_names, "error"])
    for c in cells:
        writer.writerow([c.axes.get(a, "") for a in axis_names] + [c.seed]
                        + [c.metrics.get(k, "") for k in metric_names] + [c.error or ""])
    return buf.getvalue()
