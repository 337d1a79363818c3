"""Central finite-difference checks for every primitive op."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T

STEP = 1e-5
TOLERANCE = 1e-4


def numeric_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray], index: int, step: float = STEP) -> np.ndarray:
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f(arrays)
        x[i] = orig - step
        fm = f(arrays)
        x[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[..., T.TensorNode], arrays: list[np.ndarray], rng: np.random.Generator,
                    wrt: list[int] | None = None) -> float:
    """Worst relative error between reverse-mode and finite-difference grads.

    ``fn`` maps TensorNodes to a TensorNode of any shape; it is contracted with
    fixed random weights so non-scalar outputs get a generic cotangent.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else wrt
    probe = fn(*[T.TensorNode(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar(arrs):
        with T.no_grad():
            out = fn(*[T.TensorNode(a) for a in arrs])
        return float(np.sum(out.data * weights))

    leaves = [T.TensorNode(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    loss = T.sum_(T.mul(out, T.TensorNode(weights)))
    T.backward(loss)
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        worst = max(worst, relative_error(analytic, numeric_grad(scalar, arrays, i)))
    return worst


def _rope_tables(t: int, half: int):
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = np.arange(t)[:, None] * freqs[None, :]
    return np.cos(ang), np.sin(ang)


def _cases() -> dict[str, Callable[[np.random.Generator], tuple[Callable, list[np.ndarray], list[int] | None]]]:
    """Op name -> sampler returning (fn, inputs, differentiable input indices)."""

    def shp(rng, lo=1, hi=4, nd=2):
        return tuple(int(v) for v in rng.integers(lo, hi + 1, size=nd))

    def matmul_case(rng):
        b, i, k, j = (int(v) for v in rng.integers(1, 4, size=4))
        return T.matmul, [rng.standard_normal((b, i, k)), rng.standard_normal((k, j))], None

    def add_case(rng):
        s = shp(rng)
        return T.add, [rng.standard_normal(s), rng.standard_normal((1, s[1]))], None

    def mul_case(rng):
        s = shp(rng)
        return T.mul, [rng.standard_normal(s), rng.standard_normal(s[1:])], None

    def scale_case(rng):
        c = float(rng.standard_normal())
        return (lambda x: T.scale(x, c)), [rng.standard_normal(shp(rng))], None

    def silu_case(rng):
        return T.silu, [rng.standard_normal(shp(rng)) * 2], None

    def rms_case(rng):
        s = shp(rng, 1, 4, 2)
        return (lambda x, g: T.rms_norm(x, g)), [rng.standard_normal(s), rng.standard_normal(s[-1])], None

    def emb_case(rng):
        v, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        ids = rng.integers(0, v, size=int(rng.integers(1, 6)))
        return (lambda tab: T.embedding_lookup(tab, ids)), [rng.standard_normal((v, d))], None

    def transpose_case(rng):
        return T.transpose, [rng.standard_normal(shp(rng, nd=3))], None

    def concat_case(rng):
        r = int(rng.integers(1, 4))
        return (lambda a, b: T.concat([a, b], axis=1)), [rng.standard_normal((r, 2)), rng.standard_normal((r, 3))], None

    def slice_case(rng):
        s = shp(rng, 2, 5)
        lo = int(rng.integers(0, s[0] - 1))
        return (lambda x: T.slice_(x, (slice(lo, None), slice(None, None, 2)))), [rng.standard_normal(s)], None

    def reshape_case(rng):
        a, b = shp(rng)
        return (lambda x: T.reshape(x, (b, a))), [rng.standard_normal((a, b))], None

    def sum_case(rng):
        return (lambda x: T.sum_(x, axis=0)), [rng.standard_normal(shp(rng))], None

    def softmax_case(rng):
        return T.softmax_lastdim, [rng.standard_normal(shp(rng, 1, 5))], None

    def log_softmax_case(rng):
        return T.log_softmax_lastdim, [rng.standard_normal(shp(rng, 1, 5))], None

    def l1_case(rng):
        s = shp(rng)
        a = rng.standard_normal(s)
        # keep |a-b| away from the kink
        b = a + rng.choice([-1.0, 1.0], size=s) * rng.uniform(0.1, 1.0, size=s)
        mode = ["per_position", "per_element"][int(rng.integers(2))]
        return (lambda x, y: T.l1_loss(x, y, mode)), [a, b], None

    def mse_case(rng):
        s = shp(rng)
        mode = ["per_position", "per_element"][int(rng.integers(2))]
        return (lambda x, y: T.mse_loss(x, y, mode)), [rng.standard_normal(s), rng.standard_normal(s)], None

    def kl_case(rng):
        s = shp(rng, 1, 5)
        return T.kl_divergence_lastdim, [rng.standard_normal(s), rng.standard_normal(s)], None

    def ce_case(rng):
        r, v = shp(rng, 1, 5)
        tgt = rng.integers(0, v, size=r)
        return (lambda x: T.cross_entropy(x, tgt)), [rng.standard_normal((r, v))], None

    def rope_case(rng):
        h, t, half = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 3))
        cos, sin = _rope_tables(t, half)
        return (lambda x: T.rope(x, cos, sin)), [rng.standard_normal((h, t, 2 * half))], None

    return {
        "matmul": matmul_case,
        "add": add_case,
        "mul": mul_case,
        "scale": scale_case,
        "silu": silu_case,
        "rms_norm": rms_case,
        "embedding_lookup": emb_case,
        "transpose": transpose_case,
        "concat": concat_case,
        "slice": slice_case,
        "reshape": reshape_case,
        "sum": sum_case,
        "softmax_lastdim": softmax_case,
        "log_softmax_lastdim": log_softmax_case,
        "l1_loss": l1_case,
        "mse_loss": mse_case,
        "kl_divergence_lastdim": kl_case,
        "cross_entropy": ce_case,
        "rope": rope_case,
    }


CASES = _cases()


@dataclass
class OpResult:
    op: str
    cases: int
    worst_error: float
    passed: bool


def run_suite(cases_per_op: int = 100, seed: int = 0, tolerance: float = TOLERANCE) -> tuple[list[OpResult], float]:
    start = time.perf_counter()
    results = []
    for i, (name, sampler) in enumerate(CASES.items()):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(cases_per_op):
            fn, arrays, wrt = sampler(rng)
            worst = max(worst, check_gradients(fn, arrays, rng, wrt))
        results.append(OpResult(name, cases_per_op, worst, worst < tolerance))
    return results, time.perf_counter() - start
