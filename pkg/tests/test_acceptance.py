"""End-to-end acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL summary (printed in the terminal
summary section) before asserting, so a failing run still reports every
criterion. Criteria 3 and 5-8 use the cached pretrained toy model from
conftest.py.
"""

import statistics
import struct
from collections import Counter

import numpy as np
import pytest

from absorber.absorption import AbsorptionConfig, absorb_context, sync_loss, capture_oracle_trace
from absorber.bench import AblationCell, agreement_eval, latency_sweep, recall_stream, render_markdown, token_f1
from absorber.checkpoint import VERSION, CheckpointError, load_checkpoint, save_checkpoint
from absorber.gradcheck import run_suite
from absorber.model import (DecodeCache, ModelConfig, forward_full, forward_incremental, greedy_generate,
                            init_adapters, init_model, lora_merge, track_attention)
from absorber.streaming import absorber_generate

pytestmark = pytest.mark.acceptance

N_CTX, M_SYNC, HOLDOUT = 32, 64, 32
SEEDS = range(20)
_RUNS: dict = {}


def absorption_run(weights, target: str, seed: int) -> dict:
    """Absorb a recall-task context with the default K and eta; cached per (target, seed).

    epsilon=0 makes every arm spend exactly K steps, so comparisons between
    alignment targets are at equal step budgets.
    """
    key = (target, seed)
    if key not in _RUNS:
        stream = recall_stream(seed, N_CTX + M_SYNC)
        x, y = stream[:N_CTX], stream[N_CTX:]
        cfg = AbsorptionConfig(n=N_CTX, m=M_SYNC, max_steps=200, lr=5e-4, epsilon=0.0, alignment_target=target)
        adapters, report = absorb_context(weights, x, y, cfg, seed=seed)
        absorbed = lora_merge(weights, adapters)
        _RUNS[key] = {"report": report, "agreement": agreement_eval(weights, absorbed, x, y, HOLDOUT)}
    return _RUNS[key]


def test_1_gradient_suite(record):
    results, elapsed = run_suite(cases_per_op=100, seed=0, tolerance=1e-4)
    failed = [r.op for r in results if not r.passed]
    worst = max(r.worst_error for r in results)
    ok = not failed and elapsed < 60.0
    record(1, ok, f"{len(results)} ops x 100 cases, worst rel err {worst:.1e}, {elapsed:.1f}s, failed={failed}")
    assert ok


def test_2_empty_context_identity(record):
    weights = init_model(ModelConfig(), 0)
    y = recall_stream(1, M_SYNC)
    cfg = AbsorptionConfig(n=0, m=M_SYNC)
    target = capture_oracle_trace(weights, y, 0, M_SYNC)
    adapters = init_adapters(weights.config, cfg.lora_rank, cfg.lora_alpha, 0)
    _, student = forward_full(weights, y, 0, adapters=adapters, capture=True)
    loss = sync_loss(target, student, cfg).item()
    _, report = absorb_context(weights, [], y, cfg)
    ok = loss == 0.0 and report.optimizer_steps == 0 and report.terminated_by == "threshold"
    record(2, ok, f"sync_loss={loss}, optimizer_steps={report.optimizer_steps}, terminated_by={report.terminated_by}")
    assert ok


def test_3_kv_cache_equivalence(record, pretrained):
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        toks = rng.integers(0, 256, int(rng.integers(1, 257)))
        full, _ = forward_full(pretrained, toks)
        cache = DecodeCache.empty(pretrained.config, capacity=len(toks))
        inc = np.stack([forward_incremental(pretrained, cache, t) for t in toks])
        worst = max(worst, float(np.abs(inc - full).max()))
    ok = worst <= 1e-5
    record(3, ok, f"50 sequences up to 256 tokens, max abs logit diff {worst:.2e} (limit 1e-5)")
    assert ok


def test_4_adapter_identity_and_merge(record):
    weights = init_model(ModelConfig(), 4)
    rng = np.random.default_rng(4)
    zero = init_adapters(weights.config, 8, 16.0, 0)
    identity_ok = True
    worst = 0.0
    for i in range(20):
        toks = rng.integers(0, 256, int(rng.integers(1, 65)))
        base, _ = forward_full(weights, toks)
        identity_ok &= forward_full(weights, toks, adapters=zero)[0].tobytes() == base.tobytes()
        adapters = init_adapters(weights.config, 8, 16.0, i)
        for a, b in adapters.pairs.values():
            b[...] = rng.standard_normal(b.shape).astype(b.dtype) * 0.02
        adapted, _ = forward_full(weights, toks, adapters=adapters)
        merged, _ = forward_full(lora_merge(weights, adapters), toks)
        worst = max(worst, float(np.abs(adapted - merged).max()))
    ok = identity_ok and worst <= 1e-5
    record(4, ok, f"zero adapters bitwise identical={identity_ok}, merged vs adapted max diff {worst:.2e} (limit 1e-5)")
    assert ok


def test_5_absorption_convergence(record, pretrained):
    reports = [absorption_run(pretrained, "hidden_states", seed)["report"] for seed in range(10)]
    initial = statistics.mean(r.initial_loss for r in reports)
    final = statistics.mean(r.final_loss for r in reports)
    slowest = max(r.wall_time for r in reports)
    ratio = final / initial
    ok = ratio <= 0.25 and slowest < 300.0
    record(5, ok, f"mean final/initial = {final:.3f}/{initial:.3f} = {ratio:.3f} (limit 0.25), "
                  f"slowest seed {slowest:.1f}s")
    assert ok


def test_6_causal_effect_generalization(record, pretrained):
    pre, post, ttt = [], [], []
    for seed in SEEDS:
        run = absorption_run(pretrained, "hidden_states", seed)
        pre.append(run["agreement"].pre.top1_agreement)
        post.append(run["agreement"].post.top1_agreement)
        ttt.append(absorption_run(pretrained, "ttt_reconstruction", seed)["agreement"].post.top1_agreement)
    pre_m, post_m, ttt_m = (100 * statistics.mean(v) for v in (pre, post, ttt))
    ok = post_m - pre_m >= 15.0 and post_m > ttt_m
    record(6, ok, f"agreement over {len(SEEDS)} seeds: post {post_m:.1f}%, pre {pre_m:.1f}% "
                  f"(gain {post_m - pre_m:+.1f}pp, need >= 15), ttt {ttt_m:.1f}%")
    assert ok


def test_7_constant_deduction_cost(record, pretrained):
    n, m = N_CTX, M_SYNC
    prompt = recall_stream(7, n + m)
    new_tokens = 16 * (n + m) - len(prompt)
    # width does not depend on how many optimizer steps each round takes
    cfg = AbsorptionConfig(n=n, m=m, max_steps=1)
    with track_attention() as widths:
        result = absorber_generate(pretrained, prompt, cfg, new_tokens, eos_token=None)
    total = len(prompt) + len(result.tokens)
    width_ok = total >= 16 * (n + m) and max(widths) <= n + m

    Ns = [256, 512, 1024, 2048]

    def sweep():
        records = latency_sweep(pretrained, ["standard", "absorber"], Ns, K_gen=128, trials=5, n=n, m=m)
        std = [r.L_N for r in records if r.mode == "standard"]
        absb = [r.L_N for r in records if r.mode == "absorber"]
        return std, absb

    std, absb = sweep()
    soft_ok = all(a < b for a, b in zip(std, std[1:])) and absb[-1] <= 1.5 * absb[0]
    if not soft_ok:
        # wall-clock is noisy on a shared core; one re-measurement
        std, absb = sweep()
        soft_ok = all(a < b for a, b in zip(std, std[1:])) and absb[-1] <= 1.5 * absb[0]
    ok = width_ok and soft_ok
    fmt = lambda vals: "/".join(f"{1e3 * v:.2f}" for v in vals)
    record(7, ok, f"stream of {total} tokens, {result.rounds} rounds, max width {max(widths)} (limit {n + m}); "
                  f"L(N) ms standard {fmt(std)}, absorber {fmt(absb)}")
    assert width_ok, "attention width exceeded n+m"
    assert soft_ok, "latency trend"


def test_8_alignment_granularity(record, pretrained):
    cells = []
    wins = 0
    for seed in SEEDS:
        diffs = {}
        for target in ("token_distribution", "hidden_states"):
            run = absorption_run(pretrained, target, seed)
            post = run["agreement"].post
            diffs[target] = post.mean_abs_logit_diff
            cells.append(AblationCell({"alignment_target": target}, seed, {
                "agreement": post.top1_agreement, "pre_agreement": run["agreement"].pre.top1_agreement,
                "logit_diff": post.mean_abs_logit_diff, "final_loss": run["report"].final_loss, "f1": float("nan"),
            }))
        wins += diffs["hidden_states"] <= diffs["token_distribution"]
    table = render_markdown(cells, {"alignment_target": ["token_distribution", "hidden_states"]})
    rows = table.strip().splitlines()[2:]
    both_rows = len(rows) == 2 and "token_distribution" in rows[0] and "hidden_states" in rows[1]
    share = wins / len(SEEDS)
    ok = share >= 0.7 and both_rows
    record(8, ok, f"hidden_states logit diff <= token_distribution on {wins}/{len(SEEDS)} seeds ({100 * share:.0f}%, "
                  f"need >= 70%)")
    print(table)
    assert ok


def simulate_rounds(prompt_len: int, budget: int, n: int, m: int) -> int:
    """Plain window simulation: grow the window one token at a time, slide by n when it hits n+m."""
    window, rounds = 0, 0
    for _ in range(prompt_len):
        window += 1
        while window == n + m:
            rounds += 1
            window -= n
    for _ in range(budget):
        window += 1
        if window == n + m:
            rounds += 1
            window -= n
    return rounds


def test_9_window_arithmetic(record):
    weights = init_model(ModelConfig(num_layers=2, hidden_dim=32, num_heads=4, mlp_dim=64, max_positions=1024), 9)
    rng = np.random.default_rng(9)
    mismatches = []
    for case in range(25):
        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 13))
        p_len, budget = int(rng.integers(1, 40)), int(rng.integers(0, 40))
        prompt = [int(t) for t in rng.integers(0, 256, p_len)]
        cfg = AbsorptionConfig(n=n, m=m, max_steps=1, lora_rank=2, lora_alpha=2.0)
        result = absorber_generate(weights, prompt, cfg, budget, seed=case, eos_token=None)
        expected = simulate_rounds(p_len, budget, n, m)
        if result.rounds != expected or len(result.tokens) != budget:
            mismatches.append((n, m, p_len, budget, result.rounds, expected))
    prompt = [int(t) for t in rng.integers(0, 256, 10)]
    cfg = AbsorptionConfig(n=16, m=32, max_steps=1)
    degenerate = absorber_generate(weights, prompt, cfg, 20, eos_token=None)
    degenerate_ok = degenerate.rounds == 0 and degenerate.tokens == greedy_generate(weights, prompt, 20)
    ok = not mismatches and degenerate_ok
    record(9, ok, f"25 settings, mismatches={mismatches}; no-round case equals greedy decoding: {degenerate_ok}")
    assert ok


def test_10_persistence(record, tmp_path):
    rng = np.random.default_rng(10)
    exact = 0
    for i in range(10):
        heads = int(rng.integers(1, 4))
        config = ModelConfig(num_layers=int(rng.integers(1, 4)), hidden_dim=heads * 2 * int(rng.integers(1, 5)),
                             num_heads=heads, mlp_dim=int(rng.integers(4, 40)), max_positions=64)
        weights = init_model(config, int(rng.integers(2**31)))
        path = tmp_path / f"m{i}.absb"
        save_checkpoint(weights, path)
        loaded, cfg, _ = load_checkpoint(path)
        exact += cfg == config and all(loaded.tensors[k].tobytes() == v.tobytes() for k, v in weights.tensors.items())

    path = tmp_path / "m0.absb"
    data = path.read_bytes()
    diagnostics = []
    for label, blob in (("truncated", data[:-7]), ("bad magic", b"XXXX" + data[4:]),
                        ("wrong version", data[:4] + struct.pack("<I", VERSION + 1) + data[8:])):
        bad = tmp_path / "bad.absb"
        bad.write_bytes(blob)
        try:
            load_checkpoint(bad)
            diagnostics.append(f"{label}: loaded")
        except CheckpointError as exc:
            diagnostics.append(f"{label}: {'ok' if str(exc) else 'no message'}")
    failures_ok = all(d.endswith("ok") for d in diagnostics)
    ok = exact == 10 and failures_ok
    record(10, ok, f"{exact}/10 bitwise round trips; {', '.join(diagnostics)}")
    assert ok


def multiset_f1(pred, ref):
    if not pred or not ref:
        return 0.0
    counts = Counter(ref)
    shared = 0
    for tok in pred:
        if counts[tok] > 0:
            counts[tok] -= 1
            shared += 1
    if shared == 0:
        return 0.0
    p, r = shared / len(pred), shared / len(ref)
    return 2 * p * r / (p + r)


def test_11_token_f1(record):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(100):
        pred = list(rng.integers(0, 8, int(rng.integers(0, 15))))
        ref = list(rng.integers(0, 8, int(rng.integers(0, 15))))
        worst = max(worst, abs(token_f1(pred, ref) - multiset_f1(pred, ref)))
    worked = token_f1(["a", "b", "b"], ["b", "c"])
    ok = worst < 1e-12 and worked == 0.4
    record(11, ok, f"100 random pairs, max deviation from oracle {worst:.1e}; worked case -> {worked}")
    assert ok
