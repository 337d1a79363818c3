"""Streaming deduction with a sliding absorption window.

The window Z holds at most n+m tokens. Once it is full, the oldest n tokens
are absorbed into the weights by synchronizing on the following m, the
adapters are merged, and the window slides forward by n. Decoding therefore
never attends over more than n+m positions, whatever the stream length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import tensor as T
from .absorption import AbsorptionConfig, absorb_context
from .corpus import EOS
from .model import DecodeCache, ModelWeights, forward_incremental, greedy_next_token, lora_merge, prefill

EVENT_KINDS = ("generated_token", "absorption_round", "eos", "budget_exhausted")
TERMINAL_KINDS = ("eos", "budget_exhausted")


@dataclass
class StreamEvent:
    kind: str
    payload: Any = None

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "payload": self.payload}, sort_keys=True)


@dataclass
class StreamState:
    window: list[int]
    weights: ModelWeights
    emitted: list[int] = field(default_factory=list)
    position_offset: int = 0
    rounds: int = 0

    @property
    def total_consumed(self) -> int:
        return self.position_offset + len(self.window)


@dataclass
class StreamResult:
    tokens: list[int]
    events: list[StreamEvent]
    weights: ModelWeights
    rounds: int

    def event_log(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)


def attended_positions_per_token(mode: str, N: int, n: int = 0, m: int = 0) -> int:
    """Cost model: key positions one decode step attends over after N tokens."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    if mode == "standard":
        return N
    if mode == "absorber":
        return min(N, n + m)
    raise ValueError(f"unknown mode {mode!r}")


def expected_rounds(prompt_len: int, generated: int, n: int, m: int) -> int:
    """Rounds triggered once ``prompt_len + generated`` tokens have passed through the window."""
    return max(0, (prompt_len + generated - m) // n)


def absorber_generate(weights: ModelWeights, input_tokens, cfg: AbsorptionConfig, max_new_tokens: int,
                      seed: int = 0, eos_token: int | None = EOS) -> StreamResult:
    """Greedy generation that absorbs the oldest n tokens whenever the window fills.

    ``weights`` is not modified; merges happen on a private copy returned in
    the result.
    """
    n, m = cfg.n, cfg.m
    if max_new_tokens < 0:
        raise T.ContractError(f"max_new_tokens must be >= 0, got {max_new_tokens}")
    if n < 1:
        raise T.ContractError("streaming needs n >= 1 so the window can slide")
    prompt = [int(t) for t in input_tokens]
    if not prompt:
        raise T.ContractError("streaming needs a non-empty prompt")
    config = weights.config
    dtype = weights.tensors["tok_embedding"].dtype
    state = StreamState(window=prompt, weights=weights.copy())
    events: list[StreamEvent] = []

    def finish(kind, payload=None):
        events.append(StreamEvent(kind, payload))
        return StreamResult(state.emitted, events, state.weights, state.rounds)

    window_size = n + m
    while True:
        if len(state.window) < window_size:
            cache = DecodeCache.empty(config, capacity=window_size, start_position=state.position_offset, dtype=dtype)
            logits = prefill(state.weights, cache, state.window)[-1]
            while len(state.window) < window_size:
                if len(state.emitted) >= max_new_tokens:
                    return finish("budget_exhausted", {"reason": "max_new_tokens"})
                if state.total_consumed >= config.max_positions:
                    return finish("budget_exhausted", {"reason": "max_positions"})
                tok = greedy_next_token(logits)
                if eos_token is not None and tok == eos_token:
                    return finish("eos")
                state.window.append(tok)
                state.emitted.append(tok)
                events.append(StreamEvent("generated_token", tok))
                if len(state.window) < window_size:
                    logits = forward_incremental(state.weights, cache, tok)

        if state.position_offset + window_size > config.max_positions:
            return finish("budget_exhausted", {"reason": "max_positions"})
        x, y = state.window[:n], state.window[n:window_size]
        adapters, report = absorb_context(state.weights, x, y, cfg, seed=seed + state.rounds,
                                          start_position=state.position_offset)
        state.weights = lora_merge(state.weights, adapters)
        summary = report.summary()
        summary["round"] = state.rounds
        summary["position_offset"] = state.position_offset
        events.append(StreamEvent("absorption_round", summary))
        del state.window[:n]
        state.position_offset += n
        state.rounds += 1
