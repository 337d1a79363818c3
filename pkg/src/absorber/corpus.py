"""Byte tokenizer, synthetic recall tasks and toy pretraining."""

from __future__ import annotations

import json
import logging
import math
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, ModelWeights, forward_nodes, init_model
from .optim import AdamW

log = logging.getLogger(__name__)

BOS = 256
EOS = 257


class DataError(ValueError):
    pass


class ByteTokenizer:
    """One token per byte; 256 = BOS, 257 = EOS."""

    vocab_size = 258
    bos = BOS
    eos = EOS

    def encode(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(text)

    def decode(self, tokens) -> bytes:
        return bytes(t for t in tokens if t < 256)


tokenizer = ByteTokenizer()


def encode(text: bytes | str) -> list[int]:
    return tokenizer.encode(text)


def decode(tokens) -> bytes:
    return tokenizer.decode(tokens)


def load_corpus(path: str | Path) -> bytes:
    return Path(path).read_bytes()


# ---------------------------------------------------------------------------
# recall tasks

KEY_ALPHABET = string.ascii_lowercase
VALUE_ALPHABET = string.digits


@dataclass
class RecallTask:
    """Key/value facts rendered as ``"K is V."`` statements.

    ``probes`` lists ``("K is", "V")`` pairs in a seeded shuffled order.
    """

    pairs: list[tuple[str, str]]
    seed: int
    probe_order: list[int] = field(default_factory=list)

    @property
    def context(self) -> str:
        return " ".join(f"{k} is {v}." for k, v in self.pairs) + " "

    @property
    def probes(self) -> list[tuple[str, str]]:
        return [(f"{self.pairs[i][0]} is", self.pairs[i][1]) for i in self.probe_order]

    @property
    def probe_text(self) -> str:
        return " ".join(f"{q} {a}." for q, a in self.probes) + " "

    @property
    def context_tokens(self) -> list[int]:
        return encode(self.context)

    @property
    def context_length(self) -> int:
        return len(self.context_tokens)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "pairs": [list(p) for p in self.pairs],
            "context": self.context,
            "context_length": self.context_length,
            "probes": [{"prompt": q, "answer": a} for q, a in self.probes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def make_recall_task(num_pairs: int, seed: int, key_len: int = 3, value_len: int = 2) -> RecallTask:
    if num_pairs < 1:
        raise DataError(f"num_pairs must be >= 1, got {num_pairs}")
    if num_pairs > len(KEY_ALPHABET) ** key_len:
        raise DataError("not enough distinct keys for num_pairs")
    rng = np.random.default_rng(seed)
    keys: list[str] = []
    seen = set()
    while len(keys) < num_pairs:
        k = "".join(rng.choice(list(KEY_ALPHABET), size=key_len))
        if k not in seen:
            seen.add(k)
            keys.append(k)
    values = ["".join(rng.choice(list(VALUE_ALPHABET), size=value_len)) for _ in keys]
    order = [int(i) for i in rng.permutation(num_pairs)]
    return RecallTask(list(zip(keys, values)), seed, order)


def recall_corpus(num_docs: int, seed: int, min_pairs: int = 3, max_pairs: int = 8) -> bytes:
    """Documents that state facts then restate them, so copying from context pays off."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(num_docs):
        task = make_recall_task(int(rng.integers(min_pairs, max_pairs + 1)), int(rng.integers(2**31)))
        docs.append(task.context + task.probe_text.rstrip() + "\n")
    return "".join(docs).encode("utf-8")


COPY_ALPHABET = string.ascii_lowercase + string.digits + " "


def pretraining_corpus(num_docs: int, seed: int, copy_fraction: float = 0.5) -> bytes:
    """Recall documents mixed with random strings repeated three times.

    The repeated strings are pure copy practice; without them a model this
    small takes far longer to start reading values back out of its context.
    """
    if not 0.0 <= copy_fraction <= 1.0:
        raise DataError(f"copy_fraction must lie in [0, 1], got {copy_fraction}")
    rng = np.random.default_rng(seed)
    letters = list(COPY_ALPHABET)
    docs = []
    for _ in range(num_docs):
        if rng.random() < copy_fraction:
            s = "".join(rng.choice(letters, size=int(rng.integers(8, 30))))
            docs.append((s + "|") * 3 + "\n")
        else:
            task = make_recall_task(int(rng.integers(3, 9)), int(rng.integers(2**31)))
            docs.append(task.context + task.probe_text.rstrip() + "\n")
    return "".join(docs).encode("utf-8")


# ---------------------------------------------------------------------------
# pretraining


def _windows(data: np.ndarray, seq_len: int) -> int:
    return len(data) - seq_len - 1


def heldout_loss(weights: ModelWeights, data: bytes | np.ndarray, seq_len: int = 128, max_windows: int = 16) -> float:
    """Mean next-token cross-entropy over non-overlapping windows."""
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.int64) if isinstance(data, bytes) else np.asarray(data)
    starts = range(0, len(arr) - seq_len - 1, seq_len + 1)
    losses = []
    with T.no_grad():
        params = weights.as_nodes()
        for s in list(starts)[:max_windows]:
            chunk = arr[s:s + seq_len + 1]
            logits, _ = forward_nodes(weights.config, params, chunk[:-1])
            losses.append(T.cross_entropy(logits, chunk[1:]).item())
    if not losses:
        raise DataError("held-out data shorter than one window")
    return float(np.mean(losses))


def split_corpus(corpus: bytes, heldout_fraction: float = 0.1) -> tuple[bytes, bytes]:
    cut = int(len(corpus) * (1.0 - heldout_fraction))
    return corpus[:cut], corpus[cut:]


def pretrain_toy(config: ModelConfig, corpus: bytes, steps: int, seed: int, seq_len: int = 128,
                 batch_size: int = 8, lr: float = 3e-3, weight_decay: float = 0.01, warmup: int = 50,
                 callback: Callable[[int, float], None] | None = None) -> ModelWeights:
    """Next-token training with AdamW on the first 90% of ``corpus``.

    Batches are random windows drawn from a seeded generator, so the result is
    a pure function of (config, corpus, steps, seed, hyperparameters).
    """
    if len(corpus) < 64 * seq_len:
        raise DataError(f"corpus has {len(corpus)} bytes, need at least {64 * seq_len} for seq_len {seq_len}")
    weights = init_model(config, seed)
    if steps <= 0:
        return weights
    train, _ = split_corpus(corpus)
    data = np.frombuffer(train, dtype=np.uint8).astype(np.int64)
    rng = np.random.default_rng([seed, 1])
    opt = AdamW(weights.tensors, lr=lr, betas=(0.9, 0.95), weight_decay=weight_decay)
    n_windows = _windows(data, seq_len)
    for step in range(steps):
        starts = rng.integers(0, n_windows, size=batch_size)
        batch = np.stack([data[s:s + seq_len + 1] for s in starts])
        params = weights.as_nodes(requires_grad=True)
        logits, _ = forward_nodes(config, params, batch[:, :-1])
        loss = T.cross_entropy(T.reshape(logits, (-1, config.vocab_size)), batch[:, 1:].reshape(-1))
        T.backward(loss)
        if step < warmup:
            cur = lr * (step + 1) / warmup
        else:
            frac = (step - warmup) / max(1, steps - warmup)
            cur = lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * frac)))
        opt.step({k: p.grad for k, p in params.items()}, lr=cur)
        if callback is not None:
            callback(step, loss.item())
        if step % 100 == 0:
            log.debug("pretrain step %d loss %.4f", step, loss.item())
    return weights
