"""Toy LLaMA-style decoder: pre-norm RMSNorm, rotary positions, SiLU-gated MLP.

Linear weights are stored ``[in, out]`` and applied as ``x @ W``. A low-rank
adapter for a weight of that shape is the pair ``B [in, r]`` (zero init) and
``A [r, out]`` (gaussian init); the adapted product is
``x @ W + (alpha / r) * (x @ B) @ A``, i.e. the weight delta is
``(alpha / r) * B @ A``.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .tensor import TensorNode

BYTE_VOCAB = 258
LINEAR_TARGETS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
ATTENTION_TARGETS = ("wq", "wk", "wv", "wo")


class ConfigError(ValueError):
    pass


class CapacityError(RuntimeError):
    """Absolute position would exceed the rotary table or cache capacity."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    mlp_dim: int = 512
    vocab_size: int = BYTE_VOCAB
    max_positions: int = 4096
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "mlp_dim", "vocab_size", "max_positions"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"model config: {name} must be >= 1, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(
                f"model config: hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.head_dim % 2:
            raise ConfigError(f"model config: head_dim {self.head_dim} must be even for rotary embeddings")
        if self.rope_base <= 1.0:
            raise ConfigError("model config: rope_base must be > 1")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"model config: unknown keys {sorted(unknown)}")
        return cls(**d)


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter name -> shape, in canonical (checkpoint) order."""
    d, f = config.hidden_dim, config.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {"tok_embedding": (config.vocab_size, d)}
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (d,)
        for name in ATTENTION_TARGETS:
            shapes[p + name] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, f)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["unembedding"] = (d, config.vocab_size)
    return shapes


def parameter_count(config: ModelConfig) -> int:
    d, f, v, n_layers = config.hidden_dim, config.mlp_dim, config.vocab_size, config.num_layers
    return 2 * v * d + d + n_layers * (4 * d * d + 3 * d * f + 2 * d)


@dataclass
class ModelWeights:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    def __post_init__(self):
        expected = tensor_shapes(self.config)
        if set(expected) != set(self.tensors):
            missing = sorted(set(expected) - set(self.tensors))
            extra = sorted(set(self.tensors) - set(expected))
            raise ConfigError(f"weights do not match config: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(f"weights: {name} has shape {self.tensors[name].shape}, expected {shape}")

    def copy(self) -> ModelWeights:
        return ModelWeights(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def equals(self, other: ModelWeights) -> bool:
        return self.config == other.config and all(
            np.array_equal(v, other.tensors[k]) and v.dtype == other.tensors[k].dtype for k, v in self.tensors.items()
        )

    def as_nodes(self, requires_grad: bool = False) -> dict[str, TensorNode]:
        if requires_grad:
            return {k: TensorNode(v, requires_grad=True) for k, v in self.tensors.items()}
        return {k: T.constant(v) for k, v in self.tensors.items()}


def init_model(config: ModelConfig, seed: int, dtype=np.float32) -> ModelWeights:
    """Scaled-gaussian init; norm gains start at 1."""
    if not isinstance(config, ModelConfig):
        raise ConfigError("init_model expects a ModelConfig")
    rng = np.random.default_rng(seed)
    residual_scale = 1.0 / np.sqrt(2 * config.num_layers)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            arr = np.ones(shape)
        elif leaf == "tok_embedding":
            arr = rng.standard_normal(shape)
        else:
            arr = rng.standard_normal(shape) / np.sqrt(shape[0])
            if leaf in ("wo", "w_down"):
                arr *= residual_scale
        tensors[name] = arr.astype(dtype)
    return ModelWeights(config, tensors)


@dataclass
class LoraAdapterSet:
    rank: int
    alpha: float
    targets: tuple[str, ...]
    pairs: dict[str, tuple[np.ndarray, np.ndarray]]  # weight name -> (A [r,out], B [in,r])

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> LoraAdapterSet:
        return LoraAdapterSet(self.rank, self.alpha, self.targets,
                              {k: (a.copy(), b.copy()) for k, (a, b) in self.pairs.items()})

    def is_zero(self) -> bool:
        return all(not b.any() for _, b in self.pairs.values())

    def as_nodes(self, requires_grad: bool = False) -> dict[str, tuple[TensorNode, TensorNode]]:
        wrap = (lambda a: TensorNode(a, requires_grad=True)) if requires_grad else T.constant
        return {k: (wrap(a), wrap(b)) for k, (a, b) in self.pairs.items()}

    def delta(self, name: str) -> np.ndarray:
        a, b = self.pairs[name]
        return (self.scaling * (b.astype(np.float64) @ a.astype(np.float64)))


def init_adapters(config: ModelConfig, rank: int, alpha: float, seed: int,
                  targets=LINEAR_TARGETS, dtype=np.float32) -> LoraAdapterSet:
    bad = set(targets) - set(LINEAR_TARGETS)
    if bad:
        raise ConfigError(f"unknown adapter targets {sorted(bad)}; choose from {LINEAR_TARGETS}")
    if rank < 1:
        raise ConfigError(f"adapter rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    shapes = tensor_shapes(config)
    pairs = {}
    for layer in range(config.num_layers):
        for t in targets:
            name = f"layers.{layer}.{t}"
            d_in, d_out = shapes[name]
            a = (rng.standard_normal((rank, d_out)) / np.sqrt(rank)).astype(dtype)
            pairs[name] = (a, np.zeros((d_in, rank), dtype=dtype))
    return LoraAdapterSet(rank, float(alpha), tuple(targets), pairs)


def lora_merge(weights: ModelWeights, adapters: LoraAdapterSet) -> ModelWeights:
    """Fold ``(alpha/r) * B @ A`` into each adapted weight; returns new weights."""
    merged = weights.copy()
    for name, (a, b) in adapters.pairs.items():
        if name not in merged.tensors:
            raise ConfigError(f"lora_merge: adapter targets unknown weight {name}")
        w = merged.tensors[name]
        if b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1] or a.shape[0] != b.shape[1]:
            raise ConfigError(f"lora_merge: adapter shapes {b.shape}x{a.shape} do not fit {name} {w.shape}")
        if not b.any():
            continue
        merged.tensors[name] = (w.astype(np.float64) + adapters.delta(name)).astype(w.dtype)
    return merged


# ---------------------------------------------------------------------------
# hidden-state traces and decode caches


@dataclass
class HiddenStateTrace:
    """``states[i, l]`` is h^l at absolute position ``positions[i]``.

    l = 0 is the embedding output and l = L the last block's residual output
    (before the final norm). ``states`` is a TensorNode so a student trace can
    carry gradients; oracle traces are captured without a graph.
    """

    positions: np.ndarray
    states: TensorNode

    @property
    def num_layers(self) -> int:
        return self.states.shape[1] - 1

    def array(self) -> np.ndarray:
        return self.states.data

    def select(self, start: int, stop: int) -> HiddenStateTrace:
        return HiddenStateTrace(self.positions[start:stop], T.slice_(self.states, slice(start, stop)))

    def detach(self) -> HiddenStateTrace:
        return HiddenStateTrace(self.positions.copy(), T.constant(self.states.data.copy()))


@dataclass
class DecodeCache:
    """Per-layer rotated keys and values for a contiguous run of positions.

    Slot 0 holds absolute position ``start_position``. ``capacity`` bounds the
    slots; streaming code drops slots from the front to slide a window.
    """

    keys: list[np.ndarray]
    values: list[np.ndarray]
    length: int = 0
    start_position: int = 0

    @classmethod
    def empty(cls, config: ModelConfig, capacity: int | None = None, start_position: int = 0,
              dtype=np.float32) -> DecodeCache:
        capacity = config.max_positions if capacity is None else capacity
        shape = (config.num_heads, capacity, config.head_dim)
        return cls([np.zeros(shape, dtype) for _ in range(config.num_layers)],
                   [np.zeros(shape, dtype) for _ in range(config.num_layers)], 0, start_position)

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[1]

    @property
    def next_position(self) -> int:
        return self.start_position + self.length

    def drop_front(self, count: int) -> None:
        count = min(count, self.length)
        keep = self.length - count
        for arr in (*self.keys, *self.values):
            arr[:, :keep] = arr[:, count:self.length].copy()
        self.length = keep
        self.start_position += count


_probe = threading.local()


@contextlib.contextmanager
def track_attention():
    """Collect, for every attention call in the block, the largest number of
    key positions any single query attended over."""
    widths: list[int] = []
    stack = getattr(_probe, "stack", None)
    if stack is None:
        stack = _probe.stack = []
    stack.append(widths)
    try:
        yield widths
    finally:
        stack.remove(widths)


def _record_width(width: int) -> None:
    for widths in getattr(_probe, "stack", ()):
        widths.append(width)


@functools.lru_cache(maxsize=16)
def _rope_tables(head_dim: int, max_positions: int, base: float, dtype_str: str):
    half = head_dim // 2
    freqs = 1.0 / (base ** (np.arange(half, dtype=np.float64) / half))
    ang = np.arange(max_positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(ang).astype(dtype_str), np.sin(ang).astype(dtype_str)


# ---------------------------------------------------------------------------
# forward passes


def _forward(config: ModelConfig, params: dict[str, TensorNode],
             lora: dict[str, tuple[TensorNode, TensorNode]] | None, lora_scale: float,
             tokens: np.ndarray, start_position: int, capture: bool, cache: DecodeCache | None):
    """Core pass over ``tokens`` of shape [B, S]. Returns (logits [B,S,V], states list)."""
    bsz, seq = tokens.shape
    if seq < 1:
        raise T.ContractError("forward: need at least one token")
    if start_position < 0 or start_position + seq > config.max_positions:
        raise CapacityError(
            f"positions {start_position}..{start_position + seq - 1} exceed max_positions {config.max_positions}"
        )
    if cache is not None:
        if bsz != 1:
            raise T.ContractError("forward: cache requires batch size 1")
        if start_position != cache.next_position:
            raise T.ContractError(f"forward: cache expects position {cache.next_position}, got {start_position}")
        if cache.length + seq > cache.capacity:
            raise CapacityError(f"decode cache full ({cache.capacity} slots)")

    n_heads, hd, d = config.num_heads, config.head_dim, config.hidden_dim
    dtype = params["tok_embedding"].dtype
    cos_all, sin_all = _rope_tables(hd, config.max_positions, float(config.rope_base), dtype.str)
    pos = np.arange(start_position, start_position + seq)
    cos, sin = cos_all[pos], sin_all[pos]
    if cache is not None:
        key_pos = np.arange(cache.start_position, cache.next_position + seq)
    else:
        key_pos = pos
    mask = key_pos[None, :] <= pos[:, None]
    _record_width(int(mask.sum(axis=1).max()))
    inv_sqrt = 1.0 / np.sqrt(hd)

    def linear(x, name):
        out = T.matmul(x, params[name])
        if lora is not None and name in lora:
            a, b = lora[name]
            out = T.add(out, T.scale(T.matmul(T.matmul(x, b), a), lora_scale))
        return out

    def heads(x):
        return T.transpose(T.reshape(x, (bsz, seq, n_heads, hd)), 1, 2)

    x = T.embedding_lookup(params["tok_embedding"], tokens)
    states = [x] if capture else None
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        a = T.rms_norm(x, params[p + "attn_norm"])
        q = T.rope(heads(linear(a, p + "wq")), cos, sin)
        k = T.rope(heads(linear(a, p + "wk")), cos, sin)
        v = heads(linear(a, p + "wv"))
        if cache is not None:
            lo, hi = cache.length, cache.length + seq
            cache.keys[layer][:, lo:hi] = k.data[0]
            cache.values[layer][:, lo:hi] = v.data[0]
            k = T.constant(cache.keys[layer][None, :, :hi])
            v = T.constant(cache.values[layer][None, :, :hi])
        scores = T.scale(T.matmul(q, T.transpose(k)), inv_sqrt)
        probs = T.softmax_lastdim(scores, mask)
        attn = T.reshape(T.transpose(T.matmul(probs, v), 1, 2), (bsz, seq, d))
        x = T.add(x, linear(attn, p + "wo"))
        m = T.rms_norm(x, params[p + "mlp_norm"])
        hidden = T.mul(T.silu(linear(m, p + "w_gate")), linear(m, p + "w_up"))
        x = T.add(x, linear(hidden, p + "w_down"))
        if capture:
            states.append(x)
    if cache is not None:
        cache.length += seq
    logits = T.matmul(T.rms_norm(x, params["final_norm"]), params["unembedding"])
    return logits, states


def _trace_from_states(states: list[TensorNode], start_position: int) -> HiddenStateTrace:
    # states: L+1 tensors [1, S, d] -> [S, L+1, d]
    stacked = T.stack([T.reshape(s, s.shape[1:]) for s in states], axis=1)
    return HiddenStateTrace(np.arange(start_position, start_position + stacked.shape[0]), stacked)


def forward_nodes(config: ModelConfig, params: dict[str, TensorNode], tokens, start_position: int = 0,
                  lora: dict | None = None, lora_scale: float = 1.0, capture: bool = False):
    """Graph-building forward for training loops. Single sequence -> logits [S, V]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    batched = tokens.ndim == 2
    logits, states = _forward(config, params, lora, lora_scale, tokens if batched else tokens[None],
                              start_position, capture, None)
    if batched:
        return logits, None
    logits = T.reshape(logits, logits.shape[1:])
    return logits, (_trace_from_states(states, start_position) if capture else None)


def forward_full(weights: ModelWeights, tokens, start_position: int = 0,
                 adapters: LoraAdapterSet | None = None, capture: bool = False):
    """Inference forward over a whole sequence. Returns (logits [S, V], trace or None)."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size < 1:
        raise T.ContractError("forward_full: need a non-empty 1-d token sequence")
    with T.no_grad():
        logits, trace = forward_nodes(
            weights.config, weights.as_nodes(), tokens, start_position,
            adapters.as_nodes() if adapters is not None else None,
            adapters.scaling if adapters is not None else 1.0, capture,
        )
    return logits.data, trace


def prefill(weights: ModelWeights, cache: DecodeCache, tokens,
            adapters: LoraAdapterSet | None = None) -> np.ndarray:
    """Append ``tokens`` to ``cache`` in one pass; returns logits [S, V]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    with T.no_grad():
        logits, _ = _forward(weights.config, weights.as_nodes(),
                             adapters.as_nodes() if adapters is not None else None,
                             adapters.scaling if adapters is not None else 1.0,
                             tokens[None], cache.next_position, False, cache)
    return logits.data[0]


def forward_incremental(weights: ModelWeights, cache: DecodeCache, token: int,
                        adapters: LoraAdapterSet | None = None) -> np.ndarray:
    """Consume one token at ``cache.next_position``; returns logits [V]."""
    return prefill(weights, cache, [int(token)], adapters)[0]


def greedy_next_token(logits: np.ndarray) -> int:
    """Argmax; ties go to the lowest index."""
    return int(np.argmax(logits))


def greedy_generate(weights: ModelWeights, prompt, max_new_tokens: int, eos_token: int | None = None,
                    adapters: LoraAdapterSet | None = None) -> list[int]:
    """Plain greedy decoding with a full-history KV cache."""
    cache = DecodeCache.empty(weights.config, dtype=weights.tensors["tok_embedding"].dtype)
    out: list[int] = []
    if max_new_tokens <= 0:
        return out
    logits = prefill(weights, cache, prompt, adapters)[-1]
    while True:
        tok = greedy_next_token(logits)
        if eos_token is not None and tok == eos_token:
            break
        out.append(tok)
        if len(out) >= max_new_tokens:
            break
        logits = forward_incremental(weights, cache, tok, adapters)
    return out
