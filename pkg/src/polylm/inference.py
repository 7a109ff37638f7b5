"""Autoregressive generation with a grouped-query KV cache."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .architecture import LayerCache, ModelConfig, ModelWeights, model_forward
from .numerics import Rng
from .tokenizer import END_OF_TURN, ChatTurn, TokenizerModel, render_chat

BYTES_PER_VALUE = 4


class KvCache:
    """Per-layer keys/values with ``n_kv_heads`` rows each; lengths stay in lockstep."""

    def __init__(self, config: ModelConfig, capacity: int | None = None, dtype=np.float32):
        cap = capacity or config.max_seq_len
        self.layers = [LayerCache(config.n_kv_heads, config.d_head, cap, dtype) for _ in range(config.n_layers)]

    @property
    def length(self) -> int:
        return self.layers[0].length

    @property
    def capacity(self) -> int:
        return self.layers[0].capacity

    def copy(self) -> KvCache:
        c = KvCache.__new__(KvCache)
        c.layers = [layer.copy() for layer in self.layers]
        return c

    def nbytes(self) -> int:
        return sum(layer.nbytes() for layer in self.layers)


def cache_memory_bytes(config: ModelConfig, seq_len: int, bytes_per_value: int = BYTES_PER_VALUE) -> int:
    """Bytes for keys and values of every layer at ``seq_len`` tokens."""
    return 2 * config.n_layers * config.n_kv_heads * config.d_head * seq_len * bytes_per_value


def mha_cache_memory_bytes(config: ModelConfig, seq_len: int, bytes_per_value: int = BYTES_PER_VALUE) -> int:
    """Same cache if every query head had its own KV head."""
    return cache_memory_bytes(config.replace(n_kv_heads=config.n_heads), seq_len, bytes_per_value)


def prefill(model, tokens: Sequence[int], capacity: int | None = None) -> tuple[KvCache, np.ndarray]:
    """Run the prompt through the model, returning the filled cache and last-position logits."""
    config, weights = model
    if len(tokens) == 0:
        raise ValueError("cannot prefill an empty prompt")
    cache = KvCache(config, capacity, dtype=weights.dtype)
    if len(tokens) > cache.capacity:
        raise OverflowError(f"prompt of {len(tokens)} tokens exceeds cache capacity {cache.capacity}")
    with nx.no_grad():
        logits = model_forward(np.asarray(tokens), config, weights, caches=cache.layers)
    return cache, logits.data[-1]


def prefill_all(model, tokens: Sequence[int], capacity: int | None = None) -> tuple[KvCache, np.ndarray]:
    """Like :func:`prefill` but returns logits for every prompt position."""
    config, weights = model
    cache = KvCache(config, capacity, dtype=weights.dtype)
    with nx.no_grad():
        logits = model_forward(np.asarray(tokens), config, weights, caches=cache.layers)
    return cache, logits.data


def decode_step(model, cache: KvCache, token: int) -> np.ndarray:
    """Feed one token; extends ``cache`` by one position and returns next-token logits."""
    config, weights = model
    if cache.length >= cache.capacity:
        raise OverflowError(f"KV cache full at {cache.capacity} tokens")
    with nx.no_grad():
        logits = model_forward(np.asarray([token]), config, weights, caches=cache.layers)
    return logits.data[-1]


def decode_many(model, cache: KvCache, tokens: Sequence[int]) -> np.ndarray:
    """Feed several tokens at once; returns logits for each."""
    config, weights = model
    with nx.no_grad():
        return model_forward(np.asarray(tokens), config, weights, caches=cache.layers).data


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 64
    temperature: float = 0.0
    stop_tokens: tuple[str, ...] = (END_OF_TURN,)
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def choose_token(logits: np.ndarray, temperature: float, rng: Rng | None = None) -> int:
    """Greedy (lowest id on ties) at temperature 0, else a softmax sample."""
    if temperature == 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    if rng is None:
        raise ValueError("sampling needs an Rng")
    return int(rng.choice(len(p), 1, replace=True, p=p)[0])


@dataclass
class Generation:
    token_ids: list[int]
    text: str
    stopped: bool
    metadata: dict = field(default_factory=dict)


def generate_ids(model, prompt_ids: Sequence[int], gen: GenerationConfig, stop_ids: set[int]) -> tuple[list[int], bool, KvCache]:
    config, _ = model
    capacity = min(config.max_seq_len, len(prompt_ids) + gen.max_new_tokens)
    cache, logits = prefill(model, prompt_ids, capacity)
    rng = Rng(gen.seed).split("sample")
    out: list[int] = []
    for step in range(gen.max_new_tokens):
        tok = choose_token(logits, gen.temperature, rng.split(step))
        if tok in stop_ids:
            return out, True, cache
        out.append(tok)
        if step + 1 == gen.max_new_tokens or cache.length >= cache.capacity:
            break
        logits = decode_step(model, cache, tok)
    return out, False, cache


def generate(model, turns: Sequence[ChatTurn] | str, gen: GenerationConfig, tokenizer: TokenizerModel) -> Generation:
    """Complete a chat prompt. The stop token is not part of the returned text."""
    config, weights = model
    if isinstance(turns, str):
        turns = [ChatTurn("user", turns)]
    rendered = render_chat(turns, None, tokenizer)
    stop_ids = {tokenizer.special_id(s) for s in gen.stop_tokens}
    t0 = time.perf_counter()
    ids, stopped, cache = generate_ids(model, rendered.ids, gen, stop_ids)
    elapsed = time.perf_counter() - t0
    # specials other than the stop token are dropped from the returned text
    text = tokenizer.decode([i for i in ids if not tokenizer.is_special(i)])
    meta = {
        "prompt_tokens": len(rendered.ids),
        "new_tokens": len(ids),
        "stopped": stopped,
        "seconds": round(elapsed, 6),
        "cache_bytes": cache_memory_bytes(config, cache.length, weights.dtype.itemsize),
        "mha_cache_bytes": mha_cache_memory_bytes(config, cache.length, weights.dtype.itemsize),
        "multi_turn": len(turns) > 1,
    }
    return Generation(ids, text, stopped, meta)
