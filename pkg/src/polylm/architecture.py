"""Decoder configuration, parameter accounting and the parallel-block forward pass."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Rng, Tensor


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    d_ffn: int
    n_heads: int
    n_kv_heads: int
    d_head: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    tie_embeddings: bool = True
    max_seq_len: int = 8192
    name: str = ""

    def __post_init__(self):
        for key in ("vocab_size", "d_model", "n_layers", "d_ffn", "n_heads", "n_kv_heads", "d_head", "max_seq_len"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(f"n_heads={self.n_heads} is not a multiple of n_kv_heads={self.n_kv_heads}")
        if self.rope_base <= 0 or self.norm_eps <= 0:
            raise ConfigError("rope_base and norm_eps must be positive")

    @property
    def group_size(self) -> int:
        """Query heads per KV head."""
        return self.n_heads // self.n_kv_heads

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# preset files: "key = value" lines, '#' starts a comment

_INT_KEYS = {"vocab_size", "d_model", "n_layers", "d_ffn", "n_heads", "n_kv_heads", "d_head", "max_seq_len"}
_FLOAT_KEYS = {"rope_base", "norm_eps"}
_BOOL_KEYS = {"tie_embeddings"}


def parse_config_text(text: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _INT_KEYS:
            out[key] = int(value.replace("_", "").replace(",", ""))
        elif key in _FLOAT_KEYS:
            out[key] = float(value)
        elif key in _BOOL_KEYS:
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"line {lineno}: bad boolean {value!r}")
            out[key] = value.lower() in ("true", "1", "yes")
        elif key == "name":
            out[key] = value
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return out


def format_config_text(config: ModelConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def preset_names() -> list[str]:
    root = resources.files("polylm") / "presets"
    return sorted(p.name[: -len(".cfg")] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_config(name_or_path: str | Path, **overrides) -> ModelConfig:
    """Load a preset by name or a config file by path; ``overrides`` win."""
    path = Path(name_or_path)
    if path.suffix == ".cfg" and path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("polylm") / "presets" / f"{name_or_path}.cfg"
        if not res.is_file():
            raise ConfigError(f"no preset or config file named {str(name_or_path)!r}")
        text = res.read_text(encoding="utf-8")
    values = parse_config_text(text)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig.from_dict(values)


# ---------------------------------------------------------------------------
# parameter accounting


@dataclass(frozen=True)
class ParamCount:
    embedding: int
    non_embedding: int

    @property
    def total(self) -> int:
        return self.embedding + self.non_embedding


def count_parameters(config: ModelConfig) -> ParamCount:
    """Closed-form parameter count: tied embedding plus per-layer attention/SwiGLU
    projections, one gain vector per layer and a final gain vector."""
    d = config.d_model
    q_width = config.n_heads * config.d_head
    kv_width = config.n_kv_heads * config.d_head
    attn = d * q_width + 2 * d * kv_width + q_width * d
    ffn = 3 * d * config.d_ffn
    gains = (config.n_layers + 1) * d
    embedding = config.vocab_size * d
    non_embedding = config.n_layers * (attn + ffn) + gains
    if not config.tie_embeddings:
        non_embedding += config.vocab_size * d
    return ParamCount(embedding=embedding, non_embedding=non_embedding)


def scale_ffn_for_swiglu(d_model: int, base_multiplier: float, round_to: int = 1) -> int:
    """Hidden width giving a 3-matrix SwiGLU roughly the parameters of a
    2-matrix FFN with width ``base_multiplier * d_model``.

    The ideal width is rounded to an integer, then down to a multiple of ``round_to``.
    """
    if base_multiplier <= 0:
        raise ValueError("base_multiplier must be positive")
    ideal = round(2.0 / 3.0 * base_multiplier * d_model)
    return max(round_to, (ideal // round_to) * round_to)


# ---------------------------------------------------------------------------
# weights


@dataclass
class LayerWeights:
    input_gain: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    w_gate: Parameter
    w_up: Parameter
    w_down: Parameter

    def named(self) -> Iterator[tuple[str, Parameter]]:
        for f in dataclasses.fields(self):
            yield f.name, getattr(self, f.name)


@dataclass
class ModelWeights:
    token_embedding: Parameter
    layers: list[LayerWeights]
    final_gain: Parameter
    output: Parameter | None = None  # only when embeddings are untied

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        yield "token_embedding", self.token_embedding
        for i, layer in enumerate(self.layers):
            for name, p in layer.named():
                yield f"layers.{i}.{name}", p
        yield "final_gain", self.final_gain
        if self.output is not None:
            yield "output", self.output

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self) -> np.dtype:
        return self.token_embedding.dtype

    def output_matrix(self) -> Parameter:
        return self.token_embedding if self.output is None else self.output


def init_weights(config: ModelConfig, seed: int = 0, dtype="f32", std: float = 0.02) -> ModelWeights:
    """Truncated-normal init; residual output projections scaled by 1/sqrt(2 * n_layers)."""
    rng = Rng(seed).split("init")
    dt = nx.resolve_dtype(dtype)
    out_std = std / math.sqrt(2 * config.n_layers)
    d, qw, kvw = config.d_model, config.n_heads * config.d_head, config.n_kv_heads * config.d_head

    def w(name, shape, s=std):
        return Parameter(rng.split(name).truncated_normal(shape, s, dtype=dt), name=name)

    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        layers.append(
            LayerWeights(
                input_gain=Parameter(np.ones(d, dtype=dt), name=p + "input_gain"),
                wq=w(p + "wq", (d, qw)),
                wk=w(p + "wk", (d, kvw)),
                wv=w(p + "wv", (d, kvw)),
                wo=w(p + "wo", (qw, d), out_std),
                w_gate=w(p + "w_gate", (d, config.d_ffn)),
                w_up=w(p + "w_up", (d, config.d_ffn)),
                w_down=w(p + "w_down", (config.d_ffn, d), out_std),
            )
        )
    return ModelWeights(
        token_embedding=w("token_embedding", (config.vocab_size, d)),
        layers=layers,
        final_gain=Parameter(np.ones(d, dtype=dt), name="final_gain"),
        output=None if config.tie_embeddings else w("output", (config.vocab_size, d)),
    )


# ---------------------------------------------------------------------------
# building blocks


def rope_angles(positions, d_head: int, base: float = 10000.0) -> np.ndarray:
    """Angles ``m * base**(-2i/d_head)`` with shape ``[len(positions), d_head/2]`` (f64)."""
    if d_head % 2:
        raise nx.ShapeError(f"RoPE needs an even head size, got {d_head}")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[..., None] * inv_freq


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs of ``x[..., T, d_head]`` by position-dependent angles."""
    x = nx.as_tensor(x)
    ang = rope_angles(positions, x.shape[-1], base)
    return nx.rotate_pairs(x, np.cos(ang), np.sin(ang))


def gqa_attention(
    x: Tensor,
    layer: LayerWeights,
    config: ModelConfig,
    positions=None,
    mask: np.ndarray | None = None,
    cache: LayerCache | None = None,
) -> Tensor:
    """Grouped-query causal self-attention for ``x[..., T, d_model]``.

    Query head ``h`` reads KV head ``h // group_size``. With ``cache`` the new
    keys/values are appended and queries attend over the whole cached prefix.
    ``mask`` overrides the default causal mask; shape ``[..., T, T_keys]``.
    """
    *lead, T, d = x.shape
    if d != config.d_model:
        raise ConfigError(f"input width {d} != d_model {config.d_model}")
    H, Hkv, dh, g = config.n_heads, config.n_kv_heads, config.d_head, config.group_size
    if layer.wq.shape != (d, H * dh) or layer.wk.shape != (d, Hkv * dh):
        raise ConfigError("layer weights do not match the config head layout")
    past = cache.length if cache is not None else 0
    if positions is None:
        positions = np.arange(past, past + T)

    q = (x @ layer.wq).reshape(*lead, T, H, dh)
    k = (x @ layer.wk).reshape(*lead, T, Hkv, dh)
    v = (x @ layer.wv).reshape(*lead, T, Hkv, dh)
    nl = len(lead)
    # -> [..., heads, T, dh]
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    q = nx.transpose(q, perm)
    k = nx.transpose(k, perm)
    v = nx.transpose(v, perm)
    pos = np.asarray(positions)
    # positions may be per-row ([..., T]); broadcast over the head axis
    pos_h = pos[..., None, :] if pos.ndim > 1 else pos
    q = rope_apply(q, pos_h, config.rope_base)
    k = rope_apply(k, pos_h, config.rope_base)
    if cache is not None:
        k, v = cache.append(k, v)
    T_keys = k.shape[-2]
    if mask is None:
        q_abs = np.arange(past, past + T)
        mask = np.arange(T_keys)[None, :] <= q_abs[:, None]

    # group query heads under their KV head: [..., Hkv, g, T, dh]
    qg = q.reshape(*lead, Hkv, g, T, dh)
    kg = nx.transpose(k, tuple(range(nl)) + (nl, nl + 2, nl + 1)).reshape(*lead, Hkv, 1, dh, T_keys)
    vg = v.reshape(*lead, Hkv, 1, T_keys, dh)
    scores = (qg @ kg) * (1.0 / math.sqrt(dh))
    m = np.asarray(mask)
    if m.ndim > 2:
        m = m.reshape(m.shape[:-2] + (1, 1) + m.shape[-2:])
    probs = nx.softmax(scores, axis=-1, mask=m)
    ctx = probs @ vg  # [..., Hkv, g, T, dh]
    ctx = ctx.reshape(*lead, H, T, dh)
    ctx = nx.transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2)).reshape(*lead, T, H * dh)
    return ctx @ layer.wo


def swiglu_ffn(x: Tensor, layer: LayerWeights) -> Tensor:
    """(swish(x W_gate) * (x W_up)) W_down."""
    return (nx.swish(x @ layer.w_gate) * (x @ layer.w_up)) @ layer.w_down


def decoder_layer_forward(
    x: Tensor,
    layer: LayerWeights,
    config: ModelConfig,
    positions=None,
    mask=None,
    cache: LayerCache | None = None,
) -> Tensor:
    """Parallel block: ``x + attn(LN(x)) + ffn(LN(x))`` with one shared norm."""
    h = nx.layer_norm(x, layer.input_gain, config.norm_eps)
    return x + gqa_attention(h, layer, config, positions, mask, cache) + swiglu_ffn(h, layer)


def segment_positions_and_mask(segment_ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-document positions and block-diagonal causal mask for packed rows.

    ``segment_ids`` has shape ``[..., T]``; returns positions ``[..., T]`` that
    restart at 0 for every segment and a mask ``[..., T, T]``.
    """
    seg = np.asarray(segment_ids)
    T = seg.shape[-1]
    idx = np.arange(T)
    starts = np.concatenate([np.ones(seg.shape[:-1] + (1,), bool), seg[..., 1:] != seg[..., :-1]], axis=-1)
    start_idx = np.maximum.accumulate(np.where(starts, idx, 0), axis=-1)
    positions = idx - start_idx
    same = seg[..., :, None] == seg[..., None, :]
    causal = idx[None, :] <= idx[:, None]
    return positions, same & causal


def model_forward(
    tokens,
    config: ModelConfig,
    weights: ModelWeights,
    segment_ids=None,
    caches: list[LayerCache] | None = None,
) -> Tensor:
    """Logits ``[..., T, vocab]`` for token ids ``[..., T]``.

    ``segment_ids`` enables document-local attention and positions inside packed rows.
    ``caches`` (one per layer) enables incremental decoding.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 0 or tokens.shape[-1] < 1:
        raise ValueError("model_forward needs at least one token")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    positions = mask = None
    if segment_ids is not None:
        if caches is not None:
            raise ValueError("segment masking is not supported with a KV cache")
        positions, mask = segment_positions_and_mask(segment_ids)
    x = nx.embedding(weights.token_embedding, tokens)
    for i, layer in enumerate(weights.layers):
        cache = caches[i] if caches is not None else None
        x = decoder_layer_forward(x, layer, config, positions, mask, cache)
    h = nx.layer_norm(x, weights.final_gain, config.norm_eps)
    out = weights.output_matrix()
    return h @ nx.transpose(out, (1, 0))


class LayerCache:
    """Keys (post-RoPE) and values for one layer, shaped ``[n_kv_heads, T, d_head]``."""

    def __init__(self, n_kv_heads: int, d_head: int, capacity: int, dtype):
        self.k = np.zeros((n_kv_heads, capacity, d_head), dtype=dtype)
        self.v = np.zeros((n_kv_heads, capacity, d_head), dtype=dtype)
        self.length = 0

    @property
    def capacity(self) -> int:
        return self.k.shape[1]

    def append(self, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
        if k.ndim != 3:
            raise nx.ShapeError("KV cache holds a single unbatched stream")
        T = k.shape[1]
        end = self.length + T
        if end > self.capacity:
            raise OverflowError(f"KV cache overflow: {end} > capacity {self.capacity}")
        self.k[:, self.length:end] = k.data
        self.v[:, self.length:end] = v.data
        self.length = end
        return Tensor(self.k[:, :end]), Tensor(self.v[:, :end])

    def copy(self) -> LayerCache:
        c = LayerCache.__new__(LayerCache)
        c.k, c.v, c.length = self.k.copy(), self.v.copy(), self.length
        return c

    def nbytes(self) -> int:
        return self.k[:, : self.length].nbytes + self.v[:, : self.length].nbytes
