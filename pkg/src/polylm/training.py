"""Instruction fine-tuning: cosine schedule, Adam, completion-masked loss, checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .architecture import LayerWeights, ModelConfig, ModelWeights, model_forward
from .datapipe import PackedSequence
from .numerics import Parameter, Rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 200
    batch_size: int = 8
    context_len: int = 256
    lr_peak: float = 6e-4
    lr_end: float = 6e-5
    warmup_steps: int = 0
    grad_clip: float | None = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    mask_prompt: bool = True
    cross_document_mask: bool = False

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.lr_end > self.lr_peak:
            raise ValueError("lr_end must not exceed lr_peak")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.batch_size < 1 or self.context_len < 2:
            raise ValueError("batch_size must be >= 1 and context_len >= 2")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


# Full-scale fine-tuning schedule, kept for reference; far beyond desk scale.
REFERENCE_TRAIN_CONFIG = TrainConfig(total_steps=13_200, batch_size=64, context_len=8192, lr_peak=6e-4, lr_end=6e-5)


def cosine_lr(t: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_peak``, then cosine decay to ``lr_end`` at ``total_steps``."""
    T = config.total_steps
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    w = config.warmup_steps
    if t < w:
        return config.lr_peak * (t + 1) / w
    if t == T:
        return config.lr_end
    if t == w:
        return config.lr_peak
    frac = (t - w) / (T - w)
    return config.lr_end + 0.5 * (config.lr_peak - config.lr_end) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_weights(cls, weights: ModelWeights, config: TrainConfig | None = None) -> OptimizerState:
        c = config or TrainConfig()
        st = cls(beta1=c.beta1, beta2=c.beta2, eps=c.adam_eps)
        for name, p in weights.named_parameters():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st


def adam_step(named_params: Sequence[tuple[str, Parameter]], state: OptimizerState, lr: float) -> None:
    """Bias-corrected Adam update in place, using each parameter's ``grad``."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in named_params:
        g = p.grad
        if g is None or g.shape != p.shape:
            raise nx.ShapeError(f"gradient for {name} has the wrong shape")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape:
            raise nx.ShapeError(f"optimizer moment for {name} has shape {m.shape}, parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= (lr * update).astype(p.dtype)
    state.step = t


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * scale).astype(p.dtype)
    return total


class TrainingError(RuntimeError):
    pass


def batch_arrays(batch: Sequence[PackedSequence], mask_prompt: bool = True, pad_id: int = 0):
    """Right-padded ``(inputs, targets, mask, segments)`` arrays for next-token prediction."""
    L = max(len(s) for s in batch)
    if L < 2:
        raise ValueError("sequences need at least two tokens")
    B = len(batch)
    tokens = np.full((B, L), pad_id, dtype=np.int64)
    mask = np.zeros((B, L), dtype=np.int64)
    seg = np.full((B, L), -1, dtype=np.int64)
    for i, s in enumerate(batch):
        n = len(s)
        tokens[i, :n] = s.tokens
        mask[i, :n] = s.loss_mask if mask_prompt else 1
        seg[i, :n] = s.segment_ids()
        if not mask_prompt:
            # never predict across a document start
            for _, start, _ in s.boundaries:
                mask[i, start] = 0
    # padding gets its own segment so it never attends into real tokens
    seg[seg < 0] = seg.max() + 1
    return tokens[:, :-1], tokens[:, 1:], mask[:, 1:], seg[:, :-1]


def batch_loss(model, batch: Sequence[PackedSequence], config: TrainConfig, pad_id: int = 0):
    mcfg, weights = model
    inputs, targets, mask, seg = batch_arrays(batch, config.mask_prompt, pad_id)
    if mask.sum() == 0:
        raise ValueError("cross_entropy: loss mask is all zero")
    logits = model_forward(inputs, mcfg, weights, segment_ids=seg if config.cross_document_mask else None)
    return nx.cross_entropy(logits, targets, mask)


def train_step(model, batch: Sequence[PackedSequence], config: TrainConfig, state: OptimizerState, pad_id: int = 0) -> float:
    """One optimizer update; returns the loss before the update."""
    mcfg, weights = model
    weights.zero_grad()
    try:
        loss = batch_loss(model, batch, config, pad_id)
    except nx.NonFiniteError as exc:
        raise TrainingError(f"non-finite value at step {state.step}: {exc}") from exc
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"loss is {value} at step {state.step}")
    loss.backward()
    params = weights.parameters()
    if config.grad_clip:
        clip_grad_norm(params, config.grad_clip)
    lr = cosine_lr(min(state.step, config.total_steps), config)
    adam_step(list(weights.named_parameters()), state, lr)
    return value


def select_batch(n_sequences: int, step: int, config: TrainConfig) -> list[int]:
    """Indices for ``step``: a seeded permutation per epoch, so any step is addressable."""
    per_epoch = max(1, n_sequences // config.batch_size) if n_sequences >= config.batch_size else 1
    epoch, k = divmod(step, per_epoch)
    perm = Rng(config.seed).split("batches").split(epoch).permutation(n_sequences)
    if n_sequences < config.batch_size:
        return [int(perm[i % n_sequences]) for i in range(config.batch_size)]
    return [int(i) for i in perm[k * config.batch_size : (k + 1) * config.batch_size]]


def train(
    model,
    sequences: Sequence[PackedSequence],
    config: TrainConfig,
    state: OptimizerState | None = None,
    until: int | None = None,
    log_path: str | Path | None = None,
    pad_id: int = 0,
) -> tuple[OptimizerState, list[float]]:
    """Run steps ``state.step .. until`` (default ``total_steps``)."""
    mcfg, weights = model
    if not sequences:
        raise ValueError("no training sequences")
    state = state or OptimizerState.for_weights(weights, config)
    until = config.total_steps if until is None else until
    losses = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.step < until:
            step = state.step
            batch = [sequences[i] for i in select_batch(len(sequences), step, config)]
            lr = cosine_lr(min(step, config.total_steps), config)
            loss = train_step(model, batch, config, state, pad_id)
            losses.append(loss)
            if log:
                log.write(json.dumps({"step": step, "lr": lr, "loss": loss}) + "\n")
            if step % 50 == 0:
                logger.info("step %d lr %.3g loss %.4f", step, lr, loss)
    finally:
        if log:
            log.close()
    return state, losses


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one raw little-endian blob per tensor


class CheckpointError(ValueError):
    pass


def _blob_name(kind: str, name: str) -> str:
    return f"{kind}.{name}.bin"


def save_checkpoint(model, state: OptimizerState, path: str | Path, train_config: TrainConfig | None = None) -> Path:
    mcfg, weights = model
    d = Path(path)
    (d / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    tensors = [("param", n, p.data) for n, p in weights.named_parameters()]
    tensors += [("adam_m", n, state.m[n]) for n, _ in weights.named_parameters()]
    tensors += [("adam_v", n, state.v[n]) for n, _ in weights.named_parameters()]
    for kind, name, arr in tensors:
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        fname = _blob_name(kind, name)
        (d / "tensors" / fname).write_bytes(raw)
        entries.append(
            {
                "kind": kind,
                "name": name,
                "file": fname,
                "shape": list(arr.shape),
                "dtype": "f32" if arr.dtype == np.float32 else "f64",
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
    manifest = {
        "format": "checkpoint-v1",
        "model_config": mcfg.to_dict(),
        "train_config": dataclasses.asdict(train_config) if train_config else None,
        "step": state.step,
        "adam": {"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps},
        "rng": {"seed": train_config.seed if train_config else None, "counter": state.step},
        "tensors": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return d


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    """Returns ``((config, weights), state, train_config_dict)``."""
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint manifest: {exc}") from None
    if manifest.get("format") != "checkpoint-v1":
        raise CheckpointError("unknown checkpoint format")
    config = ModelConfig.from_dict(manifest["model_config"])
    if expected_config is not None and expected_config != config:
        diff = {
            k: (v, getattr(config, k)) for k, v in expected_config.to_dict().items() if getattr(config, k) != v
        }
        raise CheckpointError(f"checkpoint config mismatch (expected, found): {diff}")
    arrays: dict[tuple[str, str], np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = (d / "tensors" / e["file"]).read_bytes()
        if hashlib.sha256(raw).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for {e['file']}")
        dt = np.dtype("<f4" if e["dtype"] == "f32" else "<f8")
        arr = np.frombuffer(raw, dtype=dt)
        if arr.size != int(np.prod(e["shape"])):
            raise CheckpointError(f"size mismatch for {e['file']}")
        arrays[(e["kind"], e["name"])] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    weights = weights_from_arrays(config, {n: a for (k, n), a in arrays.items() if k == "param"})
    adam = manifest["adam"]
    state = OptimizerState(
        step=int(manifest["step"]),
        m={n: a.copy() for (k, n), a in arrays.items() if k == "adam_m"},
        v={n: a.copy() for (k, n), a in arrays.items() if k == "adam_v"},
        beta1=adam["beta1"],
        beta2=adam["beta2"],
        eps=adam["eps"],
    )
    for name, p in weights.named_parameters():
        if state.m.get(name) is None or state.m[name].shape != p.shape:
            raise CheckpointError(f"optimizer moments missing or misshapen for {name}")
    return (config, weights), state, manifest.get("train_config")


def weights_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> ModelWeights:
    def get(name, shape):
        if name not in arrays:
            raise CheckpointError(f"missing tensor {name}")
        a = arrays[name]
        if tuple(a.shape) != tuple(shape):
            raise CheckpointError(f"tensor {name} has shape {a.shape}, config implies {shape}")
        return Parameter(a.copy(), name=name)

    d, qw, kvw = config.d_model, config.n_heads * config.d_head, config.n_kv_heads * config.d_head
    layers = []
    for i in range(config.n_layers):
        p = f"layers.{i}."
        layers.append(
            LayerWeights(
                input_gain=get(p + "input_gain", (d,)),
                wq=get(p + "wq", (d, qw)),
                wk=get(p + "wk", (d, kvw)),
                wv=get(p + "wv", (d, kvw)),
                wo=get(p + "wo", (qw, d)),
                w_gate=get(p + "w_gate", (d, config.d_ffn)),
                w_up=get(p + "w_up", (d, config.d_ffn)),
                w_down=get(p + "w_down", (config.d_ffn, d)),
            )
        )
    return ModelWeights(
        token_embedding=get("token_embedding", (config.vocab_size, d)),
        layers=layers,
        final_gain=get("final_gain", (d,)),
        output=None if config.tie_embeddings else get("output", (config.vocab_size, d)),
    )
