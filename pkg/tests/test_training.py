import math

import numpy as np
import pytest

from polylm import numerics as nx
from polylm.architecture import init_weights
from polylm.datapipe import PackedSequence, Sample, pack, pack_rendered
from polylm.numerics import Parameter
from polylm.training import (
    REFERENCE_TRAIN_CONFIG,
    CheckpointError,
    OptimizerState,
    TrainConfig,
    TrainingError,
    adam_step,
    batch_arrays,
    batch_loss,
    clip_grad_norm,
    cosine_lr,
    load_checkpoint,
    save_checkpoint,
    select_batch,
    train,
    train_step,
)


def samples(n=12):
    return [Sample(f"s{i:03d}", f"Repeat {i}:", f"value {i * 7}", "en", "d", "human") for i in range(n)]


@pytest.fixture
def packed(tokenizer):
    return pack(samples(), tokenizer, 48)


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*")) if p.is_file()}


# -- schedule -----------------------------------------------------------------


def test_cosine_endpoints_and_midpoint():
    c = REFERENCE_TRAIN_CONFIG
    assert cosine_lr(0, c) == 6e-4
    assert cosine_lr(c.total_steps, c) == 6e-5
    assert abs(cosine_lr(c.total_steps // 2, c) - 3.3e-4) < 1e-12


def test_cosine_monotone_after_warmup():
    c = TrainConfig(total_steps=100, warmup_steps=10)
    lrs = [cosine_lr(t, c) for t in range(101)]
    assert lrs[0] < lrs[9] <= lrs[10] == c.lr_peak
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


def test_cosine_out_of_range():
    with pytest.raises(ValueError):
        cosine_lr(-1, TrainConfig())
    with pytest.raises(ValueError):
        cosine_lr(201, TrainConfig(total_steps=200))


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(lr_peak=1e-5, lr_end=1e-4)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=0)
    assert (REFERENCE_TRAIN_CONFIG.total_steps, REFERENCE_TRAIN_CONFIG.batch_size, REFERENCE_TRAIN_CONFIG.context_len) == (13_200, 64, 8192)


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = Parameter(np.array([1.0, -2.0]), name="p", dtype="f64")
    st = OptimizerState()
    for _ in range(5):
        adam_step([("p", p)], st, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step == 5


def test_adam_first_step_closed_form():
    g = np.array([0.5, -3.0, 1e-3])
    p = Parameter(np.zeros(3), name="p", dtype="f64")
    p.grad = g.copy()
    adam_step([("p", p)], OptimizerState(), 0.01)
    # m_hat = g, v_hat = g^2 so the step is lr * g / (|g| + eps)
    np.testing.assert_allclose(p.data, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_two_steps_by_hand():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
    p = Parameter(np.array([1.0]), name="p", dtype="f64")
    st = OptimizerState()
    m = v = 0.0
    x = 1.0
    for t, g in enumerate([0.2, -0.4], 1):
        p.grad = np.array([g])
        adam_step([("p", p)], st, lr)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    assert p.data[0] == pytest.approx(x, rel=1e-14)


def test_adam_shape_mismatch():
    p = Parameter(np.zeros(3), name="p")
    st = OptimizerState(m={"p": np.zeros(2)}, v={"p": np.zeros(2)})
    with pytest.raises(nx.ShapeError):
        adam_step([("p", p)], st, 0.1)


def test_clip_grad_norm():
    a = Parameter(np.zeros(2), name="a", dtype="f64")
    b = Parameter(np.zeros(1), name="b", dtype="f64")
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    assert math.sqrt((a.grad**2).sum() + (b.grad**2).sum()) == pytest.approx(1.0, rel=1e-9)


# -- batches and loss ---------------------------------------------------------


def test_batch_arrays_shift_and_padding():
    s = PackedSequence()
    s._add("a", [0, 10, 11, 12], [0, 0, 1, 1])
    short = PackedSequence()
    short._add("b", [0, 20], [0, 1])
    inputs, targets, mask, seg = batch_arrays([s, short], pad_id=5)
    np.testing.assert_array_equal(inputs, [[0, 10, 11], [0, 20, 5]])
    np.testing.assert_array_equal(targets, [[10, 11, 12], [20, 5, 5]])
    np.testing.assert_array_equal(mask, [[0, 1, 1], [1, 0, 0]])
    assert seg[1, 2] != seg[1, 0]


def test_all_prompt_mask_rejected(small_model):
    s = PackedSequence()
    s._add("a", [0, 10, 11], [0, 0, 0])
    with pytest.raises(ValueError, match="all zero"):
        train_step(small_model, [s], TrainConfig(), OptimizerState.for_weights(small_model[1]))


def test_initial_loss_near_log_vocab(small_config, packed):
    model = (small_config, init_weights(small_config, seed=0, std=0.02))
    loss = batch_loss(model, packed[:4], TrainConfig()).item()
    assert abs(loss - math.log(small_config.vocab_size)) / math.log(small_config.vocab_size) < 0.02


def test_loss_invariant_to_document_order_with_cross_document_mask(small_model):
    a = ("a", [0, 40, 41, 42, 43], [0, 0, 1, 1, 1])
    b = ("b", [0, 50, 51, 52], [0, 0, 1, 1])
    ab = pack_rendered([a, b], 16)
    ba = pack_rendered([b, a], 16)
    cfg = TrainConfig(cross_document_mask=True)
    la = batch_loss(small_model, ab, cfg).item()
    lb = batch_loss(small_model, ba, cfg).item()
    assert la == pytest.approx(lb, abs=1e-6)


def test_non_finite_loss_aborts(small_config, packed):
    w = init_weights(small_config, seed=0)
    w.layers[0].wq.data[0, 0] = np.nan
    with pytest.raises(TrainingError):
        train_step((small_config, w), packed[:2], TrainConfig(), OptimizerState.for_weights(w))


def test_select_batch_deterministic_epochs():
    cfg = TrainConfig(batch_size=3, seed=4)
    epoch = [i for step in range(4) for i in select_batch(12, step, cfg)]
    assert sorted(epoch) == list(range(12))
    assert select_batch(12, 5, cfg) == select_batch(12, 5, cfg)
    assert len(select_batch(2, 0, cfg)) == 3


def test_training_reduces_loss_and_is_deterministic(small_config, packed):
    cfg = TrainConfig(total_steps=12, batch_size=2, lr_peak=3e-3, lr_end=3e-4, seed=1)
    runs = []
    for _ in range(2):
        model = (small_config, init_weights(small_config, seed=0))
        state, losses = train(model, packed, cfg)
        runs.append((losses, model[1].token_embedding.data.copy(), state.m["layers.0.wq"].copy()))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1].tobytes() == runs[1][1].tobytes() and runs[0][2].tobytes() == runs[1][2].tobytes()
    assert np.mean(runs[0][0][-3:]) < runs[0][0][0]


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_save_load_save_identical(tmp_path, small_config, packed):
    cfg = TrainConfig(total_steps=3, batch_size=2)
    model = (small_config, init_weights(small_config, seed=0))
    state, _ = train(model, packed, cfg)
    save_checkpoint(model, state, tmp_path / "a", cfg)
    model2, state2, tc = load_checkpoint(tmp_path / "a")
    save_checkpoint(model2, state2, tmp_path / "b", TrainConfig(**tc))
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert state2.step == 3


def test_resume_matches_unbroken_run(tmp_path, small_config, packed):
    cfg = TrainConfig(total_steps=10, batch_size=2, lr_peak=3e-3, lr_end=3e-4, seed=2)
    full_model = (small_config, init_weights(small_config, seed=0))
    _, full = train(full_model, packed, cfg)

    model = (small_config, init_weights(small_config, seed=0))
    state, first = train(model, packed, cfg, until=4)
    save_checkpoint(model, state, tmp_path / "ck", cfg)
    resumed, state, _ = load_checkpoint(tmp_path / "ck")
    _, rest = train(resumed, packed, cfg, state)
    assert first + rest == full
    assert resumed[1].layers[1].w_down.data.tobytes() == full_model[1].layers[1].w_down.data.tobytes()


def test_checkpoint_errors(tmp_path, small_config):
    model = (small_config, init_weights(small_config, seed=0))
    save_checkpoint(model, OptimizerState.for_weights(model[1]), tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path, expected_config=small_config.replace(n_layers=3))
    blob = tmp_path / "tensors" / "param.final_gain.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 1
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(tmp_path)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_checkpoint_blobs_little_endian_f32(tmp_path, small_config):
    model = (small_config, init_weights(small_config, seed=0))
    save_checkpoint(model, OptimizerState.for_weights(model[1]), tmp_path)
    raw = (tmp_path / "tensors" / "param.token_embedding.bin").read_bytes()
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(model[1].token_embedding.shape), model[1].token_embedding.data)
