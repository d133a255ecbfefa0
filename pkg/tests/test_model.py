"""Model module: softmax, attention, forward pass, initialization, and the
checkpoint format.

Numerical reference values were computed with an independent
high-precision (mpmath) script and frozen here.
"""

import json
import math

import numpy as np
import pytest

from medner.errors import CheckpointError
from medner.model import (
    ModelConfig,
    attention,
    forward,
    init_params,
    load_checkpoint,
    load_checkpoint_full,
    param_shapes,
    predict_labels,
    save_checkpoint,
    sinusoidal_positions,
    softmax,
)

# softmax([1, 2, 3]) evaluated at 40 decimal digits
SOFTMAX_123 = [0.090030573170380458, 0.24472847105479765, 0.66524095577482189]
# rowsoftmax(I / sqrt(2)) diagonal/off-diagonal entries, same precision
ATTN_DIAG = 0.66976154932665693
ATTN_OFF = 0.33023845067334307


def tiny_config(**kwargs):
    base = dict(vocab_size=13, n_labels=4, d_model=8, n_heads=2, n_layers=1,
                d_ff=12, max_len=6, dropout_rate=0.0)
    base.update(kwargs)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_cases():
    np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3), atol=1e-12)
    np.testing.assert_allclose(softmax(np.array([5.0, 5.0])), [0.5, 0.5], atol=1e-12)


def test_softmax_reference_values():
    np.testing.assert_allclose(softmax(np.array([1.0, 2.0, 3.0])), SOFTMAX_123,
                               atol=1e-12)


def test_softmax_properties_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        z = rng.normal(scale=10, size=rng.integers(1, 9))
        p = softmax(z)
        assert (p > 0).all() and (p < 1 + 1e-12).all()
        assert abs(p.sum() - 1.0) < 1e-6
        np.testing.assert_allclose(p, softmax(z + rng.normal(scale=100)), atol=1e-6)


def test_softmax_extreme_inputs_stable():
    p = softmax(np.array([1e9, 0.0]))
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-9


def test_softmax_empty_errors():
    with pytest.raises(ValueError):
        softmax(np.array([]))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def test_attention_single_row_is_identity():
    v = np.array([[3.0, -1.0, 2.0]])
    out, w = attention(np.array([[0.5]]), np.array([[2.0]]), v, return_weights=True)
    np.testing.assert_allclose(out, v, atol=1e-12)
    np.testing.assert_allclose(w, [[1.0]], atol=1e-12)


def test_attention_identical_keys_average_values():
    k = np.ones((4, 3))
    q = np.random.default_rng(1).normal(size=(2, 3))
    v = np.arange(12.0).reshape(4, 3)
    out = attention(q, k, v)
    np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-9)


def test_attention_reference_2x2():
    eye = np.eye(2)
    out, w = attention(eye, eye, eye, return_weights=True)
    expected = np.array([[ATTN_DIAG, ATTN_OFF], [ATTN_OFF, ATTN_DIAG]])
    np.testing.assert_allclose(w, expected, atol=1e-12)
    np.testing.assert_allclose(out, expected, atol=1e-12)  # V = I


def test_attention_mask_zeroes_keys():
    rng = np.random.default_rng(2)
    q, k, v = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
    mask = np.array([True, False, True, False, True])
    out, w = attention(q, k, v, mask, return_weights=True)
    assert (w[:, ~mask] < 1e-12).all()
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)
    np.testing.assert_allclose(out, w[:, mask] @ v[mask], atol=1e-12)


def test_attention_all_masked_errors():
    eye = np.eye(2)
    with pytest.raises(ValueError, match="all positions masked"):
        attention(eye, eye, eye, np.array([False, False]))


def test_attention_shape_mismatch():
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        attention(np.ones((2, 3)), np.ones((4, 3)), np.ones((3, 2)))


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------


def test_init_deterministic():
    cfg = tiny_config()
    a = init_params(cfg, seed=5)
    b = init_params(cfg, seed=5)
    assert set(a) == set(param_shapes(cfg))
    for name in a:
        assert a[name].tobytes() == b[name].tobytes(), name
    c = init_params(cfg, seed=6)
    assert any(a[n].tobytes() != c[n].tobytes() for n in a if n != "emb.pos")


def test_init_biases_zero_gains_one():
    params = init_params(tiny_config(), seed=0)
    for name, arr in params.items():
        if name.endswith((".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or name.endswith("head.b") or name.endswith("ln1.b") or name.endswith("ln2.b"):
            assert not arr.any(), name
        if name.endswith(".g"):
            assert (arr == 1.0).all(), name


def test_init_weight_bounds():
    cfg = tiny_config()
    params = init_params(cfg, seed=3)
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 2 and name != "emb.pos":
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            assert (np.abs(params[name]) <= bound).all(), name


def test_positional_row_zero_pattern():
    pe = sinusoidal_positions(4, 8)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1, 0, 1], atol=1e-7)
    params = init_params(tiny_config(), seed=1)
    np.testing.assert_allclose(params["emb.pos"][0], [0, 1] * 4, atol=1e-7)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_logit_shape():
    cfg = tiny_config(n_labels=4)
    params = init_params(cfg, seed=0)
    ids = np.random.default_rng(0).integers(0, cfg.vocab_size, size=(2, 5))
    logits, trace = forward(params, cfg, ids)
    assert logits.shape == (2, 5, 4)
    assert trace.logits.shape == (2, 5, 4)
    assert trace.mask.all()


def test_forward_batch_permutation_equivariant():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(4)
    ids = rng.integers(0, cfg.vocab_size, size=(3, 4))
    mask = np.ones((3, 4), dtype=bool)
    logits, _ = forward(params, cfg, ids, mask)
    perm = [2, 0, 1]
    logits_p, _ = forward(params, cfg, ids[perm], mask[perm])
    np.testing.assert_array_equal(logits_p, logits[perm])


def test_forward_no_cross_record_mixing():
    cfg = tiny_config()
    params = init_params(cfg, seed=1)
    rng = np.random.default_rng(5)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 4))
    logits, _ = forward(params, cfg, ids)
    other = ids.copy()
    other[1] = (other[1] + 3) % cfg.vocab_size
    logits2, _ = forward(params, cfg, other)
    np.testing.assert_array_equal(logits2[0], logits[0])
    assert not np.array_equal(logits2[1], logits[1])


def test_forward_zero_params_uniform():
    cfg = tiny_config()
    params = {name: np.zeros(shape, dtype=np.float32)
              for name, shape in param_shapes(cfg).items()}
    ids = np.zeros((1, 3), dtype=int)
    logits, _ = forward(params, cfg, ids)
    assert not logits.any()
    np.testing.assert_allclose(softmax(logits, axis=-1),
                               1.0 / cfg.n_labels, atol=1e-7)


def test_forward_attention_rows_stochastic_and_masked():
    cfg = tiny_config(n_layers=2)
    params = init_params(cfg, seed=2)
    ids = np.random.default_rng(6).integers(0, cfg.vocab_size, size=(3, 5))
    mask = np.ones((3, 5), dtype=bool)
    mask[1, 3:] = False
    mask[2, 1:] = False
    _, trace = forward(params, cfg, ids, mask)
    for lt in trace.layers:
        sums = lt.probs.sum(axis=-1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)
        assert (lt.probs[1, :, :, 3:] < 1e-12).all()
        assert (lt.probs[2, :, :, 1:] < 1e-12).all()


def test_forward_head_math_matches_public_attention_op():
    """The batched multi-head computation must agree with the standalone
    attention operation applied per record and head."""
    cfg = tiny_config(n_layers=1, n_heads=2)
    params = init_params(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(7)
    ids = rng.integers(0, cfg.vocab_size, size=(2, 4))
    mask = np.ones((2, 4), dtype=bool)
    mask[0, 2:] = False
    _, trace = forward(params, cfg, ids, mask)
    lt = trace.layers[0]
    merged = (lt.probs @ lt.v)
    for b in range(2):
        for h in range(cfg.n_heads):
            ref = attention(lt.q[b, h], lt.k[b, h], lt.v[b, h], mask[b])
            np.testing.assert_allclose(merged[b, h], ref, atol=1e-12)


def test_forward_deterministic_with_and_without_dropout():
    cfg = tiny_config(dropout_rate=0.3)
    params = init_params(cfg, seed=0)
    ids = np.random.default_rng(1).integers(0, cfg.vocab_size, size=(2, 4))
    plain1, _ = forward(params, cfg, ids)
    plain2, _ = forward(params, cfg, ids)
    np.testing.assert_array_equal(plain1, plain2)
    drop1, _ = forward(params, cfg, ids, dropout_rng=np.random.default_rng(9))
    drop2, _ = forward(params, cfg, ids, dropout_rng=np.random.default_rng(9))
    np.testing.assert_array_equal(drop1, drop2)
    assert not np.array_equal(drop1, plain1)


def test_forward_input_validation():
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    with pytest.raises(ValueError, match="sequence too long"):
        forward(params, cfg, np.zeros((1, cfg.max_len + 1), dtype=int))
    with pytest.raises(ValueError, match="out of range"):
        forward(params, cfg, np.full((1, 2), cfg.vocab_size))
    with pytest.raises(ValueError, match="all positions masked"):
        forward(params, cfg, np.zeros((1, 2), dtype=int),
                np.zeros((1, 2), dtype=bool))


# ---------------------------------------------------------------------------
# predict_labels
# ---------------------------------------------------------------------------


def test_predict_labels_argmax_and_ties():
    logits = np.array([[[0.1, 2.0, -1.0], [1.0, 1.0, 0.0]]])
    np.testing.assert_array_equal(predict_labels(logits), [[1, 0]])


def test_predict_labels_softmax_invariant():
    rng = np.random.default_rng(3)
    logits = rng.normal(scale=4, size=(100, 5))
    np.testing.assert_array_equal(
        predict_labels(logits), predict_labels(softmax(logits, axis=-1))
    )


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_bits(tmp_path):
    cfg = tiny_config(n_layers=2)
    for dtype in (np.float32, np.float64):
        params = init_params(cfg, seed=11, dtype=dtype)
        path = tmp_path / f"model{dtype().itemsize}.ckpt"
        save_checkpoint(params, cfg, seed=11, path=path,
                        vocab=["<PAD>", "<UNK>", "a"], labels=["Drug"])
        loaded, loaded_cfg = load_checkpoint(path)
        assert loaded_cfg == cfg
        for name in params:
            assert loaded[name].dtype == params[name].dtype
            assert loaded[name].tobytes() == params[name].tobytes(), name
        full = load_checkpoint_full(path)
        assert full.seed == 11
        assert full.vocab == ["<PAD>", "<UNK>", "a"]
        assert full.labels == ["Drug"]


def test_checkpoint_truncated_payload(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, cfg, seed=0, path=path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-17])
    with pytest.raises(CheckpointError, match="truncated payload"):
        load_checkpoint(path)


def test_checkpoint_unknown_version(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, cfg, seed=0, path=path)
    blob = path.read_bytes().replace(b"MEDNER-CKPT 1\n", b"MEDNER-CKPT 9\n", 1)
    path.write_bytes(blob)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, seed=0)
    path = tmp_path / "model.ckpt"
    save_checkpoint(params, cfg, seed=0, path=path)
    blob = path.read_bytes()
    nl1 = blob.index(b"\n")
    nl2 = blob.index(b"\n", nl1 + 1)
    header_len = int(blob[nl1 + 1:nl2])
    manifest = json.loads(blob[nl2 + 1: nl2 + 1 + header_len])
    for entry in manifest["tensors"]:
        if entry["name"] == "head.b":
            entry["shape"] = [entry["shape"][0] + 1]
    header = json.dumps(manifest).encode()
    path.write_bytes(
        blob[:nl1 + 1] + f"{len(header)}\n".encode() + header
        + blob[nl2 + 1 + header_len:]
    )
    with pytest.raises(CheckpointError, match="head.b"):
        load_checkpoint(path)


def test_checkpoint_not_a_checkpoint(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"hello world\nnot a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        tiny_config(dropout_rate=1.0)
    with pytest.raises(ValueError):
        tiny_config(n_layers=0)
    assert tiny_config(d_model=12, n_heads=3).d_k == 4
