"""Architecture checks: the token shape pipeline, a hand-computed
attention fixture, residual behavior, init statistics, parameter
accounting, and checkpoint round trips."""

import math

import numpy as np
import pytest

from somnoscore import autodiff as ad
from somnoscore.autodiff import Tensor
from somnoscore.errors import CorruptCheckpoint, ShapeMismatch
from somnoscore.model import (
    ModelConfig,
    attention_head,
    encoder_block,
    forward,
    init_params,
    instance_normalize,
    load_params,
    multi_head_attention,
    param_count,
    param_count_variants,
    param_specs,
    patchify,
    save_params,
    single_channel_config,
    unpatchify,
)


def test_reference_shape_pipeline(tiny_config):
    config = ModelConfig()
    assert config.samples_per_epoch == 3840
    assert config.tokens == 30
    assert config.patch_flat == 896
    # the forward pass asserts every intermediate shape internally
    params = init_params(tiny_config, seed=0)
    x = np.random.default_rng(0).standard_normal((2, 3840, 7)).astype(np.float32)
    logits, features = forward(params, tiny_config, x)
    assert logits.shape == (2, 5)
    assert features.shape == (2, tiny_config.feature_dim)


def test_single_channel_shape_law():
    config = single_channel_config(ModelConfig())
    assert config.channels == 1
    assert config.tokens == 30
    assert config.patch_flat == 128


def test_patchify_roundtrip_is_bit_lossless():
    rng = np.random.default_rng(7)
    epoch = rng.standard_normal((4, 3840, 7)).astype(np.float32)
    tokens = patchify(epoch)
    assert tokens.shape == (4, 30, 896)
    back = unpatchify(tokens, channels=7)
    assert back.dtype == epoch.dtype
    assert np.array_equal(back, epoch)


def test_patchify_layout_is_time_major():
    # sample t of channel c within patch p must land at flat index
    # (t * channels + c) of token p
    epoch = np.arange(3840 * 7, dtype=np.float64).reshape(1, 3840, 7)
    tokens = patchify(epoch)
    assert tokens[0, 0, 0] == epoch[0, 0, 0]
    assert tokens[0, 0, 7] == epoch[0, 1, 0]      # next sample, same channel
    assert tokens[0, 0, 1] == epoch[0, 0, 1]      # same sample, next channel
    assert tokens[0, 1, 0] == epoch[0, 128, 0]    # next patch starts 1 s later


def test_patchify_rejects_indivisible_length():
    with pytest.raises(ShapeMismatch):
        patchify(np.zeros((1, 100, 7)), patch_size=128)


def test_config_rejects_indivisible_patch():
    with pytest.raises(Exception):
        ModelConfig(patch_size=100)


def test_instance_normalize_centers_each_channel():
    rng = np.random.default_rng(1)
    epoch = rng.uniform(-50, 90, size=(2, 3840, 7))
    out = instance_normalize(epoch)
    assert np.abs(out.mean(axis=1)).max() < 1e-9
    assert np.abs(out.std(axis=1) - 1.0).max() < 1e-3  # eps-regularized


def test_instance_normalize_constant_channel_maps_to_zero():
    epoch = np.full((1, 3840, 1), 42.0)
    assert np.abs(instance_normalize(epoch)).max() == 0.0


# --- attention ---


def test_attention_matches_hand_computation():
    """Two tokens, two dims, one head, f64 — every number derived by hand.

    With x = [[1, 0], [0, 1]], identity query/key maps, zero biases and
    value map V, the score matrix is x x^T / sqrt(2) = I / sqrt(2);
    each softmax row is [e^s, 1] / (e^s + 1) with s = 1/sqrt(2), and
    the output is the weight matrix times x V.
    """
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    v_map = np.array([[1.0, 2.0], [3.0, 4.0]])
    s = 1.0 / math.sqrt(2.0)
    e = math.exp(s)
    w_same, w_other = e / (e + 1.0), 1.0 / (e + 1.0)
    weights = np.array([[w_same, w_other], [w_other, w_same]])
    expected = weights @ (x @ v_map)

    eye = Tensor(np.eye(2))
    zero = Tensor(np.zeros(2))
    out = attention_head(Tensor(x[None, :, :]), eye, zero, eye, zero,
                         Tensor(v_map), zero)
    assert out.data.shape == (1, 2, 2)
    assert np.abs(out.data[0] - expected).max() < 1e-12


def test_attention_weights_rows_sum_to_one(monkeypatch, tiny_config):
    """Row-stochasticity of the actual softmax the heads execute,
    captured over 1000 random inputs."""
    captured = []
    original = ad.softmax_rows

    def capture(x):
        out = original(x)
        captured.append(out.data)
        return out

    monkeypatch.setattr(ad, "softmax_rows", capture)
    params = init_params(tiny_config, seed=3)
    rng = np.random.default_rng(3)
    for _ in range(1000):
        tokens = Tensor(rng.standard_normal(
            (1, 4, tiny_config.model_dim)).astype(np.float32))
        multi_head_attention(tokens, params, 0, tiny_config)
    assert len(captured) == 1000 * tiny_config.heads
    for weights in captured:
        assert np.abs(weights.sum(axis=-1) - 1.0).max() < 1e-6


def test_attention_scale_uses_sqrt_head_dim():
    # doubling all keys must scale pre-softmax logits by 2/sqrt(d):
    # verified indirectly by comparing against an explicit computation
    rng = np.random.default_rng(5)
    d = 4
    x = rng.standard_normal((1, 3, d))
    wq, wk, wv = (rng.standard_normal((d, d)) for _ in range(3))
    out = attention_head(Tensor(x), Tensor(wq), Tensor(np.zeros(d)),
                         Tensor(wk), Tensor(np.zeros(d)),
                         Tensor(wv), Tensor(np.zeros(d)))
    q, k, v = x @ wq, x @ wk, x @ wv
    scores = q @ k.swapaxes(-1, -2) / math.sqrt(d)
    weights = np.exp(scores - scores.max(axis=-1, keepdims=True))
    weights /= weights.sum(axis=-1, keepdims=True)
    assert np.abs(out.data - weights @ v).max() < 1e-12


def test_block_with_zeroed_projections_is_identity(tiny_config):
    params = init_params(tiny_config, seed=0, dtype="float64")
    params["block0.attn_out.weight"].data[:] = 0.0
    params["block0.attn_out.bias"].data[:] = 0.0
    params["block0.mlp.fc2.weight"].data[:] = 0.0
    params["block0.mlp.fc2.bias"].data[:] = 0.0
    x = Tensor(np.random.default_rng(2).standard_normal((2, 6, tiny_config.model_dim)))
    out = encoder_block(x, params, 0, tiny_config)
    assert np.array_equal(out.data, x.data)


def test_token_permutation_leaves_logits_unchanged(tiny_config):
    """Fresh positional embeddings are zero, attention and pooling are
    order-free, so shuffling the 30 one-second patches cannot move the
    logits (float64 to make the comparison tight)."""
    params = init_params(tiny_config, seed=4, dtype="float64")
    rng = np.random.default_rng(4)
    epoch = rng.standard_normal((1, 3840, 7))
    perm = rng.permutation(30)
    permuted = epoch.reshape(1, 30, 128, 7)[:, perm].reshape(1, 3840, 7)
    base, _ = forward(params, tiny_config, epoch)
    moved, _ = forward(params, tiny_config, permuted)
    assert np.abs(base.data - moved.data).max() < 1e-10


def test_batch_elements_are_independent(tiny_config):
    params = init_params(tiny_config, seed=5)
    rng = np.random.default_rng(5)
    a = rng.standard_normal((1, 3840, 7)).astype(np.float32)
    b = rng.standard_normal((1, 3840, 7)).astype(np.float32)
    alone, _ = forward(params, tiny_config, a)
    stacked, _ = forward(params, tiny_config, np.concatenate([a, b]))
    assert np.abs(alone.data[0] - stacked.data[0]).max() < 1e-5


# --- initialization ---


def test_init_is_seed_deterministic(tiny_config):
    a = init_params(tiny_config, seed=11)
    b = init_params(tiny_config, seed=11)
    c = init_params(tiny_config, seed=12)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_statistics(tiny_config):
    params = init_params(tiny_config, seed=0)
    for name, _, kind in param_specs(tiny_config):
        data = params[name].data
        if kind == "weight":
            assert np.abs(data).max() <= 2.0 * 0.02 + 1e-6  # truncated at 2 sigma
        elif kind == "zeros":
            assert np.abs(data).max() == 0.0
        else:
            assert np.array_equal(data, np.ones_like(data))


def test_positional_starts_at_zero(tiny_config):
    params = init_params(tiny_config, seed=9)
    assert np.abs(params["positional"].data).max() == 0.0


# --- parameter accounting ---


def _variant_key(config: ModelConfig) -> str:
    return (f"head_dim={config.head_dim},feature_head={config.feature_head},"
            f"final_norm={config.final_norm}")


def test_param_count_deterministic_and_matches_table():
    variants = param_count_variants()
    assert variants == param_count_variants()
    reference = ModelConfig()
    counted = param_count(init_params(reference, seed=0))
    assert counted == variants[_variant_key(reference)] == 734_021


@pytest.mark.parametrize("head_dim,feature_head,final_norm", [
    (16, True, True),
    (64, False, True),
    (16, False, False),
])
def test_param_count_variant_agrees_with_real_init(head_dim, feature_head, final_norm):
    config = ModelConfig(head_dim=head_dim, feature_head=feature_head,
                         final_norm=final_norm)
    assert param_count(init_params(config, seed=0)) == \
        param_count_variants()[_variant_key(config)]


# --- checkpoints ---


def test_checkpoint_roundtrip_is_bitwise(tiny_config, tmp_path):
    params = init_params(tiny_config, seed=21)
    extra = {"iteration": 17, "note": "fixture"}
    path = tmp_path / "model.ssck"
    save_params(path, tiny_config, params, extra=extra)
    config, loaded, loaded_extra, state = load_params(path, expect_config=tiny_config)
    assert config == tiny_config
    assert loaded_extra == extra
    assert state == {}
    assert set(loaded) == set(params)
    for name in params:
        assert np.array_equal(loaded[name].data, params[name].data)


def test_checkpoint_config_mismatch_names_field(tiny_config, tmp_path):
    path = tmp_path / "model.ssck"
    save_params(path, tiny_config, init_params(tiny_config, seed=0))
    other = ModelConfig(model_dim=16, head_dim=16, heads=2, blocks=2,
                        mlp_hidden=16, feature_dim=8)
    with pytest.raises(CorruptCheckpoint, match="model_dim"):
        load_params(path, expect_config=other)


def test_checkpoint_truncation_detected(tiny_config, tmp_path):
    path = tmp_path / "model.ssck"
    save_params(path, tiny_config, init_params(tiny_config, seed=0))
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_params(path)


def test_checkpoint_bad_magic_detected(tiny_config, tmp_path):
    path = tmp_path / "model.ssck"
    save_params(path, tiny_config, init_params(tiny_config, seed=0))
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(CorruptCheckpoint):
        load_params(path)


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CorruptCheckpoint):
        load_params(tmp_path / "absent.ssck")
