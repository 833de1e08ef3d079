"""Patch transformer for 30 s multi-channel EEG epochs.

Pipeline: per-channel instance normalization -> one-second patches
(128 x 7 flattened to 896) -> linear patch encoder into 64-d tokens ->
learned positional table -> 8 pre-norm residual encoder blocks with
4-head self-attention and a 64->128->64 GELU MLP -> global average
pooling -> 128-d feature head -> 5-way classifier.

Channel order of the expected input is F4-M1, O2-M1, C4-M1, O1-M2,
F3-M2, C3-M2, CZ-O1 (columns 0..6).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import read_checkpoint, write_checkpoint
from .errors import CorruptCheckpoint, ShapeMismatch


@dataclass(frozen=True)
class ModelConfig:
    seconds_per_epoch: int = 30
    sample_rate_hz: int = 128
    channels: int = 7
    patch_size: int = 128
    model_dim: int = 64
    head_dim: int = 64
    heads: int = 4
    blocks: int = 8
    mlp_hidden: int = 128
    feature_dim: int = 128
    classes: int = 5
    feature_head: bool = True
    final_norm: bool = True

    def __post_init__(self):
        if (self.seconds_per_epoch * self.sample_rate_hz) % self.patch_size:
            raise ShapeMismatch(
                f"epoch length {self.seconds_per_epoch * self.sample_rate_hz} "
                f"not divisible into patches of {self.patch_size}"
            )

    @property
    def samples_per_epoch(self) -> int:
        return self.seconds_per_epoch * self.sample_rate_hz

    @property
    def tokens(self) -> int:
        return self.samples_per_epoch // self.patch_size

    @property
    def patch_flat(self) -> int:
        return self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def instance_normalize(epoch: np.ndarray) -> np.ndarray:
    """Standardize each channel column to zero mean / unit variance."""
    return ad.instance_norm(Tensor(epoch)).data


def patchify(epoch: np.ndarray, patch_size: int = 128) -> np.ndarray:
    """(..., T, C) -> (..., tokens, patch_size * C), time-major / channel-minor.

    Token t is the row-major flattening of rows [t*P, (t+1)*P); the
    reshape is lossless and ``unpatchify`` inverts it exactly.
    """
    t, c = epoch.shape[-2], epoch.shape[-1]
    if t % patch_size:
        raise ShapeMismatch(f"{t} rows not divisible by patch size {patch_size}")
    return epoch.reshape(epoch.shape[:-2] + (t // patch_size, patch_size * c))


def unpatchify(tokens: np.ndarray, channels: int) -> np.ndarray:
    n, flat = tokens.shape[-2], tokens.shape[-1]
    if flat % channels:
        raise ShapeMismatch(f"token width {flat} not divisible by {channels} channels")
    return tokens.reshape(tokens.shape[:-2] + (n * (flat // channels), channels))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with values beyond 2 std redrawn."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x * std


def param_specs(config: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Ordered (name, shape, init kind) for every learnable tensor."""
    d = config.model_dim
    specs: list[tuple[str, tuple, str]] = [
        ("patch_encoder.weight", (config.patch_flat, d), "weight"),
        ("patch_encoder.bias", (d,), "zeros"),
        ("positional", (config.tokens, d), "zeros"),
    ]
    for i in range(config.blocks):
        specs.append((f"block{i}.norm1.gain", (d,), "ones"))
        specs.append((f"block{i}.norm1.bias", (d,), "zeros"))
        for h in range(config.heads):
            for proj in ("q", "k", "v"):
                specs.append((f"block{i}.head{h}.w{proj}", (d, config.head_dim), "weight"))
                specs.append((f"block{i}.head{h}.b{proj}", (config.head_dim,), "zeros"))
        specs.append((f"block{i}.attn_out.weight", (config.heads * config.head_dim, d), "weight"))
        specs.append((f"block{i}.attn_out.bias", (d,), "zeros"))
        specs.append((f"block{i}.norm2.gain", (d,), "ones"))
        specs.append((f"block{i}.norm2.bias", (d,), "zeros"))
        specs.append((f"block{i}.mlp.fc1.weight", (d, config.mlp_hidden), "weight"))
        specs.append((f"block{i}.mlp.fc1.bias", (config.mlp_hidden,), "zeros"))
        specs.append((f"block{i}.mlp.fc2.weight", (config.mlp_hidden, d), "weight"))
        specs.append((f"block{i}.mlp.fc2.bias", (d,), "zeros"))
    if config.final_norm:
        specs.append(("final_norm.gain", (d,), "ones"))
        specs.append(("final_norm.bias", (d,), "zeros"))
    if config.feature_head:
        specs.append(("feature.weight", (d, config.feature_dim), "weight"))
        specs.append(("feature.bias", (config.feature_dim,), "zeros"))
        specs.append(("classifier.weight", (config.feature_dim, config.classes), "weight"))
    else:
        specs.append(("classifier.weight", (d, config.classes), "weight"))
    specs.append(("classifier.bias", (config.classes,), "zeros"))
    return specs


def init_params(config: ModelConfig, seed: int, dtype: str = "float32") -> dict[str, Tensor]:
    """Seeded parameter dict; weights truncated-normal (std 0.02), biases,
    norm biases, and the positional table zero, norm gains one."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(config):
        if kind == "weight":
            data = _trunc_normal(rng, shape, 0.02)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, dtype=dtype)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    """Exact number of learnable scalars."""
    return int(sum(p.data.size for p in params.values()))


def param_count_variants() -> dict[str, int]:
    """Parameter counts of the reference input size across the three
    architecture switches left open by the block description."""
    out = {}
    for head_dim in (64, 16):
        for feature_head in (True, False):
            for final_norm in (True, False):
                cfg = ModelConfig(head_dim=head_dim, feature_head=feature_head,
                                  final_norm=final_norm)
                key = (f"head_dim={head_dim},feature_head={feature_head},"
                       f"final_norm={final_norm}")
                out[key] = sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))
    return out


def _linear(tokens: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Apply a (d_in, d_out) projection over the last axis of (..., d_in)."""
    lead = tokens.shape[:-1]
    flat = ad.reshape(tokens, (-1, tokens.shape[-1]))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, lead + (w.shape[-1],))


def attention_head(x: Tensor, wq, bq, wk, bk, wv, bv) -> Tensor:
    """Scaled dot-product self-attention for one head.

    Output row i is the convex combination sum_j a_ij * V_j with
    a = softmax(Q K^T / sqrt(d_q)) applied row-wise.
    """
    q = _linear(x, wq, bq)
    k = _linear(x, wk, bk)
    v = _linear(x, wv, bv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    return ad.matmul(ad.softmax_rows(scores), v)


def multi_head_attention(x: Tensor, params: dict[str, Tensor], block: int,
                         config: ModelConfig) -> Tensor:
    heads = [
        attention_head(
            x,
            params[f"block{block}.head{h}.wq"], params[f"block{block}.head{h}.bq"],
            params[f"block{block}.head{h}.wk"], params[f"block{block}.head{h}.bk"],
            params[f"block{block}.head{h}.wv"], params[f"block{block}.head{h}.bv"],
        )
        for h in range(config.heads)
    ]
    fused = ad.concat(heads, axis=-1)
    return _linear(fused, params[f"block{block}.attn_out.weight"],
                   params[f"block{block}.attn_out.bias"])


def encoder_block(x: Tensor, params: dict[str, Tensor], block: int,
                  config: ModelConfig) -> Tensor:
    """Pre-norm residual block: x + MHA(LN1(x)), then x + MLP(LN2(x))."""
    normed = ad.layer_norm(x, params[f"block{block}.norm1.gain"],
                           params[f"block{block}.norm1.bias"])
    x = ad.add(x, multi_head_attention(normed, params, block, config))
    normed = ad.layer_norm(x, params[f"block{block}.norm2.gain"],
                           params[f"block{block}.norm2.bias"])
    hidden = ad.gelu(_linear(normed, params[f"block{block}.mlp.fc1.weight"],
                             params[f"block{block}.mlp.fc1.bias"]))
    mlp_out = _linear(hidden, params[f"block{block}.mlp.fc2.weight"],
                      params[f"block{block}.mlp.fc2.bias"])
    return ad.add(x, mlp_out)


def forward(params: dict[str, Tensor], config: ModelConfig, batch) -> tuple[Tensor, Tensor]:
    """Batch (B, T, C) -> (logits (B, classes), features (B, feature_dim)).

    Argmax over the returned logits breaks ties toward the lowest class
    index (numpy argmax convention).
    """
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    b = x.shape[0]
    assert x.shape == (b, config.samples_per_epoch, config.channels), x.shape

    h = ad.instance_norm(x)
    h = ad.reshape(h, (b, config.tokens, config.patch_flat))
    assert h.shape == (b, config.tokens, config.patch_flat)

    h = _linear(h, params["patch_encoder.weight"], params["patch_encoder.bias"])
    h = ad.add(h, params["positional"])
    assert h.shape == (b, config.tokens, config.model_dim)

    for i in range(config.blocks):
        h = encoder_block(h, params, i, config)
        assert h.shape == (b, config.tokens, config.model_dim)

    if config.final_norm:
        h = ad.layer_norm(h, params["final_norm.gain"], params["final_norm.bias"])

    pooled = ad.mean(h, axis=1)
    assert pooled.shape == (b, config.model_dim)

    if config.feature_head:
        features = ad.gelu(_linear(pooled, params["feature.weight"], params["feature.bias"]))
    else:
        features = pooled
    logits = ad.add(ad.matmul(features, params["classifier.weight"]),
                    params["classifier.bias"])
    assert features.shape[1:] == (config.feature_dim if config.feature_head
                                  else config.model_dim,)
    assert logits.shape == (b, config.classes)
    return logits, features


def single_channel_config(config: ModelConfig) -> ModelConfig:
    """Same architecture on one input channel (patch flatten 128)."""
    return replace(config, channels=1)


def save_params(path, config: ModelConfig, params: dict[str, Tensor],
                extra: dict | None = None,
                state_arrays: dict[str, np.ndarray] | None = None) -> None:
    tensors: dict[str, np.ndarray] = {k: p.data for k, p in params.items()}
    if state_arrays:
        tensors.update(state_arrays)
    write_checkpoint(path, config.to_dict(), tensors, extra)


def load_params(path, expect_config: ModelConfig | None = None,
                dtype: str = "float32"):
    """Read a checkpoint back into (config, params, extra, state_arrays).

    ``state_arrays`` holds any non-parameter tensors (optimizer state).
    """
    config_dict, tensors, extra = read_checkpoint(path)
    try:
        config = ModelConfig.from_dict(config_dict)
    except TypeError as exc:
        raise CorruptCheckpoint(f"unreadable model config in {path}: {exc}") from exc
    if expect_config is not None and config != expect_config:
        diff = [
            f"{field}: checkpoint={getattr(config, field)} expected={getattr(expect_config, field)}"
            for field in config.to_dict()
            if getattr(config, field) != getattr(expect_config, field)
        ]
        raise CorruptCheckpoint("model config mismatch: " + "; ".join(diff))
    params: dict[str, Tensor] = {}
    state_arrays: dict[str, np.ndarray] = {}
    expected = {name for name, _, _ in param_specs(config)}
    for name, arr in tensors.items():
        if name in expected:
            params[name] = Tensor(arr, requires_grad=True, dtype=dtype)
        else:
            state_arrays[name] = arr
    missing = expected - set(params)
    if missing:
        raise CorruptCheckpoint(f"checkpoint missing tensors: {sorted(missing)}")
    return config, params, extra, state_arrays
