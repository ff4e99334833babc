import math

import numpy as np
import pytest
import torch

from dualmim.errors import ConfigError, ShapeError
from dualmim.nn_core import (
    EncoderConfig,
    ParamSet,
    encoder_forward,
    grad_check,
    grad_check_report,
    init_encoder_params,
    patch_embed,
    patchify,
    relative_position_index,
    shift_attention_mask,
    unpatchify,
    window_attention,
)


def _params(cfg, seed=0, dtype=torch.float32, jitter=0.0):
    p = init_encoder_params(cfg, torch.Generator().manual_seed(seed), dtype)
    if jitter:
        g = torch.Generator().manual_seed(seed + 1)
        p = p.map(lambda t: t + jitter * torch.randn(t.shape, generator=g, dtype=t.dtype))
    return p


# -- dense oracle -------------------------------------------------------------------


def _ln(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def _gelu(x):
    from math import erf

    return 0.5 * x * (1.0 + np.vectorize(erf)(x / math.sqrt(2.0)))


def dense_block(x, p, i, cfg):
    """Global attention over every token pair, written with explicit loops."""
    a = lambda k: p[f"blocks.{i}.{k}"].double().numpy()  # noqa: E731
    D, h, g = cfg.embed_dim, cfg.heads, cfg.grid
    hd = D // h
    y = _ln(x, a("norm1.weight"), a("norm1.bias"))
    qkv = y @ a("attn.qkv.weight")
    q = qkv[:, :D] + a("attn.q_bias")
    k = qkv[:, D : 2 * D]
    v = qkv[:, 2 * D :] + a("attn.v_bias")
    table = a("attn.rel_bias")
    n = g * g
    out = np.zeros((n, D))
    for head in range(h):
        sl = slice(head * hd, (head + 1) * hd)
        logits = np.zeros((n, n))
        for s in range(n):
            for t in range(n):
                dy, dx = s // g - t // g, s % g - t % g
                idx = (dy + g - 1) * (2 * g - 1) + (dx + g - 1)
                logits[s, t] = q[s, sl] @ k[t, sl] / math.sqrt(hd) + table[head, idx]
        w = np.exp(logits - logits.max(1, keepdims=True))
        w /= w.sum(1, keepdims=True)
        out[:, sl] = w @ v[:, sl]
    x = x + out @ a("attn.proj.weight") + a("attn.proj.bias")
    y = _ln(x, a("norm2.weight"), a("norm2.bias"))
    hdn = _gelu(y @ a("mlp.fc1.weight") + a("mlp.fc1.bias"))
    return x + hdn @ a("mlp.fc2.weight") + a("mlp.fc2.bias")


@pytest.mark.parametrize("depth", [1, 2])
def test_window_equal_grid_matches_dense_attention(depth):
    cfg = EncoderConfig(in_channels=3, image_size=16, patch_size=4, embed_dim=16, depth=depth, heads=2, window=4)
    p = _params(cfg, seed=3, jitter=0.1)
    g = torch.Generator().manual_seed(9)
    tokens = torch.randn(2, cfg.num_tokens, cfg.embed_dim, generator=g)
    got = encoder_forward(tokens, None, torch.zeros(cfg.embed_dim), p, cfg)
    for b in range(2):
        x = tokens[b].double().numpy()
        for i in range(depth):
            x = dense_block(x, p, i, cfg)
        want = _ln(x, p["norm.weight"].double().numpy(), p["norm.bias"].double().numpy())
        assert np.abs(got[b].double().numpy() - want).max() < 1e-5


def test_windows_do_not_mix_without_shift():
    cfg = EncoderConfig(in_channels=3, image_size=32, patch_size=4, embed_dim=8, depth=1, heads=2, window=4)
    p = _params(cfg, jitter=0.1)
    x = torch.randn(1, cfg.num_tokens, 8)
    y = x.clone()
    y[0, 0] += 5.0  # token (0, 0) lives in the top-left window
    a = window_attention(x, p, "blocks.0.attn", cfg, 0).reshape(8, 8, 8)
    b = window_attention(y, p, "blocks.0.attn", cfg, 0).reshape(8, 8, 8)
    changed = (a - b).abs().amax(-1) > 0
    assert changed[:4, :4].any() and not changed[4:, :].any() and not changed[:, 4:].any()


def test_shifted_block_mixes_across_windows():
    cfg = EncoderConfig(in_channels=3, image_size=32, patch_size=4, embed_dim=8, depth=2, heads=2, window=4)
    assert cfg.shift_for_block(0) == 0 and cfg.shift_for_block(1) == 2
    p = _params(cfg, jitter=0.1)
    x = torch.randn(1, cfg.num_tokens, 8)
    y = x.clone()
    y[0, 3 * 8 + 3] += 5.0
    a = window_attention(x, p, "blocks.1.attn", cfg, 2).reshape(8, 8, 8)
    b = window_attention(y, p, "blocks.1.attn", cfg, 2).reshape(8, 8, 8)
    changed = (a - b).abs().amax(-1) > 0
    # the shifted window around (3, 3) spans rows/cols 2..5
    assert changed[2:6, 2:6].any() and not changed[:2].any() and not changed[6:].any()


def test_shift_mask_blocks_wrapped_regions():
    m = shift_attention_mask(8, 4, 2)
    assert m.shape == (4, 16, 16)
    assert not m[0].any()  # interior window holds one region
    assert m[3].any()
    assert shift_attention_mask(8, 4, 0) is None


def test_relative_position_index_range():
    idx = relative_position_index(3)
    assert idx.shape == (9, 9)
    assert idx.min() == 0 and idx.max() == 24
    assert torch.all(idx.diagonal() == 12)


def test_patch_embed_counts_and_order():
    cfg = EncoderConfig(image_size=64, patch_size=4, embed_dim=8, depth=1, heads=2, window=4)
    p = _params(cfg)
    assert patch_embed(torch.rand(64, 64, 3), p, cfg).shape == (256, 8)
    big = EncoderConfig(image_size=224, patch_size=4, embed_dim=8, depth=1, heads=2, window=7)
    assert big.num_tokens == 3136
    p0 = ParamSet({k: torch.zeros_like(v) for k, v in p.items()})
    assert torch.count_nonzero(patch_embed(torch.zeros(64, 64, 3), p0, cfg)) == 0
    img = torch.arange(2 * 4 * 4 * 1, dtype=torch.float32).reshape(2, 4, 4, 1)
    tok = patchify(img, 2)
    assert tok[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]  # second patch is the top-right one
    assert torch.equal(unpatchify(tok, 2, 1), img)
    with pytest.raises(ShapeError):
        patch_embed(torch.zeros(64, 64, 1), p, cfg)


def test_mask_token_substitution():
    cfg = EncoderConfig(in_channels=1, image_size=16, patch_size=4, embed_dim=8, depth=2, heads=2, window=2)
    p = _params(cfg, jitter=0.05)
    tok = torch.randn(3, 16, 8)
    token = torch.randn(8)
    none = encoder_forward(tok, None, token, p, cfg)
    assert torch.equal(encoder_forward(tok, torch.zeros(3, 16, dtype=torch.bool), token, p, cfg), none)
    full = torch.ones(3, 16, dtype=torch.bool)
    a = encoder_forward(tok, full, token, p, cfg)
    b = encoder_forward(torch.randn(3, 16, 8), full, token, p, cfg)
    assert torch.equal(a, b)
    with pytest.raises(ShapeError):
        encoder_forward(tok, torch.zeros(3, 9, dtype=torch.bool), token, p, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        EncoderConfig(embed_dim=10, heads=3)
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=64, patch_size=4, window=5)


def test_paramset_behaviour():
    ps = ParamSet({"b": torch.zeros(2), "a": torch.ones(3)})
    assert list(ps) == ["a", "b"] and ps.numel() == 5
    with pytest.raises(ShapeError):
        ps["a"] = torch.zeros(4)
    sub = ParamSet({"enc.x": torch.zeros(1), "dec.y": torch.zeros(1)}).sub("enc.")
    assert list(sub) == ["x"]
    c = ps.clone()
    c["a"].add_(1)
    assert ps["a"].sum() == 3


def test_grad_check_quadratic():
    ps = ParamSet({"w": torch.tensor([3.0], dtype=torch.float64)})
    assert grad_check(lambda p: (p["w"] ** 2).sum(), ps) < 1e-9
    rep = grad_check_report(lambda p: (p["w"] ** 2).sum(), ps)
    assert rep.per_param["w"] < 1e-9


def test_grad_check_catches_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x**2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x  # true derivative is 2x

    ps = ParamSet({"w": torch.tensor([1.5, -0.5], dtype=torch.float64)})
    assert grad_check(lambda p: Wrong.apply(p["w"]).sum(), ps) > 0.1


def test_grad_check_rejects_non_finite():
    ps = ParamSet({"w": torch.tensor([1.0], dtype=torch.float64)})
    with pytest.raises(FloatingPointError):
        grad_check(lambda p: p["w"].sum() / 0.0, ps)


def test_encoder_grad_check_l1():
    cfg = EncoderConfig(in_channels=1, image_size=8, patch_size=2, embed_dim=8, depth=2, heads=2, window=2, mlp_ratio=1.0)
    p = _params(cfg, dtype=torch.float64, jitter=0.3)
    g = torch.Generator().manual_seed(1)
    img = torch.randn(2, 8, 8, 1, generator=g, dtype=torch.float64)
    tgt = torch.randn(2, 16, 8, generator=g, dtype=torch.float64)
    mask = torch.zeros(2, 16, dtype=torch.bool)
    mask[:, ::3] = True
    token = torch.randn(8, generator=g, dtype=torch.float64)

    def loss(ps):
        return (encoder_forward(patch_embed(img, ps, cfg), mask, token, ps, cfg) - tgt).abs().mean()

    assert grad_check(loss, p) < 1e-6
