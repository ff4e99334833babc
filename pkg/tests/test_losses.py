import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualmim.errors import ConfigError, ShapeError
from dualmim.losses import LossConfig, MaskedBatch, infonce_loss, mim_loss, pixel_mask, total_loss


def _batch(x_rgb, r_rgb, m_rgb, x_dsm, r_dsm, m_dsm, mode="pixel_channel"):
    t = lambda v: torch.tensor(v, dtype=torch.float64)  # noqa: E731
    return MaskedBatch(t(x_rgb), t(r_rgb), torch.tensor(m_rgb), t(x_dsm), t(r_dsm), torch.tensor(m_dsm), mode)


def test_mim_hand_example():
    # masked RGB x=[1,2], r=[0,4]; masked DSM x=[3], r=[3.5]; unmasked entries are noise
    b = _batch([1.0, 2.0, 9.0], [0.0, 4.0, -9.0], [True, True, False], [3.0, 7.0], [3.5, 0.0], [True, False])
    assert abs(mim_loss(b).item() - 3.5 / 3) < 1e-12
    only_rgb = _batch([2.0], [0.0], [True], [1.0], [5.0], [False])
    assert mim_loss(only_rgb).item() == 2.0


def test_mim_identity_is_zero():
    x = torch.randn(2, 8, 8, 3, dtype=torch.float64)
    d = torch.randn(2, 8, 8, 1, dtype=torch.float64)
    m = torch.rand(2, 8, 8, 1) < 0.5
    m[0, 0, 0] = True
    assert mim_loss(MaskedBatch(x, x.clone(), m, d, d.clone(), m)).item() == 0.0


def test_mim_count_modes():
    x = torch.zeros(1, 2, 2, 3, dtype=torch.float64)
    r = torch.ones_like(x)
    d, rd = torch.zeros(1, 2, 2, 1, dtype=torch.float64), torch.ones(1, 2, 2, 1, dtype=torch.float64)
    m = torch.tensor([[[[True], [False]], [[False], [False]]]])
    pc = MaskedBatch(x, r, m, d, rd, m)
    assert pc.n_masked == 4 and mim_loss(pc).item() == 1.0
    px = MaskedBatch(x, r, m, d, rd, m, count_mode="pixel")
    assert px.n_masked == 2 and mim_loss(px).item() == 2.0


def test_mim_nothing_masked_raises():
    x = torch.zeros(1, 2, 2, 3)
    d = torch.zeros(1, 2, 2, 1)
    m = torch.zeros(1, 2, 2, 1, dtype=torch.bool)
    with pytest.raises(ValueError):
        mim_loss(MaskedBatch(x, x, m, d, d, m))
    with pytest.raises(ShapeError):
        mim_loss(MaskedBatch(x, torch.zeros(1, 2, 2, 2), m | True, d, d, m))


def test_pixel_mask_expands_patches():
    pm = torch.tensor([[True, False, False, True]])
    px = pixel_mask(pm, 2)
    assert px.shape == (1, 4, 4, 1)
    assert px[0, :2, :2].all() and not px[0, :2, 2:].any() and px[0, 2:, 2:].all()


@pytest.mark.parametrize("b", [2, 4, 8])
def test_infonce_uniform_is_log_b(b):
    z = torch.nn.functional.normalize(torch.ones(b, 5, dtype=torch.float64), dim=1)
    for sym in (True, False):
        assert abs(infonce_loss(z, z, tau=0.3, symmetric=sym).item() - math.log(b)) < 1e-12


def test_infonce_orthogonal_examples():
    e = torch.eye(2, dtype=torch.float64)
    assert abs(infonce_loss(e, e, tau=1.0).item() - (-math.log(math.e / (math.e + 1)))) < 1e-12
    assert abs(infonce_loss(e, e, tau=0.5).item() - 0.12692801104297263) < 1e-12
    assert abs(infonce_loss(e, e, tau=1.0).item() - 0.31326168751822286) < 1e-12


def test_infonce_oracle_and_asymmetry():
    g = torch.Generator().manual_seed(0)
    a = torch.nn.functional.normalize(torch.randn(5, 4, generator=g, dtype=torch.float64), dim=1)
    b = torch.nn.functional.normalize(torch.randn(5, 4, generator=g, dtype=torch.float64), dim=1)
    tau = 0.07

    def one_way(x, y):
        tot = 0.0
        for i in range(len(x)):
            sims = [float(x[i] @ y[k]) / tau for k in range(len(y))]
            tot += -(sims[i] - math.log(sum(math.exp(s) for s in sims)))
        return tot / len(x)

    assert abs(infonce_loss(a, b, tau=tau, symmetric=False).item() - one_way(a, b)) < 1e-10
    assert abs(infonce_loss(a, b, tau=tau).item() - 0.5 * (one_way(a, b) + one_way(b, a))) < 1e-10


def test_infonce_errors():
    z = torch.ones(1, 3)
    with pytest.raises(ValueError):
        infonce_loss(z, z)
    with pytest.raises(ShapeError):
        infonce_loss(torch.ones(2, 3), torch.ones(3, 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 6), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_infonce_bounds(b, c, tau, seed):
    g = torch.Generator().manual_seed(seed)
    z1 = torch.nn.functional.normalize(torch.randn(b, c, generator=g, dtype=torch.float64), dim=1)
    z2 = torch.nn.functional.normalize(torch.randn(b, c, generator=g, dtype=torch.float64), dim=1)
    loss = infonce_loss(z1, z2, tau=tau).item()
    # each term is -log of a softmax probability, bounded by the extreme logit spread
    assert 0.0 <= loss <= math.log(b) + 2.0 / tau + 1e-9


def test_total_loss_examples():
    assert total_loss(1.0, 0.0) == 0.95
    assert total_loss(3.7, 11.0, alpha=0.0) == 3.7
    # 0.95 * 7/6 + 0.05 * 0.6931 = 1.1083333... + 0.034655
    assert abs(total_loss(3.5 / 3, 0.6931) - 1.1429883333333333) < 1e-12
    with pytest.raises(ConfigError):
        total_loss(1.0, 1.0, alpha=1.5)


def test_total_loss_weights_via_gradient():
    mim = torch.tensor(0.8, dtype=torch.float64, requires_grad=True)
    nce = torch.tensor(2.1, dtype=torch.float64, requires_grad=True)
    for alpha in (0.0, 0.05, 0.5, 1.0):
        g_mim, g_nce = torch.autograd.grad(total_loss(mim, nce, alpha=alpha), [mim, nce])
        assert abs(g_mim.item() - (1 - alpha)) < 1e-12 and abs(g_nce.item() - alpha) < 1e-12


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(tau=0)
    with pytest.raises(ConfigError):
        LossConfig(count_mode="voxel")
