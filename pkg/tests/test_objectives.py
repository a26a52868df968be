import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from musicmos.errors import ConfigError, ContractError, EmptyInputError
from musicmos.objectives import (
    ContrastiveConfig,
    Mode,
    OrdinalTargetConfig,
    UncertaintyState,
    combine,
    contrastive_loss,
    epoch_schedule,
    mse_loss,
    ordinal_loss,
    soft_targets,
)

D = torch.float64


def fd_check(fn, x, eps=1e-4, tol=1e-4):
    """Compare autograd against central differences; return max relative error."""
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach().clone()
    numeric = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        xp, xm = flat.clone(), flat.clone()
        xp[i] += eps
        xm[i] -= eps
        numeric.view(-1)[i] = (fn(xp.view_as(x)) - fn(xm.view_as(x))).item() / (2 * eps)
    scale = torch.maximum(analytic.abs(), numeric.abs()).clamp_min(1e-3)
    return ((analytic - numeric).abs() / scale).max().item()


def test_mse_examples():
    assert mse_loss(torch.tensor([3.0]), torch.tensor([5.0])).item() == 4.0
    assert mse_loss(torch.tensor([1.0, 2.0]), torch.tensor([2.0, 4.0])).item() == 2.5
    t = torch.tensor([1.0, 4.0])
    assert mse_loss(t, t).item() == 0.0
    with pytest.raises(EmptyInputError):
        mse_loss(torch.zeros(0), torch.zeros(0))
    with pytest.raises(ContractError):
        mse_loss(torch.zeros(2), torch.zeros(3))


def test_soft_targets_at_three():
    p = soft_targets(3.0)
    e = [math.exp(-8), math.exp(-2), 1.0, math.exp(-2), math.exp(-8)]
    expected = [v / sum(e) for v in e]
    assert p.tolist() == pytest.approx(expected, abs=1e-12)
    # normalising exp(0), exp(-2), exp(-8) gives 0.1065 / 0.7866
    assert p[1].item() == pytest.approx(0.1065, abs=1e-4)
    assert p[2].item() == pytest.approx(0.7866, abs=1e-4)
    assert (p[2] / p[1]).item() == pytest.approx(math.e**2, rel=1e-12)
    assert p[0] == p[4] and p[1] == p[3]


def test_soft_targets_narrow_sigma():
    p = soft_targets(4.0, OrdinalTargetConfig(sigma=0.01))
    assert p[3].item() == pytest.approx(1.0, abs=1e-12)


@given(st.floats(1.0, 5.0), st.floats(0.2, 2.0))
def test_soft_targets_normalised_and_positive(y, sigma):
    p = soft_targets(y, OrdinalTargetConfig(sigma=sigma))
    assert abs(p.sum().item() - 1.0) < 1e-9
    assert torch.all(p > 0)


def test_ordinal_config_validation():
    with pytest.raises(ConfigError):
        OrdinalTargetConfig(centers=(1.0, 3.0, 2.0))
    with pytest.raises(ConfigError):
        OrdinalTargetConfig(sigma=0.0)
    with pytest.raises(ConfigError):
        ContrastiveConfig(margin=0.0)


def test_ordinal_loss_examples():
    t = soft_targets(torch.tensor([2.3, 4.1]))
    uniform = torch.zeros(2, 5, dtype=D)
    assert ordinal_loss(uniform, t).item() == pytest.approx(math.log(5), abs=1e-12)
    entropy = -(t * t.log()).sum(-1).mean()
    assert ordinal_loss(t.log(), t).item() == pytest.approx(entropy.item(), abs=1e-12)
    with pytest.raises(ContractError):
        ordinal_loss(uniform, t * 1.1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_ordinal_loss_at_least_entropy(seed):
    g = torch.Generator().manual_seed(seed)
    y = 1 + 4 * torch.rand(6, generator=g, dtype=D)
    t = soft_targets(y)
    logits = torch.randn(6, 5, generator=g, dtype=D) * 3
    entropy = -(t * t.log()).sum(-1).mean()
    assert ordinal_loss(logits, t).item() >= entropy.item() - 1e-12


def test_contrastive_examples():
    cfg = ContrastiveConfig()
    loss, n = contrastive_loss(torch.tensor([2.0, 1.0], dtype=D), torch.tensor([4.0, 2.0], dtype=D), cfg)
    assert n == 1 and loss.item() == 0.0
    loss, n = contrastive_loss(torch.tensor([1.2, 1.0], dtype=D), torch.tensor([4.0, 2.0], dtype=D), cfg)
    assert n == 1 and loss.item() == pytest.approx(0.3, abs=1e-12)
    preds = torch.tensor([3.0, 1.0], dtype=D, requires_grad=True)
    loss, n = contrastive_loss(preds, torch.tensor([1.0, 1.2], dtype=D), cfg)
    assert n == 0 and loss.item() == 0.0
    loss.backward()
    assert torch.equal(preds.grad, torch.zeros(2, dtype=D))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(-10, 10))
def test_contrastive_translation_invariant(seed, shift):
    g = torch.Generator().manual_seed(seed)
    p = torch.randn(8, generator=g, dtype=D)
    y = 1 + 4 * torch.rand(8, generator=g, dtype=D)
    a, _ = contrastive_loss(p, y)
    b, _ = contrastive_loss(p + shift, y)
    assert b.item() == pytest.approx(a.item(), abs=1e-9)


def test_contrastive_monotone_hinge():
    y = torch.tensor([4.0, 1.0], dtype=D)
    prev = math.inf
    for gap in np.linspace(-1, 1, 21):
        v, _ = contrastive_loss(torch.tensor([gap, 0.0], dtype=D), y)
        assert v.item() <= prev + 1e-12
        prev = v.item()


def test_epoch_schedule():
    assert epoch_schedule(1, "A1") == {"mse"}
    assert epoch_schedule(10, "A2") == {"ordinal"}
    assert epoch_schedule(5, "A3b") == {"ordinal"}
    assert epoch_schedule(6, "A3b") == {"ordinal", "contrastive"}
    assert epoch_schedule(6, "A3c") == {"ordinal", "contrastive"}
    assert epoch_schedule(6, "A3a") == {"ordinal"}
    with pytest.raises(ConfigError):
        epoch_schedule(0, "A2")
    with pytest.raises(ConfigError):
        Mode.parse("A5")


def test_combine_contrastive_gated_by_epoch():
    losses = {"mi": torch.tensor(1.0, dtype=D), "ta": torch.tensor(2.0, dtype=D)}
    con = {"mi": torch.tensor(0.4, dtype=D), "ta": torch.tensor(0.2, dtype=D)}
    assert combine(losses, 5, "A3b", contrastive=con).item() == pytest.approx(3.0)
    assert combine(losses, 6, "A3b", contrastive=con).item() == pytest.approx(3.0 + 0.5 * 0.6)
    assert combine(losses, 6, "A2", contrastive=con).item() == pytest.approx(3.0)


def test_combine_uncertainty_at_zero():
    losses = {"mi": torch.tensor(1.0, dtype=D), "ta": torch.tensor(3.0, dtype=D)}
    unc = UncertaintyState().double()
    assert combine(losses, 1, "A3c", unc).item() == pytest.approx(2.0)
    total = combine(losses, 1, "A3c", unc)
    total.backward()
    for h, L in (("mi", 1.0), ("ta", 3.0)):
        assert unc.log_vars[h].grad.item() == pytest.approx((-L + 1) / 2)


def test_combine_errors():
    losses = {"mi": torch.tensor(1.0)}
    with pytest.raises(ConfigError):
        combine(losses, 1, "A2", head_mode="regression")
    with pytest.raises(ConfigError):
        combine(losses, 1, "A3c")
    with pytest.raises(ContractError):
        combine({"mi": torch.tensor(float("nan"))}, 1, "A2")


# ---------------------------------------------------------------- gradients


def _instances(n=50):
    return [torch.Generator().manual_seed(1000 + i) for i in range(n)]


def test_gradcheck_mse():
    for g in _instances():
        target = 1 + 4 * torch.rand(6, generator=g, dtype=D)
        pred = 1 + 4 * torch.rand(6, generator=g, dtype=D)
        assert fd_check(lambda p: mse_loss(p, target), pred) < 1e-4


def test_gradcheck_ordinal():
    for g in _instances():
        t = soft_targets(1 + 4 * torch.rand(4, generator=g, dtype=D))
        logits = torch.randn(4, 5, generator=g, dtype=D)
        assert fd_check(lambda z: ordinal_loss(z, t), logits) < 1e-4


def test_gradcheck_contrastive():
    for g in _instances():
        y = 1 + 4 * torch.rand(6, generator=g, dtype=D)
        p = 1 + 4 * torch.rand(6, generator=g, dtype=D)
        assert fd_check(lambda q: contrastive_loss(q, y)[0], p) < 1e-4


def test_gradcheck_uncertainty_combination():
    for g in _instances():
        L = torch.rand(2, generator=g, dtype=D) * 3
        s = torch.randn(2, generator=g, dtype=D)

        def total(v):
            unc = UncertaintyState().double()
            with torch.no_grad():
                unc.log_vars["mi"].copy_(v[2])
                unc.log_vars["ta"].copy_(v[3])
            # route the log-variances through autograd explicitly
            return sum(torch.exp(-v[2 + i]) / 2 * v[i] + v[2 + i] / 2 for i in range(2))

        x = torch.cat([L, s])
        assert fd_check(total, x) < 1e-4
        # and the module's own weighting agrees with the closed form
        unc = UncertaintyState().double()
        with torch.no_grad():
            unc.log_vars["mi"].copy_(s[0])
            unc.log_vars["ta"].copy_(s[1])
        got = combine({"mi": L[0], "ta": L[1]}, 1, "A3c", unc)
        assert got.item() == pytest.approx(total(x).item(), abs=1e-12)
