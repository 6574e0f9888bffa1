"""Analytic gradients of every loss against central finite differences.

Random 4x8 double-precision inputs, 5 seeds, step 1e-3, relative error
< 1e-4. Nuclear-norm losses skip draws whose singular values come within
1e-6 of a tie, where the subgradient is not unique.
"""

import numpy as np
import torch

from dabench.adversarial import domain_adversarial_loss
from dabench.losses import (
    bnm_loss,
    cmmd_loss,
    coral_loss,
    lmmd_loss,
    mmd_loss,
    mutual_info_loss,
    nwd_loss,
    subdomain_weights,
)
from dabench.numerics import KernelSpec, one_hot

from oracles import central_difference_grad, relative_error

STEP = 1e-3
TOL = 1e-4
SHAPE = (4, 8)
SEEDS = range(5)

FIXED_GAUSSIAN = KernelSpec.gaussian(bandwidth=1.5)


def check_grad(fn, x0: np.ndarray, tol: float = TOL):
    """fn maps a float64 torch matrix to a scalar tensor."""
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_difference_grad(lambda m: float(fn(torch.tensor(m))), x0, STEP)
    err = relative_error(analytic.numpy(), numeric)
    assert err < tol, f"gradient mismatch: relative error {err:.3e}"


def no_singular_ties(p: torch.Tensor, gap: float = 1e-6) -> bool:
    sv = torch.linalg.svdvals(p)
    return bool((sv[:-1] - sv[1:]).min() > gap)


def softmax64(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)


def test_coral_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        fs = rng.standard_normal(SHAPE)
        ft = rng.standard_normal(SHAPE)
        check_grad(lambda x: coral_loss(x, torch.tensor(ft)).value, fs)
        check_grad(lambda x: coral_loss(torch.tensor(fs), x).value, ft)


def test_mmd_gradient():
    for seed in SEEDS:
        rng = np.random.default_rng(10 + seed)
        fs = rng.standard_normal(SHAPE)
        ft = rng.standard_normal(SHAPE)
        check_grad(lambda x: mmd_loss(x, torch.tensor(ft), FIXED_GAUSSIAN).value, fs)
        check_grad(lambda x: mmd_loss(torch.tensor(fs), x, FIXED_GAUSSIAN).value, ft)


def test_lmmd_gradient():
    c = 3
    for seed in SEEDS:
        rng = np.random.default_rng(20 + seed)
        fs = rng.standard_normal(SHAPE)
        ft = rng.standard_normal(SHAPE)
        ws = subdomain_weights(
            one_hot(torch.tensor(rng.integers(0, c, SHAPE[0])), c, dtype=torch.float64))
        raw = rng.random((SHAPE[0], c)) + 1e-3
        wt = subdomain_weights(torch.tensor(raw / raw.sum(axis=1, keepdims=True)))
        check_grad(lambda x: lmmd_loss(x, torch.tensor(ft), ws, wt, FIXED_GAUSSIAN, c).value, fs)
        check_grad(lambda x: lmmd_loss(torch.tensor(fs), x, ws, wt, FIXED_GAUSSIAN, c).value, ft)


def test_cmmd_gradient():
    c = 3
    for seed in SEEDS:
        rng = np.random.default_rng(30 + seed)
        fs = rng.standard_normal(SHAPE)
        ft = rng.standard_normal(SHAPE)
        ys = one_hot(torch.tensor(rng.integers(0, c, SHAPE[0])), c, dtype=torch.float64)
        raw = rng.random((SHAPE[0], c)) + 1e-3
        pt = torch.tensor(raw / raw.sum(axis=1, keepdims=True))
        check_grad(lambda x: cmmd_loss(x, torch.tensor(ft), ys, pt, FIXED_GAUSSIAN).value, fs)
        check_grad(lambda x: cmmd_loss(torch.tensor(fs), x, ys, pt, FIXED_GAUSSIAN).value, ft)


def test_mutual_info_gradient_through_softmax():
    for seed in SEEDS:
        rng = np.random.default_rng(40 + seed)
        logits = rng.standard_normal(SHAPE)
        check_grad(lambda x: mutual_info_loss(softmax64(x)).value, logits)


def _draw_without_ties(rng, other=None):
    """Logit draw whose softmax (and the companion's) is away from singular ties."""
    for _ in range(100):
        logits = rng.standard_normal(SHAPE)
        ok = no_singular_ties(softmax64(torch.tensor(logits)))
        if ok and other is not None:
            ok = no_singular_ties(softmax64(torch.tensor(other)))
        if ok:
            return logits
    raise AssertionError("could not draw a tie-free matrix")


def test_bnm_gradient_through_softmax():
    for seed in SEEDS:
        rng = np.random.default_rng(50 + seed)
        logits = _draw_without_ties(rng)
        check_grad(lambda x: bnm_loss(softmax64(x)).value, logits)


def test_nwd_gradient_through_softmax():
    for seed in SEEDS:
        rng = np.random.default_rng(60 + seed)
        ls = _draw_without_ties(rng)
        lt = _draw_without_ties(rng)
        check_grad(lambda x: nwd_loss(softmax64(x), softmax64(torch.tensor(lt))).value, ls)
        check_grad(lambda x: nwd_loss(softmax64(torch.tensor(ls)), softmax64(x)).value, lt)


def test_domain_adversarial_gradient_through_sigmoid():
    tags = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    for seed in SEEDS:
        rng = np.random.default_rng(70 + seed)
        raw = rng.standard_normal((4, 1))

        def fn(x):
            return domain_adversarial_loss(torch.sigmoid(x).flatten(), tags).value

        check_grad(fn, raw)
