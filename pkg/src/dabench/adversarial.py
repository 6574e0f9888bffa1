"""Gradient reversal, the domain-discriminator objective and the min-max
assembly that turns adversarial alignment into a single minimization.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeError
from .losses import LossValue

LOG_EPS = 1e-7


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coeff * grad_output, None


def grl_apply(x: torch.Tensor, coeff: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; backward multiplies gradients by -coeff."""
    if coeff < 0:
        raise ShapeError("gradient reversal coefficient must be >= 0")
    return _ReverseGrad.apply(x, coeff)


class GradientReversal(nn.Module):
    """Module wrapper around :func:`grl_apply` with a settable coefficient."""

    def __init__(self, lambda_coeff: float = 1.0):
        super().__init__()
        if lambda_coeff < 0:
            raise ShapeError("gradient reversal coefficient must be >= 0")
        self.lambda_coeff = lambda_coeff

    def forward(self, x):
        return grl_apply(x, self.lambda_coeff)


class DomainDiscriminator(nn.Module):
    """Binary source/target classifier on bottleneck features.

    d -> hidden -> hidden -> 1 with ReLU, dropout 0.5 and a sigmoid output,
    the standard adversarial-alignment discriminator stack.
    """

    def __init__(self, in_dim: int, hidden: int = 1024, dropout: float = 0.5):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, x):
        return torch.sigmoid(self.net(x)).squeeze(-1)


def domain_adversarial_loss(d_out: torch.Tensor, tags: torch.Tensor) -> LossValue:
    """Binary cross-entropy of the domain discriminator over a 2B batch.

        -(1/2B) sum_j [z_j log d_j + (1 - z_j) log(1 - d_j)]

    ``tags`` are 1 for source rows, 0 for target rows, and the batch must be
    balanced (B of each). Outputs are clamped to [eps, 1-eps] so saturated
    discriminators cannot produce infinite loss.
    """
    if d_out.shape != tags.shape:
        raise ShapeError(f"outputs {tuple(d_out.shape)} and tags {tuple(tags.shape)} differ")
    tags = tags.to(d_out.dtype)
    n_src = float(tags.sum())
    n_tgt = float((1 - tags).sum())
    if n_src != n_tgt:
        raise ShapeError(
            f"unbalanced domain batch: {int(n_src)} source vs {int(n_tgt)} target rows"
        )
    d = d_out.clamp(LOG_EPS, 1.0 - LOG_EPS)
    value = -(tags * torch.log(d) + (1.0 - tags) * torch.log(1.0 - d)).mean()
    with torch.no_grad():
        mean_src = float((d_out * tags).sum() / max(n_src, 1.0))
        mean_tgt = float((d_out * (1 - tags)).sum() / max(n_tgt, 1.0))
    return LossValue(value, {"mean_d_source": mean_src, "mean_d_target": mean_tgt})


def daln_objective(ce: torch.Tensor, nwd: torch.Tensor, lambda_coeff: float) -> LossValue:
    """Discriminator-free min-max total ``ce - lambda * nwd``.

    The caller must have routed the prediction matrices feeding ``nwd``
    through :func:`grl_apply`, which makes a single backward pass update the
    classifier to maximize the discrepancy and the feature extractor to
    minimize it. With lambda 0 the cross-entropy tensor is returned as-is.
    """
    if lambda_coeff < 0:
        raise ShapeError("lambda must be >= 0")
    if lambda_coeff == 0:
        return LossValue(ce, {"ce": float(ce.detach()), "nwd": float(nwd.detach())})
    value = ce - lambda_coeff * nwd
    return LossValue(value, {"ce": float(ce.detach()), "nwd": float(nwd.detach())})
