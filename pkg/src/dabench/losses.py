"""The seven adaptation objectives as differentiable scalar losses.

Each loss returns a :class:`LossValue` whose ``value`` is a scalar torch
tensor attached to the input graph; ``components`` holds detached floats for
logging. Feature-space losses take (n, d) bottleneck feature matrices,
prediction-space losses take (B, C) row-stochastic probability matrices.

Conventions shared by the kernel losses: the gaussian bandwidth is resolved
once on the concatenated source+target batch (median heuristic by default)
and treated as a per-batch constant, so no gradient flows through it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import DegenerateInputError, NumericError, ShapeError
from .numerics import (
    KernelSpec,
    covariance,
    kernel_matrix,
    nuclear_norm,
    resolve_bandwidth,
    row_entropy,
)


@dataclass
class LossValue:
    """Scalar loss plus named sub-terms for the metric log."""

    value: torch.Tensor
    components: dict = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value)


def _f(t) -> float:
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def coral_loss(fs: torch.Tensor, ft: torch.Tensor) -> LossValue:
    """Covariance-alignment loss ||C_S - C_T||_F^2 / (4 d^2).

    Both domains need at least two rows for the covariance estimator.
    """
    if fs.shape[1] != ft.shape[1]:
        raise ShapeError(f"feature dims differ: {fs.shape[1]} vs {ft.shape[1]}")
    d = fs.shape[1]
    cs = covariance(fs)
    ct = covariance(ft)
    value = (cs - ct).pow(2).sum() / (4.0 * d * d)
    return LossValue(value, {"fro_sq": _f((cs - ct).pow(2).sum())})


def mmd_loss(fs: torch.Tensor, ft: torch.Tensor, spec: KernelSpec) -> LossValue:
    """Biased squared-MMD estimate mean(K_ss) + mean(K_tt) - 2 mean(K_st).

    The V-statistic keeps the i = j kernel terms, matching the double-sum
    form of the estimator; tiny negative rounding residue is clamped to 0.
    """
    base = resolve_bandwidth(spec, fs, ft)
    k_ss = kernel_matrix(fs, fs, spec, base)
    k_tt = kernel_matrix(ft, ft, spec, base)
    k_st = kernel_matrix(fs, ft, spec, base)
    raw = k_ss.mean() + k_tt.mean() - 2.0 * k_st.mean()
    return LossValue(torch.clamp(raw, min=0.0), {"raw": _f(raw)})


def subdomain_weights(y: torch.Tensor) -> torch.Tensor:
    """Per-class sample weights: column-normalize a (n, C) label matrix.

    ``y`` is one-hot true labels on the source side or predicted
    probabilities on the target side. Classes with zero batch mass get an
    all-zero column; active columns sum to 1.
    """
    if y.ndim != 2:
        raise ShapeError(f"expected (n, C) label matrix, got shape {tuple(y.shape)}")
    mass = y.sum(dim=0, keepdim=True)
    return torch.where(mass > 0, y / mass.clamp(min=torch.finfo(y.dtype).tiny), torch.zeros_like(y))


def lmmd_loss(
    fs: torch.Tensor,
    ft: torch.Tensor,
    ws: torch.Tensor,
    wt: torch.Tensor,
    spec: KernelSpec,
    class_count: int,
) -> LossValue:
    """Subdomain-weighted MMD averaged over the classes active in both domains.

    Per class c the kernelized term is

        w_s^c' K_ss w_s^c + w_t^c' K_tt w_t^c - 2 w_s^c' K_st w_t^c

    Classes whose weight column is all-zero on either side are skipped; if
    nothing is active in both domains the loss is 0 with ``skipped_all`` set.
    """
    if ws.shape != (fs.shape[0], class_count) or wt.shape != (ft.shape[0], class_count):
        raise ShapeError(
            f"weight shapes {tuple(ws.shape)}/{tuple(wt.shape)} do not match "
            f"features ({fs.shape[0]}/{ft.shape[0]} rows, {class_count} classes)"
        )
    active = (ws.sum(dim=0) > 0) & (wt.sum(dim=0) > 0)
    if not bool(active.any()):
        zero = fs.sum() * 0.0  # keeps dtype/device and a graph connection
        return LossValue(zero, {"skipped_all": 1.0, "active_classes": 0.0})

    base = resolve_bandwidth(spec, fs, ft)
    k_ss = kernel_matrix(fs, fs, spec, base)
    k_tt = kernel_matrix(ft, ft, spec, base)
    k_st = kernel_matrix(fs, ft, spec, base)

    components = {}
    total = None
    for c in range(class_count):
        if not bool(active[c]):
            continue
        a = ws[:, c]
        b = wt[:, c]
        term = a @ k_ss @ a + b @ k_tt @ b - 2.0 * (a @ k_st @ b)
        components[f"class_{c}"] = _f(term)
        total = term if total is None else total + term
    n_active = int(active.sum())
    value = total / n_active
    components["active_classes"] = float(n_active)
    components["skipped_all"] = 0.0
    return LossValue(value, components)


def _cmmd_term(l_mat, a_left, k_mat, a_right) -> torch.Tensor:
    return torch.trace(l_mat @ a_left @ k_mat @ a_right)


def cmmd_loss(
    fs: torch.Tensor,
    ft: torch.Tensor,
    ys: torch.Tensor,
    pt: torch.Tensor,
    feature_kernel: KernelSpec,
    label_kernel: KernelSpec | None = None,
    reg: float = 1.0,
) -> LossValue:
    """Conditional-distribution discrepancy in trace form.

        Tr(L_s A_s K_s A_s) + Tr(L_t A_t K_t A_t) - 2 Tr(L_ts A_s K_st A_t)

    with L the label kernel matrices, K the feature kernel matrices and
    A = (L + reg * I)^-1. ``ys`` is the one-hot source label matrix and
    ``pt`` the predicted target probabilities, both (n, C).
    """
    if label_kernel is None:
        label_kernel = KernelSpec.linear()
    if ys.shape[1] != pt.shape[1]:
        raise ShapeError(f"class counts differ: {ys.shape[1]} vs {pt.shape[1]}")
    n_s, n_t = fs.shape[0], ft.shape[0]
    if n_s < 1 or n_t < 1:
        raise DegenerateInputError("cmmd_loss needs at least one sample per domain")

    base = resolve_bandwidth(feature_kernel, fs, ft)
    k_s = kernel_matrix(fs, fs, feature_kernel, base)
    k_t = kernel_matrix(ft, ft, feature_kernel, base)
    k_st = kernel_matrix(fs, ft, feature_kernel, base)

    label_base = resolve_bandwidth(label_kernel, ys, pt)
    l_s = kernel_matrix(ys, ys, label_kernel, label_base)
    l_t = kernel_matrix(pt, pt, label_kernel, label_base)
    l_ts = kernel_matrix(pt, ys, label_kernel, label_base)  # (n_t, n_s)

    eye_s = torch.eye(n_s, dtype=fs.dtype, device=fs.device)
    eye_t = torch.eye(n_t, dtype=ft.dtype, device=ft.device)
    try:
        a_s = torch.linalg.inv(l_s + reg * eye_s)
        a_t = torch.linalg.inv(l_t + reg * eye_t)
    except torch.linalg.LinAlgError as exc:
        cond_s = float(torch.linalg.cond(l_s + reg * eye_s))
        cond_t = float(torch.linalg.cond(l_t + reg * eye_t))
        raise NumericError(
            f"cmmd_loss: regularized label kernel is singular "
            f"(cond_s={cond_s:.3e}, cond_t={cond_t:.3e}, reg={reg})"
        ) from exc

    term_s = _cmmd_term(l_s, a_s, k_s, a_s)
    term_t = _cmmd_term(l_t, a_t, k_t, a_t)
    term_cross = _cmmd_term(l_ts, a_s, k_st, a_t)
    value = term_s + term_t - 2.0 * term_cross
    return LossValue(
        value,
        {"source_term": _f(term_s), "target_term": _f(term_t), "cross_term": _f(term_cross)},
    )


def mutual_info_loss(pt: torch.Tensor) -> LossValue:
    """Entropy sharpening minus marginal balancing on target predictions:

        (1/n) sum_i H(p_i) - H(mean_i p_i)

    Minimizing drives per-row predictions confident while keeping the batch
    marginal spread out (it is the negative mutual information).
    """
    if pt.shape[0] < 1:
        raise DegenerateInputError("mutual_info_loss needs at least one row")
    cond = row_entropy(pt).mean()
    marginal = pt.mean(dim=0)
    marg_entropy = -torch.special.xlogy(marginal, marginal).sum()
    return LossValue(cond - marg_entropy, {"conditional": _f(cond), "marginal": _f(marg_entropy)})


def bnm_loss(pt: torch.Tensor) -> LossValue:
    """Negative batch nuclear norm -(1/B) ||P_t||_* of target predictions."""
    b = pt.shape[0]
    if b < 1:
        raise DegenerateInputError("bnm_loss needs at least one row")
    nuc = nuclear_norm(pt)
    return LossValue(-nuc / b, {"nuclear_norm": _f(nuc)})


def nwd_loss(ps: torch.Tensor, pt: torch.Tensor, mode: str = "nuclear") -> LossValue:
    """Nuclear-norm discrepancy between source and target prediction matrices.

    ``nuclear`` (default): ||P_s||_*/N_s - ||P_t||_*/N_t, the batch form with
    the task classifier reused as discriminator. ``per-sample``: mean row
    2-norm difference, the literal per-sample reading of the same objective
    (the two coincide for single-row batches).
    """
    if ps.shape[1] != pt.shape[1]:
        raise ShapeError(f"class counts differ: {ps.shape[1]} vs {pt.shape[1]}")
    if mode == "nuclear":
        s_term = nuclear_norm(ps) / ps.shape[0]
        t_term = nuclear_norm(pt) / pt.shape[0]
    elif mode == "per-sample":
        s_term = ps.norm(dim=1).mean()
        t_term = pt.norm(dim=1).mean()
    else:
        raise ShapeError(f"unknown nwd mode {mode!r}")
    return LossValue(s_term - t_term, {"source_term": _f(s_term), "target_term": _f(t_term)})
