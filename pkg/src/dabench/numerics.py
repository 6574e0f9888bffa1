"""Shared numeric primitives consumed by every adaptation loss.

Everything operates on plain torch tensors (rows = samples) and stays in the
dtype of its inputs, so the same code path serves float32 training and
float64 verification. All functions are pure and differentiable where a
gradient is meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateInputError, NumericError, ShapeError

# Central five factors of the 1/8..8 doubling ladder.
DEFAULT_LADDER = (0.25, 0.5, 1.0, 2.0, 4.0)

MEDIAN_FALLBACK_BANDWIDTH = 1.0


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family for the MMD-style losses.

    ``bandwidth_base`` is either the string ``"median"`` (median heuristic on
    pairwise squared distances of the batch the caller concatenates) or a
    fixed positive float. ``gaussian-multi`` sums one RBF per ladder factor:

        k(x, y) = sum_m exp(-||x - y||^2 / (2 * (base * factor_m)^2))

    ``linear`` ignores bandwidth entirely and uses plain dot products.
    """

    kind: str = "gaussian-multi"
    bandwidth_base: float | str = "median"
    ladder: tuple[float, ...] = DEFAULT_LADDER

    def __post_init__(self):
        if self.kind not in ("gaussian-multi", "linear"):
            raise ShapeError(f"unknown kernel kind {self.kind!r}")
        if not self.ladder:
            raise ShapeError("kernel ladder must be non-empty")
        if any(f <= 0 for f in self.ladder):
            raise ShapeError("kernel ladder factors must be positive")
        if isinstance(self.bandwidth_base, str):
            if self.bandwidth_base != "median":
                raise ShapeError(
                    f"bandwidth_base must be 'median' or a float, got {self.bandwidth_base!r}"
                )
        elif self.bandwidth_base <= 0:
            raise ShapeError("fixed bandwidth must be positive")

    @staticmethod
    def linear() -> "KernelSpec":
        return KernelSpec(kind="linear")

    @staticmethod
    def gaussian(bandwidth: float | str = "median", ladder=DEFAULT_LADDER) -> "KernelSpec":
        return KernelSpec(kind="gaussian-multi", bandwidth_base=bandwidth, ladder=tuple(ladder))


def pairwise_sq_dists(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Exact pairwise squared Euclidean distances, shape (n_x, n_y).

    Uses broadcast subtraction rather than the Gram-matrix expansion so that
    identical rows give an exact zero (required for the unit-diagonal and
    zero-at-identity contracts).
    """
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    diff = x.unsqueeze(1) - y.unsqueeze(0)
    return diff.pow(2).sum(-1)


def median_bandwidth(*parts: torch.Tensor, fallback: float = MEDIAN_FALLBACK_BANDWIDTH) -> float:
    """Median-heuristic bandwidth of the concatenated batch.

    Returns sqrt(median of off-diagonal pairwise squared distances). Batches
    whose points all coincide (median 0) fall back to ``fallback``. The result
    is a plain float: bandwidths are treated as per-batch constants and carry
    no gradient.
    """
    z = torch.cat([p.detach() for p in parts], dim=0)
    n = z.shape[0]
    if n < 2:
        return fallback
    sq = pairwise_sq_dists(z, z)
    off_diag = sq[~torch.eye(n, dtype=torch.bool, device=z.device)]
    med = float(off_diag.median())
    if not (med > 0.0) or med != med:  # zero, negative or NaN
        return fallback
    return med ** 0.5


def resolve_bandwidth(spec: KernelSpec, *parts: torch.Tensor) -> float | None:
    """Concrete base bandwidth for ``spec`` given the batch it will see."""
    if spec.kind == "linear":
        return None
    if spec.bandwidth_base == "median":
        return median_bandwidth(*parts)
    return float(spec.bandwidth_base)


def kernel_matrix(
    x: torch.Tensor,
    y: torch.Tensor,
    spec: KernelSpec,
    base: float | None = None,
) -> torch.Tensor:
    """Kernel matrix K[i, j] = k(x_i, y_j) for the given spec.

    For gaussian kernels the caller may pass ``base`` (e.g. resolved once on
    the concatenation of source and target); otherwise it is resolved from
    (x, y) alone.
    """
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"feature dims differ: {x.shape[1]} vs {y.shape[1]}")
    if spec.kind == "linear":
        return x @ y.T
    if base is None:
        base = resolve_bandwidth(spec, x, y)
    sq = pairwise_sq_dists(x, y)
    k = torch.zeros_like(sq)
    for factor in spec.ladder:
        sigma = base * factor
        k = k + torch.exp(-sq / (2.0 * sigma * sigma))
    return k


def covariance(f: torch.Tensor) -> torch.Tensor:
    """Unbiased feature covariance (1/(n-1)) (D^T D - (1^T D)^T (1^T D) / n).

    Raises DegenerateInputError for fewer than two rows.
    """
    if f.ndim != 2:
        raise ShapeError(f"expected a 2-D feature matrix, got shape {tuple(f.shape)}")
    n = f.shape[0]
    if n < 2:
        raise DegenerateInputError(f"covariance needs at least 2 rows, got {n}")
    col_sum = f.sum(dim=0, keepdim=True)  # (1, d)
    return (f.T @ f - (col_sum.T @ col_sum) / n) / (n - 1)


def nuclear_norm(m: torch.Tensor) -> torch.Tensor:
    """Sum of singular values (differentiable)."""
    if not torch.isfinite(m).all():
        raise NumericError("nuclear_norm: input has non-finite entries")
    return torch.linalg.svdvals(m).sum()


def row_entropy(p: torch.Tensor) -> torch.Tensor:
    """Per-row Shannon entropy in nats, with 0*log(0) taken as 0."""
    return -torch.special.xlogy(p, p).sum(dim=1)


def one_hot(labels: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """Integer labels -> one-hot matrix in the requested float dtype."""
    return torch.nn.functional.one_hot(labels.long(), num_classes).to(dtype)


def validate_probability_matrix(p: torch.Tensor, tol: float = 1e-6) -> None:
    """Check the row-stochastic invariants; raises ShapeError on violation."""
    if p.ndim != 2:
        raise ShapeError(f"expected a 2-D probability matrix, got shape {tuple(p.shape)}")
    if not torch.isfinite(p).all():
        raise NumericError("probability matrix has non-finite entries")
    if float(p.min()) < -tol or float(p.max()) > 1.0 + tol:
        raise ShapeError("probability matrix entries must lie in [0, 1]")
    row_sums = p.sum(dim=1)
    if float((row_sums - 1.0).abs().max()) > tol:
        raise ShapeError("probability matrix rows must sum to 1")
