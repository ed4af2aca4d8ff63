"""VCA endmember extraction, FCLSU abundance estimation, alignment and metrics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment, nnls

from .mixing import AbundanceCube, EndmemberMatrix
from .tensor import DimensionError, RngStream


class DegenerateDataError(ValueError):
    """The data do not span enough dimensions for the requested endmembers."""


class ConditioningError(ValueError):
    """The endmember matrix is rank deficient."""


# ---------------------------------------------------------------------------
# VCA
# ---------------------------------------------------------------------------


def estimate_snr(Y: np.ndarray, mean: np.ndarray, x_p: np.ndarray) -> float:
    """VCA's subspace SNR estimate in dB (inf for noiseless data)."""
    L, n = Y.shape
    R = x_p.shape[0]
    p_y = np.sum(Y**2) / n
    p_x = np.sum(x_p**2) / n + np.sum(mean**2)
    num = p_x - R / L * p_y
    den = p_y - p_x
    if den <= 1e-12 * p_y:
        return np.inf
    if num <= 0:
        return -np.inf
    return float(10.0 * np.log10(num / den))


def snr_threshold(R: int) -> float:
    return 15.0 + 10.0 * np.log10(R)


def vca_select(Y: np.ndarray, R: int, seed: int = 0, snr_db: float | None = None) -> np.ndarray:
    """Indices of the R pixels chosen by vertex component analysis.

    Y is B×n. ``snr_db`` overrides the internal SNR estimate.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2:
        raise DimensionError(f"VCA expects a B×n matrix, got {Y.shape}")
    L, n = Y.shape
    if not (2 <= R <= n) or R > L:
        raise ValueError(f"VCA needs 2 <= R <= min(n, B); got R={R}, B={L}, n={n}")
    if not np.all(np.isfinite(Y)):
        raise ValueError("VCA input contains non-finite values")

    y_m = Y.mean(axis=1, keepdims=True)
    Y_o = Y - y_m
    if np.linalg.matrix_rank(Y_o) < R - 1:
        raise DegenerateDataError(f"data affine rank below R-1 = {R - 1}")
    U = np.linalg.svd(Y_o @ Y_o.T / n, hermitian=True)[0][:, :R]
    x_p = U.T @ Y_o
    snr = estimate_snr(Y, y_m, x_p) if snr_db is None else snr_db

    if snr < snr_threshold(R):
        # projection onto the (R-1)-dim affine subspace, lifted by a constant row
        x = x_p[: R - 1]
        c = np.sqrt(np.max(np.sum(x**2, axis=0)))
        y = np.vstack([x, np.full((1, n), c)])
    else:
        U = np.linalg.svd(Y @ Y.T / n, hermitian=True)[0][:, :R]
        x = U.T @ Y
        u = x.mean(axis=1, keepdims=True)
        y = x / np.sum(x * u, axis=0, keepdims=True)

    rng = RngStream(seed).split("vca")
    indices = np.zeros(R, dtype=int)
    basis = np.zeros((R, R))
    basis[-1, 0] = 1.0
    for i in range(R):
        w = rng.random((R, 1))
        f = w - basis @ (np.linalg.pinv(basis) @ w)
        f /= np.linalg.norm(f)
        v = f.T @ y
        indices[i] = int(np.argmax(np.abs(v)))
        basis[:, i] = y[:, indices[i]]
    return indices


def vca(Y: np.ndarray, R: int, seed: int = 0, snr_db: float | None = None) -> EndmemberMatrix:
    idx = vca_select(Y, R, seed, snr_db)
    return EndmemberMatrix(np.maximum(np.asarray(Y, dtype=np.float64)[:, idx], 0.0))


# ---------------------------------------------------------------------------
# FCLSU
# ---------------------------------------------------------------------------


def fclsu_matrix(Y: np.ndarray, E: np.ndarray, delta_scale: float = 1e3) -> np.ndarray:
    """R×n fully constrained least-squares abundances for the columns of Y.

    Each pixel is solved with Lawson-Hanson NNLS on the system augmented by a
    heavily weighted sum-to-one row, then renormalized to sum exactly to one.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    E = np.asarray(E, dtype=np.float64)
    if Y.shape[0] != E.shape[0]:
        raise DimensionError(f"{Y.shape[0]} bands in data vs {E.shape[0]} in endmembers")
    R = E.shape[1]
    if np.linalg.matrix_rank(E) < R:
        raise ConditioningError("endmember matrix is not full column rank")
    delta = delta_scale * np.abs(E).max()
    aug = np.vstack([np.full((1, R), delta), E])
    rhs = np.empty(E.shape[0] + 1)
    rhs[0] = delta
    out = np.empty((R, Y.shape[1]))
    for j in range(Y.shape[1]):
        rhs[1:] = Y[:, j]
        a, _ = nnls(aug, rhs, maxiter=50 * R)
        total = a.sum()
        out[:, j] = a / total if total > 0 else np.full(R, 1.0 / R)
    return out


def fclsu(Y: np.ndarray, E: EndmemberMatrix | np.ndarray, height: int | None = None,
          width: int | None = None) -> AbundanceCube:
    E = E.E if isinstance(E, EndmemberMatrix) else E
    A = fclsu_matrix(Y, E)
    if height is None:
        height, width = 1, A.shape[1]
    return AbundanceCube.from_matrix(A, height, width)


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Permutation:
    """``mapping[i]`` is the estimated column aligned with reference column i."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.mapping) != list(range(len(self.mapping))):
            raise ValueError(f"not a permutation: {self.mapping}")

    def __len__(self) -> int:
        return len(self.mapping)

    def apply_columns(self, E: np.ndarray) -> np.ndarray:
        return np.asarray(E)[:, list(self.mapping)]

    def apply_rows(self, A: np.ndarray) -> np.ndarray:
        return np.asarray(A)[list(self.mapping)]


def sad_matrix(E_hat: np.ndarray, E_ref: np.ndarray) -> np.ndarray:
    """cost[i, j] = angle between reference column i and estimated column j."""
    ref = E_ref / np.linalg.norm(E_ref, axis=0)
    est = E_hat / np.linalg.norm(E_hat, axis=0)
    return np.arccos(np.clip(ref.T @ est, -1.0, 1.0))


def _as_matrix(E) -> np.ndarray:
    return E.E if isinstance(E, EndmemberMatrix) else np.asarray(E, dtype=np.float64)


def match_endmembers(E_hat, E_ref) -> Permutation:
    """Permutation of estimated columns minimizing mean SAD to the reference."""
    E_hat, E_ref = _as_matrix(E_hat), _as_matrix(E_ref)
    if E_hat.shape != E_ref.shape:
        raise DimensionError(f"cannot align {E_hat.shape} with {E_ref.shape}")
    cost = sad_matrix(E_hat, E_ref)
    R = cost.shape[0]
    if R > 8:
        rows, cols = linear_sum_assignment(cost)
        return Permutation(tuple(int(c) for c in cols[np.argsort(rows)]))
    perms = np.array(list(itertools.permutations(range(R))))
    totals = cost[np.arange(R), perms].sum(axis=1)
    return Permutation(tuple(int(c) for c in perms[int(np.argmin(totals))]))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricResult:
    per_endmember: np.ndarray
    overall: float

    @property
    def mean(self) -> float:
        return self.overall


def rmse(A_hat, A_ref) -> MetricResult:
    a = A_hat.data if isinstance(A_hat, AbundanceCube) else np.asarray(A_hat, dtype=np.float64)
    b = A_ref.data if isinstance(A_ref, AbundanceCube) else np.asarray(A_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"abundance shapes differ: {a.shape} vs {b.shape}")
    sq = ((a - b) ** 2).reshape(a.shape[0], -1)
    return MetricResult(np.sqrt(sq.mean(axis=1)), float(np.sqrt(sq.mean())))


def sad(E_hat, E_ref) -> MetricResult:
    """Per-column spectral angle in radians and its mean."""
    E_hat, E_ref = _as_matrix(E_hat), _as_matrix(E_ref)
    if E_hat.shape != E_ref.shape:
        raise DimensionError(f"endmember shapes differ: {E_hat.shape} vs {E_ref.shape}")
    n_hat = np.linalg.norm(E_hat, axis=0)
    n_ref = np.linalg.norm(E_ref, axis=0)
    if np.any(n_hat == 0) or np.any(n_ref == 0):
        raise ValueError("SAD undefined for zero spectra")
    cos = np.sum(E_hat * E_ref, axis=0) / (n_hat * n_ref)
    angles = np.arccos(np.clip(cos, -1.0, 1.0))
    return MetricResult(angles, float(angles.mean()))
