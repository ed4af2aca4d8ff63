"""Linear mixing model containers, constraint checks and synthetic scenes."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import DimensionError, RngStream


class GenerationError(RuntimeError):
    """The scene generator could not satisfy its constraints."""


@dataclass
class HsiCube:
    """B×H×W reflectance cube. ``as_matrix`` gives Y (B×n), pixels row-major."""

    data: np.ndarray
    wavelengths: np.ndarray | None = None
    band_names: list[str] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise DimensionError(f"HsiCube needs a non-empty B×H×W array, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("HsiCube contains non-finite values")
        if self.wavelengths is not None:
            self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
            if self.wavelengths.shape != (self.bands,):
                raise DimensionError(
                    f"{self.wavelengths.shape[0]} wavelengths for {self.bands} bands"
                )

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def as_matrix(self) -> np.ndarray:
        return self.data.reshape(self.bands, -1)

    @classmethod
    def from_matrix(cls, Y: np.ndarray, height: int, width: int, **kwargs) -> HsiCube:
        return cls(np.asarray(Y).reshape(Y.shape[0], height, width), **kwargs)


@dataclass
class EndmemberMatrix:
    """B×R nonnegative endmember spectra, one per column."""

    E: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.E = np.asarray(self.E, dtype=np.float64)
        if self.E.ndim != 2:
            raise DimensionError(f"endmember matrix must be B×R, got {self.E.shape}")
        if np.any(self.E < 0):
            raise ValueError("endmember matrix has negative entries")
        if np.any(np.all(self.E == 0, axis=0)):
            raise ValueError("endmember matrix has an all-zero column")
        if self.names is not None and len(self.names) != self.R:
            raise DimensionError(f"{len(self.names)} names for {self.R} endmembers")

    @property
    def bands(self) -> int:
        return self.E.shape[0]

    @property
    def R(self) -> int:
        return self.E.shape[1]

    def labels(self) -> list[str]:
        return list(self.names) if self.names else [f"em{k + 1}" for k in range(self.R)]


@dataclass
class AbundanceCube:
    """R×H×W abundance maps; ``as_matrix`` gives A (R×n)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionError(f"AbundanceCube must be R×H×W, got {self.data.shape}")

    @property
    def R(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def as_matrix(self) -> np.ndarray:
        return self.data.reshape(self.R, -1)

    @classmethod
    def from_matrix(cls, A: np.ndarray, height: int, width: int) -> AbundanceCube:
        return cls(np.asarray(A).reshape(A.shape[0], height, width))


@dataclass(frozen=True)
class ConstraintReport:
    max_neg: float
    max_sum_dev: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_neg <= self.tol and self.max_sum_dev <= self.tol


def validate(A: AbundanceCube | np.ndarray, tol: float = 1e-6) -> ConstraintReport:
    """Worst nonnegativity violation and worst sum-to-one deviation over pixels."""
    mat = A.as_matrix() if isinstance(A, AbundanceCube) else np.asarray(A).reshape(np.shape(A)[0], -1)
    max_neg = float(max(0.0, -mat.min()))
    max_sum_dev = float(np.abs(mat.sum(axis=0) - 1.0).max())
    return ConstraintReport(max_neg, max_sum_dev, tol)


def measured_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return float(10.0 * np.log10(np.sum(signal**2) / np.sum(noise**2)))


def lmm_forward(E: EndmemberMatrix, A: AbundanceCube, snr_db: float | None = None,
                rng: RngStream | None = None) -> HsiCube:
    """Y = E A (+ white Gaussian noise at exactly ``snr_db`` over the cube)."""
    if E.R != A.R:
        raise DimensionError(f"endmember count {E.R} vs abundance count {A.R}")
    signal = E.E @ A.as_matrix()
    if snr_db is not None:
        if snr_db <= 0:
            raise ValueError("snr_db must be positive")
        if rng is None:
            raise ValueError("noise requested without an RngStream")
        noise = rng.standard_normal(signal.shape)
        noise *= np.sqrt(np.sum(signal**2) / (np.sum(noise**2) * 10.0 ** (snr_db / 10.0)))
        signal = signal + noise
    return HsiCube.from_matrix(signal, A.height, A.width)


def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass
class SceneConfig:
    B: int = 64
    H: int = 32
    W: int = 32
    R: int = 3
    snr_db: float | None = 30.0
    dirichlet_alpha: float = 1.0
    smoothing_sigma: float = 0.0
    endmember_model: str = "gaussian_bumps"
    endmembers: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.snr_db is not None and self.snr_db <= 0:
            raise ValueError("snr_db must be positive")
        if self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be positive")
        if self.endmember_model not in ("gaussian_bumps", "user_supplied"):
            raise ValueError(f"unknown endmember model {self.endmember_model!r}")
        if self.endmember_model == "user_supplied" and self.endmembers is None:
            raise ValueError("user_supplied endmember model needs endmembers")


MIN_PAIRWISE_SAD = np.deg2rad(5.0)


def gaussian_bump_endmembers(B: int, R: int, rng: RngStream, max_retries: int = 100) -> np.ndarray:
    """R spectra, each a sum of 2–4 Gaussian bumps, min-max scaled to [0.05, 0.9]."""
    bands = np.arange(B, dtype=np.float64)
    for _ in range(max_retries):
        E = np.empty((B, R))
        for r in range(R):
            n_bumps = int(rng.integers(2, 5))
            centers = rng.choice(B, size=min(n_bumps, B), replace=False).astype(np.float64)
            widths = rng.uniform(0.05, 0.25, size=centers.size) * B
            heights = rng.uniform(0.3, 1.0, size=centers.size)
            s = (heights * np.exp(-0.5 * ((bands[:, None] - centers) / widths) ** 2)).sum(axis=1)
            span = s.max() - s.min()
            E[:, r] = 0.05 + 0.85 * (s - s.min()) / span if span > 0 else 0.5
        if all(
            spectral_angle(E[:, i], E[:, j]) >= MIN_PAIRWISE_SAD
            for i, j in itertools.combinations(range(R), 2)
        ):
            return E
    raise GenerationError(f"no endmember set with pairwise SAD >= 5 deg after {max_retries} tries")


def project_to_simplex_rows(A: np.ndarray) -> np.ndarray:
    """Clamp at zero and renormalize along axis 0."""
    A = np.maximum(A, 0.0)
    total = A.sum(axis=0, keepdims=True)
    bad = total <= 0
    if np.any(bad):
        A = np.where(bad, 1.0 / A.shape[0], A)
        total = A.sum(axis=0, keepdims=True)
    return A / total


def synth_scene(cfg: SceneConfig) -> tuple[HsiCube, EndmemberMatrix, AbundanceCube]:
    root = RngStream(cfg.seed)
    if cfg.endmember_model == "user_supplied":
        E = np.array(cfg.endmembers, dtype=np.float64)
        if E.shape != (cfg.B, cfg.R):
            raise DimensionError(f"supplied endmembers {E.shape}, config wants {(cfg.B, cfg.R)}")
    else:
        E = gaussian_bump_endmembers(cfg.B, cfg.R, root.split("endmembers"))

    n = cfg.H * cfg.W
    A = root.split("abundances").dirichlet(np.full(cfg.R, cfg.dirichlet_alpha), size=n).T
    if cfg.smoothing_sigma > 0:
        maps = A.reshape(cfg.R, cfg.H, cfg.W)
        maps = np.stack([gaussian_filter(m, cfg.smoothing_sigma, mode="reflect") for m in maps])
        A = project_to_simplex_rows(maps.reshape(cfg.R, n))
    else:
        A = A / A.sum(axis=0, keepdims=True)

    abundances = AbundanceCube.from_matrix(A, cfg.H, cfg.W)
    endmembers = EndmemberMatrix(E)
    cube = lmm_forward(endmembers, abundances, cfg.snr_db, root.split("noise"))
    return cube, endmembers, abundances
