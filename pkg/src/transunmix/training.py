"""Losses, optimizer and the per-image training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .classical import vca
from .mixing import HsiCube
from .network import ModelConfig, ModelParams, forward, init_params, is_norm_parameter
from .tensor import RngStream, Tensor, arctan


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _pixels(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(x.data if isinstance(x, HsiCube) else x)
    return t.reshape(t.shape[0], -1)


def loss_re(I, I_hat) -> Tensor:
    """Squared reconstruction error summed over bands, averaged over pixels."""
    diff = _pixels(I_hat) - _pixels(I)
    return (diff * diff).sum() * (1.0 / diff.shape[1])


def loss_sad(I, I_hat, norm_floor: float = 1e-12) -> Tensor:
    """Mean spectral angle (radians) between observed and reconstructed pixels.

    Uses the half-angle form 2·atan(|u - v| / |u + v|) on unit spectra, which
    equals arccos(u·v) but keeps full precision for nearly parallel pairs.
    """
    y, y_hat = _pixels(I), _pixels(I_hat)
    u = y / (y * y).sum(axis=0).sqrt().clamp_min(norm_floor)
    v = y_hat / (y_hat * y_hat).sum(axis=0).sqrt().clamp_min(norm_floor)
    diff, both = u - v, u + v
    chord = (diff * diff).sum(axis=0).clamp_min(1e-30).sqrt()
    span = (both * both).sum(axis=0).clamp_min(norm_floor**2).sqrt()
    return (arctan(chord / span) * 2.0).mean()


def total_loss(l_re: Tensor, l_sad: Tensor, beta: float, gamma: float) -> Tensor:
    return l_re * beta + l_sad * gamma


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    beta: float = 5e3
    gamma: float = 3e-2
    epochs: int = 200
    lr0: float = 6e-3
    lr_decay_factor: float = 0.8
    lr_decay_every: int = 15
    weight_decay: float = 4e-5
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lr0 <= 0:
            raise ValueError("initial learning rate must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr decay factor must lie in (0, 1]")
        if self.epochs < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs and lr_decay_every must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``."""
        return self.lr0 * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)


# Per-dataset settings; ``R`` is the dataset's endmember count.
PROFILES: dict[str, dict] = {
    "samson": dict(p=5, C=24, R=3, beta=5e3, gamma=3e-2, epochs=200, lr0=6e-3, weight_decay=4e-5),
    "apex": dict(p=5, C=32, R=4, beta=5e3, gamma=5e-2, epochs=200, lr0=9e-3, weight_decay=4e-5),
    "wdc": dict(p=10, C=24, R=6, beta=5e3, gamma=1e-4, epochs=150, lr0=6e-3, weight_decay=3e-5),
}

MODEL_KEYS = ("R", "C", "p", "heads", "n_encoders", "mlp_ratio", "dropout_rate", "leaky_slope",
              "upscale")
TRAIN_KEYS = ("beta", "gamma", "epochs", "lr0", "lr_decay_factor", "lr_decay_every",
              "weight_decay", "seed")


def split_profile(settings: dict, cube_shape: tuple[int, int, int]) -> tuple[ModelConfig, TrainConfig]:
    """Build model and train configs from a flat settings dict and a B×H×W shape."""
    unknown = set(settings) - set(MODEL_KEYS) - set(TRAIN_KEYS)
    if unknown:
        raise ValueError(f"unknown profile keys: {sorted(unknown)}")
    B, H, W = cube_shape
    model = ModelConfig(B=B, H=H, W=W, **{k: settings[k] for k in MODEL_KEYS if k in settings})
    train = TrainConfig(**{k: settings[k] for k in TRAIN_KEYS if k in settings})
    return model, train


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with L2 weight decay added to the gradient (norm params exempt)."""

    def __init__(self, params: ModelParams, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros(t.shape) for name, t in params.named_parameters()}
        self.v = {name: np.zeros(t.shape) for name, t in params.named_parameters()}

    def step(self, lr: float) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, t in self.params.named_parameters():
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay and not is_norm_parameter(name):
                g = g + self.weight_decay * t.data
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch: list[int] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    loss_re: list[float] = field(default_factory=list)
    loss_sad: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.epoch)

    def rows(self):
        return zip(self.epoch, self.lr, self.loss, self.loss_re, self.loss_sad)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "lr", "loss", "L_RE", "L_SAD"])
            for e, lr, loss, re, sad in self.rows():
                writer.writerow([e, repr(lr), repr(loss), repr(re), repr(sad)])

    def same_trace(self, other: TrainHistory) -> bool:
        """Bitwise equality of every per-epoch column (wall time ignored)."""
        mine = {k: v for k, v in asdict(self).items() if k != "wall_time"}
        theirs = {k: v for k, v in asdict(other).items() if k != "wall_time"}
        return mine == theirs


def build_model(cube: HsiCube, cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Fresh parameters with the decoder initialized from VCA endmembers."""
    E0 = vca(cube.as_matrix(), cfg.R, seed=seed)
    return init_params(cfg, seed=seed, endmembers=E0.E)


StepCallback = Callable[[int, ModelParams, dict], None]


def train(cube: HsiCube, params: ModelParams, cfg: TrainConfig,
          callback: StepCallback | None = None) -> tuple[ModelParams, TrainHistory]:
    """Full-image training: one Adam step per epoch on the single image.

    ``params`` is updated in place and also returned.
    """
    target = Tensor(cube.data)
    optimizer = Adam(params, weight_decay=cfg.weight_decay)
    rng = RngStream(cfg.seed).split("dropout")
    history = TrainHistory()
    start = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        params.zero_grad()
        out = forward(target, params, training=True, rng=rng.split(epoch))
        l_re = loss_re(target, out.I_hat)
        l_sad = loss_sad(target, out.I_hat)
        loss = total_loss(l_re, l_sad, cfg.beta, cfg.gamma)
        values = {"loss": loss.item(), "L_RE": l_re.item(), "L_SAD": l_sad.item()}
        if not all(np.isfinite(v) for v in values.values()):
            raise NumericalError(
                f"non-finite loss at epoch {epoch}: "
                + ", ".join(f"{k}={v!r}" for k, v in values.items())
            )
        loss.backward()
        optimizer.step(lr)
        params.clamp_decoder()

        history.epoch.append(epoch)
        history.lr.append(lr)
        history.loss.append(values["loss"])
        history.loss_re.append(values["L_RE"])
        history.loss_sad.append(values["L_SAD"])
        if callback is not None:
            callback(epoch, params, values)
    history.wall_time = time.perf_counter() - start
    return params, history


def predict(cube: HsiCube, params: ModelParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eval-mode abundances (R×H×W), endmembers (B×R) and reconstruction."""
    out = forward(Tensor(cube.data), params, training=False)
    return out.M.data, out.E_hat, out.I_hat.data
