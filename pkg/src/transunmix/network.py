"""Convolutional autoencoder with a class-token transformer for blind unmixing.

Pipeline: 1×1-conv encoder -> patch tokens + class/position tokens ->
transformer encoders with multihead self-patch attention -> class token
reshaped and upscaled into abundance maps -> linear (nonnegative) decoder.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .mixing import HsiCube
from .tensor import (
    BatchNormState,
    ConfigurationError,
    DimensionError,
    RngStream,
    Tensor,
    batch_norm2d,
    bmm,
    concat,
    conv2d,
    dropout,
    gelu,
    layer_norm,
    leaky_relu,
    matmul,
    softmax,
)


@dataclass
class ModelConfig:
    B: int
    H: int
    W: int
    R: int
    C: int = 24
    p: int = 5
    heads: int = 8
    n_encoders: int = 2
    mlp_ratio: int = 4
    dropout_rate: float = 0.2
    leaky_slope: float = 0.01
    hidden: tuple[int, int] = (128, 64)
    upscale: str = "linear"
    ln_eps: float = 1e-5
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.H % self.p or self.W % self.p:
            raise ConfigurationError(
                f"image {self.H}×{self.W} is not divisible into {self.p}×{self.p} patches"
            )
        if self.D % self.R:
            raise ConfigurationError(f"token dimension D={self.D} is not divisible by R={self.R}")
        if self.D % self.heads:
            raise ConfigurationError(f"token dimension D={self.D} is not divisible by {self.heads} heads")
        if self.n_encoders < 1:
            raise ConfigurationError("need at least one transformer encoder")
        if self.upscale not in ("linear", "learned"):
            raise ConfigurationError(f"unknown upscale mode {self.upscale!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"dropout rate {self.dropout_rate} outside [0, 1)")

    @property
    def D(self) -> int:
        return self.p * self.p * self.C

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // self.p, self.W // self.p

    @property
    def n_patches(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class ModelParams:
    """Learnable tensors by name plus the encoder batch-norm states."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    bn: dict[str, BatchNormState] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.tensors.items()
        for key, state in self.bn.items():
            yield f"{key}.weight", state.weight
            yield f"{key}.bias", state.bias

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.grad = None

    @property
    def decoder(self) -> Tensor:
        return self.tensors["decoder"]

    def clamp_decoder(self) -> None:
        np.maximum(self.tensors["decoder"].data, 0.0, out=self.tensors["decoder"].data)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every array needed to restore the model bit-exactly."""
        out = {name: t.data for name, t in self.named_parameters()}
        for key, state in self.bn.items():
            out[f"{key}.running_mean"] = state.running_mean
            out[f"{key}.running_var"] = state.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if arrays[name].shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arrays[name].shape} vs {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)
        for key, state in self.bn.items():
            state.running_mean = np.array(arrays[f"{key}.running_mean"], dtype=np.float64)
            state.running_var = np.array(arrays[f"{key}.running_var"], dtype=np.float64)

    def clone(self) -> ModelParams:
        return copy.deepcopy(self)


def _uniform(rng: RngStream, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_params(cfg: ModelConfig, seed: int = 0, endmembers: np.ndarray | None = None) -> ModelParams:
    """Randomly initialized parameters; ``endmembers`` (B×R) seeds the decoder."""
    rng = RngStream(seed).split("init")
    t: dict[str, Tensor] = {}
    bn: dict[str, BatchNormState] = {}
    widths = (cfg.B, *cfg.hidden, cfg.C)
    for i in range(3):
        c_in, c_out = widths[i], widths[i + 1]
        t[f"enc{i + 1}.weight"] = _uniform(rng, (c_out, c_in, 1, 1), c_in)
        t[f"enc{i + 1}.bias"] = _uniform(rng, (c_out,), c_in)
        bn[f"enc{i + 1}.bn"] = BatchNormState(c_out, momentum=cfg.bn_momentum, eps=cfg.bn_eps)

    D, N = cfg.D, cfg.n_tokens
    t["cls_token"] = Tensor(0.02 * rng.standard_normal((1, D)), requires_grad=True)
    t["pos_token"] = Tensor(0.02 * rng.standard_normal((N, D)), requires_grad=True)
    hidden = cfg.mlp_ratio * D
    for layer in range(cfg.n_encoders):
        pre = f"blocks.{layer}."
        for ln in ("ln1", "ln2"):
            t[pre + ln + ".weight"] = Tensor(np.ones(D), requires_grad=True)
            t[pre + ln + ".bias"] = Tensor(np.zeros(D), requires_grad=True)
        for name in ("wq", "wk", "wv", "wl"):
            t[pre + name] = _uniform(rng, (D, D), D)
        t[pre + "mlp1.weight"] = _uniform(rng, (hidden, D), D)
        t[pre + "mlp1.bias"] = _uniform(rng, (hidden,), D)
        t[pre + "mlp2.weight"] = _uniform(rng, (D, hidden), hidden)
        t[pre + "mlp2.bias"] = _uniform(rng, (D,), hidden)

    t["head.weight"] = _uniform(rng, (cfg.R, cfg.R, 3, 3), cfg.R * 9)
    t["head.bias"] = _uniform(rng, (cfg.R,), cfg.R * 9)
    if endmembers is None:
        decoder = rng.uniform(0.0, 1.0, size=(cfg.B, cfg.R))
    else:
        decoder = np.array(endmembers, dtype=np.float64)
        if decoder.shape != (cfg.B, cfg.R):
            raise DimensionError(f"decoder init {decoder.shape}, expected {(cfg.B, cfg.R)}")
    t["decoder"] = Tensor(np.maximum(decoder, 0.0), requires_grad=True)
    if cfg.upscale == "learned":
        t["upscale"] = Tensor(interpolation_matrix(D // cfg.R, cfg.H * cfg.W).T.copy(), requires_grad=True)
    return ModelParams(cfg, t, bn)


def is_norm_parameter(name: str) -> bool:
    return ".bn." in name or ".ln1." in name or ".ln2." in name


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _as_input(cube) -> Tensor:
    if isinstance(cube, HsiCube):
        return Tensor(cube.data)
    return cube if isinstance(cube, Tensor) else Tensor(cube)


def encode(cube, params: ModelParams, training: bool, rng: RngStream | None = None) -> Tensor:
    """B×H×W cube -> H×W×C features (three 1×1 conv layers)."""
    cfg = params.config
    x = _as_input(cube)
    if x.shape[0] != cfg.B:
        raise DimensionError(f"cube has {x.shape[0]} bands, model expects {cfg.B}")
    x = conv2d(x, params["enc1.weight"], params["enc1.bias"])
    x = batch_norm2d(x, params.bn["enc1.bn"], training)
    x = dropout(x, cfg.dropout_rate, training, rng)
    x = leaky_relu(x, cfg.leaky_slope)
    x = conv2d(x, params["enc2.weight"], params["enc2.bias"])
    x = batch_norm2d(x, params.bn["enc2.bn"], training)
    x = leaky_relu(x, cfg.leaky_slope)
    x = conv2d(x, params["enc3.weight"], params["enc3.bias"])
    x = batch_norm2d(x, params.bn["enc3.bn"], training)
    return x.transpose(1, 2, 0)


def patchify(features: Tensor, p: int) -> Tensor:
    """H×W×C -> N'×(p·p·C); blocks in row-major grid order."""
    H, W, C = features.shape
    if H % p or W % p:
        raise ConfigurationError(f"{H}×{W} features cannot be split into {p}×{p} patches")
    gh, gw = H // p, W // p
    blocks = features.reshape(gh, p, gw, p, C).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, p * p * C)


def unpatchify(tokens: Tensor, H: int, W: int, p: int) -> Tensor:
    gh, gw = H // p, W // p
    C = tokens.shape[1] // (p * p)
    return tokens.reshape(gh, gw, p, p, C).transpose(0, 2, 1, 3, 4).reshape(H, W, C)


def embed(x_patch: Tensor, x_cls: Tensor, x_pos: Tensor) -> Tensor:
    """Prepend the class token row and add positional tokens."""
    stacked = concat([x_cls, x_patch], axis=0)
    if stacked.shape != x_pos.shape:
        raise DimensionError(f"positional tokens {x_pos.shape} vs embedded tokens {stacked.shape}")
    return stacked + x_pos


def _linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight.T)
    return y if bias is None else y + bias


def mpa_block(tokens: Tensor, params: ModelParams, layer: int, heads: int,
              return_attention: bool = False):
    """One transformer encoder with multihead self-patch attention.

    Only the class-token row attends (query from the class token, keys and
    values from every token); patch rows are passed on layer-normalized.
    Returns N×D tokens, plus the heads×N attention weights when requested.
    """
    N, D = tokens.shape
    if D % heads:
        raise ConfigurationError(f"D={D} is not divisible by {heads} heads")
    d = D // heads
    pre = f"blocks.{layer}."
    cfg = params.config
    normed = layer_norm(tokens, params[pre + "ln1.weight"], params[pre + "ln1.bias"], cfg.ln_eps)

    q = _linear(normed[0:1], params[pre + "wq"])
    k = _linear(normed, params[pre + "wk"])
    v = _linear(normed, params[pre + "wv"])
    q_h = q.reshape(heads, 1, d)
    k_h = k.reshape(N, heads, d).transpose(1, 2, 0)
    v_h = v.reshape(N, heads, d).transpose(1, 0, 2)

    attn = softmax(bmm(q_h, k_h) * (1.0 / math.sqrt(d)), axis=-1)
    mpa = bmm(attn, v_h).reshape(1, D)
    y_cls = matmul(mpa, params[pre + "wl"]) + tokens[0:1]

    mixed = concat([y_cls, normed[1:]], axis=0)
    hidden = gelu(_linear(
        layer_norm(mixed, params[pre + "ln2.weight"], params[pre + "ln2.bias"], cfg.ln_eps),
        params[pre + "mlp1.weight"], params[pre + "mlp1.bias"],
    ))
    out = mixed + _linear(hidden, params[pre + "mlp2.weight"], params[pre + "mlp2.bias"])
    if return_attention:
        return out, attn.data.reshape(heads, N)
    return out


def interpolation_matrix(src: int, dst: int) -> np.ndarray:
    """dst×src linear-interpolation weights (endpoints aligned)."""
    if src == dst:
        return np.eye(dst)
    weights = np.zeros((dst, src))
    if src == 1:
        weights[:, 0] = 1.0
        return weights
    pos = np.arange(dst) * (src - 1) / (dst - 1) if dst > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    rows = np.arange(dst)
    weights[rows, lo] = 1.0 - frac
    weights[rows, lo + 1] += frac
    return weights


def abundance_head(cls_token: Tensor, params: ModelParams) -> Tensor:
    """1×D class token -> R×H×W abundances (softmax over R).

    Each of the R rows of length D/R is stretched to H·W samples along the
    flattened row-major pixel axis, either by fixed linear interpolation or by
    a learnable map initialized to it (``upscale="learned"``).
    """
    cfg = params.config
    D = cls_token.shape[-1]
    if D % cfg.R:
        raise ConfigurationError(f"D={D} is not divisible by R={cfg.R}")
    rows = cls_token.reshape(cfg.R, D // cfg.R)
    n = cfg.H * cfg.W
    if cfg.upscale == "learned":
        up = matmul(rows, params["upscale"])
    else:
        up = matmul(rows, Tensor(interpolation_matrix(D // cfg.R, n).T))
    maps = conv2d(up.reshape(cfg.R, cfg.H, cfg.W), params["head.weight"], params["head.bias"],
                  stride=1, padding=1)
    return softmax(maps, axis=0)


def decode(abundances: Tensor, decoder: Tensor) -> Tensor:
    """Per-pixel linear mixing with the decoder weights: R×H×W -> B×H×W."""
    R, H, W = abundances.shape
    if decoder.shape[1] != R:
        raise DimensionError(f"decoder {decoder.shape} cannot mix {R} abundance maps")
    return matmul(decoder, abundances.reshape(R, H * W)).reshape(decoder.shape[0], H, W)


@dataclass
class ForwardResult:
    I_hat: Tensor
    M: Tensor
    E_hat: np.ndarray
    attention: list[np.ndarray]


def forward(cube, params: ModelParams, training: bool = False,
            rng: RngStream | None = None) -> ForwardResult:
    cfg = params.config
    features = encode(cube, params, training, rng)
    tokens = embed(patchify(features, cfg.p), params["cls_token"], params["pos_token"])
    attention = []
    for layer in range(cfg.n_encoders):
        tokens, attn = mpa_block(tokens, params, layer, cfg.heads, return_attention=True)
        attention.append(attn)
    M = abundance_head(tokens[0:1], params)
    I_hat = decode(M, params.decoder)
    return ForwardResult(I_hat, M, params.decoder.data.copy(), attention)
