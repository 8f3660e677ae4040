"""Tiny noise-estimation networks with hand-written backpropagation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffusion import NoiseSchedule
from .errors import ModelError, TensorShapeError, TrainingDivergedError
from .tensors import Rng, Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "NoiseEstimator",
    "NoiseModel",
    "TrainConfig",
    "ActivationHook",
    "init_model",
    "forward",
    "loss_and_grads",
    "train",
    "make_toy_dataset",
    "timestep_embedding",
    "DATASET_KINDS",
    "ARCHITECTURES",
]

ARCHITECTURES = ("mlp", "conv")
DATASET_KINDS = ("gauss2d", "rings2d", "blobs8x8")
TIME_EMBED_DIM = 32
MLP_WIDTH = 128
MLP_HIDDEN_LAYERS = 3
CONV_WIDTH = 32
DIVERGENCE_LOSS = 1e6

ActivationHook = Callable[[str, Tensor], Tensor]


class NoiseEstimator(Protocol):
    """Anything that maps ``(x, t)`` to a noise estimate of the same shape."""

    io_shape: Tuple[int, int, int]

    def forward(self, x: Tensor, t: Tensor) -> Tensor:  # pragma: no cover - protocol
        ...


@dataclass
class TrainConfig:
    """Optimiser settings for :func:`train`."""

    steps: int = 5000
    batch: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    log_every: int = 50

    def validate(self) -> None:
        if self.steps < 1:
            raise ModelError(f"steps muss >= 1 sein, erhalten: {self.steps}")
        if self.batch < 1:
            raise ModelError(f"batch muss >= 1 sein, erhalten: {self.batch}")
        if not self.lr > 0:
            raise ModelError(f"lr muss > 0 sein, erhalten: {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ModelError("Momentenraten müssen in [0, 1) liegen")


@dataclass
class NoiseModel:
    """Noise-estimation network eps_theta(x_t, t)."""

    arch: str
    params: Dict[str, Tensor]
    io_shape: Tuple[int, int, int]
    time_embed_dim: int = TIME_EMBED_DIM
    history: List[Tuple[int, float]] = field(default_factory=list)

    def forward(self, x: Tensor, t: Tensor, hook: Optional[ActivationHook] = None) -> Tensor:
        return forward(self, x, t, hook=hook)

    def copy(self) -> "NoiseModel":
        return NoiseModel(
            arch=self.arch,
            params={name: value.copy() for name, value in self.params.items()},
            io_shape=self.io_shape,
            time_embed_dim=self.time_embed_dim,
            history=list(self.history),
        )

    def parameter_names(self) -> List[str]:
        return list(self.params.keys())

    def weight_names(self) -> List[str]:
        return [name for name in self.params if name.endswith(".weight")]

    def to_dict(self) -> Dict[str, object]:
        return {
            "arch": self.arch,
            "io_shape": list(self.io_shape),
            "time_embed_dim": self.time_embed_dim,
            "param_names": self.parameter_names(),
        }


# ----------------------------------------------------------------------
# construction
def init_model(
    arch: str,
    io_shape: Sequence[int],
    seed: int = 0,
    *,
    zero_init_output: bool = False,
    time_embed_dim: int = TIME_EMBED_DIM,
) -> NoiseModel:
    """Create a freshly initialised model for data of shape ``(C, H, W)``."""

    if arch not in ARCHITECTURES:
        raise ModelError(f"Unbekannte Architektur '{arch}'")
    shape = tuple(int(dim) for dim in io_shape)
    if len(shape) != 3 or any(dim <= 0 for dim in shape):
        raise TensorShapeError("init_model", shape)
    if time_embed_dim % 2:
        raise ModelError("time_embed_dim muss gerade sein")
    rng = Rng(seed)
    channels, height, width = shape
    layers: List[Tuple[str, Tuple[int, ...], int]] = []
    if arch == "mlp":
        dims = [channels * height * width + time_embed_dim] + [MLP_WIDTH] * MLP_HIDDEN_LAYERS
        for index in range(MLP_HIDDEN_LAYERS):
            layers.append((f"fc{index + 1}", (dims[index], dims[index + 1]), dims[index]))
        layers.append(("out", (MLP_WIDTH, channels * height * width), MLP_WIDTH))
    else:
        layers.append(("conv1", (CONV_WIDTH, channels, 3, 3), channels * 9))
        layers.append(("temb", (time_embed_dim, CONV_WIDTH), time_embed_dim))
        layers.append(("conv2", (CONV_WIDTH, CONV_WIDTH, 3, 3), CONV_WIDTH * 9))
        layers.append(("out", (channels, CONV_WIDTH, 3, 3), CONV_WIDTH * 9))

    params: Dict[str, Tensor] = {}
    for name, weight_shape, fan_in in layers:
        if name == "out" and zero_init_output:
            weight = np.zeros(weight_shape)
        else:
            weight = rng.normal(weight_shape) * math.sqrt(1.0 / fan_in)
        bias_size = weight_shape[0] if len(weight_shape) == 4 else weight_shape[1]
        params[f"{name}.weight"] = weight
        params[f"{name}.bias"] = np.zeros(bias_size)
    return NoiseModel(arch=arch, params=params, io_shape=shape, time_embed_dim=time_embed_dim)


def timestep_embedding(t: Tensor, dim: int = TIME_EMBED_DIM) -> Tensor:
    """Sinusoidal features of (possibly fractional) timesteps, shape ``[B, dim]``."""

    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


# ----------------------------------------------------------------------
# layers
def _silu(a: Tensor) -> Tensor:
    return a / (1.0 + np.exp(-a))


def _silu_grad(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def _conv_windows(x: Tensor) -> Tensor:
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return sliding_window_view(padded, (3, 3), axis=(2, 3))


def _conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tuple[Tensor, Tensor]:
    windows = _conv_windows(x)
    out = np.einsum("bchwij,ocij->bohw", windows, weight, optimize=True)
    return out + bias[None, :, None, None], windows


def _conv2d_backward(windows: Tensor, grad_out: Tensor, weight: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    grad_weight = np.einsum("bchwij,bohw->ocij", windows, grad_out, optimize=True)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    flipped = weight[:, :, ::-1, ::-1]
    grad_x = np.einsum("bohwij,ocij->bchw", _conv_windows(grad_out), flipped, optimize=True)
    return grad_x, grad_weight, grad_bias


def _identity_hook(name: str, value: Tensor) -> Tensor:
    return value


def _check_input(model: NoiseModel, x: Tensor, t: Tensor) -> Tuple[Tensor, Tensor]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.io_shape):
        raise TensorShapeError("forward", x.shape, (-1,) + tuple(model.io_shape))
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1 and x.shape[0] != 1:
        t = np.full(x.shape[0], float(t[0]))
    if t.shape[0] != x.shape[0]:
        raise TensorShapeError("forward (Zeitschritte)", x.shape, t.shape)
    return x, t


def _run(
    model: NoiseModel,
    x: Tensor,
    t: Tensor,
    weights: Mapping[str, Tensor],
    hook: ActivationHook,
) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Forward pass returning the output and the cache needed by backprop."""

    x, t = _check_input(model, x, t)
    batch = x.shape[0]
    temb = timestep_embedding(t, model.time_embed_dim)
    cache: Dict[str, Tensor] = {}
    if model.arch == "mlp":
        h = hook("fc1.input", np.concatenate([x.reshape(batch, -1), temb], axis=1))
        for index in range(MLP_HIDDEN_LAYERS):
            name = f"fc{index + 1}"
            if index:
                h = hook(f"{name}.input", h)
            cache[f"{name}.input"] = h
            a = h @ weights[f"{name}.weight"] + weights[f"{name}.bias"]
            cache[f"{name}.pre"] = a
            h = _silu(a)
        h = hook("out.input", h)
        cache["out.input"] = h
        out = h @ weights["out.weight"] + weights["out.bias"]
        return out.reshape(x.shape), cache

    h = hook("conv1.input", x)
    a1, cache["conv1.windows"] = _conv2d(h, weights["conv1.weight"], weights["conv1.bias"])
    e_in = hook("temb.input", temb)
    cache["temb.input"] = e_in
    e = e_in @ weights["temb.weight"] + weights["temb.bias"]
    a1 = a1 + e[:, :, None, None]
    cache["conv1.pre"] = a1
    h = hook("conv2.input", _silu(a1))
    a2, cache["conv2.windows"] = _conv2d(h, weights["conv2.weight"], weights["conv2.bias"])
    cache["conv2.pre"] = a2
    h = hook("out.input", _silu(a2))
    out, cache["out.windows"] = _conv2d(h, weights["out.weight"], weights["out.bias"])
    return out, cache


def _backward(model: NoiseModel, cache: Dict[str, Tensor], grad_out: Tensor) -> Dict[str, Tensor]:
    params = model.params
    grads: Dict[str, Tensor] = {}
    if model.arch == "mlp":
        batch = grad_out.shape[0]
        g = grad_out.reshape(batch, -1)
        grads["out.weight"] = cache["out.input"].T @ g
        grads["out.bias"] = g.sum(axis=0)
        g = g @ params["out.weight"].T
        for index in reversed(range(MLP_HIDDEN_LAYERS)):
            name = f"fc{index + 1}"
            g = g * _silu_grad(cache[f"{name}.pre"])
            grads[f"{name}.weight"] = cache[f"{name}.input"].T @ g
            grads[f"{name}.bias"] = g.sum(axis=0)
            if index:
                g = g @ params[f"{name}.weight"].T
        return {name: grads[name] for name in params}

    g, grads["out.weight"], grads["out.bias"] = _conv2d_backward(
        cache["out.windows"], grad_out, params["out.weight"]
    )
    g = g * _silu_grad(cache["conv2.pre"])
    g, grads["conv2.weight"], grads["conv2.bias"] = _conv2d_backward(
        cache["conv2.windows"], g, params["conv2.weight"]
    )
    g = g * _silu_grad(cache["conv1.pre"])
    g_e = g.sum(axis=(2, 3))
    grads["temb.weight"] = cache["temb.input"].T @ g_e
    grads["temb.bias"] = g_e.sum(axis=0)
    _, grads["conv1.weight"], grads["conv1.bias"] = _conv2d_backward(
        cache["conv1.windows"], g, params["conv1.weight"]
    )
    return {name: grads[name] for name in params}


def forward(
    model: NoiseModel,
    x: Tensor,
    t: Tensor,
    *,
    weights: Optional[Mapping[str, Tensor]] = None,
    hook: Optional[ActivationHook] = None,
) -> Tensor:
    """Evaluate the network on ``x[B, C, H, W]`` at timesteps ``t[B]``.

    *weights* replaces the stored parameters (used for fake-quantized
    weights) and *hook* sees every activation quantization point.
    """

    out, _ = _run(model, x, t, weights or model.params, hook or _identity_hook)
    return out


def loss_and_grads(
    model: NoiseModel,
    x0_batch: Tensor,
    t_batch: Tensor,
    eps_batch: Tensor,
    schedule: NoiseSchedule,
) -> Tuple[float, Dict[str, Tensor]]:
    """Simplified DDPM objective mean((eps - eps_theta(x_t, t))^2) and its gradients."""

    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    eps_batch = np.asarray(eps_batch, dtype=np.float64)
    if x0_batch.shape != eps_batch.shape:
        raise TensorShapeError("loss_and_grads", x0_batch.shape, eps_batch.shape)
    t_index = np.asarray(t_batch).reshape(-1).astype(np.int64)
    if t_index.shape[0] != x0_batch.shape[0]:
        raise TensorShapeError("loss_and_grads (Zeitschritte)", x0_batch.shape, t_index.shape)
    if np.any(t_index < 0) or np.any(t_index >= schedule.T):
        raise ModelError("Zeitschritte außerhalb des Zeitplans")
    alpha_bar = schedule.alpha_bar[t_index].reshape(-1, 1, 1, 1)
    x_t = np.sqrt(alpha_bar) * x0_batch + np.sqrt(1.0 - alpha_bar) * eps_batch
    prediction, cache = _run(model, x_t, t_index, model.params, _identity_hook)
    residual = prediction - eps_batch
    loss = float(np.mean(residual * residual))
    if not math.isfinite(loss):
        raise TrainingDivergedError(
            f"Verlust ist nicht endlich (max |eps_theta| = {np.nanmax(np.abs(prediction)):.3g})"
        )
    grads = _backward(model, cache, 2.0 * residual / residual.size)
    return loss, grads


def train(
    model: NoiseModel,
    dataset: Tensor,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
) -> NoiseModel:
    """Train a copy of *model* with Adam on the simplified objective.

    The returned model carries ``history`` as ``(step, window mean loss)``.
    """

    cfg.validate()
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 4 or dataset.shape[0] < 1:
        raise ModelError("Datensatz ist leer oder hat eine ungültige Form")
    if tuple(dataset.shape[1:]) != tuple(model.io_shape):
        raise TensorShapeError("train", dataset.shape[1:], model.io_shape)

    trained = model.copy()
    trained.history = []
    rng = Rng(cfg.seed)
    first = {name: np.zeros_like(value) for name, value in trained.params.items()}
    second = {name: np.zeros_like(value) for name, value in trained.params.items()}
    window: List[float] = []
    logger.info(
        "Training %s-Modell: %d Schritte, Batch %d, lr %.2g", trained.arch, cfg.steps, cfg.batch, cfg.lr
    )

    for step in range(1, cfg.steps + 1):
        index = rng.integers(0, dataset.shape[0], cfg.batch)
        t_batch = rng.integers(0, schedule.T, cfg.batch)
        eps = rng.normal((cfg.batch,) + tuple(model.io_shape))
        loss, grads = loss_and_grads(trained, dataset[index], t_batch, eps, schedule)
        if loss > DIVERGENCE_LOSS:
            raise TrainingDivergedError(f"Training divergiert in Schritt {step}: Verlust {loss:.3g}")
        _adam_update(trained.params, grads, first, second, step, cfg)
        window.append(loss)
        if len(window) == cfg.log_every or step == cfg.steps:
            mean_loss = float(np.mean(window))
            trained.history.append((step, mean_loss))
            logger.debug("Schritt %d: Verlust %.5f", step, mean_loss)
            window = []

    logger.info("Training beendet, letzter Fensterverlust %.5f", trained.history[-1][1])
    return trained


def _adam_update(
    params: Dict[str, Tensor],
    grads: Mapping[str, Tensor],
    first: Dict[str, Tensor],
    second: Dict[str, Tensor],
    step: int,
    cfg: TrainConfig,
) -> None:
    correction1 = 1.0 - cfg.beta1**step
    correction2 = 1.0 - cfg.beta2**step
    for name, grad in grads.items():
        first[name] = cfg.beta1 * first[name] + (1.0 - cfg.beta1) * grad
        second[name] = cfg.beta2 * second[name] + (1.0 - cfg.beta2) * grad * grad
        update = (first[name] / correction1) / (np.sqrt(second[name] / correction2) + cfg.adam_eps)
        params[name] = params[name] - cfg.lr * update
        if not np.all(np.isfinite(params[name])):
            raise TrainingDivergedError(f"Parameter {name} ist nach Schritt {step} nicht endlich")


# ----------------------------------------------------------------------
# datasets
def make_toy_dataset(kind: str, n: int, seed: int = 0) -> Tensor:
    """Desk-scale training data: 2-D point clouds or 8x8 blob images."""

    if n < 1:
        raise ModelError(f"n muss >= 1 sein, erhalten: {n}")
    rng = Rng(seed)
    if kind == "gauss2d":
        centers = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
        which = rng.integers(0, 4, n)
        points = centers[which] + 0.15 * rng.normal((n, 2))
        return points.reshape(n, 2, 1, 1)
    if kind == "rings2d":
        radii = np.where(rng.integers(0, 2, n) == 0, 0.5, 1.0)
        angle = 2.0 * np.pi * rng.uniform(n)
        radius = radii + 0.05 * rng.normal((n,))
        points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        return points.reshape(n, 2, 1, 1)
    if kind == "blobs8x8":
        grid = np.arange(8, dtype=np.float64)
        rows, cols = np.meshgrid(grid, grid, indexing="ij")
        centers = 1.5 + 4.0 * rng.uniform(2 * n).reshape(n, 2)
        widths = 0.8 + 0.8 * rng.uniform(n)
        dist2 = (rows[None] - centers[:, 0, None, None]) ** 2 + (cols[None] - centers[:, 1, None, None]) ** 2
        images = 2.0 * np.exp(-dist2 / (2.0 * widths[:, None, None] ** 2)) - 1.0
        images = images + 0.05 * rng.normal((n, 8, 8))
        return np.clip(images, -1.0, 1.0).reshape(n, 1, 8, 8)
    raise ModelError(f"Unbekannter Datensatz '{kind}'")
