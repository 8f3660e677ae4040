"""Dense float64 tensor helpers and the deterministic random source.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order.  The helpers in this module validate shapes the way the rest of
the toolkit expects and raise :class:`~tacq.errors.TensorShapeError` with
both shapes on mismatch.  Image-like tensors follow the ``(batch, C, H, W)``
axis convention.
"""
from __future__ import annotations

import hashlib
import logging
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import TensorShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "Rng",
    "as_tensor",
    "elementwise",
    "reduce",
    "matmul",
    "concat",
    "randn",
    "derive_seed",
    "ELEMENTWISE_OPS",
    "REDUCE_OPS",
]

Tensor = np.ndarray
Scalar = Union[int, float]
Shape = Tuple[int, ...]

ELEMENTWISE_OPS = ("add", "sub", "mul", "div", "scale", "abs", "square", "sqrt")
REDUCE_OPS = ("sum", "mean", "max", "min")
_UNARY_OPS = {"abs", "square", "sqrt"}
_SEED_MASK = (1 << 64) - 1


def as_tensor(data: object, *, allow_nonfinite: bool = False) -> Tensor:
    """Return *data* as a contiguous float64 array, rejecting non-finite values."""

    array = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    if any(dim <= 0 for dim in array.shape):
        raise TensorShapeError("as_tensor", array.shape)
    if not allow_nonfinite and not np.all(np.isfinite(array)):
        raise TensorShapeError("as_tensor (nicht endliche Werte)", array.shape)
    return array


def elementwise(op: str, a: Tensor, b: Union[Tensor, Scalar, None] = None) -> Tensor:
    """Apply a pointwise operation; *b* must match ``a.shape`` or be a scalar.

    Division follows IEEE semantics; callers own their zero-denominator policy.
    """

    if op not in ELEMENTWISE_OPS:
        raise ValueError(f"Unbekannte Operation '{op}'")
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY_OPS:
        if op == "abs":
            return np.abs(a)
        if op == "square":
            return np.square(a)
        return np.sqrt(a)

    if b is None:
        raise ValueError(f"Operation '{op}' benötigt einen zweiten Operanden")
    if np.ndim(b) == 0:
        other: Union[Tensor, float] = float(b)  # type: ignore[arg-type]
    else:
        other = np.asarray(b, dtype=np.float64)
        if other.shape != a.shape:
            raise TensorShapeError(op, a.shape, other.shape)
    if op == "scale":
        if not isinstance(other, float):
            raise TensorShapeError(op, a.shape, np.shape(other))
        return a * other
    if op == "add":
        return a + other
    if op == "sub":
        return a - other
    if op == "mul":
        return a * other
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / other


def reduce(op: str, a: Tensor, axes: Optional[Iterable[int]] = None) -> Tensor:
    """Reduce *a* over *axes* (all axes when ``None``); reduced dimensions are removed."""

    if op not in REDUCE_OPS:
        raise ValueError(f"Unbekannte Reduktion '{op}'")
    a = np.asarray(a, dtype=np.float64)
    axis: Optional[Tuple[int, ...]] = None
    if axes is not None:
        axis = tuple(sorted(set(int(item) for item in axes)))
        for item in axis:
            if not -a.ndim <= item < a.ndim:
                raise TensorShapeError(f"{op} über Achse {item}", a.shape)
    if op == "sum":
        return np.asarray(np.sum(a, axis=axis))
    if a.size == 0:
        raise TensorShapeError(op, a.shape)
    if op == "mean":
        return np.asarray(np.mean(a, axis=axis))
    if op == "max":
        return np.asarray(np.max(a, axis=axis))
    return np.asarray(np.min(a, axis=axis))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard rank-2 matrix product."""

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorShapeError("matmul", a.shape, b.shape)
    return a @ b


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along *axis*; all other dimensions must agree."""

    arrays = [np.asarray(item, dtype=np.float64) for item in tensors]
    if not arrays:
        raise ValueError("concat benötigt mindestens einen Tensor")
    reference = arrays[0]
    for other in arrays[1:]:
        if other.ndim != reference.ndim or any(
            left != right
            for dim, (left, right) in enumerate(zip(reference.shape, other.shape))
            if dim != axis % reference.ndim
        ):
            raise TensorShapeError("concat", reference.shape, other.shape)
    return np.concatenate(arrays, axis=axis)


def derive_seed(seed: int, label: str) -> int:
    """Derive an independent 64-bit child seed from *seed* and a text label."""

    digest = hashlib.blake2b(digest_size=8)
    digest.update(int(seed & _SEED_MASK).to_bytes(8, "little", signed=False))
    digest.update(label.encode("utf-8"))
    return int.from_bytes(digest.digest(), "little", signed=False)


class Rng:
    """Counter-based random source with Box-Muller Gaussian sampling.

    Uniforms come from the Philox counter-based bit generator keyed by the
    seed, so the sample stream depends only on the seed and on how many
    values were drawn before.  Rng instances are single-owner; parallel work
    should use :meth:`spawn` to obtain independent children.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed) & _SEED_MASK
        self._generator = np.random.Generator(np.random.Philox(key=self.seed))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    @property
    def counter(self) -> int:
        """Current Philox block counter (advances as values are drawn)."""

        state = self._generator.bit_generator.state["state"]["counter"]
        return int(state[0])

    def spawn(self, label: str) -> "Rng":
        return Rng(derive_seed(self.seed, label))

    def uniform(self, size: int) -> Tensor:
        """Return *size* uniforms in the half-open interval (0, 1]."""

        return 1.0 - self._generator.random(int(size))

    def normal(self, shape: Sequence[int]) -> Tensor:
        shape = tuple(int(dim) for dim in shape)
        if any(dim <= 0 for dim in shape):
            raise TensorShapeError("randn", shape)
        count = int(np.prod(shape))
        pairs = (count + 1) // 2
        uniforms = self.uniform(2 * pairs)
        u1 = uniforms[0::2]
        u2 = uniforms[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        samples = np.empty(2 * pairs, dtype=np.float64)
        samples[0::2] = radius * np.cos(theta)
        samples[1::2] = radius * np.sin(theta)
        return samples[:count].reshape(shape)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""

        return self._generator.integers(low, high, size=int(size), dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator.permutation(int(n))


def randn(rng: Rng, shape: Sequence[int]) -> Tensor:
    """Draw i.i.d. standard normal samples of *shape* from *rng*."""

    return rng.normal(shape)
