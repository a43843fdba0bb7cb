"""Dense float32 tensor kernels and the multiply-accumulate counter.

All values are 32-bit floats; matmul reductions accumulate in 64-bit so results
do not depend on tile sizes or summation order. There is no broadcasting:
callers reshape explicitly so shape bugs surface at the boundary.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from .errors import InvalidValueError, ShapeError

# tanh-form GELU constants: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
GELU_SCALE = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_CUBIC = 0.044715


class DenseTensor:
    """Immutable n-dimensional array of float32 values in row-major order."""

    __slots__ = ("_array",)

    def __init__(self, values) -> None:
        arr = np.ascontiguousarray(values, dtype=np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got shape {arr.shape}")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "DenseTensor":
        return cls(np.zeros(shape, dtype=np.float32))

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the values."""
        return self._array

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self._array.reshape(-1)

    def tolist(self):
        return self._array.tolist()

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, DenseTensor)
            and self.shape == other.shape
            and bool(np.array_equal(self._array, other._array))
        )

    def __hash__(self):
        return hash((self.shape, self._array.tobytes()))

    def __repr__(self) -> str:
        return f"DenseTensor(shape={self.shape})"


def as_tensor(values) -> DenseTensor:
    """Pass DenseTensors through, wrap anything array-like."""
    return values if isinstance(values, DenseTensor) else DenseTensor(values)


class OpCounter:
    """Tally of fused multiply-accumulate operations in one forward pass.

    The total only ever grows. Each addition is also booked under the
    innermost active section label (see `section`), so callers can split a
    pass into named parts (projections, attention products, ...) and compare
    each part against an analytic count. One counter belongs to one forward
    pass; it is never shared across concurrent inferences.
    """

    def __init__(self) -> None:
        self.mul_adds: int = 0
        self.sections: dict[str, int] = {}
        self._label: str | None = None

    def add(self, count: int) -> None:
        if count < 0:
            raise InvalidValueError("mul-add tally cannot decrease")
        self.mul_adds += count
        if self._label is not None:
            self.sections[self._label] = self.sections.get(self._label, 0) + count

    @contextmanager
    def section(self, label: str):
        previous = self._label
        self._label = label
        try:
            yield self
        finally:
            self._label = previous

    def section_total(self, *labels: str) -> int:
        return sum(self.sections.get(label, 0) for label in labels)


def matmul(a: DenseTensor, b: DenseTensor, counter: OpCounter | None = None) -> DenseTensor:
    """Product of an m-by-k and a k-by-n matrix, accumulated in float64.

    Books m*n*k mul-adds on `counter` when given.
    """
    if len(a.shape) != 2 or len(b.shape) != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} x {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    if counter is not None:
        counter.add(m * n * k)
    product = a.array.astype(np.float64) @ b.array.astype(np.float64)
    return DenseTensor(product.astype(np.float32))


def softmax_rows(m: DenseTensor) -> DenseTensor:
    """Row-wise softmax of a 2-d matrix, stabilized by the row max."""
    if len(m.shape) != 2:
        raise ShapeError(f"softmax_rows needs a 2-d matrix, got {m.shape}")
    values = m.array
    if np.isnan(values).any():
        raise InvalidValueError("softmax_rows input contains NaN")
    shifted = values - values.max(axis=1, keepdims=True)
    exps = np.exp(shifted.astype(np.float64))
    return DenseTensor((exps / exps.sum(axis=1, keepdims=True)).astype(np.float32))


def layer_norm(
    x: DenseTensor, gain: DenseTensor, bias: DenseTensor, eps: float
) -> DenseTensor:
    """Normalize the last axis to mean 0 / variance 1, then apply gain and bias."""
    if eps <= 0:
        raise InvalidValueError(f"eps must be > 0, got {eps}")
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}"
        )
    values = x.array.astype(np.float64)
    mean = values.mean(axis=-1, keepdims=True)
    var = values.var(axis=-1, keepdims=True)
    normed = (values - mean) / np.sqrt(var + eps)
    out = normed * gain.array.astype(np.float64) + bias.array.astype(np.float64)
    return DenseTensor(out.astype(np.float32))


def gelu(x: DenseTensor) -> DenseTensor:
    """Elementwise Gaussian-error linear unit, tanh form (constants above)."""
    v = x.array.astype(np.float64)
    out = 0.5 * v * (1.0 + np.tanh(GELU_SCALE * (v + GELU_CUBIC * v**3)))
    return DenseTensor(out.astype(np.float32))
