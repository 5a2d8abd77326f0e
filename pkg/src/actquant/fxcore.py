"""Unsigned fixed-point formats, quantization codes, and dense tensors.

Everything downstream (quantizers, the inference engine, the hardware unit
models) computes on integer codes; this module pins down what a code means.
A code ``c`` in format ``(q_bits, f_bits)`` stands for the real value
``c * 2**-f_bits``, with ``c`` in ``[0, 2**q_bits - 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_Q_BITS = 16


class RangeError(ValueError):
    """A code lies outside the range its format can represent."""


def round_half_up(x):
    """floor(x + 1/2): monotone, deterministic, ties go up.

    Accepts scalars or arrays; returns Python int for scalar input,
    int64 arrays otherwise.
    """
    arr = np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)
    if np.isscalar(x) or getattr(x, "ndim", 0) == 0:
        return int(arr)
    return arr


@dataclass(frozen=True)
class FxFormat:
    """Unsigned fixed-point format: ``q_bits`` total bits, ``f_bits`` fractional."""

    q_bits: int
    f_bits: int = 0

    def __post_init__(self):
        if not 1 <= self.q_bits <= MAX_Q_BITS:
            raise ValueError(f"q_bits must be in [1, {MAX_Q_BITS}], got {self.q_bits}")
        if not 0 <= self.f_bits < self.q_bits:
            raise ValueError(
                f"f_bits must be in [0, q_bits), got f_bits={self.f_bits} q_bits={self.q_bits}"
            )

    @property
    def max_code(self) -> int:
        return (1 << self.q_bits) - 1

    @property
    def scale(self) -> float:
        return 2.0 ** -self.f_bits

    @property
    def max_value(self) -> float:
        return self.max_code * self.scale

    @property
    def code_width(self) -> int:
        # shared protocol with quant.Codebook for Tensor storage tags
        return self.q_bits


@dataclass(frozen=True)
class QCode:
    """A quantization index together with the bit width it is stored in."""

    index: int
    width: int

    def __post_init__(self):
        if self.width < 0:
            raise ValueError(f"width must be non-negative, got {self.width}")
        if not 0 <= self.index < (1 << self.width):
            raise RangeError(
                f"index {self.index} does not fit in {self.width} bits"
            )


def to_fixed(x, fmt: FxFormat):
    """Real value(s) -> integer code(s), round-half-up, saturating at both ends."""
    code = round_half_up(np.asarray(x, dtype=np.float64) * (1 << fmt.f_bits))
    clipped = np.clip(code, 0, fmt.max_code)
    if np.isscalar(x) or getattr(x, "ndim", 0) == 0:
        return int(clipped)
    return clipped


def from_fixed(code, fmt: FxFormat):
    """Integer code(s) -> real value(s). Raises RangeError on out-of-range codes."""
    arr = np.asarray(code)
    if arr.size and (arr.min() < 0 or arr.max() > fmt.max_code):
        raise RangeError(
            f"code outside [0, {fmt.max_code}] for q_bits={fmt.q_bits}"
        )
    val = arr.astype(np.float64) * fmt.scale
    if np.isscalar(code) or arr.ndim == 0:
        return float(val)
    return val


@dataclass(frozen=True)
class Tensor:
    """Dense row-major tensor: either real activation values or integer codes.

    ``storage`` is None for real-valued tensors; for code tensors it is the
    FxFormat (or a codebook) whose ``code_width`` bounds every element.
    """

    dims: tuple
    values: np.ndarray
    storage: object = None

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"dims must be positive, got {dims}")
        vals = np.asarray(self.values)
        if vals.size != int(np.prod(dims)):
            raise ValueError(
                f"values length {vals.size} != product(dims) {int(np.prod(dims))}"
            )
        if self.storage is None:
            vals = vals.astype(np.float64).reshape(dims)
            if vals.size and vals.min() < 0:
                raise ValueError("real-valued tensors must be non-negative")
        else:
            vals = vals.astype(np.int64).reshape(dims)
            hi = (1 << self.storage.code_width) - 1
            if vals.size and (vals.min() < 0 or vals.max() > hi):
                raise RangeError(
                    f"code tensor has elements outside [0, {hi}]"
                )
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def reals(cls, dims, values) -> "Tensor":
        return cls(tuple(dims), np.asarray(values), None)

    @classmethod
    def codes(cls, dims, values, storage) -> "Tensor":
        return cls(tuple(dims), np.asarray(values), storage)

    @property
    def is_codes(self) -> bool:
        return self.storage is not None
