"""The three activation quantization schemes as pure code<->value mappings.

* uniform: q-bit grid ``V_i = i * 2**-F``; quantizing saturates at the top.
* enq: per-layer E-bit codes obtained by right-shifting master-format codes
  by ``q_m - E``; equal spacing, cheap shift hardware.
* knq: per-layer codebook of 2**T fitted centroids; an activation maps to
  the largest k with ``d_k <= x`` (closed-left intervals, saturating at the
  last entry).

All mappings come in a scalar flavour returning :class:`QCode` and an array
flavour (``*_codes``) the inference engine uses on whole activation maps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fxcore import FxFormat, QCode, to_fixed

SCHEMES = ("uniform", "enq", "knq")


@dataclass(frozen=True)
class Codebook:
    """Ordered quantization points for one layer, as master-format codes."""

    layer: str
    bits: int
    entries: np.ndarray
    fmt: FxFormat

    def __post_init__(self):
        if self.bits < 1:
            raise ValueError(f"codebook bits must be >= 1, got {self.bits}")
        ent = np.asarray(self.entries, dtype=np.int64).copy()
        if ent.ndim != 1 or ent.size != (1 << self.bits):
            raise ValueError(
                f"codebook '{self.layer}' needs {1 << self.bits} entries, got {ent.size}"
            )
        if np.any(np.diff(ent) < 0):
            raise ValueError(f"codebook '{self.layer}' entries must be non-decreasing")
        if ent[0] < 0 or ent[-1] > self.fmt.max_code:
            raise ValueError(
                f"codebook '{self.layer}' entries outside [0, {self.fmt.max_code}]"
            )
        ent.setflags(write=False)
        object.__setattr__(self, "entries", ent)

    @property
    def code_width(self) -> int:
        return self.bits


@dataclass(frozen=True)
class LayerQuantSpec:
    """Scheme selection and bit width for one layer's activations."""

    scheme: str
    bits: int
    codebook: Codebook | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}', expected one of {SCHEMES}")
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.scheme == "knq":
            if self.codebook is None:
                raise ValueError("knq spec requires a codebook")
            if self.codebook.bits != self.bits:
                raise ValueError(
                    f"knq bits {self.bits} != codebook bits {self.codebook.bits}"
                )
        elif self.codebook is not None:
            raise ValueError(f"{self.scheme} spec must not carry a codebook")


# ---------------------------------------------------------------------------
# uniform

def uniform_quantize(x: float, fmt: FxFormat) -> QCode:
    """Real activation -> q-bit code on the uniform grid (saturating)."""
    return QCode(index=to_fixed(x, fmt), width=fmt.q_bits)


# ---------------------------------------------------------------------------
# enq

def enq_quantize_codes(x_codes, e_bits: int, qm: FxFormat):
    """Master-format codes -> E-bit codes: floor shift, saturate above range."""
    if not 0 <= e_bits <= qm.q_bits:
        raise ValueError(f"e_bits must be in [0, {qm.q_bits}], got {e_bits}")
    x = np.asarray(x_codes, dtype=np.int64)
    shift = qm.q_bits - e_bits
    k = np.minimum(x >> shift, (1 << e_bits) - 1)
    return k


def enq_quantize(x_code: int, e_bits: int, qm: FxFormat) -> QCode:
    if x_code < 0:
        raise ValueError(f"activation codes are non-negative, got {x_code}")
    return QCode(index=int(enq_quantize_codes(x_code, e_bits, qm)), width=e_bits)


def enq_dequantize_codes(k_codes, e_bits: int, qm: FxFormat):
    """E-bit codes -> master-format codes of their representative values."""
    k = np.asarray(k_codes, dtype=np.int64)
    return k << (qm.q_bits - e_bits)


def enq_dequantize(k: QCode, e_bits: int, qm: FxFormat) -> int:
    if k.index >= (1 << e_bits):
        raise ValueError(f"index {k.index} does not fit in {e_bits} bits")
    return int(enq_dequantize_codes(k.index, e_bits, qm))


# ---------------------------------------------------------------------------
# knq

def knq_quantize_codes(x_codes, cb: Codebook):
    """Master-format codes -> codebook indices: largest k with d_k <= x.

    Binary search over the sorted entries; inputs below d_0 map to 0 so the
    mapping is total. With duplicate entries the highest duplicate index wins,
    matching the priority-encoder view of the same rule.
    """
    x = np.asarray(x_codes, dtype=np.int64)
    k = np.searchsorted(cb.entries, x, side="right") - 1
    return np.maximum(k, 0).astype(np.int64)


def knq_quantize(x_code: int, cb: Codebook) -> QCode:
    if x_code < 0:
        raise ValueError(f"activation codes are non-negative, got {x_code}")
    return QCode(index=int(knq_quantize_codes(x_code, cb)), width=cb.bits)


def knq_dequantize_codes(k_codes, cb: Codebook):
    k = np.asarray(k_codes, dtype=np.int64)
    return cb.entries[k]


def knq_dequantize(k: QCode, cb: Codebook) -> int:
    if k.index >= (1 << cb.bits):
        raise ValueError(f"index {k.index} does not fit in {cb.bits} bits")
    return int(cb.entries[k.index])


def knq_quantize_nearest_codes(x_codes, cb: Codebook):
    """Experimental variant: nearest centroid, ties to the lower index.

    This is the assignment the clustering objective optimizes, not the
    interval rule used everywhere else; kept for side-by-side comparison only.
    """
    x = np.asarray(x_codes, dtype=np.int64)
    # boundary between neighbouring centroids; a point at the midpoint is
    # equidistant and must go to the lower index, i.e. stay left of the cut
    mid2 = cb.entries[:-1] + cb.entries[1:]  # 2 * midpoint, exact in ints
    k = np.searchsorted(mid2, 2 * x, side="left")
    return k.astype(np.int64)


# ---------------------------------------------------------------------------
# quantize -> dequantize round trips on master-format code arrays

def requantize_codes(codes, spec: LayerQuantSpec, qm: FxFormat):
    """Apply one scheme's quantize-then-dequantize to master-format codes.

    Returns master-format codes again; this is the value path the inference
    engine inserts after each ReLU. For the uniform scheme the grid shares the
    master fractional width, so the round trip is a pure ceiling clamp; that
    requires ``bits > qm.f_bits`` for the grid format to exist.
    """
    x = np.asarray(codes, dtype=np.int64)
    if spec.scheme == "uniform":
        if spec.bits <= qm.f_bits:
            raise ValueError(
                f"uniform bits {spec.bits} must exceed master f_bits {qm.f_bits}"
            )
        return np.minimum(x, (1 << spec.bits) - 1)
    if spec.scheme == "enq":
        if spec.bits > qm.q_bits:
            raise ValueError(f"enq bits {spec.bits} exceed master width {qm.q_bits}")
        return enq_dequantize_codes(enq_quantize_codes(x, spec.bits, qm), spec.bits, qm)
    return knq_dequantize_codes(knq_quantize_codes(x, spec.codebook), spec.codebook)


def quantize_codes(codes, spec: LayerQuantSpec, qm: FxFormat):
    """Stored (low-width) codes for master-format activations under one scheme."""
    x = np.asarray(codes, dtype=np.int64)
    if spec.scheme == "uniform":
        if spec.bits <= qm.f_bits:
            raise ValueError(
                f"uniform bits {spec.bits} must exceed master f_bits {qm.f_bits}"
            )
        return np.minimum(x, (1 << spec.bits) - 1)
    if spec.scheme == "enq":
        return enq_quantize_codes(x, spec.bits, qm)
    return knq_quantize_codes(x, spec.codebook)


# ---------------------------------------------------------------------------
# codebook files: one `layer,bits,d_0,...,d_{2^T-1}` row per layer

def fitting_format(entries) -> FxFormat:
    """Smallest integer-valued FxFormat whose range covers the entries."""
    top = int(np.max(entries)) if len(entries) else 0
    return FxFormat(q_bits=max(top.bit_length(), 1), f_bits=0)


def read_codebooks(path, fmt: FxFormat | None = None) -> dict[str, Codebook]:
    """Load a codebook table; rows keep file order. '#' lines are comments.

    When ``fmt`` is None each codebook gets the smallest integer format that
    holds its entries (the shipped reference tables top out at 4096, one past
    a 12-bit code, so they land in a 13-bit container).
    """
    books: dict[str, Codebook] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].lstrip().startswith("#"):
                continue
            layer, bits = row[0].strip(), int(row[1])
            entries = np.array([int(v) for v in row[2:]], dtype=np.int64)
            if entries.size != (1 << bits):
                raise ValueError(
                    f"row '{layer}': expected {1 << bits} entries, got {entries.size}"
                )
            cb_fmt = fmt if fmt is not None else fitting_format(entries)
            if layer in books:
                raise ValueError(f"duplicate codebook row for layer '{layer}'")
            books[layer] = Codebook(layer=layer, bits=bits, entries=entries, fmt=cb_fmt)
    if not books:
        raise ValueError(f"no codebook rows found in {path}")
    return books


def write_codebooks(path, books) -> None:
    books = list(books.values()) if isinstance(books, dict) else list(books)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for cb in books:
            w.writerow([cb.layer, cb.bits, *[int(v) for v in cb.entries]])
