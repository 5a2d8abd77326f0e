"""Behavioral models of the four activation data-conversion units.

These mirror the datapath structure of the hardware: the shift-based pair
(quantize/restore for the equal-distance scheme) is a layer-indexed mux in
front of a barrel shifter; the codebook pair is a comparator bank feeding a
priority encoder, and a mux selecting centroids on the way back. They are
functional models only, verified bit-exact against the algorithmic mappings
in :mod:`actquant.quant` by exhaustive sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fxcore import QCode


@dataclass(frozen=True)
class EnqUnitConfig:
    """Shift-select table for the equal-distance units.

    ``shift_table`` maps a convolutional layer index to the right/left shift
    amount ``q_m - E`` programmed for that layer; ``qm_bits`` is the width of
    the fixed-point side's wire.
    """

    shift_table: dict
    qm_bits: int

    def __post_init__(self):
        if not self.shift_table:
            raise ValueError("shift table must be non-empty")
        for idx, sh in self.shift_table.items():
            if not 0 <= sh <= self.qm_bits:
                raise ValueError(
                    f"shift {sh} for layer index {idx} outside [0, {self.qm_bits}]"
                )

    @property
    def distinct_shifts(self) -> int:
        return len(set(self.shift_table.values()))


@dataclass(frozen=True)
class KnqUnitConfig:
    """Centroid ROM for the codebook units: sorted, one entry per code."""

    centroids: np.ndarray

    def __post_init__(self):
        cent = np.asarray(self.centroids, dtype=np.int64).copy()
        if cent.ndim != 1 or cent.size < 1 or (cent.size & (cent.size - 1)):
            raise ValueError(f"centroid count must be a power of two, got {cent.size}")
        if np.any(np.diff(cent) < 0):
            raise ValueError("centroids must be sorted ascending")
        cent.setflags(write=False)
        object.__setattr__(self, "centroids", cent)

    @property
    def m(self) -> int:
        return int(self.centroids.size)

    @property
    def code_bits(self) -> int:
        return self.m.bit_length() - 1


def _shift_for(l_idx: int, cfg: EnqUnitConfig) -> int:
    try:
        return cfg.shift_table[l_idx]
    except KeyError:
        raise KeyError(f"layer index {l_idx} not in shift table") from None


def qe_unit(w1: int, l_idx: int, cfg: EnqUnitConfig) -> QCode:
    """Quantize unit, shift flavour: mux-selected right shift of a q_m-bit code."""
    if not 0 <= w1 < (1 << cfg.qm_bits):
        raise ValueError(f"w1 {w1} is not a {cfg.qm_bits}-bit code")
    a = _shift_for(l_idx, cfg)
    e_bits = cfg.qm_bits - a
    k = min(w1 >> a, (1 << e_bits) - 1)
    return QCode(index=k, width=e_bits)


def ce_unit(w2: QCode, l_idx: int, cfg: EnqUnitConfig) -> int:
    """Conversion unit, shift flavour: left shift back to a q_m-bit code."""
    a = _shift_for(l_idx, cfg)
    e_bits = cfg.qm_bits - a
    if w2.index >= (1 << e_bits):
        raise ValueError(f"w2 index {w2.index} does not fit in {e_bits} bits")
    return w2.index << a


def qk_unit(w1: int, cfg: KnqUnitConfig) -> QCode:
    """Quantize unit, codebook flavour: comparator bank + priority encoder.

    All M comparators evaluate ``w1 >= d_k`` in parallel (a thermometer
    vector); the encoder emits the highest asserted index, 0 when none fires.
    """
    if w1 < 0:
        raise ValueError(f"w1 must be non-negative, got {w1}")
    thermo = w1 >= cfg.centroids  # one bit per comparator
    idx = 0
    for k in range(cfg.m):  # walking priority encoder, highest index wins
        if thermo[k]:
            idx = k
    return QCode(index=idx, width=cfg.code_bits)


def ck_unit(w2: QCode, cfg: KnqUnitConfig) -> int:
    """Conversion unit, codebook flavour: mux selecting the stored centroid."""
    if not 0 <= w2.index < cfg.m:
        raise ValueError(f"w2 index {w2.index} outside [0, {cfg.m})")
    return int(cfg.centroids[w2.index])
