"""Calibration: activation pooling, saturation pre-processing, codebook fitting.

The clustering solver is deliberately boring: plain Lloyd iterations on the
1-D value histogram (exactly equivalent to iterating over the raw sample,
since squared distance only sees values), evenly-spaced deterministic
initialization, and a deterministic empty-cluster respawn. No RNG anywhere,
so fits are reproducible byte-for-byte.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fxcore import FxFormat, round_half_up
from .quant import Codebook

_MONOTONE_SLACK = 1e-9  # float roundoff allowance on the objective


@dataclass(frozen=True)
class ActivationSample:
    """Pooled post-ReLU activations of one layer, as master-format codes."""

    layer: str
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.int64).ravel().copy()
        if vals.size and vals.min() < 0:
            raise ValueError(f"sample for '{self.layer}' has negative codes")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class KMeansConfig:
    clusters: int
    max_iters: int = 100
    tol: float = 1e-6
    init: str = "even"

    def __post_init__(self):
        if self.clusters < 2 or (self.clusters & (self.clusters - 1)):
            raise ValueError(
                f"clusters must be a power of two >= 2, got {self.clusters}"
            )
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be non-negative")
        if self.init != "even":
            raise ValueError(f"unknown init strategy '{self.init}'")


def collect(model, calib_set, layer: str) -> ActivationSample:
    """Pool one layer's post-ReLU, pre-quantization activations over a set.

    Runs the unquantized forward pass in the calibration set's master format;
    ordering is sample-major then row-major within each activation map.
    """
    from . import netgraph  # deferred: netgraph is heavy and only collect needs it

    if calib_set.size == 0:
        raise ValueError("calibration set is empty")
    names = model.quantizable_layers()
    if layer not in names:
        raise KeyError(
            f"layer '{layer}' is unknown or not followed by ReLU; "
            f"quantizable layers: {sorted(names)}"
        )
    cfg = netgraph.QuantConfig(specs={}, qm=calib_set.fmt)
    taps: dict[str, np.ndarray] = {}
    netgraph.forward_batch(model, calib_set.samples, cfg, tap=taps)
    return ActivationSample(layer=layer, values=taps[layer].ravel())


def saturate(s: ActivationSample, qm: FxFormat) -> ActivationSample:
    """Clamp every code above the master ceiling down to it."""
    return ActivationSample(layer=s.layer, values=np.minimum(s.values, qm.max_code))


def histogram(s: ActivationSample) -> tuple[np.ndarray, np.ndarray]:
    """Distinct codes (ascending) and their occurrence counts."""
    return np.unique(s.values, return_counts=True)


def write_histogram(s: ActivationSample, path) -> None:
    codes, counts = histogram(s)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["code", "count"])
        for c, n in zip(codes, counts):
            w.writerow([int(c), int(n)])


def _respawn_empty(centroids, assign, values, empty_idx):
    """Move empty clusters onto the points worst served by their centroid.

    Deterministic: farthest point first, distance ties broken toward the
    larger value, and each point is consumed at most once.
    """
    dist = np.abs(values - centroids[assign])
    taken = np.zeros(values.size, dtype=bool)
    for j in empty_idx:
        avail = np.flatnonzero(~taken)
        if avail.size == 0:
            break  # fewer distinct values than clusters; leave centroid be
        dmax = dist[avail].max()
        best = avail[dist[avail] == dmax].max()  # values ascending: max index = max value
        centroids[j] = values[best]
        taken[best] = True
    return centroids


def lloyd_1d(values, counts, clusters: int, max_iters: int = 100, tol: float = 1e-6):
    """Weighted 1-D Lloyd iterations; returns (centroids, objective).

    ``values`` are the distinct sample values with multiplicities ``counts``.
    The returned objective is the sum of squared distances to the nearest
    centroid, which never increases across iterations (asserted).
    """
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(counts, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty sample")
    if clusters < 2:
        raise ValueError(f"clusters must be >= 2, got {clusters}")
    vmax = v.max()
    c = np.arange(clusters, dtype=np.float64) * (vmax / (clusters - 1))

    def assign_obj(cent):
        d = np.abs(v[:, None] - cent[None, :])
        a = np.argmin(d, axis=1)  # ties resolve to the lower index
        o = float(np.sum(w * (v - cent[a]) ** 2))
        return a, o

    prev_obj = None
    for _ in range(max_iters):
        assign, obj = assign_obj(c)
        if prev_obj is not None:
            if obj > prev_obj + _MONOTONE_SLACK * max(1.0, prev_obj):
                raise AssertionError(
                    f"objective increased: {prev_obj!r} -> {obj!r}"
                )
            if prev_obj - obj <= tol * max(prev_obj, 1e-30):
                break
        prev_obj = obj
        new_c = c.copy()
        empty = []
        for j in range(clusters):
            mask = assign == j
            wj = w[mask].sum()
            if wj > 0:
                new_c[j] = np.sum(w[mask] * v[mask]) / wj
            else:
                empty.append(j)
        if empty:
            new_c = _respawn_empty(new_c, assign, v, empty)
        if np.array_equal(new_c, c):
            break
        c = new_c
    _, obj = assign_obj(c)
    if prev_obj is not None and obj > prev_obj + _MONOTONE_SLACK * max(1.0, prev_obj):
        raise AssertionError(f"objective increased: {prev_obj!r} -> {obj!r}")
    return c, obj


def kmeans_fit(s: ActivationSample, cfg: KMeansConfig, qm: FxFormat) -> Codebook:
    """Fit a codebook of ``cfg.clusters`` centroids to one layer's sample.

    Centroids stay in real arithmetic across iterations and are rounded to
    master-format codes only at the very end, then sorted.
    """
    if s.values.size == 0:
        raise ValueError(f"empty sample for layer '{s.layer}'")
    values, counts = np.unique(s.values, return_counts=True)
    centroids, _ = lloyd_1d(values, counts, cfg.clusters, cfg.max_iters, cfg.tol)
    entries = np.clip(round_half_up(np.sort(centroids)), 0, qm.max_code)
    bits = cfg.clusters.bit_length() - 1
    return Codebook(layer=s.layer, bits=bits, entries=entries, fmt=qm)
