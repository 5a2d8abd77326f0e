"""Activation-storage accounting.

NB is the total number of bits needed to hold one image's worth of
activations under a per-layer bit allocation: NB = sum over covered layers of
count(layer) * bits(layer), where count is the product of the layer's output
dims. NNB normalizes NB against a baseline allocation (or a directly supplied
baseline bit total), so the baseline's own NNB is exactly 1.

Counts are per single input image. A layer contributes only when the
allocation covers it, so conv-only and conv+fc allocations are both valid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .netgraph import ModelGraph

BITS_PER_MIB = 8 * (1 << 20)


def mib_to_bits(mib: float) -> float:
    return mib * BITS_PER_MIB


def activation_counts(model: ModelGraph) -> dict:
    """Single-image activation element count per weighted layer."""
    return {
        lay.name: int(np.prod(lay.output_dims))
        for lay in model.layers
        if lay.is_weighted
    }


def _bits_map(allocation) -> dict:
    # accept a BitAllocation-like object or a plain {layer: bits} mapping
    if hasattr(allocation, "bits"):
        return dict(allocation.bits)
    return dict(allocation)


@dataclass(frozen=True)
class FootprintReport:
    nb_bits: int
    counts: dict  # layer -> activation count
    bits: dict  # layer -> allocated bits
    baseline_bits: float | None = None

    @property
    def mib(self) -> float:
        return self.nb_bits / BITS_PER_MIB

    @property
    def nnb(self) -> float | None:
        if self.baseline_bits is None:
            return None
        return self.nb_bits / self.baseline_bits

    @property
    def baseline_mib(self) -> float | None:
        if self.baseline_bits is None:
            return None
        return self.baseline_bits / BITS_PER_MIB

    def to_json(self) -> dict:
        return {
            "schema": 1,
            "nb_bits": self.nb_bits,
            "mib": self.mib,
            "baseline_bits": self.baseline_bits,
            "nnb": self.nnb,
            "layers": {
                name: {"count": self.counts[name], "bits": self.bits[name]}
                for name in self.bits
            },
        }

    def render(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def network_bits(model: ModelGraph, allocation) -> int:
    """NB for one allocation; raises KeyError on a layer the model lacks."""
    counts = activation_counts(model)
    bits = _bits_map(allocation)
    unknown = sorted(set(bits) - set(counts))
    if unknown:
        raise KeyError(f"allocation names layers the model lacks: {unknown}")
    for name, b in bits.items():
        if b < 1:
            raise ValueError(f"layer '{name}': bits must be >= 1, got {b}")
    return sum(counts[name] * b for name, b in bits.items())


def footprint(model: ModelGraph, allocation, baseline=None,
              baseline_bits: float | None = None) -> FootprintReport:
    """Build a FootprintReport; the baseline may be an allocation or raw bits."""
    if baseline is not None and baseline_bits is not None:
        raise ValueError("pass baseline or baseline_bits, not both")
    if baseline is not None:
        baseline_bits = network_bits(model, baseline)
    counts = activation_counts(model)
    bits = _bits_map(allocation)
    return FootprintReport(
        nb_bits=network_bits(model, allocation),
        counts={name: counts[name] for name in bits},
        bits=bits,
        baseline_bits=baseline_bits,
    )
