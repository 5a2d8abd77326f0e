"""Bit-width selection under an accuracy budget.

Three searches, one budget contract: given a reference accuracy R and a
tolerance delta, a candidate is feasible when R - accuracy(candidate) <= delta.

* find_min_uniform_q sweeps a single uniform width over all quantizable
  layers and returns the smallest feasible q (reference: unquantized run).
* search_enq_allocation picks per-layer ENQ widths, either exhaustively on
  small instances or by greedy descent from the master width (reference:
  the all-master-bits run, the accuracy the master format itself achieves).
* search_knq_allocation sweeps a shared codebook size T, fitting codebooks
  from a calibration set at each step, and returns the smallest feasible T
  (reference: unquantized run); optional per-layer refinement afterwards.

Accuracy evaluations are memoized per (model, dataset) by allocation content,
so repeated visits to the same candidate are free and returned allocations
re-verify bit-exactly against a fresh evaluate() call.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

from . import calib
from .calib import KMeansConfig
from .footprint import activation_counts
from .fxcore import FxFormat
from .netgraph import ModelGraph, QuantConfig, evaluate
from .quant import SCHEMES, LayerQuantSpec

_LOSS_FLOOR = 1e-12  # treats zero/negative accuracy loss as "free" in greedy


class Infeasible(RuntimeError):
    """No candidate met the budget; carries the accuracy table tried."""

    def __init__(self, message: str, table=None):
        super().__init__(message)
        self.table = dict(table) if table else {}


@dataclass(frozen=True)
class SearchBudget:
    delta: float
    reference_accuracy: float | None = None  # measured when absent
    metric: int = 1  # top-k

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must be in (0, 1), got {self.delta}")
        if self.reference_accuracy is not None and not 0 <= self.reference_accuracy <= 1:
            raise ValueError(f"reference_accuracy outside [0, 1]: {self.reference_accuracy}")
        if self.metric < 1:
            raise ValueError(f"metric (top-k) must be >= 1, got {self.metric}")


@dataclass(frozen=True)
class BitAllocation:
    scheme: str
    bits: dict  # layer -> bits, insertion-ordered
    achieved_accuracy: float | None = None
    delta: float | None = None
    reference_accuracy: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme '{self.scheme}'")
        for name, b in self.bits.items():
            if not 1 <= int(b) <= 16:
                raise ValueError(f"layer '{name}': bits {b} outside [1, 16]")
        object.__setattr__(self, "bits", {k: int(v) for k, v in self.bits.items()})

    def specs(self, codebooks=None) -> dict:
        """Expand to per-layer quant specs; knq needs a codebook per layer."""
        out = {}
        for name, b in self.bits.items():
            if self.scheme == "knq":
                if codebooks is None or name not in codebooks:
                    raise ValueError(f"layer '{name}': knq allocation needs a codebook")
                out[name] = LayerQuantSpec("knq", b, codebook=codebooks[name])
            else:
                out[name] = LayerQuantSpec(self.scheme, b)
        return out


class _Evaluator:
    """Memoized accuracy evaluation for one model + dataset + master format."""

    def __init__(self, model: ModelGraph, dataset, qm: FxFormat, metric: int):
        self.model = model
        self.dataset = dataset
        self.qm = qm
        self.metric = metric
        self.cache: dict = {}
        self.evals = 0

    @staticmethod
    def _key(specs: dict):
        items = []
        for name in sorted(specs):
            s = specs[name]
            book = None if s.codebook is None else tuple(int(e) for e in s.codebook.entries)
            items.append((name, s.scheme, s.bits, book))
        return tuple(items)

    def accuracy(self, specs: dict) -> float:
        key = self._key(specs)
        if key not in self.cache:
            cfg = QuantConfig(specs=specs, qm=self.qm)
            self.cache[key] = evaluate(self.model, self.dataset, cfg, k=self.metric)
            self.evals += 1
        return self.cache[key]


@dataclass(frozen=True)
class UniformSweepResult:
    q_min: int | None  # None: nothing in range met the budget
    table: dict  # q -> accuracy
    reference: float
    delta: float


def find_min_uniform_q(model: ModelGraph, dataset, budget: SearchBudget,
                       q_range, f_bits: int = 0) -> UniformSweepResult:
    """Smallest uniform width q in [q_lo, q_hi] within delta of the reference.

    The whole range is evaluated so the result carries the full accuracy
    table, not just the winner.
    """
    q_lo, q_hi = (int(q) for q in q_range)
    if q_lo > q_hi:
        raise ValueError(f"empty q range [{q_lo}, {q_hi}]")
    if q_lo <= f_bits:
        raise ValueError(f"q_lo {q_lo} must exceed f_bits {f_bits}")
    if q_hi > 16:
        raise ValueError(f"q_hi {q_hi} exceeds the 16-bit ceiling")
    ev = _Evaluator(model, dataset, FxFormat(16, f_bits), budget.metric)
    reference = budget.reference_accuracy
    if reference is None:
        reference = ev.accuracy({})
    names = model.quantizable_layers()
    table = {}
    for q in range(q_lo, q_hi + 1):
        table[q] = ev.accuracy({n: LayerQuantSpec("uniform", q) for n in names})
    feasible = [q for q in table if reference - table[q] <= budget.delta]
    q_min = min(feasible) if feasible else None
    if q_min is not None and q_min > q_lo:
        assert reference - table[q_min - 1] > budget.delta  # minimality
    return UniformSweepResult(q_min=q_min, table=table, reference=reference,
                              delta=budget.delta)


def _enq_specs(bits: dict) -> dict:
    return {n: LayerQuantSpec("enq", b) for n, b in bits.items()}


def search_enq_allocation(model: ModelGraph, dataset, budget: SearchBudget,
                          qm: FxFormat, mode: str = "greedy",
                          max_layers: int = 4, bit_choices=None) -> BitAllocation:
    """Per-layer ENQ widths meeting the budget at minimal activation storage.

    Exhaustive mode enumerates every combination of ``bit_choices`` (default
    1..q_m) and is gated to at most ``max_layers`` quantizable layers; greedy
    mode starts every layer at q_m and repeatedly decrements the layer with
    the best storage-saved-per-accuracy-lost ratio while the budget holds.
    """
    if mode not in ("greedy", "exhaustive"):
        raise ValueError(f"mode must be greedy or exhaustive, got '{mode}'")
    names = model.quantizable_layers()
    if not names:
        raise ValueError("model has no quantizable layers")
    counts = activation_counts(model)
    ev = _Evaluator(model, dataset, qm, budget.metric)
    q_m = qm.q_bits
    start = {n: q_m for n in names}
    acc_start = ev.accuracy(_enq_specs(start))
    reference = budget.reference_accuracy
    if reference is None:
        reference = acc_start
    if reference - acc_start > budget.delta:
        raise Infeasible(
            f"even {q_m} bits on every layer misses the budget "
            f"({acc_start:.4f} vs reference {reference:.4f}, delta {budget.delta})",
            table={tuple(start.items()): acc_start},
        )

    if mode == "exhaustive":
        if len(names) > max_layers:
            raise ValueError(
                f"exhaustive mode gated to {max_layers} layers, model has {len(names)}"
            )
        choices = sorted(set(int(b) for b in (bit_choices or range(1, q_m + 1))))
        if any(b < 1 or b > q_m for b in choices):
            raise ValueError(f"bit choices outside [1, {q_m}]: {choices}")
        best = None
        table = {}
        for combo in itertools.product(choices, repeat=len(names)):
            bits = dict(zip(names, combo))
            acc = ev.accuracy(_enq_specs(bits))
            table[combo] = acc
            if reference - acc > budget.delta:
                continue
            nb = sum(counts[n] * b for n, b in bits.items())
            cand = (nb, combo, acc)
            if best is None or cand[:2] < best[:2]:
                best = cand
        if best is None:
            raise Infeasible("no bit combination met the budget", table=table)
        nb, combo, acc = best
        bits = dict(zip(names, combo))
    else:
        bits = dict(start)
        acc = acc_start
        while True:
            chosen = None
            for i, n in enumerate(names):
                if bits[n] <= 1:
                    continue
                cand = dict(bits, **{n: bits[n] - 1})
                cand_acc = ev.accuracy(_enq_specs(cand))
                if reference - cand_acc > budget.delta:
                    continue
                ratio = counts[n] / max(acc - cand_acc, _LOSS_FLOOR)
                key = (ratio, counts[n], -i)
                if chosen is None or key > chosen[0]:
                    chosen = (key, n, cand_acc)
            if chosen is None:
                break
            _, n, acc = chosen
            bits[n] -= 1
    return BitAllocation("enq", bits, achieved_accuracy=acc, delta=budget.delta,
                         reference_accuracy=reference)


@dataclass(frozen=True)
class KnqSearchResult:
    allocation: BitAllocation
    codebooks: dict  # layer -> Codebook, matching allocation.bits
    table: dict  # T -> accuracy for the uniform-T sweep
    reference: float
    delta: float


def search_knq_allocation(model: ModelGraph, dataset, budget: SearchBudget,
                          calib_set, qm: FxFormat, t_range=(1, 8),
                          pre_saturate: bool = True, refine: bool = False,
                          kmeans_iters: int = 100) -> KnqSearchResult:
    """Smallest shared codebook size T whose fitted KNQ meets the budget.

    Codebooks are fitted from ``calib_set`` activations (saturated to the
    master ceiling unless ``pre_saturate`` is off) at every candidate T, in
    ascending order, stopping at the first feasible T; with ``refine`` on,
    individual layers are then walked further down while feasibility holds.
    """
    t_lo, t_hi = (int(t) for t in t_range)
    if not 1 <= t_lo <= t_hi:
        raise ValueError(f"bad T range [{t_lo}, {t_hi}]")
    if (1 << t_hi) > (1 << qm.q_bits):
        raise ValueError(f"T {t_hi} exceeds the master width {qm.q_bits}")
    names = model.quantizable_layers()
    samples = {}
    for n in names:
        s = calib.collect(model, calib_set, n)
        samples[n] = calib.saturate(s, qm) if pre_saturate else s
    ev = _Evaluator(model, dataset, qm, budget.metric)
    reference = budget.reference_accuracy
    if reference is None:
        reference = ev.accuracy({})

    def fit(n: str, t: int):
        cfg = KMeansConfig(clusters=1 << t, max_iters=kmeans_iters)
        return calib.kmeans_fit(samples[n], cfg, qm)

    table = {}
    t_min, books = None, None
    for t in range(t_lo, t_hi + 1):
        cand_books = {n: fit(n, t) for n in names}
        specs = {n: LayerQuantSpec("knq", t, codebook=cand_books[n]) for n in names}
        acc = ev.accuracy(specs)
        table[t] = acc
        if reference - acc <= budget.delta:
            t_min, books = t, cand_books
            break
    if t_min is None:
        raise Infeasible(
            f"no T in [{t_lo}, {t_hi}] met the budget (reference {reference:.4f}, "
            f"delta {budget.delta})",
            table=table,
        )
    bits = {n: t_min for n in names}
    acc = table[t_min]

    if refine:
        counts = activation_counts(model)
        improved = True
        while improved:
            improved = False
            for n in sorted(names, key=lambda m: -counts[m]):
                if bits[n] <= 1:
                    continue
                t = bits[n] - 1
                cand_books = dict(books, **{n: fit(n, t)})
                cand_bits = dict(bits, **{n: t})
                specs = {
                    m: LayerQuantSpec("knq", cand_bits[m], codebook=cand_books[m])
                    for m in names
                }
                cand_acc = ev.accuracy(specs)
                if reference - cand_acc <= budget.delta:
                    bits, books, acc = cand_bits, cand_books, cand_acc
                    improved = True
    allocation = BitAllocation("knq", bits, achieved_accuracy=acc,
                               delta=budget.delta, reference_accuracy=reference)
    return KnqSearchResult(allocation=allocation, codebooks=books, table=table,
                           reference=reference, delta=budget.delta)


# ---------------------------------------------------------------------------
# allocation files: '# key: value' header plus one 'layer,scheme,bits' row each

def write_allocation(path, alloc: BitAllocation) -> None:
    lines = ["# allocation schema 1", f"# scheme: {alloc.scheme}"]
    for key in ("achieved_accuracy", "delta", "reference_accuracy"):
        val = getattr(alloc, key)
        if val is not None:
            lines.append(f"# {key}: {val!r}")
    for name, b in alloc.bits.items():
        lines.append(f"{name},{alloc.scheme},{b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_allocation(path) -> BitAllocation:
    meta: dict = {}
    bits: dict = {}
    schemes = set()
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            key, sep, val = body.partition(":")
            if sep and key.strip() in ("scheme", "achieved_accuracy", "delta",
                                       "reference_accuracy"):
                meta[key.strip()] = val.strip()
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ValueError(f"bad allocation row: {raw!r}")
        name, scheme, b = parts
        if name in bits:
            raise ValueError(f"duplicate layer '{name}' in {path}")
        bits[name] = int(b)
        schemes.add(scheme)
    if not bits:
        raise ValueError(f"no allocation rows in {path}")
    if len(schemes) > 1:
        raise ValueError(f"mixed schemes in {path}: {sorted(schemes)}")
    scheme = meta.get("scheme", schemes.pop() if schemes else None)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme '{scheme}' in {path}")

    def opt_float(key):
        return float(meta[key]) if key in meta else None

    return BitAllocation(
        scheme=scheme, bits=bits,
        achieved_accuracy=opt_float("achieved_accuracy"),
        delta=opt_float("delta"),
        reference_accuracy=opt_float("reference_accuracy"),
    )
