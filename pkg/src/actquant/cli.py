"""Command-line driver: calibrate, search, eval, report, verify-hw.

Every command reads the same flag set; a TOML config file can supply any of
the same keys with flags taking precedence. All outputs are deterministic:
identical inputs produce byte-identical files (reports carry no timestamps),
so pipeline runs can be diffed directly.

Exit codes: 0 success, 2 validation problems (bad flags, missing or malformed
files), 3 runtime failures (infeasible search budgets, engine errors),
4 hardware-model verification mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import calib, footprint, hwmodel, netgraph, quant, search
from .calib import KMeansConfig
from .fxcore import FxFormat, QCode
from .search import BitAllocation, SearchBudget

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
EXIT_VERIFY = 4


class CliError(ValueError):
    """Bad invocation or bad input files; mapped to exit code 2."""


@dataclass
class RunConfig:
    """Merged flag/TOML settings for one command invocation."""

    model: str | None = None
    data: str | None = None
    calib_data: str | None = None
    calib_size: int = 100
    scheme: str | None = None
    bits: int | None = None
    alloc: str | None = None
    codebooks: str | None = None
    qm: int = 12
    fbits: int = 0
    delta: float = 0.02
    topk: int = 1
    out: str | None = None
    mode: str = "greedy"
    q_lo: int | None = None
    q_hi: int | None = None
    t_lo: int = 1
    t_hi: int = 8
    refine: bool = False
    saturate: bool = True
    baseline_alloc: str | None = None
    baseline_mib: float | None = None
    deterministic: bool = True  # seedless by construction; not a knob

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise CliError(f"delta must be in (0, 1), got {self.delta}")
        for key in ("model", "data", "calib_data", "alloc", "codebooks",
                    "baseline_alloc"):
            val = getattr(self, key)
            if val is not None and not Path(val).exists():
                raise CliError(f"--{key.replace('_', '-')}: no such path: {val}")

    @property
    def master(self) -> FxFormat:
        return FxFormat(q_bits=self.qm, f_bits=self.fbits)

    def require(self, *keys):
        missing = [k for k in keys if getattr(self, k) is None]
        if missing:
            flags = ", ".join("--" + k.replace("_", "-") for k in missing)
            raise CliError(f"missing required settings: {flags}")


def _merge_config(ns: argparse.Namespace) -> RunConfig:
    values: dict = {}
    if ns.config is not None:
        try:
            with open(ns.config, "rb") as fh:
                values.update(tomllib.load(fh))
        except FileNotFoundError as exc:
            raise CliError(f"config file not found: {ns.config}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise CliError(f"cannot parse {ns.config}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CliError(f"unknown config keys: {unknown}")
    for key, val in vars(ns).items():
        if key in known and val is not None:
            values[key] = val
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise CliError(str(exc)) from exc


def _write_or_print(cfg: RunConfig, name: str, text: str) -> None:
    if cfg.out is None:
        sys.stdout.write(text)
    else:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text)
        print(f"wrote {out / name}")


def _json_text(payload: dict) -> str:
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def _load_codebooks(path_str: str) -> dict:
    path = Path(path_str)
    if path.is_dir():
        books: dict = {}
        for child in sorted(path.glob("*.csv")):
            for name, cb in quant.read_codebooks(child).items():
                if name in books:
                    raise CliError(f"duplicate codebook for layer '{name}' under {path}")
                books[name] = cb
        if not books:
            raise CliError(f"no codebook files under {path}")
        return books
    return quant.read_codebooks(path)


def _build_specs(cfg: RunConfig, model: netgraph.ModelGraph):
    """Resolve --alloc / --scheme settings into per-layer quant specs.

    Returns (specs, bits_map, label); an empty specs dict means the
    unquantized reference run.
    """
    if cfg.alloc is not None:
        alloc = search.read_allocation(cfg.alloc)
        books = None
        if alloc.scheme == "knq":
            cfg.require("codebooks")
            books = _load_codebooks(cfg.codebooks)
        return alloc.specs(books), dict(alloc.bits), f"allocation:{Path(cfg.alloc).name}"
    if cfg.scheme is None:
        return {}, {}, "none"
    names = model.quantizable_layers()
    if cfg.scheme == "knq":
        cfg.require("codebooks")
        books = _load_codebooks(cfg.codebooks)
        missing = sorted(set(names) - set(books))
        if missing:
            raise CliError(f"codebooks missing for layers: {missing}")
        specs = {
            n: quant.LayerQuantSpec("knq", books[n].bits, codebook=books[n])
            for n in names
        }
        return specs, {n: books[n].bits for n in names}, "knq:fitted"
    cfg.require("bits")
    specs = {n: quant.LayerQuantSpec(cfg.scheme, cfg.bits) for n in names}
    return specs, {n: cfg.bits for n in names}, f"{cfg.scheme}:{cfg.bits}"


# ---------------------------------------------------------------------------
# commands

def cmd_calibrate(cfg: RunConfig) -> int:
    cfg.require("model", "data", "bits", "out")
    model = netgraph.load_model(cfg.model)
    data = netgraph.load_dataset(cfg.data, model.input_dims)
    calib_set = data.subset(cfg.calib_size)
    qm = cfg.master
    out = Path(cfg.out)
    (out / "codebooks").mkdir(parents=True, exist_ok=True)
    (out / "histograms").mkdir(parents=True, exist_ok=True)
    written = 0
    for name in model.quantizable_layers():
        try:
            sample = calib.collect(model, calib_set, name)
            calib.write_histogram(sample, out / "histograms" / f"{name}.csv")
            if cfg.saturate:
                sample = calib.saturate(sample, qm)
            book = calib.kmeans_fit(
                sample, KMeansConfig(clusters=1 << cfg.bits), qm
            )
            quant.write_codebooks(out / "codebooks" / f"{name}.csv", [book])
        except ValueError as exc:
            raise type(exc)(f"layer '{name}': {exc}") from exc
        written += 1
    print(f"calibrated {written} layers into {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    cfg.require("model", "data")
    model = netgraph.load_model(cfg.model)
    data = netgraph.load_dataset(cfg.data, model.input_dims)
    specs, bits_map, label = _build_specs(cfg, model)
    engine_cfg = netgraph.QuantConfig(specs=specs, qm=cfg.master)
    accuracy = netgraph.evaluate(model, data, engine_cfg, k=cfg.topk)
    if not bits_map:  # unquantized reference: storage at the master width
        bits_map = {n: cfg.qm for n in model.quantizable_layers()}
    baseline = None
    baseline_bits = None
    if cfg.baseline_alloc is not None:
        baseline = search.read_allocation(cfg.baseline_alloc)
    elif cfg.baseline_mib is not None:
        baseline_bits = footprint.mib_to_bits(cfg.baseline_mib)
    report = footprint.footprint(model, bits_map, baseline=baseline,
                                 baseline_bits=baseline_bits)
    payload = {
        "schema": 1,
        "model": model.name,
        "samples": data.size,
        "metric": cfg.topk,
        "quantization": label,
        "accuracy": accuracy,
        "footprint": report.to_json(),
    }
    _write_or_print(cfg, "eval_report.json", _json_text(payload))
    return EXIT_OK


def cmd_search(cfg: RunConfig) -> int:
    cfg.require("model", "data", "scheme", "out")
    model = netgraph.load_model(cfg.model)
    data = netgraph.load_dataset(cfg.data, model.input_dims)
    budget = SearchBudget(delta=cfg.delta, metric=cfg.topk)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scheme == "uniform":
        q_lo = cfg.q_lo if cfg.q_lo is not None else cfg.fbits + 1
        q_hi = cfg.q_hi if cfg.q_hi is not None else cfg.qm
        result = search.find_min_uniform_q(model, data, budget, (q_lo, q_hi),
                                           f_bits=cfg.fbits)
        payload = {
            "schema": 1, "scheme": "uniform", "q_min": result.q_min,
            "reference_accuracy": result.reference, "delta": result.delta,
            "table": {str(q): acc for q, acc in sorted(result.table.items())},
        }
        (out / "uniform_sweep.json").write_text(_json_text(payload))
        print(f"wrote {out / 'uniform_sweep.json'}")
        if result.q_min is not None:
            alloc = BitAllocation(
                "uniform", {n: result.q_min for n in model.quantizable_layers()},
                achieved_accuracy=result.table[result.q_min], delta=cfg.delta,
                reference_accuracy=result.reference,
            )
            search.write_allocation(out / "allocation.csv", alloc)
            print(f"wrote {out / 'allocation.csv'}")
        return EXIT_OK
    if cfg.scheme == "enq":
        alloc = search.search_enq_allocation(model, data, budget, cfg.master,
                                             mode=cfg.mode)
        search.write_allocation(out / "allocation.csv", alloc)
        print(f"wrote {out / 'allocation.csv'}")
        return EXIT_OK
    if cfg.scheme == "knq":
        calib_src = cfg.calib_data if cfg.calib_data is not None else cfg.data
        calib_set = netgraph.load_dataset(calib_src, model.input_dims)
        calib_set = calib_set.subset(cfg.calib_size)
        result = search.search_knq_allocation(
            model, data, budget, calib_set, cfg.master,
            t_range=(cfg.t_lo, cfg.t_hi), pre_saturate=cfg.saturate,
            refine=cfg.refine,
        )
        search.write_allocation(out / "allocation.csv", result.allocation)
        quant.write_codebooks(out / "codebooks.csv", result.codebooks)
        payload = {
            "schema": 1, "scheme": "knq",
            "t_min": min(result.allocation.bits.values()),
            "reference_accuracy": result.reference, "delta": result.delta,
            "table": {str(t): acc for t, acc in sorted(result.table.items())},
        }
        (out / "knq_sweep.json").write_text(_json_text(payload))
        for name in ("allocation.csv", "codebooks.csv", "knq_sweep.json"):
            print(f"wrote {out / name}")
        return EXIT_OK
    raise CliError(f"unknown scheme '{cfg.scheme}'")


def cmd_report(cfg: RunConfig) -> int:
    cfg.require("model", "alloc")
    model = netgraph.load_model(cfg.model)
    alloc = search.read_allocation(cfg.alloc)
    baseline = None
    baseline_bits = None
    if cfg.baseline_alloc is not None:
        baseline = search.read_allocation(cfg.baseline_alloc)
    elif cfg.baseline_mib is not None:
        baseline_bits = footprint.mib_to_bits(cfg.baseline_mib)
    report = footprint.footprint(model, alloc, baseline=baseline,
                                 baseline_bits=baseline_bits)
    _write_or_print(cfg, "footprint_report.json", report.render())
    return EXIT_OK


def cmd_verify_hw(cfg: RunConfig) -> int:
    cfg.require("codebooks")
    qm = cfg.master
    checks = []
    failure = None

    # ENQ units against every shift the master width admits
    shift_table = {i: s for i, s in enumerate(range(qm.q_bits + 1))}
    unit_cfg = hwmodel.EnqUnitConfig(shift_table=shift_table, qm_bits=qm.q_bits)
    codes = np.arange(1 << qm.q_bits, dtype=np.int64)
    qe_cases = ce_cases = qe_mism = ce_mism = 0
    for l_idx, shift in shift_table.items():
        e_bits = qm.q_bits - shift
        if e_bits == 0:
            continue  # zero-width codes carry no information; not a unit mode
        want_q = quant.enq_quantize_codes(codes, e_bits, qm)
        got_q = np.array([hwmodel.qe_unit(int(c), l_idx, unit_cfg).index for c in codes])
        bad = np.nonzero(want_q != got_q)[0]
        if bad.size and failure is None:
            failure = (f"qe_unit shift {shift} input {int(bad[0])}: "
                       f"{int(got_q[bad[0]])} != {int(want_q[bad[0]])}")
        qe_cases += int(codes.size)
        qe_mism += int(bad.size)
        kcodes = np.arange(1 << e_bits, dtype=np.int64)
        want_d = quant.enq_dequantize_codes(kcodes, e_bits, qm)
        got_d = np.array([
            hwmodel.ce_unit(QCode(int(k), e_bits), l_idx, unit_cfg)
            for k in kcodes
        ])
        bad = np.nonzero(want_d != got_d)[0]
        if bad.size and failure is None:
            failure = (f"ce_unit shift {shift} code {int(bad[0])}: "
                       f"{int(got_d[bad[0]])} != {int(want_d[bad[0]])}")
        ce_cases += int(kcodes.size)
        ce_mism += int(bad.size)
    checks.append({"unit": "qe", "cases": qe_cases, "mismatches": qe_mism})
    checks.append({"unit": "ce", "cases": ce_cases, "mismatches": ce_mism})

    # KNQ units against every shipped codebook
    books = _load_codebooks(cfg.codebooks)
    qk_cases = ck_cases = qk_mism = ck_mism = 0
    for name in sorted(books):
        cb = books[name]
        kcfg = hwmodel.KnqUnitConfig(centroids=cb.entries)
        want_q = quant.knq_quantize_codes(codes, cb)
        got_q = np.array([hwmodel.qk_unit(int(c), kcfg).index for c in codes])
        bad = np.nonzero(want_q != got_q)[0]
        if bad.size and failure is None:
            failure = (f"qk_unit {name} input {int(bad[0])}: "
                       f"{int(got_q[bad[0]])} != {int(want_q[bad[0]])}")
        qk_cases += int(codes.size)
        qk_mism += int(bad.size)
        idx = np.arange(1 << cb.bits, dtype=np.int64)
        want_d = quant.knq_dequantize_codes(idx, cb)
        got_d = np.array([
            hwmodel.ck_unit(QCode(int(k), cb.bits), kcfg) for k in idx
        ])
        bad = np.nonzero(want_d != got_d)[0]
        if bad.size and failure is None:
            failure = (f"ck_unit {name} code {int(bad[0])}: "
                       f"{int(got_d[bad[0]])} != {int(want_d[bad[0]])}")
        ck_cases += int(idx.size)
        ck_mism += int(bad.size)
    checks.append({"unit": "qk", "cases": qk_cases, "mismatches": qk_mism})
    checks.append({"unit": "ck", "cases": ck_cases, "mismatches": ck_mism})

    total = qe_mism + ce_mism + qk_mism + ck_mism
    payload = {"schema": 1, "qm": qm.q_bits, "status": "pass" if total == 0 else "fail",
               "checks": checks}
    _write_or_print(cfg, "verify_hw.json", _json_text(payload))
    if total:
        print(f"first mismatch: {failure}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------------------

_COMMANDS = {
    "calibrate": cmd_calibrate,
    "eval": cmd_eval,
    "search": cmd_search,
    "report": cmd_report,
    "verify-hw": cmd_verify_hw,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actquant",
        description="Post-training activation quantization: calibrate codebooks, "
                    "search bit widths, evaluate accuracy, account storage, and "
                    "verify the hardware conversion-unit models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML file supplying any of the flags below")
        p.add_argument("--model", help="model manifest path")
        p.add_argument("--data", help="labeled dataset directory")
        p.add_argument("--calib-data", dest="calib_data",
                       help="calibration dataset directory (default: --data)")
        p.add_argument("--calib-size", dest="calib_size", type=int,
                       help="calibration subset size (default 100)")
        p.add_argument("--scheme", choices=("uniform", "enq", "knq"))
        p.add_argument("--bits", type=int, help="uniform q / ENQ E / KNQ T")
        p.add_argument("--alloc", help="allocation file (layer,scheme,bits rows)")
        p.add_argument("--codebooks", help="codebook csv file or directory of them")
        p.add_argument("--qm", type=int, help="master activation width (default 12)")
        p.add_argument("--fbits", type=int, help="master fractional bits (default 0)")
        p.add_argument("--delta", type=float, help="accuracy budget (default 0.02)")
        p.add_argument("--topk", type=int, help="accuracy metric top-k (default 1)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--mode", choices=("greedy", "exhaustive"),
                       help="ENQ search strategy (default greedy)")
        p.add_argument("--q-lo", dest="q_lo", type=int, help="uniform sweep lower bound")
        p.add_argument("--q-hi", dest="q_hi", type=int, help="uniform sweep upper bound")
        p.add_argument("--t-lo", dest="t_lo", type=int, help="KNQ sweep lower T")
        p.add_argument("--t-hi", dest="t_hi", type=int, help="KNQ sweep upper T")
        p.add_argument("--refine", action=argparse.BooleanOptionalAction, default=None,
                       help="per-layer KNQ refinement after the uniform-T sweep")
        p.add_argument("--saturate", action=argparse.BooleanOptionalAction, default=None,
                       help="clamp calibration activations to the master ceiling "
                            "before fitting (default on)")
        p.add_argument("--baseline-alloc", dest="baseline_alloc",
                       help="baseline allocation file for NNB")
        p.add_argument("--baseline-mib", dest="baseline_mib", type=float,
                       help="baseline storage in MiB for NNB")
    return parser


def main(argv=None) -> int:
    ns = _build_parser().parse_args(argv)
    try:
        cfg = _merge_config(ns)
        return _COMMANDS[ns.command](cfg)
    except search.Infeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (CliError, netgraph.ModelError, netgraph.DatasetError, KeyError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
