"""Operator commands: quantize, evaluate, report, fixtures.

Exit codes: 0 success, 1 runtime failure, 2 usage error. All artifacts are
deterministic functions of (inputs, seed); the qconfig document format is
"hyquant-qconfig/1" and records raw plus clamped zero-points per site so
search decisions stay auditable against the trace.
"""

from __future__ import annotations

import csv
import json
import os
import sys
from dataclasses import dataclass, field

import click
import numpy as np

from .bridge import BridgeAnnotationError
from .calib import CalibError, CalibOptions, SearchSpace, calibrate
from .graph import (Graph, GraphError, SiteCoverageError, forward_fp,
                    forward_quant, load_manifest)
from .quant import QuantError, QuantParams, detect_zero_point_overflow
from .tensor import Tensor, TensorError, load_tensor
from .zoo import FIXTURES, ZooError, build_fixture, export_fixture

QCONFIG_FORMAT = "hyquant-qconfig/1"
METRICS_FORMAT = "hyquant-metrics/1"

_ERRORS = (GraphError, QuantError, CalibError, TensorError, ZooError,
           BridgeAnnotationError, OSError, json.JSONDecodeError)


@dataclass
class RunConfig:
    """Everything a quantize run depends on; flags form a monotone chain."""

    model: str | None = None
    fixture: str | None = None
    calib: str | None = None
    bits: int = 8
    mode: str | None = None  # None: keep the model's declared mode
    scale_search: bool = True
    granularity_search: bool = True
    scheme_search: bool = True
    metric: str = "hessian"
    space: SearchSpace = field(default_factory=SearchSpace)
    seed: int | None = None
    threads: int = 1
    out: str | None = None
    trace: str | None = None

    def validate(self) -> None:
        if self.bits not in (6, 8):
            raise ValueError(f"bits must be 6 or 8, got {self.bits}")
        if self.granularity_search and not self.scale_search:
            raise ValueError("--granularity-search requires --scale-search")
        if self.scheme_search and not self.granularity_search:
            raise ValueError("--scheme-search requires --granularity-search")
        if (self.model is None) == (self.fixture is None):
            raise ValueError("give exactly one of --model or --fixture")
        if self.model is not None and self.calib is None:
            raise ValueError("--model requires --calib data")


# ---------------------------------------------------------------------------
# artifact documents


def _param_doc(p: QuantParams) -> dict:
    def scalar_or_list(arr, cast):
        if arr.ndim == 0:
            return cast(arr)
        return [cast(v) for v in arr]

    return {
        "bits": p.bits,
        "scheme": p.scheme,
        "granularity": p.granularity,
        "channel_axis": p.channel_axis,
        "scale": scalar_or_list(p.scale, float),
        "zero_point": scalar_or_list(p.zero_point, int),
        "zero_point_raw": scalar_or_list(p.zero_point_raw, float),
    }


def qconfig_to_doc(qcfg: dict, bits: int, mode: str,
                   objectives: dict | None = None) -> dict:
    sites = []
    for (lid, name) in sorted(qcfg):
        p = qcfg[(lid, name)]
        entry = {"layer": lid, "site": name}
        entry.update(_param_doc(p))
        if objectives and (lid, name) in objectives:
            entry["objective"] = float(objectives[(lid, name)])
        sites.append(entry)
    return {"format": QCONFIG_FORMAT, "bits": bits, "mode": mode, "sites": sites}


def save_qconfig(path: str, qcfg: dict, bits: int, mode: str,
                 objectives: dict | None = None) -> None:
    with open(path, "w") as f:
        json.dump(qconfig_to_doc(qcfg, bits, mode, objectives), f, indent=2,
                  sort_keys=True)
        f.write("\n")


def load_qconfig(path: str):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != QCONFIG_FORMAT:
        raise QuantError(f"unsupported qconfig format {doc.get('format')!r}, "
                         f"expected {QCONFIG_FORMAT!r}")
    qcfg = {}
    for entry in doc["sites"]:
        qcfg[(int(entry["layer"]), str(entry["site"]))] = QuantParams(
            bits=int(entry["bits"]),
            scheme=entry["scheme"],
            granularity=entry["granularity"],
            channel_axis=entry["channel_axis"],
            scale=np.asarray(entry["scale"], dtype=np.float32),
            zero_point=np.asarray(entry["zero_point"], dtype=np.int32),
            zero_point_raw=np.asarray(entry["zero_point_raw"], dtype=np.float64),
        )
    return qcfg, int(doc.get("bits", 8)), doc.get("mode", "partial")


def with_mode(graph: Graph, mode: str) -> Graph:
    if mode == graph.mode:
        return graph
    return Graph(layers=graph.layers, input_shape=graph.input_shape,
                 output_id=graph.output_id, mode=mode,
                 bridge_annotations=graph.bridge_annotations)


# ---------------------------------------------------------------------------
# metrics


def evaluate_model(graph: Graph, qcfg: dict, eval_x: Tensor,
                   labels: np.ndarray) -> dict:
    """FP vs quantized top-1, agreement, and mean logit MSE on one batch."""
    y_fp, _ = forward_fp(graph, eval_x)
    y_q, _ = forward_quant(graph, eval_x, qcfg)
    pred_fp = np.argmax(y_fp.data, axis=1)
    pred_q = np.argmax(y_q.data, axis=1)
    return {
        "format": METRICS_FORMAT,
        "samples": int(eval_x.shape[0]),
        "fp_top1": float(np.mean(pred_fp == labels)),
        "quant_top1": float(np.mean(pred_q == labels)),
        "top1_agreement": float(np.mean(pred_fp == pred_q)),
        "mean_logit_mse": float(np.mean((y_fp.data.astype(np.float64)
                                         - y_q.data.astype(np.float64)) ** 2)),
    }


def range_report(graph: Graph, calib_x: Tensor, val_x: Tensor, bits: int):
    """Per-activation-site, per-channel min/max for calibration and validation
    batches plus zero-point overflow flags on the calibration ranges."""
    capture_c: dict = {}
    capture_v: dict = {}
    from .graph import _execute
    _execute(graph, calib_x, {}, frozenset(), None, capture_c)
    _execute(graph, val_x, {}, frozenset(), None, capture_v)
    rows = []
    for site in graph.quant_sites:
        if site.kind != "activation":
            continue
        cvals = capture_c[site.key]
        vvals = capture_v[site.key]
        rep = detect_zero_point_overflow(Tensor._wrap(cvals), bits,
                                         site.channel_axis)
        ax = site.channel_axis % cvals.ndim
        cm = np.moveaxis(cvals, ax, 0).reshape(cvals.shape[ax], -1)
        vm = np.moveaxis(vvals, ax, 0).reshape(vvals.shape[ax], -1)
        for ch in rep.channels:
            rows.append({
                "layer": site.layer,
                "site": site.name,
                "channel": ch.channel,
                "calib_min": float(cm[ch.channel].min()),
                "calib_max": float(cm[ch.channel].max()),
                "val_min": float(vm[ch.channel].min()),
                "val_max": float(vm[ch.channel].max()),
                "zero_point_raw": ch.zero_point_raw,
                "flagged": ch.flagged,
            })
    return rows


REPORT_COLUMNS = ("layer", "site", "channel", "calib_min", "calib_max",
                  "val_min", "val_max", "zero_point_raw", "flagged")


def write_report_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow([r["layer"], r["site"], r["channel"],
                             repr(r["calib_min"]), repr(r["calib_max"]),
                             repr(r["val_min"]), repr(r["val_max"]),
                             repr(r["zero_point_raw"]), int(r["flagged"])])


def read_report_csv(path: str) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            rows.append({
                "layer": int(rec["layer"]),
                "site": rec["site"],
                "channel": int(rec["channel"]),
                "calib_min": float(rec["calib_min"]),
                "calib_max": float(rec["calib_max"]),
                "val_min": float(rec["val_min"]),
                "val_max": float(rec["val_max"]),
                "zero_point_raw": float(rec["zero_point_raw"]),
                "flagged": bool(int(rec["flagged"])),
            })
    return rows


# ---------------------------------------------------------------------------
# shared loading helpers


def _load_labels(path: str) -> np.ndarray:
    vals = load_tensor(path).data
    labels = vals.astype(np.int64)
    if not np.all(labels == vals):
        raise TensorError(f"{path}: labels blob holds non-integral values")
    return labels.reshape(-1)


def _resolve_model(config: RunConfig):
    """Returns (graph, calib_x, eval_x, eval_labels|None) for either source."""
    if config.fixture is not None:
        graph, calib_x, eval_x, labels = build_fixture(config.fixture,
                                                       seed=config.seed)
    else:
        graph = load_manifest(config.model)
        calib_x = load_tensor(config.calib)
        eval_x = labels = None
    if config.mode is not None:
        graph = with_mode(graph, config.mode)
    return graph, calib_x, eval_x, labels


def _fail(e: Exception) -> None:
    click.echo(f"error: {e}", err=True)
    sys.exit(1)


# ---------------------------------------------------------------------------
# commands


@click.group()
def main():
    """Post-training quantization for hybrid conv+attention models."""


def _search_flags(fn):
    fn = click.option("--scale-search/--no-scale-search", default=True,
                      show_default=True, help="search scale candidates")(fn)
    fn = click.option("--granularity-search/--no-granularity-search", default=True,
                      show_default=True,
                      help="also search per-layer vs per-channel")(fn)
    fn = click.option("--scheme-search/--no-scheme-search", default=True,
                      show_default=True,
                      help="also search symmetric vs asymmetric")(fn)
    return fn


@main.command()
@click.option("--model", type=click.Path(exists=True), help="model manifest")
@click.option("--fixture", type=str, help="built-in fixture name")
@click.option("--calib", type=click.Path(exists=True), help="calibration blob")
@click.option("--bits", type=click.Choice(["8", "6"]), default="8", show_default=True)
@click.option("--mode", type=click.Choice(["partial", "full"]), default=None,
              help="override the model's declared quantization mode")
@_search_flags
@click.option("--metric", type=click.Choice(["hessian", "cosine"]),
              default="hessian", show_default=True)
@click.option("--alpha", type=float, default=0.0, show_default=True)
@click.option("--beta", type=float, default=1.2, show_default=True)
@click.option("--candidates", type=int, default=100, show_default=True)
@click.option("--iterations", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=None, help="fixture seed override")
@click.option("--out", type=click.Path(), required=True, help="qconfig output path")
@click.option("--trace", type=click.Path(), default=None, help="search trace CSV")
def quantize(model, fixture, calib, bits, mode, scale_search, granularity_search,
             scheme_search, metric, alpha, beta, candidates, iterations, seed,
             out, trace):
    """Calibrate a model and write the quantization config document."""
    try:
        space = SearchSpace(alpha=alpha, beta=beta, candidates=candidates,
                            iterations=iterations)
    except CalibError as e:
        raise click.UsageError(str(e))
    config = RunConfig(model=model, fixture=fixture, calib=calib, bits=int(bits),
                       mode=mode, scale_search=scale_search,
                       granularity_search=granularity_search,
                       scheme_search=scheme_search, metric=metric, space=space,
                       seed=seed, out=out, trace=trace,
                       threads=int(os.environ.get("HYQUANT_THREADS", "1")))
    try:
        config.validate()
    except ValueError as e:
        raise click.UsageError(str(e))
    try:
        graph, calib_x, _, _ = _resolve_model(config)
        options = CalibOptions(scale_search=config.scale_search,
                               granularity_search=config.granularity_search,
                               scheme_search=config.scheme_search,
                               metric=config.metric, threads=config.threads)
        trace_rows: list | None = [] if trace else None
        qcfg, decisions = calibrate(graph, calib_x, space, options,
                                    bits=config.bits, trace=trace_rows)
        objectives = {key: d.objective for d in decisions for key in d.params}
        save_qconfig(out, qcfg, config.bits, graph.mode, objectives)
        if trace:
            with open(trace, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["unit", "granularity", "scheme",
                                 "candidate", "objective"])
                for row in trace_rows:
                    writer.writerow([row[0], row[1], row[2], row[3], repr(row[4])])
        click.echo(f"wrote {out} ({len(qcfg)} sites, {len(decisions)} units)")
        fallbacks = [d.label for d in decisions if d.fallback]
        if fallbacks:
            click.echo(f"warning: degenerate units kept min-max defaults: "
                       f"{', '.join(fallbacks)}", err=True)
    except _ERRORS as e:
        _fail(e)


@main.command()
@click.option("--model", type=click.Path(exists=True), help="model manifest")
@click.option("--fixture", type=str, help="built-in fixture name")
@click.option("--eval", "eval_path", type=click.Path(exists=True),
              help="evaluation data blob")
@click.option("--labels", "labels_path", type=click.Path(exists=True),
              help="evaluation labels blob")
@click.option("--qconfig", "qconfig_path", type=click.Path(exists=True),
              required=True)
@click.option("--seed", type=int, default=None, help="fixture seed override")
@click.option("--out", type=click.Path(), default=None, help="metrics JSON path")
def evaluate(model, fixture, eval_path, labels_path, qconfig_path, seed, out):
    """Report FP vs quantized top-1, agreement and logit MSE."""
    if (model is None) == (fixture is None):
        raise click.UsageError("give exactly one of --model or --fixture")
    if model is not None and (eval_path is None or labels_path is None):
        raise click.UsageError("--model requires --eval and --labels")
    try:
        qcfg, _, mode = load_qconfig(qconfig_path)
        if fixture is not None:
            graph, _, eval_x, labels = build_fixture(fixture, seed=seed)
        else:
            graph = load_manifest(model)
            eval_x = load_tensor(eval_path)
            labels = _load_labels(labels_path)
        graph = with_mode(graph, mode)
        declared = {s.key for s in graph.quant_sites}
        unknown = set(qcfg) - declared
        if unknown:
            names = ", ".join(f"{l}:{n}" for l, n in sorted(unknown))
            raise SiteCoverageError(f"qconfig names sites absent from the model: {names}")
        metrics = evaluate_model(graph, qcfg, eval_x, labels)
        doc = json.dumps(metrics, indent=2, sort_keys=True)
        click.echo(doc)
        if out:
            with open(out, "w") as f:
                f.write(doc + "\n")
    except _ERRORS as e:
        _fail(e)


@main.command()
@click.option("--model", type=click.Path(exists=True), help="model manifest")
@click.option("--fixture", type=str, help="built-in fixture name")
@click.option("--calib", type=click.Path(exists=True), help="calibration blob")
@click.option("--val", type=click.Path(exists=True), help="validation blob")
@click.option("--bits", type=click.Choice(["8", "6"]), default="8", show_default=True)
@click.option("--mode", type=click.Choice(["partial", "full"]), default=None,
              help="override the model's declared quantization mode")
@click.option("--seed", type=int, default=None, help="fixture seed override")
@click.option("--out", type=click.Path(), required=True, help="report CSV path")
def report(model, fixture, calib, val, bits, mode, seed, out):
    """Per-channel activation ranges, overflow flags, calib-vs-val gap."""
    if (model is None) == (fixture is None):
        raise click.UsageError("give exactly one of --model or --fixture")
    if model is not None and (calib is None or val is None):
        raise click.UsageError("--model requires --calib and --val")
    try:
        if fixture is not None:
            graph, calib_x, val_x, _ = build_fixture(fixture, seed=seed)
        else:
            graph = load_manifest(model)
            calib_x = load_tensor(calib)
            val_x = load_tensor(val)
        if mode is not None:
            graph = with_mode(graph, mode)
        rows = range_report(graph, calib_x, val_x, int(bits))
        write_report_csv(out, rows)
        flagged = [r for r in rows if r["flagged"]]
        gap = max((abs(r["calib_max"] - r["val_max"])
                   + abs(r["calib_min"] - r["val_min"]) for r in rows),
                  default=0.0)
        click.echo(f"wrote {out}: {len(rows)} channels across "
                   f"{len({(r['layer'], r['site']) for r in rows})} activation sites")
        click.echo(f"zero-point overflow flags: {len(flagged)}")
        click.echo(f"largest calibration-vs-validation range gap: {gap:.6g}")
    except _ERRORS as e:
        _fail(e)


@main.group()
def fixtures():
    """List or export the built-in synthetic fixtures."""


@fixtures.command("list")
def fixtures_list():
    for name in sorted(FIXTURES):
        spec = FIXTURES[name]
        click.echo(f"{name}: channels={spec.channels} embed={spec.embed} "
                   f"heads={spec.heads} norm={spec.norm} seed={spec.seed}"
                   f"{' overflow' if spec.overflow else ''}")


@fixtures.command("export")
@click.argument("name")
@click.option("--out", type=click.Path(), required=True, help="output directory")
def fixtures_export(name, out):
    try:
        paths = export_fixture(name, out)
        for key in sorted(paths):
            click.echo(f"{key}: {paths[key]}")
    except _ERRORS as e:
        _fail(e)


if __name__ == "__main__":  # pragma: no cover
    main()
