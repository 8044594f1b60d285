"""Calibration: two caching passes plus the per-unit quantizer search.

Pass 1 runs the model in full precision over the calibration batch and caches
every reconstruction unit's output, the unit members' external inputs, the
full-precision values at every quant site, and the final logits. Pass 2 runs
the default-quantized model (min-max fits), takes cross-entropy against the
full-precision argmax labels, and backpropagates to cache each unit's output
gradient. The search then minimizes the squared-gradient reconstruction
objective per unit over scale candidates, granularity and scheme, re-running
only the unit's own layers on the cached full-precision inputs.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bridge import ReconstructionUnit, resolve_bridge_blocks, units_for
from .graph import GRAPH_INPUT, Graph, Site, forward_quant, run_layer, _execute
from .quant import QuantParams, fit_minmax, params_for_scale
from .tensor import Tape, Tensor, backward, cross_entropy

_F32 = np.float32

METRICS = ("hessian", "cosine")


class CalibError(ValueError):
    """Calibration pipeline misuse or failure."""


@dataclass(frozen=True)
class SearchSpace:
    """Scale-candidate range multipliers, candidate count, alternation rounds."""

    alpha: float = 0.0
    beta: float = 1.2
    candidates: int = 100
    iterations: int = 3

    def __post_init__(self):
        if self.alpha > self.beta:
            raise CalibError(f"alpha {self.alpha} must not exceed beta {self.beta}")
        if self.candidates < 1:
            raise CalibError("need at least one scale candidate")
        if self.iterations < 1:
            raise CalibError("need at least one alternation round")


@dataclass(frozen=True)
class CalibOptions:
    """Ablation flags (a monotone chain), objective metric, thread count."""

    scale_search: bool = True
    granularity_search: bool = True
    scheme_search: bool = True
    metric: str = "hessian"
    threads: int = 1

    def __post_init__(self):
        if self.granularity_search and not self.scale_search:
            raise CalibError("granularity search requires scale search")
        if self.scheme_search and not self.granularity_search:
            raise CalibError("scheme search requires granularity search")
        if self.metric not in METRICS:
            raise CalibError(f"unknown metric '{self.metric}'")
        if self.threads < 1:
            raise CalibError("threads must be >= 1")


@dataclass
class CalibCache:
    """Write-once store filled by the two calibration passes."""

    unit_outputs: dict[int, np.ndarray] = field(default_factory=dict)
    unit_inputs: dict[int, dict[tuple[int, int], np.ndarray]] = field(default_factory=dict)
    site_values: dict[tuple[int, str], np.ndarray] = field(default_factory=dict)
    unit_grads: dict[int, np.ndarray] = field(default_factory=dict)
    logits_fp: np.ndarray | None = None

    @property
    def complete(self) -> bool:
        return self.logits_fp is not None and bool(self.unit_grads)


@dataclass
class UnitDecision:
    """Chosen parameters for every site of one unit plus the winning objective."""

    label: str
    output_id: int
    params: dict[tuple[int, str], QuantParams]
    granularity: str
    scheme: str
    objective: float
    fallback: bool = False
    evals: int = 0


def objective(delta_o, grad) -> float:
    """Squared-gradient reconstruction error: sum_i grad_i^2 * delta_o_i^2."""
    d = delta_o.data if isinstance(delta_o, Tensor) else np.asarray(delta_o)
    g = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if d.shape != g.shape:
        raise CalibError(f"objective shapes disagree: {d.shape} vs {g.shape}")
    d64 = d.astype(np.float64).ravel()
    g64 = g.astype(np.float64).ravel()
    return float(np.dot(g64 * g64, d64 * d64))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cosine similarity of flattened tensors (the metric-ablation variant)."""
    av = np.asarray(a, dtype=np.float64).ravel()
    bv = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 and nb == 0.0:
        return 0.0
    if na == 0.0 or nb == 0.0:
        return 1.0
    return float(1.0 - np.dot(av, bv) / (na * nb))


def generate_candidates(t, bits: int, space: SearchSpace, granularity: str,
                        channel_axis: int | None = None) -> np.ndarray:
    """Linearly spaced scale candidates over [alpha, beta] x absmax / 2^(k-1).

    Returns shape (n,) per layer or (n, C) per channel (row i applies the
    same relative step to every channel). Zero candidates (alpha = 0) are
    floored later by the quantizer's degenerate-range rule.
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=_F32)
    if data.size == 0:
        raise CalibError("cannot generate candidates from an empty tensor")
    denom = float(2 ** (bits - 1))
    mult = np.linspace(space.alpha, space.beta, space.candidates, dtype=np.float64)
    if granularity == "per_channel":
        if channel_axis is None:
            raise CalibError("per_channel candidates need a channel_axis")
        ax = channel_axis % data.ndim
        absmax = np.abs(np.moveaxis(data, ax, 0).reshape(data.shape[ax], -1)).max(axis=1)
        return mult[:, None] * (absmax.astype(np.float64) / denom)[None, :]
    base = float(np.abs(data).max()) / denom
    return mult * base


# ---------------------------------------------------------------------------
# calibration passes


def _watch_for_pass1(graph: Graph, units) -> set[int]:
    watch = set()
    member_sets = {u.output_id: set(u.layer_ids) for u in units}
    for u in units:
        watch.add(u.output_id)
        for lid in u.layer_ids:
            for pid in graph.layer(lid).inputs:
                if pid != GRAPH_INPUT and pid not in member_sets[u.output_id]:
                    watch.add(pid)
    return watch


def pass1_cache_fp(graph: Graph, calib_batch: Tensor, units) -> CalibCache:
    """Forward the calibration batch in full precision; cache unit outputs,
    member inputs, per-site values and the final logits."""
    if calib_batch.size == 0 or calib_batch.shape[0] == 0:
        raise CalibError("calibration batch is empty")
    cache = CalibCache()
    capture: dict[tuple[int, str], np.ndarray] = {}
    watch = _watch_for_pass1(graph, units)
    logits, outs = _execute(graph, calib_batch, {}, watch, None, capture)
    cache.logits_fp = logits.data
    cache.site_values = capture
    for u in units:
        cache.unit_outputs[u.output_id] = outs[u.output_id].data
        members = set(u.layer_ids)
        ext: dict[tuple[int, int], np.ndarray] = {}
        for lid in u.layer_ids:
            for pid in graph.layer(lid).inputs:
                if pid in members:
                    continue
                ext[(lid, pid)] = (calib_batch.data if pid == GRAPH_INPUT
                                   else outs[pid].data)
        cache.unit_inputs[u.output_id] = ext
    return cache


def default_qconfig(graph: Graph, bits: int, cache: CalibCache) -> dict:
    """Min-max per-layer init: weights symmetric, activations asymmetric."""
    qcfg = {}
    for site in graph.quant_sites:
        qcfg[site.key] = _default_site_params(graph, site, cache, bits)
    return qcfg


def _site_fp_value(site: Site, cache: CalibCache) -> np.ndarray:
    try:
        return cache.site_values[site.key]
    except KeyError:
        raise CalibError(
            f"no cached full-precision value for site {site.layer}:{site.name}; "
            f"run pass1_cache_fp first") from None


def _default_site_params(graph: Graph, site: Site, cache: CalibCache,
                         bits: int) -> QuantParams:
    data = _site_fp_value(site, cache)
    scheme = "symmetric" if site.kind == "weight" else "asymmetric"
    return fit_minmax(Tensor._wrap(data), bits, scheme, "per_layer")


def pass2_cache_gradients(graph: Graph, calib_batch: Tensor, units,
                          cache: CalibCache, bits: int = 8,
                          qconfig_override: dict | None = None) -> CalibCache:
    """Default-quantized forward + backward; caches per-unit output gradients.

    Loss is sum-reduced cross-entropy of the quantized logits against the
    full-precision argmax labels, so the logit gradient is softmax - onehot.
    qconfig_override replaces the min-max default (an empty dict gives the
    exact full-precision path, useful as a smooth-gradient stub).
    """
    if cache.logits_fp is None:
        raise CalibError("pass 1 cache missing; run pass1_cache_fp first")
    qcfg = default_qconfig(graph, bits, cache) if qconfig_override is None \
        else qconfig_override
    tape = Tape()
    watch = {u.output_id for u in units}
    logits, outs = forward_quant(graph, calib_batch, qcfg, watch=watch, tape=tape)
    labels = np.argmax(cache.logits_fp, axis=1)
    loss = cross_entropy(logits, labels, reduction="sum", tape=tape)
    assert loss.node is not None
    grads = backward(Tensor(1.0), tape)
    for u in units:
        node = outs[u.output_id].node
        cache.unit_grads[u.output_id] = grads[node].data
    return cache


# ---------------------------------------------------------------------------
# per-unit search


class _UnitEvaluator:
    """Re-runs one unit's layers on cached FP inputs and scores the output."""

    def __init__(self, graph: Graph, unit: ReconstructionUnit, cache: CalibCache,
                 metric: str):
        self.members = [graph.layer(lid) for lid in unit.layer_ids]
        self.output_id = unit.output_id
        self.ext = cache.unit_inputs[unit.output_id]
        self.o_fp = cache.unit_outputs[unit.output_id]
        self.metric = metric
        grad = cache.unit_grads.get(unit.output_id)
        if metric == "hessian":
            if grad is None:
                raise CalibError(
                    f"no cached gradient for unit output {unit.output_id}; "
                    f"run pass2_cache_gradients first")
            g64 = grad.astype(np.float64).ravel()
            self._g2 = g64 * g64
        self._o_fp64 = self.o_fp.astype(np.float64).ravel()
        self.evals = 0

    def run(self, params: dict) -> float:
        self.evals += 1
        vals: dict[int, Tensor] = {}
        for layer in self.members:
            ins = []
            for pid in layer.inputs:
                if pid in vals:
                    ins.append(vals[pid])
                else:
                    ins.append(Tensor._wrap(self.ext[(layer.id, pid)]))
            vals[layer.id] = run_layer(layer, ins, params)
        o_hat = vals[self.output_id].data
        if self.metric == "cosine":
            return cosine_distance(o_hat, self.o_fp)
        d = o_hat.astype(np.float64).ravel() - self._o_fp64
        return float(np.dot(self._g2, d * d))


def _combos(options: CalibOptions) -> list[tuple[str, str, str, str]]:
    """(granularity, weight scheme, activation scheme, scheme label) in the
    fixed preference order that realizes the deterministic tie-break."""
    gs = ["per_layer"]
    if options.granularity_search:
        gs.append("per_channel")
    if options.scheme_search:
        return [(g, s, s, s) for g in gs for s in ("symmetric", "asymmetric")]
    return [(g, "symmetric", "asymmetric", "default") for g in gs]


def _site_granularity(site: Site, granularity: str) -> str:
    if granularity == "per_channel" and not site.allow_per_channel:
        return "per_layer"
    return granularity


def _scan_candidates(evaluator, params, site, cands, trace_rows, trace_meta,
                     threads):
    """Score every scale candidate for one site; returns (best_obj, best_params)."""
    n = cands.shape[0]
    saved = params[site.key]

    def score(ci):
        params[site.key] = candidates_cache[ci]
        return evaluator.run(params)

    candidates_cache = [params_for_scale(saved, cands[ci]) for ci in range(n)]
    if threads > 1:
        # evaluations are pure; copy the param map per task
        def score_copy(ci):
            trial = dict(params)
            trial[site.key] = candidates_cache[ci]
            return evaluator.run(trial)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            objs = list(pool.map(score_copy, range(n)))
    else:
        objs = [score(ci) for ci in range(n)]
    params[site.key] = saved
    if trace_rows is not None:
        label, g_lab, s_lab = trace_meta
        for ci, obj in enumerate(objs):
            trace_rows.append((label, g_lab, s_lab, ci, obj))
    best_ci = int(np.argmin(objs))
    return objs[best_ci], candidates_cache[best_ci]


def search_unit(graph: Graph, unit: ReconstructionUnit, cache: CalibCache,
                space: SearchSpace, options: CalibOptions, bits: int = 8,
                trace: list | None = None) -> UnitDecision:
    """Pick scale / granularity / scheme for every site of one unit.

    For each enabled (granularity, scheme) combination, weight-site scales and
    then activation-site scales are alternately optimized for the configured
    number of rounds; the min-max default always stays available as the
    fallback candidate, so the result never scores worse than the default.
    Ties resolve to per-layer over per-channel, symmetric over asymmetric,
    then the smallest scale, via the fixed enumeration order.
    """
    sites = [s for lid in unit.layer_ids for s in graph.sites_by_layer[lid]]
    if not sites:
        raise CalibError(f"unit {unit.label} has no quant sites to search")
    if not cache.complete and options.metric == "hessian":
        raise CalibError("calibration cache incomplete; run both passes first")

    evaluator = _UnitEvaluator(graph, unit, cache, options.metric)
    stats = {s.key: _site_fp_value(s, cache) for s in sites}
    default_params = {s.key: _default_site_params(graph, s, cache, bits)
                      for s in sites}
    default_obj = evaluator.run(default_params)
    if trace is not None:
        trace.append((unit.label, "per_layer", "default", -1, default_obj))

    decision = UnitDecision(label=unit.label, output_id=unit.output_id,
                            params=default_params, granularity="per_layer",
                            scheme="default", objective=default_obj)
    if not options.scale_search:
        decision.evals = evaluator.evals
        return decision

    if all(float(np.abs(stats[s.key]).max()) == 0.0 for s in sites):
        decision.fallback = True
        decision.evals = evaluator.evals
        return decision

    weight_sites = [s for s in sites if s.kind == "weight"]
    act_sites = [s for s in sites if s.kind == "activation"]
    best_obj, best_params, best_g, best_s = None, None, None, None

    for g, s_w, s_a, s_label in _combos(options):
        params: dict[tuple[int, str], QuantParams] = {}
        feasible = True
        for site in sites:
            scheme = s_w if site.kind == "weight" else s_a
            gran = _site_granularity(site, g)
            axis = site.channel_axis if gran == "per_channel" else None
            p = fit_minmax(Tensor._wrap(stats[site.key]), bits, scheme, gran,
                           axis)
            if p.any_clamped:
                # zero-point overflow: the grid cannot represent real zero, so
                # this (g, s) combination is not a valid quantizer for the unit
                feasible = False
                break
            params[site.key] = p
        if not feasible:
            continue
        cur_obj = evaluator.run(params)
        if trace is not None:
            trace.append((unit.label, g, s_label, -1, cur_obj))
        cand_cache: dict[tuple[tuple[int, str], str], np.ndarray] = {}
        for _ in range(space.iterations):
            changed = False
            for site in weight_sites + act_sites:
                gran = _site_granularity(site, g)
                ck = (site.key, gran)
                if ck not in cand_cache:
                    cand_cache[ck] = np.atleast_1d(generate_candidates(
                        Tensor._wrap(stats[site.key]), bits, space, gran,
                        site.channel_axis))
                obj, p = _scan_candidates(
                    evaluator, params, site, cand_cache[ck], trace,
                    (unit.label, g, s_label), options.threads)
                if obj < cur_obj:
                    params[site.key] = p
                    cur_obj = obj
                    changed = True
            if not changed:
                break
        if best_obj is None or cur_obj < best_obj:
            best_obj, best_params = cur_obj, dict(params)
            best_g, best_s = g, s_label

    if best_obj is not None and best_obj < default_obj:
        decision = UnitDecision(label=unit.label, output_id=unit.output_id,
                                params=best_params, granularity=best_g,
                                scheme=best_s, objective=best_obj)
    decision.evals = evaluator.evals
    return decision


def calibrate(graph: Graph, calib_batch: Tensor, space: SearchSpace | None = None,
              options: CalibOptions | None = None, bits: int = 8,
              trace: list | None = None):
    """End-to-end calibration: both cache passes then sequential unit search.

    Returns (qconfig, decisions): a QuantParams map covering every quant site
    exactly once, plus the per-unit decisions in topological order.
    """
    space = space or SearchSpace()
    options = options or CalibOptions()
    groups = resolve_bridge_blocks(graph, graph.bridge_annotations)
    units = units_for(graph, groups)
    cache = pass1_cache_fp(graph, calib_batch, units)
    pass2_cache_gradients(graph, calib_batch, units, cache, bits)
    qcfg: dict[tuple[int, str], QuantParams] = {}
    decisions: list[UnitDecision] = []
    for unit in units:
        if not any(graph.sites_by_layer[lid] for lid in unit.layer_ids):
            continue
        d = search_unit(graph, unit, cache, space, options, bits, trace)
        qcfg.update(d.params)
        decisions.append(d)
    return qcfg, decisions
