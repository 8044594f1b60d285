"""Typed layer IR and executor for hybrid conv+attention models.

A Graph is an ordered DAG of LayerSpec entries (ids topologically ordered,
single output). Execution is one engine shared by the full-precision and the
fake-quant paths: a site absent from the qconfig simply runs in full
precision, so an empty qconfig is bitwise identical to forward_fp.

Quantizable sites per layer: the weight tensor and the input activation, plus
for attention the operands of both internal matrix products. Softmax/norm
input sites exist only when the graph's mode is "full".
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .quant import quantize_dequantize
from .tensor import Tape, Tensor

LAYER_KINDS = (
    "conv2d", "depthwise_conv2d", "linear", "mhsa", "softmax", "layer_norm",
    "group_norm", "batch_norm", "activation", "add", "reshape", "pool",
    "matmul",
)

ACTIVATION_FNS = ("gelu", "silu", "relu")

MANIFEST_FORMAT = "hyquant-manifest/1"

GRAPH_INPUT = -1


class GraphError(ValueError):
    """Invalid graph structure or manifest."""


class GraphExecutionError(GraphError):
    """Forward failure; the message names the offending layer."""


class SiteCoverageError(GraphError):
    """qconfig does not line up with the graph's declared quant sites."""


@dataclass(frozen=True)
class Site:
    """One quantizable tensor inside a layer."""

    layer: int
    name: str
    kind: str  # "weight" | "activation"
    channel_axis: int
    allow_per_channel: bool = True

    @property
    def key(self) -> tuple[int, str]:
        return (self.layer, self.name)


@dataclass
class LayerSpec:
    """One layer: kind tag, kind-specific attrs, producer ids, weight tensors."""

    id: int
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: list[int] = field(default_factory=list)
    weights: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class Graph:
    """Ordered layer list plus input shape, output id and quantization mode."""

    layers: list[LayerSpec]
    input_shape: tuple[int, ...]
    output_id: int | None = None
    mode: str = "partial"
    bridge_annotations: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise GraphError("graph needs at least one layer")
        if self.mode not in ("partial", "full"):
            raise GraphError(f"unknown quantization mode '{self.mode}'")
        seen: set[int] = set()
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise GraphError(f"unknown layer kind '{layer.kind}' at layer {layer.id}")
            if layer.id in seen:
                raise GraphError(f"duplicate layer id {layer.id}")
            for pid in layer.inputs:
                if pid != GRAPH_INPUT and pid not in seen:
                    raise GraphError(
                        f"layer {layer.id} consumes {pid} before it is produced")
            seen.add(layer.id)
            _validate_layer(layer)
        if self.output_id is None:
            self.output_id = self.layers[-1].id
        if self.output_id not in seen:
            raise GraphError(f"output layer {self.output_id} does not exist")
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def layer(self, layer_id: int) -> LayerSpec:
        for layer in self.layers:
            if layer.id == layer_id:
                return layer
        raise GraphError(f"no layer with id {layer_id}")

    @cached_property
    def _layer_index(self) -> dict[int, int]:
        return {layer.id: i for i, layer in enumerate(self.layers)}

    @cached_property
    def consumers(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {layer.id: [] for layer in self.layers}
        for layer in self.layers:
            for pid in layer.inputs:
                if pid != GRAPH_INPUT:
                    out[pid].append(layer.id)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def quant_sites(self) -> tuple[Site, ...]:
        sites: list[Site] = []
        for layer in self.layers:
            sites.extend(sites_for_layer(layer, self.mode))
        return tuple(sites)

    @cached_property
    def sites_by_layer(self) -> dict[int, tuple[Site, ...]]:
        out: dict[int, list[Site]] = {layer.id: [] for layer in self.layers}
        for s in self.quant_sites:
            out[s.layer].append(s)
        return {k: tuple(v) for k, v in out.items()}

    def site(self, layer_id: int, name: str) -> Site:
        for s in self.sites_by_layer.get(layer_id, ()):
            if s.name == name:
                return s
        raise GraphError(f"no quant site '{name}' on layer {layer_id}")


def _validate_layer(layer: LayerSpec) -> None:
    k, a, w = layer.kind, layer.attrs, layer.weights
    if k in ("conv2d", "depthwise_conv2d"):
        if "w" not in w or w["w"].ndim != 4:
            raise GraphError(f"layer {layer.id}: conv weight must be 4-D")
        if k == "depthwise_conv2d" and w["w"].shape[1] != 1:
            raise GraphError(
                f"layer {layer.id}: depthwise kernel must have one input "
                f"channel per group, got {w['w'].shape}")
    elif k == "linear":
        if "w" not in w or w["w"].ndim != 2:
            raise GraphError(f"layer {layer.id}: linear weight must be 2-D (out, in)")
    elif k == "mhsa":
        heads = a.get("heads")
        if not heads or "w_q" not in w:
            raise GraphError(f"layer {layer.id}: mhsa needs 'heads' attr and projections")
        embed = w["w_q"].shape[0]
        if embed % heads != 0:
            raise GraphError(
                f"layer {layer.id}: embedding dim {embed} not divisible by heads {heads}")
    elif k in ("layer_norm", "group_norm"):
        if "gamma" not in w or "beta" not in w:
            raise GraphError(f"layer {layer.id}: {k} needs gamma/beta")
        if k == "group_norm" and "groups" not in a:
            raise GraphError(f"layer {layer.id}: group_norm needs 'groups' attr")
    elif k == "batch_norm":
        if "scale" not in w or "shift" not in w:
            raise GraphError(f"layer {layer.id}: batch_norm needs folded scale/shift")
    elif k == "activation":
        if a.get("fn") not in ACTIVATION_FNS:
            raise GraphError(
                f"layer {layer.id}: activation fn must be one of {ACTIVATION_FNS}")
    elif k == "add":
        if len(layer.inputs) != 2:
            raise GraphError(f"layer {layer.id}: add needs exactly two inputs")
    elif k == "reshape":
        if a.get("op") not in ("nchw_to_tokens", "tokens_to_nchw", "flatten"):
            raise GraphError(f"layer {layer.id}: unknown reshape op {a.get('op')!r}")
    elif k == "pool":
        if a.get("op") not in ("mean_tokens", "global_avg"):
            raise GraphError(f"layer {layer.id}: unknown pool op {a.get('op')!r}")


def sites_for_layer(layer: LayerSpec, mode: str) -> list[Site]:
    lid, k = layer.id, layer.kind
    full = mode == "full"
    if k in ("conv2d", "depthwise_conv2d"):
        return [Site(lid, "weight", "weight", 0),
                Site(lid, "input", "activation", 1)]
    if k == "linear":
        return [Site(lid, "weight", "weight", 0),
                Site(lid, "input", "activation", -1)]
    if k == "matmul":
        return [Site(lid, "input_a", "activation", -1),
                Site(lid, "input_b", "activation", -1)]
    if k == "mhsa":
        sites = [Site(lid, "input", "activation", -1),
                 Site(lid, "w_q", "weight", 0),
                 Site(lid, "w_k", "weight", 0),
                 Site(lid, "w_v", "weight", 0),
                 Site(lid, "w_o", "weight", 0),
                 Site(lid, "attn_q", "activation", -1),
                 Site(lid, "attn_k", "activation", -1),
                 Site(lid, "attn_v", "activation", -1),
                 Site(lid, "attn_probs", "activation", -1, allow_per_channel=False),
                 Site(lid, "proj_in", "activation", -1)]
        if full:
            sites.append(Site(lid, "softmax_in", "activation", -1,
                              allow_per_channel=False))
        return sites
    if k == "softmax" and full:
        return [Site(lid, "input", "activation", -1, allow_per_channel=False)]
    if k in ("layer_norm", "group_norm", "batch_norm") and full:
        axis = layer.attrs.get("channel_axis", 1 if k != "layer_norm" else -1)
        return [Site(lid, "input", "activation", axis)]
    return []


# ---------------------------------------------------------------------------
# execution


def quant_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                    d_k: int | None = None, qparams: dict | None = None,
                    tape: Tape | None = None, capture=None) -> Tensor:
    """Per-head softmax(QK^T / sqrt(d_k)) V over (N, T, E) projections.

    qparams may quantize the operands of both matrix products ("q", "k", "v",
    "probs") and, in full mode, the softmax input ("softmax_in"). capture is
    an optional callable(name, Tensor) observing the pre-quant values.
    """
    n, t, e = q.shape
    if heads < 1 or e % heads != 0:
        raise GraphError(f"embedding dim {e} not divisible by head count {heads}")
    dk = e // heads
    if d_k is not None and d_k != dk:
        raise GraphError(f"d_k={d_k} inconsistent with embed {e} / heads {heads}")
    qparams = qparams or {}

    def site(name: str, x: Tensor) -> Tensor:
        if capture is not None:
            capture(name, x)
        p = qparams.get(name)
        return quantize_dequantize(x, p, tape) if p is not None else x

    def split(x: Tensor) -> Tensor:
        x = T.reshape(x, (n, t, heads, dk), tape)
        return T.transpose(x, (0, 2, 1, 3), tape)

    qh = split(site("q", q))
    kh = split(site("k", k))
    vh = split(site("v", v))
    scores = T.scale(T.matmul(qh, kh, tape, transpose_b=True),
                     1.0 / math.sqrt(dk), tape)
    scores = site("softmax_in", scores)
    probs = T.softmax(scores, axis=-1, tape=tape)
    probs = site("probs", probs)
    ctx = T.matmul(probs, vh, tape)
    ctx = T.transpose(ctx, (0, 2, 1, 3), tape)
    return T.reshape(ctx, (n, t, e), tape)


def run_layer(layer: LayerSpec, inputs: list[Tensor], qcfg: dict,
              tape: Tape | None = None, capture: dict | None = None) -> Tensor:
    """Execute one layer, fake-quantizing every site present in qcfg.

    capture, when given, is filled with the full-precision value of every
    site tensor keyed by (layer_id, site_name).
    """

    def site(name: str, x: Tensor) -> Tensor:
        if capture is not None:
            capture[(layer.id, name)] = x.data
        p = qcfg.get((layer.id, name))
        return quantize_dequantize(x, p, tape) if p is not None else x

    k, a, w = layer.kind, layer.attrs, layer.weights
    if k in ("conv2d", "depthwise_conv2d"):
        x = site("input", inputs[0])
        wq = site("weight", w["w"])
        groups = w["w"].shape[0] if k == "depthwise_conv2d" else a.get("groups", 1)
        return T.conv2d(x, wq, w.get("b"), stride=a.get("stride", 1),
                        padding=a.get("padding", 0), groups=groups, tape=tape)
    if k == "linear":
        x = site("input", inputs[0])
        wq = site("weight", w["w"])
        out = T.matmul(x, wq, tape, transpose_b=True)
        if "b" in w:
            out = T.add(out, w["b"], tape)
        return out
    if k == "matmul":
        xa = site("input_a", inputs[0])
        xb = site("input_b", inputs[1])
        return T.matmul(xa, xb, tape, transpose_b=a.get("transpose_b", False))
    if k == "mhsa":
        return _run_mhsa(layer, inputs[0], qcfg, tape, capture)
    if k == "softmax":
        x = site("input", inputs[0])
        return T.softmax(x, axis=a.get("axis", -1), tape=tape)
    if k == "layer_norm":
        x = site("input", inputs[0])
        return T.layer_norm(x, w["gamma"], w["beta"], eps=a.get("eps", 1e-5), tape=tape)
    if k == "group_norm":
        x = site("input", inputs[0])
        return T.group_norm(x, w["gamma"], w["beta"], groups=a["groups"],
                            eps=a.get("eps", 1e-5),
                            channel_axis=a.get("channel_axis", 1), tape=tape)
    if k == "batch_norm":
        x = site("input", inputs[0])
        return T.batch_norm_folded(x, w["scale"], w["shift"],
                                   channel_axis=a.get("channel_axis", 1), tape=tape)
    if k == "activation":
        fn = {"gelu": T.gelu, "silu": T.silu, "relu": T.relu}[a["fn"]]
        return fn(inputs[0], tape)
    if k == "add":
        return T.add(inputs[0], inputs[1], tape)
    if k == "reshape":
        return _run_reshape(a, inputs[0], tape)
    if k == "pool":
        if a["op"] == "mean_tokens":
            return T.mean(inputs[0], (1,), tape)
        return T.mean(inputs[0], (2, 3), tape)
    raise GraphError(f"unknown layer kind '{k}'")


def _run_mhsa(layer: LayerSpec, x: Tensor, qcfg: dict, tape, capture) -> Tensor:
    w = layer.weights
    heads = layer.attrs["heads"]

    def site(name: str, t: Tensor) -> Tensor:
        if capture is not None:
            capture[(layer.id, name)] = t.data
        p = qcfg.get((layer.id, name))
        return quantize_dequantize(t, p, tape) if p is not None else t

    def project(xq: Tensor, wname: str, bname: str) -> Tensor:
        out = T.matmul(xq, site(wname, w[wname]), tape, transpose_b=True)
        if bname in w:
            out = T.add(out, w[bname], tape)
        return out

    xq = site("input", x)
    q = project(xq, "w_q", "b_q")
    k = project(xq, "w_k", "b_k")
    v = project(xq, "w_v", "b_v")

    local_names = {"q": "attn_q", "k": "attn_k", "v": "attn_v",
                   "probs": "attn_probs", "softmax_in": "softmax_in"}
    local_params = {short: qcfg[(layer.id, name)]
                    for short, name in local_names.items()
                    if (layer.id, name) in qcfg}
    cap = None
    if capture is not None:
        def cap(short, t):
            capture[(layer.id, local_names[short])] = t.data
    ctx = quant_attention(q, k, v, heads, qparams=local_params, tape=tape,
                          capture=cap)
    ctx = site("proj_in", ctx)
    out = T.matmul(ctx, site("w_o", w["w_o"]), tape, transpose_b=True)
    if "b_o" in w:
        out = T.add(out, w["b_o"], tape)
    return out


def _run_reshape(attrs: dict, x: Tensor, tape) -> Tensor:
    op = attrs["op"]
    if op == "nchw_to_tokens":
        n, c, h, w = x.shape
        moved = T.transpose(x, (0, 2, 3, 1), tape)
        return T.reshape(moved, (n, h * w, c), tape)
    if op == "tokens_to_nchw":
        n, t, e = x.shape
        h, w = attrs["h"], attrs["w"]
        if h * w != t:
            raise GraphError(f"tokens_to_nchw: {h}x{w} != token count {t}")
        grid = T.reshape(x, (n, h, w, e), tape)
        return T.transpose(grid, (0, 3, 1, 2), tape)
    n = x.shape[0]
    return T.reshape(x, (n, int(np.prod(x.shape[1:]))), tape)


def _execute(graph: Graph, x: Tensor, qcfg: dict, watch, tape: Tape | None,
             capture: dict | None = None):
    if tuple(x.shape[1:]) != graph.input_shape:
        raise GraphExecutionError(
            f"input shape {tuple(x.shape[1:])} does not match graph input "
            f"{graph.input_shape}")
    watch = frozenset(watch)
    cur = tape.leaf(x) if tape is not None else x
    vals: dict[int, Tensor] = {GRAPH_INPUT: cur}
    outputs: dict[int, Tensor] = {}
    for layer in graph.layers:
        ins = []
        for pid in layer.inputs:
            if pid not in vals:
                raise GraphExecutionError(
                    f"layer {layer.id} ({layer.kind}): missing producer {pid}")
            ins.append(vals[pid])
        try:
            out = run_layer(layer, ins, qcfg, tape, capture)
        except GraphExecutionError:
            raise
        except Exception as e:
            raise GraphExecutionError(
                f"layer {layer.id} ({layer.kind}): {e}") from e
        vals[layer.id] = out
        if layer.id in watch:
            outputs[layer.id] = out
            if tape is not None and out.node is not None:
                tape.watch(out.node)
    return vals[graph.output_id], outputs


def forward_fp(graph: Graph, x: Tensor, watch=(), tape: Tape | None = None):
    """Full-precision forward; returns (logits, {layer_id: output}) for watch."""
    return _execute(graph, x, {}, watch, tape)


def forward_quant(graph: Graph, x: Tensor, qcfg: dict, watch=(),
                  tape: Tape | None = None):
    """Fake-quant forward. Sites absent from qcfg run in full precision, so an
    empty qcfg reproduces forward_fp bit for bit."""
    for key in qcfg:
        lid, name = key
        try:
            graph.site(lid, name)
        except GraphError as e:
            raise SiteCoverageError(f"qconfig entry for unknown site {lid}:{name}") from e
    return _execute(graph, x, qcfg, watch, tape)


def check_site_coverage(graph: Graph, qcfg: dict) -> None:
    """Error unless qcfg covers the graph's declared quant sites exactly."""
    declared = {s.key for s in graph.quant_sites}
    got = set(qcfg)
    missing = declared - got
    extra = got - declared
    if missing or extra:
        def fmt(keys):
            return ", ".join(f"{l}:{n}" for l, n in sorted(keys)) or "-"
        raise SiteCoverageError(
            f"site coverage mismatch: missing [{fmt(missing)}], "
            f"unexpected [{fmt(extra)}]")


# ---------------------------------------------------------------------------
# manifest + weight blobs


def save_manifest(graph: Graph, manifest_path: str, blobs_dirname: str = "blobs") -> None:
    """Write the model manifest plus one blob file per weight tensor."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    blob_dir = os.path.join(base, blobs_dirname)
    os.makedirs(blob_dir, exist_ok=True)
    layers_doc = []
    for layer in graph.layers:
        wdoc = {}
        for name, t in sorted(layer.weights.items()):
            rel = f"{blobs_dirname}/l{layer.id}_{name}.hqt"
            T.save_tensor(os.path.join(base, rel), t)
            wdoc[name] = rel
        layers_doc.append({
            "id": layer.id,
            "kind": layer.kind,
            "attrs": layer.attrs,
            "inputs": list(layer.inputs),
            "weights": wdoc,
        })
    doc = {
        "format": MANIFEST_FORMAT,
        "input_shape": list(graph.input_shape),
        "output": graph.output_id,
        "mode": graph.mode,
        "layers": layers_doc,
        "bridge_blocks": graph.bridge_annotations,
    }
    with open(manifest_path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_manifest(manifest_path: str) -> Graph:
    with open(manifest_path) as f:
        doc = json.load(f)
    if doc.get("format") != MANIFEST_FORMAT:
        raise GraphError(
            f"unsupported manifest format {doc.get('format')!r}, "
            f"expected {MANIFEST_FORMAT!r}")
    base = os.path.dirname(os.path.abspath(manifest_path))
    layers = []
    for ldoc in doc["layers"]:
        kind = ldoc.get("kind")
        if kind not in LAYER_KINDS:
            raise GraphError(
                f"unknown layer kind '{kind}' at layer {ldoc.get('id')}; "
                f"known kinds: {', '.join(LAYER_KINDS)}")
        weights = {name: T.load_tensor(os.path.join(base, rel))
                   for name, rel in ldoc.get("weights", {}).items()}
        layers.append(LayerSpec(id=int(ldoc["id"]), kind=kind,
                                attrs=dict(ldoc.get("attrs", {})),
                                inputs=[int(i) for i in ldoc.get("inputs", [])],
                                weights=weights))
    return Graph(layers=layers,
                 input_shape=tuple(doc["input_shape"]),
                 output_id=doc.get("output"),
                 mode=doc.get("mode", "partial"),
                 bridge_annotations=list(doc.get("bridge_blocks", [])))
