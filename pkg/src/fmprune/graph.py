"""Model-graph parsing, validation, and parameter/FLOPs accounting.

The schema covers exactly what the supported networks need: plain conv
stacks, depthwise separable blocks, and pre-activation bottlenecks with
identity or projection shortcuts. Anything else is rejected loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import (
    ChannelMismatch,
    CycleDetected,
    DanglingLayer,
    GroupInconsistency,
    SchemaError,
)

LAYER_KINDS = {
    "conv",
    "depthwise_conv",
    "batchnorm",
    "linear",
    "add_join",
    "pool",
    "input",
    "output",
}
GROUP_KINDS = {"sequential_internal", "post_addition"}

# out_channels always tracks in_channels for these kinds
PASSTHROUGH_KINDS = {"depthwise_conv", "batchnorm", "add_join", "pool", "output"}

FLOPS_CONVENTION = "2 FLOPs per multiply-accumulate"


@dataclass(frozen=True)
class Layer:
    layer_id: str
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 0
    stride: int = 1
    padding: Optional[int] = None
    bias: bool = False
    prunable: bool = False


@dataclass(frozen=True)
class GroupSpec:
    name: str
    kind: str
    members: list


@dataclass(frozen=True)
class ModelGraph:
    layers: list
    edges: list
    groups: list = field(default_factory=list)
    input_shape: tuple = (3, 32, 32)

    def layer(self, layer_id: str) -> Layer:
        for l in self.layers:
            if l.layer_id == layer_id:
                return l
        raise SchemaError(f"unknown layer {layer_id!r}")

    def producers(self, layer_id: str) -> list:
        return [a for a, b in self.edges if b == layer_id]

    def consumers(self, layer_id: str) -> list:
        return [b for a, b in self.edges if a == layer_id]


def topological_order(graph: ModelGraph) -> list:
    indeg = {l.layer_id: 0 for l in graph.layers}
    for a, b in graph.edges:
        indeg[b] += 1
    ready = [l.layer_id for l in graph.layers if indeg[l.layer_id] == 0]
    order = []
    while ready:
        lid = ready.pop(0)
        order.append(lid)
        for c in graph.consumers(lid):
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
    if len(order) != len(graph.layers):
        raise CycleDetected("model graph contains a cycle")
    return order


def validate_graph(graph: ModelGraph) -> None:
    ids = [l.layer_id for l in graph.layers]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate layer ids")
    known = set(ids)
    for a, b in graph.edges:
        if a not in known or b not in known:
            raise SchemaError(f"edge references unknown layer: {a!r} -> {b!r}")
    topological_order(graph)
    for l in graph.layers:
        prods = [graph.layer(p) for p in graph.producers(l.layer_id)]
        if l.kind == "input":
            if prods:
                raise SchemaError(f"{l.layer_id}: input layer cannot have producers")
            if l.out_channels != graph.input_shape[0]:
                raise ChannelMismatch(
                    f"{l.layer_id}: input layer carries {l.out_channels} channels, "
                    f"graph input declares {graph.input_shape[0]}"
                )
            continue
        if not prods:
            raise SchemaError(f"{l.layer_id}: non-input layer has no producer")
        if l.kind == "add_join":
            outs = {p.out_channels for p in prods}
            if len(outs) != 1:
                raise ChannelMismatch(
                    f"{l.layer_id}: add_join producers disagree on channels {sorted(outs)}"
                )
            if l.in_channels != outs.pop():
                raise ChannelMismatch(f"{l.layer_id}: in_channels mismatch at add_join")
        else:
            if len(prods) != 1:
                raise SchemaError(f"{l.layer_id}: expects exactly one producer")
            if l.in_channels != prods[0].out_channels:
                raise ChannelMismatch(
                    f"{l.layer_id}: in_channels {l.in_channels} != producer "
                    f"{prods[0].layer_id} out {prods[0].out_channels}"
                )
        if l.kind in PASSTHROUGH_KINDS and l.out_channels != l.in_channels:
            raise ChannelMismatch(
                f"{l.layer_id}: {l.kind} must preserve channel count"
            )
        if l.in_channels < 1:
            raise DanglingLayer(f"{l.layer_id}: zero input channels")
    for g in graph.groups:
        members = [graph.layer(m) for m in g.members]
        if g.kind == "post_addition":
            outs = {m.out_channels for m in members}
            if len(outs) != 1:
                raise GroupInconsistency(
                    f"group {g.name!r}: members disagree on channel count {sorted(outs)}"
                )


def parse_graph(doc) -> ModelGraph:
    if isinstance(doc, (str, bytes)):
        doc = json.loads(doc)
    try:
        inp = doc["input"]
        input_shape = (int(inp["channels"]), int(inp["height"]), int(inp["width"]))
        layers = []
        for ld in doc["layers"]:
            kind = ld["kind"]
            if kind not in LAYER_KINDS:
                raise SchemaError(f"unsupported layer kind {kind!r}")
            layers.append(
                Layer(
                    layer_id=ld["id"],
                    kind=kind,
                    in_channels=int(ld.get("in", 0)),
                    out_channels=int(ld.get("out", ld.get("in", 0))),
                    kernel=int(ld.get("kernel", 0)),
                    stride=int(ld.get("stride", 1)),
                    padding=None if ld.get("padding") is None else int(ld["padding"]),
                    bias=bool(ld.get("bias", False)),
                    prunable=bool(ld.get("prunable", False)),
                )
            )
        edges = [(a, b) for a, b in doc.get("edges", [])]
        groups = []
        for gd in doc.get("groups", []):
            if gd["kind"] not in GROUP_KINDS:
                raise SchemaError(f"unsupported group kind {gd['kind']!r}")
            groups.append(GroupSpec(gd["name"], gd["kind"], list(gd["members"])))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"bad model graph document: {e}") from e
    g = ModelGraph(layers=layers, edges=edges, groups=groups, input_shape=input_shape)
    validate_graph(g)
    return g


def load_graph(path) -> ModelGraph:
    from .errors import MissingFile
    from pathlib import Path

    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such graph file: {path}")
    return parse_graph(path.read_text())


def resolve_shapes(graph: ModelGraph) -> dict:
    """Per-layer output spatial shape (H, W), propagated from the input."""
    shapes = {}
    for lid in topological_order(graph):
        l = graph.layer(lid)
        if l.kind == "input":
            shapes[lid] = (graph.input_shape[1], graph.input_shape[2])
            continue
        ph, pw = shapes[graph.producers(lid)[0]]
        if l.kind in ("conv", "depthwise_conv", "pool") and l.kernel:
            pad = l.kernel // 2 if l.padding is None else l.padding
            shapes[lid] = (
                (ph + 2 * pad - l.kernel) // l.stride + 1,
                (pw + 2 * pad - l.kernel) // l.stride + 1,
            )
        elif l.kind == "linear":
            shapes[lid] = (1, 1)
        else:
            shapes[lid] = (ph, pw)
    return shapes


def count_params(graph: ModelGraph) -> int:
    total = 0
    for l in graph.layers:
        if l.kind == "conv":
            total += l.out_channels * l.in_channels * l.kernel * l.kernel
            if l.bias:
                total += l.out_channels
        elif l.kind == "depthwise_conv":
            total += l.in_channels * l.kernel * l.kernel
            if l.bias:
                total += l.out_channels
        elif l.kind == "batchnorm":
            total += 2 * l.in_channels
        elif l.kind == "linear":
            total += l.in_channels * l.out_channels
            if l.bias:
                total += l.out_channels
    return total


def count_flops(graph: ModelGraph, include_pool: bool = False) -> int:
    shapes = resolve_shapes(graph)
    total = 0
    for l in graph.layers:
        h, w = shapes[l.layer_id]
        if l.kind == "conv":
            total += 2 * l.out_channels * h * w * l.in_channels * l.kernel * l.kernel
        elif l.kind == "depthwise_conv":
            total += 2 * l.out_channels * h * w * l.kernel * l.kernel
        elif l.kind == "linear":
            total += 2 * l.in_channels * l.out_channels
        elif l.kind == "add_join":
            total += l.out_channels * h * w
        elif l.kind == "batchnorm":
            total += 2 * l.out_channels * h * w
        elif l.kind == "pool" and include_pool:
            total += l.out_channels * h * w * l.kernel * l.kernel
    return total


def kept_channel_map(graph: ModelGraph, plan) -> dict:
    """Output kept-channel indices for every layer under the given plan.

    Layers absent from the plan inherit their producer's kept set when their
    channel count passes through, and keep all channels otherwise.
    """
    planned = {lr.layer_id: list(lr.kept) for lr in plan.layers}
    kept = {}
    for lid in topological_order(graph):
        l = graph.layer(lid)
        if l.kind == "input":
            kept[lid] = list(range(l.out_channels))
            continue
        prod_kept = kept[graph.producers(lid)[0]]
        if lid in planned:
            if not planned[lid]:
                raise DanglingLayer(f"{lid}: plan keeps zero channels")
            idx = sorted(planned[lid])
            if len(set(idx)) != len(idx) or idx[0] < 0 or idx[-1] >= l.out_channels:
                raise ChannelMismatch(
                    f"{lid}: plan kept indices out of range for {l.out_channels} channels"
                )
            kept[lid] = idx
        elif l.kind in PASSTHROUGH_KINDS:
            kept[lid] = prod_kept
        else:
            kept[lid] = list(range(l.out_channels))
    return kept


def apply_plan_shapes(graph: ModelGraph, plan) -> ModelGraph:
    """Rewrite channel counts per the plan and re-validate the graph."""
    for lr in plan.layers:
        graph.layer(lr.layer_id)  # raises on unknown layers
    for g in graph.groups:
        if g.kind != "post_addition":
            continue
        planned = {lr.layer_id: tuple(sorted(lr.kept)) for lr in plan.layers}
        sets = {planned[m] for m in g.members if m in planned}
        if len(sets) > 1:
            raise GroupInconsistency(
                f"group {g.name!r}: members pruned to different index sets"
            )
    kept = kept_channel_map(graph, plan)
    new_layers = []
    for lid in topological_order(graph):
        l = graph.layer(lid)
        if l.kind == "input":
            new_layers.append(l)
            continue
        new_in = len(kept[graph.producers(lid)[0]])
        new_out = new_in if l.kind in PASSTHROUGH_KINDS else len(kept[lid])
        if new_in < 1 or new_out < 1:
            raise DanglingLayer(f"{lid}: pruned to zero channels")
        new_layers.append(replace(l, in_channels=new_in, out_channels=new_out))
    by_id = {l.layer_id: l for l in new_layers}
    pruned = ModelGraph(
        layers=[by_id[l.layer_id] for l in graph.layers],
        edges=list(graph.edges),
        groups=list(graph.groups),
        input_shape=graph.input_shape,
    )
    validate_graph(pruned)
    return pruned


def reduction_report(original: ModelGraph, pruned: ModelGraph) -> dict:
    pb, pa = count_params(original), count_params(pruned)
    fb, fa = count_flops(original), count_flops(pruned)
    drop = lambda b, a: round((1.0 - a / b) * 100.0, 1) if b else 0.0
    return {
        "flops_convention": FLOPS_CONVENTION,
        "params_before": pb,
        "params_after": pa,
        "params_drop_pct": drop(pb, pa),
        "flops_before": fb,
        "flops_after": fa,
        "flops_drop_pct": drop(fb, fa),
    }


def render_report(report: dict) -> str:
    return (
        f"# convention: {report['flops_convention']}\n"
        f"params: {report['params_before']} -> {report['params_after']} "
        f"({report['params_drop_pct']:.1f}% drop)\n"
        f"flops: {report['flops_before']} -> {report['flops_after']} "
        f"({report['flops_drop_pct']:.1f}% drop)\n"
    )
