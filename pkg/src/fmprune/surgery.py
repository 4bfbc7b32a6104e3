"""Weight surgery: slice pruned channels out of a weight bundle.

Surgery is pure selection. Retained elements are copied bit-exactly; no
reconstruction or compensation is applied.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MissingFile, MissingWeights, ShapeMismatch
from .graph import ModelGraph, kept_channel_map
from .tensorio import TensorFile, read_tensor, write_tensor

BN_FIELDS = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class WeightEntry:
    weight: TensorFile = None
    bias: TensorFile = None
    bn: tuple = None  # (gamma, beta, mean, var) TensorFiles


@dataclass(frozen=True)
class WeightBundle:
    entries: dict = field(default_factory=dict)  # layer_id -> WeightEntry


def load_bundle(manifest_path) -> WeightBundle:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFile(f"no such weights manifest: {manifest_path}")
    doc = json.loads(manifest_path.read_text())
    base = manifest_path.parent
    entries = {}
    for lid, files in doc["entries"].items():
        weight = read_tensor(base / files["weight"]) if "weight" in files else None
        bias = read_tensor(base / files["bias"]) if files.get("bias") else None
        bn = None
        if files.get("bn"):
            bn = tuple(read_tensor(base / p) for p in files["bn"])
        entries[lid] = WeightEntry(weight=weight, bias=bias, bn=bn)
    return WeightBundle(entries=entries)


def save_bundle(bundle: WeightBundle, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"format_version": "1", "entries": {}}
    for lid in sorted(bundle.entries):
        e = bundle.entries[lid]
        files = {}
        if e.weight is not None:
            files["weight"] = f"{lid}.weight.npy"
            write_tensor(out_dir / files["weight"], e.weight)
        if e.bias is not None:
            files["bias"] = f"{lid}.bias.npy"
            write_tensor(out_dir / files["bias"], e.bias)
        if e.bn is not None:
            files["bn"] = [f"{lid}.bn_{name}.npy" for name in BN_FIELDS]
            for name, t in zip(files["bn"], e.bn):
                write_tensor(out_dir / name, t)
        doc["entries"][lid] = files
    manifest = out_dir / "weights_manifest.json"
    tmp = manifest.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, manifest)
    return manifest


def _take(t: TensorFile, idx, axis: int) -> TensorFile:
    return TensorFile(data=np.take(t.data, idx, axis=axis).copy())


def expected_shapes(graph: ModelGraph) -> dict:
    """Weight shapes each layer of the graph implies."""
    out = {}
    for l in graph.layers:
        if l.kind == "conv":
            out[l.layer_id] = {
                "weight": (l.out_channels, l.in_channels, l.kernel, l.kernel),
                "bias": (l.out_channels,) if l.bias else None,
            }
        elif l.kind == "depthwise_conv":
            out[l.layer_id] = {
                "weight": (l.out_channels, 1, l.kernel, l.kernel),
                "bias": (l.out_channels,) if l.bias else None,
            }
        elif l.kind == "linear":
            out[l.layer_id] = {
                "weight": (l.out_channels, l.in_channels),
                "bias": (l.out_channels,) if l.bias else None,
            }
        elif l.kind == "batchnorm":
            out[l.layer_id] = {"bn": (l.in_channels,)}
    return out


def apply_plan_weights(bundle: WeightBundle, graph: ModelGraph, plan) -> WeightBundle:
    """Restrict every weight tensor to the plan's kept channels.

    Output filters are sliced to the layer's kept set; consumer tensors are
    sliced along their input-channel axis to the producer's kept set;
    batchnorm vectors follow the producer. Depthwise layers couple both
    sides to one index set.
    """
    kept = kept_channel_map(graph, plan)
    mismatches = verify_bundle(bundle, graph)
    if mismatches:
        raise ShapeMismatch("bundle inconsistent with graph: " + "; ".join(mismatches))
    planned = {lr.layer_id for lr in plan.layers}
    new_entries = {}
    for l in graph.layers:
        e = bundle.entries.get(l.layer_id)
        if l.kind in ("conv", "depthwise_conv", "linear", "batchnorm") and e is None:
            raise MissingWeights(f"no weights for layer {l.layer_id!r}")
        if e is None:
            continue
        prods = graph.producers(l.layer_id)
        kept_in = kept[prods[0]] if prods else list(range(l.in_channels))
        kept_out = kept[l.layer_id]
        if l.kind == "conv":
            w = _take(_take(e.weight, kept_out, 0), kept_in, 1)
            b = _take(e.bias, kept_out, 0) if e.bias is not None else None
            new_entries[l.layer_id] = WeightEntry(weight=w, bias=b)
        elif l.kind == "depthwise_conv":
            if l.layer_id in planned and kept_out != kept_in:
                raise ShapeMismatch(
                    f"{l.layer_id}: depthwise kept set must equal producer's"
                )
            w = _take(e.weight, kept_in, 0)
            b = _take(e.bias, kept_in, 0) if e.bias is not None else None
            new_entries[l.layer_id] = WeightEntry(weight=w, bias=b)
        elif l.kind == "linear":
            w = _take(e.weight, kept_in, 1)
            new_entries[l.layer_id] = WeightEntry(weight=w, bias=e.bias)
        elif l.kind == "batchnorm":
            bn = tuple(_take(v, kept_in, 0) for v in e.bn)
            new_entries[l.layer_id] = WeightEntry(bn=bn)
        else:
            new_entries[l.layer_id] = e
    return WeightBundle(entries=new_entries)


def verify_bundle(bundle: WeightBundle, graph: ModelGraph) -> list:
    """Shape mismatches between a bundle and a graph; empty iff consistent."""
    problems = []
    exp = expected_shapes(graph)
    for lid, shapes in exp.items():
        e = bundle.entries.get(lid)
        if e is None:
            problems.append(f"{lid}: missing weights")
            continue
        if "weight" in shapes:
            if e.weight is None:
                problems.append(f"{lid}: missing weight tensor")
            elif e.weight.shape != shapes["weight"]:
                problems.append(
                    f"{lid}: weight shape {e.weight.shape} != expected {shapes['weight']}"
                )
            if shapes.get("bias") is not None:
                if e.bias is None:
                    problems.append(f"{lid}: missing bias")
                elif e.bias.shape != shapes["bias"]:
                    problems.append(
                        f"{lid}: bias shape {e.bias.shape} != expected {shapes['bias']}"
                    )
        if "bn" in shapes:
            if e.bn is None or len(e.bn) != 4:
                problems.append(f"{lid}: missing batchnorm vectors")
            else:
                for name, t in zip(BN_FIELDS, e.bn):
                    if t.shape != shapes["bn"]:
                        problems.append(
                            f"{lid}: bn {name} shape {t.shape} != expected {shapes['bn']}"
                        )
    return problems
