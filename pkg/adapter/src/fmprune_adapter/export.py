"""Export a live model as the engine's graph/manifest/weights files.

Supports models assembled from plain Sequential stacks of Conv2d,
BatchNorm2d, ReLU, pooling, Flatten, Linear, plus PreActBottleneck blocks.
Anything else raises UnsupportedLayer rather than exporting a wrong graph.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from fmprune import tensorio
from fmprune.surgery import WeightBundle, WeightEntry, save_bundle
from fmprune.tensorio import TensorFile

from . import UnsupportedLayer
from .blocks import PreActBottleneck

TRANSPARENT = (nn.ReLU, nn.Flatten, nn.AdaptiveAvgPool2d, nn.Dropout, nn.Identity)


@dataclass
class ExportSession:
    model: nn.Module
    samples: torch.Tensor  # (T, C, H, W)
    out_dir: Path
    prunable: set = None  # layer ids; None means every conv
    layer_filter: set = field(default=None)  # capture list; None means all prunable


@dataclass
class _Record:
    layer: dict  # graph JSON layer dict
    module: nn.Module = None  # parameter source
    capture: nn.Module = None  # module whose forward output is the activation
    capture_point: str = ""


def _flatten(model, prefix=""):
    if isinstance(model, (nn.Sequential,)):
        for name, child in model.named_children():
            qual = f"{prefix}{name}"
            if isinstance(child, nn.Sequential):
                yield from _flatten(child, prefix=f"{qual}.")
            else:
                yield qual, child
    else:
        raise UnsupportedLayer(
            f"model root must be Sequential, got {type(model).__name__}"
        )


def _square(v):
    return v[0] if isinstance(v, (tuple, list)) else v


def build_records(model: nn.Module):
    """Walk the model into graph layer records, edges, and feature groups."""
    first_conv = next(
        (m for m in model.modules() if isinstance(m, nn.Conv2d)), None
    )
    if first_conv is None:
        raise UnsupportedLayer("model has no convolutions to prune")
    in_channels = first_conv.in_channels

    records = [_Record(layer={"id": "input", "kind": "input", "in": in_channels, "out": in_channels})]
    edges = []
    groups = []
    producer = "input"
    channels = in_channels
    last_source = "input"
    open_group = None
    pending_capture = None  # record still awaiting a post-nonlinearity point

    def close_group():
        nonlocal open_group
        if open_group is not None and len(open_group["members"]) > 1:
            groups.append(open_group)
        open_group = None

    for name, mod in _flatten(model):
        if isinstance(mod, nn.Conv2d):
            close_group()
            if mod.kernel_size[0] != mod.kernel_size[1]:
                raise UnsupportedLayer(f"{name}: non-square kernel")
            depthwise = mod.groups == mod.in_channels == mod.out_channels
            if mod.groups != 1 and not depthwise:
                raise UnsupportedLayer(f"{name}: grouped convolution")
            if mod.in_channels != channels:
                raise UnsupportedLayer(f"{name}: channel mismatch in walk")
            rec = _Record(
                layer={
                    "id": name,
                    "kind": "depthwise_conv" if depthwise else "conv",
                    "in": channels,
                    "out": mod.out_channels,
                    "kernel": _square(mod.kernel_size),
                    "stride": _square(mod.stride),
                    "padding": _square(mod.padding),
                    "bias": mod.bias is not None,
                    "prunable": True,
                },
                module=mod,
                capture=mod,
                capture_point="conv_output",
            )
            records.append(rec)
            edges.append([producer, name])
            producer, channels, last_source = name, mod.out_channels, name
            pending_capture = rec
        elif isinstance(mod, nn.BatchNorm2d):
            records.append(
                _Record(
                    layer={"id": name, "kind": "batchnorm", "in": channels, "out": channels},
                    module=mod,
                )
            )
            edges.append([producer, name])
            producer = name
        elif isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
            records.append(
                _Record(
                    layer={
                        "id": name,
                        "kind": "pool",
                        "in": channels,
                        "out": channels,
                        "kernel": _square(mod.kernel_size),
                        "stride": _square(mod.stride),
                        "padding": _square(mod.padding),
                    }
                )
            )
            edges.append([producer, name])
            producer = name
        elif isinstance(mod, nn.ReLU):
            if pending_capture is not None:
                pending_capture.capture = mod
                pending_capture.capture_point = "post_activation"
                pending_capture = None
        elif isinstance(mod, TRANSPARENT):
            pass
        elif isinstance(mod, nn.Linear):
            close_group()
            if mod.in_features != channels:
                raise UnsupportedLayer(
                    f"{name}: linear expects {mod.in_features} features, walk has {channels}"
                )
            records.append(
                _Record(
                    layer={
                        "id": name,
                        "kind": "linear",
                        "in": channels,
                        "out": mod.out_features,
                        "bias": mod.bias is not None,
                    },
                    module=mod,
                )
            )
            edges.append([producer, name])
            producer, channels = name, mod.out_features
            pending_capture = None
        elif isinstance(mod, PreActBottleneck):
            pending_capture = None
            if mod.conv1.in_channels != channels:
                raise UnsupportedLayer(f"{name}: block width mismatch")
            if open_group is None:
                open_group = {
                    "name": f"stage_{last_source}",
                    "kind": "post_addition",
                    "members": [last_source],
                }
            mid = mod.conv1.out_channels
            ids = {k: f"{name}.{k}" for k in ("conv1", "conv2", "conv3", "add")}
            records.append(
                _Record(
                    layer={"id": ids["conv1"], "kind": "conv", "in": channels, "out": mid,
                           "kernel": 1, "stride": 1, "padding": 0, "bias": False,
                           "prunable": True},
                    module=mod.conv1,
                    capture=mod.conv1,
                    capture_point="conv_output",
                )
            )
            records.append(
                _Record(
                    layer={"id": ids["conv2"], "kind": "conv", "in": mid, "out": mid,
                           "kernel": 3, "stride": 1, "padding": 1, "bias": False,
                           "prunable": True},
                    module=mod.conv2,
                    capture=mod.conv2,
                    capture_point="conv_output",
                )
            )
            records.append(
                _Record(
                    layer={"id": ids["conv3"], "kind": "conv", "in": mid, "out": channels,
                           "kernel": 1, "stride": 1, "padding": 0, "bias": False,
                           "prunable": True},
                    module=mod.conv3,
                    capture=mod,  # post-addition features
                    capture_point="post_addition",
                )
            )
            records.append(
                _Record(layer={"id": ids["add"], "kind": "add_join", "in": channels, "out": channels})
            )
            edges.extend(
                [
                    [producer, ids["conv1"]],
                    [ids["conv1"], ids["conv2"]],
                    [ids["conv2"], ids["conv3"]],
                    [producer, ids["add"]],
                    [ids["conv3"], ids["add"]],
                ]
            )
            open_group["members"].append(ids["conv3"])
            producer = ids["add"]
        else:
            raise UnsupportedLayer(f"{name}: {type(mod).__name__} not supported")
    close_group()
    records.append(
        _Record(layer={"id": "output", "kind": "output", "in": channels, "out": channels})
    )
    edges.append([producer, "output"])
    return in_channels, records, edges, groups


def _graph_doc(in_channels, records, edges, groups, samples, prunable):
    h, w = samples.shape[2], samples.shape[3]
    layers = []
    for r in records:
        ld = dict(r.layer)
        if ld.get("prunable"):
            ld["prunable"] = prunable is None or ld["id"] in prunable
        if r.capture_point:
            ld["capture_point"] = r.capture_point
        layers.append(ld)
    return {
        "format_version": "1",
        "input": {"channels": in_channels, "height": h, "width": w},
        "layers": layers,
        "edges": edges,
        "groups": groups,
    }


def export_all(session: ExportSession):
    """Write graph.json, manifest.json, and the weight bundle for a model."""
    model = session.model
    model.eval()
    out_dir = Path(session.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    in_channels, records, edges, groups = build_records(model)
    doc = _graph_doc(in_channels, records, edges, groups, session.samples, session.prunable)
    graph_path = out_dir / "graph.json"
    graph_path.write_text(json.dumps(doc, indent=2) + "\n")

    # forward hooks on each record's capture module
    captured = {}
    handles = []
    capture_ids = {
        ld["id"]
        for ld in doc["layers"]
        if ld.get("prunable")
        and (session.layer_filter is None or ld["id"] in session.layer_filter)
    }
    for r in records:
        if r.capture is None or r.layer["id"] not in capture_ids:
            continue
        lid = r.layer["id"]

        def hook(_mod, _inp, out, lid=lid):
            captured[lid] = out.detach()

        handles.append(r.capture.register_forward_hook(hook))
    with torch.no_grad():
        model(session.samples)
    for hd in handles:
        hd.remove()

    entries = []
    t = int(session.samples.shape[0])
    for lid in sorted(captured):
        arr = captured[lid].cpu().numpy().astype(np.float32)
        p = out_dir / f"act_{lid.replace('.', '_')}.npy"
        tensorio.write_tensor(p, TensorFile(data=arr))
        entries.append(tensorio.ManifestEntry(layer_id=lid, tensor_path=p, samples=t))
    manifest_path = out_dir / "manifest.json"
    tensorio.save_manifest(
        manifest_path,
        tensorio.Manifest(model_graph_path=graph_path, entries=entries),
    )

    bundle_entries = {}
    for r in records:
        m = r.module
        if m is None:
            continue
        lid = r.layer["id"]
        if isinstance(m, nn.BatchNorm2d):
            bundle_entries[lid] = WeightEntry(
                bn=tuple(
                    TensorFile(data=v.detach().cpu().numpy().astype(np.float32).copy())
                    for v in (m.weight, m.bias, m.running_mean, m.running_var)
                )
            )
        else:
            bias = None
            if m.bias is not None:
                bias = TensorFile(data=m.bias.detach().cpu().numpy().astype(np.float32).copy())
            bundle_entries[lid] = WeightEntry(
                weight=TensorFile(
                    data=m.weight.detach().cpu().numpy().astype(np.float32).copy()
                ),
                bias=bias,
            )
    weights_dir = out_dir / "weights"
    weights_manifest = save_bundle(WeightBundle(entries=bundle_entries), weights_dir)
    return {
        "graph": graph_path,
        "manifest": manifest_path,
        "weights": weights_manifest,
    }


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(description="Export a demo model for pruning")
    ap.add_argument("--out", required=True)
    ap.add_argument("--samples", type=int, default=8)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    torch.manual_seed(args.seed)
    model = nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1, bias=False),
        nn.ReLU(),
        nn.Conv2d(16, 32, 3, padding=1, bias=False),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(32, 10),
    )
    x = torch.randn(args.samples, 3, 16, 16)
    paths = export_all(ExportSession(model=model, samples=x, out_dir=args.out))
    for k, v in paths.items():
        print(f"{k}: {v}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
