"""Apply a pruning plan back onto a live model, in place."""

from __future__ import annotations

import json
from pathlib import Path

import torch
from torch import nn

from fmprune.errors import FmpruneError
from fmprune.graph import ModelGraph, GroupSpec, Layer, kept_channel_map, parse_graph
from fmprune.select import PruningPlan

from . import PlanGraphMismatch
from .export import build_records


def _idx(indices):
    return torch.as_tensor(list(indices), dtype=torch.long)


def _slice_conv(mod: nn.Conv2d, out_keep, in_keep, depthwise: bool):
    w = mod.weight.data
    if depthwise:
        mod.weight = nn.Parameter(w[_idx(out_keep)].clone())
        mod.groups = len(out_keep)
        mod.in_channels = mod.out_channels = len(out_keep)
    else:
        mod.weight = nn.Parameter(w[_idx(out_keep)][:, _idx(in_keep)].clone())
        mod.in_channels = len(in_keep)
        mod.out_channels = len(out_keep)
    if mod.bias is not None:
        mod.bias = nn.Parameter(mod.bias.data[_idx(out_keep)].clone())


def _slice_bn(mod: nn.BatchNorm2d, keep):
    i = _idx(keep)
    mod.weight = nn.Parameter(mod.weight.data[i].clone())
    mod.bias = nn.Parameter(mod.bias.data[i].clone())
    mod.running_mean = mod.running_mean[i].clone()
    mod.running_var = mod.running_var[i].clone()
    mod.num_features = len(keep)


def _slice_linear(mod: nn.Linear, in_keep):
    mod.weight = nn.Parameter(mod.weight.data[:, _idx(in_keep)].clone())
    mod.in_features = len(in_keep)


def apply_plan(model: nn.Module, plan_path) -> nn.Module:
    """Rebuild the model's layers around the plan's kept channels."""
    plan = PruningPlan.from_json(Path(plan_path).read_text())
    in_channels, records, edges, groups = build_records(model)
    layers = [
        Layer(
            layer_id=r.layer["id"],
            kind=r.layer["kind"],
            in_channels=r.layer.get("in", 0),
            out_channels=r.layer.get("out", r.layer.get("in", 0)),
            kernel=r.layer.get("kernel", 0),
            stride=r.layer.get("stride", 1),
            padding=r.layer.get("padding"),
            bias=r.layer.get("bias", False),
            prunable=r.layer.get("prunable", False),
        )
        for r in records
    ]
    graph = ModelGraph(
        layers=layers,
        edges=edges,
        groups=[GroupSpec(g["name"], g["kind"], list(g["members"])) for g in groups],
        input_shape=(in_channels, 1, 1),
    )
    known = {l.layer_id for l in graph.layers}
    for lr in plan.layers:
        if lr.layer_id not in known:
            raise PlanGraphMismatch(f"plan layer {lr.layer_id!r} not in this model")
    try:
        kept = kept_channel_map(graph, plan)
    except FmpruneError as e:
        raise PlanGraphMismatch(str(e)) from e
    producers = {b: a for a, b in edges if graph.layer(b).kind != "add_join"}
    for r in records:
        mod = r.module
        if mod is None:
            continue
        lid = r.layer["id"]
        prod = producers.get(lid)
        in_keep = kept[prod] if prod else list(range(r.layer["in"]))
        out_keep = kept[lid]
        if isinstance(mod, nn.Conv2d):
            depthwise = r.layer["kind"] == "depthwise_conv"
            _slice_conv(mod, in_keep if depthwise else out_keep, in_keep, depthwise)
        elif isinstance(mod, nn.BatchNorm2d):
            _slice_bn(mod, in_keep)
        elif isinstance(mod, nn.Linear):
            _slice_linear(mod, in_keep)
    return model


def main(argv=None):
    import argparse

    ap = argparse.ArgumentParser(
        description="Apply a plan to a serialized model (torch.save'd Sequential)"
    )
    ap.add_argument("--model", required=True, help="path to a torch.save'd module")
    ap.add_argument("--plan", required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    model = torch.load(args.model, weights_only=False)
    apply_plan(model, args.plan)
    torch.save(model, args.out)
    print(f"pruned model written to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
