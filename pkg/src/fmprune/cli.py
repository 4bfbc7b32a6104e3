"""Command-line front end: stats, prune, apply, report.

Each pipeline stage is a subcommand so multi-round prune/fine-tune/re-export
procedures stay shell loops outside the engine. Outputs are written
atomically (temp file + rename). Every error class maps to a fixed nonzero
exit code; see errors.py.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import graph as graphmod
from . import select as selectmod
from . import stats as statsmod
from . import surgery as surgerymod
from . import tensorio
from .errors import FmpruneError


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_inputs(args):
    manifest = tensorio.load_manifest(args.manifest)
    graph_path = Path(args.graph) if args.graph else manifest.model_graph_path
    g = graphmod.load_graph(graph_path)
    acts = tensorio.load_activations(manifest, graph=g)
    return g, acts


def _stats_list(acts, k):
    return [
        statsmod.compute_layer_stats(acts[lid], k=k) for lid in sorted(acts)
    ]


def cmd_stats(args) -> int:
    g, acts = _load_inputs(args)
    stats = _stats_list(acts, args.topk)
    out = Path(args.out)
    if args.format == "json":
        doc = [
            {
                "layer_id": s.layer_id,
                "m_std": [float(v) for v in s.m_std],
                "m_corr": [float(v) for v in s.m_corr],
                "topk_corr": None
                if s.topk_corr is None
                else [float(v) for v in s.topk_corr],
                "k": s.k,
            }
            for s in stats
        ]
        _write_atomic(out, json.dumps(doc, indent=2) + "\n")
    else:
        _write_atomic(out, statsmod.stats_report(stats))
    return 0


def _prune_config(args) -> selectmod.PruneConfig:
    return selectmod.PruneConfig(
        dfs_mode=args.dfs_mode,
        dfs_percentile=args.dfs_percentile,
        nu=args.nu,
        grouping="residual_two_group" if args.grouping == "residual" else "global",
        topk_k=args.topk,
    )


def cmd_prune(args) -> int:
    g, acts = _load_inputs(args)
    config = _prune_config(args)
    plan = selectmod.run_pruning(g, acts, config)
    pruned = graphmod.apply_plan_shapes(g, plan)
    report = graphmod.reduction_report(g, pruned)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_atomic(out / "plan.json", plan.to_json())
    if args.format == "json":
        _write_atomic(out / "reduction.json", json.dumps(report, indent=2) + "\n")
    else:
        _write_atomic(out / "reduction.txt", graphmod.render_report(report))
    return 0


def cmd_apply(args) -> int:
    g = graphmod.load_graph(args.graph)
    plan_path = Path(args.plan)
    if not plan_path.is_file():
        from .errors import MissingFile

        raise MissingFile(f"no such plan: {plan_path}")
    plan = selectmod.PruningPlan.from_json(plan_path.read_text())
    bundle = surgerymod.load_bundle(args.weights)
    pruned_bundle = surgerymod.apply_plan_weights(bundle, g, plan)
    pruned_graph = graphmod.apply_plan_shapes(g, plan)
    problems = surgerymod.verify_bundle(pruned_bundle, pruned_graph)
    if problems:
        from .errors import ShapeMismatch

        raise ShapeMismatch("pruned bundle failed verification: " + "; ".join(problems))
    surgerymod.save_bundle(pruned_bundle, args.out)
    return 0


def cmd_report(args) -> int:
    g = graphmod.load_graph(args.graph)
    plan = selectmod.PruningPlan.from_json(Path(args.plan).read_text())
    pruned = graphmod.apply_plan_shapes(g, plan)
    report = graphmod.reduction_report(g, pruned)
    text = (
        json.dumps(report, indent=2) + "\n"
        if args.format == "json"
        else graphmod.render_report(report)
    )
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="fmprune",
        description="Diversity/similarity-aware CNN filter pruning pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def add_prune_flags(sp):
        sp.add_argument("--dfs-mode", choices=["mean", "percentile"], default="percentile")
        sp.add_argument("--dfs-percentile", type=float, default=selectmod.DEFAULT_DFS_PERCENTILE)
        sp.add_argument("--nu", type=float, default=selectmod.DEFAULT_NU)
        sp.add_argument("--grouping", choices=["global", "residual"], default="global")

    sp = sub.add_parser("stats", help="compute per-channel statistics report")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--graph", default=None)
    sp.add_argument("--out", required=True)
    sp.add_argument("--topk", type=int, default=5)
    sp.add_argument("--format", choices=["csv", "json"], default="csv")
    sp.set_defaults(func=cmd_stats)

    sp = sub.add_parser("prune", help="run selection and emit plan + reduction report")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--graph", default=None)
    sp.add_argument("--out", required=True)
    add_prune_flags(sp)
    sp.add_argument("--topk", type=int, default=5)
    sp.add_argument("--format", choices=["csv", "json"], default="json")
    sp.set_defaults(func=cmd_prune)

    sp = sub.add_parser("apply", help="apply a plan to a weight bundle")
    sp.add_argument("--weights", required=True, help="weights_manifest.json path")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_apply)

    sp = sub.add_parser("report", help="reduction report for a graph + plan")
    sp.add_argument("--graph", required=True)
    sp.add_argument("--plan", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--format", choices=["csv", "json"], default="csv")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FmpruneError as e:
        print(f"fmprune: error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
