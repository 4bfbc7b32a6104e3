"""Two-stage channel selection: diversity thresholding then greedy
similarity elimination, pooled globally across layers.

Diversity selection drops channels whose mean spatial deviation falls below
a threshold pooled over every prunable layer. Similarity selection then
greedily removes survivors that an already-kept reference channel can stand
in for. Multi-branch networks run the scheme per feature group so layers
joined by element-wise addition keep identical channel indices.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyPool, GroupInconsistency, MissingActivations
from .graph import ModelGraph
from .stats import (
    FeatureStats,
    SimilarityMatrix,
    compute_m_std,
    compute_similarity_matrix,
)

DEFAULT_NU = 0.85
DEFAULT_DFS_PERCENTILE = 40.0


@dataclass(frozen=True)
class PruneConfig:
    dfs_mode: str = "percentile"  # mean | percentile
    dfs_percentile: float = DEFAULT_DFS_PERCENTILE
    nu: float = DEFAULT_NU
    grouping: str = "global"  # global | residual_two_group
    topk_k: int = 5

    def __post_init__(self):
        if self.dfs_mode not in ("mean", "percentile"):
            raise ValueError(f"bad dfs_mode {self.dfs_mode!r}")
        if self.grouping not in ("global", "residual_two_group"):
            raise ValueError(f"bad grouping {self.grouping!r}")
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must be in (0, 1], got {self.nu}")
        if not 0.0 < self.dfs_percentile < 100.0:
            raise ValueError(f"dfs_percentile must be in (0, 100)")
        if self.topk_k < 1:
            raise ValueError("topk_k must be positive")

    def to_dict(self) -> dict:
        return {
            "dfs_mode": self.dfs_mode,
            "dfs_percentile": self.dfs_percentile,
            "nu": self.nu,
            "grouping": self.grouping,
            "topk_k": self.topk_k,
        }


@dataclass(frozen=True)
class SfsRemoval:
    channel: int
    reference: int
    similarity: float


@dataclass(frozen=True)
class SelectionResult:
    layer_id: str
    kept: list
    removed_by_dfs: list
    removed_by_sfs: list  # of SfsRemoval
    floor_rule_applied: bool = False


@dataclass(frozen=True)
class PruningPlan:
    config: dict
    beta: list
    layers: list  # of SelectionResult
    groups: list = field(default_factory=list)
    format_version: str = "1"

    def layer(self, layer_id: str) -> SelectionResult:
        for lr in self.layers:
            if lr.layer_id == layer_id:
                return lr
        raise KeyError(layer_id)

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "config": self.config,
            "beta": self.beta,
            "layers": [
                {
                    "layer_id": lr.layer_id,
                    "kept": list(lr.kept),
                    "removed_dfs": list(lr.removed_by_dfs),
                    "removed_sfs": [
                        {
                            "channel": r.channel,
                            "reference": r.reference,
                            "similarity": r.similarity,
                        }
                        for r in lr.removed_by_sfs
                    ],
                    "floor_rule_applied": lr.floor_rule_applied,
                }
                for lr in self.layers
            ],
            "groups": [
                {"name": g["name"], "members": g["members"], "kept": g["kept"]}
                for g in self.groups
            ],
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "PruningPlan":
        doc = json.loads(text)
        layers = [
            SelectionResult(
                layer_id=ld["layer_id"],
                kept=list(ld["kept"]),
                removed_by_dfs=list(ld["removed_dfs"]),
                removed_by_sfs=[
                    SfsRemoval(r["channel"], r["reference"], r["similarity"])
                    for r in ld["removed_sfs"]
                ],
                floor_rule_applied=bool(ld.get("floor_rule_applied", False)),
            )
            for ld in doc["layers"]
        ]
        return PruningPlan(
            config=doc.get("config", {}),
            beta=list(doc.get("beta", [])),
            layers=layers,
            groups=list(doc.get("groups", [])),
            format_version=str(doc.get("format_version", "1")),
        )


def dfs_threshold(all_stats: list, config: PruneConfig) -> float:
    """Pooled diversity threshold over every prunable channel."""
    pool = np.concatenate([np.asarray(s.m_std, dtype=np.float64) for s in all_stats]) \
        if all_stats else np.array([])
    if pool.size == 0:
        raise EmptyPool("no channels to pool a threshold over")
    if config.dfs_mode == "mean":
        return float(pool.mean())
    return float(np.percentile(pool, config.dfs_percentile, method="linear"))


def dfs_select(stats: FeatureStats, beta: float):
    """Threshold channels on diversity; never prune a layer to nothing."""
    m_std = np.asarray(stats.m_std, dtype=np.float64)
    kept = [j for j in range(len(m_std)) if m_std[j] >= beta]
    floor = False
    if not kept:
        kept = [int(np.argmax(m_std))]  # argmax ties break to lower index
        floor = True
    removed = [j for j in range(len(m_std)) if j not in set(kept)]
    return kept, removed, floor


def sfs_select(
    sim: SimilarityMatrix,
    kept_in: list,
    nu: float,
    m_std: Optional[np.ndarray] = None,
):
    """Greedy similarity elimination over the diversity survivors.

    Repeatedly takes the most similar surviving pair; the member with the
    higher diversity (lower index on ties, or when no diversity vector is
    given) becomes a kept reference, and every survivor more similar to it
    than nu is removed with that reference recorded. Entries involving the
    reference and the removed channels are withdrawn before the next search.
    Returns (kept, removals) in ascending channel order.
    """
    sub = sim.restrict(kept_in)
    vals = sub.values
    idx = list(kept_in)
    n = len(idx)
    active = list(range(n))  # positions still participating in max searches
    kept_out = []
    removals = []

    def max_pair():
        best, pair = -1.0, None
        for ai in range(len(active)):
            for bi in range(ai + 1, len(active)):
                a, b = active[ai], active[bi]
                v = vals[a, b]
                if v > best:
                    best, pair = v, (a, b)
        return best, pair

    while True:
        best, pair = max_pair()
        if pair is None or best <= nu:
            break
        a, b = pair
        if m_std is not None:
            sa, sb = m_std[idx[a]], m_std[idx[b]]
            r = a if (sa > sb or (sa == sb and a < b)) else b
        else:
            r = a
        kept_out.append(idx[r])
        survivors = []
        for j in active:
            if j == r:
                continue
            if vals[r, j] > nu:
                removals.append(
                    SfsRemoval(channel=idx[j], reference=idx[r], similarity=float(vals[r, j]))
                )
            else:
                survivors.append(j)
        active = survivors
    kept_out.extend(idx[j] for j in active)
    kept_out.sort()
    removals.sort(key=lambda r: r.channel)
    return kept_out, removals


def _select_one(layer_id, m_std, sim, beta, nu) -> SelectionResult:
    kept_dfs, removed_dfs, floor = dfs_select(
        FeatureStats(layer_id=layer_id, m_std=m_std, m_corr=np.zeros_like(m_std)), beta
    )
    kept, removals = sfs_select(sim, kept_dfs, nu, m_std=m_std)
    return SelectionResult(
        layer_id=layer_id,
        kept=kept,
        removed_by_dfs=removed_dfs,
        removed_by_sfs=removals,
        floor_rule_applied=floor,
    )


def run_pruning(graph: ModelGraph, acts: dict, config: PruneConfig) -> PruningPlan:
    """Full selection scheme: pooled threshold, then per-layer DFS + SFS.

    post_addition groups are always selected jointly from member-averaged
    statistics so element-wise additions stay channel-aligned; under
    residual_two_group those groups additionally get their own pooled
    threshold separate from the rest of the network.
    """
    prunable = [l for l in graph.layers if l.prunable]
    grouped = {}
    for g in graph.groups:
        if g.kind == "post_addition":
            for m in g.members:
                grouped[m] = g.name
    for l in prunable:
        if l.layer_id not in acts:
            raise MissingActivations(f"no activations for prunable layer {l.layer_id!r}")

    m_std = {l.layer_id: compute_m_std(acts[l.layer_id]) for l in prunable}
    sims = {l.layer_id: compute_similarity_matrix(acts[l.layer_id]) for l in prunable}

    solo = [l.layer_id for l in prunable if l.layer_id not in grouped]
    group_stats = {}
    for g in graph.groups:
        if g.kind != "post_addition":
            continue
        members = [m for m in g.members if m in m_std]
        if not members:
            continue
        sizes = {len(m_std[m]) for m in members}
        if len(sizes) != 1:
            raise GroupInconsistency(
                f"group {g.name!r}: member layers have unequal channel counts"
            )
        avg_std = np.mean([m_std[m] for m in members], axis=0)
        avg_sim = SimilarityMatrix(
            layer_id=g.name,
            channel_ids=list(range(len(avg_std))),
            values=np.mean([sims[m].values for m in members], axis=0),
        )
        group_stats[g.name] = (members, avg_std, avg_sim)

    def pool_stats(ids, group_names):
        out = [
            FeatureStats(layer_id=i, m_std=m_std[i], m_corr=np.zeros_like(m_std[i]))
            for i in ids
        ]
        out.extend(
            FeatureStats(
                layer_id=gn,
                m_std=group_stats[gn][1],
                m_corr=np.zeros_like(group_stats[gn][1]),
            )
            for gn in group_names
        )
        return out

    group_names = sorted(group_stats)
    if config.grouping == "residual_two_group" and group_names:
        beta_main = dfs_threshold(pool_stats(solo, []), config) if solo else None
        beta_group = dfs_threshold(pool_stats([], group_names), config)
        betas = [b for b in (beta_main, beta_group) if b is not None]
    else:
        beta_main = beta_group = dfs_threshold(pool_stats(solo, group_names), config)
        betas = [beta_main]

    results = []
    group_records = []
    for lid in solo:
        results.append(_select_one(lid, m_std[lid], sims[lid], beta_main, config.nu))
    for gn in group_names:
        members, avg_std, avg_sim = group_stats[gn]
        sel = _select_one(gn, avg_std, avg_sim, beta_group, config.nu)
        for m in members:
            results.append(
                SelectionResult(
                    layer_id=m,
                    kept=list(sel.kept),
                    removed_by_dfs=list(sel.removed_by_dfs),
                    removed_by_sfs=list(sel.removed_by_sfs),
                    floor_rule_applied=sel.floor_rule_applied,
                )
            )
        group_records.append({"name": gn, "members": members, "kept": list(sel.kept)})

    order = {l.layer_id: i for i, l in enumerate(graph.layers)}
    results.sort(key=lambda r: order[r.layer_id])
    return PruningPlan(
        config=config.to_dict(),
        beta=betas,
        layers=results,
        groups=group_records,
    )
