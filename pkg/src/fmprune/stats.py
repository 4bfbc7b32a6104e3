"""Feature-map statistics: spatial diversity and pairwise similarity.

All accumulation happens in float64 regardless of the input dtype; spatial
extents can be large enough that float32 accumulation loses the digits the
downstream thresholds depend on.
"""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateSpatial, KTooLarge
from .tensorio import ActivationSet


@dataclass(frozen=True)
class FeatureStats:
    layer_id: str
    m_std: np.ndarray
    m_corr: np.ndarray
    topk_corr: Optional[np.ndarray] = None
    k: Optional[int] = None

    def __post_init__(self):
        n = len(self.m_std)
        if len(self.m_corr) != n:
            raise ValueError("m_std and m_corr length mismatch")
        if self.topk_corr is not None and len(self.topk_corr) != n:
            raise ValueError("topk_corr length mismatch")


@dataclass(frozen=True)
class SimilarityMatrix:
    layer_id: str
    channel_ids: list
    values: np.ndarray

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def restrict(self, channels) -> "SimilarityMatrix":
        """Submatrix over the given original channel ids, order preserved."""
        pos = {c: i for i, c in enumerate(self.channel_ids)}
        idx = np.array([pos[c] for c in channels], dtype=int)
        return SimilarityMatrix(
            layer_id=self.layer_id,
            channel_ids=list(channels),
            values=self.values[np.ix_(idx, idx)],
        )


def compute_m_std(acts: ActivationSet) -> np.ndarray:
    """Mean over samples of each channel's spatial sample standard deviation."""
    t, n, h, w = acts.samples.shape
    if h * w < 2:
        raise DegenerateSpatial(
            f"{acts.layer_id}: spatial size {h}x{w} leaves no deviation denominator"
        )
    flat = acts.samples.reshape(t, n, h * w).astype(np.float64)
    return flat.std(axis=2, ddof=1).mean(axis=0)


def compute_similarity_matrix(acts: ActivationSet) -> SimilarityMatrix:
    """Sample-averaged absolute cosine similarity between flattened channels.

    Pairs involving an all-zero channel map contribute 0 for that sample,
    including the zero channel's own diagonal entry.
    """
    t, n, h, w = acts.samples.shape
    flat = acts.samples.reshape(t, n, h * w).astype(np.float64)
    acc = np.zeros((n, n))
    for m in range(t):
        x = flat[m]
        gram = x @ x.T
        norms = np.sqrt(np.diag(gram))
        nonzero = norms > 0.0
        denom = np.outer(norms, norms)
        denom[denom == 0.0] = 1.0
        sim = np.abs(gram) / denom
        sim[~nonzero, :] = 0.0
        sim[:, ~nonzero] = 0.0
        np.fill_diagonal(sim, np.where(nonzero, 1.0, 0.0))
        # mirror the upper triangle so each unordered pair is computed once
        iu = np.triu_indices(n, 1)
        sim[(iu[1], iu[0])] = sim[iu]
        acc += sim
    acc /= t
    np.clip(acc, 0.0, 1.0, out=acc)
    return SimilarityMatrix(
        layer_id=acts.layer_id, channel_ids=list(range(n)), values=acc
    )


def compute_m_corr(sim: SimilarityMatrix) -> np.ndarray:
    """Row means of the similarity matrix, self-pair included."""
    return sim.values.sum(axis=1) / sim.size


def compute_topk_corr(sim: SimilarityMatrix, k: int) -> np.ndarray:
    """Mean of the k largest off-diagonal similarities per row."""
    n = sim.size
    if not 1 <= k <= n - 1:
        raise KTooLarge(f"k={k} out of range for {n} channels (need 1 <= k <= {n - 1})")
    out = np.empty(n)
    for j in range(n):
        row = np.delete(sim.values[j], j)
        # stable sort on negated values: ties resolved toward lower channel index
        order = np.argsort(-row, kind="stable")
        out[j] = row[order[:k]].mean()
    return out


def compute_layer_stats(acts: ActivationSet, k: Optional[int] = 5) -> FeatureStats:
    sim = compute_similarity_matrix(acts)
    m_std = compute_m_std(acts)
    m_corr = compute_m_corr(sim)
    topk = None
    kk = None
    if k is not None and sim.size >= 2:
        kk = min(k, sim.size - 1)
        topk = compute_topk_corr(sim, kk)
    return FeatureStats(
        layer_id=acts.layer_id, m_std=m_std, m_corr=m_corr, topk_corr=topk, k=kk
    )


def _fmt(x) -> str:
    return format(float(x), ".9g")


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return float("nan")
    return float((da * db).sum() / denom)


def stats_report(stats: list) -> str:
    """CSV report: one row per channel, a summary row per layer, one global row.

    Layer summary rows use channel value ALL and carry per-layer means.
    The final row (layer_id ALL, channel PEARSON) carries the global Pearson
    correlation between the m_std and m_corr columns in the m_std position.
    """
    if not stats:
        raise ValueError("stats_report needs at least one layer")
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["layer_id", "channel", "m_std", "m_corr", "topk_corr"])
    all_std, all_corr = [], []
    for st in stats:
        n = len(st.m_std)
        for j in range(n):
            tk = _fmt(st.topk_corr[j]) if st.topk_corr is not None else ""
            wr.writerow([st.layer_id, j, _fmt(st.m_std[j]), _fmt(st.m_corr[j]), tk])
        tk_mean = _fmt(st.topk_corr.mean()) if st.topk_corr is not None else ""
        wr.writerow(
            [st.layer_id, "ALL", _fmt(st.m_std.mean()), _fmt(st.m_corr.mean()), tk_mean]
        )
        all_std.extend(st.m_std.tolist())
        all_corr.extend(st.m_corr.tolist())
    wr.writerow(["ALL", "PEARSON", _fmt(pearson(all_std, all_corr)), "", ""])
    return buf.getvalue()
