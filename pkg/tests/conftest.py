"""Shared naive oracles and fixture builders.

The oracles here are deliberately dumb loop transcriptions, independent of
the library's vectorized paths, so the two can check each other.
"""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from fmprune import tensorio
from fmprune.tensorio import ActivationSet, TensorFile

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


# ---------------------------------------------------------------- oracles


def oracle_m_std(samples):
    """Two-pass sample-std per channel, then mean over samples."""
    t, n, h, w = samples.shape
    out = []
    for j in range(n):
        acc = 0.0
        for m in range(t):
            vals = [float(samples[m, j, a, b]) for a in range(h) for b in range(w)]
            mean = sum(vals) / len(vals)
            ss = sum((v - mean) ** 2 for v in vals)
            acc += math.sqrt(ss / (len(vals) - 1))
        out.append(acc / t)
    return np.array(out)


def _cos_abs(u, v):
    nu_ = math.sqrt(sum(x * x for x in u))
    nv = math.sqrt(sum(x * x for x in v))
    if nu_ == 0.0 or nv == 0.0:
        return 0.0
    return abs(sum(a * b for a, b in zip(u, v))) / (nu_ * nv)


def oracle_similarity(samples):
    t, n, h, w = samples.shape
    flat = samples.reshape(t, n, h * w).astype(np.float64)
    out = np.zeros((n, n))
    for j in range(n):
        for p in range(n):
            acc = 0.0
            for m in range(t):
                acc += _cos_abs(flat[m, j].tolist(), flat[m, p].tolist())
            out[j, p] = acc / t
    return out


def oracle_m_corr(sim_values):
    n = sim_values.shape[0]
    return np.array([sum(sim_values[j, p] for p in range(n)) / n for j in range(n)])


def oracle_topk_corr(sim_values, k):
    n = sim_values.shape[0]
    out = []
    for j in range(n):
        offdiag = [(sim_values[j, p], p) for p in range(n) if p != j]
        # largest values first, ties toward lower channel index
        offdiag.sort(key=lambda vp: (-vp[0], vp[1]))
        out.append(sum(v for v, _ in offdiag[:k]) / k)
    return np.array(out)


def oracle_pearson(a, b):
    n = len(a)
    ma = sum(a) / n
    mb = sum(b) / n
    cov = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    va = sum((x - ma) ** 2 for x in a)
    vb = sum((y - mb) ** 2 for y in b)
    return cov / math.sqrt(va * vb)


def oracle_sfs(sim_values, channels, nu, m_std=None):
    """Straight-line transcription of the greedy similarity elimination.

    Maintains an explicit entry set and removes entries exactly as the
    pseudocode walks them: max search over remaining entries, reference is
    the pair member with higher diversity (lower index on ties), every
    survivor closer than nu to the reference is dropped with the reference's
    entries withdrawn alongside.
    """
    X = list(channels)
    s = {}
    for i, a in enumerate(channels):
        for b in channels[i + 1 :]:
            s[(a, b)] = float(sim_values[a, b])

    def find_max():
        best, pair = None, None
        for (a, b) in sorted(s):
            if best is None or s[(a, b)] > best:
                best, pair = s[(a, b)], (a, b)
        return best, pair

    B = []
    refs = {}
    best, pair = find_max()
    while best is not None and best > nu:
        a, b = pair
        if m_std is not None and m_std[b] > m_std[a]:
            r = b
        else:
            r = a
        B.append(r)
        X.remove(r)
        removed = []
        for j in list(X):
            key = (min(r, j), max(r, j))
            if s[key] > nu:
                removed.append(j)
                X.remove(j)
                refs[j] = (r, s[key])
        gone = set(removed) | {r}
        for key in list(s):
            if key[0] in gone or key[1] in gone:
                del s[key]
        best, pair = find_max()
    B.extend(X)
    return sorted(B), refs


def oracle_conv2d(x, w, pad):
    """Naive cross-correlation: x (C,H,W), w (O,C,K,K) -> (O,H',W')."""
    c, h, wid = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * pad, wid + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wid] = x
    ho, wo = h + 2 * pad - k + 1, wid + 2 * pad - k + 1
    out = np.zeros((o, ho, wo))
    for oo in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oo, i, j] = float(
                    (xp[:, i : i + k, j : j + k] * w[oo]).sum()
                )
    return out


# ---------------------------------------------------------------- fixtures


def random_activations(rng, layer_id="layer", t=None, n=None, h=None):
    t = t or int(rng.integers(1, 5))
    n = n or int(rng.integers(2, 9))
    h = h or int(rng.integers(2, 6))
    data = rng.standard_normal((t, n, h, h))
    return ActivationSet(layer_id=layer_id, samples=data)


def hadamard(n):
    h = np.array([[1.0]])
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


def planted_layer_activations(rng, t=2, n=8, h=4):
    """N channels: ch0 constant, ch1==ch2 duplicates, rest mutually orthogonal.

    Every non-constant channel has the same spatial std, so a pooled
    percentile threshold lands exactly on that shared value and diversity
    selection removes only the constant channel.
    """
    had = hadamard(h * h)
    maps = np.zeros((n, h, h))
    maps[0] = 2.0  # constant channel: zero spatial deviation
    rows = [1, 1, 2, 3, 4, 5, 6, 7][: n - 1]
    for ch, row in zip(range(1, n), rows):
        maps[ch] = had[row].reshape(h, h)
    samples = np.stack([maps] * t)
    return samples


def write_fixture_pipeline(tmp_path, graph_doc, acts_by_layer):
    """Write graph.json + tensors + manifest under tmp_path, return paths."""
    graph_path = tmp_path / "graph.json"
    graph_path.write_text(json.dumps(graph_doc))
    entries = []
    for lid, samples in acts_by_layer.items():
        p = tmp_path / f"{lid}.npy"
        tensorio.write_tensor(p, TensorFile(data=np.asarray(samples, dtype=np.float64)))
        entries.append(
            tensorio.ManifestEntry(layer_id=lid, tensor_path=p, samples=samples.shape[0])
        )
    manifest = tensorio.Manifest(model_graph_path=graph_path, entries=entries)
    manifest_path = tmp_path / "manifest.json"
    tensorio.save_manifest(manifest_path, manifest)
    return manifest_path, graph_path


def planted_graph_doc(n_layers=3, n=8):
    layers = [{"id": "input", "kind": "input", "in": 3, "out": 3}]
    edges = []
    prev = "input"
    prev_ch = 3
    for i in range(n_layers):
        lid = f"conv{i + 1}"
        layers.append(
            {
                "id": lid,
                "kind": "conv",
                "in": prev_ch,
                "out": n,
                "kernel": 3,
                "stride": 1,
                "bias": False,
                "prunable": True,
            }
        )
        edges.append([prev, lid])
        prev, prev_ch = lid, n
    layers.append({"id": "output", "kind": "output", "in": n, "out": n})
    edges.append([prev, "output"])
    return {
        "format_version": "1",
        "input": {"channels": 3, "height": 4, "width": 4},
        "layers": layers,
        "edges": edges,
        "groups": [],
    }


def build_planted_workspace(tmp_path, rng, n_layers=3, n=8):
    """Planted-redundancy pipeline on disk: graph, activations, weights."""
    from fmprune import surgery
    from fmprune.graph import parse_graph
    from fmprune.surgery import WeightBundle, WeightEntry

    doc = planted_graph_doc(n_layers=n_layers, n=n)
    acts = {
        f"conv{i + 1}": planted_layer_activations(rng, n=n) for i in range(n_layers)
    }
    manifest_path, graph_path = write_fixture_pipeline(tmp_path, doc, acts)
    g = parse_graph(json.dumps(doc))
    entries = {}
    for lid, shapes in surgery.expected_shapes(g).items():
        entries[lid] = WeightEntry(
            weight=TensorFile(data=rng.standard_normal(shapes["weight"]))
        )
    weights_manifest = surgery.save_bundle(
        WeightBundle(entries=entries), tmp_path / "weights"
    )
    return {
        "graph": graph_path,
        "manifest": manifest_path,
        "weights": weights_manifest,
        "doc": doc,
    }


@pytest.fixture
def rng():
    return np.random.default_rng(20240824)
