"""Post-hoc reports on a trained run.

HSIC measures dependence between the embeddings that different prompts induce.
The cause and cluster reports summarize the reweighting matrix and the K-means
partitions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .descriptions import DescriptionSet, Partitioning
from .encoder import FrozenEncoder
from .errors import ConfigError, DataError, ShapeError
from .reprogram import PromptSet, ReweightingMatrix, apply_prompt

DEFAULT_GAMMA = 3.0
ESTIMATOR = "biased trace(KHLH)/(n-1)^2, Gaussian kernel exp(-gamma*|a-b|^2)"


def _as_samples(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ShapeError("samples must be an (n, d) array")
    return X


def _centered_gram(X, gamma):
    K = kernels.rbf_gram(X, gamma)
    # H K H without forming H
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def hsic(X, Y, gamma: float = DEFAULT_GAMMA) -> float:
    """Biased HSIC estimate between paired samples ``X`` (n, dx) and ``Y`` (n, dy)."""
    X, Y = _as_samples(X), _as_samples(Y)
    n = len(X)
    if len(Y) != n:
        raise ShapeError(f"paired samples differ in count: {n} vs {len(Y)}")
    if n < 4:
        raise DataError(f"HSIC needs at least 4 samples, got {n}")
    if gamma <= 0:
        raise ConfigError("gamma must be positive")
    Kc = _centered_gram(X, gamma)
    L = kernels.rbf_gram(Y, gamma)
    # trace(K H L H) = sum((H K H) * L)
    return float(np.sum(Kc * L) / (n - 1) ** 2)


@dataclass
class PermutationResult:
    statistic: float
    null: np.ndarray
    threshold: float  # the (1 - alpha) quantile of the null values
    p_value: float

    @property
    def reject(self) -> bool:
        return self.statistic > self.threshold


def hsic_permutation_test(X, Y, gamma: float = DEFAULT_GAMMA, permutations: int = 200,
                          alpha: float = 0.05, seed: int = 0) -> PermutationResult:
    """Compare HSIC(X, Y) against HSIC(X, Y[perm]) over seeded shuffles of ``Y``."""
    X, Y = _as_samples(X), _as_samples(Y)
    n = len(X)
    if len(Y) != n:
        raise ShapeError(f"paired samples differ in count: {n} vs {len(Y)}")
    if n < 4:
        raise DataError(f"HSIC needs at least 4 samples, got {n}")
    Kc = _centered_gram(X, gamma)
    L = kernels.rbf_gram(Y, gamma)
    scale = (n - 1) ** 2
    stat = float(np.sum(Kc * L) / scale)
    rng = np.random.default_rng(seed)
    null = np.empty(permutations)
    for b in range(permutations):
        p = rng.permutation(n)
        null[b] = np.sum(Kc * L[np.ix_(p, p)]) / scale
    thr = float(np.quantile(null, 1.0 - alpha))
    pval = float((1 + np.sum(null >= stat)) / (permutations + 1))
    return PermutationResult(stat, null, thr, pval)


@dataclass
class HsicReport:
    pairwise: np.ndarray
    gamma: float
    n: int
    normalized: bool = True
    estimator: str = ESTIMATOR

    @property
    def mean_off_diagonal(self) -> float:
        v = len(self.pairwise)
        if v < 2:
            return 0.0
        off = self.pairwise[~np.eye(v, dtype=bool)]
        return float(off.mean())

    def to_dict(self):
        return {"pairwise": self.pairwise.tolist(), "gamma": self.gamma, "n": self.n,
                "normalized": self.normalized, "estimator": self.estimator,
                "mean_off_diagonal": self.mean_off_diagonal}


def prompt_embeddings(X, prompts: PromptSet, enc: FrozenEncoder, normalize: bool = True) -> list:
    """Embeddings of the images under each prompt, optionally scaled to unit norm."""
    out = []
    for p in prompts:
        Z = enc.encode_batch(apply_prompt(np.asarray(X, dtype=np.float64), p))
        if normalize:
            Z = Z / np.linalg.norm(Z, axis=1, keepdims=True)
        out.append(Z)
    return out


def pairwise_hsic(X, prompts: PromptSet, enc: FrozenEncoder, gamma: float = DEFAULT_GAMMA,
                  normalize: bool = True) -> HsicReport:
    embs = prompt_embeddings(X, prompts, enc, normalize)
    v = len(embs)
    M = np.zeros((v, v))
    for i in range(v):
        for j in range(i, v):
            M[i, j] = M[j, i] = hsic(embs[i], embs[j], gamma)
    return HsicReport(M, gamma, len(embs[0]), normalize)


@dataclass
class CauseWeightReport:
    weights: np.ndarray  # num_classes x v

    def to_dict(self):
        return {"weights": self.weights.tolist(),
                "dominant_cause": np.argmax(self.weights, axis=1).tolist()}


def cause_weights(omega: ReweightingMatrix, part: Partitioning,
                  dset: DescriptionSet) -> CauseWeightReport:
    """Total reweighting mass each class puts on each partition."""
    if omega.kind != "prm":
        raise ConfigError(f"cause weights need a prm reweighting matrix, got {omega.kind!r}")
    lab = part.labels_for(dset)
    W = np.zeros((dset.num_classes, part.v))
    for i in range(part.v):
        W[:, i] = omega.values[lab == i].sum(axis=0)
    return CauseWeightReport(W)


@dataclass
class ClusterReport:
    ranking: list = field(default_factory=list)  # per cluster: [(class_id, mean distance)]

    def to_dict(self):
        return {"clusters": [[{"class": q, "distance": d} for q, d in r] for r in self.ranking]}


def cluster_nearest_classes(part: Partitioning, dset: DescriptionSet, top_n: int = 3) -> ClusterReport:
    """Per cluster, classes ranked by mean distance of their member descriptions to the center."""
    if top_n < 1:
        raise ConfigError("top_n must be at least 1")
    lab = part.labels_for(dset)
    E = dset.embeddings
    ranking = []
    for i in range(part.v):
        members = lab == i
        if part.centers is not None:
            center = part.centers[i]
        elif members.any():
            center = E[members].mean(axis=0)
        else:
            ranking.append([])
            continue
        rows = []
        for q in range(dset.num_classes):
            sel = members & (dset.class_ids == q)
            if sel.any():
                rows.append((q, float(np.linalg.norm(E[sel] - center, axis=1).mean())))
        rows.sort(key=lambda r: (r[1], r[0]))
        ranking.append(rows[:top_n])
    return ClusterReport(ranking)


def write_json(report, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")


def write_hsic_csv(report: HsicReport, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        v = len(report.pairwise)
        w.writerow([""] + [f"prompt{j}" for j in range(v)])
        for i in range(v):
            w.writerow([f"prompt{i}"] + [format(float(x), ".12g") for x in report.pairwise[i]])


def format_table(header: list, rows: list) -> str:
    """Aligned-column text, right-justified."""
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[j]) for r in cells) for j in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"


def hsic_text(report: HsicReport) -> str:
    v = len(report.pairwise)
    rows = [[f"prompt{i}"] + [f"{x:.6f}" for x in report.pairwise[i]] for i in range(v)]
    return format_table([""] + [f"prompt{j}" for j in range(v)], rows)


def cause_text(report: CauseWeightReport) -> str:
    rows = [[q] + [f"{x:.4f}" for x in r] for q, r in enumerate(report.weights)]
    return format_table(["class"] + [f"cause{i}" for i in range(report.weights.shape[1])], rows)


def cluster_text(report: ClusterReport) -> str:
    rows = []
    for i, r in enumerate(report.ranking):
        for rank, (q, d) in enumerate(r, 1):
            rows.append([i, rank, q, f"{d:.6f}"])
    return format_table(["cluster", "rank", "class", "distance"], rows)
