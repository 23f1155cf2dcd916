"""Description sets and their partitioning by cause or by K-means.

Manifest grammar, one entry per line (``#`` starts a comment)::

    classes <num_classes>                      # optional; default max(class_id)+1
    desc <id> <class_id> [<cause>|-] ["<text>"]
"""
from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .encoder import EmbeddingTable
from .errors import ConfigError, DataError, DisjointnessError, FormatError, ValidationError


@dataclass(frozen=True)
class Description:
    id: str
    class_id: int
    embedding: np.ndarray
    cause: int | None = None
    text: str | None = None


class DescriptionSet:
    """Ordered descriptions; index ``p`` in this order is the row of every reweighting matrix."""

    def __init__(self, descriptions: Sequence[Description], num_classes: int | None = None):
        self.descriptions = tuple(descriptions)
        if not self.descriptions:
            raise DataError("description set is empty")
        owner: dict[str, int] = {}
        for d in self.descriptions:
            if d.id in owner:
                if owner[d.id] != d.class_id:
                    raise DisjointnessError(
                        f"description {d.id!r} listed under classes {owner[d.id]} and {d.class_id}"
                    )
                raise DataError(f"duplicate description id {d.id!r}")
            owner[d.id] = d.class_id
        cls = np.array([d.class_id for d in self.descriptions], dtype=np.int64)
        if num_classes is None:
            num_classes = int(cls.max()) + 1
        if cls.min() < 0 or cls.max() >= num_classes:
            raise DataError(f"class ids must lie in 0..{num_classes - 1}")
        self.num_classes = int(num_classes)
        self.class_ids = cls
        self.class_ids.setflags(write=False)
        missing = sorted(set(range(self.num_classes)) - set(cls.tolist()))
        if missing:
            raise DataError(f"classes without descriptions: {missing}")
        emb = np.array([d.embedding for d in self.descriptions], dtype=np.float64)
        if emb.ndim != 2:
            raise DataError("descriptions must share one embedding dimension")
        if np.any(np.linalg.norm(emb, axis=1) == 0):
            raise DataError("zero-norm description embedding")
        self.embeddings = emb
        self.embeddings.setflags(write=False)
        self.ids = [d.id for d in self.descriptions]
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self):
        return len(self.descriptions)

    def index(self, desc_id: str) -> int:
        return self._index[desc_id]

    def members(self, q: int) -> np.ndarray:
        """Indices of the descriptions owned by class ``q``."""
        return np.flatnonzero(self.class_ids == q)

    @property
    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.class_ids, minlength=self.num_classes)

    @property
    def m(self) -> int:
        sizes = self.class_sizes
        return int(sizes[0]) if np.all(sizes == sizes[0]) else int(sizes.max())

    @property
    def causes(self) -> dict[str, int | None]:
        return {d.id: d.cause for d in self.descriptions}

    @property
    def support(self) -> np.ndarray:
        """Boolean |A| x |Y| matrix, True where description p belongs to class q."""
        return self.class_ids[:, None] == np.arange(self.num_classes)[None, :]


_DESC_RE = re.compile(
    r'^desc\s+(?P<id>\S+)\s+(?P<cls>-?\d+)(?:\s+(?P<cause>-|-?\d+))?'
    r'(?:\s+"(?P<text>(?:[^"\\]|\\.)*)")?\s*$'
)


def parse_manifest(text: str) -> tuple[int | None, list[tuple[str, int, int | None, str | None]]]:
    num_classes = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if s.startswith("classes"):
            parts = s.split()
            try:
                num_classes = int(parts[1])
            except (IndexError, ValueError) as exc:
                raise FormatError(f"line {lineno}: bad classes line {s!r}") from exc
            continue
        m = _DESC_RE.match(s)
        if m is None:
            raise FormatError(f"line {lineno}: cannot parse {s!r}")
        cause = m.group("cause")
        cause = None if cause in (None, "-") else int(cause)
        txt = m.group("text")
        if txt is not None:
            txt = txt.replace('\\"', '"').replace("\\\\", "\\")
        rows.append((m.group("id"), int(m.group("cls")), cause, txt))
    return num_classes, rows


def load_descriptions(path, table: EmbeddingTable) -> DescriptionSet:
    num_classes, rows = parse_manifest(Path(path).read_text(encoding="utf-8"))
    descs = []
    for desc_id, cls, cause, txt in rows:
        if desc_id not in table:
            raise DataError(f"no embedding for description {desc_id!r}")
        descs.append(Description(desc_id, cls, table[desc_id], cause, txt))
    return DescriptionSet(descs, num_classes)


def write_manifest(dset: DescriptionSet, path) -> None:
    lines = [f"classes {dset.num_classes}"]
    for d in dset.descriptions:
        cause = "-" if d.cause is None else str(d.cause)
        line = f"desc {d.id} {d.class_id} {cause}"
        if d.text is not None:
            esc = d.text.replace("\\", "\\\\").replace('"', '\\"')
            line += f' "{esc}"'
        lines.append(line)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Partitioning:
    v: int
    assignment: dict
    provenance: str
    warnings: list = field(default_factory=list)
    inertia_history: list = field(default_factory=list)
    centers: np.ndarray | None = None

    def labels_for(self, dset: DescriptionSet) -> np.ndarray:
        """Partition id of every description, in description-set order."""
        return np.array([self.assignment[k] for k in dset.ids], dtype=np.int64)

    def indices(self, dset: DescriptionSet) -> list[np.ndarray]:
        lab = self.labels_for(dset)
        return [np.flatnonzero(lab == i) for i in range(self.v)]

    @classmethod
    def single(cls, dset: DescriptionSet) -> "Partitioning":
        return cls(1, {k: 0 for k in dset.ids}, "single")


def partition_by_cause(
    dset: DescriptionSet, cause_labels: Mapping[str, int] | None = None, v: int = 3
) -> Partitioning:
    if v < 1:
        raise ConfigError("v must be at least 1")
    labels = dict(dset.causes) if cause_labels is None else dict(cause_labels)
    assignment = {}
    for k in dset.ids:
        c = labels.get(k)
        if c is None:
            raise DataError(f"description {k!r} has no cause label")
        if not 0 <= c < v:
            raise DataError(f"cause label {c} of {k!r} outside 0..{v - 1}")
        assignment[k] = int(c)
    part = Partitioning(v, assignment, "cause")
    used = set(assignment.values())
    for i in range(v):
        if i not in used:
            msg = f"cause {i} has no descriptions"
            part.warnings.append(msg)
            warnings.warn(msg, stacklevel=2)
    return part


def _lloyd(X, init_idx, max_iter, tol_abs):
    centers = X[init_idx].copy()
    history = []
    labels, dist = kernels.kmeans_assign(X, centers)
    history.append(float(dist.sum()))
    for _ in range(max_iter):
        new = centers.copy()
        for j in range(len(centers)):
            members = labels == j
            if members.any():
                new[j] = X[members].mean(axis=0)
        # an empty cluster takes over the point farthest from its current center
        for j in range(len(centers)):
            if not np.any(labels == j):
                far = int(np.argmax(dist))
                new[j] = X[far]
                dist[far] = -1.0
        shift = float(np.sum((new - centers) ** 2))
        centers = new
        labels, dist = kernels.kmeans_assign(X, centers)
        history.append(float(dist.sum()))
        if shift <= tol_abs:
            break
    return labels, centers, history


def kmeans(X, v, max_iter=300, tol=1e-4, seed=0, n_init=10):
    """Lloyd's algorithm with ``n_init`` seeded restarts; returns the lowest-inertia run.

    ``tol`` is relative: iteration stops once the squared Frobenius norm of the
    center shift drops to ``tol`` times the mean per-feature variance of ``X``.
    Returns ``(labels, centers, inertia_history)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if v < 1 or v > n:
        raise ConfigError(f"need 1 <= v <= {n}, got v={v}")
    if max_iter < 1:
        raise ConfigError("max_iter must be at least 1")
    tol_abs = tol * float(np.mean(np.var(X, axis=0)))
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        init = rng.choice(n, size=v, replace=False)
        labels, centers, hist = _lloyd(X, init, max_iter, tol_abs)
        if best is None or hist[-1] < best[2][-1]:
            best = (labels, centers, hist)
    return best


def kmeans_partition(
    dset: DescriptionSet, v: int, max_iter: int = 300, tol: float = 1e-4, seed: int = 0,
    n_init: int = 10,
) -> Partitioning:
    if v > len(dset):
        raise ConfigError(f"v={v} exceeds the number of descriptions {len(dset)}")
    labels, centers, hist = kmeans(dset.embeddings, v, max_iter, tol, seed, n_init)
    assignment = {k: int(c) for k, c in zip(dset.ids, labels)}
    return Partitioning(v, assignment, "cluster", inertia_history=hist, centers=centers)


@dataclass
class PartitionReport:
    valid: bool
    counts: np.ndarray  # num_classes x v
    partition_sizes: list
    missing_pairs: list  # (class, partition) with no description

    def to_dict(self):
        return {
            "valid": self.valid,
            "counts": self.counts.tolist(),
            "partition_sizes": self.partition_sizes,
            "missing_pairs": [list(p) for p in self.missing_pairs],
        }


def validate_partitioning(dset: DescriptionSet, part: Partitioning) -> PartitionReport:
    missing = [k for k in dset.ids if k not in part.assignment]
    if missing:
        raise ValidationError(f"descriptions not assigned to any partition: {missing}", missing)
    extra = [k for k in part.assignment if k not in dset._index]
    if extra:
        raise ValidationError(f"assignment names unknown descriptions: {extra}", extra)
    bad = [k for k, i in part.assignment.items() if not 0 <= i < part.v]
    if bad:
        raise ValidationError(f"partition ids outside 0..{part.v - 1} for: {bad}", bad)
    lab = part.labels_for(dset)
    counts = np.zeros((dset.num_classes, part.v), dtype=np.int64)
    np.add.at(counts, (dset.class_ids, lab), 1)
    pairs = [(int(q), int(i)) for q, i in zip(*np.nonzero(counts == 0))]
    return PartitionReport(True, counts, counts.sum(axis=0).tolist(), pairs)
