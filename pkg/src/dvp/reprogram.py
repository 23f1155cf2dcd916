"""Input-side prompting and output-side reweighting.

Shapes used throughout:

* images are ``(h, w, c)`` arrays, batches ``(n, h, w, c)``;
* a similarity row ``M_a`` has one entry per description (set order);
* a reweighting matrix is ``|A| x |Y|`` and maps ``M_a`` to class logits.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .descriptions import DescriptionSet, Partitioning
from .encoder import FrozenEncoder
from .errors import ConfigError, DataError, ShapeError, ValidationError
from .numerics import DEFAULT_TAU, cosine_matrix

PRM_TOL = 1e-9


def _dims3(dims) -> tuple:
    dims = tuple(int(d) for d in dims)
    if len(dims) == 2:
        return dims + (1,)
    if len(dims) != 3:
        raise ShapeError(f"expected (height, width[, channels]), got {dims}")
    return dims


def pad_offsets(target_hw, source_hw) -> tuple[int, int]:
    return (source_hw[0] - target_hw[0]) // 2, (source_hw[1] - target_hw[1]) // 2


def pad_image(x: np.ndarray, source_dims) -> np.ndarray:
    """Center ``x`` (or a batch of images) in a zero grid of ``source_dims``.

    When the margin is odd the extra row/column goes to the bottom/right.
    """
    x = np.asarray(x, dtype=np.float64)
    H, W, C = _dims3(source_dims)
    h, w, c = x.shape[-3:]
    if c != C:
        raise ShapeError(f"channel mismatch: image has {c}, source grid has {C}")
    if h > H or w > W:
        raise ShapeError(f"target image {h}x{w} larger than source grid {H}x{W}")
    top, left = pad_offsets((h, w), (H, W))
    out = np.zeros(x.shape[:-3] + (H, W, C))
    out[..., top:top + h, left:left + w, :] = x
    return out


def frame_mask(source_dims, frame_width: int) -> np.ndarray:
    """1 on the border band of width ``frame_width``, 0 inside; shape (H, W, C)."""
    H, W, C = _dims3(source_dims)
    if frame_width < 0 or 2 * frame_width >= min(H, W):
        raise ConfigError(f"frame width {frame_width} too large for a {H}x{W} grid")
    mask = np.ones((H, W, C))
    mask[frame_width:H - frame_width, frame_width:W - frame_width, :] = 0.0
    return mask


@dataclass
class VisualPrompt:
    pattern: np.ndarray
    mask: np.ndarray
    partition_id: int = 0

    def __post_init__(self):
        self.pattern = np.asarray(self.pattern, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.pattern.shape != self.mask.shape or self.pattern.ndim != 3:
            raise ShapeError("prompt pattern and mask must share an (h, w, c) shape")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError("prompt mask must be binary")
        if not np.all(np.isfinite(self.pattern)):
            raise DataError("prompt pattern has non-finite entries")
        if np.any(self.pattern[self.mask == 0] != 0):
            raise ValidationError("prompt pattern is nonzero outside its mask")

    @property
    def num_parameters(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def zeros(cls, mask, partition_id=0):
        mask = np.asarray(mask, dtype=np.float64)
        return cls(np.zeros_like(mask), mask, partition_id)


class PromptSet:
    """One prompt per partition. Masks may differ between prompts (DVPlite bands)."""

    def __init__(self, prompts: Sequence[VisualPrompt]):
        self.prompts = list(prompts)
        if not self.prompts:
            raise ConfigError("a prompt set needs at least one prompt")
        shape = self.prompts[0].pattern.shape
        for i, p in enumerate(self.prompts):
            if p.pattern.shape != shape:
                raise ShapeError("all prompts must share one shape")
            if p.partition_id != i:
                raise ValidationError(f"prompt {i} carries partition_id {p.partition_id}")

    def __len__(self):
        return len(self.prompts)

    def __getitem__(self, i) -> VisualPrompt:
        return self.prompts[i]

    def __iter__(self):
        return iter(self.prompts)

    @property
    def source_dims(self):
        return self.prompts[0].pattern.shape

    @property
    def num_parameters(self) -> int:
        return sum(p.num_parameters for p in self.prompts)

    @classmethod
    def zeros(cls, masks) -> "PromptSet":
        return cls([VisualPrompt.zeros(m, i) for i, m in enumerate(masks)])

    @classmethod
    def tied(cls, delta: VisualPrompt, v: int) -> "PromptSet":
        return cls([VisualPrompt(delta.pattern.copy(), delta.mask.copy(), i) for i in range(v)])

    def copy(self) -> "PromptSet":
        return PromptSet([VisualPrompt(p.pattern.copy(), p.mask.copy(), i) for i, p in enumerate(self)])


def apply_prompt(x: np.ndarray, delta: VisualPrompt) -> np.ndarray:
    """pad(x) + delta; ``x`` may be a single image or a batch."""
    return pad_image(x, delta.pattern.shape) + delta.pattern


def partition_labels(part: Partitioning | np.ndarray | None, dset: DescriptionSet) -> np.ndarray:
    if part is None:
        return np.zeros(len(dset), dtype=np.int64)
    if isinstance(part, Partitioning):
        return part.labels_for(dset)
    return np.asarray(part, dtype=np.int64)


def embed_partitions(X, prompts: PromptSet, enc: FrozenEncoder, which=None) -> dict:
    """Encoder output of every prompted batch, keyed by partition id."""
    which = range(len(prompts)) if which is None else which
    return {i: enc.encode_batch(apply_prompt(X, prompts[i])) for i in which}


def similarity_matrix(X, prompts: PromptSet, part, dset: DescriptionSet, enc: FrozenEncoder,
                      tau: float = DEFAULT_TAU) -> np.ndarray:
    """Rows ``M_a`` for a batch: entry (j, p) scores image j under the prompt of a_p's partition.

    The encoder runs once per partition that owns at least one description.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 3
    if single:
        X = X[None]
    lab = partition_labels(part, dset)
    if lab.max() >= len(prompts):
        raise ConfigError(f"partitioning uses {lab.max() + 1} partitions, only {len(prompts)} prompts")
    S = np.empty((len(X), len(dset)))
    active = [i for i in range(len(prompts)) if np.any(lab == i)]
    Z = embed_partitions(X, prompts, enc, active)
    for i in active:
        idx = np.flatnonzero(lab == i)
        S[:, idx] = cosine_matrix(Z[i], dset.embeddings[idx], tau)
    return S[0] if single else S


def similarity_row(x, prompts, part, dset, enc, tau=DEFAULT_TAU) -> np.ndarray:
    return similarity_matrix(np.asarray(x)[None], prompts, part, dset, enc, tau)[0]


@dataclass
class ReweightingMatrix:
    values: np.ndarray
    kind: str  # "max" | "avg" | "prm"
    counts: np.ndarray | None = None
    # for kind="max": re-derive the one-hot columns from each sample's own row
    per_sample: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("max", "avg", "prm"):
            raise ConfigError(f"unknown reweighting kind {self.kind!r}")
        if self.per_sample and self.kind != "max":
            raise ConfigError("only max reweighting is recomputed per sample")

    @property
    def shape(self):
        return self.values.shape

    def for_rows(self, S: np.ndarray, dset: DescriptionSet) -> np.ndarray:
        """Matrix applied to each row of ``S``: (|A|, Q) shared, or (n, |A|, Q) if per-sample."""
        if not self.per_sample:
            return self.values
        return max_omega_batch(S, dset)


def check_reweighting(omega: ReweightingMatrix, dset: DescriptionSet, tol: float = PRM_TOL) -> None:
    """Raise ValidationError if ``omega`` breaks its kind's invariants."""
    W = omega.values
    if W.shape != (len(dset), dset.num_classes):
        raise ValidationError(f"omega shape {W.shape} != {(len(dset), dset.num_classes)}")
    if np.any(W < 0) or not np.all(np.isfinite(W)):
        raise ValidationError("omega has negative or non-finite entries")
    outside = W[~dset.support]
    if np.any(outside != 0):
        raise ValidationError("omega is nonzero outside the class support")
    sums = W.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > tol):
        raise ValidationError(f"omega columns do not sum to 1: {sums}")
    if omega.kind == "avg":
        sizes = dset.class_sizes
        expect = np.where(dset.support, 1.0 / sizes[dset.class_ids][:, None], 0.0)
        if not np.allclose(W, expect, rtol=0, atol=1e-15):
            raise ValidationError("avg omega entries must equal 1/m on the support")
    if omega.kind == "max":
        if not np.all((W == 0) | (W == 1)) or np.any(W.sum(axis=0) != 1):
            raise ValidationError("max omega must hold exactly one 1 per column")


def avg_omega(dset: DescriptionSet) -> np.ndarray:
    sizes = dset.class_sizes
    return np.where(dset.support, 1.0 / sizes[dset.class_ids][:, None], 0.0)


def max_omega(M_a: np.ndarray, dset: DescriptionSet) -> np.ndarray:
    W = np.zeros((len(dset), dset.num_classes))
    for q in range(dset.num_classes):
        idx = dset.members(q)
        W[idx[int(np.argmax(M_a[idx]))], q] = 1.0  # argmax returns the first maximum
    return W


def max_omega_batch(S: np.ndarray, dset: DescriptionSet) -> np.ndarray:
    W = np.zeros((len(S), len(dset), dset.num_classes))
    rows = np.arange(len(S))
    for q in range(dset.num_classes):
        idx = dset.members(q)
        W[rows, idx[np.argmax(S[:, idx], axis=1)], q] = 1.0
    return W


def build_fixed_omega(M_a, dset: DescriptionSet, kind: str) -> ReweightingMatrix:
    if kind == "avg":
        return ReweightingMatrix(avg_omega(dset), "avg")
    if kind == "max":
        M_a = np.asarray(M_a, dtype=np.float64)
        if M_a.shape != (len(dset),):
            raise ShapeError(f"M_a has shape {M_a.shape}, expected ({len(dset)},)")
        return ReweightingMatrix(max_omega(M_a, dset), "max")
    raise ConfigError(f"fixed reweighting must be 'max' or 'avg', got {kind!r}")


def class_mean_row(S: np.ndarray, labels: np.ndarray, dset: DescriptionSet) -> np.ndarray:
    """Row whose entries for A(y_q) are the mean similarities over samples of class q.

    Feeding it to ``build_fixed_omega(.., "max")`` gives the dataset-level max matrix
    (argmax of the class-conditional expected score).
    """
    row = np.zeros(len(dset))
    for q in range(dset.num_classes):
        idx = dset.members(q)
        sel = labels == q
        if sel.any():
            row[idx] = S[sel][:, idx].mean(axis=0)
    return row


def logits_from_row(M_a: np.ndarray, omega) -> np.ndarray:
    """``M_a . omega``; accepts a single row or a batch of rows."""
    W = omega.values if isinstance(omega, ReweightingMatrix) else np.asarray(omega)
    M_a = np.asarray(M_a, dtype=np.float64)
    if M_a.shape[-1] != W.shape[-2]:
        raise ShapeError(f"row has {M_a.shape[-1]} entries, omega has {W.shape[-2]} rows")
    if W.ndim == 3:
        return np.einsum("na,naq->nq", M_a, W)
    return M_a @ W


def topk_descriptions(M_a, k: int) -> np.ndarray:
    """Indices of the k largest entries, best first; ties go to the lower index."""
    M_a = np.asarray(M_a, dtype=np.float64)
    if not 1 <= k <= M_a.size:
        raise ConfigError(f"k must lie in 1..{M_a.size}, got {k}")
    return kernels.topk_indices(M_a, k)


def prm_counts(rows, labels, dset: DescriptionSet, k: int) -> np.ndarray:
    """Top-k co-occurrence counts restricted to each class's own descriptions."""
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rows.ndim != 2 or len(rows) == 0:
        raise DataError("PRM estimation needs at least one similarity row")
    if len(rows) != len(labels):
        raise ShapeError("rows and labels are misaligned")
    if rows.shape[1] != len(dset):
        raise ShapeError(f"rows have {rows.shape[1]} entries, set has {len(dset)} descriptions")
    if not 1 <= k <= len(dset):
        raise ConfigError(f"k must lie in 1..{len(dset)}, got {k}")
    counts = kernels.topk_counts(rows, labels, dset.num_classes, k)
    return np.where(dset.support, counts, 0)


def estimate_prm(rows, labels, dset: DescriptionSet, k: int = 3) -> ReweightingMatrix:
    """Normalized top-k hit counts per class; unhit classes fall back to uniform."""
    counts = prm_counts(rows, labels, dset, k)
    W = np.zeros(counts.shape)
    for q in range(dset.num_classes):
        idx = dset.members(q)
        total = counts[idx, q].sum()
        if total == 0:
            W[idx, q] = 1.0 / len(idx)
        else:
            W[idx, q] = counts[idx, q] / total
    return ReweightingMatrix(W, "prm", counts=counts)


def _frame_width_of(mask: np.ndarray) -> int:
    H, W, C = mask.shape
    w = 0
    while w < H and mask[w, W // 2, 0] == 1:
        w += 1
    if w == 0 or not np.array_equal(mask, frame_mask((H, W, C), w)):
        raise ConfigError("mask is not a frame mask")
    return w


def split_prompt_dvplite(mask: np.ndarray, v: int = 4) -> list[np.ndarray]:
    """Top, bottom, left, right bands of a frame; corners belong to top/bottom."""
    if v != 4:
        raise ConfigError("DVPlite splits a frame into exactly four bands")
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 2:
        mask = mask[..., None]
    w = _frame_width_of(mask)
    H, W, _ = mask.shape
    bands = [np.zeros_like(mask) for _ in range(4)]
    bands[0][:w] = 1.0
    bands[1][H - w:] = 1.0
    bands[2][w:H - w, :w] = 1.0
    bands[3][w:H - w, W - w:] = 1.0
    return bands


def dvplite_masks(mask: np.ndarray, v: int, seed: int = 0) -> list[np.ndarray]:
    """Assign the four frame bands to ``v <= 4`` partitions in a seeded random order."""
    if not 1 <= v <= 4:
        raise ConfigError(f"DVPlite supports 1..4 partitions, got {v}")
    bands = split_prompt_dvplite(mask, 4)
    order = np.random.default_rng(seed).permutation(4)
    masks = [np.zeros_like(bands[0]) for _ in range(v)]
    for slot, b in enumerate(order):
        masks[slot % v] += bands[b]
    return masks


def export_prm_csv(omega: ReweightingMatrix, dset: DescriptionSet, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["description"] + [str(q) for q in range(dset.num_classes)])
        for desc_id, row in zip(dset.ids, omega.values):
            w.writerow([desc_id] + [format(float(x), ".9g") for x in row])


def load_prm_csv(path, dset: DescriptionSet) -> ReweightingMatrix:
    with open(Path(path), newline="") as fh:
        rows = list(csv.reader(fh))
    W = np.zeros((len(dset), dset.num_classes))
    for r in rows[1:]:
        W[dset.index(r[0])] = [float(x) for x in r[1:]]
    return ReweightingMatrix(W, "prm")
