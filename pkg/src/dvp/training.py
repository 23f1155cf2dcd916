"""Alternating training of decoupled prompts and the reweighting matrix.

Each epoch first re-estimates the reweighting matrix from the current prompts,
then runs one pass of mini-batch SGD for every prompt against its own
description partition. Single-prompt VR is the same loop with one partition
and a fixed matrix.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .descriptions import DescriptionSet, Partitioning
from .encoder import FrozenEncoder
from .errors import CapabilityError, ConfigError, DataError, DivergenceError, FormatError
from .numerics import DEFAULT_TAU, cosine_matrix, cross_entropy, softmax
from .reprogram import (
    PromptSet,
    ReweightingMatrix,
    VisualPrompt,
    apply_prompt,
    avg_omega,
    build_fixed_omega,
    dvplite_masks,
    estimate_prm,
    frame_mask,
    max_omega_batch,
    pad_image,
    partition_labels,
    similarity_matrix,
)

log = logging.getLogger(__name__)

METHODS = ("vr-max", "vr-avg", "dvp-cse", "dvp-cls", "dvplite")
REWEIGHTINGS = ("prm", "avg", "max")
DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 40.0
    momentum: float = 0.9
    batch_size: int = 64
    k: int = 3
    v: int = 3
    tau: float = DEFAULT_TAU
    frame_width: int = 16
    method: str = "dvp-cse"
    seed: int = 0
    reweighting: str | None = None  # None: prm for dvp methods, max/avg for vr methods

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        for name in ("batch_size", "k", "v"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.reweighting is not None and self.reweighting not in REWEIGHTINGS:
            raise ConfigError(f"unknown reweighting {self.reweighting!r}")

    @property
    def resolved_reweighting(self) -> str:
        if self.reweighting is not None:
            return self.reweighting
        if self.method == "vr-max":
            return "max"
        if self.method == "vr-avg":
            return "avg"
        return "prm"

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)


@dataclass
class Dataset:
    images: np.ndarray  # (n, h, w, c) target-size
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DataError("dataset needs images (n, h, w, c) aligned with labels")

    def __len__(self):
        return len(self.labels)


@dataclass
class RiskReport:
    risk_vr: float
    risk_dvp_sum: float
    risk_dvp_integrated: float
    per_partition: list
    mode: str = "dvp-integrated"

    @property
    def value(self) -> float:
        return {"vr": self.risk_vr, "dvp-sum": self.risk_dvp_sum,
                "dvp-integrated": self.risk_dvp_integrated}[self.mode]

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainState:
    prompts: PromptSet
    omega: ReweightingMatrix
    partition: np.ndarray  # partition id per description
    velocity: list
    config: TrainConfig
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def v(self) -> int:
        return len(self.prompts)


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Cosine annealing from lr0 at epoch 0 towards 0 at epoch E."""
    if cfg.epochs == 0:
        return cfg.learning_rate
    return 0.5 * cfg.learning_rate * (1.0 + math.cos(math.pi * epoch / cfg.epochs))


def _weights(omega: ReweightingMatrix, S: np.ndarray, dset: DescriptionSet) -> np.ndarray:
    return omega.for_rows(S, dset)


def _restrict(W: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return W[:, idx, :] if W.ndim == 3 else W[idx]


def _apply(S_i: np.ndarray, W_i: np.ndarray) -> np.ndarray:
    if W_i.ndim == 3:
        return np.einsum("na,naq->nq", S_i, W_i)
    return S_i @ W_i


def partition_logits(X, delta: VisualPrompt, omega, idx, dset: DescriptionSet,
                     enc: FrozenEncoder, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Class logits from the descriptions ``idx`` of one partition scored under ``delta``.

    ``omega`` is a ReweightingMatrix, a (|A|, Q) array, or a per-sample (n, |A|, Q) array.
    Classes without descriptions in the partition get logit 0.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 3
    if single:
        X = X[None]
    idx = np.asarray(idx, dtype=np.int64)
    W = omega.values if isinstance(omega, ReweightingMatrix) else np.asarray(omega)
    if idx.size == 0:
        out = np.zeros((len(X), dset.num_classes))
    else:
        Z = enc.encode_batch(apply_prompt(X, delta))
        S_i = cosine_matrix(Z, dset.embeddings[idx], tau)
        out = _apply(S_i, _restrict(W, idx))
    return out[0] if single else out


def integrated_logits(X, prompts: PromptSet, omega, part, dset: DescriptionSet,
                      enc: FrozenEncoder, tau: float = DEFAULT_TAU) -> np.ndarray:
    """Sum over partitions of ``partition_logits``."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 3
    if single:
        X = X[None]
    lab = partition_labels(part, dset)
    if isinstance(omega, ReweightingMatrix) and omega.per_sample:
        S = similarity_matrix(X, prompts, lab, dset, enc, tau)
        W = omega.for_rows(S, dset)
    else:
        W = omega.values if isinstance(omega, ReweightingMatrix) else np.asarray(omega)
    total = np.zeros((len(X), dset.num_classes))
    for i in range(len(prompts)):
        total = total + partition_logits(X, prompts[i], W, np.flatnonzero(lab == i), dset, enc, tau)
    return total[0] if single else total


def prompt_gradient(X, y, delta: VisualPrompt, omega, idx, dset: DescriptionSet,
                    enc: FrozenEncoder, tau: float = DEFAULT_TAU) -> tuple[np.ndarray, float]:
    """Gradient of the mean per-partition NLL with respect to ``delta.pattern``.

    The reweighting matrix is held constant; for per-sample max weights the
    argmax is taken on the partition's own scores. Returns ``(grad, loss)``
    with ``grad`` zero outside ``delta.mask``.
    """
    if not enc.differentiable:
        raise CapabilityError(f"{enc.kind} encoder cannot back-propagate into a prompt")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return np.zeros_like(delta.pattern), float(np.log(dset.num_classes))
    Xp = apply_prompt(X, delta)
    Z = enc.encode_batch(Xp)
    E = dset.embeddings[idx]
    E_hat = E / np.linalg.norm(E, axis=1, keepdims=True)
    z_norm = np.linalg.norm(Z, axis=1, keepdims=True)
    cos = (Z / z_norm) @ E_hat.T
    S_i = cos / tau
    if isinstance(omega, ReweightingMatrix):
        if omega.per_sample:
            full = np.zeros((len(X), len(dset)))
            full[:, idx] = S_i
            W_i = max_omega_batch(full, dset)[:, idx, :]
        else:
            W_i = omega.values[idx]
    else:
        W_i = _restrict(np.asarray(omega), idx)
    logits = _apply(S_i, W_i)
    n = len(X)
    loss = float(np.mean(cross_entropy(logits, y)))
    g_logits = softmax(logits, axis=1)
    g_logits[np.arange(n), y] -= 1.0
    g_logits /= n
    if W_i.ndim == 3:
        g_S = np.einsum("nq,naq->na", g_logits, W_i)
    else:
        g_S = g_logits @ W_i.T
    g_cos = g_S / tau
    # d cos(z, e) / dz = e_hat / |z| - cos * z / |z|^2
    g_Z = (g_cos @ E_hat) / z_norm - np.sum(g_cos * cos, axis=1, keepdims=True) * Z / z_norm**2
    g_X = enc.vjp_batch(Xp, g_Z)
    grad = g_X.sum(axis=0) * delta.mask
    return grad, loss


def sgd_momentum_step(state: TrainState, grads: list, epoch: int, which=None) -> TrainState:
    """velocity <- momentum * velocity + grad; pattern <- pattern - lr(epoch) * velocity."""
    cfg = state.config
    lr = lr_at(cfg, epoch)
    which = range(state.v) if which is None else which
    for i, g in zip(which, grads):
        p = state.prompts[i]
        vel = cfg.momentum * state.velocity[i] + g * p.mask
        state.velocity[i] = vel
        new = (p.pattern - lr * vel) * p.mask
        if not np.all(np.isfinite(new)):
            raise DivergenceError(f"prompt {i} became non-finite at epoch {epoch}", epoch)
        p.pattern = new
    return state


def _prompt_masks(cfg: TrainConfig, source_dims, v: int) -> list:
    base = frame_mask(source_dims, cfg.frame_width)
    if cfg.method == "dvplite":
        return dvplite_masks(base, v, cfg.seed)
    return [base.copy() for _ in range(v)]


def _estimate_omega(kind: str, S, labels, dset, k) -> ReweightingMatrix:
    if kind == "prm":
        return estimate_prm(S, labels, dset, k)
    if kind == "avg":
        return build_fixed_omega(None, dset, "avg")
    W = max_omega_batch(S[:1], dset)[0]
    return ReweightingMatrix(W, "max", per_sample=True)


def _risks_from_rows(S, S_vr, labels, omega, lab, dset, v):
    W = _weights(omega, S, dset)
    integ = cross_entropy(_apply(S, W), labels)
    per = []
    for i in range(v):
        idx = np.flatnonzero(lab == i)
        if idx.size == 0:
            logits = np.zeros((len(S), dset.num_classes))
        else:
            logits = _apply(S[:, idx], _restrict(W, idx))
        per.append(float(np.mean(cross_entropy(logits, labels))))
    W_vr = _weights(omega, S_vr, dset)
    vr = cross_entropy(_apply(S_vr, W_vr), labels)
    return float(np.mean(vr)), float(sum(per)), float(np.mean(integ)), per


def _single_prompt_rows(X, state, dset, enc):
    """Scores with the first prompt applied to every description (the single-prompt view)."""
    return similarity_matrix(X, PromptSet([state.prompts[0]]), None, dset, enc, state.config.tau)


def empirical_risk(data: Dataset, state: TrainState, dset: DescriptionSet, enc: FrozenEncoder,
                   mode: str = "dvp-integrated") -> RiskReport:
    """All three training risks; ``mode`` picks which one ``RiskReport.value`` returns.

    ``vr`` scores every description under the first prompt; ``dvp-sum`` adds the
    per-partition NLLs; ``dvp-integrated`` is the NLL of the summed logits.
    """
    if mode not in ("vr", "dvp-sum", "dvp-integrated"):
        raise ConfigError(f"unknown risk mode {mode!r}")
    if len(data) == 0:
        raise DataError("empty dataset")
    tau = state.config.tau
    S = similarity_matrix(data.images, state.prompts, state.partition, dset, enc, tau)
    S_vr = _single_prompt_rows(data.images, state, dset, enc)
    vr, dsum, integ, per = _risks_from_rows(S, S_vr, data.labels, state.omega, state.partition,
                                            dset, state.v)
    return RiskReport(vr, dsum, integ, per, mode)


def predict(X, state: TrainState, dset: DescriptionSet, enc: FrozenEncoder) -> np.ndarray:
    logits = integrated_logits(X, state.prompts, state.omega, state.partition, dset, enc,
                               state.config.tau)
    return np.argmax(logits, axis=1)  # first maximum -> lowest class index


def evaluate_accuracy(data: Dataset, state: TrainState, dset: DescriptionSet,
                      enc: FrozenEncoder) -> float:
    if len(data) == 0:
        raise DataError("cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(data.images, state, dset, enc) == data.labels))


def zero_shot_accuracy(data: Dataset, dset: DescriptionSet, enc: FrozenEncoder,
                       reweighting: str = "prm", k: int = 3, tau: float = DEFAULT_TAU,
                       fit: Dataset | None = None) -> float:
    """Accuracy with no prompt at all: padded images straight into the encoder.

    The reweighting matrix (if PRM) is estimated on ``fit`` (default: ``data``).
    """
    fit = data if fit is None else fit

    def rows(X):
        Z = enc.encode_batch(pad_image(X, enc.input_dims))
        return cosine_matrix(Z, dset.embeddings, tau)

    S_fit = rows(fit.images)
    S = rows(data.images)
    if reweighting == "max":
        logits = np.einsum("na,naq->nq", S, max_omega_batch(S, dset))
    else:
        if reweighting == "prm":
            W = estimate_prm(S_fit, fit.labels, dset, k).values
        else:
            W = avg_omega(dset)
        logits = S @ W
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def init_state(cfg: TrainConfig, dset: DescriptionSet, part: Partitioning | None,
               enc: FrozenEncoder) -> TrainState:
    lab = partition_labels(part, dset)
    v = int(part.v) if part is not None else 1
    if cfg.resolved_reweighting == "max" and v > 1:
        raise ConfigError("per-sample max reweighting is only defined for a single prompt")
    masks = _prompt_masks(cfg, enc.input_dims, v)
    prompts = PromptSet.zeros(masks)
    vel = [np.zeros_like(m) for m in masks]
    omega = ReweightingMatrix(avg_omega(dset), "avg")
    return TrainState(prompts, omega, lab, vel, cfg)


def _record(state, data, dset, enc, epoch, S):
    cfg = state.config
    S_vr = S if state.v == 1 else _single_prompt_rows(data.images, state, dset, enc)
    vr, dsum, integ, _ = _risks_from_rows(S, S_vr, data.labels, state.omega, state.partition,
                                          dset, state.v)
    logits = _apply(S, _weights(state.omega, S, dset))
    acc = float(np.mean(np.argmax(logits, axis=1) == data.labels))
    row = {"epoch": epoch, "risk_vr": vr, "risk_dvp_sum": dsum, "risk_dvp_integrated": integ,
           "accuracy": acc, "lr": lr_at(cfg, epoch)}
    for key in ("risk_vr", "risk_dvp_sum", "risk_dvp_integrated"):
        if not np.isfinite(row[key]) or row[key] > DIVERGENCE_LIMIT:
            raise DivergenceError(f"loss diverged at epoch {epoch}: {key}={row[key]}", epoch)
    state.history.append(row)
    return row


def run_training(data: Dataset, dset: DescriptionSet, part: Partitioning | None,
                 enc: FrozenEncoder, cfg: TrainConfig) -> TrainState:
    """Shared loop behind ``train_dvp`` and ``train_standard_vr``.

    History entry ``e`` is measured after ``e`` epochs, with the reweighting
    matrix re-estimated from those prompts; there are ``epochs + 1`` entries and
    the returned state carries the final re-estimate.
    """
    if not enc.differentiable and cfg.epochs > 0:
        raise CapabilityError(f"cannot train prompts through a {enc.kind} encoder")
    if len(data) == 0:
        raise DataError("empty training set")
    state = init_state(cfg, dset, part, enc)
    kind = cfg.resolved_reweighting
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    groups = [np.flatnonzero(state.partition == i) for i in range(state.v)]
    for epoch in range(cfg.epochs + 1):
        # scores under the current prompts, then a fresh reweighting matrix
        S = similarity_matrix(data.images, state.prompts, state.partition, dset, enc, cfg.tau)
        state.omega = _estimate_omega(kind, S, data.labels, dset, cfg.k)
        _record(state, data, dset, enc, epoch, S)
        state.epoch = epoch
        if epoch == cfg.epochs:
            break
        # one pass per prompt over the same shuffled batches
        order = rng.permutation(n)
        batches = [order[s:s + cfg.batch_size] for s in range(0, n, cfg.batch_size)]
        for i in range(state.v):
            for b in batches:
                g, _ = prompt_gradient(data.images[b], data.labels[b], state.prompts[i],
                                       state.omega, groups[i], dset, enc, cfg.tau)
                sgd_momentum_step(state, [g], epoch, which=[i])
        log.debug("epoch %d risk %.6f", epoch, state.history[-1]["risk_dvp_integrated"])
    return state


def train_dvp(data: Dataset, dset: DescriptionSet, part: Partitioning, enc: FrozenEncoder,
              cfg: TrainConfig) -> TrainState:
    return run_training(data, dset, part, enc, cfg)


def train_standard_vr(data: Dataset, dset: DescriptionSet, enc: FrozenEncoder,
                      cfg: TrainConfig) -> TrainState:
    if cfg.resolved_reweighting == "prm" and cfg.reweighting is None:
        cfg = cfg.replace(reweighting="avg")
    return run_training(data, dset, Partitioning.single(dset), enc, cfg)


def prm_grid_search(S: np.ndarray, labels: np.ndarray, dset: DescriptionSet,
                    step: float = 0.05, chunk: int = 20000) -> tuple[np.ndarray, float]:
    """Exhaustive search over PRM-constrained matrices on a simplex grid.

    Every column q ranges over the grid points of the simplex on A(y_q); the
    risk is the mean NLL of ``S @ omega``. Returns ``(best_omega, best_risk)``.
    """
    steps = int(round(1.0 / step))
    if not math.isclose(steps * step, 1.0):
        raise ConfigError("step must divide 1")
    labels = np.asarray(labels, dtype=np.int64)
    Q = dset.num_classes
    cand_cols, cand_logits = [], []
    for q in range(Q):
        idx = dset.members(q)
        comps = _compositions(steps, len(idx)) / steps
        cand_cols.append(comps)
        cand_logits.append(S[:, idx] @ comps.T)  # (n, c_q)
    sizes = [len(c) for c in cand_cols]
    total = int(np.prod(sizes))
    best_risk, best_flat = np.inf, 0
    n = len(labels)
    for start in range(0, total, chunk):
        flat = np.arange(start, min(total, start + chunk))
        choice = np.unravel_index(flat, sizes)
        logits = np.stack([cand_logits[q][:, choice[q]] for q in range(Q)], axis=-1)  # (n, K, Q)
        m = logits.max(axis=-1, keepdims=True)
        lse = (m[..., 0] + np.log(np.exp(logits - m).sum(axis=-1)))
        true = logits[np.arange(n), :, labels]
        risk = (lse - true).mean(axis=0)
        j = int(np.argmin(risk))
        if risk[j] < best_risk:
            best_risk, best_flat = float(risk[j]), int(flat[j])
    choice = np.unravel_index(best_flat, sizes)
    W = np.zeros((len(dset), Q))
    for q in range(Q):
        W[dset.members(q), q] = cand_cols[q][choice[q]]
    return W, best_risk


def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``."""
    if parts == 1:
        return np.array([[total]])
    out = []
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            out.append([first, *rest])
    return np.array(out)


def fixed_risk(S, labels, W) -> float:
    return float(np.mean(cross_entropy(np.asarray(S) @ np.asarray(W), labels)))


HISTORY_FIELDS = ["epoch", "risk_vr", "risk_dvp_sum", "risk_dvp_integrated", "accuracy", "lr"]


def write_history_csv(history: list, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k]
                        for k in HISTORY_FIELDS})


CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, dset: DescriptionSet, path) -> None:
    header = {
        "format": "dvp-checkpoint",
        "version": CHECKPOINT_VERSION,
        "v": state.v,
        "source_dims": list(state.prompts.source_dims),
        "omega_kind": state.omega.kind,
        "omega_per_sample": state.omega.per_sample,
        "description_ids": dset.ids,
        "num_classes": dset.num_classes,
        "epoch": state.epoch,
        "config": asdict(state.config),
    }
    with open(Path(path), "wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header)),
            patterns=np.stack([p.pattern for p in state.prompts]).astype(np.float32),
            masks=np.stack([p.mask for p in state.prompts]).astype(np.uint8),
            omega=state.omega.values,
            partition=state.partition,
        )


def load_checkpoint(path, dset: DescriptionSet | None = None) -> TrainState:
    with np.load(Path(path)) as z:
        try:
            header = json.loads(str(z["header"]))
        except KeyError as exc:
            raise FormatError("checkpoint has no header") from exc
        if header.get("format") != "dvp-checkpoint" or header.get("version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint header {header.get('format')!r} "
                              f"v{header.get('version')}")
        if dset is not None and header["description_ids"] != dset.ids:
            raise FormatError("checkpoint was trained on a different description set")
        masks = z["masks"].astype(np.float64)
        patterns = z["patterns"].astype(np.float64) * masks
        prompts = PromptSet([VisualPrompt(p, m, i) for i, (p, m) in enumerate(zip(patterns, masks))])
        omega = ReweightingMatrix(z["omega"], header["omega_kind"],
                                  per_sample=header["omega_per_sample"])
        cfg = TrainConfig(**header["config"])
        return TrainState(prompts, omega, z["partition"].astype(np.int64),
                          [np.zeros_like(m) for m in masks], cfg, epoch=header["epoch"])
