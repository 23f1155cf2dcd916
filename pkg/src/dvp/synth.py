"""Synthetic multi-cause classification tasks with a known generative model.

An image is a stack of ``num_causes`` horizontal stripes. Stripe ``i`` of a
class-``y`` image shows the pattern ``factor[y, i]`` plus i.i.d. Gaussian pixel
noise. Each (class, cause) pair owns ``descriptions_per_cause`` descriptions
whose embeddings sit near the encoder output of that stripe alone; a
``weak_fraction`` of them get a much larger jitter and carry little signal.

With ``receptive="stripe"`` the MLP encoder splits its hidden units into one
group per stripe. Each group reads its own stripe plus the whole prompt frame
and writes to its own block of embedding coordinates, so a frame pattern can
steer the groups separately. ``receptive="dense"`` is a plain random MLP.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .descriptions import Description, DescriptionSet, load_descriptions, write_manifest
from .encoder import (
    EmbeddingTable,
    FrozenEncoder,
    MLPEncoder,
    load_embedding_table,
    load_encoder,
    make_encoder,
    save_embedding_table,
    save_encoder,
)
from .errors import ConfigError, FormatError
from .reprogram import pad_image, pad_offsets
from .training import Dataset


@dataclass
class SynthSpec:
    num_classes: int = 6
    num_causes: int = 3
    stripe_height: int = 6
    width: int = 18
    channels: int = 1
    source_size: int = 24
    samples_per_class: int = 16
    val_per_class: int = 16
    test_per_class: int = 100
    noise_std: float = 0.3
    factor_scale: float = 0.2
    shared_scale: float = 0.0
    description_jitter: float = 0.3
    weak_fraction: float = 0.5
    weak_jitter: float = 3.0
    descriptions_per_cause: int = 2
    embed_dim: int = 32
    hidden: int = 64
    encoder_kind: str = "mlp"
    receptive: str = "stripe"
    center_encoder: bool = True
    seed: int = 0

    def __post_init__(self):
        ints = ("num_classes", "num_causes", "stripe_height", "width", "channels", "source_size",
                "samples_per_class", "descriptions_per_cause", "embed_dim", "hidden")
        for name in ints:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if min(self.noise_std, self.description_jitter, self.weak_jitter, self.factor_scale,
               self.shared_scale) < 0:
            raise ConfigError("scales and noise levels must be non-negative")
        if not 0.0 <= self.weak_fraction <= 1.0:
            raise ConfigError("weak_fraction must lie in [0, 1]")
        if self.receptive not in ("stripe", "dense"):
            raise ConfigError(f"receptive must be 'stripe' or 'dense', got {self.receptive!r}")
        if self.receptive == "stripe" and self.encoder_kind == "mlp":
            if self.hidden < self.num_causes or self.embed_dim < self.num_causes:
                raise ConfigError("stripe encoder needs hidden and embed_dim >= num_causes")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        h, w = self.target_dims[:2]
        if h >= self.source_size or w >= self.source_size:
            raise ConfigError(f"target {h}x{w} must be smaller than source {self.source_size}")

    @property
    def target_dims(self) -> tuple:
        return (self.num_causes * self.stripe_height, self.width, self.channels)

    @property
    def source_dims(self) -> tuple:
        return (self.source_size, self.source_size, self.channels)

    @property
    def default_frame_width(self) -> int:
        """Width 16 on a 224 grid, scaled to this source size and kept inside the padding."""
        margin = (self.source_size - max(self.target_dims[:2])) // 2
        return max(1, min(margin, round(16 * self.source_size / 224)))


@dataclass
class SynthTask:
    spec: SynthSpec
    train: Dataset
    val: Dataset
    test: Dataset
    descriptions: DescriptionSet
    encoder: FrozenEncoder
    factors: np.ndarray  # (num_classes, num_causes, stripe_h, width, channels)
    means: np.ndarray = field(repr=False, default=None)  # (num_classes, h, w, c) clean images

    @property
    def cause_map(self) -> dict:
        """Cause index -> (row_start, row_stop) of its stripe."""
        h = self.spec.stripe_height
        return {i: (i * h, (i + 1) * h) for i in range(self.spec.num_causes)}


def render(factors_y: np.ndarray, spec: SynthSpec, only: int | None = None) -> np.ndarray:
    """Clean image of one class; ``only`` keeps a single cause's stripe."""
    img = np.zeros(spec.target_dims)
    h = spec.stripe_height
    for i in range(spec.num_causes):
        if only is None or only == i:
            img[i * h:(i + 1) * h] = factors_y[i]
    return img


def stripe_encoder(spec: SynthSpec, seed: int) -> MLPEncoder:
    """MLP whose hidden groups each see one stripe plus the prompt frame."""
    rng = np.random.default_rng(seed)
    H, W, C = spec.source_dims
    h, w = spec.target_dims[:2]
    r0, c0 = pad_offsets((h, w), (H, W))
    frame = np.ones((H, W, C), dtype=bool)
    frame[r0:r0 + h, c0:c0 + w] = False
    n_frame = int(frame.sum())
    W1 = np.zeros((spec.hidden, H, W, C))
    W2 = np.zeros((spec.embed_dim, spec.hidden))
    units = np.array_split(np.arange(spec.hidden), spec.num_causes)
    dims = np.array_split(np.arange(spec.embed_dim), spec.num_causes)
    sh = spec.stripe_height
    for i, (g, e) in enumerate(zip(units, dims)):
        region = np.zeros((H, W, C), dtype=bool)
        region[r0 + i * sh:r0 + (i + 1) * sh, c0:c0 + w] = True
        n_reg = int(region.sum())
        for u in g:
            W1[u][region] = rng.standard_normal(n_reg) / np.sqrt(n_reg)
            W1[u][frame] = rng.standard_normal(n_frame) / np.sqrt(n_frame)
        W2[np.ix_(e, g)] = rng.standard_normal((len(e), len(g))) / np.sqrt(len(g))
    params = {"W1": W1.reshape(spec.hidden, -1), "b1": np.zeros(spec.hidden), "W2": W2,
              "b2": np.zeros(spec.embed_dim)}
    return MLPEncoder(spec.source_dims, spec.embed_dim, seed, params=params)


def _centered(enc, means, factors, spec):
    # shift the output bias so clean images and single-stripe renders average to the origin
    probes = [m for m in means]
    probes += [render(factors[y], spec, only=i) for y in range(spec.num_classes)
               for i in range(spec.num_causes)]
    z = enc.encode_batch(pad_image(np.stack(probes), spec.source_dims)).mean(axis=0)
    if isinstance(enc, MLPEncoder):
        params = dict(enc.parameters())
        params["b2"] = params["b2"] - z
        return MLPEncoder(spec.source_dims, spec.embed_dim, enc.seed, params=params)
    return enc


def _sample(means, per_class, noise, rng):
    n_cls = len(means)
    labels = np.repeat(np.arange(n_cls), per_class)
    imgs = means[labels] + noise * rng.standard_normal((len(labels),) + means.shape[1:])
    return Dataset(imgs, labels)


def generate_task(spec: SynthSpec, factors: np.ndarray | None = None) -> SynthTask:
    """Draw a task; ``factors`` (classes, causes, stripe_h, width, channels) overrides the draw."""
    rng = np.random.default_rng(spec.seed)
    stripe = (spec.stripe_height, spec.width, spec.channels)
    shared = spec.shared_scale * rng.standard_normal((1, spec.num_causes) + stripe)
    own = spec.factor_scale * rng.standard_normal((spec.num_classes, spec.num_causes) + stripe)
    if factors is None:
        factors = shared + own
    else:
        factors = np.asarray(factors, dtype=np.float64)
        if factors.shape != (spec.num_classes, spec.num_causes) + stripe:
            raise ConfigError(f"factors must have shape {(spec.num_classes, spec.num_causes) + stripe}")
    means = np.stack([render(factors[y], spec) for y in range(spec.num_classes)])
    enc_seed = int(rng.integers(2**31))
    if spec.encoder_kind == "mlp" and spec.receptive == "stripe":
        enc = stripe_encoder(spec, enc_seed)
    else:
        enc = make_encoder(spec.encoder_kind, spec.source_dims, spec.embed_dim,
                           seed=enc_seed, hidden=spec.hidden)
    if spec.center_encoder:
        enc = _centered(enc, means, factors, spec)

    descs = []
    for y in range(spec.num_classes):
        for i in range(spec.num_causes):
            clean = enc.encode(pad_image(render(factors[y], spec, only=i), spec.source_dims))
            scale = np.linalg.norm(clean) / np.sqrt(spec.embed_dim)
            for j in range(spec.descriptions_per_cause):
                jit = spec.weak_jitter if rng.random() < spec.weak_fraction else spec.description_jitter
                e = clean + jit * scale * rng.standard_normal(spec.embed_dim)
                descs.append(Description(f"c{y}_k{i}_d{j}", y, e, i,
                                         f"class {y} cause {i} description {j}"))
    dset = DescriptionSet(descs, spec.num_classes)

    train = _sample(means, spec.samples_per_class, spec.noise_std, rng)
    val = _sample(means, spec.val_per_class, spec.noise_std, rng)
    test = _sample(means, spec.test_per_class, spec.noise_std, rng)
    return SynthTask(spec, train, val, test, dset, enc, factors, means)


def bayes_predict(task: SynthTask, images: np.ndarray) -> np.ndarray:
    """Maximum-likelihood class under equal priors and isotropic Gaussian noise."""
    flat = images.reshape(len(images), -1)
    mu = task.means.reshape(len(task.means), -1)
    d = ((flat[:, None, :] - mu[None]) ** 2).sum(axis=-1)
    return np.argmin(d, axis=1)


def bayes_oracle_accuracy(task: SynthTask, draws: int | None = None, seed: int = 12345) -> float:
    """Accuracy of the true-model classifier on the test split, or on ``draws`` fresh samples."""
    if draws is None:
        data = task.test
    else:
        rng = np.random.default_rng(seed)
        per = int(np.ceil(draws / task.spec.num_classes))
        data = _sample(task.means, per, task.spec.noise_std, rng)
    return float(np.mean(bayes_predict(task, data.images) == data.labels))


def _write_block(path: Path, arr: np.ndarray) -> None:
    # EMB1B-style block: 5-byte magic, count and per-item size as u32, 3 pad bytes, float32 body
    import struct

    arr = np.asarray(arr)
    count = arr.shape[0]
    dim = int(np.prod(arr.shape[1:])) if arr.ndim > 1 else 1
    with open(path, "wb") as fh:
        fh.write(struct.pack("<5sII3x", b"EMB1B", count, dim))
        fh.write(arr.astype("<f4").tobytes())


def _read_block(path: Path, shape_tail) -> np.ndarray:
    import struct

    raw = path.read_bytes()
    magic, count, dim = struct.unpack_from("<5sII3x", raw)
    if magic != b"EMB1B" or len(raw) != 16 + 4 * count * dim:
        raise FormatError(f"{path} is not a valid EMB1B block")
    return np.frombuffer(raw[16:], dtype="<f4").reshape((count,) + tuple(shape_tail)).astype(np.float64)


def save_task(task: SynthTask, out_dir) -> Path:
    """Write manifest.json, EMB1B image/label blocks, descriptions.txt, embeddings.emb, encoder.npz."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "dvp-synth-task",
        "version": 1,
        "spec": asdict(task.spec),
        "target_dims": list(task.spec.target_dims),
        "source_dims": list(task.spec.source_dims),
        "splits": {},
        "descriptions": "descriptions.txt",
        "embeddings": "embeddings.emb",
        "encoder": "encoder.npz",
    }
    for name in ("train", "val", "test"):
        ds = getattr(task, name)
        _write_block(out / f"{name}_images.bin", ds.images)
        np.savetxt(out / f"{name}_labels.txt", ds.labels, fmt="%d")
        manifest["splits"][name] = {"images": f"{name}_images.bin", "labels": f"{name}_labels.txt",
                                    "count": len(ds)}
    write_manifest(task.descriptions, out / "descriptions.txt")
    table = EmbeddingTable(task.descriptions.ids, task.descriptions.embeddings)
    save_embedding_table(table, out / "embeddings.emb")
    save_encoder(task.encoder, out / "encoder.npz")
    np.save(out / "factors.npy", task.factors)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_task(task_dir) -> SynthTask:
    d = Path(task_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d} has no manifest.json") from exc
    if manifest.get("format") != "dvp-synth-task":
        raise FormatError("not a synthetic task directory")
    spec = SynthSpec(**manifest["spec"])
    splits = {}
    for name, info in manifest["splits"].items():
        imgs = _read_block(d / info["images"], spec.target_dims)
        labels = np.atleast_1d(np.loadtxt(d / info["labels"], dtype=np.int64))
        splits[name] = Dataset(imgs, labels)
    table = load_embedding_table(d / manifest["embeddings"])
    dset = load_descriptions(d / manifest["descriptions"], table)
    enc = load_encoder(d / manifest["encoder"])
    factors = np.load(d / "factors.npy")
    means = np.stack([render(factors[y], spec) for y in range(spec.num_classes)])
    return SynthTask(spec, splits["train"], splits["val"], splits["test"], dset, enc, factors, means)
