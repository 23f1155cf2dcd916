"""Frozen image encoders and precomputed description embedding tables.

An encoder maps a source-size image (height, width, channels) to an embedding
vector. Parameters are fixed at construction and stored read-only; the only
thing training ever changes is the input.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, DataError, FormatError, ShapeError

ImageDims = tuple  # (height, width, channels)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class FrozenEncoder:
    kind = "abstract"

    def __init__(self, input_dims: Sequence[int], embed_dim: int, seed: int | None = None):
        if len(input_dims) != 3 or min(input_dims) < 1:
            raise ShapeError(f"input_dims must be (height, width, channels), got {input_dims}")
        if embed_dim < 1:
            raise ShapeError("embed_dim must be positive")
        self.input_dims = tuple(int(d) for d in input_dims)
        self.embed_dim = int(embed_dim)
        self.seed = seed

    @property
    def num_pixels(self) -> int:
        h, w, c = self.input_dims
        return h * w * c

    @property
    def differentiable(self) -> bool:
        return True

    def parameters(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def param_hash(self) -> str:
        h = hashlib.sha256(self.kind.encode())
        for name, arr in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def _flatten(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-3:] != self.input_dims:
            raise ShapeError(f"image dims {X.shape[-3:]} do not match encoder {self.input_dims}")
        if not np.all(np.isfinite(X)):
            raise DataError("image has non-finite pixels")
        return X.reshape(-1, self.num_pixels)

    def encode_batch(self, X: np.ndarray) -> np.ndarray:
        """Embed a batch (n, h, w, c) -> (n, embed_dim)."""
        return self._forward(self._flatten(X))

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_dims:
            raise ShapeError(f"image dims {x.shape} do not match encoder {self.input_dims}")
        return self.encode_batch(x[None])[0]

    def vjp_batch(self, X: np.ndarray, cotangents: np.ndarray) -> np.ndarray:
        """Per-sample J^T c for a batch; returns an array shaped like ``X``."""
        flat = self._flatten(X)
        C = np.asarray(cotangents, dtype=np.float64).reshape(flat.shape[0], -1)
        if C.shape[1] != self.embed_dim:
            raise ShapeError(f"cotangent dim {C.shape[1]} != embed_dim {self.embed_dim}")
        return self._vjp(flat, C).reshape((flat.shape[0],) + self.input_dims)

    def vjp(self, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.input_dims:
            raise ShapeError(f"image dims {x.shape} do not match encoder {self.input_dims}")
        return self.vjp_batch(x[None], np.asarray(cotangent)[None])[0]

    def _forward(self, flat: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _vjp(self, flat: np.ndarray, C: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class LinearEncoder(FrozenEncoder):
    """Flatten then multiply by ``W`` (embed_dim x pixels); no bias."""

    kind = "linear"

    def __init__(self, input_dims, embed_dim, seed=None, weights=None):
        super().__init__(input_dims, embed_dim, seed)
        if weights is None:
            rng = np.random.default_rng(seed)
            bound = 1.0 / np.sqrt(self.num_pixels)
            weights = rng.uniform(-bound, bound, size=(self.embed_dim, self.num_pixels))
        W = np.asarray(weights, dtype=np.float64)
        if W.shape != (self.embed_dim, self.num_pixels):
            raise ShapeError(f"weights must be {(self.embed_dim, self.num_pixels)}, got {W.shape}")
        self.W = _frozen(W)

    def parameters(self):
        return {"W": self.W}

    def _forward(self, flat):
        return flat @ self.W.T

    def _vjp(self, flat, C):
        return C @ self.W


class MLPEncoder(FrozenEncoder):
    """Two affine layers with a tanh in between: W2 tanh(W1 x + b1) + b2."""

    kind = "mlp"

    def __init__(self, input_dims, embed_dim, seed=None, hidden=64, params=None):
        super().__init__(input_dims, embed_dim, seed)
        if params is None:
            rng = np.random.default_rng(seed)
            b1 = 1.0 / np.sqrt(self.num_pixels)
            b2 = 1.0 / np.sqrt(hidden)
            params = {
                "W1": rng.uniform(-b1, b1, size=(hidden, self.num_pixels)),
                "b1": rng.uniform(-b1, b1, size=hidden),
                "W2": rng.uniform(-b2, b2, size=(self.embed_dim, hidden)),
                "b2": rng.uniform(-b2, b2, size=self.embed_dim),
            }
        self.W1 = _frozen(params["W1"])
        self.b1 = _frozen(params["b1"])
        self.W2 = _frozen(params["W2"])
        self.b2 = _frozen(params["b2"])
        self.hidden = self.W1.shape[0]
        if self.W1.shape[1] != self.num_pixels or self.W2.shape != (self.embed_dim, self.hidden):
            raise ShapeError("MLP parameter shapes inconsistent with input_dims/embed_dim")

    def parameters(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def _forward(self, flat):
        return np.tanh(flat @ self.W1.T + self.b1) @ self.W2.T + self.b2

    def _vjp(self, flat, C):
        h = np.tanh(flat @ self.W1.T + self.b1)
        return ((C @ self.W2) * (1.0 - h * h)) @ self.W1


class TableEncoder(FrozenEncoder):
    """Returns the stored embedding of the nearest stored input image.

    Meant for ingesting exported embeddings of a real model; not differentiable.
    """

    kind = "table-backed"

    def __init__(self, inputs, embeddings, seed=None):
        inputs = np.asarray(inputs, dtype=np.float64)
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if inputs.ndim != 4 or embeddings.ndim != 2 or len(inputs) != len(embeddings):
            raise ShapeError("table encoder needs inputs (k,h,w,c) and embeddings (k,d)")
        super().__init__(inputs.shape[1:], embeddings.shape[1], seed)
        self.inputs = _frozen(inputs.reshape(len(inputs), -1))
        self.embeddings = _frozen(embeddings)

    @property
    def differentiable(self):
        return False

    def parameters(self):
        return {"inputs": self.inputs, "embeddings": self.embeddings}

    def _forward(self, flat):
        from .kernels import kmeans_assign

        idx, _ = kmeans_assign(flat, self.inputs)
        return self.embeddings[idx].copy()

    def _vjp(self, flat, C):
        raise CapabilityError("table-backed encoder provides no vector-Jacobian product")


def make_encoder(kind: str, input_dims, embed_dim: int, seed: int = 0, hidden: int = 64) -> FrozenEncoder:
    if kind == "linear":
        return LinearEncoder(input_dims, embed_dim, seed)
    if kind == "mlp":
        return MLPEncoder(input_dims, embed_dim, seed, hidden=hidden)
    raise ConfigError(f"cannot construct encoder of kind {kind!r} from a seed")


def save_encoder(enc: FrozenEncoder, path) -> None:
    meta = {
        "kind": np.array(enc.kind),
        "input_dims": np.array(enc.input_dims),
        "embed_dim": np.array(enc.embed_dim),
        "seed": np.array(-1 if enc.seed is None else enc.seed),
    }
    np.savez(path, **meta, **enc.parameters())


def load_encoder(path) -> FrozenEncoder:
    with np.load(path) as z:
        kind = str(z["kind"])
        dims = tuple(int(d) for d in z["input_dims"])
        embed_dim = int(z["embed_dim"])
        seed = int(z["seed"])
        seed = None if seed < 0 else seed
        if kind == "linear":
            return LinearEncoder(dims, embed_dim, seed, weights=z["W"])
        if kind == "mlp":
            params = {k: z[k] for k in ("W1", "b1", "W2", "b2")}
            return MLPEncoder(dims, embed_dim, seed, params=params)
        if kind == "table-backed":
            return TableEncoder(z["inputs"].reshape((-1,) + dims), z["embeddings"], seed)
    raise FormatError(f"unknown encoder kind {kind!r}")


@dataclass
class EmbeddingTable:
    ids: list
    vectors: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.ids) != len(self.vectors):
            raise ShapeError("ids and vectors disagree in count")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate ids in embedding table")
        if not np.all(np.isfinite(self.vectors)):
            raise DataError("embedding table contains NaN or Inf")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms == 0):
            bad = [self.ids[i] for i in np.flatnonzero(norms == 0)]
            raise DataError(f"zero-norm embedding rows: {bad}")
        self._index = {k: i for i, k in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def __getitem__(self, key) -> np.ndarray:
        return self.vectors[self._index[key]]


_BIN_MAGIC = b"EMB1B"
_BIN_HEADER = struct.Struct("<5sII3x")


def save_embedding_table(table: EmbeddingTable, path, binary: bool = False) -> None:
    path = Path(path)
    n, d = table.vectors.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(_BIN_HEADER.pack(_BIN_MAGIC, n, d))
            fh.write(table.vectors.astype("<f4").tobytes())
        return
    lines = [f"EMB1 {n} {d}"]
    for key, vec in zip(table.ids, table.vectors):
        if any(ch.isspace() for ch in str(key)) or not str(key):
            raise FormatError(f"id {key!r} must be a non-empty token without whitespace")
        lines.append(" ".join([str(key)] + [repr(float(x)) for x in vec]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embedding_table(path) -> EmbeddingTable:
    """Read an EMB1 text file or an EMB1B binary file.

    Binary files carry no ids; rows are named ``"0"``, ``"1"``, ...
    """
    raw = Path(path).read_bytes()
    if raw[:5] == _BIN_MAGIC:
        if len(raw) < _BIN_HEADER.size:
            raise FormatError("truncated EMB1B header")
        _, n, d = _BIN_HEADER.unpack_from(raw)
        body = raw[_BIN_HEADER.size:]
        if n == 0 or d == 0 or len(body) != 4 * n * d:
            raise FormatError(f"EMB1B declares {n}x{d} floats but holds {len(body) // 4}")
        vec = np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)
        return EmbeddingTable([str(i) for i in range(n)], vec)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("embedding file is neither EMB1B nor UTF-8 text") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty embedding file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "EMB1":
        raise FormatError(f"bad header {lines[0]!r}; expected 'EMB1 <count> <dim>'")
    try:
        n, d = int(head[1]), int(head[2])
    except ValueError as exc:
        raise FormatError("header count/dim are not integers") from exc
    body = lines[1:]
    if len(body) != n:
        raise FormatError(f"header declares {n} vectors, file has {len(body)} rows")
    ids, rows = [], []
    total = 0
    for ln in body:
        parts = ln.split()
        ids.append(parts[0])
        rows.append(parts[1:])
        total += len(parts) - 1
    if total != n * d or any(len(r) != d for r in rows):
        raise FormatError(f"header declares {n}x{d} = {n * d} floats, file has {total}")
    try:
        vec = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return EmbeddingTable(ids, vec.reshape(n, d))


def table_from_mapping(items: Iterable[tuple]) -> EmbeddingTable:
    items = list(items)
    return EmbeddingTable([k for k, _ in items], np.array([v for _, v in items]))
