"""Datasets and on-disk formats.

Binary formats are little-endian except IDX, which is big-endian by
definition. Every writer produces a deterministic byte stream and replaces
its target atomically.

Checkpoint (``BNGC``)::

    magic "BNGC" | u32 version | u32 role
    u32 input_dim | u32 n_hidden | u32 hidden[n_hidden] | u32 proj_hidden | u32 embed_dim
    u32 len | fingerprint (utf-8) | u32 len | metadata (utf-8, sorted key=value lines)
    per layer: weight (fan_in*fan_out f64, row-major) | bias (fan_out f64)
    u32 CRC-32 of everything above

Embeddings (``BNGE``)::

    magic "BNGE" | u32 version | u32 N | u32 D | N*D f32 | u32 CRC-32
"""

from __future__ import annotations

import hashlib
import os
import re
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagging import BagTable
from .nets import ROLES, EncoderParams, EncoderSpec

__all__ = [
    "FormatError",
    "BadMagicError",
    "TruncatedError",
    "DimOverflowError",
    "CrcMismatchError",
    "UnknownVersionError",
    "HeaderMismatchError",
    "Dataset",
    "gen_blobs",
    "load_idx",
    "write_idx",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "save_embeddings",
    "load_embeddings",
    "save_bags",
    "load_bags",
    "EvalReport",
    "save_reports",
    "load_reports",
    "fingerprint",
    "atomic_write",
]

CKPT_MAGIC = b"BNGC"
EMB_MAGIC = b"BNGE"
FORMAT_VERSION = 1
IDX_DATA_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
_IDX_MAX_ITEMS = 2**31 - 1


class FormatError(ValueError):
    """Base class for unreadable or inconsistent files."""


class BadMagicError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimOverflowError(FormatError):
    pass


class CrcMismatchError(FormatError):
    pass


class UnknownVersionError(FormatError):
    pass


class HeaderMismatchError(FormatError):
    pass


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fingerprint(config_text: str) -> str:
    return hashlib.sha256(config_text.encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray | None = None
    split: np.ndarray | None = None  # "train" / "val" per row

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"features must be 2-D, got {self.X.shape}")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("features must be finite")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (len(self.X),):
                raise ValueError("labels must have one entry per row")
        if self.split is None:
            self.split = np.full(len(self.X), "train")
        self.split = np.asarray(self.split, dtype="<U5")
        if self.split.shape != (len(self.X),) or not np.isin(self.split, ("train", "val")).all():
            raise ValueError("split tags must be 'train' or 'val', one per row")

    @property
    def n(self) -> int:
        return len(self.X)

    @property
    def input_dim(self) -> int:
        return self.X.shape[1]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], None if self.y is None else self.y[mask], self.split[mask])

    def train(self) -> "Dataset":
        return self.subset(self.split == "train")

    def val(self) -> "Dataset":
        return self.subset(self.split == "val")


def gen_blobs(n, dim, classes, class_sep=1.0, noise=1.0, seed=0, val_fraction=0.0) -> Dataset:
    """Balanced Gaussian blobs around random unit centers scaled by ``class_sep``.

    With ``val_fraction > 0`` that share of every class is tagged ``val``.
    """
    if classes > n or classes < 1:
        raise ValueError("need 1 <= classes <= n")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((classes, dim))
    centers *= class_sep / np.linalg.norm(centers, axis=1, keepdims=True)
    y = rng.permutation(np.arange(n) % classes)
    X = centers[y] + noise * rng.standard_normal((n, dim))
    split = np.full(n, "train", dtype="<U5")
    if val_fraction > 0:
        for c in range(classes):
            rows = np.flatnonzero(y == c)
            split[rows[len(rows) - int(round(val_fraction * len(rows))):]] = "val"
    return Dataset(X, y, split)


# --------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic):
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise TruncatedError(f"{path}: {len(raw)} bytes, too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedError(f"{path}: header needs {head} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    total = 1
    for d in dims:
        total *= d
    if total > _IDX_MAX_ITEMS or any(d > _IDX_MAX_ITEMS for d in dims):
        raise DimOverflowError(f"{path}: dimensions {dims} overflow the item limit")
    if len(raw) - head < total:
        raise TruncatedError(f"{path}: payload has {len(raw) - head} bytes, dimensions need {total}")
    if len(raw) - head > total:
        raise HeaderMismatchError(f"{path}: {len(raw) - head - total} trailing bytes after payload")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(path, labels_path=None) -> Dataset:
    """Read an IDX image file (and optional label file) as a dataset.

    Pixels are flattened row-major and scaled to ``[0, 1]``.
    """
    images = _read_idx(path, IDX_DATA_MAGIC)
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = None
    if labels_path is not None:
        y = _read_idx(labels_path, IDX_LABEL_MAGIC).astype(np.int64)
        if len(y) != len(X):
            raise HeaderMismatchError(f"label count {len(y)} does not match image count {len(X)}")
    return Dataset(X, y)


def write_idx(path, array) -> None:
    """Write a ``uint8`` array as IDX: 1-D arrays as labels, 3-D as images."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX payload must be uint8")
    magic = {1: IDX_LABEL_MAGIC, 3: IDX_DATA_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-D label and 3-D image arrays are supported")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    atomic_write(path, header + np.ascontiguousarray(array).tobytes())


# --------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: EncoderParams
    fingerprint: str = ""
    metadata: dict[str, str] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def spec(self) -> EncoderSpec:
        return self.params.spec


class _Reader:
    def __init__(self, raw: bytes, name):
        self.raw = raw
        self.pos = 0
        self.name = name

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedError(f"{self.name}: unexpected end of data at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def f64(self, count):
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def _check_crc(raw, name):
    if len(raw) < 4:
        raise TruncatedError(f"{name}: {len(raw)} bytes, too short")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CrcMismatchError(f"{name}: CRC-32 mismatch")
    return body


def _check_magic(raw, magic, name):
    if len(raw) < len(magic) + 8:
        raise TruncatedError(f"{name}: {len(raw)} bytes, too short for a header")
    if raw[:4] != magic:
        raise BadMagicError(f"{name}: magic {raw[:4]!r}, expected {magic!r}")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != FORMAT_VERSION:
        raise UnknownVersionError(f"{name}: unknown format version {version}")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    spec = ckpt.spec
    fp = ckpt.fingerprint.encode()
    meta = "".join(f"{k}={ckpt.metadata[k]}\n" for k in sorted(ckpt.metadata)).encode()
    parts = [
        CKPT_MAGIC,
        struct.pack("<II", ckpt.version, ROLES.index(ckpt.params.role)),
        struct.pack(f"<II{len(spec.hidden_dims)}III", spec.input_dim, len(spec.hidden_dims),
                    *spec.hidden_dims, spec.proj_hidden_dim, spec.embed_dim),
        struct.pack("<I", len(fp)), fp,
        struct.pack("<I", len(meta)), meta,
    ]
    for w, b in ckpt.params.layers:
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def parse_checkpoint(raw: bytes, name="checkpoint") -> Checkpoint:
    _check_magic(raw, CKPT_MAGIC, name)
    body = _check_crc(raw, name)
    r = _Reader(body, name)
    r.take(8)
    role = r.u32()
    if role >= len(ROLES):
        raise HeaderMismatchError(f"{name}: unknown role code {role}")
    input_dim, n_hidden = r.u32(), r.u32()
    if n_hidden > 1024:
        raise DimOverflowError(f"{name}: {n_hidden} hidden layers")
    hidden = [r.u32() for _ in range(n_hidden)]
    proj, embed = r.u32(), r.u32()
    try:
        spec = EncoderSpec(input_dim, tuple(hidden), proj, embed)
    except ValueError as exc:
        raise HeaderMismatchError(f"{name}: {exc}") from None
    fp = r.take(r.u32()).decode("utf-8", errors="strict")
    meta_text = r.take(r.u32()).decode("utf-8", errors="strict")
    metadata = dict(line.split("=", 1) for line in meta_text.splitlines())
    layers = []
    for fi, fo in spec.layer_dims:
        w = r.f64(fi * fo).reshape(fi, fo)
        b = r.f64(fo).reshape(1, fo)
        layers.append((w, b))
    if r.pos != len(body):
        raise HeaderMismatchError(f"{name}: {len(body) - r.pos} unexpected trailing bytes")
    return Checkpoint(EncoderParams(spec, layers, ROLES[role]), fp, metadata)


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# embeddings


def save_embeddings(emb, path) -> None:
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embeddings must be a 2-D matrix")
    if not np.all(np.isfinite(emb)):
        raise ValueError("embeddings must be finite")
    body = EMB_MAGIC + struct.pack("<III", FORMAT_VERSION, *emb.shape) + emb.astype("<f4").tobytes()
    atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


def parse_embeddings(raw: bytes, name="embeddings") -> tuple[np.ndarray, float]:
    _check_magic(raw, EMB_MAGIC, name)
    body = _check_crc(raw, name)
    if len(body) < 16:
        raise TruncatedError(f"{name}: header incomplete")
    n, d = struct.unpack("<II", body[8:16])
    if len(body) - 16 != 4 * n * d:
        raise HeaderMismatchError(f"{name}: header says {n}x{d}, payload has {len(body) - 16} bytes")
    emb = np.frombuffer(body, dtype="<f4", offset=16).astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(emb)):
        raise FormatError(f"{name}: non-finite values")
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise FormatError(f"{name}: zero rows cannot be renormalized")
    unit = emb / norms
    delta = float(np.abs(unit - emb).max()) if emb.size else 0.0
    return unit, delta


def load_embeddings(path) -> tuple[np.ndarray, float]:
    """Rows renormalized to unit length, plus the largest renormalization change."""
    return parse_embeddings(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# bag tables

_BAG_HEADER = re.compile(r"#bingo-bags v1 strategy=(knn|kmeans|labels) param=(\d+) n=(\d+)")


def bags_text(bags: BagTable) -> str:
    lines = [f"#bingo-bags v1 strategy={bags.strategy} param={bags.param} n={len(bags)}"]
    lines += [f"{a}\t{','.join(str(int(i)) for i in m)}" for a, m in enumerate(bags.members)]
    return "\n".join(lines) + "\n"


def save_bags(bags: BagTable, path) -> None:
    atomic_write(path, bags_text(bags).encode())


def parse_bags(text: str, name="bags") -> BagTable:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TruncatedError(f"{name}: empty bag file")
    m = _BAG_HEADER.fullmatch(lines[0])
    if m is None:
        raise HeaderMismatchError(f"{name}: bad header {lines[0][:80]!r}")
    strategy, param, n = m.group(1), int(m.group(2)), int(m.group(3))
    if len(lines) - 1 != n:
        raise HeaderMismatchError(f"{name}: header says n={n}, found {len(lines) - 1} bags")
    members = []
    for a, line in enumerate(lines[1:]):
        anchor, sep, rest = line.partition("\t")
        if not sep or not anchor.isdigit() or int(anchor) != a:
            raise FormatError(f"{name}: line {a + 2} should start with anchor {a}")
        items = rest.split(",")
        if not all(i.isdigit() for i in items):
            raise FormatError(f"{name}: line {a + 2} has a malformed member list")
        members.append(np.array([int(i) for i in items], dtype=np.int64))
    try:
        bags = BagTable(strategy, param, members)
    except ValueError as exc:
        raise FormatError(f"{name}: {exc}") from None
    if strategy == "knn" and any(len(mm) != param + 1 for mm in members):
        raise HeaderMismatchError(f"{name}: knn bags must hold param+1={param + 1} members")
    if strategy != "knn" and len({tuple(mm) for mm in members}) > param:
        raise HeaderMismatchError(f"{name}: more groups than param={param}")
    if strategy == "labels" and len({tuple(mm) for mm in members}) != param:
        raise HeaderMismatchError(f"{name}: label bags need exactly param={param} groups")
    return bags


def load_bags(path) -> BagTable:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError(f"{path}: bag files are ASCII text") from None
    return parse_bags(text, str(path))


# --------------------------------------------------------------------------
# metric reports


@dataclass
class EvalReport:
    metric: str
    value: float
    seed: int
    config: str
    n_train: int = 0
    n_test: int = 0

    def line(self) -> str:
        if not np.isfinite(self.value):
            raise ValueError(f"metric {self.metric} is not finite")
        return (f"metric={self.metric} value={float(self.value)!r} seed={self.seed} "
                f"config={self.config} n_train={self.n_train} n_test={self.n_test}")

    @classmethod
    def parse(cls, line: str) -> "EvalReport":
        fields = dict(tok.split("=", 1) for tok in line.split())
        try:
            return cls(fields["metric"], float(fields["value"]), int(fields["seed"]), fields["config"],
                       int(fields.get("n_train", 0)), int(fields.get("n_test", 0)))
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad report line {line!r}: {exc}") from None


def save_reports(reports, path) -> None:
    atomic_write(path, "".join(r.line() + "\n" for r in reports).encode())


def load_reports(path) -> list[EvalReport]:
    return [EvalReport.parse(line) for line in Path(path).read_text().splitlines() if line.strip()]
