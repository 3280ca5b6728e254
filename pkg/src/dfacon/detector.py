"""Cosine-similarity detection against an index of original artworks.

Scoring is an exhaustive scan: every query is compared with every indexed
vector. A query is flagged as infringing when its best score is at or above
the threshold.

Index file layout (little-endian)::

    magic     8s   b"DFAIDX\\0\\0"
    version   u32
    dim       u32
    probe     u8   0 = encoder_output, 1 = projection_output
    count     u32
    fingerprint 64s  hex sha256 of the producing model
    vectors   count * dim * f32, row-major
    ids       count * (u32 length + utf-8 bytes)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from dfacon.embedder import ProbePoint
from dfacon.errors import (
    ConfigurationError,
    DimensionMismatchError,
    StaleIndexError,
    ValidationError,
)

INDEX_MAGIC = b"DFAIDX\x00\x00"
INDEX_VERSION = 1
_HEADER = struct.Struct("<8sIIBI64s")
_PROBE_CODES = {ProbePoint.ENCODER_OUTPUT: 0, ProbePoint.PROJECTION_OUTPUT: 1}
DEFAULT_K = 5


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray  # count x dim, unit rows
    probe: ProbePoint
    model_fingerprint: str

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValidationError("duplicate artwork_id in index")
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise ValidationError(f"index holds {len(self.ids)} ids but vectors of shape {self.vectors.shape}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class DetectionVerdict:
    query_id: str
    best_match: str
    best_score: float
    infringing: bool
    topk: tuple[tuple[str, float], ...]
    threshold_used: float

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "best_match": self.best_match,
            "best_score": self.best_score,
            "infringing": self.infringing,
            "topk": [[a, s] for a, s in self.topk],
            "threshold_used": self.threshold_used,
        }


def _resolve_model(model, device: str = "cpu"):
    if isinstance(model, (str, Path)):
        from dfacon.trainer import load_checkpoint

        return load_checkpoint(model, device=device)
    return model


def index_from_vectors(ids: Sequence[str], vectors, probe=ProbePoint.ENCODER_OUTPUT,
                       fingerprint: str = "") -> EmbeddingIndex:
    v = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValidationError("zero-length vector in index")
    return EmbeddingIndex(tuple(ids), v / norms, ProbePoint(probe), fingerprint)


def build_index(originals: Sequence[tuple[str, str]], model, probe=ProbePoint.ENCODER_OUTPUT) -> EmbeddingIndex:
    """Embed ``(artwork_id, image_path)`` pairs with ``model`` (handle or checkpoint path)."""
    ids = [a for a, _ in originals]
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for a in ids:
            if a in seen:
                dup = a
                break
            seen.add(a)
        raise ValidationError(f"duplicate artwork_id {dup!r}")
    handle = _resolve_model(model)
    vectors = handle.embed_paths([p for _, p in originals], probe)
    return EmbeddingIndex(tuple(ids), vectors, ProbePoint(probe), handle.fingerprint())


def query_vector(index: EmbeddingIndex, vector, threshold: float, k: int = DEFAULT_K,
                 query_id: str = "query") -> DetectionVerdict:
    if len(index) == 0:
        raise ValidationError("cannot query an empty index")
    v = np.asarray(vector, dtype=np.float64).ravel()
    if v.shape[0] != index.dim:
        raise DimensionMismatchError(f"query has dim {v.shape[0]}, index ({index.probe.value}) has dim {index.dim}")
    if not 1 <= k <= len(index):
        raise ConfigurationError(f"k must lie in [1, {len(index)}], got {k}")
    if not -1.0 <= threshold <= 1.0:
        raise ConfigurationError(f"threshold must lie in [-1, 1], got {threshold}")
    v = v / np.linalg.norm(v)
    scores = np.clip(index.vectors @ v, -1.0, 1.0)
    # descending score, ties broken by index order
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    topk = tuple((index.ids[i], float(scores[i])) for i in order)
    best_id, best = topk[0]
    return DetectionVerdict(query_id, best_id, best, bool(best >= threshold), topk, float(threshold))


def query(index: EmbeddingIndex, image: str | Path, model, threshold: float, k: int = DEFAULT_K) -> DetectionVerdict:
    handle = _resolve_model(model)
    if handle.fingerprint() != index.model_fingerprint:
        raise StaleIndexError("index was built with a different model; rebuild it")
    vec = handle.embed_paths([str(image)], index.probe)[0]
    return query_vector(index, vec, threshold, k, query_id=str(image))


def pairwise_score(a: str | Path, b: str | Path, model, probe=ProbePoint.ENCODER_OUTPUT) -> float:
    handle = _resolve_model(model)
    za, zb = handle.embed_paths([str(a), str(b)], probe)
    return float(np.clip(za @ zb, -1.0, 1.0))


def save_index(index: EmbeddingIndex, path: str | Path) -> Path:
    fp = index.model_fingerprint.encode("ascii").ljust(64, b"\x00")[:64]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, index.dim, _PROBE_CODES[index.probe], len(index), fp))
        fh.write(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
        for aid in index.ids:
            raw = aid.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    return path


def load_index(path: str | Path) -> EmbeddingIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated index header")
    magic, version, dim, probe_code, count, fp = _HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise ValidationError(f"{path}: not an index file")
    if version != INDEX_VERSION:
        raise ValidationError(f"{path}: index version {version}, this build reads {INDEX_VERSION}")
    probe = {c: p for p, c in _PROBE_CODES.items()}.get(probe_code)
    if probe is None:
        raise ValidationError(f"{path}: unknown probe code {probe_code}")
    offset = _HEADER.size
    nbytes = count * dim * 4
    if len(raw) < offset + nbytes:
        raise ValidationError(f"{path}: truncated vector block")
    vectors = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=offset).reshape(count, dim)
    offset += nbytes
    ids = []
    for _ in range(count):
        if len(raw) < offset + 4:
            raise ValidationError(f"{path}: truncated id table")
        (n,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        ids.append(raw[offset: offset + n].decode("utf-8"))
        offset += n
    vectors = vectors.astype(np.float64)
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    return EmbeddingIndex(tuple(ids), vectors, probe, fp.rstrip(b"\x00").decode("ascii"))
