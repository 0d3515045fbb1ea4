"""Embedding index and exact top-k search (cosine and L2 baseline)."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Situation, situations_to_array
from .errors import CheckpointError, InputError, NumericError, ShapeError
from .nn import Encoder, fingerprint

INDEX_MAGIC = b"CIDX"
INDEX_VERSION = 1


def embed(situations: Sequence[Situation] | np.ndarray, model: Encoder, batch_size: int = 256) -> np.ndarray:
    """Eval-mode embeddings with unit-norm rows, shape (N, E)."""
    x = situations if isinstance(situations, np.ndarray) else situations_to_array(situations)
    if x.ndim != 3 or x.shape[1:] != (model.arch.T, model.arch.C):
        raise ShapeError(f"expected (N, {model.arch.T}, {model.arch.C}) input, got {x.shape}")
    out = np.empty((x.shape[0], model.arch.E), dtype=np.float32)
    for lo in range(0, x.shape[0], batch_size):
        out[lo : lo + batch_size] = model.forward(x[lo : lo + batch_size], train=False)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    return (out / np.where(norms == 0, 1, norms)).astype(np.float32)


@dataclass
class EmbeddingIndex:
    ids: list[str]
    matrix: np.ndarray  # (N, E) float32, unit rows
    checkpoint_fingerprint: str = ""
    _pos: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if len(self.ids) != self.matrix.shape[0]:
            raise ShapeError("ids and matrix rows are out of step")
        self._pos = {id_: i for i, id_ in enumerate(self.ids)}
        if len(self._pos) != len(self.ids):
            raise InputError("duplicate ids in index")

    def __len__(self):
        return len(self.ids)

    def position(self, id_: str) -> int | None:
        return self._pos.get(id_)

    def save(self, path) -> None:
        E = self.matrix.shape[1]
        digest = bytes.fromhex(self.checkpoint_fingerprint) if self.checkpoint_fingerprint else b""
        digest = digest.ljust(32, b"\0")
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<IIII", INDEX_VERSION, E, len(self.ids), len(digest)))
            fh.write(digest)
            for id_ in self.ids:
                raw = id_.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
            fh.write(np.ascontiguousarray(self.matrix, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        blob = Path(path).read_bytes()
        if blob[:4] != INDEX_MAGIC:
            raise CheckpointError("not an embedding index (bad magic)")
        version, E, N, dlen = struct.unpack_from("<IIII", blob, 4)
        if version != INDEX_VERSION:
            raise CheckpointError(f"unsupported index version {version}")
        off = 20
        digest = blob[off : off + dlen]
        off += dlen
        ids = []
        for _ in range(N):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            ids.append(blob[off : off + n].decode("utf-8"))
            off += n
        if len(blob) - off != 4 * N * E:
            raise CheckpointError("index matrix size does not match header")
        matrix = np.frombuffer(blob, dtype="<f4", offset=off).astype(np.float32).reshape(N, E)
        fp = "" if digest.strip(b"\0") == b"" else digest.hex()
        return cls(ids, matrix, fp)


def build_index(situations: Sequence[Situation], model: Encoder, batch_size: int = 256) -> EmbeddingIndex:
    return EmbeddingIndex(
        [s.id for s in situations], embed(situations, model, batch_size), fingerprint(model)
    )


@dataclass
class QueryResult:
    ids: list[str]
    scores: list[float]
    truncated: bool = False

    def __len__(self):
        return len(self.ids)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "id", "score"])
            for rank, (id_, score) in enumerate(zip(self.ids, self.scores), start=1):
                w.writerow([rank, id_, repr(score)])

    def to_dict(self) -> dict:
        return {
            "results": [{"rank": r, "id": i, "score": s} for r, (i, s) in enumerate(zip(self.ids, self.scores), 1)],
            "truncated": self.truncated,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


def rank_scores(scores: np.ndarray, ids: Sequence[str], k: int, exclude: int | None = None) -> QueryResult:
    """Top-k by descending score; ties go to the lower insertion index."""
    if k < 1:
        raise InputError("k must be >= 1")
    order = np.lexsort((np.arange(scores.size), -scores.astype(np.float64)))
    if exclude is not None:
        order = order[order != exclude]
    truncated = k > order.size
    top = order[:k]
    return QueryResult([ids[i] for i in top], [float(scores[i]) for i in top], truncated)


def search(index: EmbeddingIndex, query_vec: np.ndarray, k: int, exclude_id: str | None = None) -> QueryResult:
    if len(index) == 0:
        raise InputError("index is empty")
    # rows are stored as float32 but scored as exact float64 cosines, so
    # near-ties order the same way regardless of float32 rounding
    q = np.asarray(query_vec, dtype=np.float32).astype(np.float64).ravel()
    m = index.matrix.astype(np.float64)
    qn = np.linalg.norm(q)
    if qn == 0:
        raise NumericError("query embedding has zero norm")
    rn = np.linalg.norm(m, axis=1)
    scores = (m @ q) / (np.where(rn == 0, 1.0, rn) * qn)
    exclude = index.position(exclude_id) if exclude_id is not None else None
    return rank_scores(scores, index.ids, k, exclude)


def query_top_k(q: Situation, index: EmbeddingIndex, model: Encoder, k: int) -> QueryResult:
    """Exact cosine top-k for ``q``; ``q`` itself is skipped if indexed."""
    qvec = embed([q], model)[0]
    return search(index, qvec, k, exclude_id=q.id)


def l2_baseline_top_k(q: Situation, db: Sequence[Situation], k: int) -> QueryResult:
    """Nearest neighbours by Euclidean distance of flattened matrices.

    Scores are negative distances so that higher is better.
    """
    if not db:
        raise InputError("database is empty")
    x = np.stack([s.values.ravel() for s in db]).astype(np.float64)
    qv = np.asarray(q.values, dtype=np.float64).ravel()
    if x.shape[1] != qv.size:
        raise ShapeError("query and database situations differ in shape")
    if np.isnan(x).any() or np.isnan(qv).any():
        raise ShapeError("L2 baseline requires imputed situations")
    dist = np.sqrt(((x - qv) ** 2).sum(axis=1))
    ids = [s.id for s in db]
    exclude = ids.index(q.id) if q.id in ids else None
    return rank_scores(-dist, ids, k, exclude)


class CosineRetriever:
    """Ranks a fixed database by cosine similarity of model embeddings."""

    def __init__(self, situations: Sequence[Situation], model: Encoder, index: EmbeddingIndex | None = None):
        self.index = index if index is not None else build_index(situations, model)
        self.ids = list(self.index.ids)

    def rank(self, query_id: str, k: int) -> list[str]:
        pos = self.index.position(query_id)
        if pos is None:
            raise InputError(f"unknown situation id {query_id!r}")
        return search(self.index, self.index.matrix[pos], k, exclude_id=query_id).ids


class L2Retriever:
    """The flattened-L2 baseline over a fixed database."""

    def __init__(self, situations: Sequence[Situation]):
        self.situations = list(situations)
        self.ids = [s.id for s in self.situations]
        self._x = np.stack([s.values.ravel() for s in self.situations]).astype(np.float64)
        self._pos = {id_: i for i, id_ in enumerate(self.ids)}

    def rank(self, query_id: str, k: int) -> list[str]:
        pos = self._pos.get(query_id)
        if pos is None:
            raise InputError(f"unknown situation id {query_id!r}")
        dist = np.sqrt(((self._x - self._x[pos]) ** 2).sum(axis=1))
        return rank_scores(-dist, self.ids, k, pos).ids

