"""Baseline descriptor retrieval: exhaustive cosine scan and flat binary LSH."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LSH_MAGIC = b"LSH1"


@dataclass(frozen=True, eq=False)
class DescriptorMatrix:
    rows: np.ndarray
    scene_index: np.ndarray = None
    unit_rows: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError(f"expected a 2-D matrix, got shape {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ValueError("descriptor matrix has NaN or Inf entries")
        idx = np.arange(len(rows)) if self.scene_index is None else np.asarray(self.scene_index, dtype=np.int64)
        if len(idx) != len(rows):
            raise ValueError("scene_index length differs from row count")
        norms = np.linalg.norm(rows, axis=1, keepdims=True)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "scene_index", idx)
        object.__setattr__(self, "unit_rows", rows / np.where(norms > 0, norms, 1.0))

    def __len__(self):
        return len(self.rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def _top_k(scores: np.ndarray, ids: np.ndarray, k: int, descending: bool) -> np.ndarray:
    """Row positions of the best ``k`` scores, ties resolved by ascending scene id."""
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    key = -scores if descending else scores
    if k < n:
        kth = np.partition(key, k - 1)[k - 1]
        cand = np.flatnonzero(key <= kth)
    else:
        cand = np.arange(n)
    order = np.lexsort((ids[cand], key[cand]))
    return cand[order[:k]]


def _exclusion_mask(ids: np.ndarray, exclusion) -> np.ndarray | None:
    if not exclusion:
        return None
    return np.isin(ids, np.fromiter(exclusion, dtype=np.int64))


def exact_search(query, ref: DescriptorMatrix, k: int = 1, exclusion=None) -> list[tuple[int, float]]:
    """Top-``k`` references by cosine similarity, best first."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(ref) == 0:
        return []
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (ref.dim,):
        raise ValueError(f"query dimension {q.shape} does not match reference dimension {ref.dim}")
    qn = np.linalg.norm(q)
    sims = ref.unit_rows @ (q / qn if qn > 0 else q)
    ids = ref.scene_index
    mask = _exclusion_mask(ids, exclusion)
    if mask is not None:
        keep = np.flatnonzero(~mask)
        sims, ids = sims[keep], ids[keep]
    top = _top_k(sims, ids, k, descending=True)
    return [(int(ids[i]), float(sims[i])) for i in top]


@dataclass(frozen=True, eq=False)
class LshIndex:
    hyperplanes: np.ndarray  # H x D float32
    codes: np.ndarray  # N x ceil(H/8) uint8, little-endian bit order
    scene_index: np.ndarray
    seed: int

    @property
    def n_bits(self) -> int:
        return self.hyperplanes.shape[0]

    @property
    def dim(self) -> int:
        return self.hyperplanes.shape[1]

    def __len__(self):
        return len(self.codes)

    def encode(self, vectors) -> np.ndarray:
        v = np.asarray(vectors, dtype=np.float64).reshape(-1, self.dim)
        bits = (v @ self.hyperplanes.astype(np.float64).T) >= 0.0
        return np.packbits(bits, axis=1, bitorder="little")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(LSH_MAGIC + struct.pack("<IIIQ", self.n_bits, self.dim, len(self), self.seed))
            fh.write(np.ascontiguousarray(self.hyperplanes, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(self.codes, dtype=np.uint8).tobytes())
            # trailer: row -> scene mapping, absent from the fixed header
            fh.write(np.ascontiguousarray(self.scene_index, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path) -> "LshIndex":
        raw = Path(path).read_bytes()
        if raw[:4] != LSH_MAGIC:
            raise ValueError(f"{path}: bad magic {raw[:4]!r}")
        H, D, N, seed = struct.unpack("<IIIQ", raw[4:24])
        off = 24
        planes = np.frombuffer(raw, dtype="<f4", count=H * D, offset=off).reshape(H, D).astype(np.float32)
        off += H * D * 4
        nbytes = (H + 7) // 8
        codes = np.frombuffer(raw, dtype=np.uint8, count=N * nbytes, offset=off).reshape(N, nbytes).copy()
        off += N * nbytes
        if len(raw) >= off + 4 * N:
            ids = np.frombuffer(raw, dtype="<u4", count=N, offset=off).astype(np.int64)
        else:
            ids = np.arange(N)
        return cls(planes, codes, ids, seed)


def lsh_build(ref: DescriptorMatrix, n_bits: int = 256, seed: int = 0) -> LshIndex:
    """Sign random projections with i.i.d. Gaussian hyperplanes; a zero projection maps to bit 1."""
    if n_bits < 1:
        raise ValueError("n_bits must be at least 1")
    rng = np.random.default_rng(seed)
    planes = rng.standard_normal((n_bits, ref.dim)).astype(np.float32)
    index = LshIndex(planes, np.zeros((0, (n_bits + 7) // 8), dtype=np.uint8), ref.scene_index.copy(), int(seed))
    object.__setattr__(index, "codes", index.encode(ref.rows))
    return index


def hamming(codes: np.ndarray, qcode: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.bitwise_xor(codes, qcode)).sum(axis=1, dtype=np.int64)


def lsh_search(query, index: LshIndex, k: int = 1, exclusion=None) -> list[tuple[int, int]]:
    """Flat Hamming scan over all codes, nearest first."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(index) == 0:
        return []
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ValueError(f"query dimension {q.shape} does not match index dimension {index.dim}")
    dist = hamming(index.codes, index.encode(q)[0])
    ids = index.scene_index
    mask = _exclusion_mask(ids, exclusion)
    if mask is not None:
        keep = np.flatnonzero(~mask)
        dist, ids = dist[keep], ids[keep]
    top = _top_k(dist, ids, k, descending=False)
    return [(int(ids[i]), int(dist[i])) for i in top]
