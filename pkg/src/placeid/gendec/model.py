"""Small autoregressive token decoder conditioned on a global descriptor.

The next-token distribution is computed from two halves concatenated:
a linear projection of the descriptor and the mean over the prefix of
token embedding times position embedding (element-wise). The product keeps
the pooled vector sensitive to token order, which a sum would not. Two tanh
layers and a linear head produce logits over the 12-token vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from placeid.docid import TOKEN_ID, VOCAB

CHECKPOINT_MAGIC = b"GDC1"
VOCAB_SIZE = len(VOCAB)


class PrefixTooLongError(ValueError):
    pass


@dataclass
class DecoderParams:
    token_embedding: np.ndarray  # C x E
    position_embedding: np.ndarray  # L_max x E
    input_w: np.ndarray  # E x D
    input_b: np.ndarray  # E
    hidden1_w: np.ndarray  # W x 2E
    hidden1_b: np.ndarray  # W
    hidden2_w: np.ndarray  # W x W
    hidden2_b: np.ndarray  # W
    output_w: np.ndarray  # C x W
    output_b: np.ndarray  # C

    @property
    def vocab_size(self) -> int:
        return self.token_embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.token_embedding.shape[1]

    @property
    def max_len(self) -> int:
        return self.position_embedding.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.input_w.shape[1]

    @property
    def width(self) -> int:
        return self.hidden1_w.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def map(self, fn) -> "DecoderParams":
        return DecoderParams(*(fn(a) for a in self.arrays()))

    def copy(self) -> "DecoderParams":
        return self.map(np.array)

    def zeros_like(self) -> "DecoderParams":
        return self.map(np.zeros_like)

    def ravel(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def unravel(self, flat: np.ndarray) -> "DecoderParams":
        out, pos = [], 0
        for a in self.arrays():
            out.append(np.asarray(flat[pos:pos + a.size], dtype=np.float64).reshape(a.shape))
            pos += a.size
        return DecoderParams(*out)

    def tobytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype=np.float64).tobytes() for a in self.arrays())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    @classmethod
    def zeros(cls, descriptor_dim: int, embed_dim: int = 64, width: int = 256, max_len: int = 16,
              vocab_size: int = VOCAB_SIZE) -> "DecoderParams":
        E, W, C, D, L = embed_dim, width, vocab_size, descriptor_dim, max_len
        return cls(np.zeros((C, E)), np.zeros((L, E)), np.zeros((E, D)), np.zeros(E),
                   np.zeros((W, 2 * E)), np.zeros(W), np.zeros((W, W)), np.zeros(W),
                   np.zeros((C, W)), np.zeros(C))

    @classmethod
    def init(cls, descriptor_dim: int, embed_dim: int = 64, width: int = 256, max_len: int = 16,
             seed: int = 0) -> "DecoderParams":
        rng = np.random.default_rng(seed)
        p = cls.zeros(descriptor_dim, embed_dim, width, max_len)

        def glorot(shape):
            fan_out, fan_in = shape
            return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)

        p.token_embedding = rng.normal(0.0, 1.0, size=p.token_embedding.shape)
        p.position_embedding = rng.normal(0.0, 1.0, size=p.position_embedding.shape)
        p.input_w = glorot(p.input_w.shape) * np.sqrt(descriptor_dim)
        p.hidden1_w = glorot(p.hidden1_w.shape)
        p.hidden2_w = glorot(p.hidden2_w.shape)
        p.output_w = glorot(p.output_w.shape)
        return p


# ---------------------------------------------------------------------------
# batched step tables


@dataclass
class StepBatch:
    """Teacher-forced prediction steps for a set of (descriptor, token sequence) branches.

    Row ``r`` predicts ``targets[r]`` from a prefix ending in token
    ``tokens[r]`` at position ``positions[r]``. Rows of one branch are
    contiguous and start at ``starts``, so prefix pooling is a segmented
    cumulative sum.
    """

    descriptors: np.ndarray  # B x D
    row_branch: np.ndarray  # R
    starts: np.ndarray  # B
    tokens: np.ndarray  # R
    positions: np.ndarray  # R
    targets: np.ndarray  # R

    @property
    def n_rows(self) -> int:
        return len(self.targets)


def step_template(ids, max_len: int):
    """Input tokens, positions and targets for every teacher-forced step of one token sequence."""
    ids = np.asarray(ids, dtype=np.int64)
    steps = len(ids) - 1
    if steps >= max_len:
        raise PrefixTooLongError(f"sequence of {len(ids)} tokens needs max_len >= {len(ids)}, have {max_len}")
    return ids[:-1].copy(), np.arange(steps), ids[1:].copy()


def make_batch(descriptors, templates) -> StepBatch:
    descriptors = np.asarray(descriptors, dtype=np.float64).reshape(len(templates), -1)
    sizes = [len(t[2]) for t in templates]
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    return StepBatch(
        descriptors,
        np.repeat(np.arange(len(templates)), sizes),
        starts,
        np.concatenate([t[0] for t in templates]),
        np.concatenate([t[1] for t in templates]),
        np.concatenate([t[2] for t in templates]),
    )


def _segment_cumsum(x: np.ndarray, starts: np.ndarray, row_branch: np.ndarray) -> np.ndarray:
    c = np.cumsum(x, axis=0)
    base = np.vstack([np.zeros((1, x.shape[1])), c])[starts]
    return c - base[row_branch]


def _segment_revcumsum(x: np.ndarray, starts: np.ndarray, row_branch: np.ndarray) -> np.ndarray:
    r = np.cumsum(x[::-1], axis=0)[::-1]
    ends = np.append(starts[1:], len(x))
    tail = np.vstack([r, np.zeros((1, x.shape[1]))])[ends]
    return r - tail[row_branch]


def forward_batch(params: DecoderParams, batch: StepBatch):
    h0b = batch.descriptors @ params.input_w.T + params.input_b
    h0 = h0b[batch.row_branch]
    elem = params.token_embedding[batch.tokens] * params.position_embedding[batch.positions]
    pooled = _segment_cumsum(elem, batch.starts, batch.row_branch) / (batch.positions + 1.0)[:, None]
    z = np.concatenate([h0, pooled], axis=1)
    a1 = np.tanh(z @ params.hidden1_w.T + params.hidden1_b)
    a2 = np.tanh(a1 @ params.hidden2_w.T + params.hidden2_b)
    logits = a2 @ params.output_w.T + params.output_b
    return logits, (z, a1, a2)


def backward_batch(params: DecoderParams, batch: StepBatch, cache, dlogits: np.ndarray) -> DecoderParams:
    z, a1, a2 = cache
    E = params.embed_dim
    g = params.zeros_like()
    g.output_w = dlogits.T @ a2
    g.output_b = dlogits.sum(axis=0)
    dz2 = (dlogits @ params.output_w) * (1.0 - a2 * a2)
    g.hidden2_w = dz2.T @ a1
    g.hidden2_b = dz2.sum(axis=0)
    dz1 = (dz2 @ params.hidden2_w) * (1.0 - a1 * a1)
    g.hidden1_w = dz1.T @ z
    g.hidden1_b = dz1.sum(axis=0)
    dz = dz1 @ params.hidden1_w
    if len(batch.starts):
        delem = _segment_revcumsum(dz[:, E:] / (batch.positions + 1.0)[:, None], batch.starts, batch.row_branch)
        np.add.at(g.token_embedding, batch.tokens, delem * params.position_embedding[batch.positions])
        np.add.at(g.position_embedding, batch.positions, delem * params.token_embedding[batch.tokens])
        dh0b = np.add.reduceat(dz[:, :E], batch.starts, axis=0)
    else:
        dh0b = np.zeros((0, E))
    g.input_w = dh0b.T @ batch.descriptors
    g.input_b = dh0b.sum(axis=0)
    return g


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _prefix_ids(prefix) -> list[int]:
    return [int(t) if isinstance(t, (int, np.integer)) else TOKEN_ID[t] for t in prefix]


def forward(params: DecoderParams, descriptor, prefix) -> np.ndarray:
    """Next-token logits for one descriptor and one prefix (tokens or token ids)."""
    ids = _prefix_ids(prefix)
    if not ids:
        raise ValueError("prefix must contain at least the BOS token")
    if len(ids) >= params.max_len:
        raise PrefixTooLongError(f"prefix of length {len(ids)} needs max_len > {len(ids)}, have {params.max_len}")
    d = np.asarray(descriptor, dtype=np.float64)
    h0 = params.input_w @ d + params.input_b
    pooled = (params.token_embedding[ids] * params.position_embedding[: len(ids)]).mean(axis=0)
    z = np.concatenate([h0, pooled])
    a1 = np.tanh(params.hidden1_w @ z + params.hidden1_b)
    a2 = np.tanh(params.hidden2_w @ a1 + params.hidden2_b)
    return params.output_w @ a2 + params.output_b


# ---------------------------------------------------------------------------
# checkpoint


def save_checkpoint(path, params: DecoderParams, sidecar: dict | None = None) -> None:
    header = struct.pack("<5I", params.vocab_size, params.descriptor_dim, params.embed_dim,
                         params.width, params.max_len)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + header)
        for a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    if sidecar is not None:
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> tuple[DecoderParams, dict | None]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    C, D, E, W, L = struct.unpack("<5I", raw[4:24])
    shell = DecoderParams.zeros(D, E, W, L, C)
    off = 24
    arrays = []
    for a in shell.arrays():
        arrays.append(np.frombuffer(raw, dtype="<f4", count=a.size, offset=off).reshape(a.shape).astype(np.float64))
        off += a.size * 4
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    side = Path(str(path) + ".json")
    return DecoderParams(*arrays), (json.loads(side.read_text()) if side.exists() else None)
