"""Scene identifiers (docids): four codecs, the prefix trie, and tokenization."""

from __future__ import annotations

import csv
import enum
import json
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

BOS = "[BOS]"
EOS = "[EOS]"
DIGITS = tuple("0123456789")
VOCAB = (BOS, EOS) + DIGITS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}
BOS_ID = TOKEN_ID[BOS]
EOS_ID = TOKEN_ID[EOS]


class Strategy(str, enum.Enum):
    LABEL = "LABEL"
    SEMANTIC = "SEMANTIC"
    GPS = "GPS"
    HILBERT = "HILBERT"


class DocidFormatError(ValueError):
    pass


class CodecOverflowError(ValueError):
    pass


class DuplicateDocidError(ValueError):
    pass


@dataclass(frozen=True)
class Docid:
    text: str
    strategy: Strategy

    def __post_init__(self):
        if not self.text or not self.text.isdigit() or not self.text.isascii():
            raise DocidFormatError(f"docid must be a non-empty digit string, got {self.text!r}")

    def __str__(self):
        return self.text


@dataclass(frozen=True)
class CodecMeta:
    strategy: Strategy
    x_offset: float = 0.0
    y_offset: float = 0.0
    scale: float = 100.0
    digit_width: int = 1
    hilbert_order: int = 17
    kmeans_k: int = 10
    kmeans_seed: int = 0
    leaf_size: int = 100
    suffix_width: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["strategy"] = Strategy(self.strategy).value
        for key in ("x_offset", "y_offset", "scale"):
            d[key] = repr(float(d[key]))
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CodecMeta":
        d = json.loads(text)
        d["strategy"] = Strategy(d["strategy"])
        for key in ("x_offset", "y_offset", "scale"):
            d[key] = float(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# label


def encode_label(scene_index: int, max_index: int) -> Docid:
    if scene_index < 0 or scene_index > max_index:
        raise ValueError(f"scene_index {scene_index} outside [0, {max_index}]")
    return Docid(str(scene_index).zfill(len(str(max_index))), Strategy.LABEL)


# ---------------------------------------------------------------------------
# positional: digit interleaving


def _cell(v: float, offset: float, scale: float) -> int:
    c = int(round((v + offset) * scale))
    if c < 0:
        raise CodecOverflowError(f"coordinate {v} is below the codec offset {-offset}")
    return c


def encode_gps(x: float, y: float, meta: CodecMeta) -> Docid:
    """Interleave the zero-padded scaled x and y digits, most significant first."""
    X = _cell(x, meta.x_offset, meta.scale)
    Y = _cell(y, meta.y_offset, meta.scale)
    w = meta.digit_width
    xs, ys = str(X).zfill(w), str(Y).zfill(w)
    if len(xs) > w or len(ys) > w:
        raise CodecOverflowError(f"cell ({X}, {Y}) needs more than {w} digits")
    return Docid("".join(a + b for a, b in zip(xs, ys)), Strategy.GPS)


def decode_gps(docid, meta: CodecMeta) -> tuple[float, float]:
    text = str(docid)[: 2 * meta.digit_width] if meta.suffix_width else str(docid)
    if len(text) != 2 * meta.digit_width or not text.isdigit():
        raise DocidFormatError(f"expected {2 * meta.digit_width} digits, got {str(docid)!r}")
    X, Y = int(text[0::2]), int(text[1::2])
    return X / meta.scale - meta.x_offset, Y / meta.scale - meta.y_offset


# ---------------------------------------------------------------------------
# positional: Hilbert curve


def _rot(n, x, y, rx, ry):
    if ry == 0:
        if rx == 1:
            x = n - 1 - x
            y = n - 1 - y
        x, y = y, x
    return x, y


def hilbert_xy_to_d(x: int, y: int, order: int) -> int:
    """Distance along the order-``order`` Hilbert curve; (0,0)->(0,1)->(1,1)->(1,0) at order 1."""
    n = 1 << order
    if not (0 <= x < n and 0 <= y < n):
        raise ValueError(f"cell ({x}, {y}) outside the {n}x{n} grid")
    d = 0
    s = n >> 1
    while s > 0:
        rx = 1 if x & s else 0
        ry = 1 if y & s else 0
        d += s * s * ((3 * rx) ^ ry)
        x, y = _rot(n, x, y, rx, ry)
        s >>= 1
    return d


def hilbert_d_to_xy(d: int, order: int) -> tuple[int, int]:
    n = 1 << order
    if not 0 <= d < n * n:
        raise ValueError(f"curve index {d} outside [0, {n * n})")
    x = y = 0
    t = d
    s = 1
    while s < n:
        rx = 1 & (t // 2)
        ry = 1 & (t ^ rx)
        x, y = _rot(s, x, y, rx, ry)
        x += s * rx
        y += s * ry
        t //= 4
        s <<= 1
    return x, y


def hilbert_width(order: int) -> int:
    return len(str(4**order - 1))


def encode_hilbert(x: float, y: float, meta: CodecMeta) -> Docid:
    X = _cell(x, meta.x_offset, meta.scale)
    Y = _cell(y, meta.y_offset, meta.scale)
    if max(X, Y) >= 1 << meta.hilbert_order:
        raise CodecOverflowError(f"cell ({X}, {Y}) outside the 2^{meta.hilbert_order} grid")
    d = hilbert_xy_to_d(X, Y, meta.hilbert_order)
    return Docid(str(d).zfill(hilbert_width(meta.hilbert_order)), Strategy.HILBERT)


def decode_hilbert(docid, meta: CodecMeta) -> tuple[float, float]:
    w = hilbert_width(meta.hilbert_order)
    text = str(docid)
    if len(text) != w + meta.suffix_width or not text.isdigit():
        raise DocidFormatError(f"expected {w + meta.suffix_width} digits, got {text!r}")
    X, Y = hilbert_d_to_xy(int(text[:w]), meta.hilbert_order)
    return X / meta.scale - meta.x_offset, Y / meta.scale - meta.y_offset


# ---------------------------------------------------------------------------
# semantic: recursive k-means


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 50) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding. Returns a label per row.

    Ties in assignment go to the lowest cluster index. Duplicate-heavy input
    may yield fewer than ``k`` distinct labels.
    """
    n = len(points)
    k = min(k, n)
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        c = points[rng.choice(n, p=d2 / total)]
        centers.append(c)
        d2 = np.minimum(d2, np.sum((points - c) ** 2, axis=1))
    centers = np.array(centers)
    labels = None
    sq = np.sum(points**2, axis=1)[:, None]
    for _ in range(max_iter):
        dist = sq - 2.0 * points @ centers.T + np.sum(centers**2, axis=1)[None, :]
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(len(centers)):
            members = points[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return labels


def encode_semantic(descriptors: np.ndarray, k: int = 10, leaf_size: int = 100, seed: int = 0) -> list[Docid]:
    """Hierarchical k-means prefixes plus a within-leaf rank suffix.

    The root is always split (when there are at least two scenes); any group
    larger than ``leaf_size`` is split again. Every docid ends with the
    scene's rank inside its leaf, padded to one global width so docids stay
    unique even when paths have different depths.
    """
    if not 2 <= k <= 10:
        raise ValueError("k must lie in [2, 10] so cluster ids fit one digit")
    if leaf_size < 1:
        raise ValueError("leaf_size must be positive")
    X = np.asarray(descriptors, dtype=np.float64)
    n = len(X)
    if n == 0:
        return []
    rng = np.random.default_rng(seed)
    leaves: list[tuple[str, np.ndarray]] = []

    def split(idx: np.ndarray, path: str):
        if len(idx) == 1 or (path and len(idx) <= leaf_size):
            leaves.append((path, idx))
            return
        labels = kmeans(X[idx], k, rng)
        groups = [idx[labels == j] for j in range(k)]
        if sum(1 for g in groups if len(g)) < 2:
            leaves.append((path, idx))
            return
        for j, g in enumerate(groups):
            if len(g):
                split(g, path + str(j))

    split(np.arange(n), "")
    width = len(str(max(len(idx) for _, idx in leaves) - 1))
    out: list[Docid | None] = [None] * n
    for path, idx in leaves:
        for rank, i in enumerate(sorted(idx.tolist())):
            out[i] = Docid(path + str(rank).zfill(width), Strategy.SEMANTIC)
    return out


# ---------------------------------------------------------------------------
# dataset-level encoding


@dataclass
class DocidTable:
    docids: list[str]
    meta: CodecMeta
    collisions: int = 0
    offending: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.docids)

    @property
    def lengths(self) -> set[int]:
        return {len(d) for d in self.docids}

    def save(self, csv_path, meta_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scene_index", "docid", "strategy"])
            for i, d in enumerate(self.docids):
                w.writerow([i, d, self.meta.strategy.value])
        Path(meta_path).write_text(self.meta.to_json() + "\n")

    @classmethod
    def load(cls, csv_path, meta_path) -> "DocidTable":
        meta = CodecMeta.from_json(Path(meta_path).read_text())
        docids = []
        with open(csv_path, newline="") as fh:
            for k, row in enumerate(csv.DictReader(fh)):
                if int(row["scene_index"]) != k:
                    raise DocidFormatError(f"{csv_path}: scene_index out of order at row {k}")
                docids.append(row["docid"])
        return cls(docids, meta)


def fit_codec_meta(xy: np.ndarray, strategy, scale: float = 100.0, hilbert_order: int = 17,
                   kmeans_k: int = 10, kmeans_seed: int = 0, leaf_size: int = 100) -> CodecMeta:
    """Pick offsets that make every coordinate non-negative and size the digit width."""
    strategy = Strategy(strategy)
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy):
        x_off = max(0.0, -float(xy[:, 0].min()))
        y_off = max(0.0, -float(xy[:, 1].min()))
        top = max(int(round((xy[:, 0].max() + x_off) * scale)), int(round((xy[:, 1].max() + y_off) * scale)))
    else:
        x_off = y_off = 0.0
        top = 0
    return CodecMeta(strategy, x_off, y_off, float(scale), len(str(max(top, 0))), hilbert_order,
                     kmeans_k, kmeans_seed, leaf_size)


def _dedupe_cells(base: list[str], meta: CodecMeta) -> DocidTable:
    groups = Counter(base)
    collisions = sum(c - 1 for c in groups.values())
    if not collisions:
        return DocidTable(list(base), meta)
    width = len(str(max(groups.values()) - 1))
    seen: Counter = Counter()
    out = []
    offending = {}
    for i, d in enumerate(base):
        rank = seen[d]
        seen[d] += 1
        if groups[d] > 1:
            offending.setdefault(d, []).append(i)
        out.append(d + str(rank).zfill(width))
    return DocidTable(out, replace(meta, suffix_width=width), collisions, offending)


def encode_dataset(xy: np.ndarray, descriptors: np.ndarray, strategy, **meta_kw) -> DocidTable:
    """Encode every scene. Co-located GPS/HILBERT scenes get a rank suffix and are counted."""
    strategy = Strategy(strategy)
    meta = fit_codec_meta(xy, strategy, **meta_kw)
    n = len(descriptors)
    if strategy is Strategy.LABEL:
        return DocidTable([encode_label(i, max(n - 1, 0)).text for i in range(n)], meta)
    if strategy is Strategy.SEMANTIC:
        docs = encode_semantic(descriptors, meta.kmeans_k, meta.leaf_size, meta.kmeans_seed)
        return DocidTable([d.text for d in docs], meta)
    enc = encode_gps if strategy is Strategy.GPS else encode_hilbert
    base = []
    for i, (x, y) in enumerate(np.asarray(xy).reshape(-1, 2)):
        try:
            base.append(enc(float(x), float(y), meta).text)
        except CodecOverflowError as exc:
            raise CodecOverflowError(f"scene {i}: {exc}") from None
    return _dedupe_cells(base, meta)


# ---------------------------------------------------------------------------
# trie


class TrieNode:
    __slots__ = ("children", "scene_index", "_mask")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.scene_index: int | None = None
        self._mask = None

    @property
    def terminal(self) -> bool:
        return self.scene_index is not None

    @property
    def allowed_mask(self) -> np.ndarray:
        """Boolean mask over the vocabulary of legal next tokens, built on first use."""
        if self._mask is None:
            m = np.zeros(len(VOCAB), dtype=bool)
            m[list(self.children)] = True
            m[EOS_ID] = self.terminal
            self._mask = m
        return self._mask


class DocidTrie:
    """Prefix tree over digit token ids. ``allowed_next`` gives the legal continuations."""

    def __init__(self, docids, scene_indices=None):
        self.root = TrieNode()
        self.size = 0
        self.node_count = 1
        if scene_indices is None:
            scene_indices = range(len(docids))
        for d, s in zip(docids, scene_indices):
            self._insert(str(d), int(s))

    def _insert(self, docid: str, scene_index: int):
        if not docid or not docid.isdigit():
            raise DocidFormatError(f"cannot index {docid!r}")
        node = self.root
        for ch in docid:
            tid = TOKEN_ID[ch]
            nxt = node.children.get(tid)
            if nxt is None:
                nxt = node.children[tid] = TrieNode()
                self.node_count += 1
            node = nxt
        if node.terminal:
            raise DuplicateDocidError(
                f"docid {docid!r} assigned to both scene {node.scene_index} and scene {scene_index}")
        node.scene_index = scene_index
        self.size += 1

    def __len__(self):
        return self.size

    def find(self, prefix: str) -> TrieNode | None:
        node = self.root
        for ch in prefix:
            node = node.children.get(TOKEN_ID[ch])
            if node is None:
                return None
        return node

    def allowed_next(self, prefix: str) -> set[str]:
        node = self.find(prefix)
        if node is None:
            return set()
        out = {VOCAB[t] for t in node.children}
        if node.terminal:
            out.add(EOS)
        return out

    def lookup(self, docid: str) -> int | None:
        node = self.find(docid)
        return node.scene_index if node is not None else None

    def __contains__(self, docid) -> bool:
        return self.lookup(str(docid)) is not None

    def __iter__(self):
        stack = [(self.root, "")]
        while stack:
            node, prefix = stack.pop()
            if node.terminal:
                yield prefix, node.scene_index
            for tid in sorted(node.children, reverse=True):
                stack.append((node.children[tid], prefix + VOCAB[tid]))


def build_trie(docids, scene_indices=None) -> DocidTrie:
    return DocidTrie(docids, scene_indices)


# ---------------------------------------------------------------------------
# tokens


def tokenize(docid) -> list[str]:
    text = str(docid)
    if not text or not text.isdigit() or not text.isascii():
        raise DocidFormatError(f"cannot tokenize {text!r}")
    return [BOS, *text, EOS]


def detokenize(tokens) -> str:
    toks = [VOCAB[t] if isinstance(t, (int, np.integer)) else t for t in tokens]
    if len(toks) < 3 or toks[0] != BOS or toks[-1] != EOS:
        raise DocidFormatError(f"token sequence must be BOS digits+ EOS, got {toks}")
    body = toks[1:-1]
    if any(t not in DIGITS for t in body):
        raise DocidFormatError(f"control token inside docid body: {toks}")
    return "".join(body)


def token_ids(tokens) -> list[int]:
    return [TOKEN_ID[t] for t in tokens]


def docid_token_ids(docid) -> np.ndarray:
    return np.array(token_ids(tokenize(docid)), dtype=np.int64)


def max_tokens(docids) -> int:
    """Length of the longest tokenized docid (BOS + digits + EOS)."""
    return max((len(str(d)) for d in docids), default=0) + 2
