"""Wall-clock scaling benchmarks for retrieval methods.

Scan methods get a least-squares line ``T = a*N + b``; generative decoding
gets a constant fit. The crossover is where the two fitted lines meet.
"""

from __future__ import annotations

import csv
import json
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from placeid.descindex import DescriptorMatrix, exact_search, lsh_build, lsh_search
from placeid.docid import build_trie, hilbert_width, max_tokens
from placeid.gendec.beam import DEFAULT_BEAMS, beam_search
from placeid.gendec.model import DecoderParams
from placeid.seeding import subseed

LINEAR = "linear"
CONSTANT = "constant"
MIN_SIZES = 4


@dataclass
class BenchMethod:
    """``setup(n_ref)`` builds the index and returns a zero-argument query callable."""

    name: str
    kind: str
    setup: Callable[[int], Callable[[], object]]

    def __post_init__(self):
        if self.kind not in (LINEAR, CONSTANT):
            raise ValueError(f"kind must be {LINEAR!r} or {CONSTANT!r}, got {self.kind!r}")


@dataclass
class SizeTiming:
    n_ref: int
    mean_s: float
    std_s: float
    median_s: float


@dataclass
class Fit:
    kind: str
    slope: float
    intercept: float
    r2: float

    def predict(self, n):
        return self.slope * np.asarray(n, dtype=float) + self.intercept


@dataclass
class MethodTiming:
    name: str
    kind: str
    timings: list[SizeTiming]
    fit: Fit

    @property
    def means(self) -> np.ndarray:
        return np.array([t.mean_s for t in self.timings])

    @property
    def spread(self) -> float:
        """Largest over smallest mean time across sizes."""
        return float(self.means.max() / self.means.min())

    @property
    def growth(self) -> float:
        """Mean time at the largest size over the smallest size."""
        return float(self.means[-1] / self.means[0])


@dataclass
class TimingReport:
    sizes: list[int]
    repeats: int
    methods: list[MethodTiming]
    crossovers: dict[str, float | None] = field(default_factory=dict)

    @property
    def crossover_n(self) -> float | None:
        """Crossover of the first scan method with the first constant-time method."""
        return next(iter(self.crossovers.values()), None)

    def method(self, name: str) -> MethodTiming:
        for m in self.methods:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "repeats": self.repeats,
            "methods": [asdict(m) | {"spread": m.spread, "growth": m.growth} for m in self.methods],
            "crossovers": self.crossovers,
            "crossover_n": self.crossover_n,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def csv_rows(self) -> list[list]:
        rows = []
        for m in self.methods:
            for t in m.timings:
                rows += [[m.name, f"mean_s@{t.n_ref}", t.mean_s], [m.name, f"std_s@{t.n_ref}", t.std_s],
                         [m.name, f"median_s@{t.n_ref}", t.median_s]]
            rows += [[m.name, "fit_slope", m.fit.slope], [m.name, "fit_intercept", m.fit.intercept],
                     [m.name, "fit_r2", m.fit.r2], [m.name, "spread", m.spread], [m.name, "growth", m.growth]]
        rows += [[pair, "crossover_n", v] for pair, v in self.crossovers.items()]
        return rows

    def write(self, json_path, csv_path) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "metric", "value"])
            w.writerows(self.csv_rows())


def fit_linear(n, t) -> Fit:
    n, t = np.asarray(n, dtype=float), np.asarray(t, dtype=float)
    slope, intercept = np.polyfit(n, t, 1)
    return Fit(LINEAR, float(slope), float(intercept), _r2(t, slope * n + intercept))


def fit_constant(n, t) -> Fit:
    t = np.asarray(t, dtype=float)
    c = float(t.mean())
    return Fit(CONSTANT, 0.0, c, _r2(t, np.full_like(t, c)))


def _r2(t, pred) -> float:
    ss_tot = float(((t - t.mean()) ** 2).sum())
    ss_res = float(((t - pred) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def crossover(a: Fit, b: Fit) -> float | None:
    """N at which two fitted lines meet; None when they are parallel."""
    if a.slope == b.slope:
        return None
    return (b.intercept - a.intercept) / (a.slope - b.slope)


@contextmanager
def _pinned():
    """Pin to one CPU while timing, when the platform supports it."""
    if not hasattr(os, "sched_getaffinity"):
        yield
        return
    before = os.sched_getaffinity(0)
    try:
        os.sched_setaffinity(0, {min(before)})
    except OSError:
        yield
        return
    try:
        yield
    finally:
        os.sched_setaffinity(0, before)


def time_callable(fn: Callable[[], object], repeats: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    out = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        out[i] = time.perf_counter() - t0
    return out


def timing_bench(methods: list[BenchMethod], sizes, repeats: int = 20, warmup: int = 3) -> TimingReport:
    sizes = [int(s) for s in sizes]
    if len(sizes) < MIN_SIZES:
        raise ValueError(f"need at least {MIN_SIZES} reference sizes to fit, got {len(sizes)}")
    if sizes != sorted(set(sizes)):
        raise ValueError("sizes must be strictly ascending")
    if repeats < 1:
        raise ValueError("repeats must be positive")

    results = []
    with _pinned():
        for m in methods:
            timings = []
            for n in sizes:
                samples = time_callable(m.setup(n), repeats, warmup)
                timings.append(SizeTiming(n, float(samples.mean()), float(samples.std()), float(np.median(samples))))
            means = [t.mean_s for t in timings]
            fit = fit_linear(sizes, means) if m.kind == LINEAR else fit_constant(sizes, means)
            results.append(MethodTiming(m.name, m.kind, timings, fit))

    crossovers = {}
    for lin in (r for r in results if r.kind == LINEAR):
        for const in (r for r in results if r.kind == CONSTANT):
            crossovers[f"{lin.name}|{const.name}"] = crossover(lin.fit, const.fit)
    return TimingReport(sizes, repeats, results, crossovers)


def _unit(rng, n, d):
    x = rng.standard_normal((n, d)).astype(np.float64)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def exact_method(descriptor_dim: int = 256, seed: int = 0) -> BenchMethod:
    def setup(n):
        rng = np.random.default_rng(subseed(seed, f"bench-exact-{n}"))
        ref = DescriptorMatrix(_unit(rng, n, descriptor_dim))
        q = _unit(rng, 1, descriptor_dim)[0]
        return lambda: exact_search(q, ref, 1)
    return BenchMethod("exact", LINEAR, setup)


def lsh_method(n_bits: int = 256, descriptor_dim: int = 256, seed: int = 0) -> BenchMethod:
    def setup(n):
        rng = np.random.default_rng(subseed(seed, f"bench-lsh-{n}"))
        index = lsh_build(DescriptorMatrix(_unit(rng, n, descriptor_dim)), n_bits, subseed(seed, "lsh"))
        q = _unit(rng, 1, descriptor_dim)[0]
        return lambda: lsh_search(q, index, 1)
    return BenchMethod(f"lsh{n_bits}", LINEAR, setup)


def generative_method(descriptor_dim: int = 256, seed: int = 0, beam_width: int = DEFAULT_BEAMS,
                      hilbert_order: int = 17, embed_dim: int = 64, width: int = 256) -> BenchMethod:
    """Beam search over ``n`` distinct Hilbert-width docids with an untrained decoder.

    Decoding cost depends on docid length and beam width, not on how the
    weights were fitted, so random parameters are adequate for timing.
    """
    digits = hilbert_width(hilbert_order)

    def setup(n):
        rng = np.random.default_rng(subseed(seed, f"bench-gen-{n}"))
        cells = np.unique(rng.integers(0, 4**hilbert_order, size=2 * n))
        cells = rng.permutation(cells)[:n]
        if len(cells) < n:
            raise ValueError(f"cannot draw {n} distinct cells at order {hilbert_order}")
        docids = [f"{c:0{digits}d}" for c in cells]
        trie = build_trie(docids)
        params = DecoderParams.init(descriptor_dim, embed_dim, width, max_tokens(docids),
                                    subseed(seed, "bench-decoder"))
        q = _unit(rng, 1, descriptor_dim)[0]
        return lambda: beam_search(params, q, trie, beam_width)
    return BenchMethod("generative", CONSTANT, setup)
