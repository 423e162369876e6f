"""Minibatch training of the docid decoder with Adam."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from placeid.dataset import SequenceDataset, Split, mine_tuples
from placeid.docid import docid_token_ids, max_tokens
from placeid.evaluation.metrics import REVISIT_DT, ground_truth_build, hits_at_n
from placeid.gendec.beam import DEFAULT_BEAMS
from placeid.gendec.losses import ALPHA, BETA, LossKind, tuple_loss
from placeid.gendec.model import DecoderParams, step_template
from placeid.retrieval import reference_trie, retrieve_generative
from placeid.seeding import subseed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    alpha: float = ALPHA
    beta: float = BETA
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    loss_kind: LossKind = LossKind.QUADRUPLET
    embed_dim: int = 64
    width: int = 256
    negatives_per_query: int = 1
    p_radius: float = 3.0
    n_radius: float = 20.0
    beam_width: int = DEFAULT_BEAMS
    eval_every: int = 1
    dt: float = REVISIT_DT

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("margins must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_kind"] = self.loss_kind.value
        return d


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_hits_at_1: float | None


@dataclass
class TrainResult:
    params: DecoderParams
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0
    best_val_hits_at_1: float | None = None


class Adam:
    def __init__(self, params: DecoderParams, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0

    def step(self, params: DecoderParams, grads: DecoderParams) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for a, g, m, v in zip(params.arrays(), grads.arrays(), self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _branch_scenes(kind: LossKind, dataset: SequenceDataset, config: TrainConfig, rng, epoch_seed: int):
    """K x M matrix of scene indices for one epoch, rows q[, p, n[, nbis]]."""
    if kind is LossKind.LM:
        items = dataset.indices(Split.TRAIN)
        return items[rng.permutation(len(items))][None, :]
    tuples = mine_tuples(dataset, config.p_radius, config.n_radius, config.negatives_per_query, epoch_seed)
    arr = np.array([[t.q, t.p, t.n, t.nbis] for t in tuples], dtype=np.int64).T
    arr = arr[:, rng.permutation(arr.shape[1])]
    return arr[:3] if kind is LossKind.TRIPLET else arr


def validation_hits(params, dataset, trie, gt, config: TrainConfig) -> float | None:
    queries = [q for q, s in gt.items() if s]
    if not queries:
        return None
    records = retrieve_generative(params, trie, dataset, queries, config.beam_width, config.beam_width, config.dt)
    return hits_at_n(records, gt, 1)


def train(dataset: SequenceDataset, docids, config: TrainConfig, params: DecoderParams | None = None) -> TrainResult:
    """Fit the decoder to map TRAIN descriptors onto their docids.

    Keeps the parameters from the epoch with the best VAL Hits@1 (later
    epochs win ties). When no VAL query has a reachable ground truth, the
    final parameters are kept.
    """
    train_idx = dataset.indices(Split.TRAIN)
    if len(train_idx) == 0:
        raise ValueError("TRAIN split is empty")
    if len(docids) != len(dataset):
        raise ValueError(f"{len(docids)} docids for {len(dataset)} scenes")
    kind = config.loss_kind
    if params is None:
        params = DecoderParams.init(dataset.descriptor_dim, config.embed_dim, config.width,
                                    max_tokens(docids), subseed(config.seed, "decoder-init"))
    params = params.copy()
    templates = [step_template(docid_token_ids(d), params.max_len) for d in docids]
    desc = dataset.descriptors

    trie = reference_trie(dataset, docids)
    val_gt = ground_truth_build(dataset, config.p_radius, config.dt, queries=dataset.indices(Split.VAL))
    has_val = any(val_gt.values())

    best = TrainResult(params.copy(), [], 0, validation_hits(params, dataset, trie, val_gt, config))
    opt = Adam(params, config.learning_rate)
    rng = np.random.default_rng(subseed(config.seed, "shuffle"))

    for epoch in range(1, config.epochs + 1):
        scenes = _branch_scenes(kind, dataset, config, rng, subseed(config.seed, f"tuples-{epoch}"))
        total, count = 0.0, 0
        for lo in range(0, scenes.shape[1], config.batch_size):
            block = scenes[:, lo:lo + config.batch_size]
            value, g = tuple_loss(params, kind, desc[block], [templates[q] for q in block[0]],
                                  config.alpha, config.beta, return_grad=True)
            opt.step(params, g)
            total += value * block.shape[1]
            count += block.shape[1]
        val = None
        if has_val and (epoch % config.eval_every == 0 or epoch == config.epochs):
            val = validation_hits(params, dataset, trie, val_gt, config)
        best.log.append(EpochLog(epoch, total / count, val))
        log.debug("epoch %d loss %.4f val@1 %s", epoch, total / count, val)
        if val is not None and (best.best_val_hits_at_1 is None or val >= best.best_val_hits_at_1):
            best.params, best.best_epoch, best.best_val_hits_at_1 = params.copy(), epoch, val

    if not has_val and config.epochs > 0:
        best.params, best.best_epoch = params.copy(), config.epochs
    return best


def mean_lm_loss(params: DecoderParams, dataset: SequenceDataset, docids, split: Split = Split.TRAIN) -> float:
    idx = dataset.indices(split)
    templates = [step_template(docid_token_ids(docids[i]), params.max_len) for i in idx]
    return tuple_loss(params, LossKind.LM, dataset.descriptors[idx][None], templates)
