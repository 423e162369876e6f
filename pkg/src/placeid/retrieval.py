"""Run each retrieval method over a set of queries and emit RetrievalRecords.

All methods search the TRAIN database and skip references closer than
``dt`` seconds in time to the query.
"""

from __future__ import annotations

import numpy as np

from placeid.dataset import SequenceDataset, Split
from placeid.descindex import DescriptorMatrix, LshIndex, exact_search, lsh_build, lsh_search
from placeid.docid import DocidTrie, build_trie
from placeid.evaluation.metrics import REVISIT_DT, RetrievalRecord, ScoreKind, temporal_neighbours
from placeid.gendec.beam import DEFAULT_BEAMS, retrieve_scenes
from placeid.gendec.model import DecoderParams


def reference_trie(dataset: SequenceDataset, docids, references=None) -> DocidTrie:
    refs = dataset.indices(Split.TRAIN) if references is None else np.asarray(references)
    return build_trie([docids[i] for i in refs], refs)


def reference_matrix(dataset: SequenceDataset, references=None) -> DescriptorMatrix:
    refs = dataset.indices(Split.TRAIN) if references is None else np.asarray(references)
    return DescriptorMatrix(dataset.descriptors[refs], refs)


def _queries(dataset, queries):
    return dataset.indices(Split.EVAL) if queries is None else np.asarray(queries, dtype=np.int64)


def _refs_of_trie(trie: DocidTrie) -> np.ndarray:
    return np.array(sorted(s for _, s in trie), dtype=np.int64)


def retrieve_generative(params: DecoderParams, trie: DocidTrie, dataset: SequenceDataset, queries=None,
                        beam_width: int = DEFAULT_BEAMS, top_k: int | None = None,
                        dt: float = REVISIT_DT) -> list[RetrievalRecord]:
    refs = _refs_of_trie(trie)
    out = []
    for q in _queries(dataset, queries):
        excl = temporal_neighbours(dataset, q, refs, dt)
        cands = retrieve_scenes(params, dataset.descriptors[q], trie, beam_width, top_k, excl)
        out.append(RetrievalRecord(int(q), cands, ScoreKind.LOG_PROB))
    return out


def retrieve_exact(ref: DescriptorMatrix, dataset: SequenceDataset, queries=None, k: int = 10,
                   dt: float = REVISIT_DT) -> list[RetrievalRecord]:
    out = []
    for q in _queries(dataset, queries):
        excl = temporal_neighbours(dataset, q, ref.scene_index, dt)
        out.append(RetrievalRecord(int(q), exact_search(dataset.descriptors[q], ref, k, excl), ScoreKind.COSINE))
    return out


def retrieve_lsh(index: LshIndex, dataset: SequenceDataset, queries=None, k: int = 10,
                 dt: float = REVISIT_DT) -> list[RetrievalRecord]:
    out = []
    for q in _queries(dataset, queries):
        excl = temporal_neighbours(dataset, q, index.scene_index, dt)
        hits = lsh_search(dataset.descriptors[q], index, k, excl)
        out.append(RetrievalRecord(int(q), [(s, -float(h)) for s, h in hits], ScoreKind.NEG_HAMMING))
    return out


def build_lsh(dataset: SequenceDataset, n_bits: int, seed: int, references=None) -> LshIndex:
    return lsh_build(reference_matrix(dataset, references), n_bits, seed)
