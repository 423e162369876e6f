"""Trie-constrained beam search over docids."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placeid.docid import BOS_ID, EOS_ID, VOCAB, DocidTrie, TrieNode, docid_token_ids
from placeid.gendec.model import DecoderParams, PrefixTooLongError, forward, log_softmax

DEFAULT_BEAMS = 10


@dataclass
class BeamHypothesis:
    text: str
    log_prob: float
    finished: bool
    node: TrieNode
    pooled_sum: np.ndarray  # sum over the prefix of token * position embedding

    @property
    def length(self) -> int:
        return len(self.text) + 1

    def key(self):
        return (-self.log_prob, self.text, not self.finished)


def beam_search(params: DecoderParams, descriptor, trie: DocidTrie, beam_width: int = DEFAULT_BEAMS,
                top_k: int | None = None) -> list[tuple[str, float]]:
    """Rank docids by summed log-probability, expanding only trie-valid tokens.

    Finished hypotheses stay in the beam and compete on raw log-probability;
    there is no length normalisation. Ties go to the lexicographically
    smaller docid.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    if len(trie) == 0:
        return []
    top_k = beam_width if top_k is None else top_k
    d = np.asarray(descriptor, dtype=np.float64)
    h0 = params.input_w @ d + params.input_b
    tok, pos = params.token_embedding, params.position_embedding
    beams = [BeamHypothesis("", 0.0, False, trie.root, tok[BOS_ID] * pos[0])]

    while True:
        active = [h for h in beams if not h.finished]
        if not active:
            break
        lengths = np.array([h.length for h in active])
        if lengths.max() >= params.max_len:
            raise PrefixTooLongError(f"docids in the trie need max_len > {lengths.max()}")
        pooled = np.vstack([h.pooled_sum for h in active]) / lengths[:, None]
        z = np.concatenate([np.broadcast_to(h0, (len(active), h0.size)), pooled], axis=1)
        a1 = np.tanh(z @ params.hidden1_w.T + params.hidden1_b)
        a2 = np.tanh(a1 @ params.hidden2_w.T + params.hidden2_b)
        lp = log_softmax(a2 @ params.output_w.T + params.output_b)

        # score every (hypothesis, token) pair at once; illegal tokens drop out as -inf
        done = [h for h in beams if h.finished]
        scores = np.where(np.vstack([h.node.allowed_mask for h in active]),
                          np.array([h.log_prob for h in active])[:, None] + lp, -np.inf)
        pool = np.concatenate([[h.log_prob for h in done], scores.ravel()])
        legal = int(np.isfinite(pool).sum())
        cut = -np.partition(-pool, min(beam_width, legal) - 1)[min(beam_width, legal) - 1]

        candidates = [h for h in done if h.log_prob >= cut]
        for r, tid in zip(*np.nonzero(scores >= cut)):
            h = active[r]
            score = float(scores[r, tid])
            if tid == EOS_ID:
                candidates.append(BeamHypothesis(h.text, score, True, h.node, h.pooled_sum))
            else:
                acc = h.pooled_sum + tok[tid] * pos[h.length]
                candidates.append(BeamHypothesis(h.text + VOCAB[tid], score, False, h.node.children[tid], acc))
        candidates.sort(key=BeamHypothesis.key)
        beams = candidates[:beam_width]

    beams.sort(key=BeamHypothesis.key)
    return [(h.text, h.log_prob) for h in beams[:top_k]]


def sequence_log_prob(params: DecoderParams, descriptor, docid) -> float:
    """Score one docid token by token with :func:`forward`; EOS included."""
    ids = docid_token_ids(docid)
    total = 0.0
    for s in range(1, len(ids)):
        total += float(log_softmax(forward(params, descriptor, ids[:s]))[ids[s]])
    return total


def retrieve_scenes(params, descriptor, trie: DocidTrie, beam_width: int = DEFAULT_BEAMS,
                    top_k: int | None = None, exclusion=None) -> list[tuple[int, float]]:
    """Beam search mapped back to scene indices, excluded scenes dropped afterwards."""
    out = []
    for text, lp in beam_search(params, descriptor, trie, beam_width, top_k):
        s = trie.lookup(text)
        if exclusion and s in exclusion:
            continue
        out.append((s, lp))
    return out
