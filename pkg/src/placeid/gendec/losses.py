"""Training objectives and their analytic gradients.

Every loss accepts ``return_grad``; with it set, the call returns
``(value, gradient)`` where the gradient has the structure of the inputs
being differentiated (``DecoderParams`` for decoder losses, a dict of arrays
for the descriptor-space quadruplet loss).
"""

from __future__ import annotations

import enum

import numpy as np

from placeid.docid import TOKEN_ID
from placeid.gendec.model import (
    DecoderParams,
    backward_batch,
    forward_batch,
    log_softmax,
    make_batch,
    step_template,
)

ALPHA = 0.5
BETA = 0.3


class LossKind(str, enum.Enum):
    LM = "LM"
    TRIPLET = "TRIPLET"
    QUADRUPLET = "QUADRUPLET"


BRANCHES = {LossKind.LM: 1, LossKind.TRIPLET: 3, LossKind.QUADRUPLET: 4}


def hinge(z):
    return np.maximum(z, 0.0)


def cross_entropy(logits, target: int, weights=None) -> float:
    """Class-weighted cross-entropy ``-w[target] * log softmax(logits)[target]``."""
    lp = log_softmax(np.asarray(logits, dtype=np.float64))
    w = 1.0 if weights is None else float(np.asarray(weights)[target])
    return float(-w * lp[target])


def _ids(tokens) -> np.ndarray:
    return np.array([int(t) if isinstance(t, (int, np.integer)) else TOKEN_ID[t] for t in tokens], dtype=np.int64)


def branch_losses(params: DecoderParams, descriptors, templates, weights=None):
    """Mean per-step cross-entropy for each (descriptor, template) branch.

    Returns the vector of branch losses plus the state needed by
    :func:`branch_backward`.
    """
    batch = make_batch(descriptors, templates)
    logits, cache = forward_batch(params, batch)
    lp = log_softmax(logits)
    rows = np.arange(batch.n_rows)
    w_row = np.ones(batch.n_rows) if weights is None else np.asarray(weights, dtype=np.float64)[batch.targets]
    ce = -w_row * lp[rows, batch.targets]
    counts = np.diff(np.append(batch.starts, batch.n_rows))
    losses = np.add.reduceat(ce, batch.starts) / counts
    return losses, (batch, cache, lp, w_row, counts)


def branch_backward(params: DecoderParams, state, coefs) -> DecoderParams:
    """Gradient of ``sum_b coefs[b] * loss_b``."""
    batch, cache, lp, w_row, counts = state
    scale = (np.asarray(coefs, dtype=np.float64) / counts)[batch.row_branch] * w_row
    dlogits = np.exp(lp)
    dlogits[np.arange(batch.n_rows), batch.targets] -= 1.0
    dlogits *= scale[:, None]
    return backward_batch(params, batch, cache, dlogits)


def combine(kind: LossKind, lm: np.ndarray, alpha: float = ALPHA, beta: float = BETA):
    """Per-tuple loss and per-branch coefficients from branch LM losses.

    ``lm`` is ``K x M`` (branch kind by tuple): rows are q, p, n, nbis as
    applicable. The p, n and nbis branches are all scored against the
    query's docid.
    """
    kind = LossKind(kind)
    coefs = np.zeros_like(lm)
    coefs[0] = 1.0
    total = lm[0].copy()
    if kind is LossKind.LM:
        return total, coefs
    z1 = lm[1] - lm[2] + alpha
    on1 = z1 > 0
    total += hinge(z1)
    coefs[1] += on1
    coefs[2] -= on1
    if kind is LossKind.QUADRUPLET:
        z2 = lm[1] - lm[3] + beta
        on2 = z2 > 0
        total += hinge(z2)
        coefs[1] += on2
        coefs[3] -= on2
    return total, coefs


def tuple_loss(params: DecoderParams, kind, branch_desc, templates, alpha=ALPHA, beta=BETA,
               weights=None, return_grad=False):
    """Mean loss over M tuples.

    ``branch_desc`` is ``K x M x D`` and ``templates`` holds the M step
    templates of the query docids; each is reused for all K branches.
    """
    kind = LossKind(kind)
    K = BRANCHES[kind]
    branch_desc = np.asarray(branch_desc, dtype=np.float64)
    M = branch_desc.shape[1]
    lm, state = branch_losses(params, branch_desc.reshape(K * M, -1), list(templates) * K, weights)
    lm = lm.reshape(K, M)
    total, coefs = combine(kind, lm, alpha, beta)
    value = float(total.mean())
    if not return_grad:
        return value
    return value, branch_backward(params, state, (coefs / M).ravel())


def _single(params, kind, descs, docid_tokens, alpha, beta, weights, return_grad):
    ids = _ids(docid_tokens)
    tmpl = step_template(ids, params.max_len)
    descs = np.asarray(descs, dtype=np.float64)
    # one forward per branch, so L_m(q) here is bit-identical to lm_loss and the ordering holds exactly
    lm = np.array([branch_losses(params, d[None], [tmpl], weights)[0] for d in descs])
    total, coefs = combine(kind, lm, alpha, beta)
    value = float(total[0])
    if not return_grad:
        return value
    _, state = branch_losses(params, descs, [tmpl] * len(descs), weights)
    return value, branch_backward(params, state, coefs.ravel())


def lm_loss(params, descriptor, docid_tokens, weights=None, return_grad=False):
    """Teacher-forced mean cross-entropy over the digit and EOS prediction steps."""
    return _single(params, LossKind.LM, [descriptor], docid_tokens, ALPHA, BETA, weights, return_grad)


def triplet_lm_loss(params, q, p, n, docid_tokens, alpha=ALPHA, weights=None, return_grad=False):
    """``L_m(q) + [L_m(p) - L_m(n) + alpha]_+``, all branches scored on q's docid."""
    return _single(params, LossKind.TRIPLET, [q, p, n], docid_tokens, alpha, BETA, weights, return_grad)


def quadruplet_lm_loss(params, q, p, n, nbis, docid_tokens, alpha=ALPHA, beta=BETA, weights=None,
                       return_grad=False):
    """Triplet LM loss plus ``[L_m(p) - L_m(nbis) + beta]_+``."""
    return _single(params, LossKind.QUADRUPLET, [q, p, n, nbis], docid_tokens, alpha, beta, weights,
                   return_grad)


def descriptor_quadruplet_loss(g_q, g_p, g_n_list, g_nbis, alpha=ALPHA, beta=BETA, return_grad=False):
    """Descriptor-space quadruplet margin loss summed over the sampled negatives."""
    g_q, g_p, g_nbis = (np.asarray(v, dtype=np.float64) for v in (g_q, g_p, g_nbis))
    g_n = np.atleast_2d(np.asarray(g_n_list, dtype=np.float64))
    if len(g_n) < 1:
        raise ValueError("need at least one negative")
    d_pos = np.sum((g_q - g_p) ** 2)
    d_neg = np.sum((g_q - g_n) ** 2, axis=1)
    d_bis = np.sum((g_nbis - g_n) ** 2, axis=1)
    z1 = d_pos - d_neg + alpha
    z2 = d_pos - d_bis + beta
    value = float(np.sum(hinge(z1) + hinge(z2)))
    if not return_grad:
        return value
    on1 = (z1 > 0).astype(np.float64)
    on2 = (z2 > 0).astype(np.float64)
    k = on1.sum() + on2.sum()
    grads = {
        "g_q": 2 * k * (g_q - g_p) - 2 * (on1[:, None] * (g_q - g_n)).sum(axis=0),
        "g_p": -2 * k * (g_q - g_p),
        "g_n": 2 * on1[:, None] * (g_q - g_n) + 2 * on2[:, None] * (g_nbis - g_n),
        "g_nbis": -2 * (on2[:, None] * (g_nbis - g_n)).sum(axis=0),
    }
    return value, grads


def grad(params, loss_closure):
    """Analytic gradient of ``loss_closure`` at ``params``.

    The closure is called as ``loss_closure(params, return_grad=True)`` and
    must return ``(value, gradient)``.
    """
    return loss_closure(params, return_grad=True)[1]
