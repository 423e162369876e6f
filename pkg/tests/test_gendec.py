import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from placeid.docid import BOS, EOS, VOCAB, build_trie, docid_token_ids, encode_dataset, tokenize
from placeid.gendec.beam import beam_search, retrieve_scenes, sequence_log_prob
from placeid.gendec.losses import (
    cross_entropy,
    descriptor_quadruplet_loss,
    grad,
    lm_loss,
    quadruplet_lm_loss,
    triplet_lm_loss,
)
from placeid.gendec.model import (
    DecoderParams,
    PrefixTooLongError,
    forward,
    load_checkpoint,
    save_checkpoint,
    softmax,
)
from placeid.gendec.train import TrainConfig, mean_lm_loss, train

D = 6


def small_params(seed=0, max_len=8):
    return DecoderParams.init(D, embed_dim=4, width=5, max_len=max_len, seed=seed)


def forward_oracle(p, d, prefix_ids):
    """Layer equations written out element by element."""
    E = p.token_embedding.shape[1]
    h0 = [sum(p.input_w[e, j] * d[j] for j in range(len(d))) + p.input_b[e] for e in range(E)]
    L = len(prefix_ids)
    pooled = [sum(p.token_embedding[t, e] * p.position_embedding[i, e] for i, t in enumerate(prefix_ids)) / L
              for e in range(E)]
    z = h0 + pooled
    a1 = [math.tanh(sum(w * v for w, v in zip(row, z)) + b) for row, b in zip(p.hidden1_w, p.hidden1_b)]
    a2 = [math.tanh(sum(w * v for w, v in zip(row, a1)) + b) for row, b in zip(p.hidden2_w, p.hidden2_b)]
    return np.array([sum(w * v for w, v in zip(row, a2)) + b for row, b in zip(p.output_w, p.output_b)])


def log_softmax_oracle(logits):
    m = max(logits)
    s = sum(math.exp(v - m) for v in logits)
    return [v - m - math.log(s) for v in logits]


def lm_oracle(p, d, docid):
    ids = docid_token_ids(docid).tolist()
    steps = [-log_softmax_oracle(forward_oracle(p, d, ids[:s]))[ids[s]] for s in range(1, len(ids))]
    return sum(steps) / len(steps)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def fd_check(params, closure, n_coords, seed, h=1e-5):
    """Worst relative error between analytic and central-difference partials."""
    _, g = closure(params, return_grad=True)
    flat, gflat = params.ravel(), g.ravel()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in rng.choice(len(flat), n_coords, replace=False):
        e = np.zeros_like(flat)
        e[i] = h
        num = (closure(params.unravel(flat + e)) - closure(params.unravel(flat - e))) / (2 * h)
        if abs(num) < 1e-7 and abs(gflat[i]) < 1e-7:
            continue
        worst = max(worst, rel_err(num, gflat[i]))
    return worst


# --- forward -----------------------------------------------------------------

def test_zero_params_uniform():
    p = DecoderParams.zeros(D, 4, 5, 8)
    logits = forward(p, np.ones(D), [BOS, "3"])
    assert (logits == 0).all()
    np.testing.assert_allclose(softmax(logits), 1 / 12)


def test_forward_deterministic_and_matches_oracle():
    p = small_params(3)
    d = np.random.default_rng(0).standard_normal(D)
    prefix = docid_token_ids("2718")[:4]
    a, b = forward(p, d, prefix), forward(p, d, prefix)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_allclose(a, forward_oracle(p, d, prefix.tolist()), atol=1e-12)


def test_forward_sees_token_order():
    p = small_params(4)
    d = np.ones(D)
    assert not np.allclose(forward(p, d, [BOS, "1", "2"]), forward(p, d, [BOS, "2", "1"]))


def test_forward_prefix_too_long():
    p = small_params(max_len=3)
    with pytest.raises(PrefixTooLongError):
        forward(p, np.ones(D), [BOS, "1", "2"])


@given(st.integers(0, 100), st.lists(st.integers(2, 11), max_size=6))
def test_softmax_normalised(seed, digits):
    p = small_params(seed)
    logits = forward(p, np.random.default_rng(seed).standard_normal(D), [0, *digits])
    assert abs(softmax(logits).sum() - 1.0) < 1e-9


# --- cross entropy and LM losses ---------------------------------------------

def test_cross_entropy_uniform():
    assert cross_entropy(np.zeros(12), 5) == pytest.approx(math.log(12), abs=1e-12)
    assert math.log(12) == pytest.approx(2.4849, abs=1e-4)


def test_cross_entropy_saturated():
    logits = np.zeros(12)
    logits[4] = 1000
    assert cross_entropy(logits, 4) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_hand_value():
    oracle = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    assert cross_entropy([1, 2, 3], 2) == pytest.approx(oracle, abs=1e-12)
    assert cross_entropy([1, 2, 3], 2) == pytest.approx(0.40761, abs=1e-5)


def test_cross_entropy_weighted():
    w = np.ones(12)
    w[2] = 2.5
    assert cross_entropy(np.arange(12.0), 2, w) == pytest.approx(2.5 * cross_entropy(np.arange(12.0), 2))


def test_lm_loss_zero_params_is_ln12():
    p = DecoderParams.zeros(D, 4, 5, 8)
    assert lm_loss(p, np.ones(D), tokenize("123")) == pytest.approx(math.log(12), abs=1e-12)


def test_lm_loss_matches_oracle_and_is_pure():
    p = small_params(5)
    rng = np.random.default_rng(1)
    items = [(rng.standard_normal(D), s) for s in ("0", "42", "31415")]
    first = [lm_loss(p, d, tokenize(s)) for d, s in items]
    second = [lm_loss(p, d, tokenize(s)) for d, s in reversed(items)][::-1]
    assert first == second
    for (d, s), v in zip(items, first):
        assert v == pytest.approx(lm_oracle(p, d, s), abs=1e-12)


def test_lm_loss_equals_mean_of_sequence_log_prob():
    p = small_params(6)
    d = np.random.default_rng(2).standard_normal(D)
    assert lm_loss(p, d, tokenize("907")) == pytest.approx(-sequence_log_prob(p, d, "907") / 4, abs=1e-12)


def _descs(seed, k):
    return list(np.random.default_rng(seed).standard_normal((k, D)))


def test_triplet_identical_branches_adds_alpha():
    p = small_params(7)
    q = _descs(0, 1)[0]
    toks = tokenize("12")
    assert triplet_lm_loss(p, q, q, q, toks, alpha=0.5) == pytest.approx(lm_loss(p, q, toks) + 0.5, abs=1e-12)


def _separated(p, toks, k):
    """First draw whose last branch scores at least 0.2 nats worse than the second."""
    for seed in range(100):
        ds = _descs(seed, k)
        if lm_loss(p, ds[-1], toks) > lm_loss(p, ds[1], toks) + 0.2:
            return ds
    raise AssertionError("no separated draw")


def test_triplet_inactive_hinge_is_lm():
    p = small_params(8)
    toks = tokenize("12")
    q, pp, n = _separated(p, toks, 3)
    lp, ln = lm_loss(p, pp, toks), lm_loss(p, n, toks)
    alpha = ln - lp - 0.1  # margin small enough that the hinge clamps
    assert triplet_lm_loss(p, q, pp, n, toks, alpha=alpha) == pytest.approx(lm_loss(p, q, toks), abs=1e-12)


def test_triplet_and_quadruplet_compositional_oracle():
    p = small_params(9)
    for seed in range(5):
        q, pp, n, nb = _descs(seed, 4)
        toks = tokenize("305")
        lq, lp, ln, lb = (lm_loss(p, x, toks) for x in (q, pp, n, nb))
        tri = lq + max(lp - ln + 0.5, 0.0)
        quad = tri + max(lp - lb + 0.3, 0.0)
        assert triplet_lm_loss(p, q, pp, n, toks) == pytest.approx(tri, abs=1e-12)
        assert quadruplet_lm_loss(p, q, pp, n, nb, toks) == pytest.approx(quad, abs=1e-12)


def test_quadruplet_identical_p_nbis_adds_beta():
    p = small_params(10)
    q, pp, n = _descs(3, 3)
    toks = tokenize("77")
    assert (quadruplet_lm_loss(p, q, pp, n, pp, toks, beta=0.3)
            == pytest.approx(triplet_lm_loss(p, q, pp, n, toks) + 0.3, abs=1e-12))


def test_quadruplet_inactive_second_hinge_is_triplet():
    p = small_params(11)
    toks = tokenize("77")
    q, pp, n, nb = _separated(p, toks, 4)
    lp, lb = lm_loss(p, pp, toks), lm_loss(p, nb, toks)
    beta = lb - lp - 0.1
    assert (quadruplet_lm_loss(p, q, pp, n, nb, toks, beta=beta)
            == pytest.approx(triplet_lm_loss(p, q, pp, n, toks), abs=1e-12))


@given(st.integers(0, 10_000))
def test_loss_ordering(seed):
    p = small_params(seed % 7)
    q, pp, n, nb = _descs(seed, 4)
    toks = tokenize(str(seed))
    lm = lm_loss(p, q, toks)
    tri = triplet_lm_loss(p, q, pp, n, toks)
    assert quadruplet_lm_loss(p, q, pp, n, nb, toks) >= tri >= lm >= 0


# --- descriptor quadruplet loss ------------------------------------------------

def test_descriptor_quadruplet_clamped_to_zero():
    g = np.zeros(3)
    far = [np.array([5.0, 0, 0]), np.array([0, 5.0, 0])]
    assert descriptor_quadruplet_loss(g, g, far, np.array([0, 0, 5.0])) == 0.0


def test_descriptor_quadruplet_all_equal():
    g = np.ones(4)
    for n in (1, 3, 5):
        assert descriptor_quadruplet_loss(g, g, [g] * n, g, 0.5, 0.3) == pytest.approx(n * 0.8, abs=1e-12)


def test_descriptor_quadruplet_term_by_term():
    rng = np.random.default_rng(0)
    q, pp, nb = rng.standard_normal((3, 5))
    negs = rng.standard_normal((3, 5))
    sq = lambda a, b: float(np.sum((a - b) ** 2))
    expect = sum(max(sq(q, pp) - sq(q, n) + 0.5, 0) + max(sq(q, pp) - sq(nb, n) + 0.3, 0) for n in negs)
    assert descriptor_quadruplet_loss(q, pp, negs, nb) == pytest.approx(expect, abs=1e-12)


def test_descriptor_quadruplet_gradient():
    rng = np.random.default_rng(1)
    vals = {"g_q": rng.standard_normal(4) * 0.3, "g_p": rng.standard_normal(4) * 0.3,
            "g_n": rng.standard_normal((3, 4)) * 0.3, "g_nbis": rng.standard_normal(4) * 0.3}
    f = lambda v: descriptor_quadruplet_loss(v["g_q"], v["g_p"], v["g_n"], v["g_nbis"])
    _, g = descriptor_quadruplet_loss(vals["g_q"], vals["g_p"], vals["g_n"], vals["g_nbis"], return_grad=True)
    for key, arr in vals.items():
        for idx in np.ndindex(arr.shape):
            plus = {k: v.copy() for k, v in vals.items()}
            minus = {k: v.copy() for k, v in vals.items()}
            plus[key][idx] += 1e-6
            minus[key][idx] -= 1e-6
            num = (f(plus) - f(minus)) / 2e-6
            assert num == pytest.approx(g[key][idx], rel=1e-4, abs=1e-7)


# --- grad ----------------------------------------------------------------------

def test_grad_of_constant_is_zero():
    p = small_params()
    g = grad(p, lambda q, return_grad=False: (1.0, q.zeros_like()) if return_grad else 1.0)
    assert not g.ravel().any()


def test_grad_quadratic():
    c = small_params(1)
    x = small_params(2)

    def quad(q, return_grad=False):
        diff = q.ravel() - c.ravel()
        value = float(diff @ diff)
        return (value, q.unravel(2 * diff)) if return_grad else value

    np.testing.assert_allclose(grad(x, quad).ravel(), 2 * (x.ravel() - c.ravel()))


@pytest.mark.parametrize("which", ["lm", "triplet", "quadruplet"])
def test_lm_gradients_finite_difference(which):
    p = small_params(12)
    q, pp, n, nb = _descs(5, 4)
    toks = tokenize("4096")
    fns = {
        "lm": lambda prm, return_grad=False: lm_loss(prm, q, toks, return_grad=return_grad),
        "triplet": lambda prm, return_grad=False: triplet_lm_loss(prm, q, pp, n, toks, return_grad=return_grad),
        "quadruplet": lambda prm, return_grad=False: quadruplet_lm_loss(prm, q, pp, n, nb, toks,
                                                                        return_grad=return_grad),
    }
    assert fd_check(p, fns[which], 10, seed=0) <= 1e-4


# --- beam search ---------------------------------------------------------------

def test_beam_single_docid():
    p = small_params(13)
    d = np.ones(D)
    out = beam_search(p, d, build_trie(["305"]))
    assert [t for t, _ in out] == ["305"]
    assert out[0][1] == pytest.approx(sequence_log_prob(p, d, "305"), abs=1e-12)


def test_beam_zero_params_tie_break():
    p = DecoderParams.zeros(D, 4, 5, 8)
    out = beam_search(p, np.ones(D), build_trie(["1", "0"]))
    assert [t for t, _ in out] == ["0", "1"]
    for _, lp in out:
        assert lp == pytest.approx(2 * math.log(1 / 12), abs=1e-12)


def exhaustive(p, d, docids):
    scored = [(s, sequence_log_prob(p, d, s)) for s in docids]
    return sorted(scored, key=lambda t: (-t[1], t[0]))


@given(st.sets(st.text("0123", min_size=1, max_size=4), min_size=1, max_size=15), st.integers(0, 50))
def test_beam_wide_equals_exhaustive(docids, seed):
    p = small_params(seed)
    d = np.random.default_rng(seed).standard_normal(D)
    docids = sorted(docids)
    out = beam_search(p, d, build_trie(docids), beam_width=len(docids))
    want = exhaustive(p, d, docids)
    assert [t for t, _ in out] == [t for t, _ in want]
    np.testing.assert_allclose([v for _, v in out], [v for _, v in want], atol=1e-9)


@given(st.sets(st.text("0123456789", min_size=2, max_size=5), min_size=2, max_size=40), st.integers(1, 6))
def test_beam_outputs_valid_and_rescored(docids, width):
    p = small_params(3)
    d = np.ones(D)
    trie = build_trie(sorted(docids))
    out = beam_search(p, d, trie, beam_width=width)
    assert 1 <= len(out) <= width
    for text, lp in out:
        assert text in docids
        assert lp == pytest.approx(sequence_log_prob(p, d, text), abs=1e-9)
    assert [lp for _, lp in out] == sorted((lp for _, lp in out), reverse=True)


def test_retrieve_scenes_drops_excluded():
    p = small_params(4)
    trie = build_trie(["10", "11", "12"], [5, 6, 7])
    out = retrieve_scenes(p, np.ones(D), trie, beam_width=3, exclusion={6})
    assert sorted(s for s, _ in out) == [5, 7]


def test_beam_empty_trie_and_bad_width():
    p = small_params()
    assert beam_search(p, np.ones(D), build_trie([])) == []
    with pytest.raises(ValueError):
        beam_search(p, np.ones(D), build_trie(["1"]), beam_width=0)


# --- training --------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_run(synth200):
    table = encode_dataset(synth200.xy, synth200.descriptors, "HILBERT")
    return synth200, table.docids


def test_train_zero_epochs_returns_init(tiny_run):
    ds, docids = tiny_run
    init = DecoderParams.init(ds.descriptor_dim, 8, 16, 13, seed=1)
    res = train(ds, docids, TrainConfig(epochs=0, embed_dim=8, width=16), params=init)
    assert res.params.tobytes() == init.tobytes()
    assert res.log == []


def test_train_deterministic(tiny_run):
    ds, docids = tiny_run
    cfg = TrainConfig(epochs=2, embed_dim=8, width=16, seed=5, eval_every=2)
    a = train(ds, docids, cfg)
    b = train(ds, docids, cfg)
    assert a.params.tobytes() == b.params.tobytes()
    assert [e.train_loss for e in a.log] == [e.train_loss for e in b.log]


def test_train_halves_lm_loss(tiny_run):
    ds, docids = tiny_run
    cfg = TrainConfig(epochs=200, loss_kind="LM", seed=0, eval_every=50)
    init = DecoderParams.init(ds.descriptor_dim, cfg.embed_dim, cfg.width, 13, seed=0)
    res = train(ds, docids, cfg, params=init)
    assert mean_lm_loss(res.params, ds, docids) < mean_lm_loss(init, ds, docids) / 2


def test_train_rejects_mismatched_docids(tiny_run):
    ds, docids = tiny_run
    with pytest.raises(ValueError):
        train(ds, docids[:-1], TrainConfig(epochs=1))


def test_train_config_rejects_negative_margin():
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1)


# --- checkpoint --------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    p = small_params(9)
    save_checkpoint(tmp_path / "c.ckpt", p, {"strategy": "HILBERT"})
    raw = (tmp_path / "c.ckpt").read_bytes()
    assert raw[:4] == b"GDC1"
    assert np.frombuffer(raw[4:24], "<u4").tolist() == [12, D, 4, 5, 8]
    back, side = load_checkpoint(tmp_path / "c.ckpt")
    assert side == {"strategy": "HILBERT"}
    np.testing.assert_allclose(back.ravel(), p.ravel().astype(np.float32), atol=0)


def test_vocab_constants():
    assert len(VOCAB) == 12 and BOS != EOS
