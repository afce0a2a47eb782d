"""Loss terms: frozen values, loop-oracle equivalence, exact reductions."""

import numpy as np
import pytest

from anchoradapt.anchors import AnchorError, AnchorSet, construct_anchors
from anchoradapt.model import Discriminator
from anchoradapt.objectives import (LossBreakdown, LossTerms,
                                    adversarial_losses, ce_loss, combine,
                                    dis_loss)
from anchoradapt.domains import make_rng
from anchoradapt.tensor import backward, scalar, tensor
from helpers import fd_rel_error, oracle_ce, oracle_dis


def _probs(rng, N, C):
    logits = rng.normal(scale=2.0, size=(N, C))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# -- cross entropy ---------------------------------------------------------------

def test_ce_frozen_value():
    loss = ce_loss(tensor([[0.5, 0.5]]), np.array([0]))
    assert loss.item() == pytest.approx(0.6931471805599453, abs=1e-12)


def test_ce_clamps_vanishing_probabilities():
    loss = ce_loss(tensor([[0.0, 1.0]]), np.array([0]))
    assert loss.item() == pytest.approx(27.631021115928547, abs=1e-12)


def test_ce_matches_loop_oracle():
    for seed in range(10):
        rng = make_rng(seed, 10)
        N, C = 25, 4
        p = _probs(rng, N, C)
        labels = rng.integers(0, C, size=N)
        mask = rng.random(N) < 0.6
        full = ce_loss(tensor(p), labels).item()
        masked = ce_loss(tensor(p), labels, mask).item()
        assert full == pytest.approx(oracle_ce(p, labels), rel=1e-12, abs=1e-12)
        assert masked == pytest.approx(oracle_ce(p, labels, mask),
                                       rel=1e-12, abs=1e-12)


def test_ce_accepts_one_hot_labels():
    rng = make_rng(1, 11)
    p = _probs(rng, 6, 3)
    idx = rng.integers(0, 3, size=6)
    hot = np.eye(3)[idx]
    assert ce_loss(tensor(p), hot).item() == ce_loss(tensor(p), idx).item()


def test_ce_ignores_placeholder_labels_outside_the_mask():
    p = tensor([[0.9, 0.1], [0.2, 0.8]])
    labels = np.array([0, -1])
    mask = np.array([True, False])
    assert ce_loss(p, labels, mask).item() == \
        pytest.approx(-np.log(0.9), abs=1e-12)
    with pytest.raises(ValueError):
        ce_loss(p, labels, np.array([True, True]))


def test_ce_empty_mask_is_exactly_zero():
    p = tensor(np.full((3, 2), 0.5), requires_grad=True)
    loss = ce_loss(p, np.array([0, 1, 0]), np.zeros(3, dtype=bool))
    assert loss.item() == 0.0
    assert not loss.requires_grad


def test_ce_shape_and_range_errors():
    p = tensor(np.full((2, 3), 1 / 3))
    with pytest.raises(ValueError):
        ce_loss(p, np.array([0]))
    with pytest.raises(ValueError):
        ce_loss(p, np.array([0, 3]))
    with pytest.raises(ValueError):
        ce_loss(p, np.eye(3))
    with pytest.raises(ValueError):
        ce_loss(p, np.array([0, 1]), np.ones(3, dtype=bool))


# -- distance loss ----------------------------------------------------------------

def _aset(anchors, valid=None):
    anchors = np.asarray(anchors, dtype=np.float64)
    C = anchors.shape[0]
    v = np.ones(C, dtype=bool) if valid is None else np.asarray(valid)
    return AnchorSet(anchors, v, v.astype(np.int64))


def test_dis_frozen_value():
    aset = _aset([[0.0, 0.0], [5.0, 5.0]])
    loss = dis_loss(tensor([[1.0, 1.0]]), np.array([0]), None, aset)
    assert loss.item() == 2.0


def test_dis_matches_loop_oracle():
    for seed in range(10):
        rng = make_rng(seed, 12)
        N, C, F = 20, 4, 3
        feats = rng.normal(size=(N, F))
        src = rng.normal(size=(N, F))
        labels = rng.integers(0, C, size=N)
        aset = construct_anchors(src, labels, C)
        mask = rng.random(N) < 0.5
        got = dis_loss(tensor(feats), labels, mask, aset).item()
        assert got == pytest.approx(oracle_dis(feats, labels, mask, aset.anchors),
                                    rel=1e-12, abs=1e-12)


def test_dis_gradient_is_exactly_two_times_the_residual():
    rng = make_rng(2, 13)
    feats = tensor(rng.normal(size=(5, 3)), requires_grad=True)
    labels = np.array([0, 1, 1, 0, 1])
    mask = np.array([True, True, False, True, False])
    aset = _aset(rng.normal(size=(2, 3)))
    backward(dis_loss(feats, labels, mask, aset))
    expected = np.zeros((5, 3))
    for i in np.nonzero(mask)[0]:
        expected[i] = 2.0 * (feats.data[i] - aset.anchors[labels[i]])
    assert feats.grad.tobytes() == expected.tobytes()


def test_dis_rejects_masked_pixels_without_an_anchor():
    aset = _aset([[0.0, 0.0], [1.0, 1.0]], valid=[True, False])
    feats = tensor(np.ones((2, 2)))
    labels = np.array([0, 1])
    with pytest.raises(AnchorError):
        dis_loss(feats, labels, None, aset)
    # inactive pixels may point anywhere
    ok = dis_loss(feats, labels, np.array([True, False]), aset)
    assert ok.item() == 2.0


def test_dis_empty_mask_and_width_errors():
    aset = _aset([[0.0, 0.0], [1.0, 1.0]])
    loss = dis_loss(tensor(np.ones((2, 2))), np.array([0, 1]),
                    np.zeros(2, dtype=bool), aset)
    assert loss.item() == 0.0
    with pytest.raises(ValueError):
        dis_loss(tensor(np.ones((2, 3))), np.array([0, 1]), None, aset)


# -- combination -------------------------------------------------------------------

def _terms(**kw):
    vals = dict(ce_source=1.0)
    vals.update(kw)
    return LossTerms(**{k: scalar(v) if v is not None else None
                        for k, v in vals.items()})


def test_combine_frozen_value():
    terms = _terms(dis_source=2.0, dis_target=3.0,
                   ce_target_anchor=4.0, ce_target_prob=5.0)
    total = combine(terms, 0.3, 0.7)
    # 1 + 0.3 * (2 + 3) + 0.7 * (4 + 5)
    assert total.item() == pytest.approx(8.8, abs=1e-12)


def test_combine_skips_missing_groups_bit_for_bit():
    plain = _terms()
    assert combine(plain, 0.3, 0.7) is plain.ce_source
    with_zero_weight = _terms(dis_source=2.0, ce_target_anchor=4.0)
    assert combine(with_zero_weight, 0.0, 0.0) is with_zero_weight.ce_source
    # a single surviving term is used directly, with no +0 padding
    one = _terms(dis_source=2.0)
    assert combine(one, 0.5, 0.7).item() == 1.0 + 0.5 * 2.0


def test_combine_weights_scale_linearly():
    rng = make_rng(3, 14)
    for _ in range(5):
        vals = rng.uniform(0.1, 4.0, size=5)
        terms = _terms(ce_source=vals[0], dis_source=vals[1],
                       dis_target=vals[2], ce_target_anchor=vals[3],
                       ce_target_prob=vals[4])
        l1, l2 = rng.uniform(0.05, 2.0, size=2)
        expected = vals[0] + l1 * (vals[1] + vals[2]) + l2 * (vals[3] + vals[4])
        assert combine(terms, l1, l2).item() == pytest.approx(expected,
                                                              rel=1e-12)


def test_combine_gradient_flows_to_every_term():
    ce = tensor(2.0, requires_grad=True)
    dis = tensor(3.0, requires_grad=True)
    terms = LossTerms(ce_source=ce, dis_source=dis)
    backward(combine(terms, 0.3, 0.7))
    assert ce.grad == 1.0
    assert dis.grad == pytest.approx(0.3, abs=1e-15)


# -- breakdown ---------------------------------------------------------------------

def test_breakdown_records_and_checks():
    terms = _terms(dis_source=2.0, dis_target=3.0,
                   ce_target_anchor=4.0, ce_target_prob=5.0)
    total = combine(terms, 0.3, 0.7)
    bd = LossBreakdown.from_terms(terms, total, {"ce_source": 10})
    bd.check(0.3, 0.7)
    rec = bd.as_record()
    assert rec["total"] == total.item()
    assert rec["pixels_ce_source"] == 10
    assert rec["ce_source_mean"] == pytest.approx(0.1)

    bd.total += 1.0
    with pytest.raises(ValueError, match="add up"):
        bd.check(0.3, 0.7)

    neg = LossBreakdown(-1.0, 0.0, 0.0, 0.0, 0.0, -1.0)
    with pytest.raises(ValueError, match="negative"):
        neg.check(0.3, 0.7)


def test_breakdown_treats_skipped_terms_as_zero():
    terms = _terms(dis_source=2.0)
    total = combine(terms, 0.5, 0.7)
    bd = LossBreakdown.from_terms(terms, total)
    assert bd.ce_target_anchor == 0.0 and bd.dis_target == 0.0
    bd.check(0.5, 0.7)


# -- adversarial pair ------------------------------------------------------------------

def test_adversarial_losses_values_and_gradient_routing():
    rng = make_rng(5, 15)
    disc = Discriminator(F=4, hidden=6, seed=0)
    src = tensor(rng.normal(size=(6, 4)), requires_grad=True)
    tgt = tensor(rng.normal(size=(5, 4)), requires_grad=True)
    disc_loss, align_loss = adversarial_losses(disc, src, tgt)

    def np_disc(x):
        h = x @ disc.w1.data + disc.b1.data
        h = np.where(h > 0, h, 0.2 * h)
        return h @ disc.w2.data + disc.b2.data

    def np_bce(z, y):
        return float(np.sum(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))))

    expected_disc = np_bce(np_disc(src.data), 1.0) + np_bce(np_disc(tgt.data), 0.0)
    expected_align = np_bce(np_disc(tgt.data), 1.0)
    assert disc_loss.item() == pytest.approx(expected_disc, rel=1e-12)
    assert align_loss.item() == pytest.approx(expected_align, rel=1e-12)

    # discriminator loss sees detached features: only disc params learn
    backward(disc_loss)
    assert all(p.grad is not None for p in disc.parameters())
    assert src.grad is None and tgt.grad is None

    # alignment loss goes through the frozen copy: only features learn
    for p in disc.parameters():
        p.zero_grad()
    backward(align_loss)
    assert all(p.grad is None for p in disc.parameters())
    assert tgt.grad is not None and src.grad is None


# -- finite differences over the loss surface ----------------------------------------

def test_ce_loss_finite_difference():
    rng = make_rng(6, 16)
    N, C = 5, 3
    labels = rng.integers(0, C, size=N)
    mask = np.array([True, False, True, True, False])

    def build(logits):
        from anchoradapt.tensor import softmax
        return ce_loss(softmax(logits), labels, mask)

    err = fd_rel_error(build, [rng.normal(size=(N, C))])
    assert err <= 1e-4


def test_dis_loss_finite_difference():
    rng = make_rng(7, 17)
    aset = _aset(rng.normal(size=(3, 4)))
    labels = rng.integers(0, 3, size=6)
    mask = rng.random(6) < 0.7

    def build(feats):
        return dis_loss(feats, labels, mask, aset)

    err = fd_rel_error(build, [rng.normal(size=(6, 4))])
    assert err <= 1e-4
