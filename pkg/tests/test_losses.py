import logging

import numpy as np
import pytest
from oracles import (bt_loop, cl_loop, corr_loop, cross_corr_loop, heuristic_loop, kd_loop,
                     random_reps, self_corr_loop)

from corrdistill import autodiff as ad
from corrdistill.exceptions import BatchSizeError, ContractError, DimensionError
from corrdistill.losses import (LossWeights, RepresentationBatch, bt_loss, cl_components, cl_loss, cross_corr,
                                heuristic_lambda, kd_loss, kd_loss_report, self_corr)


@pytest.mark.parametrize("seed", range(10))
def test_cross_and_self_corr_match_loops(seed):
    rng = np.random.default_rng(seed)
    s, t = random_reps(rng)
    np.testing.assert_allclose(cross_corr(RepresentationBatch(s, t)).data, cross_corr_loop(s, t), atol=1e-9)
    np.testing.assert_allclose(self_corr(s).data, self_corr_loop(s), atol=1e-9)


def test_batched_outer_matches_triple_loop(rng):
    a, b = random_reps(rng, B=5, T=2, D=4)
    np.testing.assert_allclose(ad.batched_outer(a, b).data, corr_loop(a, b), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_losses_match_loops(seed):
    rng = np.random.default_rng(100 + seed)
    s, t = random_reps(rng)
    batch = RepresentationBatch(s, t)
    assert kd_loss(batch, 0.7).item() == pytest.approx(kd_loop(s, t, 0.7), abs=1e-9)
    w = LossWeights(gamma=0.5, lambda_cc=0.3, lambda_sc=0.2)
    assert cl_loss(batch, w)[0].item() == pytest.approx(cl_loop(s, t, 0.5, 0.3, 0.2), abs=1e-9)
    y1, y2 = s[:, 0, 0], t[:, 0, 0]
    assert bt_loss(y1, y2, 0.01).item() == pytest.approx(bt_loop(y1, y2, 0.01), abs=1e-9)


def test_self_corr_is_symmetric_and_unit_diagonal(rng):
    s, _ = random_reps(rng, B=6, D=5)
    c = self_corr(s).data
    assert np.array_equal(c, np.swapaxes(c, -1, -2))
    np.testing.assert_allclose(np.diagonal(c, axis1=-2, axis2=-1), 1.0, atol=1e-7)


def test_perfect_student_has_zero_correlation_diag_loss(rng):
    s, _ = random_reps(rng, B=8, D=4)
    _, report = cl_loss(RepresentationBatch(s, s.copy()))
    assert report["l_cc_diag"] == pytest.approx(0.0, abs=1e-12)


def test_cross_corr_is_invariant_to_affine_feature_rescaling(rng):
    s, t = random_reps(rng, B=8, D=4)
    a = cross_corr(RepresentationBatch(s, t)).data
    b = cross_corr(RepresentationBatch(3.0 * s + 2.0, t)).data
    np.testing.assert_allclose(a, b, atol=1e-7)


def test_constant_feature_maps_to_zero_correlation():
    s = np.random.default_rng(0).normal(size=(4, 1, 1, 3))
    s[:, :, :, 1] = 2.5
    c = self_corr(s).data
    assert np.all(c[..., 1, :] == 0) and np.isfinite(c).all()


def test_report_components_add_up(rng):
    s, t = random_reps(rng, B=5, D=6)
    loss, r = cl_loss(RepresentationBatch(s, t), LossWeights(gamma=2.0))
    assert r["l_total"] == pytest.approx(r["l_cc_diag"] + r["l_cc_offdiag"] + r["l_sc"] - 2.0 * r["l_cos"])
    assert loss.item() == r["l_total"]
    _, kr = kd_loss_report(RepresentationBatch(s, t))
    assert kr["l_total"] == pytest.approx(kr["l1"] - kr["l_cos"])


def test_gamma_zero_removes_cosine(rng):
    s, t = random_reps(rng)
    w = LossWeights(gamma=0.0, lambda_cc=0.0, lambda_sc=0.0)
    _, r = cl_loss(RepresentationBatch(s, t), w)
    assert r["l_total"] == pytest.approx(r["l_cc_diag"])


def test_batch_of_one_rejected():
    s = np.ones((1, 3, 2, 4))
    with pytest.raises(BatchSizeError):
        cl_loss(RepresentationBatch(s, s))
    with pytest.raises(BatchSizeError):
        self_corr(s)
    with pytest.raises(BatchSizeError):
        bt_loss(s[:, 0, 0], s[:, 0, 0])


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        RepresentationBatch(np.zeros((2, 3, 1, 4)), np.zeros((2, 3, 1, 5)))
    with pytest.raises(DimensionError):
        RepresentationBatch(np.zeros((2, 4)), np.zeros((2, 4)))


def test_teacher_receives_no_gradient(rng):
    s, t = random_reps(rng)
    student = ad.Tensor(s, requires_grad=True)
    teacher = ad.Tensor(t, requires_grad=True)
    with ad.GradientTape() as tape:
        loss, _ = cl_loss(RepresentationBatch(student, teacher))
    g = tape.gradient(loss, [student, teacher])
    assert np.any(g[0]) and not np.any(g[1])


def test_bt_identical_views_only_pay_off_diagonal(rng):
    y = rng.normal(size=(16, 4))
    loss = bt_loss(y, y, lam=0.0).item()
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_bt_averages_over_middle_axes(rng):
    y1, y2 = rng.normal(size=(6, 3, 5)), rng.normal(size=(6, 3, 5))
    expect = np.mean([bt_loop(y1[:, k], y2[:, k]) for k in range(3)])
    assert bt_loss(y1, y2).item() == pytest.approx(expect, abs=1e-9)


def test_heuristic_endpoints_exact():
    assert heuristic_lambda(10) == 5e-5
    assert heuristic_lambda(20) == 5e-7


@pytest.mark.parametrize("snr", [10.0, 11.3, 14.9, 17.0, 19.99, 20.0])
def test_heuristic_matches_reciprocal_interpolation(snr):
    assert heuristic_lambda(snr) == pytest.approx(heuristic_loop(snr), rel=1e-12)


def test_heuristic_clamps_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        assert heuristic_lambda(5.0) == 5e-5
        assert heuristic_lambda(30.0) == 5e-7
    assert "clamping" in caplog.text


def test_heuristic_weights_follow_snrs(rng):
    s, t = random_reps(rng)
    _, r = cl_loss(RepresentationBatch(s, t), LossWeights(heuristic=True), 12.0, 18.0)
    assert r["lambda_cc_eff"] == heuristic_lambda(12.0)
    assert r["lambda_sc_eff"] == heuristic_lambda(18.0)
    with pytest.raises(ContractError):
        cl_loss(RepresentationBatch(s, t), LossWeights(heuristic=True))


def test_negative_weight_rejected():
    with pytest.raises(ContractError):
        LossWeights(lambda_cc=-1.0)


def test_center_normalization_differs_from_standardize(rng):
    s, t = random_reps(rng, B=6)
    a = cl_loss(RepresentationBatch(3 * s, t))[0].item()
    b = cl_loss(RepresentationBatch(3 * s, t), normalization="center")[0].item()
    assert a != pytest.approx(b)
    with pytest.raises(ContractError):
        cl_loss(RepresentationBatch(s, t), normalization="zca")


@pytest.mark.parametrize("seed", range(5))
def test_cl_components_are_the_unweighted_terms(seed):
    rng = np.random.default_rng(seed)
    s, t = random_reps(rng)
    diag, cc, sc, cos = (c.item() for c in cl_components(RepresentationBatch(s, t)))
    base = cl_loop(s, t, 0.0, 0.0, 0.0)
    assert diag == pytest.approx(base, abs=1e-9)
    assert cc == pytest.approx(cl_loop(s, t, 0.0, 1.0, 0.0) - base, abs=1e-9)
    assert sc == pytest.approx(cl_loop(s, t, 0.0, 0.0, 1.0) - base, abs=1e-9)
    assert cos == pytest.approx(base - cl_loop(s, t, 1.0, 0.0, 0.0), abs=1e-9)
