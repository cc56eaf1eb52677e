import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoabstain import cal as CL
from protoabstain.errors import MeasurementRequired, SplitOverlapError, ValidationError
from protoabstain.proto_core import GeneticSource, PrototypeSet
from protoabstain.protopnet import ProtoPNet

finite = st.floats(-5, 5, allow_nan=False)


def brute_quantile(abs_res, alpha):
    n = len(abs_res)
    rank = math.ceil((n + 1) * (1 - alpha) - 1e-9)
    return math.inf if rank > n else sorted(abs_res)[max(rank, 1) - 1]


def test_mix_logits_cases(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    assert np.array_equal(CL.mix_logits(a, b, np.full(3, np.inf)), a)
    assert np.allclose(CL.mix_logits(a, b, np.zeros(3)), (a + b) / 2)
    m = rng.normal(size=3)
    sig = [1 / (1 + math.exp(-x)) for x in m]
    assert np.allclose(CL.mix_logits(a, b, m), [sig[j] * a[j] + (1 - sig[j]) * b[j] for j in range(3)])


def test_quantile_rank_cases(rng):
    r = rng.normal(size=(9, 1))
    assert CL.calibrate(r, 0.1).delta[0] == np.abs(r).max()
    assert CL.calibrate(r, 0.99).delta[0] == np.abs(r).min()
    assert np.isinf(CL.calibrate(rng.normal(size=(4, 2)), 0.05).delta).all()
    assert CL.conformal_rank(9, 0.1) == 9


@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 4)), elements=finite),
       st.floats(0.0, 0.99))
def test_quantile_matches_sort_oracle(res, alpha):
    band = CL.calibrate(res, alpha)
    for j in range(res.shape[1]):
        assert band.delta[j] == brute_quantile(np.abs(res[:, j]).tolist(), alpha)
    linf = CL.calibrate(res, alpha, "l_infinity")
    assert np.all(linf.delta == brute_quantile(np.abs(res).max(axis=1).tolist(), alpha))


@given(arrays(np.float64, (20, 3), elements=finite), st.floats(0.0, 0.98), st.floats(0.0, 0.98))
def test_delta_monotone_in_alpha(res, a1, a2):
    lo, hi = sorted((a1, a2))
    assert np.all(CL.calibrate(res, hi).delta <= CL.calibrate(res, lo).delta)


def test_calibrate_rejects_bad_input():
    with pytest.raises(ValidationError):
        CL.calibrate(np.zeros((0, 2)), 0.1)
    with pytest.raises(ValidationError):
        CL.calibrate(np.zeros((3, 2)), 1.0)


def test_worst_case_cases(rng):
    y_img, y_hat, m = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=4)
    assert np.allclose(CL.worst_case_logits(y_img, y_hat, np.zeros(4), m, [2]), CL.mix_logits(y_img, y_hat, m))
    assert np.array_equal(CL.worst_case_logits(y_img, y_hat, rng.random(4), np.full(4, np.inf), [1]), y_img)
    out = CL.worst_case_logits(np.array([[2.0, 0.0]]), np.array([[1.0, 1.0]]), np.array([0.5, 0.5]),
                               np.zeros(2), [0])
    assert np.allclose(out, [[1.25, 0.75]], atol=1e-15)


def test_abstention_decision_cases():
    assert CL.abstention_decision(np.array([[3.0, 1.0, 2.0]]), [0]).tolist() == [True]
    assert CL.abstention_decision(np.array([[2.0, 2.0]]), [0]).tolist() == [False]
    y = CL.worst_case_logits(np.array([[5.0, 0.0]]), np.array([[5.0, 0.0]]), np.full(2, np.inf), np.zeros(2), [0])
    assert CL.abstention_decision(y, [0]).tolist() == [False]


def test_margin_loss_cases(rng):
    vals, _ = CL.margin_loss(np.array([[3.0, 0.0]]), [0])
    assert vals[0] == pytest.approx(-3.0)
    vals, _ = CL.margin_loss(np.full((1, 5), 0.7), [2])
    assert vals[0] == pytest.approx(math.log(4))
    y = rng.normal(size=4)
    vals, _ = CL.margin_loss(y[None], [1])
    direct = math.log(math.fsum(math.exp(-(y[1] - y[j])) for j in range(4) if j != 1))
    assert vals[0] == pytest.approx(direct, abs=1e-13)


def test_modality_loss_cases(rng):
    assert CL.modality_loss(np.zeros(516))[0] == -258.0
    assert CL.modality_loss(np.full(7, 50.0))[0] == pytest.approx(-7.0)
    m = rng.normal(size=3)
    assert CL.modality_loss(m)[0] == pytest.approx(-sum(1 / (1 + math.exp(-x)) for x in m))


def test_predictor_loss_cases(rng):
    y = rng.normal(size=(1, 5))
    assert CL.predictor_loss(y, y)[0][0] == 0.0
    assert CL.predictor_loss(y + 0.3, y)[0][0] == pytest.approx(0.09)
    a, b = rng.normal(size=5), rng.normal(size=5)
    assert CL.predictor_loss(a, b)[0][0] == pytest.approx(sum((a - b) ** 2) / 5)


def _model(rng, K=3, P=4, D=3):
    img = ProtoPNet("image", PrototypeSet(rng.normal(size=(P, D)), np.arange(P) % K), rng.normal(size=(K, P)))
    gen = ProtoPNet("genetic", PrototypeSet(rng.normal(size=(P, D)), np.arange(P) % K), rng.normal(size=(K, P)))
    return CL.CALModel.from_protopnets(img, gen)


def test_predictor_initialized_to_image_head(rng):
    model = _model(rng)
    s = rng.random((5, 4))
    assert np.array_equal(s @ model.predictor.T, s @ model.head_image.T)


def test_gated_ce_ignores_genetics_when_abstaining(rng):
    model = _model(rng)
    model.head_image *= 20
    s_img, s_gen = rng.random((6, 4)), rng.random((6, 4))
    labels = rng.integers(0, 3, 6)
    delta = np.zeros(3)
    st_ = CL.image_side(model, s_img, delta)
    assert st_["abstain"].all()
    a = CL.cal_loss(model, s_img, s_gen, labels, delta)[0]
    b = CL.cal_loss(model, s_img, s_gen + rng.random((6, 4)), labels, delta)[0]
    assert a == b


def test_gated_ce_infinite_delta_is_multimodal(rng):
    from protoabstain.functional import cross_entropy
    model = _model(rng)
    s_img, s_gen = rng.random((6, 4)), rng.random((6, 4))
    labels = rng.integers(0, 3, 6)
    _, _, parts = CL.cal_loss(model, s_img, s_gen, labels, np.full(3, np.inf))
    mixed = CL.mix_logits(s_img @ model.head_image.T, s_gen @ model.head_genetic.T, model.m)
    assert parts["ce"] == pytest.approx(cross_entropy(mixed, labels)[0], abs=1e-13)
    assert parts["abstain_fraction"] == 0.0


def test_gated_ce_mixed_batch_is_sum_of_branches(rng):
    from protoabstain.functional import cross_entropy
    model = _model(rng)
    s_img, s_gen = rng.random((40, 4)), rng.random((40, 4))
    labels = rng.integers(0, 3, 40)
    delta = np.full(3, 0.05)
    st_ = CL.image_side(model, s_img, delta)
    ab = st_["abstain"]
    assert 0 < ab.sum() < 40
    _, _, parts = CL.cal_loss(model, s_img, s_gen, labels, delta)
    mixed = CL.mix_logits(s_img @ model.head_image.T, s_gen @ model.head_genetic.T, model.m)
    ce_ab = cross_entropy(st_["q"][ab], labels[ab])[0] * ab.sum()
    ce_mm = cross_entropy(mixed[~ab], labels[~ab])[0] * (~ab).sum()
    assert parts["ce"] == pytest.approx((ce_ab + ce_mm) / 40, abs=1e-12)


@pytest.mark.parametrize("scalar_m", [False, True])
def test_cal_gradient_check(rng, scalar_m):
    model = _model(rng)
    if scalar_m:
        model.m = np.array([0.3])
    else:
        model.m = rng.normal(size=3)
    s_img, s_gen = rng.random((12, 4)), rng.random((12, 4))
    labels = rng.integers(0, 3, 12)
    rep = CL.cal_gradient_check(model, s_img, s_gen, labels, np.full(3, 0.2))
    assert rep.passed, str(rep)


def test_train_cal_zero_lr_unchanged(rng):
    model = _model(rng)
    s = {"s_img": rng.random((10, 4)), "s_gen": rng.random((10, 4)), "labels": np.arange(10) % 3,
         "ids": np.arange(10)}
    c = dict(s, ids=np.arange(10, 20))
    cfg = CL.CALConfig(lambda_modality=0, lambda_margin=0, lambda_predictor=0, lr=0.0, epochs=3)
    out = CL.train_cal(model, s, c, cfg)
    for name in CL.PARAMS:
        assert np.array_equal(getattr(out, name), getattr(model, name))


def test_train_cal_rejects_overlap(rng):
    model = _model(rng)
    s = {"s_img": rng.random((4, 4)), "s_gen": rng.random((4, 4)), "labels": np.arange(4) % 3, "ids": np.arange(4)}
    with pytest.raises(SplitOverlapError):
        CL.train_cal(model, s, s, CL.CALConfig(epochs=1))


def test_infer_alpha_zero_never_abstains(cal_model, splits):
    te = splits["test"]
    s_img = cal_model.image.similarities(te.image)
    band = CL.calibrate(cal_model.residuals(s_img, cal_model.genetic.similarities(te.genetic)), 0.0)
    src = GeneticSource(cal_model.genetic.prototypes, te.genetic)
    dec = CL.infer_cal(cal_model, s_img, src, band)
    assert not any(d.abstain for d in dec) and src.n_queried == len(te)


def test_strong_image_margin_abstains(rng):
    model = _model(rng)
    model.head_image = np.zeros((3, 4))
    model.head_image[0, 0] = 100.0
    model.predictor = model.head_image.copy()
    band = CL.ConformalBand("per_logit", 0.05, np.full(3, 1.0), 100)
    dec = CL.infer_cal(model, np.array([[1.0, 0.1, 0.1, 0.1]]), None, band)
    assert dec[0].abstain and dec[0].final_class == 0


def test_decision_invariants(cal_model, splits):
    te = splits["test"]
    s_img = cal_model.image.similarities(te.image)
    q = CL.image_side(cal_model, s_img, cal_model.band.delta)["q"]
    src = GeneticSource(cal_model.genetic.prototypes, te.genetic)
    dec = CL.infer_cal(cal_model, s_img, src, ids=te.ids, labels=te.labels)
    for i, d in enumerate(dec):
        assert d.abstain != d.genetic_queried
        assert (src.reads[i] > 0) == d.genetic_queried
        if d.abstain:
            assert d.final_class == d.k and d.margin > 0
        assert d.k == int(np.argmax(q[i]))
        assert d.true_class == te.labels[i]


def test_infer_without_source_raises(cal_model, splits):
    s_img = cal_model.image.similarities(splits["test"].image)
    band = CL.ConformalBand("per_logit", 0.0, np.full(cal_model.n_classes, np.inf), 10)
    with pytest.raises(MeasurementRequired):
        CL.infer_cal(cal_model, s_img, None, band)


def test_large_modality_weight_goes_image_only(cfg, splits, protopnets, cal_model):
    from protoabstain import pipeline as PL
    img, gen = protopnets
    model = PL.build_cal(img, gen, splits["train"], splits["validation"], cfg,
                         lambda_modality=50.0, lambda_margin=0.0, lr=0.5, epochs=30)
    sig = 1 / (1 + np.exp(-model.m))
    assert sig.min() > 0.99
    te = splits["test"]
    dec = CL.infer_cal(model, img.similarities(te.image), GeneticSource(gen.prototypes, te.genetic))
    base = CL.infer_cal(cal_model, img.similarities(te.image), GeneticSource(gen.prototypes, te.genetic),
                        model.band)
    success = np.mean([d.abstain for d in dec])
    assert success >= 0.95 and success > np.mean([d.abstain for d in base])


def test_decision_log_roundtrip(tmp_path, cal_model, splits):
    te = splits["test"]
    dec = CL.infer_cal(cal_model, cal_model.image.similarities(te.image),
                       GeneticSource(cal_model.genetic.prototypes, te.genetic), ids=te.ids, labels=te.labels)
    CL.write_decision_log(tmp_path / "d.csv", dec)
    rows = CL.read_decision_log(tmp_path / "d.csv")
    assert [int(r["sample_id"]) for r in rows] == te.ids.tolist()
    assert [r["abstain"] == "1" for r in rows] == [d.abstain for d in dec]


def test_band_json_roundtrip():
    band = CL.ConformalBand("per_logit", 0.1, np.array([0.5, np.inf]), 12, False)
    back = CL.ConformalBand.from_json(band.to_json())
    assert back.delta.tolist() == [0.5, math.inf] and back.alpha == 0.1 and back.n_cal == 12
