import numpy as np
import pytest

from protoabstain import data as D
from protoabstain.eval import balanced_accuracy
from protoabstain.protopnet import (
    LossCoefs,
    PhaseSchedule,
    init_protopnet,
    protopnet_gradient_check,
    protopnet_loss,
    train_protopnet,
)
from protoabstain.proto_core import similarities


def test_gradient_check_passes_and_detects_corruption(rng):
    ds = D.synth_generate(D.SynthConfig(K=3, n_per_class=4, confusable_pairs=()))
    model = init_protopnet(ds, "image", 2, seed=0)
    rep = protopnet_gradient_check(model, ds.image, ds.labels, LossCoefs())
    assert rep.passed, str(rep)

    from protoabstain.gradcheck import gradient_check
    _, grads, _ = protopnet_loss(model, ds.image, ds.labels, LossCoefs())
    bad = {k: v * 1.01 for k, v in grads.items()}
    params = {"prototypes": model.prototypes.vectors, "head": model.head}
    rep = gradient_check(lambda: protopnet_loss(model, ds.image, ds.labels, LossCoefs())[0], params, bad)
    assert not rep.passed


def test_head_is_linear_in_similarities(rng):
    ds = D.synth_generate(D.SynthConfig(K=3, n_per_class=4, confusable_pairs=()))
    model = init_protopnet(ds, "genetic", 2, seed=0)
    s = model.similarities(ds.genetic)
    assert np.array_equal(model.logits(ds.genetic), s @ model.head.T)


def test_zero_epochs_is_initialization():
    ds = D.synth_generate(D.SynthConfig(K=3, n_per_class=6, confusable_pairs=()))
    sched = PhaseSchedule(pre_project_epochs=0, epochs_per_phase=0, last_layer_epochs=0, n_post_project_phases=0)
    init = init_protopnet(ds, "image", 2, seed=sched.seed)
    out = train_protopnet(ds, "image", 2, sched)
    assert np.array_equal(out.prototypes.vectors, init.prototypes.vectors)
    assert np.array_equal(out.head, init.head)


def test_separable_data_trains_and_projects():
    ds = D.synth_generate(D.SynthConfig(K=8, n_per_class=40, confusable_pairs=(), image_separability=4.0))
    spec = D.make_splits(ds.labels, seed=0)
    tr, te = ds.subset(spec.train, spec.class_map), ds.subset(spec.test, spec.class_map)
    net = train_protopnet(tr, "image", 2, PhaseSchedule(pre_project_epochs=10, epochs_per_phase=5,
                                                       last_layer_epochs=5))
    assert balanced_accuracy(net.predict(te.image), te.labels, 8) > 0.95
    prov = net.prototypes.provenance
    assert np.all(prov >= 0)
    id_to_row = {int(i): r for r, i in enumerate(tr.ids)}
    for j, (sid, h, w) in enumerate(prov):
        row = id_to_row[int(sid)]
        assert np.array_equal(net.prototypes.vectors[j], tr.image[row, :, h, w])
        s = similarities(tr.image[row][None], net.prototypes.vectors[j:j + 1])[0, 0]
        assert s == pytest.approx(1.0, abs=1e-12)
