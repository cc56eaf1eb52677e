import json

import numpy as np
import pytest

from protoabstain import pipeline as PL
from protoabstain.checkpoint import load_model, save_model, sidecar_path, summary, tree_leaf_stats
from protoabstain.errors import BadMagicError, ValidationError


def _same(a, b):
    return a.tobytes() == b.tobytes() and a.shape == b.shape


def test_protopnet_roundtrip(tmp_path, protopnets):
    net = protopnets[0]
    digest = save_model(tmp_path / "p.ckpt", net)
    back = load_model(tmp_path / "p.ckpt", "protopnet")
    assert back.modality == "image"
    assert _same(back.prototypes.vectors, net.prototypes.vectors) and _same(back.head, net.head)
    assert np.array_equal(back.prototypes.provenance, net.prototypes.provenance)
    assert len(digest) == 64
    assert json.loads(sidecar_path(tmp_path / "p.ckpt").read_text())["kind"] == "protopnet"


def test_cal_roundtrip(tmp_path, cal_model, splits):
    save_model(tmp_path / "c.ckpt", cal_model)
    back = load_model(tmp_path / "c.ckpt", "cal")
    for name in ("m", "head_image", "head_genetic", "predictor"):
        assert _same(getattr(back, name), getattr(cal_model, name))
    assert back.band.to_json() == cal_model.band.to_json()
    s = cal_model.image.similarities(splits["test"].image)
    assert np.array_equal(back.image.similarities(splits["test"].image), s)


def test_tree_roundtrip_and_summary(tmp_path, cfg, splits):
    tree = PL.train_tree_pair(splits["train"], cfg)[0]
    s_img, s_gen = PL.tree_similarities(tree, splits["train"])
    stats = tree_leaf_stats(tree, s_img, s_gen, splits["train"].labels)
    save_model(tmp_path / "t.ckpt", tree, stats)
    back = load_model(tmp_path / "t.ckpt", ("prototree", "alp"))
    assert _same(back.leaf_dist, tree.leaf_dist) and _same(back.image.vectors, tree.image.vectors)
    info = summary(back)
    assert info["census"] == {"image": tree.n_nodes, "genetic": 0}
    side = json.loads(sidecar_path(tmp_path / "t.ckpt").read_text())
    assert len(side["leaf_accuracy"]) == tree.n_leaves


def test_wrong_kind_and_magic(tmp_path, protopnets):
    save_model(tmp_path / "p.ckpt", protopnets[0])
    with pytest.raises(ValidationError):
        load_model(tmp_path / "p.ckpt", "cal")
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + b"\0" * 32)
    with pytest.raises(BadMagicError):
        load_model(tmp_path / "x.ckpt")


def test_save_is_byte_deterministic(tmp_path, cal_model):
    save_model(tmp_path / "a.ckpt", cal_model)
    save_model(tmp_path / "b.ckpt", cal_model)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
