"""Model checkpoints in the binary container plus a JSON summary sidecar.

Every trainable array is stored as float64 so that a save/load cycle
reproduces decisions exactly. The sidecar (``<path>.json``) is a
human-readable summary and is never read back.
"""

import json
import math
from pathlib import Path

import numpy as np

from . import container
from .cal import CALModel, ConformalBand
from .errors import ContainerError, ValidationError
from .functional import sigmoid
from .proto_core import PrototypeSet
from .protopnet import ProtoPNet
from .prototree import ProtoTree, leaf_accuracy

KINDS = ("protopnet", "prototree", "alp", "cal")


def model_kind(model):
    if isinstance(model, ProtoPNet):
        return "protopnet"
    if isinstance(model, CALModel):
        return "cal"
    if isinstance(model, ProtoTree):
        return "alp" if model.multimodal else "prototree"
    raise ValidationError(f"cannot checkpoint object of type {type(model).__name__}")


def _put_protos(arrays, prefix, protos):
    arrays[f"{prefix}.vectors"] = protos.vectors.astype(np.float64)
    arrays[f"{prefix}.provenance"] = protos.provenance.astype(np.int64)
    if protos.class_assignment is not None:
        arrays[f"{prefix}.class_assignment"] = np.asarray(protos.class_assignment, dtype=np.int64)


def _get_protos(arrays, prefix):
    if f"{prefix}.vectors" not in arrays:
        return None
    assignment = arrays.get(f"{prefix}.class_assignment")
    return PrototypeSet(
        arrays[f"{prefix}.vectors"].copy(),
        None if assignment is None else assignment.copy(),
        arrays[f"{prefix}.provenance"].copy(),
    )


def _clean(obj):
    """JSON-safe copy of history records (non-finite floats as strings)."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _encode_model(model):
    kind = model_kind(model)
    arrays = {}
    meta = {"kind": kind, "history": _clean(model.history)}
    if kind == "protopnet":
        meta["modality"] = model.modality
        _put_protos(arrays, "prototypes", model.prototypes)
        arrays["head"] = model.head.astype(np.float64)
    elif kind in ("prototree", "alp"):
        meta["depth"] = model.depth
        arrays["leaf_dist"] = model.leaf_dist.astype(np.float64)
        for name in ("image", "genetic"):
            protos = getattr(model, name)
            if protos is not None:
                _put_protos(arrays, name, protos)
        if model.m is not None:
            arrays["m"] = model.m.astype(np.float64)
    else:
        meta["k_rule"] = model.k_rule
        meta["band"] = None if model.band is None else model.band.to_json()
        for side in ("image", "genetic"):
            meta[f"{side}_modality"] = getattr(model, side).modality
            _put_protos(arrays, f"{side}_net.prototypes", getattr(model, side).prototypes)
            arrays[f"{side}_net.head"] = getattr(model, side).head.astype(np.float64)
        for name in ("m", "head_image", "head_genetic", "predictor"):
            arrays[name] = getattr(model, name).astype(np.float64)
    return meta, arrays


def _decode_model(meta, arrays):
    kind = meta.get("kind")
    history = meta.get("history", [])
    if kind == "protopnet":
        return ProtoPNet(meta["modality"], _get_protos(arrays, "prototypes"), arrays["head"].copy(), history)
    if kind in ("prototree", "alp"):
        m = arrays.get("m")
        return ProtoTree(meta["depth"], arrays["leaf_dist"].copy(), _get_protos(arrays, "image"),
                         _get_protos(arrays, "genetic"), None if m is None else m.copy(), history)
    if kind == "cal":
        nets = {
            side: ProtoPNet(meta[f"{side}_modality"], _get_protos(arrays, f"{side}_net.prototypes"),
                            arrays[f"{side}_net.head"].copy())
            for side in ("image", "genetic")
        }
        band = None if meta.get("band") is None else ConformalBand.from_json(meta["band"])
        return CALModel(nets["image"], nets["genetic"], arrays["m"].copy(), arrays["head_image"].copy(),
                        arrays["head_genetic"].copy(), arrays["predictor"].copy(), band,
                        meta.get("k_rule", "mixed"), history)
    raise ContainerError(f"unknown checkpoint kind {kind!r}")


def summary(model, leaf_stats=None):
    """JSON-able description used for the sidecar and ``inspect``."""
    kind = model_kind(model)
    out = {"kind": kind}
    if kind == "protopnet":
        P, D = model.prototypes.vectors.shape
        out.update(modality=model.modality, P=P, K=model.n_classes, D=D,
                   provenance=model.prototypes.provenance.tolist())
    elif kind in ("prototree", "alp"):
        is_gen = model.node_is_genetic()
        out.update(depth=model.depth, K=model.n_classes, tree_modality=model.kind,
                   census={"image": int((~is_gen).sum()), "genetic": int(is_gen.sum())})
        for name in ("image", "genetic"):
            protos = getattr(model, name)
            if protos is not None:
                out[f"{name}_provenance"] = protos.provenance.tolist()
        if leaf_stats is not None:
            out["leaf_accuracy"] = [float(a) for a in leaf_stats.accuracy]
            out["leaf_routed"] = leaf_stats.routed.tolist()
    else:
        sig = np.broadcast_to(sigmoid(model.m), (model.n_classes,))
        out.update(K=model.n_classes, k_rule=model.k_rule,
                   sigma_m={"min": float(sig.min()), "median": float(np.median(sig)),
                            "max": float(sig.max()), "values": [float(v) for v in sig]},
                   band=None if model.band is None else model.band.to_json())
    return _clean(out)


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(path, model, leaf_stats=None):
    """Write checkpoint and sidecar; returns the checkpoint's sha256."""
    meta, arrays = _encode_model(model)
    digest = container.write(path, container.CHECKPOINT_MAGIC, meta, arrays)
    with open(sidecar_path(path), "w") as fh:
        json.dump(summary(model, leaf_stats), fh, indent=2, sort_keys=True)
    return digest


def load_model(path, expect=None):
    meta, arrays = container.read(path, container.CHECKPOINT_MAGIC)
    if expect is not None and meta.get("kind") not in (expect if isinstance(expect, tuple) else (expect,)):
        raise ValidationError(f"{path}: expected a {expect} checkpoint, found {meta.get('kind')!r}")
    return _decode_model(meta, arrays)


def tree_leaf_stats(tree, s_img=None, s_gen=None, labels=None):
    """Per-leaf hard-routing stats for the sidecar (uses full routing similarities)."""
    return leaf_accuracy(tree, tree.routing_similarities(s_img, s_gen), labels)
