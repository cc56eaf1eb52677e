"""Unimodal ProtoPNet over frozen embeddings.

The backbone is external, so training alternates between gradient phases on
prototypes and head, projection of the prototypes onto own-class training
patches, and head-only phases. The loss is

    CE + cluster_coef * clst + separation_coef * sep + l1_coef * L1

where L1 covers only the head connections from a prototype to classes it
does not belong to.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from .errors import NonFiniteLossError, ValidationError
from .functional import cross_entropy
from .gradcheck import gradient_check
from .optim import SGD
from .proto_core import (
    PrototypeSet,
    cluster_separation_loss,
    head_forward,
    init_head,
    project_prototypes,
    similarity_forward,
)

log = logging.getLogger(__name__)

# Initial weight from a prototype to classes other than its own.
INCORRECT_CLASS_CONNECTION = {"image": -0.5, "genetic": 0.0}


@dataclass
class PhaseSchedule:
    pre_project_epochs: int = 10
    n_post_project_phases: int = 1
    epochs_per_phase: int = 5
    last_layer_epochs: int = 10
    phase_multiplier: int = 1
    prototype_lr: float = 0.05
    head_lr: float = 0.1
    momentum: float = 0.9
    lr_step_size: int = 5
    lr_gamma: float = 0.5
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("pre_project_epochs", "n_post_project_phases", "epochs_per_phase",
                     "last_layer_epochs", "phase_multiplier", "batch_size"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class LossCoefs:
    cluster: float = 0.8
    separation: float = 0.08
    l1: float = 1e-4


@dataclass
class ProtoPNet:
    modality: str
    prototypes: PrototypeSet
    head: np.ndarray
    history: list = field(default_factory=list)

    @property
    def n_classes(self):
        return self.head.shape[0]

    def similarities(self, emb):
        return similarity_forward(emb, self.prototypes.vectors).s

    def logits(self, emb):
        return head_forward(self.similarities(emb), self.head)

    def predict(self, emb):
        return np.argmax(self.logits(emb), axis=1)

    def copy(self):
        return ProtoPNet(self.modality, self.prototypes.copy(), self.head.copy(), list(self.history))


def incorrect_mask(class_assignment, n_classes):
    return np.arange(n_classes)[:, None] != np.asarray(class_assignment)[None, :]


def protopnet_loss(model, emb, labels, coefs):
    """Total loss and gradients ``{"prototypes": ..., "head": ...}``."""
    cache = similarity_forward(emb, model.prototypes.vectors)
    s = cache.s
    logits = head_forward(s, model.head)
    ce, d_logits = cross_entropy(logits, labels)
    clst, sep, d_clst, d_sep = cluster_separation_loss(s, labels, model.prototypes.class_assignment)
    mask = incorrect_mask(model.prototypes.class_assignment, model.n_classes)
    l1 = float(np.abs(model.head[mask]).sum())

    value = ce + coefs.cluster * clst + coefs.separation * sep + coefs.l1 * l1
    d_s = d_logits @ model.head + coefs.cluster * d_clst + coefs.separation * d_sep
    grads = {
        "head": d_logits.T @ s + coefs.l1 * np.sign(model.head) * mask,
        "prototypes": cache.backward_pooled(d_s),
    }
    parts = {"ce": ce, "cluster": clst, "separation": sep, "l1": l1}
    return value, grads, parts


def protopnet_gradient_check(model, emb, labels, coefs, eps=1e-5, tol=1e-4):
    model = model.copy()
    _, grads, _ = protopnet_loss(model, emb, labels, coefs)
    params = {"prototypes": model.prototypes.vectors, "head": model.head}
    return gradient_check(lambda: protopnet_loss(model, emb, labels, coefs)[0], params, grads, eps, tol)


def init_protopnet(ds, modality, protos_per_class, seed=0, incorrect_class_connection=None, init_noise=0.1):
    """Prototypes start at random own-class training patches plus Gaussian noise."""
    emb = _embeddings(ds, modality)
    K = ds.n_classes
    counts = np.bincount(ds.labels, minlength=K)
    if np.any(counts < 1):
        raise ValidationError(f"classes without training samples: {np.flatnonzero(counts < 1).tolist()}")
    rng = np.random.default_rng(seed)
    d, h, w = emb.shape[1:]
    assignment = np.repeat(np.arange(K), protos_per_class)
    vectors = np.empty((assignment.size, d))
    for j, c in enumerate(assignment):
        i = rng.choice(np.flatnonzero(ds.labels == c))
        patch = emb[i, :, rng.integers(h), rng.integers(w)].astype(np.float64)
        scale = np.linalg.norm(patch) / np.sqrt(d) if np.any(patch) else 1.0
        vectors[j] = patch + init_noise * scale * rng.normal(size=d)
    if incorrect_class_connection is None:
        incorrect_class_connection = INCORRECT_CLASS_CONNECTION.get(modality, 0.0)
    head = init_head(assignment, K, incorrect_class_connection)
    return ProtoPNet(modality, PrototypeSet(vectors, assignment), head)


def _embeddings(ds, modality):
    emb = ds.image if modality == "image" else ds.genetic
    if emb is None:
        raise ValidationError(f"dataset has no {modality} embeddings")
    return emb


def _run_epoch(model, emb, labels, coefs, opt, schedule, epoch_seed, trainable):
    order = data_mod.oversample_indices(labels, seed=epoch_seed)
    bs = schedule.batch_size or len(order)
    total = 0.0
    for start in range(0, len(order), bs):
        idx = np.sort(order[start:start + bs])
        value, grads, parts = protopnet_loss(model, emb[idx], labels[idx], coefs)
        if not np.isfinite(value):
            raise NonFiniteLossError("non-finite ProtoPNet loss", {"parts": parts, "batch_start": start})
        params = {"prototypes": model.prototypes.vectors, "head": model.head}
        opt.step({k: params[k] for k in trainable}, grads)
        total += value * len(idx)
    opt.end_epoch()
    return total / len(order)


def train_protopnet(ds, modality, protos_per_class=2, schedule=None, coefs=None, model=None):
    """Train on ``ds`` (the training split) and return a projected model.

    Phase order: joint (prototypes + head), projection, head-only; then
    ``n_post_project_phases`` repetitions of that triple. The returned
    model's ``history`` holds one record per epoch and per projection.
    """
    schedule = schedule or PhaseSchedule()
    coefs = coefs or LossCoefs()
    emb = _embeddings(ds, modality)
    labels = np.asarray(ds.labels, dtype=np.int64)
    if model is None:
        model = init_protopnet(ds, modality, protos_per_class, seed=schedule.seed)
    lr = {"prototypes": schedule.prototype_lr, "head": schedule.head_lr}
    joint_opt = SGD(lr, schedule.momentum, schedule.lr_step_size, schedule.lr_gamma)
    epoch = 0

    def gradient_phase(n_epochs, trainable, opt, phase):
        nonlocal epoch
        for _ in range(n_epochs):
            loss = _run_epoch(model, emb, labels, coefs, opt, schedule, schedule.seed * 100003 + epoch, trainable)
            acc = float(np.mean(model.predict(emb) == labels))
            model.history.append({"epoch": epoch, "phase": phase, "loss": loss, "train_accuracy": acc})
            log.debug("epoch=%d phase=%s loss=%.6f train_acc=%.4f", epoch, phase, loss, acc)
            epoch += 1

    def projection():
        before = model.predict(emb)
        model.prototypes = project_prototypes(model.prototypes, emb, ds.ids, labels, restrict_to_class=True)
        changed = float(np.mean(model.predict(emb) != before))
        model.history.append({"epoch": epoch, "phase": "project", "loss": float("nan"),
                              "train_accuracy": float(np.mean(model.predict(emb) == labels)),
                              "argmax_changed": changed})

    mult = max(schedule.phase_multiplier, 1)
    total_epochs = (schedule.pre_project_epochs + schedule.last_layer_epochs
                    + schedule.n_post_project_phases * (schedule.epochs_per_phase * mult + schedule.last_layer_epochs))
    if total_epochs == 0:
        return model

    gradient_phase(schedule.pre_project_epochs, ("prototypes", "head"), joint_opt, "joint")
    projection()
    gradient_phase(schedule.last_layer_epochs, ("head",), SGD(schedule.head_lr, schedule.momentum), "last_layer")
    for _ in range(schedule.n_post_project_phases):
        gradient_phase(schedule.epochs_per_phase * mult, ("prototypes", "head"), joint_opt, "joint")
        projection()
        gradient_phase(schedule.last_layer_epochs, ("head",), SGD(schedule.head_lr, schedule.momentum), "last_layer")
    return model
