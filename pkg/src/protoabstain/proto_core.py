"""Prototype layer shared by ProtoPNet and ProtoTree.

Similarity between a prototype ``p`` and a latent patch ``z`` is the cosine
rescaled to ``[0, 1]``::

    sim(p, z) = (1 + cos(p, z)) / 2

with zero vectors mapping to 0.5. Losses return ``(value, grad)`` where
``grad`` is taken with respect to the loss's direct input; the prototype
gradient is then obtained through :meth:`SimilarityCache.backward_pooled` or
:meth:`SimilarityCache.backward_map`.

All arithmetic is float64. Ties (argmax over space, projection candidates,
analysis rankings) resolve to the lowest index in row-major order.
"""

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError


@dataclass
class PrototypeSet:
    """``P`` prototype vectors of depth ``D``.

    ``class_assignment`` is set for ProtoPNet prototypes, ``None`` for tree
    prototypes. ``provenance`` rows are ``(sample_id, h, w)`` once a
    prototype has been projected, ``-1`` before.
    """

    vectors: np.ndarray
    class_assignment: np.ndarray = None
    provenance: np.ndarray = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValidationError(f"prototype matrix must be (P>=1, D), got {self.vectors.shape}")
        if self.provenance is None:
            self.provenance = np.full((len(self), 3), -1, dtype=np.int64)

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def depth(self):
        return self.vectors.shape[1]

    def copy(self):
        return PrototypeSet(
            self.vectors.copy(),
            None if self.class_assignment is None else self.class_assignment.copy(),
            self.provenance.copy(),
        )


def as_patches(emb):
    """``(N, D, H, W)`` -> ``(N, H*W, D)`` float64; a single map gains N=1."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim == 3:
        emb = emb[None]
    n, d, h, w = emb.shape
    return emb.reshape(n, d, h * w).transpose(0, 2, 1), (h, w)


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, x / safe, 0.0), norms[..., 0]


@dataclass
class SimilarityCache:
    """Forward state of the prototype layer for a batch.

    ``cos`` has shape ``(N, HW, P)``; ``s`` and ``argmax`` are ``(N, P)``.
    """

    zhat: np.ndarray
    phat: np.ndarray
    pnorm: np.ndarray
    cos: np.ndarray
    grid: tuple
    s: np.ndarray
    argmax: np.ndarray

    @property
    def sim(self):
        return 0.5 * (1.0 + self.cos)

    def map(self):
        """Similarity maps as ``(N, P, H, W)``."""
        n, _, p = self.cos.shape
        return self.sim.transpose(0, 2, 1).reshape(n, p, *self.grid)

    def backward_map(self, grad_map):
        """Prototype gradient from ``dL/dsim`` of shape ``(N, HW, P)``."""
        gc = 0.5 * grad_map
        gp = np.einsum("nkp,nkd->pd", gc, self.zhat)
        gp -= np.einsum("nkp,nkp->p", gc, self.cos)[:, None] * self.phat
        return _scale_by_inverse_norm(gp, self.pnorm)

    def backward_pooled(self, grad_s):
        """Prototype gradient from ``dL/ds`` of shape ``(N, P)``."""
        n, p = grad_s.shape
        rows = np.arange(n)[:, None]
        cols = np.arange(p)[None, :]
        zsel = self.zhat[rows, self.argmax]                  # (N, P, D)
        csel = self.cos[rows, self.argmax, cols]             # (N, P)
        gc = 0.5 * grad_s
        gp = np.einsum("np,npd->pd", gc, zsel) - (gc * csel).sum(axis=0)[:, None] * self.phat
        return _scale_by_inverse_norm(gp, self.pnorm)


def _scale_by_inverse_norm(g, norms):
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms[:, None] > 0, g / safe[:, None], 0.0)


def similarity_forward(emb, vectors):
    """Run the prototype layer on a batch of embedding maps."""
    vectors = np.asarray(vectors, dtype=np.float64)
    z, grid = as_patches(emb)
    if z.shape[-1] != vectors.shape[1]:
        raise ValidationError(
            f"prototype depth {vectors.shape[1]} does not match embedding depth {z.shape[-1]}"
        )
    zhat, _ = _unit_rows(z)
    phat, pnorm = _unit_rows(vectors)
    cos = np.clip(zhat @ phat.T, -1.0, 1.0)
    sim = 0.5 * (1.0 + cos)
    argmax = np.argmax(sim, axis=1)
    s = np.take_along_axis(sim, argmax[:, None, :], axis=1)[:, 0, :]
    return SimilarityCache(zhat, phat, pnorm, cos, grid, s, argmax)


def similarity_map(emb, protos):
    """``(P, H, W)`` similarity map for one embedding, ``(N, P, H, W)`` for a batch."""
    vectors = protos.vectors if isinstance(protos, PrototypeSet) else protos
    out = similarity_forward(emb, vectors).map()
    return out[0] if np.ndim(emb) == 3 else out


def max_pool(sim_map):
    """Spatial max of a ``(P, H, W)`` map.

    Returns ``(s, positions)`` with ``positions[p] = (h, w)`` of the first
    maximum in row-major order.
    """
    sim_map = np.asarray(sim_map, dtype=np.float64)
    p, h, w = sim_map.shape
    flat = sim_map.reshape(p, h * w)
    idx = np.argmax(flat, axis=1)
    s = flat[np.arange(p), idx]
    return s, np.stack([idx // w, idx % w], axis=1)


def similarities(emb, protos):
    """Max-pooled similarity vectors ``(N, P)`` for a batch of embeddings."""
    vectors = protos.vectors if isinstance(protos, PrototypeSet) else protos
    return similarity_forward(emb, vectors).s


def head_forward(s, weights, bias=None):
    """Linear head ``y = W s (+ b)``; ``s`` may be ``(P,)`` or ``(N, P)``."""
    y = np.asarray(s, dtype=np.float64) @ np.asarray(weights, dtype=np.float64).T
    return y if bias is None else y + bias


def init_head(class_assignment, n_classes, incorrect_class_connection):
    """Head weights: 1 to the prototype's own class, a fixed value elsewhere."""
    w = np.full((n_classes, len(class_assignment)), float(incorrect_class_connection))
    w[class_assignment, np.arange(len(class_assignment))] = 1.0
    return w


# --------------------------------------------------------------------------
# losses: each returns (value, gradient wrt its direct input)
# --------------------------------------------------------------------------

def cluster_separation_loss(s, labels, class_assignment=None):
    """Batch-mean cluster and separation terms on max-pooled similarities.

    Returns ``(clst, sep, d_clst/ds, d_sep/ds)``. Without class assignment
    only the cluster term is defined (max over all prototypes) and ``sep``
    is 0.
    """
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    n, p = s.shape
    rows = np.arange(n)
    g_clst = np.zeros_like(s)
    g_sep = np.zeros_like(s)
    if class_assignment is None:
        j = np.argmax(s, axis=1)
        g_clst[rows, j] = -1.0 / n
        return -s[rows, j].mean(), 0.0, g_clst, g_sep

    own = np.asarray(class_assignment)[None, :] == labels[:, None]
    if not own.any(axis=1).all():
        missing = sorted(set(labels[~own.any(axis=1)].tolist()))
        raise ValidationError(f"no prototype assigned to class(es) {missing}")
    own_s = np.where(own, s, -np.inf)
    j = np.argmax(own_s, axis=1)
    g_clst[rows, j] = -1.0 / n
    clst = -own_s[rows, j].mean()

    other = ~own
    if other.any():
        other_s = np.where(other, s, -np.inf)
        j = np.argmax(other_s, axis=1)
        has = other.any(axis=1)
        g_sep[rows[has], j[has]] = 1.0 / n
        sep = np.where(has, other_s[rows, j], 0.0).mean()
    else:
        sep = 0.0
    return clst, sep, g_clst, g_sep


def orthogonality_loss(vectors):
    """``||P_hat P_hat^T - I||_F^2`` over row-normalized prototypes."""
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0):
        raise ValidationError("orthogonality loss undefined for a zero-norm prototype")
    phat = vectors / norms[:, None]
    g = phat @ phat.T - np.eye(len(vectors))
    value = float(np.sum(g * g))
    d_phat = 4.0 * g @ phat
    radial = np.sum(d_phat * phat, axis=1, keepdims=True)
    return value, (d_phat - radial * phat) / norms[:, None]


def variability_loss(sim, n_prototypes_axis=-1):
    """Negative mean (over locations, then batch) of the across-prototype variance.

    ``sim`` is ``(N, HW, P)`` (prototype axis last) or a single ``(P, H, W)``
    map when ``n_prototypes_axis=0``. Variance uses the ``1/(P-1)``
    estimator. The gradient has the shape of ``sim``.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if n_prototypes_axis == 0:
        p = sim.shape[0]
        flat = sim.reshape(p, -1).T[None]          # (1, HW, P)
        value, grad = variability_loss(flat)
        return value, grad[0].T.reshape(sim.shape)
    p = sim.shape[-1]
    if p < 2:
        raise ValidationError("variability loss needs at least two prototypes")
    n_loc = int(np.prod(sim.shape[:-1]))
    dev = sim - sim.mean(axis=-1, keepdims=True)
    var = np.sum(dev * dev, axis=-1) / (p - 1)
    return -float(var.sum()) / n_loc, -2.0 * dev / ((p - 1) * n_loc)


# --------------------------------------------------------------------------
# projection and analysis
# --------------------------------------------------------------------------

def project_prototypes(protos, emb, sample_ids, labels=None, restrict_to_class=False):
    """Replace every prototype with its most similar training patch.

    Candidates are all patches of all samples, or only own-class samples
    when ``restrict_to_class`` is set (requires ``class_assignment``).
    Returns a new :class:`PrototypeSet` with provenance filled in.
    """
    z, (h, w) = as_patches(emb)
    if z.shape[0] == 0:
        raise ValidationError("projection needs at least one training sample")
    if restrict_to_class and protos.class_assignment is None:
        raise ValidationError("class-restricted projection needs class assignments")
    zhat, _ = _unit_rows(z)
    phat, _ = _unit_rows(protos.vectors)
    sample_ids = np.asarray(sample_ids)
    new_vectors = protos.vectors.copy()
    prov = protos.provenance.copy()
    n_patch = z.shape[1]
    for j in range(len(protos)):
        if restrict_to_class:
            allowed = np.flatnonzero(np.asarray(labels) == protos.class_assignment[j])
            if allowed.size == 0:
                raise ValidationError(f"no candidate patches for prototype {j}")
        else:
            allowed = np.arange(z.shape[0])
        cos = zhat[allowed] @ phat[j]                     # (n_allowed, HW)
        flat = int(np.argmax(cos.reshape(-1)))
        i, k = allowed[flat // n_patch], flat % n_patch
        new_vectors[j] = z[i, k]
        prov[j] = (sample_ids[i], k // w, k % w)
    return replace(protos, vectors=new_vectors, provenance=prov)


def local_analysis(prototype_sets, embeddings, top_n=None):
    """Rank the prototypes most similar to one sample.

    ``prototype_sets`` and ``embeddings`` are dicts keyed by modality name
    (e.g. ``{"image": ..., "genetic": ...}``); modalities missing from
    ``embeddings`` are skipped. Returns dicts with ``modality``,
    ``prototype``, ``similarity`` and ``position``, best first. Ties keep
    the modality order given, then prototype index.
    """
    rows = []
    for modality, protos in prototype_sets.items():
        emb = embeddings.get(modality)
        if emb is None or protos is None:
            continue
        s, pos = max_pool(similarity_map(emb, protos))
        for j in range(len(s)):
            rows.append({"modality": modality, "prototype": j, "similarity": float(s[j]),
                         "position": (int(pos[j, 0]), int(pos[j, 1]))})
    order = sorted(range(len(rows)), key=lambda i: (-rows[i]["similarity"], i))
    ranked = [rows[i] for i in order]
    return ranked if top_n is None else ranked[:top_n]


def global_analysis(vector, emb, sample_ids, top_n=5):
    """Samples whose best patch is most similar to one prototype vector."""
    cache = similarity_forward(emb, np.asarray(vector, dtype=np.float64)[None, :])
    s = cache.s[:, 0]
    pos = cache.argmax[:, 0]
    w = cache.grid[1]
    order = np.lexsort((np.arange(len(s)), -s))[:top_n]
    return [
        {"sample_id": int(sample_ids[i]), "index": int(i), "similarity": float(s[i]),
         "position": (int(pos[i] // w), int(pos[i] % w))}
        for i in order
    ]


class GeneticSource:
    """Metered access to genetic similarities.

    Wraps the genetic embeddings of a split together with the prototype
    vectors they are scored against. Ordinary reads are the measurement
    cost; reads with ``audit=True`` are tallied separately and exist only
    for evaluation.
    """

    def __init__(self, vectors, embeddings):
        self.vectors = vectors.vectors if isinstance(vectors, PrototypeSet) else np.asarray(vectors)
        self.embeddings = embeddings
        self.reads = np.zeros(len(embeddings), dtype=np.int64)
        self.audit_reads = np.zeros(len(embeddings), dtype=np.int64)

    @property
    def n_queried(self):
        return int(np.count_nonzero(self.reads))

    def similarities(self, idx, audit=False):
        idx = np.asarray(idx, dtype=np.int64)
        np.add.at(self.audit_reads if audit else self.reads, idx, 1)
        if idx.size == 0:
            return np.zeros((0, len(self.vectors)))
        return similarity_forward(self.embeddings[idx], self.vectors).s
