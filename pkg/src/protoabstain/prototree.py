"""ProtoTree heads and the abstention-learning multimodal tree (ALP).

Nodes live in heap order: internal nodes ``0 .. P-1`` with children
``2n+1`` (left) and ``2n+2`` (right); leaf ``l`` is node ``P + l``. Internal
node ``n`` owns prototype ``n`` of each modality it carries.

Routing goes right with probability ``s_n``. Leaves hold class
distributions; their logits are ``log(dist)``. Training minimizes the
negative log-likelihood of the soft-traversal mixture of leaf distributions
and updates leaves with a derivative-free multiplicative rule.

In the multimodal tree a node's routing similarity is
``sig(m_n) * s_gen_n + (1 - sig(m_n)) * s_img_n``: positive modality weights
lean genetic, negative ones lean image.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import oversample_indices
from .errors import MeasurementRequired, NonFiniteLossError, ValidationError
from .functional import sigmoid
from .gradcheck import gradient_check
from .optim import SGD
from .proto_core import (
    PrototypeSet,
    cluster_separation_loss,
    orthogonality_loss,
    project_prototypes,
    similarity_forward,
    variability_loss,
)

log = logging.getLogger(__name__)

_EPS = 1e-300


def n_internal(depth):
    return 2 ** depth - 1


def ancestors(depth, leaf):
    """Internal nodes on the root-to-leaf path, root first."""
    node = n_internal(depth) + leaf
    path = []
    while node > 0:
        node = (node - 1) // 2
        path.append(node)
    return path[::-1]


@dataclass
class ProtoTree:
    """A full binary ProtoTree.

    Unimodal trees carry exactly one of ``image``/``genetic`` and ``m`` is
    ``None``. Multimodal trees carry both prototype sets and one modality
    weight per internal node.
    """

    depth: int
    leaf_dist: np.ndarray
    image: PrototypeSet = None
    genetic: PrototypeSet = None
    m: np.ndarray = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("tree depth must be >= 1")
        P = n_internal(self.depth)
        if self.leaf_dist.shape[0] != P + 1:
            raise ValidationError(f"depth {self.depth} needs {P + 1} leaves, got {self.leaf_dist.shape[0]}")
        for protos in (self.image, self.genetic):
            if protos is not None and len(protos) != P:
                raise ValidationError(f"depth {self.depth} needs {P} prototypes per modality, got {len(protos)}")
        if self.image is None and self.genetic is None:
            raise ValidationError("tree needs at least one prototype set")
        if self.multimodal and (self.m is None or self.m.shape != (P,)):
            raise ValidationError("multimodal tree needs one modality weight per internal node")

    @property
    def multimodal(self):
        return self.image is not None and self.genetic is not None

    @property
    def kind(self):
        return "multimodal" if self.multimodal else ("image" if self.image is not None else "genetic")

    @property
    def n_nodes(self):
        return n_internal(self.depth)

    @property
    def n_leaves(self):
        return self.n_nodes + 1

    @property
    def n_classes(self):
        return self.leaf_dist.shape[1]

    @property
    def leaf_logits(self):
        with np.errstate(divide="ignore"):
            return np.log(self.leaf_dist)

    def node_is_genetic(self):
        """Per-node modality under the clipping rule (``m > 0`` is genetic)."""
        if self.multimodal:
            return self.m > 0
        return np.full(self.n_nodes, self.genetic is not None)

    def copy(self):
        return ProtoTree(
            self.depth,
            self.leaf_dist.copy(),
            None if self.image is None else self.image.copy(),
            None if self.genetic is None else self.genetic.copy(),
            None if self.m is None else self.m.copy(),
            list(self.history),
        )

    def routing_similarities(self, s_img=None, s_gen=None):
        if self.multimodal:
            return mix_similarity(s_img, s_gen, self.m)
        return s_img if self.image is not None else s_gen

    def predict_proba(self, s_img=None, s_gen=None):
        return soft_traverse(self.leaf_dist, self.routing_similarities(s_img, s_gen))


# --------------------------------------------------------------------------
# traversal
# --------------------------------------------------------------------------

def _check_similarities(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s < 0) or np.any(s > 1) or np.any(np.isnan(s)):
        raise ValidationError("routing similarities must lie in [0, 1]")
    return s


def reach_probabilities(s):
    """Probability of reaching every node, shape ``(N, 2P+1)``."""
    s = np.atleast_2d(_check_similarities(s))
    n, P = s.shape
    mu = np.zeros((n, 2 * P + 1))
    mu[:, 0] = 1.0
    for node in range(P):
        mu[:, 2 * node + 1] = mu[:, node] * (1.0 - s[:, node])
        mu[:, 2 * node + 2] = mu[:, node] * s[:, node]
    return mu


def leaf_weights(s):
    """Soft-routing weight of every leaf, ``(N, P+1)``; rows sum to 1."""
    mu = reach_probabilities(s)
    return mu[:, mu.shape[1] // 2:]


def _subtree_values(leaf_values, s):
    """Recursion values ``r(n, s)`` for every node, ``(N, 2P+1, K)``."""
    n, P = s.shape
    r = np.zeros((n, 2 * P + 1, leaf_values.shape[1]))
    r[:, P:] = leaf_values[None]
    for node in range(P - 1, -1, -1):
        sn = s[:, node:node + 1]
        r[:, node] = (1.0 - sn) * r[:, 2 * node + 1] + sn * r[:, 2 * node + 2]
    return r


def soft_traverse(leaf_values, s):
    """Soft output ``r(root, s)`` for a single ``s`` (``(P,)``) or a batch."""
    single = np.ndim(s) == 1
    s = np.atleast_2d(_check_similarities(s))
    leaf_values = np.asarray(leaf_values, dtype=np.float64)
    if leaf_values.shape[0] != s.shape[1] + 1:
        raise ValidationError("leaf count must be one more than the number of internal nodes")
    out = _subtree_values(leaf_values, s)[:, 0]
    return out[0] if single else out


@dataclass
class PathRecord:
    nodes: list
    directions: list
    modalities: list
    similarities: list
    leaf: int
    genetic_used: bool


def hard_traverse(tree, s, genetic_mask=None):
    """Greedy routing of one sample: right iff ``s_n > 0.5``.

    ``s`` is the per-node routing similarity vector. ``genetic_mask`` marks
    genetic nodes for the path record (defaults to the tree's own modality
    assignment).
    """
    s = _check_similarities(s)
    gmask = tree.node_is_genetic() if genetic_mask is None else genetic_mask
    node, nodes, dirs, mods, sims = 0, [], [], [], []
    P = tree.n_nodes
    while node < P:
        right = bool(s[node] > 0.5)
        nodes.append(node)
        dirs.append("R" if right else "L")
        mods.append("genetic" if gmask[node] else "image")
        sims.append(float(s[node]))
        node = 2 * node + 1 + int(right)
    return node - P, PathRecord(nodes, dirs, mods, sims, node - P, any(gmask[n] for n in nodes))


def hard_route(s):
    """Vectorized hard traversal; returns leaf indices and visited nodes ``(N, depth)``."""
    s = np.atleast_2d(s)
    n, P = s.shape
    depth = int(round(math.log2(P + 1)))
    node = np.zeros(n, dtype=np.int64)
    path = np.zeros((n, depth), dtype=np.int64)
    rows = np.arange(n)
    for level in range(depth):
        path[:, level] = node
        node = 2 * node + 1 + (s[rows, node] > 0.5)
    return node - P, path


def hard_predict(tree, s_img=None, genetic=None, s_gen=None):
    """Test-time routing with lazy genetic access.

    Each node routes on its single (clipped) modality. For a multimodal tree
    the genetic similarities of a sample are requested from ``genetic`` (a
    :class:`~protoabstain.proto_core.GeneticSource`) the first time its path
    reaches a genetic node, and never otherwise. Alternatively pass ``s_gen``
    directly (no cost accounting). Returns ``(pred, leaves, genetic_used,
    paths)``.
    """
    if not tree.multimodal:
        s = s_img if tree.image is not None else s_gen
        leaves, paths = hard_route(s)
        used = np.full(len(leaves), tree.genetic is not None)
        return np.argmax(tree.leaf_dist[leaves], axis=1), leaves, used, paths

    s_img = np.atleast_2d(s_img)
    n, P = s_img.shape
    gmask = tree.node_is_genetic()
    node = np.zeros(n, dtype=np.int64)
    paths = np.zeros((n, tree.depth), dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    gen_rows = np.full((n, P), np.nan)
    rows = np.arange(n)
    for level in range(tree.depth):
        paths[:, level] = node
        at_gen = gmask[node]
        fetch = np.flatnonzero(at_gen & ~used)
        if fetch.size:
            if s_gen is not None:
                gen_rows[fetch] = np.atleast_2d(s_gen)[fetch]
            elif genetic is not None:
                gen_rows[fetch] = genetic.similarities(fetch)
            else:
                raise MeasurementRequired(f"sample {int(fetch[0])} reaches a genetic node")
            used[fetch] = True
        sim = np.where(at_gen, gen_rows[rows, node], s_img[rows, node])
        node = 2 * node + 1 + (sim > 0.5)
    leaves = node - P
    return np.argmax(tree.leaf_dist[leaves], axis=1), leaves, used, paths


def mix_similarity(s_img, s_gen, m):
    """``sig(m) * s_gen + (1 - sig(m)) * s_img``, exact at ``m = +-inf``."""
    sig = sigmoid(m)
    s_img = np.asarray(s_img, dtype=np.float64)
    s_gen = np.asarray(s_gen, dtype=np.float64)
    return np.where(sig == 1.0, s_gen, np.where(sig == 0.0, s_img, sig * s_gen + (1.0 - sig) * s_img))


# --------------------------------------------------------------------------
# modality assignment
# --------------------------------------------------------------------------

@dataclass
class LeafStats:
    routed: np.ndarray
    correct: np.ndarray

    @property
    def accuracy(self):
        return np.where(self.routed > 0, self.correct / np.maximum(self.routed, 1), 0.0)


def leaf_accuracy(tree, s, labels):
    """Per-leaf accuracy of hard traversal; unreached leaves score 0."""
    leaves, _ = hard_route(_check_similarities(s))
    pred = np.argmax(tree.leaf_dist[leaves], axis=1)
    L = tree.n_leaves
    routed = np.bincount(leaves, minlength=L)
    correct = np.bincount(leaves, weights=(pred == np.asarray(labels)).astype(float), minlength=L)
    return LeafStats(routed, correct.astype(np.int64))


def threshold_assignment(depth, stats, t, tau=5.0):
    """Modality weights: ``-tau`` (image) on ancestors of leaves with accuracy > t, else ``+tau``."""
    if not 0.0 <= t <= 1.0:
        # values just outside [0, 1] are accepted for the boundary cases
        if not -1.0 < t < 2.0:
            raise ValidationError(f"threshold must be in [0, 1], got {t}")
    if tau <= 0:
        raise ValidationError("tau must be > 0")
    m = np.full(n_internal(depth), float(tau))
    for leaf in np.flatnonzero(stats.accuracy > t):
        m[ancestors(depth, int(leaf))] = -float(tau)
    return m


def routing_loss(m, printed_sign=False):
    """Mean binary entropy of ``sig(m)`` (minimizing polarizes) and its gradient.

    With ``printed_sign`` the negated value (mean negative entropy) is
    returned instead.
    """
    m = np.asarray(m, dtype=np.float64)
    sig = sigmoid(m)
    finite = np.isfinite(m)
    mf = np.where(finite, m, 0.0)
    # H = sig * softplus(-m) + (1 - sig) * softplus(m)
    h = np.where(finite, sig * np.logaddexp(0.0, -mf) + (1.0 - sig) * np.logaddexp(0.0, mf), 0.0)
    grad = np.where(finite, -mf * sig * (1.0 - sig), 0.0) / m.size
    value = float(h.mean())
    return (-value, -grad) if printed_sign else (value, grad)


def clip_modalities(m):
    """``+inf`` where ``sig(m) > 0.5`` else ``-inf`` (ties go to the image side)."""
    return np.where(np.asarray(m) > 0, np.inf, -np.inf)


def init_multimodal_leaves(m, leaf_image, leaf_genetic):
    """Leaf ``l`` copies the image tree iff its whole path is image-only."""
    leaf_image = np.asarray(leaf_image)
    leaf_genetic = np.asarray(leaf_genetic)
    if leaf_image.shape != leaf_genetic.shape:
        raise ValidationError("image and genetic trees have different leaf shapes")
    depth = int(round(math.log2(len(m) + 1)))
    if leaf_image.shape[0] != len(m) + 1:
        raise ValidationError("topology mismatch between modality weights and leaves")
    out = leaf_genetic.copy()
    image_node = np.asarray(m) <= 0
    for leaf in range(len(m) + 1):
        if all(image_node[n] for n in ancestors(depth, leaf)):
            out[leaf] = leaf_image[leaf]
    return out


# --------------------------------------------------------------------------
# leaves
# --------------------------------------------------------------------------

def leaf_update(leaf_dist, weights, labels, floor=0.0):
    """One derivative-free multiplicative leaf step.

    For each leaf, every sample adds ``weight * dist_l[y] / p(y)`` to class
    ``y``, where ``p`` is the soft-traversal mixture. The result is
    renormalized; leaves that received no mass keep their distribution.
    """
    leaf_dist = np.asarray(leaf_dist, dtype=np.float64)
    weights = np.atleast_2d(weights)
    labels = np.asarray(labels)
    pred = weights @ leaf_dist                                   # (N, K)
    p_true = np.maximum(pred[np.arange(len(labels)), labels], _EPS)
    resp = weights * leaf_dist[:, labels].T / p_true[:, None]    # (N, L)
    upd = np.zeros_like(leaf_dist)
    np.add.at(upd.T, labels, resp)
    mass = upd.sum(axis=1, keepdims=True)
    if floor:
        upd = np.where(mass > 0, upd + floor * mass, upd)
        mass = upd.sum(axis=1, keepdims=True)
    return np.where(mass > 0, upd / np.where(mass > 0, mass, 1.0), leaf_dist)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def tree_nll(leaf_dist, s, labels):
    """Mean ``-log p(y)`` of the soft-traversal mixture and ``dL/ds``."""
    s = np.atleast_2d(_check_similarities(s))
    labels = np.asarray(labels)
    n, P = s.shape
    rows = np.arange(n)
    mu = reach_probabilities(s)
    r = _subtree_values(leaf_dist, s)
    p_true = np.maximum(r[rows, 0, labels], _EPS)
    left = r[:, 1:2 * P:2, :][rows, :, labels]                   # (N, P)
    right = r[:, 2:2 * P + 1:2, :][rows, :, labels]
    d_s = -mu[:, :P] * (right - left) / (p_true[:, None] * n)
    return -float(np.log(p_true).mean()), d_s


@dataclass
class TreeLossCoefs:
    cluster: float = 0.1
    orthogonality: float = 1e-3
    variability: float = 0.1
    weight_decay: float = 1e-4
    routing: float = 0.01
    printed_routing_sign: bool = False


def _prototype_terms(cache, vectors, coefs):
    """Cluster, orthogonality, variability and weight decay on one prototype set.

    Returns ``(value, parts, d_s, d_vectors_direct, d_map)``.
    """
    clst, _, d_clst, _ = cluster_separation_loss(cache.s, np.zeros(len(cache.s), dtype=int))
    ortho, d_ortho = orthogonality_loss(vectors) if coefs.orthogonality else (0.0, 0.0)
    if coefs.variability and vectors.shape[0] >= 2:
        var, d_var = variability_loss(cache.sim)
    else:
        var, d_var = 0.0, None
    wd = 0.5 * float(np.sum(vectors * vectors))
    value = coefs.cluster * clst + coefs.orthogonality * ortho + coefs.variability * var + coefs.weight_decay * wd
    parts = {"cluster": clst, "orthogonality": ortho, "variability": var, "weight_decay": wd}
    d_vec = coefs.orthogonality * d_ortho + coefs.weight_decay * vectors
    d_map = None if d_var is None else coefs.variability * d_var
    return value, parts, coefs.cluster * d_clst, d_vec, d_map


def unimodal_tree_loss(tree, emb, labels, coefs):
    """NLL + prototype regularizers for a unimodal tree. Gradient w.r.t. prototypes."""
    protos = tree.image if tree.image is not None else tree.genetic
    cache = similarity_forward(emb, protos.vectors)
    nll, d_s = tree_nll(tree.leaf_dist, cache.s, labels)
    reg, parts, d_s_reg, d_vec, d_map = _prototype_terms(cache, protos.vectors, coefs)
    grad = cache.backward_pooled(d_s + d_s_reg) + d_vec
    if d_map is not None:
        grad += cache.backward_map(d_map)
    parts["nll"] = nll
    return nll + reg, {"prototypes": grad}, parts, cache


def alp_loss(tree, s_img, emb_gen, labels, coefs):
    """ALP objective; gradients w.r.t. genetic prototypes and modality weights.

    Image similarities ``s_img`` are precomputed because the image side is
    frozen.
    """
    cache = similarity_forward(emb_gen, tree.genetic.vectors)
    s_gen = cache.s
    sig = sigmoid(tree.m)
    s_mix = mix_similarity(s_img, s_gen, tree.m)
    nll, d_s = tree_nll(tree.leaf_dist, s_mix, labels)
    reg, parts, d_s_reg, d_vec, d_map = _prototype_terms(cache, tree.genetic.vectors, coefs)
    rout, d_rout = routing_loss(tree.m, coefs.printed_routing_sign)

    d_sgen = d_s * sig + d_s_reg
    g_vec = cache.backward_pooled(d_sgen) + d_vec
    if d_map is not None:
        g_vec += cache.backward_map(d_map)
    dsig = sig * (1.0 - sig)
    g_m = np.sum(d_s * dsig * (s_gen - s_img), axis=0) + coefs.routing * d_rout
    parts.update({"nll": nll, "routing": rout})
    return nll + reg + coefs.routing * rout, {"genetic": g_vec, "m": g_m}, parts, s_mix


def alp_gradient_check(tree, s_img, emb_gen, labels, coefs, eps=1e-5, tol=1e-4):
    tree = tree.copy()
    _, grads, _, _ = alp_loss(tree, s_img, emb_gen, labels, coefs)
    params = {"genetic": tree.genetic.vectors, "m": tree.m}
    return gradient_check(lambda: alp_loss(tree, s_img, emb_gen, labels, coefs)[0], params, grads, eps, tol)


def unimodal_gradient_check(tree, emb, labels, coefs, eps=1e-5, tol=1e-4):
    tree = tree.copy()
    _, grads, _, _ = unimodal_tree_loss(tree, emb, labels, coefs)
    protos = tree.image if tree.image is not None else tree.genetic
    return gradient_check(lambda: unimodal_tree_loss(tree, emb, labels, coefs)[0],
                          {"prototypes": protos.vectors}, grads, eps, tol)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class TreeSchedule:
    epochs: int = 40
    prototype_lr: float = 0.5
    modality_lr: float = 0.5
    momentum: float = 0.9
    lr_step_size: int = 0
    lr_gamma: float = 0.5
    batch_size: int = 128
    leaf_floor: float = 1e-6
    refit_epochs: int = 5
    init: str = "greedy"
    max_candidates: int = 2048
    seed: int = 0


def _entropy(labels, K):
    if labels.size == 0:
        return 0.0
    p = np.bincount(labels, minlength=K) / labels.size
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _greedy_prototypes(emb, labels, K, P, rng, max_candidates):
    """Top-down choice of the training patch with the best hard split per node.

    Candidates are all training patches (or a random subset of
    ``max_candidates``). Nodes are filled in heap order; each takes the
    candidate whose ``s > 0.5`` split of the samples reaching it has the
    largest information gain, ties to the lowest candidate index.
    """
    n, d, h, w = emb.shape
    patches = emb.transpose(0, 2, 3, 1).reshape(-1, d).astype(np.float64)
    keep = np.flatnonzero(np.linalg.norm(patches, axis=1) > 0)
    if keep.size > max_candidates:
        keep = np.sort(rng.choice(keep, size=max_candidates, replace=False))
    cand = patches[keep]
    goes_right = similarity_forward(emb, cand).s > 0.5          # (N, C)
    reach = {0: np.arange(n)}
    vectors = np.empty((P, d))
    for node in range(P):
        idx = reach.pop(node)
        y = labels[idx]
        right = goes_right[idx]                                 # (n_node, C)
        n_r = right.sum(axis=0)
        gain = np.full(cand.shape[0], -np.inf)
        if idx.size:
            onehot = np.eye(K)[y]                               # (n_node, K)
            cnt_r = right.T.astype(np.float64) @ onehot         # (C, K)
            cnt_l = onehot.sum(axis=0)[None, :] - cnt_r
            gain = -(_split_entropy(cnt_l) + _split_entropy(cnt_r)) / idx.size
        best = int(np.argmax(gain))
        vectors[node] = cand[best]
        if 2 * node + 1 < P:
            reach[2 * node + 1] = idx[~right[:, best]]
            reach[2 * node + 2] = idx[right[:, best]]
    return vectors


def _split_entropy(counts):
    """``n * H`` of each row of class counts."""
    tot = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(counts > 0, counts / np.where(tot > 0, tot, 1.0), 1.0)
    return -(counts * np.log(p)).sum(axis=1)


def init_prototree(ds, modality, depth, seed=0, init_noise=0.1, method="greedy", max_candidates=2048):
    """Initial prototypes and leaves.

    ``method="random"`` places prototypes at random training patches plus
    noise with near-uniform leaves. ``method="greedy"`` grows the prototypes
    top-down by information gain of the hard split (see
    :func:`_greedy_prototypes`) and starts leaves from the hard-routed class
    counts.
    """
    emb = ds.image if modality == "image" else ds.genetic
    if emb is None:
        raise ValidationError(f"dataset has no {modality} embeddings")
    if method not in ("greedy", "random"):
        raise ValidationError(f"unknown tree init {method!r}")
    rng = np.random.default_rng(seed)
    P = n_internal(depth)
    n, d, h, w = emb.shape
    K = ds.n_classes
    if method == "random":
        vectors = np.empty((P, d))
        for j in range(P):
            patch = emb[rng.integers(n), :, rng.integers(h), rng.integers(w)].astype(np.float64)
            scale = np.linalg.norm(patch) / np.sqrt(d) if np.any(patch) else 1.0
            vectors[j] = patch + init_noise * scale * rng.normal(size=d)
    else:
        vectors = _greedy_prototypes(emb, np.asarray(ds.labels), K, P, rng, max_candidates)
    logits = 0.01 * rng.normal(size=(P + 1, K))
    dist = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    if method == "greedy":
        leaves, _ = hard_route(similarity_forward(emb, vectors).s)
        dist = leaf_update(dist, np.eye(P + 1)[leaves], ds.labels, floor=1e-3)
    protos = PrototypeSet(vectors)
    return ProtoTree(depth, dist, image=protos if modality == "image" else None,
                     genetic=protos if modality == "genetic" else None)


def _refit_leaves(tree, s_route, labels, n_steps, floor):
    for _ in range(n_steps):
        tree.leaf_dist = leaf_update(tree.leaf_dist, leaf_weights(s_route), labels, floor)


def train_prototree(ds, modality, depth, schedule=None, coefs=None, tree=None):
    """Train a unimodal ProtoTree on the training split and project it."""
    schedule = schedule or TreeSchedule()
    coefs = coefs or TreeLossCoefs(routing=0.0)
    emb = ds.image if modality == "image" else ds.genetic
    labels = np.asarray(ds.labels, dtype=np.int64)
    tree = tree or init_prototree(ds, modality, depth, seed=schedule.seed, method=schedule.init,
                                  max_candidates=schedule.max_candidates)
    if schedule.epochs == 0:
        return tree
    protos = tree.image if modality == "image" else tree.genetic
    opt = SGD(schedule.prototype_lr, schedule.momentum, schedule.lr_step_size, schedule.lr_gamma)
    for epoch in range(schedule.epochs):
        order = oversample_indices(labels, seed=schedule.seed * 100003 + epoch)
        bs = schedule.batch_size or len(order)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            value, grads, parts, cache = unimodal_tree_loss(tree, emb[idx], labels[idx], coefs)
            if not np.isfinite(value):
                raise NonFiniteLossError("non-finite ProtoTree loss", {"epoch": epoch, "parts": parts})
            opt.step({"prototypes": protos.vectors}, grads)
            tree.leaf_dist = leaf_update(tree.leaf_dist, leaf_weights(cache.s), labels[idx], schedule.leaf_floor)
            total += value * len(idx)
        opt.end_epoch()
        tree.history.append({"epoch": epoch, "loss": total / len(order)})
        log.debug("tree epoch=%d loss=%.6f", epoch, total / len(order))

    projected = project_prototypes(protos, emb, ds.ids)
    if modality == "image":
        tree.image = projected
    else:
        tree.genetic = projected
    s = similarity_forward(emb, projected.vectors).s
    _refit_leaves(tree, s, labels, schedule.refit_epochs, schedule.leaf_floor)
    return tree


def balanced_accuracy_of(pred, labels, K):
    recalls = [np.mean(pred[labels == c] == c) for c in range(K) if np.any(labels == c)]
    return float(np.mean(recalls))


def init_alp(tree_img, tree_gen, s_img, labels, t, tau=5.0):
    """Multimodal tree from two trained unimodal trees (threshold assignment + leaf init)."""
    if tree_img.depth != tree_gen.depth or tree_img.n_classes != tree_gen.n_classes:
        raise ValidationError("image and genetic trees must share depth and class count")
    stats = leaf_accuracy(tree_img, s_img, labels)
    m = threshold_assignment(tree_img.depth, stats, t, tau)
    leaves = init_multimodal_leaves(m, tree_img.leaf_dist, tree_gen.leaf_dist)
    return ProtoTree(tree_img.depth, leaves, tree_img.image.copy(), tree_gen.genetic.copy(), m)


def train_alp(tree_img, tree_gen, ds, schedule=None, coefs=None, t=None, tau=5.0):
    """Initialize and train the multimodal tree; image prototypes stay frozen.

    ``t`` defaults to the genetic tree's balanced accuracy on ``ds``. After
    the gradient epochs the modality weights are clipped to +-inf, genetic
    prototypes are projected, and leaves are refit on the clipped tree. With
    zero epochs the initialized tree is returned as is.
    """
    schedule = schedule or TreeSchedule()
    coefs = coefs or TreeLossCoefs()
    labels = np.asarray(ds.labels, dtype=np.int64)
    s_img = similarity_forward(ds.image, tree_img.image.vectors).s
    if t is None:
        s_gen0 = similarity_forward(ds.genetic, tree_gen.genetic.vectors).s
        pred, *_ = hard_predict(tree_gen, s_gen=s_gen0)
        t = balanced_accuracy_of(pred, labels, tree_gen.n_classes)
    tree = init_alp(tree_img, tree_gen, s_img, labels, t, tau)
    tree.history.append({"epoch": -1, "threshold": float(t), "tau": float(tau)})
    if schedule.epochs == 0:
        return tree

    image_before = tree.image.vectors.tobytes()
    lr = {"genetic": schedule.prototype_lr, "m": schedule.modality_lr}
    opt = SGD(lr, schedule.momentum, schedule.lr_step_size, schedule.lr_gamma)
    for epoch in range(schedule.epochs):
        order = oversample_indices(labels, seed=schedule.seed * 100003 + epoch)
        bs = schedule.batch_size or len(order)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            value, grads, parts, s_mix = alp_loss(tree, s_img[idx], ds.genetic[idx], labels[idx], coefs)
            if not np.isfinite(value):
                raise NonFiniteLossError("non-finite ALP loss", {"epoch": epoch, "parts": parts})
            opt.step({"genetic": tree.genetic.vectors, "m": tree.m}, grads)
            tree.leaf_dist = leaf_update(tree.leaf_dist, leaf_weights(s_mix), labels[idx], schedule.leaf_floor)
            total += value * len(idx)
        opt.end_epoch()
        tree.history.append({"epoch": epoch, "loss": total / len(order)})
        log.debug("alp epoch=%d loss=%.6f", epoch, total / len(order))

    tree.m = clip_modalities(tree.m)
    tree.genetic = project_prototypes(tree.genetic, ds.genetic, ds.ids)
    s_gen = similarity_forward(ds.genetic, tree.genetic.vectors).s
    _refit_leaves(tree, mix_similarity(s_img, s_gen, tree.m), labels, schedule.refit_epochs, schedule.leaf_floor)
    assert tree.image.vectors.tobytes() == image_before, "image prototypes changed during ALP training"
    return tree
