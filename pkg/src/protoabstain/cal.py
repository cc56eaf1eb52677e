"""Conformal abstention over a pair of ProtoPNets.

Per class ``j`` the multimodal logit is the convex mix::

    y_j = sig(m_j) * y_img_j + (1 - sig(m_j)) * y_gen_j

A predictor head maps image similarities to estimated genetic logits. Split
conformal calibration of its residuals gives margins ``delta``; the image
side then forms worst-case logits by pushing the predicted class ``k`` down
and every other class up by ``delta``. If ``k`` still wins strictly, the
genetic measurement is skipped ("abstain").
"""

import csv
import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import MeasurementRequired, NonFiniteLossError, SplitOverlapError, ValidationError
from .functional import cross_entropy, log_softmax, logsumexp, sigmoid
from .gradcheck import gradient_check
from .optim import SGD
from .data import oversample_indices
from .proto_core import GeneticSource  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

PARAMS = ("m", "head_image", "head_genetic", "predictor")


# --------------------------------------------------------------------------
# conformal calibration
# --------------------------------------------------------------------------

@dataclass
class ConformalBand:
    mode: str
    alpha: float
    delta: np.ndarray
    n_cal: int
    bonferroni: bool = False

    def to_json(self):
        return {
            "alpha": self.alpha,
            "mode": self.mode,
            "delta": [float(d) if math.isfinite(d) else "inf" for d in self.delta],
            "n_cal": self.n_cal,
            "bonferroni": self.bonferroni,
        }

    @classmethod
    def from_json(cls, obj):
        delta = np.array([math.inf if d == "inf" else float(d) for d in obj["delta"]])
        return cls(obj["mode"], float(obj["alpha"]), delta, int(obj["n_cal"]), bool(obj.get("bonferroni", False)))


def conformal_rank(n, alpha):
    """``ceil((n + 1) * (1 - alpha))``, immune to float noise such as 10*0.9."""
    return math.ceil(round((n + 1) * (1.0 - alpha), 9))


def _quantile(scores, alpha):
    """The rank-th smallest score per column, ``inf`` when rank exceeds n."""
    n = scores.shape[0]
    rank = max(conformal_rank(n, alpha), 1)
    if rank > n:
        return np.full(scores.shape[1:], math.inf)
    return np.sort(scores, axis=0)[rank - 1]


def calibrate(residuals, alpha, mode="per_logit", bonferroni=False):
    """Conformal margins from calibration residuals ``y_gen - y_gen_hat``.

    ``per_logit``: one margin per class from that class's absolute
    residuals. ``l_infinity``: a single margin from the max absolute residual
    across classes, broadcast to all classes (simultaneous coverage).
    ``bonferroni`` divides ``alpha`` by K in per-logit mode.
    """
    r = np.abs(np.atleast_2d(np.asarray(residuals, dtype=np.float64)))
    if r.shape[0] == 0:
        raise ValidationError("empty calibration set")
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"alpha must be in [0, 1), got {alpha}")
    K = r.shape[1]
    if mode == "per_logit":
        a = alpha / K if bonferroni else alpha
        delta = _quantile(r, a)
    elif mode == "l_infinity":
        delta = np.full(K, float(_quantile(r.max(axis=1)[:, None], alpha)[0]))
    else:
        raise ValidationError(f"unknown conformal mode {mode!r}")
    return ConformalBand(mode, float(alpha), delta, r.shape[0], bonferroni and mode == "per_logit")


# --------------------------------------------------------------------------
# elementwise pieces
# --------------------------------------------------------------------------

def mix_logits(y_img, y_gen, m):
    """Per-class convex combination; ``sig(m) = 1`` keeps the image logit."""
    sig = sigmoid(m)
    return sig * np.asarray(y_img, dtype=np.float64) + (1.0 - sig) * np.asarray(y_gen, dtype=np.float64)


def _genetic_offset(gen_weight, delta):
    # 0 * inf must be 0 when the genetic side has zero weight
    with np.errstate(invalid="ignore"):
        return np.where(gen_weight == 0, 0.0, gen_weight * delta)


def worst_case_logits(y_img, y_gen_hat, delta, m, k):
    """Predicted class ``k`` lowered by ``delta_k``, all others raised by ``delta_j``."""
    y_img = np.atleast_2d(y_img)
    y_gen_hat = np.atleast_2d(y_gen_hat)
    k = np.atleast_1d(k)
    sig = sigmoid(m)
    sign = np.ones_like(y_img)
    sign[np.arange(len(k)), k] = -1.0
    off = _genetic_offset(1.0 - sig, np.broadcast_to(delta, y_img.shape))
    return sig * y_img + (1.0 - sig) * y_gen_hat + sign * off


def abstention_decision(y_tilde, k):
    """True iff ``k`` is the unique argmax of the worst-case logits."""
    y_tilde = np.atleast_2d(y_tilde)
    k = np.atleast_1d(k)
    rows = np.arange(len(k))
    rivals = y_tilde.copy()
    rivals[rows, k] = -np.inf
    return y_tilde[rows, k] > rivals.max(axis=1)


def margin_loss(y_tilde, k):
    """``log sum_{j != k} exp(-(y_tilde_k - y_tilde_j))`` per row, with gradient.

    Returns ``(values, grad)``; both shaped like the batch.
    """
    y_tilde = np.atleast_2d(np.asarray(y_tilde, dtype=np.float64))
    k = np.atleast_1d(k)
    n, K = y_tilde.shape
    if K < 2:
        raise ValidationError("margin loss needs at least two classes")
    rows = np.arange(n)
    others = y_tilde.copy()
    others[rows, k] = -np.inf
    values = logsumexp(others, axis=1) - y_tilde[rows, k]
    grad = np.exp(others - np.max(others, axis=1, keepdims=True))
    grad /= grad.sum(axis=1, keepdims=True)
    grad[rows, k] = -1.0
    return values, grad


def modality_loss(m):
    """``-sum_j sig(m_j)`` and its gradient."""
    sig = sigmoid(m)
    return -float(sig.sum()), -sig * (1.0 - sig)


def predictor_loss(y_gen, y_gen_hat):
    """Per-row mean squared error over classes, and gradient w.r.t. ``y_gen_hat``."""
    diff = np.atleast_2d(y_gen) - np.atleast_2d(y_gen_hat)
    K = diff.shape[1]
    return np.mean(diff * diff, axis=1), -2.0 * diff / K


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

@dataclass
class CALModel:
    """Trainable CAL head on top of two frozen ProtoPNets.

    ``k_rule="mixed"`` takes the abstention-side prediction as the argmax of
    image logits mixed with *predicted* genetic logits; ``"image"`` uses the
    image ProtoPNet's argmax.
    """

    image: object
    genetic: object
    m: np.ndarray
    head_image: np.ndarray
    head_genetic: np.ndarray
    predictor: np.ndarray
    band: ConformalBand = None
    k_rule: str = "mixed"
    history: list = field(default_factory=list)

    @classmethod
    def from_protopnets(cls, image_net, genetic_net, m_init=0.0, scalar_m=False, k_rule="mixed"):
        K = image_net.n_classes
        if genetic_net.n_classes != K:
            raise ValidationError("image and genetic ProtoPNets disagree on K")
        m = np.full(1 if scalar_m else K, float(m_init))
        return cls(image_net, genetic_net, m, image_net.head.copy(), genetic_net.head.copy(),
                   image_net.head.copy(), k_rule=k_rule)

    @property
    def n_classes(self):
        return self.head_image.shape[0]

    def params(self):
        return {name: getattr(self, name) for name in PARAMS}

    def copy(self):
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in PARAMS:
            kw[name] = kw[name].copy()
        kw["history"] = list(self.history)
        return CALModel(**kw)

    def image_similarities(self, emb):
        return self.image.similarities(emb)

    def genetic_similarities(self, emb):
        return self.genetic.similarities(emb)

    def residuals(self, s_img, s_gen):
        return s_gen @ self.head_genetic.T - s_img @ self.predictor.T

    def recalibrate(self, s_img, s_gen, alpha, mode="per_logit", bonferroni=False):
        self.band = calibrate(self.residuals(s_img, s_gen), alpha, mode, bonferroni)
        return self.band


def _sig(model):
    return np.broadcast_to(sigmoid(model.m), (model.n_classes,))


def image_side(model, s_img, delta):
    """Everything computable without genetics: logits, k, worst case, abstain flag."""
    sig = _sig(model)
    y_img = s_img @ model.head_image.T
    y_hat = s_img @ model.predictor.T
    q = sig * y_img + (1.0 - sig) * y_hat
    k = np.argmax(q if model.k_rule == "mixed" else y_img, axis=1)
    sign = np.ones_like(q)
    sign[np.arange(len(k)), k] = -1.0
    y_tilde = q + sign * _genetic_offset(1.0 - sig, np.broadcast_to(delta, q.shape))
    abstain = abstention_decision(y_tilde, k)
    return {"sig": sig, "y_img": y_img, "y_hat": y_hat, "q": q, "k": k, "sign": sign,
            "y_tilde": y_tilde, "abstain": abstain}


def _reduce_m(model, g):
    return g.sum(axis=-1, keepdims=True) if model.m.size == 1 else g


def cal_loss(model, s_img, s_gen, labels, delta, lam_modality=0.0, lam_margin=0.0, lam_predictor=0.0):
    """Gated CE + modality + margin + predictor losses and their gradients.

    Samples on which the image side abstains at ``delta`` get CE on the
    image-side logits; the others get CE on the true multimodal logits. The
    margin term is skipped for rows whose worst case is unbounded.
    """
    n, K = len(labels), model.n_classes
    st = image_side(model, s_img, delta)
    sig, y_img, y_hat, q, k, sign, y_tilde, abstain = (
        st[key] for key in ("sig", "y_img", "y_hat", "q", "k", "sign", "y_tilde", "abstain"))
    dsig = sig * (1.0 - sig)
    y_gen = s_gen @ model.head_genetic.T
    mix_true = sig * y_img + (1.0 - sig) * y_gen

    g_yimg = np.zeros_like(y_img)
    g_yhat = np.zeros_like(y_img)
    g_ygen = np.zeros_like(y_img)
    g_m = np.zeros_like(y_img)

    # gated cross-entropy
    ce_logits = np.where(abstain[:, None], q, mix_true)
    ce, g_ce = cross_entropy(ce_logits, labels)
    other = np.where(abstain[:, None], y_hat, y_gen)
    g_yimg += g_ce * sig
    g_m += g_ce * dsig * (y_img - other)
    g_yhat += np.where(abstain[:, None], g_ce * (1.0 - sig), 0.0)
    g_ygen += np.where(abstain[:, None], 0.0, g_ce * (1.0 - sig))

    # margin
    finite = np.isfinite(y_tilde).all(axis=1)
    margin = 0.0
    if lam_margin and finite.any():
        vals, g_tilde = margin_loss(y_tilde[finite], k[finite])
        margin = float(vals.sum()) / n
        g_tilde = np.zeros_like(y_tilde[finite]) + g_tilde * (lam_margin / n)
        delta_b = np.broadcast_to(delta, y_img.shape)[finite]
        g_yimg[finite] += g_tilde * sig
        g_yhat[finite] += g_tilde * (1.0 - sig)
        g_m[finite] += g_tilde * dsig * (y_img[finite] - y_hat[finite] - sign[finite] * delta_b)

    # predictor
    pred_vals, g_pred = predictor_loss(y_gen, y_hat)
    pred = float(pred_vals.mean())
    g_yhat += lam_predictor * g_pred / n
    g_ygen -= lam_predictor * g_pred / n

    mod, g_mod = modality_loss(model.m)

    value = ce + lam_modality * mod + lam_margin * margin + lam_predictor * pred
    grads = {
        "m": _reduce_m(model, g_m.sum(axis=0)) + lam_modality * g_mod,
        "head_image": g_yimg.T @ s_img,
        "head_genetic": g_ygen.T @ s_gen,
        "predictor": g_yhat.T @ s_img,
    }
    parts = {"ce": ce, "modality": mod, "margin": margin, "predictor": pred,
             "abstain_fraction": float(abstain.mean()) if n else 0.0}
    return value, grads, parts


def cal_gradient_check(model, s_img, s_gen, labels, delta, lams=(0.5, 0.5, 0.5), eps=1e-5, tol=1e-4):
    model = model.copy()
    _, grads, _ = cal_loss(model, s_img, s_gen, labels, delta, *lams)
    return gradient_check(lambda: cal_loss(model, s_img, s_gen, labels, delta, *lams)[0],
                          model.params(), grads, eps, tol)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class CALConfig:
    lambda_modality: float = 0.05
    lambda_margin: float = 0.1
    lambda_predictor: float = 0.5
    alpha_train: float = 0.05
    lr: float = 0.05
    momentum: float = 0.0
    lr_step_size: int = 0
    lr_gamma: float = 0.5
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    mode: str = "per_logit"
    bonferroni: bool = False
    trainable: tuple = PARAMS

    def __post_init__(self):
        for name in ("lambda_modality", "lambda_margin", "lambda_predictor"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not 0.0 < self.alpha_train < 1.0:
            raise ValidationError("alpha_train must be in (0, 1)")
        unknown = set(self.trainable) - set(PARAMS)
        if unknown:
            raise ValidationError(f"unknown trainable blocks {sorted(unknown)}")


def train_cal(model, train, calib, cfg):
    """Optimize ``m`` and the three linear heads; prototypes stay frozen.

    ``train`` and ``calib`` are dicts with keys ``s_img``, ``s_gen``,
    ``labels`` and ``ids``. The band is recalibrated on ``calib`` before each
    epoch (at ``cfg.alpha_train``) and once more after training.
    """
    overlap = np.intersect1d(train["ids"], calib["ids"])
    if overlap.size:
        raise SplitOverlapError(f"{overlap.size} samples appear in both train and calibration splits")
    model = model.copy()
    labels = np.asarray(train["labels"], dtype=np.int64)
    opt = SGD(cfg.lr, cfg.momentum, cfg.lr_step_size, cfg.lr_gamma)
    for epoch in range(cfg.epochs):
        band = model.recalibrate(calib["s_img"], calib["s_gen"], cfg.alpha_train, cfg.mode, cfg.bonferroni)
        order = oversample_indices(labels, seed=cfg.seed * 100003 + epoch)
        bs = cfg.batch_size or len(order)
        total = 0.0
        for start in range(0, len(order), bs):
            idx = np.sort(order[start:start + bs])
            value, grads, parts = cal_loss(model, train["s_img"][idx], train["s_gen"][idx], labels[idx],
                                           band.delta, cfg.lambda_modality, cfg.lambda_margin,
                                           cfg.lambda_predictor)
            if not np.isfinite(value):
                raise NonFiniteLossError("non-finite CAL loss", {"epoch": epoch, "parts": parts})
            opt.step({k: v for k, v in model.params().items() if k in cfg.trainable}, grads)
            total += value * len(idx)
        opt.end_epoch()
        model.history.append({"epoch": epoch, "loss": total / len(order)})
        log.debug("epoch=%d loss=%.6f", epoch, total / len(order))
    model.recalibrate(calib["s_img"], calib["s_gen"], cfg.alpha_train, cfg.mode, cfg.bonferroni)
    return model


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

@dataclass
class Decision:
    sample_id: int
    y_img: np.ndarray
    y_gen_hat: np.ndarray
    k: int
    y_tilde: np.ndarray
    abstain: bool
    final_class: int = -1
    genetic_queried: bool = False
    true_class: int = -1
    margin: float = math.nan


def infer_cal(model, s_img, genetic=None, band=None, ids=None, labels=None):
    """Decisions for a batch given image similarities.

    ``genetic`` is a :class:`GeneticSource` (or ``None``); only samples that
    do not abstain are read from it. Without a source, the first sample that
    needs genetics raises :class:`MeasurementRequired`.
    """
    band = band or model.band
    if band is None:
        raise ValidationError("model has no calibrated band")
    n = len(s_img)
    ids = np.arange(n) if ids is None else np.asarray(ids)
    st = image_side(model, s_img, band.delta)
    k, y_tilde, abstain = st["k"], st["y_tilde"], st["abstain"]
    rows = np.arange(n)
    with np.errstate(invalid="ignore"):
        d = y_tilde[rows, k][:, None] - y_tilde
    d[rows, k] = np.inf
    margins = d.min(axis=1) if y_tilde.shape[1] > 1 else np.full(n, np.inf)

    decisions = [
        Decision(int(ids[i]), st["y_img"][i], st["y_hat"][i], int(k[i]), y_tilde[i], bool(abstain[i]),
                 final_class=int(k[i]), true_class=-1 if labels is None else int(labels[i]),
                 margin=float(margins[i]))
        for i in range(n)
    ]
    need = np.flatnonzero(~abstain)
    if need.size:
        if genetic is None:
            raise MeasurementRequired(
                f"sample {int(ids[need[0]])} needs a genetic measurement", decisions[need[0]])
        s_gen = genetic.similarities(need)
        mixed = mix_logits(st["y_img"][need], s_gen @ model.head_genetic.T, _sig(model))
        for j, i in enumerate(need):
            decisions[i].final_class = int(np.argmax(mixed[j]))
            decisions[i].genetic_queried = True
    return decisions


def write_decision_log(path, decisions):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "k", "abstain", "genetic_queried", "final_class", "true_class", "margin"])
        for d in decisions:
            w.writerow([d.sample_id, d.k, int(d.abstain), int(d.genetic_queried), d.final_class,
                        d.true_class, repr(d.margin)])


def read_decision_log(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def predict_proba_multimodal(model, s_img, s_gen):
    """Class probabilities of the fully multimodal mix (no abstention)."""
    y = mix_logits(s_img @ model.head_image.T, s_gen @ model.head_genetic.T, _sig(model))
    return np.exp(log_softmax(y))
