"""Metrics, alpha sweeps and ablation tables.

Success rate is the fraction of samples classified from image data alone:
abstentions for CAL, hard paths free of genetic nodes for ALP. The
abstention error rate counts abstained samples whose *true* genetic logits
would have changed the mixed prediction; it needs audit reads of genetic
data, which are metered separately from real measurements.
"""

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .cal import Decision, calibrate, infer_cal, mix_logits
from .errors import ValidationError
from .functional import sigmoid
from .prototree import PathRecord, hard_predict


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def per_class_recall(preds, labels, K=None):
    """``{class: recall}`` over classes present in ``labels``."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("balanced accuracy of an empty set is undefined")
    if preds.shape != labels.shape:
        raise ValidationError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    K = int(labels.max()) + 1 if K is None else K
    if labels.min() < 0 or labels.max() >= K:
        raise ValidationError(f"labels outside [0, {K})")
    out = {}
    for c in range(K):
        mask = labels == c
        if mask.any():
            out[c] = float(np.mean(preds[mask] == c))
    return out


def balanced_accuracy(preds, labels, K=None):
    """Mean per-class recall; classes absent from ``labels`` are left out."""
    recalls = per_class_recall(preds, labels, K)
    return float(np.mean(list(recalls.values())))


def _image_only_flags(items):
    flags = []
    for it in items:
        if isinstance(it, Decision):
            flags.append(it.abstain)
        elif isinstance(it, PathRecord):
            flags.append(not it.genetic_used)
        elif isinstance(it, dict):
            flags.append(str(it["abstain"]) in ("1", "True", "true"))
        else:
            flags.append(bool(it))
    return np.asarray(flags, dtype=bool)


def success_rate(items):
    """Fraction of samples classified with image data only (0 for an empty batch).

    Accepts CAL decisions (or decision-log rows), tree path records, or plain
    booleans meaning "image only".
    """
    flags = _image_only_flags(items)
    return float(flags.mean()) if flags.size else 0.0


def abstention_errors(decisions, y_gen_true, m):
    """Per-abstention flags: would the true genetic logits change ``k``?

    ``y_gen_true`` rows align with the abstained decisions, in order.
    """
    ab = [d for d in decisions if d.abstain]
    if not ab:
        return np.zeros(0, dtype=bool)
    y_img = np.stack([d.y_img for d in ab])
    k = np.array([d.k for d in ab])
    sig = np.broadcast_to(sigmoid(np.asarray(m, dtype=np.float64)), (y_img.shape[1],))
    mixed = mix_logits(y_img, np.asarray(y_gen_true), sig)
    return np.argmax(mixed, axis=1) != k


def abstention_error_rate(decisions, y_gen_true, m, unconditional=False):
    """Fraction of abstentions that were wrong (0 when nothing abstained).

    With ``unconditional=True`` the denominator is all samples instead.
    """
    wrong = abstention_errors(decisions, y_gen_true, m)
    denom = len(decisions) if unconditional else wrong.size
    return float(wrong.sum() / denom) if denom else 0.0


def binomial_sigma(p, n):
    return math.sqrt(p * (1.0 - p) / n) if n else 0.0


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    balanced_accuracy: float
    raw_accuracy: float
    success_rate: float
    abstention_error_rate: float = 0.0
    abstention_error_rate_all: float = 0.0
    per_class_recall: dict = field(default_factory=dict)
    alpha: float = None
    t: float = None
    tau: float = None
    n_samples: int = 0
    n_abstained: int = 0
    genetic_reads: int = 0
    audit_reads: int = 0
    seed: int = None
    config_hash: str = None
    label: str = None

    def to_dict(self):
        d = asdict(self)
        d["per_class_recall"] = {str(k): v for k, v in self.per_class_recall.items()}
        return d

    def row(self):
        d = self.to_dict()
        d.pop("per_class_recall")
        return d


def evaluate_cal(model, s_img, genetic, labels, ids=None, band=None, seed=None, config_hash=None):
    """Decisions plus report for a CAL model on one split.

    ``genetic`` is a :class:`GeneticSource` over the split. Abstained samples
    are read in audit mode to score abstention errors.
    """
    band = band or model.band
    labels = np.asarray(labels)
    decisions = infer_cal(model, s_img, genetic, band, ids=ids, labels=labels)
    preds = np.array([d.final_class for d in decisions])
    ab_idx = np.array([i for i, d in enumerate(decisions) if d.abstain], dtype=np.int64)
    y_true = genetic.similarities(ab_idx, audit=True) @ model.head_genetic.T
    wrong = abstention_errors(decisions, y_true, model.m)
    report = EvalReport(
        balanced_accuracy=balanced_accuracy(preds, labels, model.n_classes),
        raw_accuracy=float(np.mean(preds == labels)),
        success_rate=success_rate(decisions),
        abstention_error_rate=float(wrong.mean()) if wrong.size else 0.0,
        abstention_error_rate_all=float(wrong.sum() / len(decisions)) if decisions else 0.0,
        per_class_recall=per_class_recall(preds, labels, model.n_classes),
        alpha=band.alpha,
        n_samples=len(decisions),
        n_abstained=int(ab_idx.size),
        genetic_reads=int(genetic.reads.sum()),
        audit_reads=int(genetic.audit_reads.sum()),
        seed=seed,
        config_hash=config_hash,
    )
    return report, decisions


def evaluate_tree(tree, labels, s_img=None, genetic=None, s_gen=None, t=None, tau=None, seed=None,
                  config_hash=None):
    """Hard-traversal report; genetic similarities are read only when a path needs them."""
    labels = np.asarray(labels)
    pred, leaves, used, paths = hard_predict(tree, s_img, genetic, s_gen)
    return EvalReport(
        balanced_accuracy=balanced_accuracy(pred, labels, tree.n_classes),
        raw_accuracy=float(np.mean(pred == labels)),
        success_rate=success_rate(~used),
        per_class_recall=per_class_recall(pred, labels, tree.n_classes),
        t=t,
        tau=tau,
        n_samples=len(labels),
        genetic_reads=int(genetic.reads.sum()) if genetic is not None else int(used.sum()),
        seed=seed,
        config_hash=config_hash,
    ), pred, paths


def evaluate_protopnet(net, emb, labels, seed=None, config_hash=None):
    """Unimodal report; success is 100% for image models and 0% for genetic ones."""
    labels = np.asarray(labels)
    pred = net.predict(emb)
    n = len(labels)
    image = net.modality == "image"
    return EvalReport(
        balanced_accuracy=balanced_accuracy(pred, labels, net.n_classes),
        raw_accuracy=float(np.mean(pred == labels)),
        success_rate=success_rate(np.full(n, image)),
        per_class_recall=per_class_recall(pred, labels, net.n_classes),
        n_samples=n,
        genetic_reads=0 if image else n,
        seed=seed,
        config_hash=config_hash,
    )


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def sweep_alpha(model, calib, test, alphas, make_source, mode=None, bonferroni=None, seed=None,
                config_hash=None):
    """One calibration and one evaluation per alpha on a fixed model.

    ``calib`` and ``test`` are dicts with ``s_img``/``labels``/``ids`` (calib
    also ``s_gen``); ``make_source()`` returns a fresh :class:`GeneticSource`
    over the test split so each alpha's read counters start at zero.
    Returns ``(reports, bands)``.
    """
    mode = mode or (model.band.mode if model.band is not None else "per_logit")
    bonferroni = bool(model.band.bonferroni if bonferroni is None and model.band is not None else bonferroni)
    residuals = model.residuals(calib["s_img"], calib["s_gen"])
    reports, bands = [], []
    for alpha in alphas:
        band = calibrate(residuals, alpha, mode, bonferroni)
        rep, _ = evaluate_cal(model, test["s_img"], make_source(), test["labels"], test.get("ids"), band,
                              seed, config_hash)
        reports.append(rep)
        bands.append(band)
    order = np.argsort(alphas, kind="stable")
    succ = np.array([reports[i].success_rate for i in order])
    if np.any(np.diff(succ) < 0):
        raise RuntimeError("success rate decreased with alpha; conformal bands are inconsistent")
    return reports, bands


REPORT_COLUMNS = ("label", "seed", "alpha", "t", "tau", "balanced_accuracy", "raw_accuracy", "success_rate",
                  "abstention_error_rate", "abstention_error_rate_all", "n_samples", "n_abstained",
                  "genetic_reads", "audit_reads", "config_hash")


def write_reports_csv(path, reports, columns=REPORT_COLUMNS):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for rep in reports:
            row = rep.row()
            w.writerow(["" if row.get(c) is None else _fmt(row.get(c)) for c in columns])


def _fmt(v):
    return repr(float(v)) if isinstance(v, float) else v


def write_series(path, x_name, y_name, xs, ys):
    """Two-column plot-ready series file."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([x_name, y_name])
        for x, y in zip(xs, ys):
            w.writerow([repr(float(x)), repr(float(y))])


def read_series(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return header, np.array([[float(v) for v in r] for r in body]).reshape(-1, len(header))


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

CAL_ABLATION = (
    ("Mar. + Mod. Loss", {"margin": True, "modality": True}),
    ("Mar. Loss", {"margin": True, "modality": False}),
    ("Mod. Loss", {"margin": False, "modality": True}),
    ("Neither Loss", {"margin": False, "modality": False}),
)

ALP_ABLATION = (
    ("Var. + Rout. Loss", {"variability": True, "routing": True}),
    ("Var. Loss", {"variability": True, "routing": False}),
    ("Rout. Loss", {"variability": False, "routing": True}),
    ("Neither Loss", {"variability": False, "routing": False}),
)


def ablation_run(grid, run_cell, seeds):
    """Evaluate every grid cell for every seed.

    ``run_cell(flags, seed)`` trains and evaluates one cell and returns an
    :class:`EvalReport`. Cells share seeds so that each seed's setup (data,
    base models) is identical across the grid. Returns per-seed reports
    followed by one seed-averaged report per cell (``seed=None``).
    """
    per_seed = []
    for label, flags in grid:
        for seed in seeds:
            rep = run_cell(flags, seed)
            rep.label = label
            rep.seed = seed
            per_seed.append(rep)
    means = [mean_report([r for r in per_seed if r.label == label], label) for label, _ in grid]
    return per_seed + means


def mean_report(reports, label=None):
    def avg(name):
        return float(np.mean([getattr(r, name) for r in reports]))

    return EvalReport(
        balanced_accuracy=avg("balanced_accuracy"),
        raw_accuracy=avg("raw_accuracy"),
        success_rate=avg("success_rate"),
        abstention_error_rate=avg("abstention_error_rate"),
        abstention_error_rate_all=avg("abstention_error_rate_all"),
        alpha=reports[0].alpha,
        t=reports[0].t,
        tau=reports[0].tau,
        n_samples=int(sum(r.n_samples for r in reports)),
        label=label,
    )


def ablation_table(reports):
    """Seed-averaged rows ``(label, balanced_accuracy, success_rate)`` in grid order."""
    return [(r.label, r.balanced_accuracy, r.success_rate) for r in reports if r.seed is None]
