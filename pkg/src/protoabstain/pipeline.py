"""End-to-end stages shared by the CLI and the acceptance suite.

Each function takes the resolved config dict from :mod:`protoabstain.config`
and returns plain objects; nothing here touches the filesystem except
:func:`load_or_synth`.
"""

import numpy as np

from . import config as C
from . import data as D
from .cal import CALModel, train_cal
from .eval import evaluate_cal, evaluate_tree
from .proto_core import GeneticSource, similarity_forward
from .protopnet import train_protopnet
from .prototree import balanced_accuracy_of, hard_predict, train_alp, train_prototree


def load_or_synth(cfg):
    if cfg["dataset"]:
        return D.load_dataset(cfg["dataset"])
    return D.synth_generate(C.synth_config(cfg))


def split_dataset(ds, cfg):
    spec = D.make_splits(ds.labels, cfg["split.ratios"], cfg["split.min_per_class"], cfg["split.seed"])
    parts = tuple(ds.subset(getattr(spec, name), spec.class_map) for name in ("train", "validation", "test"))
    return (spec,) + parts


# --------------------------------------------------------------------------
# CAL
# --------------------------------------------------------------------------

def train_protopnet_pair(train, cfg):
    sched, coefs = C.phase_schedule(cfg), C.protopnet_coefs(cfg)
    ppc = cfg["protopnet.protos_per_class"]
    return (train_protopnet(train, "image", ppc, sched, coefs),
            train_protopnet(train, "genetic", ppc, sched, coefs))


def cal_inputs(image_net, genetic_net, ds, with_genetic=True):
    """Similarity dict for CAL training, calibration or testing."""
    out = {"s_img": image_net.similarities(ds.image), "labels": np.asarray(ds.labels, dtype=np.int64),
           "ids": np.asarray(ds.ids)}
    if with_genetic:
        out["s_gen"] = genetic_net.similarities(ds.genetic)
    return out


def genetic_source(model, ds):
    net = model.genetic if isinstance(model, CALModel) else model
    return GeneticSource(net.prototypes, ds.genetic)


def build_cal(image_net, genetic_net, train, calib, cfg, **changes):
    model = CALModel.from_protopnets(image_net, genetic_net, cfg["cal.m_init"], cfg["cal.scalar_m"],
                                     cfg["cal.k_rule"])
    tr = cal_inputs(image_net, genetic_net, train)
    ca = cal_inputs(image_net, genetic_net, calib)
    return train_cal(model, tr, ca, C.cal_config(cfg, **changes))


def cal_ablation_cell(cfg, alpha=0.05, synth_seed_offset=True):
    """``run_cell(flags, seed)`` for :func:`protoabstain.eval.ablation_run` over the CAL grid.

    Each seed regenerates the synthetic data (when no dataset is given) and
    retrains the ProtoPNets once; the four cells reuse that setup.
    """
    cache = {}

    def setup(seed):
        if seed not in cache:
            c = dict(cfg, seed=seed)
            if synth_seed_offset and not cfg["dataset"]:
                c["synth.seed"] = cfg["synth.seed"] + seed
            c["split.seed"] = cfg["split.seed"] + seed
            ds = load_or_synth(c)
            _, tr, va, te = split_dataset(ds, c)
            img, gen = train_protopnet_pair(tr, c)
            cache[seed] = (c, img, gen, tr, va, te)
        return cache[seed]

    def run_cell(flags, seed):
        c, img, gen, tr, va, te = setup(seed)
        changes = {}
        if not flags["margin"]:
            changes["lambda_margin"] = 0.0
        if not flags["modality"]:
            changes["lambda_modality"] = 0.0
        model = build_cal(img, gen, tr, va, c, **changes)
        calib = cal_inputs(img, gen, va)
        model.recalibrate(calib["s_img"], calib["s_gen"], alpha, model.band.mode, model.band.bonferroni)
        test = cal_inputs(img, gen, te, with_genetic=False)
        rep, _ = evaluate_cal(model, test["s_img"], genetic_source(model, te), test["labels"], test["ids"])
        return rep

    return run_cell


# --------------------------------------------------------------------------
# trees
# --------------------------------------------------------------------------

def train_tree_pair(train, cfg):
    sched, depth = C.tree_schedule(cfg), cfg["tree.depth"]
    coefs = C.tree_coefs(cfg, routing=0.0)
    return (train_prototree(train, "image", depth, sched, coefs),
            train_prototree(train, "genetic", depth, sched, coefs))


def tree_similarities(tree, ds):
    s_img = None if tree.image is None else similarity_forward(ds.image, tree.image.vectors).s
    s_gen = None if tree.genetic is None else similarity_forward(ds.genetic, tree.genetic.vectors).s
    return s_img, s_gen


def tree_balanced_accuracy(tree, ds):
    s_img, s_gen = tree_similarities(tree, ds)
    pred, *_ = hard_predict(tree, s_img=s_img, s_gen=s_gen)
    return balanced_accuracy_of(pred, np.asarray(ds.labels), tree.n_classes)


def build_alp(tree_img, tree_gen, train, cfg, **coef_changes):
    return train_alp(tree_img, tree_gen, train, C.tree_schedule(cfg), C.tree_coefs(cfg, **coef_changes),
                     t=cfg["alp.t"], tau=cfg["alp.tau"])


def evaluate_any_tree(tree, ds, t=None, tau=None, seed=None, config_hash=None):
    """Hard-traversal report; multimodal trees read genetics through a metered source."""
    labels = np.asarray(ds.labels)
    if tree.multimodal:
        s_img = similarity_forward(ds.image, tree.image.vectors).s
        src = GeneticSource(tree.genetic, ds.genetic)
        return evaluate_tree(tree, labels, s_img=s_img, genetic=src, t=t, tau=tau, seed=seed,
                             config_hash=config_hash)
    s_img, s_gen = tree_similarities(tree, ds)
    return evaluate_tree(tree, labels, s_img=s_img, s_gen=s_gen, seed=seed, config_hash=config_hash)


def alp_ablation_cell(cfg):
    """``run_cell(flags, seed)`` over the variability/routing grid."""
    cache = {}

    def setup(seed):
        if seed not in cache:
            c = dict(cfg, seed=seed)
            if not cfg["dataset"]:
                c["synth.seed"] = cfg["synth.seed"] + seed
            c["split.seed"] = cfg["split.seed"] + seed
            ds = load_or_synth(c)
            _, tr, va, te = split_dataset(ds, c)
            cache[seed] = (c, tr, te) + train_tree_pair(tr, c)
        return cache[seed]

    def run_cell(flags, seed):
        c, tr, te, t_img, t_gen = setup(seed)
        changes = {}
        if not flags["variability"]:
            changes["variability"] = 0.0
        if not flags["routing"]:
            changes["routing"] = 0.0
        alp = build_alp(t_img, t_gen, tr, c, **changes)
        rep, _, _ = evaluate_any_tree(alp, te, t=alp.history[0]["threshold"], tau=c["alp.tau"])
        return rep

    return run_cell
