"""Command-line entry point: ``protoabstain <subcommand> [options]``.

Every subcommand resolves the config (file, environment, ``--set``, flags),
writes its artifacts under ``--out`` together with ``config.resolved`` and
``manifest.json``, and logs ``key=value`` lines to stderr.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or config,
3 missing file, 4 genetic measurement required, 5 unreadable container.
"""

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import matplotlib
import numpy as np

from . import __version__
from . import config as C
from . import container
from . import data as D
from . import eval as E
from . import pipeline as PL
from . import plotting
from .cal import CALModel, image_side, infer_cal, write_decision_log
from .checkpoint import load_model, save_model, summary, tree_leaf_stats
from .errors import ContainerError, MeasurementRequired, ProtoAbstainError, ValidationError
from .proto_core import GeneticSource, global_analysis, local_analysis, similarity_forward
from .protopnet import ProtoPNet, train_protopnet
from .prototree import ProtoTree, hard_predict, train_prototree

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_MEASUREMENT = 4
EXIT_CONTAINER = 5

log = logging.getLogger("protoabstain.cli")


def kv(event, **fields):
    parts = [f"event={event}"]
    for k, v in fields.items():
        if isinstance(v, float):
            v = f"{v:.6g}"
        v = str(v)
        parts.append(f"{k}={json.dumps(v) if (' ' in v or '=' in v) else v}")
    return " ".join(parts)


# --------------------------------------------------------------------------
# run bookkeeping
# --------------------------------------------------------------------------

class Run:
    def __init__(self, command, cfg, argv):
        self.command = command
        self.cfg = cfg
        self.argv = argv
        self.out = Path(cfg["output_dir"])
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = C.config_hash(cfg)
        self.artifacts = {}

    def path(self, name):
        return self.out / name

    def record(self, name):
        p = self.path(name)
        self.artifacts[name] = hashlib.sha256(p.read_bytes()).hexdigest()
        return p

    def write_json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return self.record(name)

    def finish(self):
        C.dump(self.cfg, self.path("config.resolved"))
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "config_hash": self.hash,
            "seed": self.cfg["seed"],
            "config": json.loads(C.canonical_json(self.cfg)),
            "versions": {
                "protoabstain": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "matplotlib": matplotlib.__version__,
            },
            "artifacts": dict(sorted(self.artifacts.items())),
        }
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info(kv("run_complete", command=self.command, out=self.out, config_hash=self.hash[:12]))


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _require(path, what):
    if path is None:
        raise ValidationError(f"missing required {what}")
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


PRIMARY_CHECKPOINTS = ("cal.ckpt", "alp.ckpt")


def _model_path(path):
    """Accept a checkpoint file or the run directory that holds it."""
    path = Path(path)
    if not path.is_dir():
        return str(path)
    for name in PRIMARY_CHECKPOINTS:
        if (path / name).is_file():
            return str(path / name)
    found = sorted(path.glob("*.ckpt"))
    if len(found) != 1:
        raise ValidationError(f"{path} holds {len(found)} checkpoints; pass one explicitly")
    return str(found[0])


def _dataset_path(path):
    if path and Path(path).is_dir():
        return str(Path(path) / "dataset.bin")
    return path


def _resolve_config(args, flag_values):
    file_values = {}
    if args.config:
        file_values = C.parse_file(_require(args.config, "config file"))
    else:
        # a model's run directory carries the config that produced it
        model = getattr(args, "model", None)
        if model and (Path(model).parent / "config.resolved").exists():
            file_values = C.parse_file(Path(model).parent / "config.resolved")
            file_values.pop("output_dir", None)
    overrides = C.parse_assignments(args.set)
    for key, value in flag_values.items():
        if value is not None:
            overrides[key] = value
    cfg = C.resolve(file_values, overrides=overrides)
    cfg["dataset"] = _dataset_path(cfg["dataset"])
    return cfg


def _splits(cfg):
    ds = PL.load_or_synth(cfg)
    spec, tr, va, te = PL.split_dataset(ds, cfg)
    return {"train": tr, "validation": va, "test": te, "spec": spec, "full": ds}


def _write_history(run, name, history):
    keys = sorted({k for h in history for k in h})
    with open(run.path(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for h in history:
            w.writerow([repr(h[k]) if isinstance(h.get(k), float) else h.get(k, "") for k in keys])
    run.record(name)


def _save_model(run, name, model, leaf_stats=None):
    save_model(run.path(name), model, leaf_stats)
    run.record(name)
    run.record(name + ".json")


def _report(run, reports, stem="report"):
    reports = reports if isinstance(reports, list) else [reports]
    run.write_json(stem + ".json", [r.to_dict() for r in reports] if len(reports) > 1 else reports[0].to_dict())
    E.write_reports_csv(run.path(stem + ".csv"), reports)
    run.record(stem + ".csv")
    for r in reports:
        log.info(kv("report", label=r.label or "", alpha=r.alpha if r.alpha is not None else "",
                    balanced_accuracy=r.balanced_accuracy, success_rate=r.success_rate,
                    abstention_error_rate=r.abstention_error_rate))


def _figure(run, name, fn, *a, **k):
    fn(*a, path=run.path(name), **k)
    run.record(name)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_synth(args, run):
    ds = D.synth_generate(C.synth_config(run.cfg))
    D.save_dataset(run.path("dataset.bin"), ds)
    run.record("dataset.bin")
    run.record("dataset.bin.json")
    log.info(kv("synth", n=len(ds), K=ds.n_classes, layout=run.cfg["synth.layout"]))


def _read_sequences(path):
    """FASTA (``>id [label]``) or tab-separated ``id<TAB>sequence[<TAB>label]``."""
    text = Path(path).read_text().splitlines()
    rows = []
    if any(line.startswith(">") for line in text):
        head, seq = None, []
        for line in text + [">"]:
            if line.startswith(">"):
                if head is not None:
                    fields = head.split()
                    rows.append((fields[0], "".join(seq).upper(), fields[1] if len(fields) > 1 else ""))
                head, seq = line[1:].strip(), []
            elif line.strip():
                seq.append(line.strip())
    else:
        for line in text:
            if line.strip():
                f = line.rstrip("\n").split("\t")
                rows.append((f[0], f[1].strip().upper(), f[2] if len(f) > 2 else ""))
    return rows


def cmd_encode(args, run):
    rows = _read_sequences(_require(args.input, "sequence file"))
    if not rows:
        raise ValidationError(f"{args.input}: no sequences found")
    out_rows, tensors = [], []
    for i, (sid, seq, label) in enumerate(rows):
        variants = [seq]
        for c in range(args.copies):
            variants.append(D.augment_genetic(seq, args.sub_rate, args.n_insert, args.n_delete,
                                              rng_seed=(run.cfg["seed"], i, c)))
        for c, v in enumerate(variants):
            tensors.append(D.encode_genetic(v, args.max_width))
            out_rows.append((sid, c, label, len(v)))
    onehot = np.stack(tensors).astype(np.uint8)
    container.write(run.path("onehot.bin"), container.ONEHOT_MAGIC,
                    {"max_width": args.max_width, "channels": D.BASES, "n": len(out_rows)}, {"onehot": onehot})
    run.record("onehot.bin")
    with open(run.path("sequences.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_id", "copy", "label", "length"])
        w.writerows(out_rows)
    run.record("sequences.csv")
    log.info(kv("encode", sequences=len(rows), tensors=len(out_rows), max_width=args.max_width))


def cmd_split(args, run):
    ds = PL.load_or_synth(run.cfg)
    spec = D.make_splits(ds.labels, run.cfg["split.ratios"], run.cfg["split.min_per_class"],
                         run.cfg["split.seed"])
    run.write_json("splits.json", spec.to_json())
    D.export_split_csv(run.path("splits.csv"), ds, spec)
    run.record("splits.csv")
    run.write_json("dataset_manifest.json", ds.manifest(spec))
    log.info(kv("split", train=len(spec.train), validation=len(spec.validation), test=len(spec.test),
                K=len(spec.class_map)))


def cmd_train_protopnet(args, run):
    sp = _splits(run.cfg)
    net = train_protopnet(sp["train"], args.modality, run.cfg["protopnet.protos_per_class"],
                          C.phase_schedule(run.cfg), C.protopnet_coefs(run.cfg))
    name = f"protopnet_{args.modality}.ckpt"
    _save_model(run, name, net)
    _write_history(run, "history.csv", net.history)
    _figure(run, "training_loss.png", plotting.training_curve, net.history)
    emb = sp["test"].image if args.modality == "image" else sp["test"].genetic
    _report(run, E.evaluate_protopnet(net, emb, sp["test"].labels, run.cfg["seed"], run.hash))


def cmd_train_prototree(args, run):
    sp = _splits(run.cfg)
    tree = train_prototree(sp["train"], args.modality, run.cfg["tree.depth"], C.tree_schedule(run.cfg),
                           C.tree_coefs(run.cfg, routing=0.0))
    s_img, s_gen = PL.tree_similarities(tree, sp["train"])
    _save_model(run, f"prototree_{args.modality}.ckpt", tree,
                tree_leaf_stats(tree, s_img, s_gen, sp["train"].labels))
    _write_history(run, "history.csv", tree.history)
    rep, _, _ = PL.evaluate_any_tree(tree, sp["test"], seed=run.cfg["seed"], config_hash=run.hash)
    _report(run, rep)


def _protopnet_pair(args, run, sp):
    if args.image_ckpt or args.genetic_ckpt:
        img = load_model(_require(args.image_ckpt, "--image-ckpt"), "protopnet")
        gen = load_model(_require(args.genetic_ckpt, "--genetic-ckpt"), "protopnet")
        if img.modality != "image" or gen.modality != "genetic":
            raise ValidationError("--image-ckpt/--genetic-ckpt modalities are swapped or wrong")
        return img, gen
    img, gen = PL.train_protopnet_pair(sp["train"], run.cfg)
    _save_model(run, "protopnet_image.ckpt", img)
    _save_model(run, "protopnet_genetic.ckpt", gen)
    return img, gen


def _cal_outputs(run, model, sp):
    test = PL.cal_inputs(model.image, model.genetic, sp["test"], with_genetic=False)
    rep, decisions = E.evaluate_cal(model, test["s_img"], PL.genetic_source(model, sp["test"]), test["labels"],
                                    test["ids"], seed=run.cfg["seed"], config_hash=run.hash)
    write_decision_log(run.path("decisions.csv"), decisions)
    run.record("decisions.csv")
    run.write_json("band.json", model.band.to_json())
    _report(run, rep)


def cmd_train_cal(args, run):
    sp = _splits(run.cfg)
    img, gen = _protopnet_pair(args, run, sp)
    model = PL.build_cal(img, gen, sp["train"], sp["validation"], run.cfg)
    if run.cfg["alpha"] is not None and run.cfg["alpha"] != model.band.alpha:
        _recalibrate(model, sp, run.cfg["alpha"], run.cfg)
    _save_model(run, "cal.ckpt", model)
    _write_history(run, "history.csv", model.history)
    _cal_outputs(run, model, sp)


def _recalibrate(model, sp, alpha, cfg):
    calib = PL.cal_inputs(model.image, model.genetic, sp["validation"])
    model.recalibrate(calib["s_img"], calib["s_gen"], alpha, cfg["cal.mode"], cfg["cal.bonferroni"])


def _tree_pair(args, run, sp):
    if args.image_tree or args.genetic_tree:
        t_img = load_model(_require(args.image_tree, "--image-tree"), "prototree")
        t_gen = load_model(_require(args.genetic_tree, "--genetic-tree"), "prototree")
        if t_img.kind != "image" or t_gen.kind != "genetic":
            raise ValidationError("--image-tree/--genetic-tree modalities are swapped or wrong")
        return t_img, t_gen
    t_img, t_gen = PL.train_tree_pair(sp["train"], run.cfg)
    for name, tree in (("prototree_image.ckpt", t_img), ("prototree_genetic.ckpt", t_gen)):
        s_img, s_gen = PL.tree_similarities(tree, sp["train"])
        _save_model(run, name, tree, tree_leaf_stats(tree, s_img, s_gen, sp["train"].labels))
    return t_img, t_gen


def _write_tree_decisions(run, name, ds, pred, leaves, used):
    with open(run.path(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "leaf", "genetic_used", "final_class", "true_class"])
        for i in range(len(pred)):
            w.writerow([int(ds.ids[i]), int(leaves[i]), int(used[i]), int(pred[i]), int(ds.labels[i])])
    run.record(name)


def cmd_train_alp(args, run):
    sp = _splits(run.cfg)
    t_img, t_gen = _tree_pair(args, run, sp)
    alp = PL.build_alp(t_img, t_gen, sp["train"], run.cfg)
    s_img, s_gen = PL.tree_similarities(alp, sp["train"])
    _save_model(run, "alp.ckpt", alp, tree_leaf_stats(alp, s_img, s_gen, sp["train"].labels))
    _write_history(run, "history.csv", alp.history)
    te = sp["test"]
    s_img_te = similarity_forward(te.image, alp.image.vectors).s
    pred, leaves, used, _ = hard_predict(alp, s_img_te, GeneticSource(alp.genetic, te.genetic))
    _write_tree_decisions(run, "decisions.csv", te, pred, leaves, used)
    rep, _, _ = PL.evaluate_any_tree(alp, te, t=alp.history[0]["threshold"], tau=run.cfg["alp.tau"],
                                     seed=run.cfg["seed"], config_hash=run.hash)
    _report(run, rep)


def _alpha_for(run, model):
    alpha = run.cfg["alpha"]
    return model.band.alpha if alpha is None else alpha


def cmd_calibrate(args, run):
    model = load_model(_require(args.model, "--model"), "cal")
    sp = _splits(run.cfg)
    alpha = run.cfg["alpha"] if run.cfg["alpha"] is not None else run.cfg["cal.alpha_train"]
    _recalibrate(model, sp, alpha, run.cfg)
    _save_model(run, "cal.ckpt", model)
    run.write_json("band.json", model.band.to_json())
    log.info(kv("calibrate", alpha=alpha, mode=model.band.mode, n_cal=model.band.n_cal,
                delta_max=float(np.max(model.band.delta))))


class _Withheld:
    """Genetic source stand-in for ``--no-genetic``: records who asked."""

    def __init__(self, n, n_protos):
        self.requested = np.zeros(n, dtype=bool)
        self.n_protos = n_protos

    def similarities(self, idx, audit=False):
        self.requested[np.asarray(idx, dtype=np.int64)] = True
        return np.zeros((len(idx), self.n_protos))


def _write_required(run, ids):
    with open(run.path("measurement_required.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id"])
        w.writerows([[int(i)] for i in ids])
    run.record("measurement_required.csv")


def cmd_infer(args, run):
    model = load_model(_require(args.model, "--model"), ("cal", "alp", "prototree", "protopnet"))
    sp = _splits(run.cfg)
    ds = sp[args.split]
    if isinstance(model, CALModel):
        if run.cfg["alpha"] is not None:
            _recalibrate(model, sp, run.cfg["alpha"], run.cfg)
        s_img = model.image.similarities(ds.image)
        if args.no_genetic:
            st = image_side(model, s_img, model.band.delta)
            need = np.flatnonzero(~st["abstain"])
            ok = np.flatnonzero(st["abstain"])
            decisions = infer_cal(model, s_img[ok], None, ids=ds.ids[ok], labels=ds.labels[ok]) if ok.size else []
            write_decision_log(run.path("decisions.csv"), decisions)
            run.record("decisions.csv")
            if need.size:
                _write_required(run, ds.ids[need])
                raise MeasurementRequired(f"{need.size} of {len(ds)} samples need a genetic measurement")
            return
        decisions = infer_cal(model, s_img, PL.genetic_source(model, ds), ids=ds.ids, labels=ds.labels)
        write_decision_log(run.path("decisions.csv"), decisions)
        run.record("decisions.csv")
        log.info(kv("infer", n=len(decisions), success_rate=E.success_rate(decisions)))
        return
    if isinstance(model, ProtoTree):
        s_img, s_gen = PL.tree_similarities(model, ds)
        if model.multimodal:
            src = _Withheld(len(ds), model.n_nodes) if args.no_genetic else GeneticSource(model.genetic, ds.genetic)
            pred, leaves, used, _ = hard_predict(model, s_img, src)
        else:
            if args.no_genetic and model.kind == "genetic":
                _write_required(run, ds.ids)
                raise MeasurementRequired("genetic tree needs a genetic measurement for every sample")
            pred, leaves, used, _ = hard_predict(model, s_img=s_img, s_gen=s_gen)
        if args.no_genetic and used.any():
            pred = np.where(used, -1, pred)
        _write_tree_decisions(run, "decisions.csv", ds, pred, leaves, used)
        if args.no_genetic and used.any():
            _write_required(run, ds.ids[used])
            raise MeasurementRequired(f"{int(used.sum())} of {len(ds)} samples need a genetic measurement")
        log.info(kv("infer", n=len(ds), success_rate=float(np.mean(~used))))
        return
    if args.no_genetic and model.modality == "genetic":
        _write_required(run, ds.ids)
        raise MeasurementRequired("genetic ProtoPNet needs a genetic measurement for every sample")
    emb = ds.image if model.modality == "image" else ds.genetic
    pred = model.predict(emb)
    with open(run.path("decisions.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "final_class", "true_class"])
        w.writerows([[int(a), int(b), int(c)] for a, b, c in zip(ds.ids, pred, ds.labels)])
    run.record("decisions.csv")


def cmd_evaluate(args, run):
    model = load_model(_require(args.model, "--model"), ("cal", "alp", "prototree", "protopnet"))
    sp = _splits(run.cfg)
    ds = sp[args.split]
    if isinstance(model, CALModel):
        if run.cfg["alpha"] is not None:
            _recalibrate(model, sp, run.cfg["alpha"], run.cfg)
        s_img = model.image.similarities(ds.image)
        rep, decisions = E.evaluate_cal(model, s_img, PL.genetic_source(model, ds), ds.labels, ds.ids,
                                        seed=run.cfg["seed"], config_hash=run.hash)
        write_decision_log(run.path("decisions.csv"), decisions)
        run.record("decisions.csv")
    elif isinstance(model, ProtoTree):
        rep, _, _ = PL.evaluate_any_tree(model, ds, seed=run.cfg["seed"], config_hash=run.hash)
    else:
        emb = ds.image if model.modality == "image" else ds.genetic
        rep = E.evaluate_protopnet(model, emb, ds.labels, run.cfg["seed"], run.hash)
    _report(run, rep)


def cmd_sweep_alpha(args, run):
    model = load_model(_require(args.model, "--model"), "cal")
    sp = _splits(run.cfg)
    calib = PL.cal_inputs(model.image, model.genetic, sp["validation"])
    test = PL.cal_inputs(model.image, model.genetic, sp["test"], with_genetic=False)
    alphas = list(run.cfg["alphas"])
    mode, bonf = run.cfg["cal.mode"], run.cfg["cal.bonferroni"]

    def one(alpha):
        reps, bands = E.sweep_alpha(model, calib, test, [alpha], lambda: PL.genetic_source(model, sp["test"]),
                                    mode, bonf, run.cfg["seed"], run.hash)
        return reps[0], bands[0]

    if run.cfg["jobs"] > 1:
        with ThreadPoolExecutor(run.cfg["jobs"]) as pool:
            results = list(pool.map(one, alphas))
    else:
        results = [one(a) for a in alphas]
    reports = [r for r, _ in results]
    succ = [r.success_rate for r in sorted(reports, key=lambda r: r.alpha)]
    if any(b < a for a, b in zip(succ, succ[1:])):
        raise RuntimeError("success rate decreased with alpha")
    E.write_reports_csv(run.path("sweep.csv"), reports)
    run.record("sweep.csv")
    run.write_json("bands.json", [b.to_json() for _, b in results])
    E.write_series(run.path("accuracy_vs_success.csv"), "success_rate", "balanced_accuracy",
                   [r.success_rate for r in reports], [r.balanced_accuracy for r in reports])
    run.record("accuracy_vs_success.csv")
    E.write_series(run.path("error_vs_alpha.csv"), "alpha", "abstention_error_rate",
                   [r.alpha for r in reports], [r.abstention_error_rate for r in reports])
    run.record("error_vs_alpha.csv")
    _figure(run, "accuracy_vs_success.png", plotting.accuracy_vs_success, reports)
    _figure(run, "error_vs_alpha.png", plotting.error_vs_alpha, reports)
    for r in reports:
        log.info(kv("sweep_point", alpha=r.alpha, balanced_accuracy=r.balanced_accuracy,
                    success_rate=r.success_rate, abstention_error_rate=r.abstention_error_rate))


def cmd_ablate(args, run):
    kind = run.cfg["ablate.kind"]
    if kind == "cal":
        alpha = run.cfg["alpha"] if run.cfg["alpha"] is not None else 0.05
        grid, cell = E.CAL_ABLATION, PL.cal_ablation_cell(run.cfg, alpha)
    else:
        grid, cell = E.ALP_ABLATION, PL.alp_ablation_cell(run.cfg)
    reports = E.ablation_run(grid, cell, run.cfg["ablate.seeds"])
    E.write_reports_csv(run.path("ablation.csv"), reports)
    run.record("ablation.csv")
    table = E.ablation_table(reports)
    with open(run.path("ablation_table.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["", "balanced_accuracy", "success_rate"])
        w.writerows([[label, repr(ba), repr(sr)] for label, ba, sr in table])
    run.record("ablation_table.csv")
    _figure(run, "ablation.png", plotting.ablation_bars, table, title=f"{kind.upper()} ablation")
    for label, ba, sr in table:
        log.info(kv("ablation_cell", label=label, balanced_accuracy=ba, success_rate=sr))


def _prototype_sets(model):
    if isinstance(model, CALModel):
        return {"image": model.image.prototypes, "genetic": model.genetic.prototypes}
    if isinstance(model, ProtoPNet):
        return {model.modality: model.prototypes}
    return {"image": model.image, "genetic": model.genetic}


def cmd_analyze_local(args, run):
    model = load_model(_require(args.model, "--model"))
    sp = _splits(run.cfg)
    ds = sp["full"]
    hit = np.flatnonzero(ds.ids == args.sample_id)
    if hit.size == 0:
        raise ValidationError(f"sample id {args.sample_id} not in dataset")
    i = int(hit[0])
    emb = {"image": ds.image[i], "genetic": None if ds.genetic is None else ds.genetic[i]}
    rows = local_analysis(_prototype_sets(model), emb, run.cfg["analysis.top_n"])
    _write_analysis(run, "local.csv", rows, ["modality", "prototype", "similarity", "position"])
    for r in rows:
        log.info(kv("local", sample_id=args.sample_id, modality=r["modality"], prototype=r["prototype"],
                    similarity=r["similarity"]))


def cmd_analyze_global(args, run):
    model = load_model(_require(args.model, "--model"))
    sets = {k: v for k, v in _prototype_sets(model).items() if v is not None}
    modality = args.modality or next(iter(sets))
    if modality not in sets:
        raise ValidationError(f"model has no {modality} prototypes")
    protos = sets[modality]
    if not 0 <= args.prototype < len(protos):
        raise ValidationError(f"prototype index {args.prototype} outside [0, {len(protos)})")
    sp = _splits(run.cfg)
    ds = sp[args.split]
    emb = ds.image if modality == "image" else ds.genetic
    rows = global_analysis(protos.vectors[args.prototype], emb, ds.ids, run.cfg["analysis.top_n"])
    _write_analysis(run, "global.csv", rows, ["sample_id", "index", "similarity", "position"])
    for r in rows:
        log.info(kv("global", prototype=args.prototype, sample_id=r["sample_id"], similarity=r["similarity"]))


def _write_analysis(run, name, rows, cols):
    with open(run.path(name), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else
                        ("x".join(map(str, r[c])) if isinstance(r[c], tuple) else r[c]) for c in cols])
    run.record(name)


def cmd_inspect(args, run):
    path = _require(args.model, "--model")
    model = load_model(path)
    info = summary(model)
    run.write_json("inspect.json", info)
    kind = info["kind"]
    lines = [f"kind={kind}"]
    if kind in ("prototree", "alp"):
        lines.append(f"depth={info['depth']} census_image={info['census']['image']} "
                     f"census_genetic={info['census']['genetic']}")
    elif kind == "cal":
        s = info["sigma_m"]
        lines.append(f"sigma_m_min={s['min']:.4f} sigma_m_median={s['median']:.4f} sigma_m_max={s['max']:.4f}")
        hist, edges = np.histogram(s["values"], bins=5, range=(0.0, 1.0))
        lines.append("sigma_m_hist=" + ",".join(f"[{a:.1f},{b:.1f}):{c}" for a, b, c in zip(edges, edges[1:], hist)))
        if info["band"] is not None:
            lines.append(f"band_alpha={info['band']['alpha']} band_mode={info['band']['mode']}")
    else:
        lines.append(f"modality={info['modality']} P={info['P']} K={info['K']} D={info['D']}")
    print("\n".join(lines))


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth,
    "encode": cmd_encode,
    "split": cmd_split,
    "train-protopnet": cmd_train_protopnet,
    "train-prototree": cmd_train_prototree,
    "train-cal": cmd_train_cal,
    "train-alp": cmd_train_alp,
    "calibrate": cmd_calibrate,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "sweep-alpha": cmd_sweep_alpha,
    "ablate": cmd_ablate,
    "analyze-local": cmd_analyze_local,
    "analyze-global": cmd_analyze_global,
    "inspect": cmd_inspect,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--out", help="run directory (config key output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset", help="dataset container; default is synthetic data from synth.*")
    common.add_argument("--jobs", type=int)
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="protoabstain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_)

    add("synth", "generate a synthetic two-modality dataset")
    p = add("encode", "one-hot encode (and optionally augment) DNA sequences")
    p.add_argument("--input", required=True, help="FASTA or id<TAB>sequence[<TAB>label] file")
    p.add_argument("--max-width", type=int, default=D.MAX_WIDTH)
    p.add_argument("--copies", type=int, default=0, help="augmented copies per sequence")
    p.add_argument("--sub-rate", type=float, default=0.0)
    p.add_argument("--n-insert", type=int, default=0)
    p.add_argument("--n-delete", type=int, default=0)
    add("split", "stratified train/validation/test split")
    for name in ("train-protopnet", "train-prototree"):
        p = add(name, f"{name.split('-')[1]} on one modality")
        p.add_argument("--modality", required=True, choices=["image", "genetic"])
        if name == "train-prototree":
            p.add_argument("--depth", type=int)
    p = add("train-cal", "train the conformal abstention head on two ProtoPNets")
    p.add_argument("--image-ckpt")
    p.add_argument("--genetic-ckpt")
    p.add_argument("--alpha", type=float, help="training confidence parameter (cal.alpha_train)")
    p = add("train-alp", "train the modality-routed multimodal tree")
    p.add_argument("--image-tree")
    p.add_argument("--genetic-tree")
    p.add_argument("--t", type=float, help="leaf accuracy threshold")
    p.add_argument("--tau", type=float)
    p.add_argument("--depth", type=int)
    p = add("calibrate", "recalibrate a CAL checkpoint at a new alpha")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha", type=float)
    for name, help_ in (("infer", "decisions for one split"), ("evaluate", "metrics report for one split")):
        p = add(name, help_)
        p.add_argument("--model", required=True)
        p.add_argument("--alpha", type=float)
        p.add_argument("--split", default="test", choices=["train", "validation", "test"])
        if name == "infer":
            p.add_argument("--no-genetic", action="store_true", help="fail if any sample needs genetics")
    p = add("sweep-alpha", "accuracy, success and abstention error over an alpha grid")
    p.add_argument("--model", required=True)
    p.add_argument("--alphas", help="comma-separated alphas")
    p = add("ablate", "2x2 loss ablation over several seeds")
    p.add_argument("--kind", choices=["cal", "alp"])
    p.add_argument("--alpha", type=float)
    p.add_argument("--seeds", help="comma-separated seeds")
    p = add("analyze-local", "prototypes most similar to one sample")
    p.add_argument("--model", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--top-n", type=int)
    p = add("analyze-global", "samples most similar to one prototype")
    p.add_argument("--model", required=True)
    p.add_argument("--prototype", type=int, required=True)
    p.add_argument("--modality", choices=["image", "genetic"])
    p.add_argument("--split", default="train", choices=["train", "validation", "test"])
    p.add_argument("--top-n", type=int)
    p = add("inspect", "summarize a checkpoint")
    p.add_argument("--model", required=True)
    return parser


FLAG_KEYS = {
    "out": "output_dir",
    "seed": "seed",
    "dataset": "dataset",
    "jobs": "jobs",
    "depth": "tree.depth",
    "t": "alp.t",
    "tau": "alp.tau",
    "alphas": "alphas",
    "kind": "ablate.kind",
    "seeds": "ablate.seeds",
    "top_n": "analysis.top_n",
}


def _flag_values(args):
    out = {key: getattr(args, attr, None) for attr, key in FLAG_KEYS.items()}
    if getattr(args, "alpha", None) is not None:
        out["cal.alpha_train" if args.command == "train-cal" else "alpha"] = args.alpha
    return {k: (str(v) if v is not None else None) for k, v in out.items()}


def _setup_logging(level):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s logger=%(name)s %(message)s"))
    root = logging.getLogger("protoabstain")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        if getattr(args, "model", None):
            args.model = _model_path(args.model)
        cfg = _resolve_config(args, _flag_values(args))
        run = Run(args.command, cfg, argv)
        log.info(kv("start", command=args.command, config_hash=run.hash[:12], seed=cfg["seed"]))
        try:
            COMMANDS[args.command](args, run)
        finally:
            run.finish()
    except MeasurementRequired as exc:
        log.error(kv("measurement_required", message=str(exc)))
        return EXIT_MEASUREMENT
    except ValidationError as exc:
        log.error(kv("invalid_input", message=str(exc)))
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        log.error(kv("missing_file", message=str(exc)))
        return EXIT_MISSING
    except ContainerError as exc:
        log.error(kv("bad_container", code=exc.code, message=str(exc)))
        return EXIT_CONTAINER
    except (IsADirectoryError, NotADirectoryError) as exc:
        log.error(kv("missing_file", message=str(exc)))
        return EXIT_MISSING
    except OSError as exc:
        log.error(kv("io_error", message=str(exc)))
        return EXIT_RUNTIME
    except (ProtoAbstainError, RuntimeError, ArithmeticError) as exc:
        log.error(kv("runtime_failure", error=type(exc).__name__, message=str(exc)))
        return EXIT_RUNTIME
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
