"""The ten acceptance criteria, one test each.

Every test records a ``criterion N: PASS|FAIL`` line; the lines are printed
in the pytest terminal summary (see conftest.py) and also to stdout, so
``pytest tests/test_acceptance.py -s`` shows them inline.
"""

import math
import time

import numpy as np
import pytest

from protoabstain import cal as CL
from protoabstain import cli
from protoabstain import config as C
from protoabstain import eval as E
from protoabstain import pipeline as PL
from protoabstain import prototree as T
from protoabstain import proto_core as PC
from protoabstain.functional import sigmoid
from protoabstain.gradcheck import gradient_check
from protoabstain.protopnet import LossCoefs, ProtoPNet, protopnet_gradient_check
from protoabstain.proto_core import PrototypeSet

RESULTS = []


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def resolve(**overrides):
    return C.resolve({}, env={}, overrides={k: str(v) for k, v in overrides.items()})


# --------------------------------------------------------------------------
# shared K=16 CAL setup: 200 calibration and 2000 test samples
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cal16():
    t0 = time.perf_counter()
    cfg = resolve(**{"synth.K": 16, "synth.n_per_class": 240, "split.ratios": "0.3,0.1,0.6"})
    ds = PL.load_or_synth(cfg)
    _, tr, va, te = PL.split_dataset(ds, cfg)
    pick = np.random.default_rng(0)
    va = va.subset(np.sort(pick.permutation(len(va))[:200]))
    te = te.subset(np.sort(pick.permutation(len(te))[:2000]))
    img, gen = PL.train_protopnet_pair(tr, cfg)
    model = PL.build_cal(img, gen, tr, va, cfg)
    calib = PL.cal_inputs(img, gen, va)
    test = PL.cal_inputs(img, gen, te)
    return {"cfg": cfg, "model": model, "calib": calib, "test": test, "te": te, "img": img, "gen": gen,
            "setup_seconds": time.perf_counter() - t0}


def test_criterion_1_conformal_coverage(cal16):
    t0 = time.perf_counter()
    model, calib, test = cal16["model"], cal16["calib"], cal16["test"]
    n_cal, n_test = len(calib["labels"]), len(test["labels"])
    assert (n_cal, n_test) == (200, 2000)
    res_cal = model.residuals(calib["s_img"], calib["s_gen"])
    res_test = np.abs(model.residuals(test["s_img"], test["s_gen"]))
    ok, parts = True, []
    for alpha in (0.05, 0.1, 0.3):
        # coverage conditional on the calibration draw varies at the n_cal scale
        sigma = math.sqrt(alpha * (1 - alpha) * (1 / n_cal + 1 / n_test))
        bound = 1 - alpha - 3 * sigma
        per_logit = (res_test <= CL.calibrate(res_cal, alpha, "per_logit").delta).mean(axis=0)
        simultaneous = (res_test <= CL.calibrate(res_cal, alpha, "l_infinity").delta).all(axis=1).mean()
        ok &= bool(per_logit.min() >= bound and simultaneous >= bound)
        parts.append(f"a={alpha}: min per-logit {per_logit.min():.3f}, L-inf {simultaneous:.3f}, bound {bound:.3f}")
    seconds = cal16["setup_seconds"] + time.perf_counter() - t0
    ok &= seconds < 60
    record(1, ok, "; ".join(parts) + f"; {seconds:.1f}s")


def test_criterion_2_abstention_soundness(cal16):
    model, calib, test, te = cal16["model"], cal16["calib"], cal16["test"], cal16["te"]
    alphas = [0.01, 0.05, 0.1, 0.3, 0.5, 0.9]
    reports, _ = E.sweep_alpha(model, calib, test, alphas, lambda: PL.genetic_source(model, te))
    ok, curve, below = True, [], 0
    for r in reports:
        sigma = E.binomial_sigma(r.alpha, r.n_abstained)
        ok &= r.abstention_error_rate <= r.alpha + 3 * sigma
        below += r.abstention_error_rate < r.alpha
        curve.append(f"{r.alpha}:{r.abstention_error_rate:.3f}")
    ok &= below > len(alphas) / 2
    record(2, ok, f"error vs alpha {' '.join(curve)}; {below}/{len(alphas)} below the diagonal")


def test_criterion_3_boundary_rows(cal16):
    model, calib, test, te = cal16["model"], cal16["calib"], cal16["test"], cal16["te"]
    reps, _ = E.sweep_alpha(model, calib, test, [0.0], lambda: PL.genetic_source(model, te))
    img_rep = E.evaluate_protopnet(cal16["img"], te.image, te.labels)
    gen_rep = E.evaluate_protopnet(cal16["gen"], te.genetic, te.labels)
    ok = reps[0].success_rate == 0.0 and img_rep.success_rate == 1.0 and gen_rep.success_rate == 0.0
    record(3, ok, f"CAL a=0 {reps[0].success_rate:.0%}, image-only {img_rep.success_rate:.0%}, "
                  f"genetic-only {gen_rep.success_rate:.0%}")


def test_criterion_4_monotonicity(cal16):
    model, calib, test, te = cal16["model"], cal16["calib"], cal16["test"], cal16["te"]
    alphas = list(C.SCHEMA["alphas"].default)
    assert len(alphas) == 10
    reports, bands = E.sweep_alpha(model, calib, test, alphas, lambda: PL.genetic_source(model, te))
    deltas = np.stack([b.delta for b in bands])
    succ = np.array([r.success_rate for r in reports])
    with np.errstate(invalid="ignore"):
        delta_ok = bool(np.all((deltas[1:] <= deltas[:-1])))
    ok = delta_ok and bool(np.all(np.diff(succ) >= 0))
    record(4, ok, "success " + " ".join(f"{a}:{s:.3f}" for a, s in zip(alphas, succ)))


# --------------------------------------------------------------------------
# ablations and the tree trade-off
# --------------------------------------------------------------------------

def test_criterion_5_directional_ablations():
    seeds = (0, 1, 2)
    cal_cfg = resolve(**{"synth.K": 16, "synth.n_per_class": 100, "synth.image_separability": 0.7})
    cal_table = {row[0]: row for row in E.ablation_table(
        E.ablation_run(E.CAL_ABLATION, PL.cal_ablation_cell(cal_cfg, 0.05), seeds))}
    alp_cfg = resolve(**{"synth.n_per_class": 60, "synth.layout": "parts", "synth.image_separability": 6,
                         "synth.genetic_separability": 6, "alp.t": 0.8, "alp.tau": 1.0})
    alp_table = {row[0]: row for row in E.ablation_table(
        E.ablation_run(E.ALP_ABLATION, PL.alp_ablation_cell(alp_cfg), seeds))}
    cal_both, cal_none = cal_table["Mar. + Mod. Loss"][2], cal_table["Neither Loss"][2]
    alp_both, alp_none = alp_table["Var. + Rout. Loss"][2], alp_table["Neither Loss"][2]
    ok = cal_both > cal_none and alp_both >= alp_none
    record(5, ok, f"CAL success both {cal_both:.4f} vs neither {cal_none:.4f}; "
                  f"ALP success both {alp_both:.4f} vs neither {alp_none:.4f}")


def test_criterion_6_alp_tradeoff():
    t0 = time.perf_counter()
    cfg = resolve(**{"synth.n_per_class": 60, "synth.layout": "parts", "synth.image_separability": 6,
                     "synth.genetic_separability": 6, "alp.t": 0.8})
    ds = PL.load_or_synth(cfg)
    _, tr, _, te = PL.split_dataset(ds, cfg)
    t_img, t_gen = PL.train_tree_pair(tr, cfg)
    alp = PL.build_alp(t_img, t_gen, tr, cfg)
    r_img, _, _ = PL.evaluate_any_tree(t_img, te)
    r_gen, _, _ = PL.evaluate_any_tree(t_gen, te)
    r_alp, _, _ = PL.evaluate_any_tree(alp, te)
    seconds = time.perf_counter() - t0
    ok = (r_alp.balanced_accuracy >= r_img.balanced_accuracy + 0.05 and r_alp.success_rate >= 0.5
          and r_alp.balanced_accuracy <= r_gen.balanced_accuracy and seconds < 300)
    record(6, ok, f"BA image {r_img.balanced_accuracy:.3f}, ALP {r_alp.balanced_accuracy:.3f}, "
                  f"genetic {r_gen.balanced_accuracy:.3f}; ALP success {r_alp.success_rate:.3f}; {seconds:.1f}s")


# --------------------------------------------------------------------------
# identities, gradients and oracles
# --------------------------------------------------------------------------

def test_criterion_7_traversal_identities():
    rng = np.random.default_rng(7)
    worst_sum, mismatches = 0.0, 0
    for _ in range(1000):
        depth = int(rng.integers(1, 6))
        P = 2 ** depth - 1
        s = rng.random(P)
        leaves = rng.normal(size=(P + 1, 3))
        worst_sum = max(worst_sum, abs(T.leaf_weights(s).sum() - 1.0))
        polar = (s > 0.5).astype(np.float64)
        leaf, _ = T.hard_route(polar[None])
        leaf_h, _ = T.hard_route(s[None])
        mismatches += int(not np.array_equal(T.soft_traverse(leaves, polar), leaves[leaf[0]]))
        mismatches += int(leaf[0] != leaf_h[0])
    ok = worst_sum <= 1e-12 and mismatches == 0
    record(7, ok, f"max |sum w - 1| = {worst_sum:.1e}; polarized soft/hard mismatches {mismatches}")


def _grad_suite():
    rng = np.random.default_rng(8)
    K, P, D, n = 3, 6, 4, 10
    out = {}

    img = ProtoPNet("image", PrototypeSet(rng.normal(size=(P, D)), np.arange(P) % K), rng.normal(size=(K, P)))
    gen = ProtoPNet("genetic", PrototypeSet(rng.normal(size=(P, D)), np.arange(P) % K), rng.normal(size=(K, P)))
    model = CL.CALModel.from_protopnets(img, gen)
    model.m = rng.normal(size=K)
    model.predictor = model.predictor + 0.3 * rng.normal(size=model.predictor.shape)
    s_img, s_gen = rng.random((n, P)), rng.random((n, P))
    labels = rng.integers(0, K, n)
    delta = np.full(K, 0.1)
    for name, lams in (("ce_mix", (0, 0, 0)), ("modality", (1, 0, 0)), ("margin", (0, 1, 0)),
                       ("predictor", (0, 0, 1)), ("cal_total", (0.5, 0.5, 0.5))):
        out[name] = CL.cal_gradient_check(model, s_img, s_gen, labels, delta, lams).max_error

    def direct(fn, x):
        _, g = fn(x)
        return gradient_check(lambda: float(np.sum(fn(x)[0])), {"x": x}, {"x": g}).max_error

    out["margin_direct"] = direct(lambda y: CL.margin_loss(y, np.array([0, 2, 1])), rng.normal(size=(3, 4)))
    out["modality_direct"] = direct(CL.modality_loss, rng.normal(size=5))
    y_gen = rng.normal(size=(4, 3))
    out["predictor_direct"] = direct(lambda y: CL.predictor_loss(y_gen, y), rng.normal(size=(4, 3)))
    out["orthogonality"] = direct(PC.orthogonality_loss, rng.normal(size=(4, 5)))
    out["variability"] = direct(PC.variability_loss, rng.random((3, 4, 5)))

    emb = rng.normal(size=(n, D, 2, 2))
    for name, coefs in (("cluster_separation", LossCoefs(cluster=1.0, separation=1.0, l1=0.0)),
                        ("protopnet_total", LossCoefs())):
        out[name] = protopnet_gradient_check(ProtoPNet("image", PrototypeSet(rng.normal(size=(P, D)), np.arange(P) % K),
                                                       rng.normal(size=(K, P))),
                                             emb, labels, coefs).max_error

    depth = 2
    leaves = rng.dirichlet(np.ones(K), size=2 ** depth)
    s_tree = rng.uniform(0.05, 0.95, size=(n, 2 ** depth - 1))
    out["ce_soft_traverse"] = direct(lambda s: (T.tree_nll(leaves, s, labels)[0], T.tree_nll(leaves, s, labels)[1]),
                                     s_tree)
    zero = dict(cluster=0.0, orthogonality=0.0, variability=0.0, weight_decay=0.0, routing=0.0)
    tree = T.ProtoTree(depth, leaves, PrototypeSet(rng.normal(size=(3, D))))
    emb_g = rng.normal(size=(n, D, 1, 3))
    for name, change in (("tree_nll_prototypes", {}), ("tree_variability", {"variability": 1.0}),
                         ("tree_cluster", {"cluster": 1.0}), ("tree_orthogonality", {"orthogonality": 1.0}),
                         ("tree_total", {"cluster": 0.1, "orthogonality": 1e-3, "variability": 0.1,
                                         "weight_decay": 1e-4})):
        out[name] = T.unimodal_gradient_check(tree, emb_g, labels, T.TreeLossCoefs(**dict(zero, **change))).max_error
    alp = T.ProtoTree(depth, leaves, PrototypeSet(rng.normal(size=(3, D))), PrototypeSet(rng.normal(size=(3, D))),
                      rng.normal(size=3))
    out["alp_routing"] = T.alp_gradient_check(alp, s_tree[:, :3], emb_g, labels,
                                              T.TreeLossCoefs(**dict(zero, routing=1.0))).max_error
    out["alp_total"] = T.alp_gradient_check(alp, s_tree[:, :3], emb_g, labels, T.TreeLossCoefs()).max_error
    return out


def test_criterion_8_gradient_suite():
    errors = _grad_suite()
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values())
    record(8, ok, f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.1e}")


def _cos_brute(z, p):
    zn, pn = math.sqrt(sum(v * v for v in z)), math.sqrt(sum(v * v for v in p))
    c = sum(a * b for a, b in zip(z, p)) / (zn * pn)
    return (1 + max(-1.0, min(1.0, c))) / 2


def test_criterion_9_oracle_equivalences():
    rng = np.random.default_rng(9)
    worst = {"cosine": 0.0, "max_pool": 0.0, "projection": 0.0, "quantile": 0.0, "worst_case": 0.0}
    trials = 100
    for _ in range(trials):
        d, h, w, p = (int(x) for x in rng.integers(1, 5, size=4))
        emb = rng.normal(size=(d, h, w))
        vecs = rng.normal(size=(p, d))
        sim = PC.similarity_map(emb, vecs)
        brute = np.array([[[_cos_brute(emb[:, a, b].tolist(), vecs[j].tolist()) for b in range(w)]
                           for a in range(h)] for j in range(p)])
        worst["cosine"] = max(worst["cosine"], float(np.abs(sim - brute).max()))

        s, pos = PC.max_pool(brute)
        for j in range(p):
            flat = [(brute[j, a, b], -(a * w + b)) for a in range(h) for b in range(w)]
            best_val, neg_idx = max(flat)
            idx = -neg_idx
            worst["max_pool"] = max(worst["max_pool"], abs(s[j] - best_val),
                                    float(pos[j, 0] != idx // w or pos[j, 1] != idx % w))

        n = int(rng.integers(1, 5))
        batch = rng.normal(size=(n, d, h, w))
        got = PC.project_prototypes(PrototypeSet(vecs), batch, np.arange(n))
        for j in range(p):
            cands = [(_cos_brute(batch[i, :, a, b].tolist(), vecs[j].tolist()), -(i * h * w + a * w + b), i, a, b)
                     for i in range(n) for a in range(h) for b in range(w)]
            _, _, i, a, b = max(cands)
            worst["projection"] = max(worst["projection"], float(np.abs(got.vectors[j] - batch[i, :, a, b]).max()),
                                      float(tuple(got.provenance[j]) != (i, a, b)))

        n_cal, K = int(rng.integers(1, 40)), int(rng.integers(1, 6))
        res = rng.normal(size=(n_cal, K))
        alpha = float(rng.choice([0.0, 0.01, 0.05, 0.1, 0.3, 0.5, 0.9, rng.random() * 0.99]))
        rank = math.ceil(round((n_cal + 1) * (1 - alpha), 9))
        for mode, scores in (("per_logit", np.abs(res)), ("l_infinity", np.abs(res).max(axis=1, keepdims=True))):
            delta = CL.calibrate(res, alpha, mode).delta
            for j in range(K):
                col = sorted(scores[:, min(j, scores.shape[1] - 1)].tolist())
                want = math.inf if rank > n_cal else col[max(rank, 1) - 1]
                gap = 0.0 if delta[j] == want else abs(delta[j] - want)
                worst["quantile"] = max(worst["quantile"], gap)

        y_img, y_hat = rng.normal(size=K), rng.normal(size=K)
        dlt, m = rng.random(K), rng.normal(size=K)
        k = int(rng.integers(K))
        got_wc = CL.worst_case_logits(y_img, y_hat, dlt, m, k)[0]
        for j in range(K):
            sg = 1 / (1 + math.exp(-m[j]))
            want = sg * y_img[j] + (1 - sg) * y_hat[j] + (-1 if j == k else 1) * (1 - sg) * dlt[j]
            worst["worst_case"] = max(worst["worst_case"], abs(got_wc[j] - want))
    ok = all(v <= 1e-10 for v in worst.values())
    record(9, ok, f"{trials} instances each; max deviation " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# --------------------------------------------------------------------------
# determinism through the CLI
# --------------------------------------------------------------------------

SMALL = """\
synth.K = 4
synth.n_per_class = 40
synth.confusable_pairs = 0-1
protopnet.pre_project_epochs = 3
protopnet.epochs_per_phase = 2
protopnet.last_layer_epochs = 2
cal.epochs = 4
tree.depth = 3
tree.epochs = 4
alp.t = 0.8
"""


def test_criterion_10_determinism(tmp_path):
    (tmp_path / "run.cfg").write_text(SMALL)
    files = {"train-cal": ("cal.ckpt", "decisions.csv", "protopnet_image.ckpt", "protopnet_genetic.ckpt"),
             "train-alp": ("alp.ckpt", "decisions.csv", "prototree_image.ckpt", "prototree_genetic.ckpt")}
    ok, compared = True, 0
    for cmd, names in files.items():
        outs = []
        for rep in ("a", "b"):
            out = tmp_path / f"{cmd}_{rep}"
            code = cli.main([cmd, "--config", str(tmp_path / "run.cfg"), "--seed", "3", "--out", str(out),
                             "--log-level", "WARNING"])
            ok &= code == 0
            outs.append(out)
        for name in names:
            ok &= (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            compared += 1
    record(10, ok, f"{compared} artifact pairs byte-identical across repeated train-cal/train-alp runs")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
