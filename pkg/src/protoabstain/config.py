"""Experiment configuration: key=value files, environment overrides, flags.

Keys are ``group.field`` (``cal.lambda_margin``) or bare top-level names
(``seed``). Resolution order, later wins: schema defaults, config file,
environment (``PROTOABSTAIN_CAL__LAMBDA_MARGIN=0.2``), ``--set key=value``
flags, dedicated CLI flags. Everything is validated against :data:`SCHEMA`
before any work starts.
"""

import dataclasses
import hashlib
import json
import os

from .cal import PARAMS, CALConfig
from .data import SynthConfig
from .errors import ValidationError
from .protopnet import LossCoefs, PhaseSchedule
from .prototree import TreeLossCoefs, TreeSchedule

ENV_PREFIX = "PROTOABSTAIN_"


def _bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _grid(text):
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    parts = str(text).lower().replace("x", ",").split(",")
    out = tuple(int(p) for p in parts)
    if len(out) != 2:
        raise ValueError("grid must be HxW")
    return out


def _pairs(text):
    if isinstance(text, (list, tuple)):
        return tuple(tuple(int(v) for v in p) for p in text)
    text = str(text).strip()
    if not text:
        return ()
    return tuple(tuple(int(v) for v in p.split("-")) for p in text.split(","))


def _names(text):
    if isinstance(text, (list, tuple)):
        return tuple(str(v) for v in text)
    return tuple(v.strip() for v in str(text).split(",") if v.strip())


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "auto", "none"):
        return None
    return float(text)


def _choice(*options):
    def parse(text):
        text = str(text).strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return parse


@dataclasses.dataclass(frozen=True)
class Field:
    parse: object
    default: object
    help: str = ""


_SPECIAL = {
    "synth.image_grid": _grid,
    "synth.confusable_pairs": _pairs,
    "synth.layout": _choice("class", "parts"),
    "cal.trainable": _names,
    "cal.mode": _choice("per_logit", "l_infinity"),
    "tree.init": _choice("greedy", "random"),
}


def _from_dataclass(group, cls, skip=("seed",)):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        key = f"{group}.{f.name}"
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        parse = _SPECIAL.get(key)
        if parse is None:
            parse = {bool: _bool, int: int, float: float, str: str}.get(type(default))
        if parse is None:
            raise TypeError(f"no parser for {key}")
        out[key] = Field(parse, default)
    return out


SCHEMA = {
    "seed": Field(int, 0, "training seed shared by every stage"),
    "dataset": Field(str, "", "dataset container path; empty means generate from synth.*"),
    "output_dir": Field(str, "runs/latest", "run directory"),
    "split.ratios": Field(_floats, (0.6, 0.2, 0.2), "train,validation,test fractions"),
    "split.min_per_class": Field(int, 10, "classes with fewer samples are dropped"),
    "split.seed": Field(int, 0, "split shuffling seed"),
    "protopnet.protos_per_class": Field(int, 2),
    "cal.m_init": Field(float, 0.0),
    "cal.scalar_m": Field(_bool, False),
    "cal.k_rule": Field(_choice("mixed", "image"), "mixed"),
    "tree.depth": Field(int, 5),
    "alp.t": Field(_opt_float, None, "leaf accuracy threshold; auto = genetic tree balanced accuracy"),
    "alp.tau": Field(float, 5.0),
    "alpha": Field(_opt_float, None, "evaluation alpha; auto = the checkpoint's band"),
    "alphas": Field(_floats, (0.0, 0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9, 0.99)),
    "ablate.seeds": Field(_ints, (0, 1, 2)),
    "ablate.kind": Field(_choice("cal", "alp"), "cal"),
    "analysis.top_n": Field(int, 5),
    "jobs": Field(int, 1),
}
SCHEMA.update(_from_dataclass("synth", SynthConfig, skip=()))
SCHEMA.update(_from_dataclass("protopnet", PhaseSchedule))
SCHEMA.update(_from_dataclass("protopnet_loss", LossCoefs))
SCHEMA.update(_from_dataclass("cal", CALConfig))
SCHEMA.update(_from_dataclass("tree", TreeSchedule))
SCHEMA.update(_from_dataclass("tree_loss", TreeLossCoefs))


def env_name(key):
    return ENV_PREFIX + key.upper().replace(".", "__")


def parse_file(path):
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path)
    except FileNotFoundError:
        raise
    with fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, value = (p.strip() for p in line.split("=", 1))
            out[key] = value
    return out


def parse_assignments(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(file_values=None, env=None, overrides=None):
    """Merge the layers and validate. Returns a plain dict over every schema key."""
    env = os.environ if env is None else env
    raw = {}
    for layer in (file_values or {}, {k: env[env_name(k)] for k in SCHEMA if env_name(k) in env},
                  overrides or {}):
        for key, value in layer.items():
            if key not in SCHEMA:
                raise ValidationError(f"unknown config key {key!r}")
            raw[key] = value
    cfg = {}
    for key, fld in SCHEMA.items():
        if key in raw and raw[key] is not None:
            try:
                cfg[key] = fld.parse(raw[key])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"config key {key!r}: {exc}") from None
        else:
            cfg[key] = fld.default
    validate(cfg)
    return cfg


def validate(cfg):
    def need(cond, msg):
        if not cond:
            raise ValidationError(msg)

    ratios = cfg["split.ratios"]
    need(len(ratios) == 3 and all(r >= 0 for r in ratios) and abs(sum(ratios) - 1) < 1e-9,
         "split.ratios must be three non-negative fractions summing to 1")
    need(cfg["synth.K"] >= 2, "synth.K must be >= 2")
    need(cfg["synth.n_per_class"] >= 1, "synth.n_per_class must be >= 1")
    need(cfg["tree.depth"] >= 1, "tree.depth must be >= 1")
    need(cfg["protopnet.protos_per_class"] >= 1, "protopnet.protos_per_class must be >= 1")
    need(cfg["alp.tau"] > 0, "alp.tau must be > 0")
    need(cfg["alp.t"] is None or 0.0 <= cfg["alp.t"] <= 1.0, "alp.t must lie in [0, 1]")
    need(cfg["alpha"] is None or 0.0 <= cfg["alpha"] <= 1.0, "alpha must lie in [0, 1]")
    need(all(0.0 <= a <= 1.0 for a in cfg["alphas"]) and cfg["alphas"], "alphas must be in [0, 1]")
    need(0.0 < cfg["cal.alpha_train"] < 1.0, "cal.alpha_train must be in (0, 1)")
    need(set(cfg["cal.trainable"]) <= set(PARAMS), f"cal.trainable must be a subset of {PARAMS}")
    need(cfg["jobs"] >= 1, "jobs must be >= 1")
    need(len(cfg["ablate.seeds"]) >= 1, "ablate.seeds must not be empty")
    for key, value in cfg.items():
        rate = key.endswith(("_lr", ".lr"))
        coef = key.startswith(("protopnet_loss.", "tree_loss.", "cal.lambda_")) and not isinstance(value, bool)
        if rate or coef:
            need(value >= 0, f"{key} must be >= 0")
    return cfg


def config_hash(cfg):
    """sha256 over the canonical JSON of everything except the output location."""
    body = {k: v for k, v in cfg.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def canonical_json(cfg):
    return json.dumps(cfg, sort_keys=True, default=list)


def group(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def synth_config(cfg):
    return SynthConfig(**group(cfg, "synth"))


def phase_schedule(cfg):
    kw = group(cfg, "protopnet")
    kw.pop("protos_per_class")
    return PhaseSchedule(seed=cfg["seed"], **kw)


def protopnet_coefs(cfg):
    return LossCoefs(**group(cfg, "protopnet_loss"))


def cal_config(cfg, **changes):
    kw = group(cfg, "cal")
    for extra in ("m_init", "scalar_m", "k_rule"):
        kw.pop(extra)
    kw.update(changes)
    return CALConfig(seed=cfg["seed"], **kw)


def tree_schedule(cfg, **changes):
    kw = group(cfg, "tree")
    kw.pop("depth")
    kw.update(changes)
    return TreeSchedule(seed=cfg["seed"], **kw)


def tree_coefs(cfg, **changes):
    kw = group(cfg, "tree_loss")
    kw.update(changes)
    return TreeLossCoefs(**kw)


def dump(cfg, path):
    """Write a resolved config back out as a key=value file."""
    with open(path, "w") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {format_value(cfg[key])}\n")


def format_value(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join("-".join(str(v) for v in p) for p in value)
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)
