import pytest
from hypothesis import given
from hypothesis import strategies as st

from protoabstain import config as C
from protoabstain.errors import ValidationError


def test_defaults_validate():
    cfg = C.resolve({}, env={})
    assert set(cfg) == set(C.SCHEMA)
    assert cfg["alpha"] is None and cfg["ablate.seeds"] == (0, 1, 2)


def test_layer_precedence():
    env = {C.env_name("cal.lr"): "0.2", C.env_name("seed"): "4"}
    cfg = C.resolve({"cal.lr": "0.1", "seed": "3"}, env=env, overrides={"seed": "5"})
    assert cfg["cal.lr"] == 0.2 and cfg["seed"] == 5
    assert C.env_name("cal.lambda_margin") == "PROTOABSTAIN_CAL__LAMBDA_MARGIN"


@pytest.mark.parametrize("overrides", [
    {"nope": "1"}, {"seed": "x"}, {"split.ratios": "0.5,0.5,0.5"}, {"cal.lr": "-1"},
    {"alp.t": "1.5"}, {"cal.mode": "l2"}, {"tree_loss.routing": "-0.1"}, {"cal.trainable": "m,bogus"},
])
def test_invalid_values_rejected(overrides):
    with pytest.raises(ValidationError):
        C.resolve({}, env={}, overrides=overrides)


def test_dump_parse_roundtrip(tmp_path):
    cfg = C.resolve({}, env={}, overrides={"alpha": "0.05", "synth.confusable_pairs": "0-1,4-5", "cal.scalar_m": "yes"})
    C.dump(cfg, tmp_path / "c.cfg")
    back = C.resolve(C.parse_file(tmp_path / "c.cfg"), env={})
    assert back == cfg
    assert C.config_hash(back) == C.config_hash(cfg)


def test_hash_ignores_output_dir():
    a = C.resolve({}, env={}, overrides={"output_dir": "a"})
    b = C.resolve({}, env={}, overrides={"output_dir": "b"})
    c = C.resolve({}, env={}, overrides={"seed": "9"})
    assert C.config_hash(a) == C.config_hash(b) != C.config_hash(c)


def test_parse_file_errors(tmp_path):
    (tmp_path / "bad.cfg").write_text("seed 3\n")
    with pytest.raises(ValidationError):
        C.parse_file(tmp_path / "bad.cfg")
    with pytest.raises(FileNotFoundError):
        C.parse_file(tmp_path / "missing.cfg")
    with pytest.raises(ValidationError):
        C.parse_assignments(["novalue"])


@given(st.floats(0.0, 1.0), st.integers(0, 2**31), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5))
def test_roundtrip_property(alpha, seed, alphas):
    cfg = C.resolve({}, env={}, overrides={"alpha": repr(alpha), "seed": str(seed),
                                           "alphas": ",".join(map(repr, alphas))})
    back = C.resolve({k: C.format_value(v) for k, v in cfg.items()}, env={})
    assert back == cfg


def test_typed_groups():
    cfg = C.resolve({}, env={}, overrides={"tree.epochs": "3", "cal.epochs": "2"})
    assert C.tree_schedule(cfg).epochs == 3
    assert C.cal_config(cfg, lambda_margin=0.0).lambda_margin == 0.0
    assert C.synth_config(cfg).K == cfg["synth.K"]
