import numpy as np
import pytest
from hypothesis import settings

from protoabstain import config as C
from protoabstain import pipeline as PL

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def small_cfg(**overrides):
    base = {
        "synth.K": "4",
        "synth.n_per_class": "50",
        "synth.confusable_pairs": "0-1",
        "protopnet.pre_project_epochs": "4",
        "protopnet.epochs_per_phase": "2",
        "protopnet.last_layer_epochs": "3",
        "cal.epochs": "5",
        "tree.depth": "3",
        "tree.epochs": "5",
    }
    base.update({k: str(v) for k, v in overrides.items()})
    return C.resolve({}, env={}, overrides=base)


@pytest.fixture(scope="session")
def cfg():
    return small_cfg()


@pytest.fixture(scope="session")
def splits(cfg):
    ds = PL.load_or_synth(cfg)
    spec, tr, va, te = PL.split_dataset(ds, cfg)
    return {"full": ds, "spec": spec, "train": tr, "validation": va, "test": te}


@pytest.fixture(scope="session")
def protopnets(cfg, splits):
    return PL.train_protopnet_pair(splits["train"], cfg)


@pytest.fixture(scope="session")
def cal_model(cfg, splits, protopnets):
    img, gen = protopnets
    return PL.build_cal(img, gen, splits["train"], splits["validation"], cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
