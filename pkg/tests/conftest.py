import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from invlab.data import split_disjoint, synth_blobs
from invlab.lab.config import load_config
from invlab.lab.pipeline import Lab, run_config
from invlab.lab.report import emit_report
from invlab.models import build_classifier

DESK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk_mnist.json"

settings.register_profile(
    "invlab", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("invlab")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def mlp():
    """Factory for small seeded classifiers."""

    def make(widths=(6, 5, 4, 3), seed=0, **kw):
        return build_classifier(list(widths), seed, **kw)

    return make


@pytest.fixture(scope="session")
def blobs():
    return synth_blobs(n_classes=6, n_per_class=40, dim=16, separation=0.25, noise=0.08, seed=3)


@pytest.fixture(scope="session")
def blob_bundle(blobs):
    return split_disjoint(blobs, [0, 1, 2], [0, 1, 2], [3, 4, 5], 0.25, seed=0)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """(config, Lab, SweepResult) for the MNIST desk fixture.

    A complete sweep under runs/desk_mnist is reused when its saved config
    matches; otherwise the sweep runs into a temporary directory (about
    5 minutes on one CPU).
    """
    cfg = load_config(DESK_CONFIG)
    saved = cfg.out_dir / "config.json"
    reusable = saved.exists() and json.loads(saved.read_text()) == cfg.raw and (cfg.out_dir / "summary.json").exists()
    if reusable:
        result = Lab(cfg).collect()
        reusable = not result.failures
    if not reusable:
        cfg = cfg.with_overrides(out=tmp_path_factory.mktemp("desk"))
        result = run_config(cfg)
        emit_report(result)
    return cfg, Lab(cfg), result
