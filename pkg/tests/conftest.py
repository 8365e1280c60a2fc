"""Session-wide fixtures: the 5-seed adaptation battery shared by the data,
baseline and acceptance suites so the expensive runs happen once, plus the
per-criterion pass/fail reporting hook."""
from __future__ import annotations

import time
from dataclasses import replace

import pytest

from fixbi.baseline import train_dann, train_source_only
from fixbi.config import DatasetSpec, TrainConfig
from fixbi.core import train_fixbi
from fixbi.harness import load_dataset_pair


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker and report.when == "call":
        status = "PASS" if report.passed else "FAIL"
        print(f"\n[acceptance] {marker.args[0]}: {status}")

# the ablation ladder mirrored by the battery: which losses are active
LADDER = (
    ("fm", dict(loss_bim=False, loss_sp=False, loss_cr=False)),
    ("fm+bim", dict(loss_sp=False, loss_cr=False)),
    ("fm+bim+sp", dict(loss_cr=False)),
    ("full", dict()),
)

BATTERY_SEEDS = tuple(range(5))


def battery_config(seed: int) -> TrainConfig:
    """Desk-scale adaptation setting: 3-class blobs rotated 50 degrees,
    300 + 300 samples, 60 epochs with a 30-epoch warm-up, batch 32."""
    return TrainConfig(
        dataset=DatasetSpec(kind="blobs", num_classes=3, per_class=100, dim=2,
                            rotation_deg=50.0, noise_sigma=0.15),
        epochs=60, warmup_epochs=30, batch_size=32,
        lr0=0.01, baseline="dann", baseline_epochs=100, seed=seed)


@pytest.fixture(scope="session")
def ordering_battery():
    """Per seed: source-only and DANN baselines plus the four-rung ladder of
    dual-model runs, every rung starting from the same DANN weights.
    The battery's total wall time rides along under the ``elapsed_s`` key."""
    t0 = time.perf_counter()
    results = {}
    for seed in BATTERY_SEEDS:
        cfg = battery_config(seed)
        source, target = load_dataset_pair(cfg)
        source_only = train_source_only(cfg, source, target)
        dann = train_dann(cfg, source, target)
        ladder = {}
        for name, toggles in LADDER:
            rung_cfg = replace(cfg, **toggles)
            _, rows = train_fixbi(rung_cfg, source, target, dann.model)
            ladder[name] = rows[-1]
        results[seed] = {
            "source_only": source_only,
            "dann": dann,
            "ladder": ladder,
        }
    return {"seeds": results, "elapsed_s": time.perf_counter() - t0}
