import os

import pytest

from mmtryon.datagen.pipeline import DatagenConfig, build_dataset
from mmtryon.training import ModelConfig, TrainConfig, TryonTensors


def tiny_model_config(**kw):
    base = dict(image_size=32, base_channels=8, channel_mult=(1, 2), attn_levels=(16,), heads=2,
                context_dim=32, n_queries=2)
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(stage="base", **kw):
    base = dict(stage=stage, steps=6, batch_size=4, lr=1e-3, seed=0, model=tiny_model_config(),
                checkpoint_every=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "data"
    build_dataset(24, 5, out_dir=root, config=DatagenConfig(size=32))
    return root


@pytest.fixture(scope="session")
def tiny_data(tiny_dataset):
    return TryonTensors.from_dir(tiny_dataset, 32)


@pytest.fixture(autouse=True)
def _no_determinism_leak(monkeypatch):
    monkeypatch.delenv("MMTRYON_DETERMINISTIC", raising=False)
    yield
    import torch
    torch.use_deterministic_algorithms(False)


@pytest.fixture(scope="session")
def acceptance_runs(tmp_path_factory):
    from acceptance_runs import AcceptanceRuns, acceptance_root
    return AcceptanceRuns(acceptance_root(tmp_path_factory))


def pytest_report_teststatus(report, config):
    if "test_criterion_" not in report.nodeid:
        return None
    rows = config.__dict__.setdefault("_criteria_rows", {})
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        rows[name] = (status, dict(report.user_properties).get("detail", ""))
    return None


def pytest_terminal_summary(terminalreporter, config):
    rows = config.__dict__.get("_criteria_rows")
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(rows):
        status, detail = rows[name]
        terminalreporter.write_line(f"{name.removeprefix('test_')}: {status}  {detail}".rstrip())
