"""Shared fixtures.

Every test that needs frozen models takes them from the session-wide cache
below, so the weight checksums recorded when the session starts can be
compared against the same objects once every other test has run.
"""
from __future__ import annotations

import functools

import pytest
import torch
from hypothesis import HealthCheck, settings

from prompt_explainer.pipeline import BackendUnavailable, load_backend
from prompt_explainer.toy import HARD_ORACLE_WORDS, build_world

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def toy_world(seed: int = 0):
    return build_world(seed)


@functools.lru_cache(maxsize=None)
def toy_world64():
    return toy_world(0).to(torch.float64)


@functools.lru_cache(maxsize=None)
def hard_world():
    return build_world(0, words=HARD_ORACLE_WORDS)


@functools.lru_cache(maxsize=None)
def tiny_ldm():
    """(generator, probe) of the miniature latent consistency backend, or None."""
    try:
        return load_backend("ldm-tiny", {})
    except BackendUnavailable:
        return None


def adapter_checksums() -> dict[str, str]:
    out = {}
    for name, world in (("toy", toy_world()), ("toy64", toy_world64()), ("toy-hard", hard_world())):
        out[f"{name}/generator"] = world.generator.checksum()
        out[f"{name}/classifier"] = world.probe.checksum()
    ldm = tiny_ldm()
    if ldm is not None:
        out["ldm-tiny/generator"] = ldm[0].checksum()
        out["ldm-tiny/classifier"] = ldm[1].checksum()
    return out


BASELINE: dict[str, str] = {}


def pytest_sessionstart(session):
    BASELINE.update(adapter_checksums())


def pytest_collection_modifyitems(session, config, items):
    # the frozen-weights check must see the state after everything else ran
    last = [i for i in items if "frozen_weights" in i.name]
    rest = [i for i in items if "frozen_weights" not in i.name]
    items[:] = rest + last


@pytest.fixture(scope="session")
def world():
    return toy_world()


@pytest.fixture(scope="session")
def world64():
    return toy_world64()


@pytest.fixture(scope="session")
def hworld():
    return hard_world()


@pytest.fixture(scope="session")
def ldm():
    pair = tiny_ldm()
    if pair is None:
        pytest.skip("diffusers/transformers/torchvision not installed")
    return pair


@pytest.fixture(scope="session")
def baseline_checksums():
    return dict(BASELINE)


CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
