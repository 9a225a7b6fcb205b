import pytest
import torch

from dualface.config import ExperimentConfig, toy_profile
from dualface.trainer import build_samples, prepare_frozen

# light pretraining for unit tests; acceptance uses the config defaults
UNIT_FROZEN = dict(generator_pretrain_steps=150, embedder_pretrain_steps=150, avg_samples=2000)


@pytest.fixture(scope="session")
def profile():
    return toy_profile()


@pytest.fixture(scope="session")
def unit_config():
    return ExperimentConfig(
        num_identities=4, renders_per_identity=1, per_contour=2, refinement_steps=2, batch_size=4, **UNIT_FROZEN
    )


@pytest.fixture(scope="session")
def frozen_cache(request, tmp_path_factory):
    # pretrained frozen parts persist in pytest's cache between runs when available
    cache = getattr(request.config, "cache", None)
    if cache is None:
        return tmp_path_factory.mktemp("dualface-frozen")
    return cache.mkdir("dualface-frozen")


@pytest.fixture(scope="session")
def unit_frozen(unit_config, frozen_cache):
    return prepare_frozen(unit_config, frozen_cache)


@pytest.fixture(scope="session")
def unit_samples(unit_config):
    return build_samples(unit_config)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)


# criterion number -> one-line verdict, printed after the run
ACCEPTANCE_RESULTS: dict[int, str] = {}


@pytest.fixture
def criterion():
    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_RESULTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
