import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model_config():
    from multiid.model import ModelConfig

    return ModelConfig(frames=4, hidden=16, depth=2, heads=2, text_width=8, num_latents=2, lora_rank=2)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    from multiid.model import prepare_corpus
    from multiid.synthdata import load_corpus, write_corpus

    root = tmp_path_factory.mktemp("tiny_corpus")
    write_corpus(3, 2, root, seed=0, num_frames=4)
    cfg = tiny_model_config()
    return cfg, prepare_corpus(load_corpus(root), cfg)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
