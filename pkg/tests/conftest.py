import pytest
import torch

from ville.backbone import BackboneConfig
from ville.datagen import CorpusConfig, generate_corpus
from ville.embedhead import HeadConfig
from ville.model import ModelConfig, ViLLE

torch.set_num_threads(1)


def tiny_model_config(**head) -> ModelConfig:
    return ModelConfig(
        backbone=BackboneConfig(d_model=32, n_layers=2, n_heads=2, vocab_size=160, d_frame=8, max_seq=160),
        head=HeadConfig(**{"P": 8, "d_embed": 16, "mlp_hidden": 32, **head}),
        max_gen_steps=6,
    )


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return ViLLE(tiny_model_config())


@pytest.fixture(scope="session")
def tiny_corpus():
    cfg = CorpusConfig(n_videos=40, n_test=10, n_symbols=16, n_time=40, d_frame=8, duration_range=(30, 60))
    return generate_corpus(cfg, seed=3)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
