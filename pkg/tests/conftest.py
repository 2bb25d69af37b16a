import numpy as np
import pytest
import torch

from vesselssl.pipeline import load_split
from vesselssl.synth import DomainShiftSpec, SynthConfig, gen_corpus
from vesselssl.trainer import AblationLevel, TrainerConfig, fit


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """64px two-domain corpus: 3 labeled, 4 unlabeled, 2 test per domain."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(image_size=64, seed=303)
    gen_corpus(cfg, 3, 4, 2, DomainShiftSpec.default_target(), root)
    return root


@pytest.fixture(scope="session")
def tiny_corpus_samples(tiny_corpus):
    return {
        "labeled": load_split(tiny_corpus, "labeled", True),
        "unlabeled": load_split(tiny_corpus, "unlabeled", False),
        "test_target": load_split(tiny_corpus, "test_target", True),
    }


@pytest.fixture(scope="session")
def tiny_run(tiny_corpus, tmp_path_factory):
    """A completed 2-epoch tiny training run (ablation V) for checkpoint tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = TrainerConfig.tiny(seed=11, ablation=AblationLevel.V)
    result = fit(cfg, tiny_corpus, out)
    return {"config": cfg, "result": result, "out": out, "corpus": tiny_corpus}


def rand_mask(rng: np.random.Generator, shape=(8, 8), p: float = 0.5) -> np.ndarray:
    return (rng.random(shape) < p).astype(np.uint8)


def rand_probs(rng: np.random.Generator, shape=(8, 8)) -> np.ndarray:
    return rng.random(shape)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


@pytest.fixture
def torch_gen():
    g = torch.Generator()
    g.manual_seed(99)
    return g
