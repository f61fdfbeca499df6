import pytest
import torch

from promptclinic.micro_lm import MicroLM, ModelConfig, Vocabulary

TOY_TEXTS = [
    "the boy fell off the stool .",
    "the mother is washing dishes and the water is running .",
    "uh the girl wants a cookie um .",
    "dementia healthy diagnosis is yes no",
]


@pytest.fixture
def toy_vocab() -> Vocabulary:
    return Vocabulary.build(TOY_TEXTS)


def tiny_model(vocab_size: int, mode: str = "causal", seed: int = 0, **overrides) -> MicroLM:
    params = dict(vocab_size=vocab_size, d_model=16, n_layers=2, n_heads=2, d_ff=32, max_len=48, mode=mode)
    params.update(overrides)
    return MicroLM(ModelConfig(**params), seed=seed)


@pytest.fixture
def causal_model(toy_vocab):
    return tiny_model(len(toy_vocab), "causal")


@pytest.fixture
def masked_model(toy_vocab):
    return tiny_model(len(toy_vocab), "masked")


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield
