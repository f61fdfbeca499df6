"""Glue between configs, corpora, models and strategies."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import torch

from .chat_corpus import Corpus, Label, load_corpus
from .classify import Prediction, Strategy, make_strategy
from .config import ExperimentConfig
from .errors import ConfigError
from .micro_lm import MicroLM, ModelConfig, Vocabulary, load_checkpoint, save_checkpoint
from .synthetic import make_corpus
from .trainer import EpochCheckpoint, apply_policy, pretrain, restore, train

logger = logging.getLogger(__name__)


def corpus_from_config(cfg: ExperimentConfig, strict: bool = False) -> Corpus:
    spec = cfg.corpus
    if "parsed" in spec:
        import json

        return Corpus.from_json(json.loads(Path(spec["parsed"]).read_text(encoding="utf-8")))
    if "chat_dir" in spec:
        return load_corpus(spec["chat_dir"], spec["manifest"], strict=strict,
                           expect_adress=bool(spec.get("expect_adress", False)))
    syn = spec["synthetic"] or {}
    return make_corpus(int(syn.get("n", 200)), int(syn.get("seed", 0)),
                       float(syn.get("ad_rate", 0.25)), float(syn.get("hc_rate", 0.03)))


def build_vocab(cfg: ExperimentConfig, docs: Sequence[str]) -> Vocabulary:
    return Vocabulary.build(docs, cfg.prompt.vocabulary_text())


def model_config(cfg: ExperimentConfig, vocab: Vocabulary) -> ModelConfig:
    try:
        return ModelConfig(vocab_size=len(vocab), mode=cfg.model_mode, **cfg.model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from None


def strategy_for(cfg: ExperimentConfig, vocab: Vocabulary, max_len: int) -> Strategy:
    kwargs = {}
    if cfg.strategy == "generative":
        kwargs = {"normalize": bool(cfg.generative["normalize"]), "decode": cfg.generative["decode"]}
    return make_strategy(cfg.strategy, cfg.prompt, vocab, max_len, cfg.policy.reserve, **kwargs)


def build_fold_model(
    cfg: ExperimentConfig,
    vocab: Vocabulary,
    train_docs: Sequence[str],
    train_labels: Sequence[Label],
    val_docs: Sequence[str],
    val_labels: Sequence[Label],
    seed: int,
) -> tuple[MicroLM, Strategy, list[EpochCheckpoint]]:
    """Fresh model -> optional LM warm-up -> policy -> fine-tuning."""
    mcfg = model_config(cfg, vocab)
    model = MicroLM(mcfg, seed=seed)
    pretrain(model, vocab, train_docs, cfg.pretrain, seed=seed)
    strategy = strategy_for(cfg, vocab, mcfg.max_len)
    hp = cfg.hyperparams.__class__(**{**cfg.hyperparams.to_dict(), "seed": seed})
    ckpts = train(model, cfg.policy, strategy, (train_docs, train_labels),
                  (val_docs, val_labels) if val_docs else None, hp)
    return model, strategy, ckpts


def train_final(cfg: ExperimentConfig, corpus: Corpus, path: str | Path) -> Path:
    """Train on the whole corpus and save a checkpoint usable by ``predict``."""
    docs = corpus.documents(cfg.speakers)
    labels = [t.label for t in corpus]
    vocab = build_vocab(cfg, docs)
    model, _, ckpts = build_fold_model(cfg, vocab, docs, labels, [], [], seed=cfg.seed)
    restore(model, ckpts[-1])
    extra = {"experiment": cfg.to_dict(), "epochs": len(ckpts), "final_train_loss": ckpts[-1].train_loss}
    save_checkpoint(path, model, vocab, extra)
    return Path(path)


def load_predictor(path: str | Path) -> tuple[MicroLM, Strategy]:
    model, vocab, extra = load_checkpoint(path)
    if "experiment" not in extra:
        raise ConfigError("checkpoint: no stored experiment/strategy")
    cfg = ExperimentConfig.from_dict(extra["experiment"])
    if model.mode != cfg.model_mode:
        raise ConfigError(f"checkpoint: {cfg.strategy} strategy needs a {cfg.model_mode} model, found {model.mode}")
    model._policy_applied = cfg.policy.strategy
    model.eval()
    return model, strategy_for(cfg, vocab, model.cfg.max_len)


@torch.no_grad()
def predict_text(path: str | Path, text: str) -> Prediction:
    model, strategy = load_predictor(path)
    return strategy.predict_one(model, text)
