"""Stratified k-fold cross-validation, last-epoch majority voting and metric reports.

Conventions (recorded in every report's metadata):

* AD is the positive class.
* ``accuracy`` is the mean of per-fold accuracies; precision, recall and F1
  come from confusion counts pooled over all folds. ``pooled_accuracy`` is
  reported alongside; the two agree only when folds have equal size.
* Standard deviations are population-style (divisor k).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import random
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path
from typing import Mapping, Sequence

import torch

from .chat_corpus import LABEL_ORDER, Corpus, Label
from .errors import EmptyInput, MisalignedPredictions, PromptClinicError, TooFewSamples

logger = logging.getLogger(__name__)

POSITIVE = Label.AD


# --------------------------------------------------------------------------
# folds

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def fold_of(self) -> dict[str, int]:
        return {tid: i for i, fold in enumerate(self.folds) for tid in fold}

    def split(self, i: int, ids: Sequence[str]) -> tuple[list[int], list[int]]:
        """Positions of ``ids`` in the training part and in held-out fold ``i``."""
        held = set(self.folds[i])
        train = [j for j, tid in enumerate(ids) if tid not in held]
        test = [j for j, tid in enumerate(ids) if tid in held]
        return train, test


def _pairs(corpus) -> list[tuple[str, Label]]:
    if isinstance(corpus, Corpus):
        return [(t.id, t.label) for t in corpus]
    return [(tid, Label(lab)) for tid, lab in corpus]


def stratified_folds(corpus: Corpus | Sequence[tuple[str, Label]], k: int, seed: int = 0) -> FoldPlan:
    """Shuffle each class with ``seed`` and deal its ids round-robin over ``k`` folds.

    The dealing position carries over from one class to the next, so fold
    sizes differ by at most one as well as per-class counts.
    """
    pairs = _pairs(corpus)
    if k < 2 or k > len(pairs):
        raise TooFewSamples(f"cannot build {k} folds from {len(pairs)} samples")
    ids = [tid for tid, _ in pairs]
    if len(set(ids)) != len(ids):
        raise ValueError("transcript ids must be unique")
    rng = random.Random(seed)
    folds: list[list[str]] = [[] for _ in range(k)]
    cursor = 0
    labels = sorted({lab for _, lab in pairs}, key=lambda lab: LABEL_ORDER.index(lab))
    for lab in labels:
        members = sorted(tid for tid, l in pairs if l == lab)
        rng.shuffle(members)
        for tid in members:
            folds[cursor % k].append(tid)
            cursor += 1
    return FoldPlan(k, seed, tuple(tuple(sorted(f)) for f in folds))


# --------------------------------------------------------------------------
# voting

def majority_vote(per_epoch_predictions: Sequence[Sequence[Label] | Mapping[str, Label]]):
    """Per-item label chosen by most epochs.

    Takes an odd number of prediction lists (three for the last-three-epoch
    scheme), either position-aligned sequences or id -> label mappings.
    """
    n = len(per_epoch_predictions)
    if n == 0 or n % 2 == 0:
        raise MisalignedPredictions(f"need an odd number of voters, got {n}")
    first = per_epoch_predictions[0]
    if isinstance(first, Mapping):
        keys = list(first)
        if any(not isinstance(p, Mapping) or set(p) != set(keys) for p in per_epoch_predictions):
            raise MisalignedPredictions("epoch predictions cover different transcript ids")
        return {k: _vote([Label(p[k]) for p in per_epoch_predictions]) for k in keys}
    size = len(first)
    if any(len(p) != size for p in per_epoch_predictions):
        raise MisalignedPredictions("epoch prediction lists differ in length")
    return [_vote([Label(p[i]) for p in per_epoch_predictions]) for i in range(size)]


def _vote(labels: list[Label]) -> Label:
    counts = Counter(labels)
    return max(LABEL_ORDER, key=lambda lab: (counts[lab], lab is LABEL_ORDER[0]))


# --------------------------------------------------------------------------
# metrics

@dataclass
class MetricsReport:
    fold_accuracies: list[float]
    fold_f1s: list[float]
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    pooled_accuracy: float
    precision: float
    recall: float
    f1: float
    acc_std_dev: float
    f1_std_dev: float
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _as_label(x) -> Label:
    if isinstance(x, Label):
        return x
    if isinstance(x, (bool, int)):
        return Label.AD if x else Label.HC
    return Label(x)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def _counts(preds, labels) -> tuple[int, int, int, int]:
    tp = sum(p is POSITIVE and l is POSITIVE for p, l in zip(preds, labels))
    fp = sum(p is POSITIVE and l is not POSITIVE for p, l in zip(preds, labels))
    fn = sum(p is not POSITIVE and l is POSITIVE for p, l in zip(preds, labels))
    return tp, fp, fn, len(preds) - tp - fp - fn


def _prf(tp, fp, fn, flags: list[str], prefix: str = "") -> tuple[float, float, float]:
    p = _ratio(tp, tp + fp, prefix + "precision", flags)
    r = _ratio(tp, tp + fn, prefix + "recall", flags)
    if p + r == 0:
        flags.append(prefix + "f1")
        return p, r, 0.0
    return p, r, 2 * p * r / (p + r)


def compute_metrics(predictions: Sequence, labels: Sequence, folds: Sequence[int] | None = None) -> MetricsReport:
    """Aggregate predictions into fold-mean accuracy and pooled precision/recall/F1.

    ``folds`` gives the fold index of each item; without it everything is
    one fold. Labels may be :class:`Label`, ``"AD"/"HC"`` or 1/0 (1 = AD).
    Zero denominators yield 0 and are listed in ``degenerate``.
    """
    preds = [_as_label(p) for p in predictions]
    gold = [_as_label(l) for l in labels]
    if not preds:
        raise EmptyInput("no predictions")
    if len(preds) != len(gold):
        raise MisalignedPredictions("predictions and labels differ in length")
    folds = [0] * len(preds) if folds is None else list(folds)
    if len(folds) != len(preds):
        raise MisalignedPredictions("fold assignment differs in length")

    flags: list[str] = []
    fold_acc, fold_f1 = [], []
    for f in sorted(set(folds)):
        idx = [i for i, x in enumerate(folds) if x == f]
        fp_, fg = [preds[i] for i in idx], [gold[i] for i in idx]
        fold_acc.append(sum(a is b for a, b in zip(fp_, fg)) / len(idx))
        tp, fp, fn, _ = _counts(fp_, fg)
        fold_f1.append(_prf(tp, fp, fn, flags, prefix=f"fold{f}.")[2])

    tp, fp, fn, tn = _counts(preds, gold)
    precision, recall, f1 = _prf(tp, fp, fn, flags)
    return MetricsReport(
        fold_accuracies=fold_acc,
        fold_f1s=fold_f1,
        tp=tp, fp=fp, fn=fn, tn=tn,
        accuracy=statistics.fmean(fold_acc),
        pooled_accuracy=(tp + tn) / len(preds),
        precision=precision,
        recall=recall,
        f1=f1,
        acc_std_dev=statistics.pstdev(fold_acc),
        f1_std_dev=statistics.pstdev(fold_f1),
        degenerate=flags,
    )


# --------------------------------------------------------------------------
# cross-validation runs

@dataclass
class FoldReport:
    fold: int
    ids: list[str]
    labels: list[str]
    epoch_predictions: list[list[str]]  # the voted epochs, oldest first
    predictions: list[str]
    ties: int
    accuracy: float
    train_losses: list[float]
    val_losses: list[float]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CVResult:
    metrics: MetricsReport
    folds: list[FoldReport]
    metadata: dict

    def to_json(self) -> str:
        payload = {"metadata": self.metadata, "metrics": self.metrics.to_dict(),
                   "folds": [f.to_dict() for f in self.folds]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def fold_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "accuracy", "f1", "n"])
        for f, acc, f1 in zip(self.folds, self.metrics.fold_accuracies, self.metrics.fold_f1s):
            writer.writerow([f.fold, repr(acc), repr(f1), len(f.ids)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / f"{stem}.json", out / f"{stem}_folds.csv"
        jpath.write_text(self.to_json(), encoding="utf-8")
        cpath.write_text(self.fold_csv(), encoding="utf-8")
        return jpath, cpath


class FoldFailed(PromptClinicError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} failed: {cause}")
        self.fold = fold
        self.cause = cause


@contextmanager
def _single_thread():
    before = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(before)


def _run_fold(config_dict: dict, ids: list[str], docs: list[str], labels: list[str], plan: FoldPlan, fold: int) -> FoldReport:
    from .config import ExperimentConfig
    from .pipeline import build_fold_model, build_vocab

    cfg = ExperimentConfig.from_dict(config_dict)
    labels_ = [Label(l) for l in labels]
    vocab = build_vocab(cfg, docs)
    train_idx, test_idx = plan.split(fold, ids)
    with _single_thread():
        try:
            model, strategy, ckpts = build_fold_model(
                cfg, vocab,
                [docs[i] for i in train_idx], [labels_[i] for i in train_idx],
                [docs[i] for i in test_idx], [labels_[i] for i in test_idx],
                seed=cfg.seed + fold,
            )
        except Exception as exc:  # noqa: BLE001 - re-raised with fold index
            raise FoldFailed(fold, exc) from exc
    voted = ckpts[-cfg.vote_last:]
    epoch_preds = [[p.label for p in c.val_predictions] for c in voted]
    final = majority_vote(epoch_preds)
    gold = [labels_[i] for i in test_idx]
    return FoldReport(
        fold=fold,
        ids=[ids[i] for i in test_idx],
        labels=[l.value for l in gold],
        epoch_predictions=[[p.value for p in ep] for ep in epoch_preds],
        predictions=[p.value for p in final],
        ties=sum(p.tie for c in voted for p in c.val_predictions),
        accuracy=sum(a is b for a, b in zip(final, gold)) / len(gold),
        train_losses=[c.train_loss for c in ckpts],
        val_losses=[c.val_loss for c in ckpts],
    )


def fold_workers(default: int = 1) -> int:
    raw = os.environ.get("PROMPTCLINIC_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("ignoring non-integer PROMPTCLINIC_THREADS=%r", raw)
        return default


def run_cv(corpus: Corpus, config, workers: int | None = None) -> CVResult:
    """Train and score one model per held-out fold; aggregate in fold order.

    ``workers`` > 1 runs folds in separate processes; results are identical
    to a sequential run because every fold is single-threaded and seeded.
    """
    from .config import ExperimentConfig

    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    ids = [t.id for t in corpus]
    labels = [t.label.value for t in corpus]
    docs = corpus.documents(cfg.speakers)
    plan = stratified_folds(corpus, cfg.k, cfg.seed)
    workers = fold_workers() if workers is None else workers
    workers = max(1, min(workers, cfg.k))
    cfg_dict = cfg.to_dict()

    if workers == 1:
        reports = [_run_fold(cfg_dict, ids, docs, labels, plan, i) for i in range(cfg.k)]
    else:
        with ProcessPoolExecutor(workers, mp_context=get_context("spawn")) as pool:
            futures = [pool.submit(_run_fold, cfg_dict, ids, docs, labels, plan, i) for i in range(cfg.k)]
            reports = [f.result() for f in futures]
    reports.sort(key=lambda r: r.fold)

    preds = [p for r in reports for p in r.predictions]
    gold = [l for r in reports for l in r.labels]
    fold_idx = [r.fold for r in reports for _ in r.ids]
    metrics = compute_metrics(preds, gold, fold_idx)
    return CVResult(metrics, reports, run_metadata(cfg))


def run_metadata(cfg) -> dict:
    from . import __version__

    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "code_version": __version__,
        "k": cfg.k,
        "strategy": cfg.strategy,
        "policy": cfg.policy.strategy,
        "vote_last": cfg.vote_last,
        "positive_class": POSITIVE.value,
        "accuracy_convention": "mean of per-fold accuracies",
        "prf_convention": "pooled confusion counts",
        "std_convention": "population (divisor k)",
        "optimizer": {"name": "AdamW", "beta1": cfg.hyperparams.beta1, "beta2": cfg.hyperparams.beta2,
                      "eps": cfg.hyperparams.eps},
        "config": cfg.to_dict(),
    }


def tune(corpus: Corpus, config, workers: int | None = None):
    """Greedy search over ``config.grid`` using mean CV accuracy; returns (best config, SearchResult)."""
    from .trainer import greedy_search

    def objective(point: dict) -> float:
        trial = config.with_hyperparams(**point)
        return run_cv(corpus, trial, workers).metrics.accuracy

    result = greedy_search(config.grid, objective)
    return config.with_hyperparams(**result.best), result
