"""Fine-tuning loop, trainable-parameter policies and greedy hyperparameter search."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import torch
from torch import nn

from .adapters import DEFAULT_TARGETS, attach_lora, quantize_model
from .chat_corpus import Label
from .classify import Prediction, Strategy
from .errors import EmptyGrid, ModePolicyMismatch, NonFiniteLoss
from .micro_lm import BOS_ID, MASK_ID, Example, MicroLM, Vocabulary, example_losses
from .prompting import SoftPrompt

logger = logging.getLogger(__name__)

POLICIES = ("full_finetune", "lora", "soft_prompt_only")
DECAY_POLICIES = ("standard", "paper_literal")


@dataclass
class Hyperparams:
    learning_rate: float = 1e-3
    micro_batch_size: int = 4
    gradient_accumulation_steps: int = 1
    epochs: int = 10
    weight_decay: float = 0.01
    decay_policy: str = "standard"
    seed: int = 0
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if min(self.micro_batch_size, self.gradient_accumulation_steps, self.epochs) < 1:
            raise ValueError("micro_batch_size, gradient_accumulation_steps and epochs must be >= 1")
        if self.decay_policy not in DECAY_POLICIES:
            raise ValueError(f"decay_policy must be one of {DECAY_POLICIES}")

    @property
    def effective_batch_size(self) -> int:
        return self.micro_batch_size * self.gradient_accumulation_steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainPolicy:
    strategy: str = "full_finetune"
    lora_rank: int = 4
    lora_alpha: float | None = None
    lora_targets: tuple[str, ...] = DEFAULT_TARGETS
    quantize_base: bool = False
    quant_granularity: str = "row"
    soft_prompt_length: int = 16
    soft_prompt_init: str = "template"

    def __post_init__(self):
        if self.strategy not in POLICIES:
            raise ValueError(f"train policy must be one of {POLICIES}, got {self.strategy!r}")
        self.lora_targets = tuple(self.lora_targets)

    @property
    def reserve(self) -> int:
        """Positions taken by the soft prompt, if any."""
        return self.soft_prompt_length if self.strategy == "soft_prompt_only" else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lora_targets"] = list(self.lora_targets)
        return d


@dataclass
class EpochCheckpoint:
    epoch: int
    state: dict[str, torch.Tensor]
    val_predictions: list[Prediction]
    val_loss: float
    train_loss: float


def apply_policy(model: MicroLM, policy: TrainPolicy, strategy: Strategy | None = None, seed: int = 0) -> None:
    """Freeze the model and attach whatever the policy trains."""
    if getattr(model, "_policy_applied", None) is not None:
        if model._policy_applied != policy.strategy:
            raise ModePolicyMismatch(f"model already prepared for {model._policy_applied}")
        return
    if policy.strategy == "full_finetune":
        for p in model.parameters():
            p.requires_grad_(True)
    else:
        for p in model.parameters():
            p.requires_grad_(False)
        if policy.strategy == "lora":
            attach_lora(model, policy.lora_targets, policy.lora_rank, policy.lora_alpha, seed=seed)
            if policy.quantize_base:
                quantize_model(model, policy.quant_granularity)
        else:
            d = model.cfg.d_model
            if policy.soft_prompt_init == "template" and strategy is not None:
                warm = strategy.vocab.encode(strategy.template.literal_text())
                sp = SoftPrompt.from_tokens(model.tok_emb.weight, warm, policy.soft_prompt_length, seed=seed)
            elif policy.soft_prompt_init in ("template", "random"):
                sp = SoftPrompt.random(policy.soft_prompt_length, d, seed=seed, dtype=model.cfg.torch_dtype)
            else:
                raise ValueError(f"unknown soft prompt init {policy.soft_prompt_init!r}")
            model.soft_prompt = sp
    model._policy_applied = policy.strategy


def trainable_named_parameters(model: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return [(n, p) for n, p in model.named_parameters() if p.requires_grad]


def _layernorm_param_ids(model: nn.Module) -> set[int]:
    return {id(p) for m in model.modules() if isinstance(m, nn.LayerNorm) for p in m.parameters()}


def decay_groups(model: nn.Module, hp: Hyperparams) -> list[dict]:
    """``standard``: decay every non-bias weight except LayerNorm.
    ``paper_literal``: LayerNorm gains and biases are decayed as well."""
    ln = _layernorm_param_ids(model)
    decay, no_decay = [], []
    for name, p in trainable_named_parameters(model):
        if id(p) in ln:
            (decay if hp.decay_policy == "paper_literal" else no_decay).append(p)
        elif name.endswith("bias"):
            no_decay.append(p)
        else:
            decay.append(p)
    groups = [{"params": decay, "weight_decay": hp.weight_decay}]
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def make_optimizer(model: nn.Module, hp: Hyperparams) -> torch.optim.Optimizer:
    return torch.optim.AdamW(decay_groups(model, hp), lr=hp.learning_rate,
                             betas=(hp.beta1, hp.beta2), eps=hp.eps, foreach=False)


def snapshot(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p.detach().clone() for n, p in trainable_named_parameters(model)}


def restore(model: nn.Module, ckpt: EpochCheckpoint | Mapping[str, torch.Tensor]) -> None:
    state = ckpt.state if isinstance(ckpt, EpochCheckpoint) else ckpt
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name, value in state.items():
            params[name].copy_(value)


@torch.no_grad()
def evaluate_loss(model: MicroLM, examples, objective: str, batch_size: int = 32) -> float:
    if not examples:
        return float("nan")
    total = 0.0
    for lo in range(0, len(examples), batch_size):
        total += float(example_losses(model, examples[lo: lo + batch_size], objective).sum())
    return total / len(examples)


def train(
    model: MicroLM,
    policy: TrainPolicy,
    strategy: Strategy,
    train_data: tuple[Sequence[str], Sequence[Label]],
    val_data: tuple[Sequence[str], Sequence[Label]] | None,
    hp: Hyperparams,
    on_epoch: Callable[[EpochCheckpoint], None] | None = None,
) -> list[EpochCheckpoint]:
    """Train for ``hp.epochs`` epochs and return one checkpoint per epoch.

    Each optimizer step sums per-example losses over the effective batch and
    divides by its size, so accumulation over micro-batches matches one large
    batch exactly (up to float reassociation).
    """
    if model.mode != strategy.model_mode:
        raise ModePolicyMismatch(f"{strategy.name} needs a {strategy.model_mode} model, got {model.mode}")
    docs, labels = train_data
    if not docs:
        raise ValueError("training data is empty")
    apply_policy(model, policy, strategy, seed=hp.seed)
    examples = strategy.training_examples(docs, labels)
    if not examples:
        raise ValueError("strategy produced no training examples")
    val_examples = strategy.training_examples(*val_data) if val_data and val_data[0] else []

    opt = make_optimizer(model, hp)
    sched = None
    if hp.warmup_steps:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / hp.warmup_steps))
    gen = torch.Generator().manual_seed(hp.seed)
    eff = hp.effective_batch_size
    checkpoints: list[EpochCheckpoint] = []

    for epoch in range(hp.epochs):
        model.train()
        order = torch.randperm(len(examples), generator=gen).tolist()
        epoch_loss = 0.0
        for lo in range(0, len(order), eff):
            step_idx = order[lo: lo + eff]
            opt.zero_grad(set_to_none=True)
            for mlo in range(0, len(step_idx), hp.micro_batch_size):
                micro = [examples[i] for i in step_idx[mlo: mlo + hp.micro_batch_size]]
                losses = example_losses(model, micro, strategy.objective)
                loss = losses.sum() / len(step_idx)
                if not torch.isfinite(loss):
                    last = checkpoints[-1].epoch if checkpoints else None
                    raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", last_good_epoch=last)
                loss.backward()
                epoch_loss += float(losses.detach().sum())
            opt.step()
            if sched is not None:
                sched.step()
        model.eval()
        val_docs = val_data[0] if val_data else []
        preds = strategy.predict(model, val_docs) if val_docs else []
        ckpt = EpochCheckpoint(
            epoch=epoch,
            state=snapshot(model),
            val_predictions=preds,
            val_loss=evaluate_loss(model, val_examples, strategy.objective),
            train_loss=epoch_loss / len(examples),
        )
        logger.debug("epoch %d train_loss %.4f val_loss %.4f", epoch, ckpt.train_loss, ckpt.val_loss)
        checkpoints.append(ckpt)
        if on_epoch is not None:
            on_epoch(ckpt)
    return checkpoints


# --------------------------------------------------------------------------
# self-supervised warm-up of the base model

@dataclass
class PretrainConfig:
    """Unlabeled LM warm-up standing in for a pretrained checkpoint; 0 epochs disables it."""

    epochs: int = 0
    learning_rate: float = 3e-3
    micro_batch_size: int = 8
    mask_prob: float = 0.15
    weight_decay: float = 0.01

    def to_dict(self) -> dict:
        return asdict(self)


def _pretrain_examples(model: MicroLM, vocab: Vocabulary, docs: Sequence[str], gen: torch.Generator, mask_prob: float) -> list[Example]:
    limit = model.cfg.max_len - 1
    out = []
    for doc in docs:
        ids = vocab.encode(doc)[:limit]
        if not ids:
            continue
        if model.mode == "causal":
            out.append(Example((BOS_ID, *ids), target_start=1))
            continue
        picks = (torch.rand(len(ids), generator=gen) < mask_prob).nonzero().flatten().tolist()
        if not picks:
            picks = [int(torch.randint(len(ids), (1,), generator=gen))]
        masked = list(ids)
        for p in picks:
            masked[p] = MASK_ID
        out.append(Example(tuple(masked), mlm_targets=tuple((p, ids[p]) for p in picks)))
    return out


def pretrain(model: MicroLM, vocab: Vocabulary, docs: Sequence[str], cfg: PretrainConfig, seed: int = 0) -> list[float]:
    """Next-token (causal) or masked-token (masked) training on raw documents.

    Uses no labels. Returns the mean loss per epoch.
    """
    if cfg.epochs <= 0:
        return []
    objective = "next_token_ce" if model.mode == "causal" else "masked_token_ce"
    for p in model.parameters():
        p.requires_grad_(True)
    hp = Hyperparams(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay)
    opt = make_optimizer(model, hp)
    gen = torch.Generator().manual_seed(seed)
    history = []
    model.train()
    for epoch in range(cfg.epochs):
        examples = _pretrain_examples(model, vocab, docs, gen, cfg.mask_prob)
        order = torch.randperm(len(examples), generator=gen).tolist()
        total = 0.0
        for lo in range(0, len(order), cfg.micro_batch_size):
            batch = [examples[i] for i in order[lo: lo + cfg.micro_batch_size]]
            opt.zero_grad(set_to_none=True)
            losses = example_losses(model, batch, objective)
            loss = losses.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite pretraining loss in epoch {epoch}")
            loss.backward()
            opt.step()
            total += float(losses.detach().sum())
        history.append(total / max(len(examples), 1))
    model.eval()
    return history


# --------------------------------------------------------------------------
# greedy search

@dataclass
class SearchResult:
    best: dict
    best_score: float
    history: list[tuple[dict, float]] = field(default_factory=list)

    @property
    def evaluations(self) -> int:
        return len(self.history)


def greedy_search(grid: Mapping[str, Sequence], objective: Callable[[dict], float]) -> SearchResult:
    """Coordinate-wise search: tune one axis at a time, others held at the current best.

    Axes are visited in the grid's order, starting from each axis's first
    value; ties keep the earlier candidate. Costs ``sum(len(axis))`` objective
    calls.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise EmptyGrid("grid needs at least one axis and every axis needs a value")
    current = {k: v[0] for k, v in grid.items()}
    history: list[tuple[dict, float]] = []
    best_score = float("-inf")
    for axis, values in grid.items():
        axis_best, axis_score = current[axis], float("-inf")
        for value in values:
            point = dict(current, **{axis: value})
            score = float(objective(point))
            history.append((point, score))
            if score > axis_score:
                axis_best, axis_score = value, score
        current[axis] = axis_best
        best_score = axis_score
    return SearchResult(current, best_score, history)
