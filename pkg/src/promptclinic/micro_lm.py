"""Tiny transformer LM usable as a causal decoder or a bidirectional masked model.

Everything that produces logits in the package goes through :class:`MicroLM`.
Gradients come from torch autograd; the test-suite checks them against
central finite differences.
"""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NonFiniteLoss, SequenceTooLong, ShapeMismatch

PAD, MASK, BOS, EOS, UNK = "[PAD]", "[MASK]", "[BOS]", "[EOS]", "[UNK]"
SPECIAL_TOKENS = (PAD, MASK, BOS, EOS, UNK)
PAD_ID, MASK_ID, BOS_ID, EOS_ID, UNK_ID = range(5)

CHECKPOINT_FORMAT = "promptclinic/checkpoint"
CHECKPOINT_VERSION = 1

_TOKEN_RE = re.compile(r"\[(?:PAD|MASK|BOS|EOS|UNK)\]|<MASK>|\w+(?:'\w+)*|[^\w\s]")


def split_tokens(text: str) -> list[str]:
    """Whitespace-and-punctuation split. ``<MASK>`` is kept as one token."""
    return [MASK if tok == "<MASK>" else tok for tok in _TOKEN_RE.findall(text)]


class Vocabulary:
    """Token <-> id map with five reserved ids at the front."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = ()) -> "Vocabulary":
        """Vocabulary over all tokens in ``texts`` and ``extra``, sorted for determinism."""
        seen = set()
        for text in list(texts) + list(extra):
            seen.update(split_tokens(text))
        seen.difference_update(SPECIAL_TOKENS)
        return cls(sorted(seen))

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(tok, UNK_ID) for tok in split_tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join("<MASK>" if i == MASK_ID else self.itos[i] for i in ids)

    def tokens(self) -> list[str]:
        return list(self.itos)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    mask_positions: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.ids)


def tokenize(vocab: Vocabulary, text: str, max_len: int | None = None) -> TokenSequence:
    ids = vocab.encode(text)
    if max_len is not None and len(ids) > max_len:
        raise SequenceTooLong(f"{len(ids)} tokens exceed max_len {max_len}; truncate the document first")
    return TokenSequence(tuple(ids), tuple(i for i, t in enumerate(ids) if t == MASK_ID))


def detokenize(vocab: Vocabulary, seq: TokenSequence | Sequence[int]) -> str:
    ids = seq.ids if isinstance(seq, TokenSequence) else seq
    return vocab.decode(ids)


def truncate_document(doc: str, budget: int) -> str:
    """Keep the first ``budget`` tokens of ``doc`` (head truncation)."""
    tokens = split_tokens(doc)
    if len(tokens) <= budget:
        return doc
    return " ".join(tokens[: max(budget, 0)])


# --------------------------------------------------------------------------
# model

@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 512
    mode: str = "causal"
    tie_embeddings: bool = True
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        if self.mode not in ("causal", "masked"):
            raise ValueError(f"mode must be 'causal' or 'masked', got {self.mode!r}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.q = nn.Linear(d, d, bias=False)
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d, bias=False)
        self.o = nn.Linear(d, d, bias=False)

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        H = self.n_heads
        q = self.q(x).view(B, T, H, D // H).transpose(1, 2)
        k = self.k(x).view(B, T, H, D // H).transpose(1, 2)
        v = self.v(x).view(B, T, H, D // H).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(D // H)
        scores = scores.masked_fill(~allowed[:, None], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, T, D)
        return self.o(out)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = Attention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)

    def forward(self, x, allowed):
        x = x + self.attn(self.ln1(x), allowed)
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class MicroLM(nn.Module):
    """Pre-LN transformer. ``mode`` decides between causal and full attention.

    An attached soft prompt (see :mod:`promptclinic.prompting`) is prepended
    to the token embeddings; its rows are dropped from the returned logits,
    so logits always line up with the input ids.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.head = None if cfg.tie_embeddings else nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.soft_prompt = None
        self.to(cfg.torch_dtype)
        self.reset_parameters(seed)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln_"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * self.cfg.init_std)

    def output_weight(self) -> torch.Tensor:
        return self.tok_emb.weight if self.head is None else self.head.weight

    def embed(self, ids: torch.Tensor, offset: int = 0) -> torch.Tensor:
        T = ids.shape[1]
        pos = torch.arange(offset, offset + T)
        return self.tok_emb(ids) + self.pos_emb(pos)[None]

    def forward(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``ids`` (B, T) -> logits (B, T, V). ``pad_mask`` is True on real tokens."""
        if ids.dim() == 1:
            ids = ids[None]
        B, T = ids.shape
        if pad_mask is None:
            pad_mask = torch.ones(B, T, dtype=torch.bool)
        n_prompt = 0 if self.soft_prompt is None else self.soft_prompt.length
        if n_prompt + T > self.cfg.max_len:
            raise SequenceTooLong(f"{n_prompt + T} positions exceed max_len {self.cfg.max_len}")
        if ids.numel() and int(ids.max()) >= self.cfg.vocab_size:
            raise ShapeMismatch("token id outside the model vocabulary")

        if n_prompt:
            from .prompting import prepend_soft_prompt

            prompt_x = self.soft_prompt.vectors + self.pos_emb.weight[:n_prompt]
            x = prepend_soft_prompt(self.embed(ids, offset=n_prompt), prompt_x, self.cfg.max_len)
            pad_mask = torch.cat([torch.ones(B, n_prompt, dtype=torch.bool), pad_mask], dim=1)
        else:
            x = self.embed(ids)
        L = x.shape[1]

        allowed = pad_mask[:, None, :].expand(B, L, L)
        if self.cfg.mode == "causal":
            allowed = allowed & torch.ones(L, L, dtype=torch.bool).tril()[None]
        # a query row must see at least itself, otherwise softmax is all -inf
        allowed = allowed | torch.eye(L, dtype=torch.bool)[None]

        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_f(x)
        logits = x @ self.output_weight().T
        return logits[:, n_prompt:]

    def check_shapes(self) -> None:
        cfg = self.cfg
        expected = {
            "tok_emb.weight": (cfg.vocab_size, cfg.d_model),
            "pos_emb.weight": (cfg.max_len, cfg.d_model),
        }
        state = self.state_dict()
        for name, shape in expected.items():
            if tuple(state[name].shape) != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {tuple(state[name].shape)}")
        if len(self.blocks) != cfg.n_layers:
            raise ShapeMismatch(f"expected {cfg.n_layers} layers, found {len(self.blocks)}")


def forward(model: MicroLM, seq: TokenSequence | Sequence[int]) -> torch.Tensor:
    """Logits (T, V) for a single sequence."""
    ids = seq.ids if isinstance(seq, TokenSequence) else tuple(seq)
    if isinstance(seq, TokenSequence) and seq.mask_positions and model.mode != "masked":
        raise ValueError("mask positions are only meaningful for a masked-mode model")
    return model(torch.tensor([ids], dtype=torch.long))[0]


# --------------------------------------------------------------------------
# objectives

@dataclass(frozen=True)
class Example:
    """One training item.

    ``next_token_ce`` scores ``ids[target_start:target_end]`` given the tokens
    before each of them. ``mask_label_ce`` scores ``label_index`` among
    ``choice_ids`` at ``mask_pos``.
    """

    ids: tuple[int, ...]
    target_start: int = 1
    target_end: int | None = None
    mask_pos: int = -1
    choice_ids: tuple[int, ...] = ()
    label_index: int = -1
    mlm_targets: tuple[tuple[int, int], ...] = ()


# masked_token_ce is the self-supervised pretraining objective for masked mode
OBJECTIVES = ("mask_label_ce", "next_token_ce", "masked_token_ce")


def collate(batch: Sequence[Example]) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(ex.ids) for ex in batch)
    ids = torch.full((len(batch), T), PAD_ID, dtype=torch.long)
    pad_mask = torch.zeros(len(batch), T, dtype=torch.bool)
    for b, ex in enumerate(batch):
        ids[b, : len(ex.ids)] = torch.tensor(ex.ids, dtype=torch.long)
        pad_mask[b, : len(ex.ids)] = True
    return ids, pad_mask


def example_losses(model: MicroLM, batch: Sequence[Example], objective: str) -> torch.Tensor:
    """Per-example loss vector (B,)."""
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    if not batch:
        raise ValueError("empty batch")
    ids, pad_mask = collate(batch)
    logits = model(ids, pad_mask)

    if objective == "mask_label_ce":
        rows = []
        for b, ex in enumerate(batch):
            picked = logits[b, ex.mask_pos, list(ex.choice_ids)]
            rows.append(-torch.log_softmax(picked, dim=-1)[ex.label_index])
        return torch.stack(rows)

    if objective == "masked_token_ce":
        rows = []
        for b, ex in enumerate(batch):
            pos = [p for p, _ in ex.mlm_targets]
            tgt = torch.tensor([t for _, t in ex.mlm_targets], dtype=torch.long)
            logp = torch.log_softmax(logits[b, pos], dim=-1)
            rows.append(-logp.gather(-1, tgt[:, None]).mean())
        return torch.stack(rows)

    logp = torch.log_softmax(logits[:, :-1], dim=-1)
    nll = -logp.gather(-1, ids[:, 1:, None])[..., 0]
    weights = torch.zeros_like(nll)
    for b, ex in enumerate(batch):
        end = len(ex.ids) if ex.target_end is None else ex.target_end
        if end <= ex.target_start or ex.target_start < 1:
            raise ValueError("next_token_ce needs a non-empty target span starting at position >= 1")
        weights[b, ex.target_start - 1 : end - 1] = 1.0 / (end - ex.target_start)
    return (nll * weights).sum(dim=1)


def batch_loss(model: MicroLM, batch: Sequence[Example], objective: str) -> torch.Tensor:
    loss = example_losses(model, batch, objective).mean()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite {objective} loss: {loss.item()}")
    return loss


def loss_and_grads(model: MicroLM, batch: Sequence[Example], objective: str) -> tuple[float, dict[str, torch.Tensor]]:
    """Mean loss over ``batch`` and a gradient for every named parameter.

    Frozen parameters (``requires_grad=False``) get an all-zero gradient.
    """
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    loss = batch_loss(model, batch, objective)
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    for p in params.values():
        p.grad = None
    return loss.item(), grads


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: str | Path, model: MicroLM, vocab: Vocabulary, extra: dict | None = None) -> None:
    """Write config, vocabulary, adapter/soft-prompt structure and tensors to one archive."""
    from .adapters import adapter_records, model_structure

    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab": vocab.tokens(),
        "structure": model_structure(model),
        "tensors": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "adapters": adapter_records(model),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path) -> tuple[MicroLM, Vocabulary, dict]:
    from .adapters import restore_structure

    payload = torch.load(Path(path), weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    cfg = ModelConfig(**payload["config"])
    vocab = Vocabulary(payload["vocab"][len(SPECIAL_TOKENS):])
    if len(vocab) != cfg.vocab_size:
        raise ShapeMismatch("checkpoint vocabulary does not match config.vocab_size")
    model = MicroLM(cfg)
    restore_structure(model, payload["structure"])
    model.load_state_dict(payload["tensors"], strict=True)
    model.check_shapes()
    return model, vocab, payload["extra"]


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad or not trainable_only)
