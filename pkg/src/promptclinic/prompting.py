"""Hard templates, verbalizers and soft prompts."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

import torch
from torch import nn

from .chat_corpus import LABEL_ORDER, Label
from .errors import LabelWordOOV, LengthOverflow, MultipleMasks, SlotMissing
from .micro_lm import BOS_ID, MASK_ID, UNK_ID, TokenSequence, Vocabulary, split_tokens

MODES = ("cloze", "instruction_response", "conditional_prefix", "conditional_suffix")
CAUSAL_MODES = ("instruction_response", "conditional_prefix", "conditional_suffix")
RESPONSE_ANCHOR = "Response:"

_SLOT_RE = re.compile(r"(\{input\}|\{instruction\}|\{label_phrase\}|<MASK>)")


@dataclass(frozen=True)
class HardTemplate:
    mode: str
    pattern: str
    instruction: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown template mode {self.mode!r}")
        slots = _SLOT_RE.findall(self.pattern)
        if slots.count("{input}") != 1:
            raise SlotMissing(f"pattern must contain exactly one {{input}} slot: {self.pattern!r}")
        n_mask = slots.count("<MASK>")
        if self.mode == "cloze":
            if n_mask == 0:
                raise SlotMissing("cloze pattern has no <MASK> slot")
            if n_mask > 1:
                raise MultipleMasks(f"cloze pattern has {n_mask} <MASK> slots")
        elif n_mask:
            raise MultipleMasks(f"<MASK> is only allowed in cloze patterns ({self.mode})")
        if self.mode == "instruction_response":
            if "{instruction}" not in slots:
                raise SlotMissing("instruction_response pattern needs an {instruction} slot")
            if not self.pattern.rstrip().endswith(RESPONSE_ANCHOR):
                raise SlotMissing(f"instruction_response pattern must end with {RESPONSE_ANCHOR!r}")
        if self.mode.startswith("conditional"):
            if slots.count("{label_phrase}") != 1:
                raise SlotMissing("conditional pattern needs exactly one {label_phrase} slot")
            before = slots.index("{label_phrase}") < slots.index("{input}")
            if before != (self.mode == "conditional_prefix"):
                raise SlotMissing(f"{self.mode}: {{label_phrase}} is on the wrong side of {{input}}")

    @property
    def causal(self) -> bool:
        return self.mode in CAUSAL_MODES

    def literal_text(self) -> str:
        """Template text with slots removed (instruction filled in)."""
        return _SLOT_RE.sub(lambda m: self.instruction if m.group(0) == "{instruction}" else " ", self.pattern)


@dataclass(frozen=True)
class Verbalizer:
    """Label -> label word(s). For conditional templates the words are label phrases."""

    words: Mapping[Label, str]

    def __post_init__(self):
        words = {Label(k): v for k, v in dict(self.words).items()}
        if set(words) != set(LABEL_ORDER):
            raise ValueError(f"verbalizer must map exactly {[lab.value for lab in LABEL_ORDER]}")
        if any(not split_tokens(w) for w in words.values()):
            raise ValueError("label words must be non-empty")
        object.__setattr__(self, "words", words)

    def __getitem__(self, label: Label | str) -> str:
        return self.words[Label(label)]

    def token_ids(self, vocab: Vocabulary, label: Label | str) -> tuple[int, ...]:
        ids = tuple(vocab.encode(self[label]))
        if UNK_ID in ids:
            raise LabelWordOOV(f"label word {self[label]!r} is not in the vocabulary")
        return ids

    def check(self, vocab: Vocabulary, single_token: bool = False) -> None:
        seqs = [self.token_ids(vocab, lab) for lab in LABEL_ORDER]
        if len(set(seqs)) != len(seqs):
            raise ValueError("label words must be distinct")
        if single_token and any(len(s) != 1 for s in seqs):
            raise LabelWordOOV("cloze label words must each be a single vocabulary token")


@dataclass(frozen=True)
class Rendered:
    """Token ids plus the anchor: mask index (cloze), response start
    (instruction_response) or continuation start (conditional). ``end`` closes
    the scored continuation for conditional templates."""

    seq: TokenSequence
    anchor: int
    end: int

    @property
    def ids(self) -> tuple[int, ...]:
        return self.seq.ids


def render(
    template: HardTemplate,
    doc: str,
    vocab: Vocabulary,
    verbalizer: Verbalizer | None = None,
    label: Label | str | None = None,
    max_len: int | None = None,
) -> Rendered:
    """Fill ``template`` with ``doc`` (and the label phrase for conditional modes).

    Causal templates start with ``[BOS]``.
    """
    ids: list[int] = [BOS_ID] if template.causal else []
    anchor = end = -1
    for piece in _SLOT_RE.split(template.pattern):
        if piece == "{input}":
            start = len(ids)
            ids += vocab.encode(doc)
            if template.mode == "conditional_prefix":
                anchor, end = start, len(ids)
        elif piece == "{instruction}":
            ids += vocab.encode(template.instruction)
        elif piece == "{label_phrase}":
            if verbalizer is None or label is None:
                raise SlotMissing("conditional template needs a verbalizer and a label")
            ids += verbalizer.token_ids(vocab, label)
        elif piece == "<MASK>":
            anchor = len(ids)
            ids.append(MASK_ID)
        else:
            ids += vocab.encode(piece)
    if template.mode == "instruction_response":
        anchor = end = len(ids)
    elif template.mode == "conditional_suffix":
        anchor, end = 1, len(ids)
    elif template.mode == "cloze":
        end = len(ids)
    if max_len is not None and len(ids) > max_len:
        raise LengthOverflow(f"rendered prompt has {len(ids)} tokens, max_len is {max_len}")
    masks = (anchor,) if template.mode == "cloze" else ()
    return Rendered(TokenSequence(tuple(ids), masks), anchor, end)


def template_overhead(template: HardTemplate, vocab: Vocabulary, verbalizer: Verbalizer | None = None) -> int:
    """Rendered length with an empty document, including the longest label string."""
    longest = 0
    # cloze predicts the label word in place of <MASK>, so nothing is appended
    if verbalizer is not None and template.mode != "cloze":
        longest = max(len(vocab.encode(verbalizer[lab])) for lab in LABEL_ORDER)
    base = len(render(template, "", vocab, verbalizer, LABEL_ORDER[0]).ids)
    if template.mode.startswith("conditional"):
        base -= len(vocab.encode(verbalizer[LABEL_ORDER[0]]))
    return base + longest


# --------------------------------------------------------------------------
# soft prompts

class SoftPrompt(nn.Module):
    def __init__(self, vectors: torch.Tensor):
        super().__init__()
        if vectors.dim() != 2 or vectors.shape[0] < 1:
            raise ValueError("soft prompt needs n_prompt >= 1 rows")
        if not torch.isfinite(vectors).all():
            raise ValueError("soft prompt vectors must be finite")
        self.vectors = nn.Parameter(vectors.clone())

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @classmethod
    def zeros(cls, n_prompt: int, d_model: int, dtype=torch.float64) -> "SoftPrompt":
        return cls(torch.zeros(n_prompt, d_model, dtype=dtype))

    @classmethod
    def random(cls, n_prompt: int, d_model: int, seed: int = 0, std: float = 0.02, dtype=torch.float64):
        gen = torch.Generator().manual_seed(seed)
        return cls(torch.randn(n_prompt, d_model, generator=gen, dtype=dtype) * std)

    @classmethod
    def from_tokens(cls, embedding: torch.Tensor, token_ids, n_prompt: int, seed: int = 0, std: float = 0.02):
        """Warm start from embeddings of ``token_ids``; pad with random rows if too few."""
        token_ids = list(token_ids)[:n_prompt]
        rows = [embedding[i].detach() for i in token_ids]
        if len(rows) < n_prompt:
            gen = torch.Generator().manual_seed(seed)
            extra = torch.randn(n_prompt - len(rows), embedding.shape[1], generator=gen, dtype=embedding.dtype) * std
            rows += list(extra)
        return cls(torch.stack(rows))


def prepend_soft_prompt(embedded: torch.Tensor, sp: SoftPrompt | torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    """Concatenate prompt vectors in front of an embedded sequence ((T, d) or (B, T, d))."""
    vectors = sp.vectors if isinstance(sp, SoftPrompt) else sp
    if vectors.shape[-1] != embedded.shape[-1]:
        raise ValueError(f"soft prompt width {vectors.shape[-1]} != embedding width {embedded.shape[-1]}")
    total = vectors.shape[0] + embedded.shape[-2]
    if max_len is not None and total > max_len:
        raise LengthOverflow(f"{total} positions with soft prompt exceed max_len {max_len}")
    if embedded.dim() == 2:
        return torch.cat([vectors, embedded], dim=0)
    return torch.cat([vectors.expand(embedded.shape[0], -1, -1), embedded], dim=1)


def shift_anchor(anchor: int, sp: SoftPrompt | None) -> int:
    return anchor + (0 if sp is None else sp.length)


# --------------------------------------------------------------------------
# config records

@dataclass(frozen=True)
class SoftPromptSpec:
    length: int = 16
    init: str = "template"  # or "random"


@dataclass(frozen=True)
class PromptSpec:
    template: HardTemplate
    verbalizer: Verbalizer
    soft_prompt: SoftPromptSpec = field(default_factory=SoftPromptSpec)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PromptSpec":
        sp = data.get("soft_prompt") or {}
        return cls(
            HardTemplate(data["mode"], data["pattern"], data.get("instruction", "")),
            Verbalizer(data["verbalizer"]),
            SoftPromptSpec(int(sp.get("length", 16)), sp.get("init", "template")),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.template.mode,
            "pattern": self.template.pattern,
            "instruction": self.template.instruction,
            "verbalizer": {lab.value: self.verbalizer[lab] for lab in LABEL_ORDER},
            "soft_prompt": {"length": self.soft_prompt.length, "init": self.soft_prompt.init},
        }

    def vocabulary_text(self) -> list[str]:
        return [self.template.literal_text()] + [self.verbalizer[lab] for lab in LABEL_ORDER]
