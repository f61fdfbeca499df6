"""Verbalizer cloze, generative instruction-response and conditional-likelihood classifiers.

Each strategy is deterministic: labels are chosen by argmax over two
log-domain scores, never by sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

from .chat_corpus import LABEL_ORDER, Label
from .errors import LabelWordOOV, LengthOverflow, ModePolicyMismatch
from .micro_lm import Example, MicroLM, Vocabulary, collate, truncate_document
from .prompting import HardTemplate, PromptSpec, Verbalizer, render, template_overhead

STRATEGY_MODES = {"verbalizer": "masked", "generative": "causal", "conditional": "causal"}
STRATEGY_TEMPLATES = {
    "verbalizer": ("cloze",),
    "generative": ("instruction_response",),
    "conditional": ("conditional_prefix", "conditional_suffix"),
}


@dataclass(frozen=True)
class Prediction:
    label: Label
    score_ad: float
    score_hc: float
    strategy: str
    tie: bool = False

    def to_dict(self) -> dict:
        return {"label": self.label.value, "score_AD": self.score_ad, "score_HC": self.score_hc,
                "strategy": self.strategy, "tie": self.tie}


def decide(score_ad: float, score_hc: float, strategy: str) -> Prediction:
    tie = score_ad == score_hc
    label = Label.AD if score_ad >= score_hc else Label.HC
    return Prediction(label, float(score_ad), float(score_hc), strategy, tie)


# --------------------------------------------------------------------------
# batched scoring primitives

def _batched_logits(model: MicroLM, seqs: Sequence[Sequence[int]], batch_size: int = 32):
    """Yield (index, logits[T, V]) for every sequence, in order."""
    for lo in range(0, len(seqs), batch_size):
        chunk = [Example(tuple(s)) for s in seqs[lo: lo + batch_size]]
        ids, pad_mask = collate(chunk)
        logits = model(ids, pad_mask)
        for b, ex in enumerate(chunk):
            yield lo + b, logits[b, : len(ex.ids)]


@torch.no_grad()
def span_log_probs(model: MicroLM, items: Sequence[tuple[Sequence[int], int, int]], batch_size: int = 32) -> list[float]:
    """For each ``(ids, start, end)``: sum over t in [start, end) of log p(ids[t] | ids[:t])."""
    if model.mode != "causal":
        raise ModePolicyMismatch("sequence scoring needs a causal-mode model")
    out = [0.0] * len(items)
    seqs = [it[0] for it in items]
    for i, logits in _batched_logits(model, seqs, batch_size):
        ids, start, end = items[i]
        if end <= start:
            continue
        logp = torch.log_softmax(logits[start - 1: end - 1], dim=-1)
        tgt = torch.tensor(ids[start:end], dtype=torch.long)
        out[i] = float(logp.gather(-1, tgt[:, None]).sum())
    return out


def sequence_log_prob(model: MicroLM, prefix_ids: Sequence[int], continuation_ids: Sequence[int]) -> float:
    """log p(continuation | prefix) by the chain rule."""
    if not continuation_ids:
        return 0.0
    if not prefix_ids:
        raise ValueError("prefix must hold at least one token (e.g. [BOS])")
    n_prompt = 0 if model.soft_prompt is None else model.soft_prompt.length
    total = len(prefix_ids) + len(continuation_ids) + n_prompt
    if total > model.cfg.max_len:
        raise LengthOverflow(f"{total} positions exceed max_len {model.cfg.max_len}")
    ids = list(prefix_ids) + list(continuation_ids)
    return span_log_probs(model, [(ids, len(prefix_ids), len(ids))])[0]


# --------------------------------------------------------------------------
# strategies

class Strategy:
    """Binds a prompt spec and vocabulary to one classification method."""

    name = ""
    objective = ""

    def __init__(self, prompt: PromptSpec, vocab: Vocabulary, max_len: int = 512, reserve: int = 0, batch_size: int = 32):
        if prompt.template.mode not in STRATEGY_TEMPLATES[self.name]:
            raise ModePolicyMismatch(f"{self.name} strategy cannot use a {prompt.template.mode} template")
        self.prompt = prompt
        self.vocab = vocab
        self.max_len = max_len
        self.reserve = reserve
        self.batch_size = batch_size
        self.budget = max_len - reserve - template_overhead(prompt.template, vocab, prompt.verbalizer)
        if self.budget < 0:
            raise LengthOverflow("template alone exceeds max_len")

    @property
    def model_mode(self) -> str:
        return STRATEGY_MODES[self.name]

    @property
    def template(self) -> HardTemplate:
        return self.prompt.template

    @property
    def verbalizer(self) -> Verbalizer:
        return self.prompt.verbalizer

    def check_model(self, model: MicroLM) -> None:
        if model.mode != self.model_mode:
            raise ModePolicyMismatch(f"{self.name} strategy needs a {self.model_mode} model, got {model.mode}")

    def fit(self, doc: str) -> str:
        return truncate_document(doc, self.budget)

    def training_examples(self, docs: Sequence[str], labels: Sequence[Label]) -> list[Example]:
        raise NotImplementedError

    def predict(self, model: MicroLM, docs: Sequence[str]) -> list[Prediction]:
        raise NotImplementedError

    def predict_one(self, model: MicroLM, doc: str) -> Prediction:
        return self.predict(model, [doc])[0]


class VerbalizerStrategy(Strategy):
    name = "verbalizer"
    objective = "mask_label_ce"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.verbalizer.check(self.vocab, single_token=True)
        self.choice_ids = tuple(self.verbalizer.token_ids(self.vocab, lab)[0] for lab in LABEL_ORDER)

    def training_examples(self, docs, labels):
        out = []
        for doc, lab in zip(docs, labels):
            r = render(self.template, self.fit(doc), self.vocab)
            out.append(Example(r.ids, mask_pos=r.anchor, choice_ids=self.choice_ids,
                               label_index=LABEL_ORDER.index(Label(lab))))
        return out

    def mask_logits(self, model: MicroLM, docs: Sequence[str]) -> list[torch.Tensor]:
        """Label-word logits (AD, HC) at the mask anchor for each doc."""
        self.check_model(model)
        rendered = [render(self.template, self.fit(d), self.vocab) for d in docs]
        out = [None] * len(docs)
        with torch.no_grad():
            for i, logits in _batched_logits(model, [r.ids for r in rendered], self.batch_size):
                out[i] = logits[rendered[i].anchor, list(self.choice_ids)]
        return out

    def predict(self, model, docs):
        return [predict_from_label_logits(row, self.name) for row in self.mask_logits(model, docs)]


def predict_from_label_logits(pair: torch.Tensor, strategy: str = "verbalizer") -> Prediction:
    """Softmax restricted to the two label words; scores are the log-probabilities."""
    logp = torch.log_softmax(pair, dim=-1)
    return decide(float(logp[0]), float(logp[1]), strategy)


class GenerativeStrategy(Strategy):
    name = "generative"
    objective = "next_token_ce"

    def __init__(self, *args, normalize: bool = True, decode: str = "constrained", **kwargs):
        super().__init__(*args, **kwargs)
        if decode not in ("constrained", "free"):
            raise ValueError(f"unknown decode mode {decode!r}")
        self.verbalizer.check(self.vocab)
        self.normalize = normalize
        self.decode = decode
        self.responses = {lab: self.verbalizer.token_ids(self.vocab, lab) for lab in LABEL_ORDER}

    def training_examples(self, docs, labels):
        out = []
        for doc, lab in zip(docs, labels):
            r = render(self.template, self.fit(doc), self.vocab)
            resp = self.responses[Label(lab)]
            out.append(Example(r.ids + resp, target_start=r.anchor, target_end=r.anchor + len(resp)))
        return out

    def predict(self, model, docs):
        self.check_model(model)
        if self.decode == "free":
            return [self._free_decode(model, d) for d in docs]
        items = []
        for doc in docs:
            r = render(self.template, self.fit(doc), self.vocab)
            for lab in LABEL_ORDER:
                resp = self.responses[lab]
                items.append((r.ids + resp, r.anchor, r.anchor + len(resp)))
        scores = span_log_probs(model, items, self.batch_size)
        preds = []
        for i in range(len(docs)):
            s = {}
            for j, lab in enumerate(LABEL_ORDER):
                s[lab] = scores[2 * i + j]
                if self.normalize:
                    s[lab] /= len(self.responses[lab])
            preds.append(decide(s[Label.AD], s[Label.HC], self.name))
        return preds

    @torch.no_grad()
    def _free_decode(self, model: MicroLM, doc: str) -> Prediction:
        """Greedy decoding followed by exact match against the response strings."""
        r = render(self.template, self.fit(doc), self.vocab)
        ids = list(r.ids)
        steps = max(len(v) for v in self.responses.values())
        logp_sum = 0.0
        for _ in range(steps):
            logp = torch.log_softmax(model(torch.tensor([ids]))[0, -1], dim=-1)
            nxt = int(logp.argmax())
            logp_sum += float(logp[nxt])
            ids.append(nxt)
            gen = tuple(ids[r.anchor:])
            for lab, resp in self.responses.items():
                if gen == resp:
                    score = logp_sum / len(resp) if self.normalize else logp_sum
                    other = -math.inf
                    return decide(*((score, other) if lab is Label.AD else (other, score)), self.name)
        # no response string matched: report an explicit tie
        return Prediction(Label.AD, -math.inf, -math.inf, self.name, tie=True)


class ConditionalStrategy(Strategy):
    name = "conditional"
    objective = "next_token_ce"

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.verbalizer.check(self.vocab)

    def _render(self, doc: str, lab: Label):
        return render(self.template, self.fit(doc), self.vocab, self.verbalizer, lab)

    def training_examples(self, docs, labels):
        out = []
        for doc, lab in zip(docs, labels):
            r = self._render(doc, Label(lab))
            if r.end > r.anchor:
                out.append(Example(r.ids, target_start=r.anchor, target_end=r.end))
        return out

    def scores(self, model: MicroLM, docs: Sequence[str]) -> list[dict[Label, float]]:
        self.check_model(model)
        items = []
        for doc in docs:
            for lab in LABEL_ORDER:
                r = self._render(doc, lab)
                items.append((r.ids, r.anchor, r.end))
        flat = span_log_probs(model, items, self.batch_size)
        return [{lab: flat[2 * i + j] for j, lab in enumerate(LABEL_ORDER)} for i in range(len(docs))]

    def predict(self, model, docs):
        return [decide(s[Label.AD], s[Label.HC], self.name) for s in self.scores(model, docs)]


STRATEGIES = {cls.name: cls for cls in (VerbalizerStrategy, GenerativeStrategy, ConditionalStrategy)}


def make_strategy(name: str, prompt: PromptSpec, vocab: Vocabulary, max_len: int = 512, reserve: int = 0, **kwargs) -> Strategy:
    try:
        cls = STRATEGIES[name]
    except KeyError:
        raise ValueError(f"unknown strategy {name!r}; choose from {sorted(STRATEGIES)}") from None
    return cls(prompt, vocab, max_len, reserve, **kwargs)


# --------------------------------------------------------------------------
# single-document convenience wrappers

def classify_verbalizer(model: MicroLM, vocab: Vocabulary, template: HardTemplate, verbalizer: Verbalizer, doc: str) -> Prediction:
    strat = VerbalizerStrategy(PromptSpec(template, verbalizer), vocab, model.cfg.max_len)
    return strat.predict_one(model, doc)


def classify_generative(model: MicroLM, vocab: Vocabulary, template: HardTemplate, verbalizer: Verbalizer,
                        doc: str, normalize: bool = True, decode: str = "constrained") -> Prediction:
    reserve = 0 if model.soft_prompt is None else model.soft_prompt.length
    strat = GenerativeStrategy(PromptSpec(template, verbalizer), vocab, model.cfg.max_len, reserve,
                               normalize=normalize, decode=decode)
    return strat.predict_one(model, doc)


def classify_conditional(model: MicroLM, vocab: Vocabulary, template: HardTemplate, verbalizer: Verbalizer, doc: str) -> Prediction:
    reserve = 0 if model.soft_prompt is None else model.soft_prompt.length
    strat = ConditionalStrategy(PromptSpec(template, verbalizer), vocab, model.cfg.max_len, reserve)
    return strat.predict_one(model, doc)
