"""Shared oracles and fixtures-as-functions for the test modules."""
from __future__ import annotations

import json
import math
from itertools import product
from pathlib import Path

import torch
from hypothesis import strategies as st

from promptclinic.chat_corpus import parse_chat_file
from promptclinic.errors import MalformedChat

CONFORMANCE_DIR = Path(__file__).parent / "data" / "chat_conformance"

CHAT_CODES = [
    "&uh", "&um", "&=laughs", "(.)", "(..)", "(...)", "[//]", "[/]", "[x 2]", "[: girl]", "[*]",
    "[+ exc]", "<", ">", "+...", "+/.", "+<", "\x15123_456\x15", "&", "[", "]", "(", ")",
]

code_injected_text = st.lists(
    st.one_of(
        st.sampled_from(CHAT_CODES),
        st.text(alphabet="abcdefgh .?&<>[]()+:=x\t", min_size=0, max_size=6),
        st.sampled_from(["the", "boy", "fell", ".", "?", "cookie"]),
    ),
    max_size=12,
).map(" ".join)


def conformance_results() -> list[tuple[str, dict, dict]]:
    """(name, expected, observed) for every file of the conformance corpus."""
    expected = json.loads((CONFORMANCE_DIR / "expected.json").read_text(encoding="utf-8"))
    out = []
    for name in sorted(expected):
        try:
            t = parse_chat_file(CONFORMANCE_DIR / f"{name}.cha")
            got = {"utterances": [[u.speaker, u.clean_text] for u in t.utterances]}
        except MalformedChat:
            got = {"error": "MalformedChat"}
        out.append((name, expected[name], got))
    return out


def central_difference_check(model, loss_fn, params, eps=1e-5, max_entries=6, seed=0):
    """Worst relative error between autograd and central differences.

    ``params`` maps name -> parameter; a few seeded entries of each are probed.
    Relative error is |g - fd| / max(|g|, |fd|, 1e-8).
    """
    for p in model.parameters():
        p.grad = None
    loss = loss_fn()
    named = dict(params)
    grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = {}
    for (name, p), g in zip(named.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.detach().view(-1)
        picks = torch.randperm(flat.numel(), generator=gen)[:max_entries].tolist()
        # always probe the entry with the largest analytic gradient
        picks.append(int(g.abs().view(-1).argmax()))
        err = 0.0
        for i in picks:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            fd = (up - down) / (2 * eps)
            a = g.view(-1)[i].item()
            denom = max(abs(a), abs(fd), 1e-8)
            if abs(a) < 1e-10 and abs(fd) < 1e-10:
                continue
            err = max(err, abs(a - fd) / denom)
        worst[name] = err
    return worst


def enumerate_sequences(vocab_size: int, length: int):
    return list(product(range(vocab_size), repeat=length))


def chain_rule_log_prob(model, ids: list[int], start: int) -> float:
    """Oracle: one forward pass per prefix, reading only the last row each time."""
    total = 0.0
    with torch.no_grad():
        for t in range(start, len(ids)):
            logits = model(torch.tensor([ids[:t]]))[0, -1]
            z = logits - logits.max()
            logp = z[ids[t]].item() - math.log(torch.exp(z).sum().item())
            total += logp
    return total


def tiny_experiment(strategy: str = "verbalizer", n: int = 8, k: int = 2, epochs: int = 3, **extra) -> dict:
    """A seconds-scale experiment config on the synthetic corpus."""
    prompts = {
        "verbalizer": {"mode": "cloze", "pattern": "{input} Diagnosis is <MASK>.",
                       "verbalizer": {"AD": "dementia", "HC": "healthy"}},
        "generative": {"mode": "instruction_response",
                       "pattern": "Input: {input} Instruction: {instruction} Response:",
                       "instruction": "Is there a dementia to the above text?",
                       "verbalizer": {"AD": "Dementia", "HC": "Healthy"}},
        "conditional": {"mode": "conditional_prefix", "pattern": "{label_phrase}. {input}",
                        "verbalizer": {"AD": "The passage has a disorder", "HC": "The passage is fine"}},
    }
    cfg = {
        "name": f"tiny-{strategy}",
        "strategy": strategy,
        "corpus": {"synthetic": {"n": n, "seed": 0}},
        "model": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "max_len": 160},
        "prompt": prompts[strategy],
        "policy": {"strategy": "full_finetune"},
        "hyperparams": {"learning_rate": 0.005, "micro_batch_size": 4, "epochs": epochs},
        "k": k,
        "vote_last": 3,
        "seed": 0,
    }
    cfg.update(extra)
    return cfg
