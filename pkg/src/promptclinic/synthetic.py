"""Synthetic picture-description corpus with a planted disfluency signal.

AD transcripts insert filler tokens ("uh", "um", "er") at a higher rate than
HC transcripts; everything else is drawn from the same distribution.
"""
from __future__ import annotations

import random
from pathlib import Path

from .chat_corpus import Corpus, Label, Transcript, Utterance, clean_utterance, write_manifest

SCENE = [
    "the boy is standing on the stool",
    "the stool is tipping over",
    "he is reaching for the cookie jar",
    "the girl is asking for a cookie",
    "the mother is drying the dishes",
    "the sink is overflowing",
    "water is running onto the floor",
    "the window is open",
    "there are curtains by the window",
    "the boy is taking cookies",
    "she is not paying attention",
    "the plate is in her hand",
    "there are cups on the counter",
    "the girl has her finger to her mouth",
    "outside there is a garden",
]
FILLERS = ("uh", "um", "er")
INVESTIGATOR = ["tell me what you see", "anything else", "okay good", "what is happening"]


def _utterance(rng: random.Random, filler_rate: float) -> str:
    words = []
    for w in rng.choice(SCENE).split():
        if rng.random() < filler_rate:
            words.append(rng.choice(FILLERS))
        words.append(w)
    return " ".join(words) + " ."


def make_transcript(tid: str, label: Label, rng: random.Random, ad_rate: float = 0.25,
                    hc_rate: float = 0.03, n_utterances: tuple[int, int] = (4, 7)) -> Transcript:
    rate = ad_rate if label is Label.AD else hc_rate
    utts = []
    for i in range(rng.randint(*n_utterances)):
        if i % 3 == 0:
            text = rng.choice(INVESTIGATOR) + " ."
            utts.append(Utterance("INV", text, clean_utterance(text)))
        text = _utterance(rng, rate)
        utts.append(Utterance("PAR", text, clean_utterance(text)))
    return Transcript(tid, tuple(utts), label)


def make_corpus(n: int = 200, seed: int = 0, ad_rate: float = 0.25, hc_rate: float = 0.03) -> Corpus:
    """Balanced corpus of ``n`` transcripts (``n // 2`` per class)."""
    rng = random.Random(seed)
    transcripts = []
    for i in range(n):
        label = Label.AD if i % 2 == 0 else Label.HC
        transcripts.append(make_transcript(f"S{i:03d}", label, rng, ad_rate, hc_rate))
    return Corpus(sorted(transcripts, key=lambda t: t.id))


def to_chat(t: Transcript) -> str:
    lines = ["@UTF8", "@Begin", "@Languages:\teng", "@Participants:\tPAR Participant, INV Investigator"]
    for u in t.utterances:
        lines.append(f"*{u.speaker}:\t{u.raw_text}")
    lines.append("@End")
    return "\n".join(lines) + "\n"


def write_chat_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write one ``.cha`` file per transcript plus ``manifest.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t in corpus:
        (out / f"{t.id}.cha").write_text(to_chat(t), encoding="utf-8")
    manifest = out / "manifest.csv"
    write_manifest(manifest, {t.id: t.label for t in corpus})
    return manifest
