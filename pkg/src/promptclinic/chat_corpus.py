"""CHAT transcript ingestion: parsing, cleaning and corpus assembly.

Only the subset of CHAT needed for picture-description transcripts is
handled: ``@`` headers, ``*`` main tiers, ``%`` dependent tiers and
tab-indented continuation lines.
"""
from __future__ import annotations

import csv
import enum
import logging
import re
import unicodedata
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import CorpusBalanceError, DataError, DuplicateId, MalformedChat, MissingLabel

logger = logging.getLogger(__name__)

CLEANING_RULES_VERSION = 1

DEFAULT_SPEAKERS = frozenset({"PAR"})


class Label(str, enum.Enum):
    AD = "AD"
    HC = "HC"


# AD first: fixed order used for tie-breaking and as the positive class.
LABEL_ORDER = (Label.AD, Label.HC)


@dataclass(frozen=True)
class Utterance:
    speaker: str
    raw_text: str
    clean_text: str


@dataclass(frozen=True)
class Transcript:
    id: str
    utterances: tuple[Utterance, ...]
    label: Label | None = None

    def with_label(self, label: Label | str) -> "Transcript":
        return Transcript(self.id, self.utterances, Label(label))


@dataclass
class Corpus:
    transcripts: list[Transcript] = field(default_factory=list)

    @property
    def label_counts(self) -> dict[Label, int]:
        counts = Counter(t.label for t in self.transcripts)
        return {lab: counts.get(lab, 0) for lab in LABEL_ORDER}

    def __len__(self) -> int:
        return len(self.transcripts)

    def __iter__(self):
        return iter(self.transcripts)

    def documents(self, speakers: Iterable[str] = DEFAULT_SPEAKERS) -> list[str]:
        speakers = frozenset(speakers)
        return [to_document(t, speakers) for t in self.transcripts]

    def to_json(self) -> dict:
        return {
            "cleaning_rules_version": CLEANING_RULES_VERSION,
            "transcripts": [
                {
                    "id": t.id,
                    "label": t.label.value,
                    "utterances": [[u.speaker, u.raw_text, u.clean_text] for u in t.utterances],
                }
                for t in self.transcripts
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Corpus":
        transcripts = [
            Transcript(
                d["id"],
                tuple(Utterance(*u) for u in d["utterances"]),
                Label(d["label"]),
            )
            for d in data["transcripts"]
        ]
        return cls(transcripts)


# --------------------------------------------------------------------------
# cleaning

_BULLET_RE = re.compile("\x15[^\x15]*\x15")
_FILLER_RE = re.compile(r"(?<!\S)&\S*")
_PAUSE_RE = re.compile(r"\(\.{1,3}\)")
_BRACKET_RE = re.compile(r"\[[^\[\]]*\]")
_ANGLE_RE = re.compile(r"[<>]")
_PLUS_RE = re.compile(r"(?<!\S)\+\S*")
_SPACE_RE = re.compile(r"\s+")


def _clean_once(text: str) -> str:
    text = _BULLET_RE.sub(" ", text)
    text = _FILLER_RE.sub(" ", text)
    text = _PAUSE_RE.sub(" ", text)
    text = _BRACKET_RE.sub(" ", text)
    text = _ANGLE_RE.sub(" ", text)
    text = _PLUS_RE.sub(" ", text)
    return _SPACE_RE.sub(" ", text).strip()


def clean_utterance(raw: str) -> str:
    """Strip CHAT annotation codes from a main-tier payload.

    Rules run in table order and repeat until nothing changes, so removing
    one code can never expose another (e.g. ``<&uh>``) and the function is
    idempotent.
    """
    text = raw
    while True:
        cleaned = _clean_once(text)
        if cleaned == text:
            return cleaned
        text = cleaned


# --------------------------------------------------------------------------
# parsing

def parse_chat(raw: str, transcript_id: str = "") -> Transcript:
    """Parse CHAT text into an unlabeled :class:`Transcript`.

    Raises :class:`MalformedChat` for a missing ``@Begin``/``@End``, a tier
    line without a ``:`` separator, or any unrecognized line.
    """
    lines = raw.lstrip("﻿").splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines or lines[-1].strip() != "@End":
        raise MalformedChat(f"{transcript_id or '<text>'}: missing @End")

    # (kind, speaker, payload) with continuation lines already folded in
    tiers: list[list[str]] = []
    seen_begin = False
    for lineno, line in enumerate(lines[:-1], start=1):
        if not line.strip():
            continue
        if line[0] in " \t":
            if not tiers:
                raise MalformedChat(f"{transcript_id or '<text>'}:{lineno}: continuation before any tier")
            tiers[-1][2] += " " + line.strip()
            continue
        head = line[0]
        if head == "@":
            if line.strip() == "@Begin":
                seen_begin = True
            elif line.strip() == "@End":
                raise MalformedChat(f"{transcript_id or '<text>'}:{lineno}: @End before end of file")
            tiers.append(["@", "", line])
            continue
        if head not in "*%":
            raise MalformedChat(f"{transcript_id or '<text>'}:{lineno}: unrecognized line {line[:30]!r}")
        if not seen_begin:
            raise MalformedChat(f"{transcript_id or '<text>'}: tier line before @Begin")
        code, sep, payload = line[1:].partition(":")
        if not sep or not code or any(c.isspace() for c in code):
            raise MalformedChat(f"{transcript_id or '<text>'}:{lineno}: tier line without ':' separator")
        tiers.append([head, code, payload.strip()])
    if not seen_begin:
        raise MalformedChat(f"{transcript_id or '<text>'}: missing @Begin")

    utterances = []
    for kind, speaker, payload in tiers:
        if kind != "*":
            continue
        clean = clean_utterance(payload)
        if clean:
            utterances.append(Utterance(speaker, payload, clean))
    return Transcript(transcript_id, tuple(utterances))


def parse_chat_file(path: str | Path) -> Transcript:
    path = Path(path)
    return parse_chat(path.read_text(encoding="utf-8"), transcript_id=path.stem)


# --------------------------------------------------------------------------
# corpus

def read_manifest(path: str | Path) -> dict[str, Label]:
    """Read an ``id,label`` CSV manifest."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["id", "label"]:
            raise DataError(f"{path}: manifest header must be 'id,label'")
        manifest = {}
        for row in reader:
            tid = row["id"].strip()
            if tid in manifest:
                raise DuplicateId(f"duplicate manifest id {tid!r}")
            manifest[tid] = Label(row["label"].strip())
    return manifest


def write_manifest(path: str | Path, labels: Mapping[str, Label | str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label"])
        for tid in sorted(labels):
            writer.writerow([tid, Label(labels[tid]).value])


def load_corpus(
    root_path: str | Path,
    label_manifest: Mapping[str, Label | str] | str | Path,
    *,
    strict: bool = False,
    expect_adress: bool = False,
    workers: int = 1,
) -> Corpus:
    """Parse every ``*.cha`` file below ``root_path`` and attach labels.

    Unparseable files are skipped with a warning unless ``strict`` or
    ``expect_adress`` is set, in which case :class:`MalformedChat` propagates.
    ``expect_adress`` additionally asserts the 108 / 54 / 54 composition of
    the ADReSS-2020 training set.
    """
    if not isinstance(label_manifest, Mapping):
        label_manifest = read_manifest(label_manifest)
    manifest = {k: Label(v) for k, v in label_manifest.items()}

    paths: dict[str, Path] = {}
    for path in sorted(Path(root_path).rglob("*.cha")):
        if path.stem in paths:
            raise DuplicateId(f"transcript id {path.stem!r} appears twice ({paths[path.stem]}, {path})")
        paths[path.stem] = path

    for tid in sorted(paths):
        if tid not in manifest:
            raise MissingLabel(f"transcript {tid!r} has no label in the manifest")
    for tid in sorted(manifest):
        if tid not in paths:
            raise MissingLabel(f"manifest id {tid!r} has no transcript file")

    hard_fail = strict or expect_adress

    def _parse(tid: str) -> Transcript | None:
        try:
            return parse_chat_file(paths[tid])
        except (MalformedChat, UnicodeDecodeError) as exc:
            if hard_fail:
                raise MalformedChat(f"{paths[tid]}: {exc}") from exc
            logger.warning("skipping %s: %s", paths[tid], exc)
            return None

    ids = sorted(paths)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parsed = list(pool.map(_parse, ids))
    else:
        parsed = [_parse(tid) for tid in ids]

    corpus = Corpus([t.with_label(manifest[t.id]) for t in parsed if t is not None])
    if expect_adress:
        counts = corpus.label_counts
        if len(corpus) != 108 or counts[Label.AD] != 54 or counts[Label.HC] != 54:
            raise CorpusBalanceError(
                f"expected 108 transcripts (AD 54 / HC 54), got {len(corpus)} "
                f"(AD {counts[Label.AD]} / HC {counts[Label.HC]})"
            )
    return corpus


def to_document(t: Transcript, speakers: Iterable[str] = DEFAULT_SPEAKERS) -> str:
    """Join cleaned utterances of the selected speakers, NFC-normalized and lowercased."""
    speakers = frozenset(speakers)
    if not speakers:
        raise ValueError("speakers must be non-empty")
    text = " ".join(u.clean_text for u in t.utterances if u.speaker in speakers)
    return unicodedata.normalize("NFC", text).lower()
