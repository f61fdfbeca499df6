import json

import pytest
from hypothesis import given, settings

from helpers import code_injected_text, conformance_results
from promptclinic.chat_corpus import (
    Corpus,
    Label,
    Transcript,
    Utterance,
    clean_utterance,
    load_corpus,
    parse_chat,
    read_manifest,
    to_document,
    write_manifest,
)
from promptclinic.errors import CorpusBalanceError, DataError, DuplicateId, MalformedChat, MissingLabel
from promptclinic.synthetic import make_corpus, write_chat_corpus


def test_minimal_file():
    t = parse_chat("@Begin\n*PAR:\tthe boy fell .\n@End")
    assert len(t.utterances) == 1
    u = t.utterances[0]
    assert (u.speaker, u.raw_text, u.clean_text) == ("PAR", "the boy fell .", "the boy fell .")


def test_dependent_tier_excluded():
    t = parse_chat("@Begin\n*PAR:\tthe boy fell .\n%mor:\tdet|the n|boy v|fall .\n@End")
    assert len(t.utterances) == 1
    assert "det|" not in t.utterances[0].raw_text


@pytest.mark.parametrize("raw, cleaned", [
    ("&uh the boy (.) fell [//] fell down .", "the boy fell fell down ."),
    ("the dog [x 2] barked .", "the dog barked ."),
    ("the boy fell .", "the boy fell ."),
    ("<&uh> the boy", "the boy"),
    ("", ""),
])
def test_clean_examples(raw, cleaned):
    assert clean_utterance(raw) == cleaned


@settings(max_examples=1000, deadline=None)
@given(code_injected_text)
def test_cleaning_idempotent(text):
    once = clean_utterance(text)
    assert clean_utterance(once) == once


@settings(max_examples=300, deadline=None)
@given(code_injected_text)
def test_cleaning_output_has_no_collapsible_whitespace(text):
    out = clean_utterance(text)
    assert out == out.strip()
    assert "  " not in out and "\t" not in out


@pytest.mark.parametrize("name, expected, got", conformance_results(), ids=lambda v: v if isinstance(v, str) else "")
def test_conformance_corpus(name, expected, got):
    assert got == expected


def test_malformed_cases():
    with pytest.raises(MalformedChat):
        parse_chat("*PAR:\tno begin .\n@End")
    with pytest.raises(MalformedChat):
        parse_chat("@Begin\n*PAR:\tno end .\n")
    with pytest.raises(MalformedChat):
        parse_chat("\tcontinuation first\n@Begin\n@End")


def _transcript():
    return Transcript("t1", (
        Utterance("PAR", "the boy fell .", "the boy fell ."),
        Utterance("INV", "go on .", "go on ."),
    ), Label.AD)


def test_to_document_speaker_filter():
    t = _transcript()
    assert to_document(t, {"PAR"}) == "the boy fell ."
    assert to_document(t, {"PAR", "INV"}) == "the boy fell . go on ."
    assert to_document(t, {"XYZ"}) == ""


def test_to_document_normalizes_and_lowercases():
    t = Transcript("t", (Utterance("PAR", "x", "The Café ."),))
    assert to_document(t) == "the café ."


def test_corpus_json_round_trip():
    c = make_corpus(10, seed=3)
    again = Corpus.from_json(json.loads(json.dumps(c.to_json())))
    assert again.to_json() == c.to_json()
    assert again.documents() == c.documents()


def test_load_synthetic_directory(tmp_path):
    c = make_corpus(12, seed=1)
    manifest = write_chat_corpus(c, tmp_path / "chat")
    loaded = load_corpus(tmp_path / "chat", manifest)
    assert len(loaded) == 12
    assert loaded.label_counts == {Label.AD: 6, Label.HC: 6}
    assert loaded.documents() == c.documents()


def test_load_parallel_matches_sequential(tmp_path):
    manifest = write_chat_corpus(make_corpus(10), tmp_path)
    a = load_corpus(tmp_path, manifest)
    b = load_corpus(tmp_path, manifest, workers=4)
    assert a.to_json() == b.to_json()


def test_missing_label_both_directions(tmp_path):
    manifest = write_chat_corpus(make_corpus(4), tmp_path)
    labels = read_manifest(manifest)
    labels.pop("S000")
    write_manifest(manifest, labels)
    with pytest.raises(MissingLabel):
        load_corpus(tmp_path, manifest)
    labels["S000"] = Label.AD
    labels["S999"] = Label.HC
    write_manifest(manifest, labels)
    with pytest.raises(MissingLabel):
        load_corpus(tmp_path, manifest)


def test_duplicate_ids(tmp_path):
    manifest = write_chat_corpus(make_corpus(4), tmp_path)
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "S001.cha").write_text((tmp_path / "S001.cha").read_text())
    with pytest.raises(DuplicateId):
        load_corpus(tmp_path, manifest)
    manifest.write_text("id,label\nS000,AD\nS000,HC\n")
    with pytest.raises(DuplicateId):
        read_manifest(manifest)


def test_bad_manifest_header(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("name,class\na,AD\n")
    with pytest.raises(DataError):
        read_manifest(p)


def test_malformed_file_skipped_unless_strict(tmp_path):
    manifest = write_chat_corpus(make_corpus(4), tmp_path)
    (tmp_path / "S002.cha").write_text("@Begin\n*PAR:\tbroken\n")
    assert len(load_corpus(tmp_path, manifest)) == 3
    with pytest.raises(MalformedChat, match="S002"):
        load_corpus(tmp_path, manifest, strict=True)


def test_expect_adress_composition(tmp_path):
    manifest = write_chat_corpus(make_corpus(108), tmp_path)
    c = load_corpus(tmp_path, manifest, expect_adress=True)
    assert len(c) == 108 and c.label_counts == {Label.AD: 54, Label.HC: 54}
    small = tmp_path / "small"
    m2 = write_chat_corpus(make_corpus(10), small)
    with pytest.raises(CorpusBalanceError):
        load_corpus(small, m2, expect_adress=True)
