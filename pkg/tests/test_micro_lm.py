import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from helpers import central_difference_check
from promptclinic.adapters import attach_lora, quantize_model
from promptclinic.errors import NonFiniteLoss, SequenceTooLong, ShapeMismatch
from promptclinic.micro_lm import (
    MASK_ID,
    UNK_ID,
    Example,
    Vocabulary,
    batch_loss,
    count_parameters,
    detokenize,
    forward,
    load_checkpoint,
    loss_and_grads,
    save_checkpoint,
    split_tokens,
    tokenize,
    truncate_document,
)
from promptclinic.prompting import SoftPrompt


def test_round_trip(toy_vocab):
    seq = tokenize(toy_vocab, "the boy fell .")
    assert len(seq.ids) == 4
    assert detokenize(toy_vocab, seq) == "the boy fell ."


def test_oov_maps_to_unk(toy_vocab):
    assert tokenize(toy_vocab, "zzzq").ids == (UNK_ID,)


def test_mask_marker(toy_vocab):
    seq = tokenize(toy_vocab, "diagnosis is <MASK> .")
    assert seq.ids[2] == MASK_ID and seq.mask_positions == (2,)
    assert detokenize(toy_vocab, seq) == "diagnosis is <MASK> ."


def test_sequence_too_long(toy_vocab):
    with pytest.raises(SequenceTooLong):
        tokenize(toy_vocab, " ".join(["the"] * 600), max_len=512)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["the", "boy", "fell", ".", "cookie", "uh", "water", "is"]), max_size=20))
def test_round_trip_property(words):
    vocab = Vocabulary.build(["the boy fell . cookie uh water is"])
    text = " ".join(words)
    assert detokenize(vocab, tokenize(vocab, text)) == text


def test_split_tokens_punctuation():
    assert split_tokens("don't stop, now.") == ["don't", "stop", ",", "now", "."]


@pytest.mark.parametrize("n, budget, expected", [(10, 512, 10), (600, 500, 500), (5, 0, 0)])
def test_truncate_document(n, budget, expected):
    doc = " ".join(f"w{i}" for i in range(n))
    out = truncate_document(doc, budget)
    assert split_tokens(out) == split_tokens(doc)[:expected]


def test_causality_position_five(causal_model):
    ids = torch.arange(5, 15)[None] % len(causal_model.tok_emb.weight)
    base = causal_model(ids)
    ids2 = ids.clone()
    ids2[0, 5] = (ids2[0, 5] + 1) % causal_model.cfg.vocab_size
    pert = causal_model(ids2)
    assert torch.equal(base[0, :5], pert[0, :5])
    assert not torch.equal(base[0, 5:], pert[0, 5:])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_causality_property(data):
    model = tiny_model(12, "causal", seed=1)
    T = data.draw(st.integers(2, 20))
    ids = data.draw(st.lists(st.integers(0, 11), min_size=T, max_size=T))
    t = data.draw(st.integers(0, T - 2))
    tail = data.draw(st.lists(st.integers(0, 11), min_size=T - t - 1, max_size=T - t - 1))
    a = model(torch.tensor([ids]))
    b = model(torch.tensor([ids[: t + 1] + tail]))
    assert torch.equal(a[0, : t + 1], b[0, : t + 1])


def test_masked_mode_attends_everywhere(masked_model):
    ids = torch.tensor([[5, 6, 7, 8, 9]])
    base = masked_model(ids)
    ids2 = ids.clone()
    ids2[0, 4] = 10
    assert not torch.equal(base[0, 0], masked_model(ids2)[0, 0])


def test_masked_mode_without_masks(masked_model):
    out = masked_model(torch.tensor([[5, 6, 7]]))
    assert out.shape == (1, 3, masked_model.cfg.vocab_size)
    assert torch.isfinite(out).all()


def test_softmax_normalization(causal_model):
    logits = forward(causal_model, [5, 6, 7, 8])
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(4, dtype=logits.dtype), atol=1e-6)
    assert torch.isfinite(logits).all()


def test_determinism(toy_vocab):
    a = forward(tiny_model(len(toy_vocab), seed=7), [5, 6, 7])
    b = forward(tiny_model(len(toy_vocab), seed=7), [5, 6, 7])
    assert torch.equal(a, b)


def test_padding_does_not_change_real_positions(causal_model):
    single = causal_model(torch.tensor([[5, 6, 7]]))
    ids = torch.tensor([[5, 6, 7, 0, 0], [8, 9, 10, 11, 12]])
    mask = torch.tensor([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=torch.bool)
    batched = causal_model(ids, mask)
    assert torch.allclose(batched[0, :3], single[0], atol=1e-12)


def _zero_model(vocab_size, mode):
    model = tiny_model(vocab_size, mode)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def test_uniform_next_token_loss():
    V = 17
    model = _zero_model(V, "causal")
    loss = batch_loss(model, [Example((1, 5, 6, 7))], "next_token_ce")
    assert loss.item() == pytest.approx(math.log(V), abs=1e-12)


def test_uniform_mask_label_loss():
    model = _zero_model(11, "masked")
    ex = Example((5, MASK_ID, 6), mask_pos=1, choice_ids=(7, 8), label_index=0)
    assert batch_loss(model, [ex], "mask_label_ce").item() == pytest.approx(math.log(2), abs=1e-12)


def test_loss_is_batch_mean(causal_model):
    a, b = Example((1, 5, 6, 7)), Example((1, 8, 9))
    la = batch_loss(causal_model, [a], "next_token_ce").item()
    lb = batch_loss(causal_model, [b], "next_token_ce").item()
    lab = batch_loss(causal_model, [a, b], "next_token_ce").item()
    assert lab == pytest.approx((la + lb) / 2, abs=1e-12)


def test_non_finite_loss_raises(causal_model):
    with torch.no_grad():
        causal_model.tok_emb.weight[5, 0] = float("nan")
    with pytest.raises(NonFiniteLoss):
        batch_loss(causal_model, [Example((1, 5, 6))], "next_token_ce")


def _groups(model):
    return {n: p for n, p in model.named_parameters() if p.requires_grad}


@pytest.mark.parametrize("mode, objective, batch", [
    ("causal", "next_token_ce", [Example((1, 5, 6, 7, 8), target_start=2), Example((1, 9, 10))]),
    ("masked", "mask_label_ce", [Example((5, MASK_ID, 6, 7), mask_pos=1, choice_ids=(8, 9), label_index=1)]),
    ("masked", "masked_token_ce", [Example((5, MASK_ID, 6, MASK_ID), mlm_targets=((1, 8), (3, 10)))]),
])
def test_finite_differences_every_group(mode, objective, batch):
    model = tiny_model(13, mode, seed=3)
    worst = central_difference_check(model, lambda: batch_loss(model, batch, objective), _groups(model))
    kinds = {"tok_emb", "pos_emb", "attn", "ff1", "ff2", "ln1", "ln2", "ln_f"}
    assert all(any(k in n for n in worst) for k in kinds)
    assert max(worst.values()) <= 1e-4, {k: v for k, v in worst.items() if v > 1e-4}


def test_finite_differences_untied_head():
    model = tiny_model(11, "causal", seed=2, tie_embeddings=False)
    batch = [Example((1, 5, 6, 7))]
    worst = central_difference_check(model, lambda: batch_loss(model, batch, "next_token_ce"), _groups(model))
    assert "head.weight" in worst
    assert max(worst.values()) <= 1e-4


def test_loss_and_grads_zero_for_frozen(causal_model):
    causal_model.pos_emb.weight.requires_grad_(False)
    _, grads = loss_and_grads(causal_model, [Example((1, 5, 6))], "next_token_ce")
    assert torch.count_nonzero(grads["pos_emb.weight"]) == 0
    assert torch.count_nonzero(grads["tok_emb.weight"]) > 0


def test_overfit_one_batch():
    # distinct first tokens: a shared prefix would leave irreducible entropy
    model = tiny_model(20, "causal", seed=0)
    batch = [Example((5, 6, 7, 8, 9)), Example((10, 11, 12)), Example((13, 14, 15, 16)), Example((17, 18, 19, 5))]
    opt = torch.optim.Adam(model.parameters(), lr=1e-2)
    for _ in range(200):
        opt.zero_grad()
        loss = batch_loss(model, batch, "next_token_ce")
        loss.backward()
        opt.step()
    assert batch_loss(model, batch, "next_token_ce").item() < 0.1


def test_shape_mismatch(causal_model):
    with pytest.raises(ShapeMismatch):
        causal_model(torch.tensor([[causal_model.cfg.vocab_size]]))


def test_sequence_longer_than_max_len(causal_model):
    with pytest.raises(SequenceTooLong):
        causal_model(torch.ones(1, causal_model.cfg.max_len + 1, dtype=torch.long))


@pytest.mark.parametrize("extras", ["plain", "lora_quant", "soft_prompt"])
def test_checkpoint_bit_exact(tmp_path, toy_vocab, extras):
    model = tiny_model(len(toy_vocab), "causal", seed=4)
    if extras == "lora_quant":
        attach_lora(model, ("q", "v"), rank=2, seed=1)
        with torch.no_grad():
            for name, p in model.named_parameters():
                if "lora_B" in name:
                    p.normal_()
        quantize_model(model)
    elif extras == "soft_prompt":
        model.soft_prompt = SoftPrompt.random(3, model.cfg.d_model, seed=2)
    path = tmp_path / "m.pt"
    save_checkpoint(path, model, toy_vocab, {"note": 1})
    loaded, vocab, extra = load_checkpoint(path)
    assert vocab.tokens() == toy_vocab.tokens() and extra == {"note": 1}
    ids = torch.tensor([[5, 6, 7, 8]])
    assert torch.equal(model(ids), loaded(ids))
    assert count_parameters(model) == count_parameters(loaded)
