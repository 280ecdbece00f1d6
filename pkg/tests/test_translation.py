"""Token vocabulary, teacher-forced loss, causality, greedy decoding.

The shift convention (position j predicts token j+1) is pinned by a pair
of constructed logit tables: one rewards the shifted reading and one the
unshifted reading, and only the former may score near zero.
"""

import math

import numpy as np
import pytest

from hialign.autograd import ParameterStore, Tensor, rng_stream
from hialign.encoders import Decoder, EncoderConfig
from hialign.exceptions import ContractError, DataError
from hialign.translation import (
    BOS,
    EOS,
    PAD,
    UNK,
    TokenVocab,
    greedy_decode,
    slt_loss,
)


def tiny_cfg():
    return EncoderConfig(
        frame_dim=6, d_model=8, temporal_layers=1, heads=2, ffn=16, window=7,
        downsample_after_layer=1, llm_layers=1, decoder_layers=1, lora_rank=2,
        lora_alpha=4.0, lora_dropout=0.0, proto_dim=12,
    ).validate()


class TestTokenVocab:
    def test_specials_then_sorted_tokens(self):
        vocab = TokenVocab.from_sentences([["b", "a"], ["c", "a"]])
        assert vocab.tokens[:4] == ["<pad>", "<bos>", "<eos>", "<unk>"]
        assert vocab.tokens[4:] == ["a", "b", "c"]
        assert vocab.size == 7

    def test_encode_brackets_with_bos_eos(self):
        vocab = TokenVocab.from_sentences([["a", "b"]])
        ids = vocab.encode(["b", "a"])
        assert ids[0] == BOS and ids[-1] == EOS
        assert vocab.decode(ids) == ["b", "a"]

    def test_unseen_token_becomes_unk(self):
        vocab = TokenVocab.from_sentences([["a"]])
        assert vocab.encode(["zzz"])[1] == UNK

    def test_decode_stops_at_eos_and_skips_specials(self):
        vocab = TokenVocab.from_sentences([["a", "b"]])
        a, b = vocab.encode(["a"])[1], vocab.encode(["b"])[1]
        assert vocab.decode([PAD, a, BOS, b, EOS, a, a]) == ["a", "b"]

    def test_reserved_collision_rejected(self):
        with pytest.raises(ContractError, match="reserved"):
            TokenVocab.from_sentences([["<eos>", "a"]])


def oracle_slt(logits, ids):
    """Per-position log-softmax CE on the shifted pairs, pads skipped."""
    total, n = 0.0, 0
    for b in range(ids.shape[0]):
        for j in range(ids.shape[1] - 1):
            gold = ids[b, j + 1]
            if gold == PAD:
                continue
            row = logits[b, j]
            lse = math.log(np.exp(row - row.max()).sum()) + row.max()
            total += lse - row[gold]
            n += 1
    return total / n


class TestSltLoss:
    def test_uniform_logits(self):
        logits = Tensor(np.zeros((2, 4, 8)))
        ids = np.array([[BOS, 4, 5, EOS], [BOS, 6, 7, EOS]])
        assert abs(float(slt_loss(logits, ids).data) - math.log(8)) < 1e-9

    def test_confident_correct_logits(self):
        ids = np.array([[BOS, 5, 6, EOS]])
        logits = np.zeros((1, 4, 8))
        for j in range(3):
            logits[0, j, ids[0, j + 1]] = 30.0
        assert float(slt_loss(Tensor(logits), ids).data) < 1e-9

    def test_shift_convention(self):
        # rewarding token j at position j (unshifted) must score badly
        ids = np.array([[BOS, 5, 6, EOS]])
        unshifted = np.zeros((1, 4, 8))
        for j in range(4):
            unshifted[0, j, ids[0, j]] = 30.0
        assert float(slt_loss(Tensor(unshifted), ids).data) > 10.0

    def test_random_case_matches_formula(self):
        rng = rng_stream(1, 60)
        logits = rng.standard_normal((3, 5, 9))
        ids = rng.integers(3, 9, size=(3, 5))
        ids[:, 0] = BOS
        got = float(slt_loss(Tensor(logits), ids).data)
        assert abs(got - oracle_slt(logits, ids)) < 1e-9

    def test_pad_positions_ignored(self):
        rng = rng_stream(2, 60)
        logits = rng.standard_normal((1, 6, 9))
        ids = np.array([[BOS, 4, 5, EOS, PAD, PAD]])
        got = float(slt_loss(Tensor(logits), ids).data)
        assert abs(got - oracle_slt(logits, ids)) < 1e-9

    def test_shape_and_length_errors(self):
        with pytest.raises(ContractError, match="slt_loss"):
            slt_loss(Tensor(np.zeros((2, 4, 8))), np.zeros((2, 3), dtype=int))
        with pytest.raises(ContractError, match=">= 2"):
            slt_loss(Tensor(np.zeros((1, 1, 8))), np.array([[BOS]]))


class TestDecoderCausality:
    def test_future_tokens_never_touch_earlier_logits(self):
        store = ParameterStore()
        dec = Decoder(store, tiny_cfg(), vocab_size=9, seed=3)
        memory = Tensor(rng_stream(3, 60).standard_normal((1, 4, 8)).astype(np.float32))
        a = np.array([[BOS, 5, 6, 7]])
        b = np.array([[BOS, 5, 6, 8]])
        la = dec(a, memory).data
        lb = dec(b, memory).data
        assert la.shape == (1, 4, 9)
        assert np.abs(la[:, :3] - lb[:, :3]).max() == 0.0

    def test_empty_target_rejected(self):
        dec = Decoder(ParameterStore(), tiny_cfg(), vocab_size=9, seed=3)
        memory = Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        with pytest.raises(ContractError, match="non-empty"):
            dec(np.zeros((1, 0), dtype=int), memory)

    def test_out_of_range_ids_rejected(self):
        dec = Decoder(ParameterStore(), tiny_cfg(), vocab_size=9, seed=3)
        memory = Tensor(np.zeros((1, 4, 8), dtype=np.float32))
        with pytest.raises(DataError, match="out of range"):
            dec(np.array([[BOS, 9]]), memory)


def fixed_logits_step(table):
    """step_fn over a precomputed [B,L,V] table (prefix-length slices)."""

    def step(ids):
        return Tensor(table[:, : ids.shape[1]])

    return step


class TestGreedyDecode:
    def test_eos_favoring_model_stops_immediately(self):
        table = np.zeros((1, 8, 6))
        table[:, :, EOS] = 5.0
        out = greedy_decode(fixed_logits_step(table), batch_size=1, max_len=8)
        assert out == [[EOS]]

    def test_deterministic_for_same_inputs(self):
        table = rng_stream(4, 60).standard_normal((2, 6, 7))
        a = greedy_decode(fixed_logits_step(table), batch_size=2, max_len=5)
        b = greedy_decode(fixed_logits_step(table), batch_size=2, max_len=5)
        assert a == b

    def test_max_len_caps_without_eos(self):
        table = np.zeros((1, 8, 6))
        table[:, :, 5] = 3.0
        out = greedy_decode(fixed_logits_step(table), batch_size=1, max_len=3)
        assert out == [[5, 5, 5]]

    def test_tie_goes_to_lowest_id(self):
        table = np.zeros((1, 8, 7))
        table[:, :, 4] = 2.0
        table[:, :, 6] = 2.0
        out = greedy_decode(fixed_logits_step(table), batch_size=1, max_len=1)
        assert out == [[4]]

    def test_rows_finish_independently(self):
        def step(ids):
            cur = ids.shape[1]
            logits = np.zeros((2, cur, 7))
            logits[0, -1, EOS] = 5.0
            logits[1, -1, EOS if cur == 3 else 4] = 5.0
            return Tensor(logits)

        out = greedy_decode(step, batch_size=2, max_len=6)
        assert out == [[EOS], [4, 4, EOS]]

    def test_max_len_domain(self):
        with pytest.raises(ContractError, match="max_len"):
            greedy_decode(lambda ids: None, batch_size=1, max_len=0)

    def test_greedy_sequence_minimizes_teacher_forced_loss(self):
        rng = rng_stream(5, 60)
        v, steps = 7, 4
        table = rng.standard_normal((1, steps + 1, v))
        table[:, :, (PAD, BOS, EOS)] = -10.0  # force a full-length sentence
        hyp = greedy_decode(fixed_logits_step(table), batch_size=1, max_len=steps)
        assert len(hyp[0]) == steps and EOS not in hyp[0]
        ids = np.array([[BOS] + hyp[0]])
        clean = float(slt_loss(Tensor(table[:, : steps + 1]), ids).data)
        for pos in range(1, steps + 1):
            for wrong in range(4, v):
                if wrong == ids[0, pos]:
                    continue
                corrupted = ids.copy()
                corrupted[0, pos] = wrong
                worse = float(slt_loss(Tensor(table[:, : steps + 1]), corrupted).data)
                assert worse > clean
