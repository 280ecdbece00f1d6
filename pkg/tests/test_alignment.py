"""Localization and contrastive objectives against closed forms.

The dual-softmax aggregation has an independent three-line numpy oracle;
InfoNCE hand values: B=1 gives 0, all-equal similarities give ln B, and
two orthonormal aligned pairs at tau=1 give ln(1 + e^-1) = 0.31326.
"""

import itertools
import math

import numpy as np
import pytest

from hialign import ops
from hialign.alignment import (
    TAU_C_INIT,
    TAU_T_INIT,
    TAU_U_INIT,
    align_loss,
    localize,
    pretrain_loss,
    psp_loss,
    similarity_scores,
)
from hialign.autograd import Tape, Tensor, rng_stream
from hialign.exceptions import ContractError
from hialign.gradcheck import numeric_gradient


def oracle_localize(s, tau_t, tau_u):
    """Direct evaluation of the aggregation formula."""
    et = np.exp(s / tau_t)
    s_hat_t = et / et.sum(axis=0, keepdims=True)
    eu = np.exp(s / tau_u)
    s_hat_u = eu / eu.sum(axis=1, keepdims=True)
    return (s_hat_t * s_hat_u).sum(axis=0)


def rand_sim_map(seed, t, u1):
    # cosine-like range keeps the softmaxes comfortably finite at tau 0.1
    return rng_stream(seed, 50).uniform(-1.0, 1.0, size=(t, u1))


class TestSimilarityScores:
    def test_matching_row_scores_one(self):
        p = np.zeros((4, 3), dtype=np.float64)
        p[:, 1] = [1.0, 0.0, 0.0, 0.0]
        p[:, 2] = [0.0, 1.0, 0.0, 0.0]
        zp = Tensor(np.array([[2.0, 0.0, 0.0, 0.0]]))
        s = similarity_scores(zp, p)
        assert abs(s.data[0, 1] - 1.0) < 1e-6

    def test_non_sign_column_near_zero(self):
        p = np.zeros((4, 3), dtype=np.float64)
        p[:, 1:] = rng_stream(1, 50).standard_normal((4, 2))
        zp = Tensor(rng_stream(2, 50).standard_normal((5, 4)))
        s = similarity_scores(zp, p)
        assert np.abs(s.data[:, 0]).max() < 1e-6

    def test_random_vs_scalar_loop(self):
        zp = rng_stream(3, 50).standard_normal((6, 4))
        p = rng_stream(4, 50).standard_normal((4, 5))
        s = similarity_scores(Tensor(zp), p).data
        for i in range(6):
            for j in range(5):
                dot = float(zp[i] @ p[:, j])
                want = dot / max(np.linalg.norm(zp[i]) * np.linalg.norm(p[:, j]), 1e-8)
                assert abs(s[i, j] - want) < 1e-9

    def test_batched_matches_per_sample(self):
        zp = rng_stream(5, 50).standard_normal((2, 3, 4))
        p = rng_stream(6, 50).standard_normal((4, 5))
        batched = similarity_scores(Tensor(zp), p).data
        for b in range(2):
            single = similarity_scores(Tensor(zp[b]), p).data
            assert np.allclose(batched[b], single, atol=1e-12)

    def test_prototypes_receive_no_gradient(self):
        zp = Tensor(rng_stream(7, 50).standard_normal((3, 4)), requires_grad=True)
        p = Tensor(rng_stream(8, 50).standard_normal((4, 5)))
        tape = Tape()
        with tape:
            loss = ops.sum_(similarity_scores(zp, p))
        tape.backward(loss)
        assert zp.grad is not None
        assert p.grad is None


class TestLocalize:
    def test_constant_map_is_uniform(self):
        s = Tensor(np.full((4, 5), 0.3))
        e = localize(s, TAU_T_INIT, TAU_U_INIT)
        assert np.abs(e.data - 0.2).max() < 1e-9

    def test_uniform_any_shape(self):
        for t, u1 in [(1, 2), (7, 3), (12, 9)]:
            e = localize(Tensor(np.zeros((t, u1))), 0.1, 0.1)
            assert np.abs(e.data - 1.0 / u1).max() < 1e-9

    def test_single_timestep_reduces_to_prototype_softmax(self):
        s = Tensor(rand_sim_map(9, 1, 6))
        e = localize(s, 0.3, 0.2)
        want = ops.softmax_temp(s, axis=1, tau=0.2).data[0]
        assert np.abs(e.data - want).max() < 1e-12

    def test_matches_formula_oracle(self):
        for seed in range(8):
            s = rand_sim_map(seed, 5, 7)
            e = localize(Tensor(s), 0.1, 0.1)
            assert np.abs(e.data - oracle_localize(s, 0.1, 0.1)).max() < 1e-9

    def test_softmax_factors_normalize(self):
        s = Tensor(rand_sim_map(10, 6, 4))
        s_hat_t = ops.softmax_temp(s, axis=0, tau=0.1).data
        s_hat_u = ops.softmax_temp(s, axis=1, tau=0.1).data
        assert np.abs(s_hat_t.sum(axis=0) - 1.0).max() < 1e-6
        assert np.abs(s_hat_u.sum(axis=1) - 1.0).max() < 1e-6

    def test_scores_strictly_inside_unit_interval(self):
        for seed in range(8):
            e = localize(Tensor(rand_sim_map(seed, 4, 6)), 0.1, 0.1).data
            assert (e > 0.0).all() and (e < 1.0).all()

    def test_padded_timesteps_carry_no_mass(self):
        s_real = rand_sim_map(11, 3, 5)
        junk = np.full((2, 5), 37.0)
        s_padded = np.concatenate([s_real, junk], axis=0)[None]
        mask = np.array([[True, True, True, False, False]])
        masked = localize(Tensor(s_padded), 0.1, 0.1, time_mask=mask)
        trimmed = localize(Tensor(s_real), 0.1, 0.1)
        assert np.abs(masked.data[0] - trimmed.data).max() < 1e-9

    def test_batched_matches_per_sample(self):
        s = np.stack([rand_sim_map(12, 4, 5), rand_sim_map(13, 4, 5)])
        batched = localize(Tensor(s), 0.1, 0.1).data
        for b in range(2):
            single = localize(Tensor(s[b]), 0.1, 0.1).data
            assert np.allclose(batched[b], single, atol=1e-12)


class TestPspLoss:
    def test_uniform_scores_all_zero_labels(self):
        # E = 1/5 on four gloss entries, H = 0: mean(-log(0.8)) = 0.22314
        e = localize(Tensor(np.zeros((3, 5))), 0.1, 0.1)
        loss = psp_loss(e, np.zeros(4))
        assert abs(float(loss.data) - (-math.log(0.8))) < 1e-9

    def test_vanishing_scores_empty_labels(self):
        e_hat = Tensor(np.array([0.5, 1e-12, 1e-12, 1e-12]))
        loss = psp_loss(e_hat, np.zeros(3))
        assert float(loss.data) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError, match="psp_loss"):
            psp_loss(Tensor(np.full(5, 0.2)), np.zeros(5))

    def test_batched_labels(self):
        s = np.stack([rand_sim_map(14, 4, 5), rand_sim_map(15, 4, 5)])
        h = np.array([[1, 0, 0, 1], [0, 1, 0, 0]], dtype=np.float64)
        loss = psp_loss(localize(Tensor(s), 0.1, 0.1), h)
        assert loss.shape == ()
        per = [
            float(psp_loss(localize(Tensor(s[b]), 0.1, 0.1), h[b]).data)
            for b in range(2)
        ]
        assert abs(float(loss.data) - np.mean(per)) < 1e-9

    def test_gradient_through_localize(self):
        s = Tensor(rand_sim_map(16, 4, 5), requires_grad=True)
        h = np.array([1.0, 0.0, 1.0, 0.0])

        def run():
            return psp_loss(localize(s, 0.1, 0.1), h)

        tape = Tape()
        with tape:
            loss = run()
        tape.backward(loss)
        analytic = s.grad.copy()
        numeric = numeric_gradient(lambda _: float(run().data), s.data)
        rel = np.abs(analytic - numeric) / np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8
        )
        assert rel.max() < 1e-4


class TestAlignLoss:
    def test_single_pair_is_zero(self):
        v = Tensor(rng_stream(17, 50).standard_normal((1, 6)))
        t = Tensor(rng_stream(18, 50).standard_normal((1, 6)))
        assert abs(float(align_loss(v, t, 0.07).data)) < 1e-9

    def test_equal_similarities_give_log_batch(self):
        row = rng_stream(19, 50).standard_normal(6)
        m = Tensor(np.tile(row, (3, 1)))
        assert abs(float(align_loss(m, m, 0.5).data) - math.log(3)) < 1e-6

    def test_two_orthonormal_pairs_closed_form(self):
        eye = Tensor(np.eye(2))
        loss = float(align_loss(eye, eye, 1.0).data)
        assert abs(loss - 0.31326) < 1e-4
        assert abs(loss - math.log(1.0 + math.exp(-1.0))) < 1e-9

    def test_permutation_invariant(self):
        v = rng_stream(20, 50).standard_normal((5, 6))
        t = rng_stream(21, 50).standard_normal((5, 6))
        base = float(align_loss(Tensor(v), Tensor(t), 0.07).data)
        perm = np.array([3, 0, 4, 1, 2])
        shuffled = float(align_loss(Tensor(v[perm]), Tensor(t[perm]), 0.07).data)
        assert abs(base - shuffled) < 1e-9

    def test_row_scale_invariant(self):
        v = rng_stream(22, 50).standard_normal((4, 6))
        t = rng_stream(23, 50).standard_normal((4, 6))
        base = float(align_loss(Tensor(v), Tensor(t), 0.07).data)
        v2 = v.copy()
        v2[1] *= 3.7
        scaled = float(align_loss(Tensor(v2), Tensor(t), 0.07).data)
        assert abs(base - scaled) < 1e-9

    @pytest.mark.parametrize("b", [2, 3, 4])
    def test_aligned_beats_every_mismatch(self, b):
        eye = np.eye(b)
        aligned = float(align_loss(Tensor(eye), Tensor(eye), 1.0).data)
        for perm in itertools.permutations(range(b)):
            if perm == tuple(range(b)):
                continue
            mismatched = float(align_loss(Tensor(eye), Tensor(eye[list(perm)]), 1.0).data)
            assert mismatched > aligned

    def test_learnable_temperature_tensor(self):
        v = Tensor(rng_stream(24, 50).standard_normal((3, 6)))
        t = Tensor(rng_stream(25, 50).standard_normal((3, 6)))
        via_tensor = float(align_loss(v, t, Tensor(np.array(0.07))).data)
        via_scalar = float(align_loss(v, t, 0.07).data)
        assert abs(via_tensor - via_scalar) < 1e-9

    def test_shape_and_domain_errors(self):
        v = Tensor(np.ones((2, 4)))
        with pytest.raises(ContractError, match="matching"):
            align_loss(v, Tensor(np.ones((3, 4))), 0.07)
        with pytest.raises(ContractError, match="empty"):
            align_loss(Tensor(np.ones((0, 4))), Tensor(np.ones((0, 4))), 0.07)
        with pytest.raises(ContractError, match="tau_c"):
            align_loss(v, v, 0.0)
        with pytest.raises(ContractError, match="tau_c"):
            align_loss(v, v, Tensor(np.array(-0.1)))


class TestPretrainLoss:
    def test_lambda_zero_is_alignment_alone(self):
        la, lp = Tensor(np.array(0.83)), Tensor(np.array(4.2))
        assert float(pretrain_loss(la, lp, 0.0).data) == float(la.data)

    def test_lambda_one_is_plain_sum(self):
        la, lp = Tensor(np.array(0.83)), Tensor(np.array(4.2))
        assert abs(float(pretrain_loss(la, lp, 1.0).data) - 5.03) < 1e-9

    def test_arithmetic_example(self):
        la, lp = Tensor(np.array(0.5)), Tensor(np.array(0.4))
        assert abs(float(pretrain_loss(la, lp, 2.0).data) - 1.3) < 1e-9

    def test_negative_lambda_rejected(self):
        with pytest.raises(ContractError, match="non-negative"):
            pretrain_loss(Tensor(np.array(0.5)), Tensor(np.array(0.4)), -0.1)

    def test_default_temperatures(self):
        assert (TAU_T_INIT, TAU_U_INIT, TAU_C_INIT) == (0.1, 0.1, 0.07)
