"""AdamW, clipping, and the one-cycle schedule against closed forms.

First-step algebra: m-hat = g, v-hat = g*g, so with g=1 the update is
lr/(1+eps) regardless of betas; decoupled decay subtracts lr*wd*w on top
of that from the original w.
"""

import math

import numpy as np
import pytest

from hialign.autograd import ParameterStore, Tensor
from hialign.exceptions import ContractError, NonFiniteError
from hialign.optim import AdamW, clip_grad_norm, global_norm, one_cycle_cosine_lr


def one_param_store(value=1.0):
    store = ParameterStore()
    store.add("w", Tensor(np.array([value], dtype=np.float64)))
    return store


class TestAdamW:
    def test_first_step_no_decay(self):
        store = one_param_store()
        AdamW(store).step({"w": np.array([1.0])}, 0.1)
        assert abs(store["w"].data[0] - 0.9) < 1e-7

    def test_first_step_decoupled_decay(self):
        store = one_param_store()
        AdamW(store, weight_decay=0.1).step({"w": np.array([1.0])}, 0.1)
        want = 1.0 - 0.01 - 0.1 * (1.0 / (1.0 + 1e-8))
        assert abs(store["w"].data[0] - want) < 1e-12
        assert abs(store["w"].data[0] - 0.89) < 1e-7

    def test_zero_gradient_no_decay_is_identity(self):
        store = one_param_store(0.37)
        AdamW(store).step({"w": np.array([0.0])}, 0.1)
        assert store["w"].data[0] == 0.37

    def test_missing_gradient_rejected(self):
        store = one_param_store()
        with pytest.raises(ContractError, match="missing gradient"):
            AdamW(store).step({}, 0.1)

    def test_non_finite_gradient_aborts_before_update(self):
        store = one_param_store()
        opt = AdamW(store)
        with pytest.raises(NonFiniteError, match="non-finite"):
            opt.step({"w": np.array([np.inf])}, 0.1)
        assert store["w"].data[0] == 1.0
        assert opt.t == 0

    def test_frozen_parameters_untouched(self):
        store = ParameterStore()
        store.add("w", Tensor(np.array([1.0])))
        store.add("base", Tensor(np.array([5.0])), frozen=True)
        AdamW(store).step({"w": np.array([1.0])}, 0.1)
        assert store["base"].data[0] == 5.0

    def test_matches_reference_loop(self):
        # five steps against a literal transcription of the update rule
        rng = np.random.Generator(np.random.Philox(7))
        store = ParameterStore()
        w0 = rng.standard_normal(4)
        store.add("w", Tensor(w0.copy()))
        opt = AdamW(store, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01)

        w = w0.copy()
        m = np.zeros(4)
        v = np.zeros(4)
        for t in range(1, 6):
            g = rng.standard_normal(4)
            opt.step({"w": g.copy()}, 0.05)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mh = m / (1.0 - 0.9**t)
            vh = v / (1.0 - 0.999**t)
            w = w - 0.05 * 0.01 * w - 0.05 * mh / (np.sqrt(vh) + 1e-8)
            assert np.abs(store["w"].data - w).max() < 1e-12

    def test_state_round_trip(self):
        store = one_param_store()
        opt = AdamW(store)
        opt.step({"w": np.array([0.5])}, 0.1)
        opt.step({"w": np.array([-0.2])}, 0.1)
        twin = AdamW(one_param_store())
        twin.load_state(opt.state())
        assert twin.t == 2
        assert np.array_equal(twin.m["w"], opt.m["w"])
        assert np.array_equal(twin.v["w"], opt.v["w"])


class TestSchedule:
    def test_starts_at_zero(self):
        assert one_cycle_cosine_lr(0, 100, 10, 3e-4) == 0.0

    def test_peaks_at_warmup_end(self):
        assert abs(one_cycle_cosine_lr(10, 100, 10, 3e-4) - 3e-4) < 1e-12

    def test_ends_at_zero(self):
        assert abs(one_cycle_cosine_lr(100, 100, 10, 3e-4)) < 1e-12

    def test_continuous_at_warmup_boundary(self):
        w, total, peak = 10, 100, 3e-4
        linear_end = peak * w / w
        cosine_start = one_cycle_cosine_lr(w, total, w, peak)
        assert abs(linear_end - cosine_start) < 1e-12

    def test_rises_then_falls_and_stays_non_negative(self):
        vals = [one_cycle_cosine_lr(s, 50, 5, 1.0) for s in range(51)]
        assert all(v >= 0 for v in vals)
        assert vals[:6] == sorted(vals[:6])
        assert vals[5:] == sorted(vals[5:], reverse=True)

    def test_domain_errors(self):
        with pytest.raises(ContractError, match="outside"):
            one_cycle_cosine_lr(-1, 10, 2, 1.0)
        with pytest.raises(ContractError, match="outside"):
            one_cycle_cosine_lr(11, 10, 2, 1.0)
        with pytest.raises(ContractError, match="warmup"):
            one_cycle_cosine_lr(5, 10, 10, 1.0)


class TestClipping:
    def test_inside_ball_unchanged(self):
        grads = {"a": np.array([0.3]), "b": np.array([0.4])}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert abs(norm - 0.5) < 1e-12
        assert clipped["a"][0] == 0.3 and clipped["b"][0] == 0.4

    def test_outside_ball_scaled_with_norm_reported(self):
        grads = {"a": np.array([2.0, 0.0])}
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert abs(norm - 2.0) < 1e-12
        assert np.allclose(clipped["a"], [1.0, 0.0])

    def test_zero_gradients(self):
        clipped, norm = clip_grad_norm({"a": np.zeros(3)}, 1.0)
        assert norm == 0.0
        assert not clipped["a"].any()

    def test_post_clip_norm_bounded(self):
        for seed in range(10):
            rng = np.random.Generator(np.random.Philox(seed))
            grads = {f"p{i}": rng.standard_normal((3, 2)) * 5 for i in range(4)}
            clipped, _ = clip_grad_norm(grads, 1.0)
            assert global_norm(clipped.values()) <= 1.0 + 1e-9
