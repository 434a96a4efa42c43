import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dereverb import autodiff as ad
from dereverb import nn
from dereverb.autodiff import Rng, Tape, Tensor, backward, zero_grads
from dereverb.nn import (AdamState, GruParams, LinearParams, adam_step,
                         count_params, gru_sequence, gru_step, init_gru,
                         init_linear, linear_forward, masked_mse)


def gru_step_oracle(p: GruParams, x, h):
    """Scalar-loop reference for one GRU update."""
    hid = p.hidden
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    out = np.zeros(hid)
    w = {k: getattr(p, k).data for k in
         ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn")}
    for i in range(hid):
        r = sig(sum(w["w_ir"][i, j] * x[j] for j in range(len(x)))
                + sum(w["w_hr"][i, j] * h[j] for j in range(hid)))
        z = sig(sum(w["w_iz"][i, j] * x[j] for j in range(len(x)))
                + sum(w["w_hz"][i, j] * h[j] for j in range(hid)))
        n = math.tanh(sum(w["w_in"][i, j] * x[j] for j in range(len(x)))
                      + r * sum(w["w_hn"][i, j] * h[j] for j in range(hid)))
        out[i] = (1.0 - z) * n + z * h[i]
    return out


class TestLinear:
    def test_identity(self):
        p = LinearParams(Tensor(np.eye(4)), Tensor(np.zeros(4)))
        x = np.arange(4.0)
        out = linear_forward(p, Tensor(x))
        assert np.array_equal(out.data, x)

    def test_param_count_257_to_256(self):
        p = init_linear(Rng(0), 256, 257)
        assert count_params(p.tensors()) == 257 * 256 + 256 == 66048

    def test_against_matmul_oracle(self, np_rng):
        p = init_linear(Rng(3), 5, 7)
        x = np_rng.normal(size=(4, 7))
        out = linear_forward(p, Tensor(x))
        want = x @ p.weight.data.T + p.bias.data
        assert np.max(np.abs(out.data - want)) < 1e-14


class TestGruStep:
    def test_zero_weights_fixed_point(self):
        z = lambda shape: Tensor(np.zeros(shape))
        p = GruParams(z((3, 2)), z((3, 2)), z((3, 2)),
                      z((3, 3)), z((3, 3)), z((3, 3)))
        h = gru_step(p, Tensor(np.ones(2)), Tensor(np.zeros(3)))
        assert np.array_equal(h.data, np.zeros(3))

    def test_update_gate_saturation_carries_state(self):
        p = init_gru(Rng(5), 4, 3)
        p.w_iz.data[:] = 1000.0  # z -> 1 for positive input
        h_prev = Rng(6).uniform(-0.5, 0.5, 4)
        h = gru_step(p, Tensor(np.ones(3)), Tensor(h_prev))
        assert np.max(np.abs(h.data - h_prev)) < 1e-9

    def test_against_scalar_oracle(self):
        p = init_gru(Rng(7), 5, 4)
        x = Rng(8).normal(size=4)
        h0 = Rng(9).uniform(-0.8, 0.8, 5)
        got = gru_step(p, Tensor(x), Tensor(h0))
        assert np.max(np.abs(got.data - gru_step_oracle(p, x, h0))) < 1e-12

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6))
    def test_state_stays_in_open_unit_box(self, seed):
        p = init_gru(Rng(seed), 6, 3)
        x = Rng(seed + 1).normal(scale=3.0, size=3)
        h0 = Rng(seed + 2).uniform(-0.999, 0.999, 6)
        h = gru_step(p, Tensor(x), Tensor(h0))
        assert np.all(np.abs(h.data) < 1.0)


class TestGruSequence:
    def test_t1_equals_step(self):
        p = init_gru(Rng(11), 4, 3)
        x = Rng(12).normal(size=(1, 3))
        step = gru_step(p, Tensor(x[0]), Tensor(np.zeros(4)))
        seq = gru_sequence(p, Tensor(x))
        assert np.array_equal(seq.data[0], step.data)

    def test_unrolled_oracle(self):
        p = init_gru(Rng(13), 4, 3)
        xs = Rng(14).normal(size=(5, 3))
        got = gru_sequence(p, Tensor(xs))
        h = np.zeros(4)
        for t in range(5):
            h = gru_step_oracle(p, xs[t], h)
            assert np.max(np.abs(got.data[t] - h)) < 1e-12

    def test_saturated_gate_freezes_trajectory(self):
        p = init_gru(Rng(15), 4, 3)
        p.w_iz.data[:] = 1000.0
        xs = np.tile(np.ones(3), (6, 1))
        got = gru_sequence(p, Tensor(xs)).data
        drift = np.max(np.abs(got - got[0]))
        assert drift < 1e-8

    def test_empty_sequence_rejected(self):
        p = init_gru(Rng(16), 4, 3)
        with pytest.raises(Exception, match="empty"):
            gru_sequence(p, Tensor(np.zeros((0, 3))))


class TestAdam:
    def test_first_step_is_signed_lr(self):
        x = Tensor(np.array([1.0, -1.0, 2.0]), requires_grad=True, name="x")
        x.grad = np.array([0.3, -0.7, 4.0])
        st_ = AdamState([x], lr=0.001)
        before = x.data.copy()
        adam_step(st_)
        update = before - x.data
        assert np.max(np.abs(update - 0.001 * np.sign(x.grad))) < 1e-6

    def test_zero_lr_freezes(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x.grad = np.array([5.0, -3.0])
        st_ = AdamState([x], lr=0.0)
        adam_step(st_)
        assert np.array_equal(x.data, [1.0, 2.0])

    def test_two_steps_hand_trajectory(self):
        # f(x) = x^2 from x0 = 1, lr 0.1: replay the textbook recurrence
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        x = Tensor(np.array([1.0]), requires_grad=True)
        st_ = AdamState([x], lr=lr, beta1=b1, beta2=b2, eps=eps)
        xv, m, v = 1.0, 0.0, 0.0
        for t in (1, 2):
            g = 2.0 * xv
            x.grad = np.array([2.0 * float(x.data[0])])
            adam_step(st_)
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            xv -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            x.grad = None
            assert abs(float(x.data[0]) - xv) < 1e-15

    def test_scale_equivariance_at_t1(self):
        g = np.array([0.5, -2.0, 3.0])
        updates = []
        for s in (1.0, 2.0):
            x = Tensor(np.zeros(3), requires_grad=True)
            x.grad = g * s
            st_ = AdamState([x], lr=0.001)
            adam_step(st_)
            updates.append(-x.data)
        assert np.max(np.abs(updates[0] - updates[1])) < 1e-8

    def test_nan_gradient_names_block(self):
        x = Tensor(np.zeros(2), requires_grad=True, name="conv.kernel")
        x.grad = np.array([1.0, np.nan])
        with pytest.raises(FloatingPointError, match="conv.kernel"):
            adam_step(AdamState([x]))


class TestMaskedMse:
    def test_exact_match_is_zero(self, np_rng):
        x = np_rng.normal(size=(2, 3, 4))
        mask = np.ones((2, 3))
        loss = masked_mse(Tensor(x), Tensor(x.copy()), mask)
        assert loss.item() == 0.0

    def test_hand_value(self):
        pred = np.array([[[1.0, 2.0], [5.0, 5.0]]])
        target = np.array([[[0.0, 1.0], [9.0, 9.0]]])
        mask = np.array([[1.0, 0.0]])
        loss = masked_mse(Tensor(pred), Tensor(target), mask)
        # one valid frame, B=2: (1 + 1) / (1*2) = 1
        assert loss.item() == pytest.approx(1.0, abs=1e-15)

    def test_padding_leaves_loss_and_grads_bit_identical(self, np_rng):
        pred = np_rng.normal(size=(2, 5, 3))
        target = np_rng.normal(size=(2, 5, 3))
        mask = np.zeros((2, 5))
        mask[0, :5] = 1
        mask[1, :3] = 1

        def run(p, t, m):
            pt = Tensor(p, requires_grad=True)
            with Tape() as tape:
                loss = masked_mse(pt, Tensor(t), m)
            backward(tape, loss)
            return loss.item(), pt.grad

        l1, g1 = run(pred, target, mask)
        pad = np.zeros((2, 4, 3))
        l2, g2 = run(np.concatenate([pred, pad], axis=1),
                     np.concatenate([target, pad], axis=1),
                     np.concatenate([mask, np.zeros((2, 4))], axis=1))
        assert l1 == l2
        assert np.array_equal(g2[:, :5], g1)
        assert np.all(g2[:, 5:] == 0.0)

    def test_all_masked_rejected(self):
        with pytest.raises(ValueError, match="no valid frames"):
            masked_mse(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 2))),
                       np.zeros((1, 2)))

    def test_nonbinary_mask_rejected(self):
        with pytest.raises(ValueError, match="0 or 1"):
            masked_mse(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 2, 2))),
                       np.full((1, 2), 0.5))


class TestInit:
    def test_fan_in_one_gives_unit_range(self):
        t = nn.uniform_init(Rng(1), (1000,), fan_in=1)
        assert np.all(np.abs(t.data) < 1.0)
        assert np.max(np.abs(t.data)) > 0.9

    def test_mean_within_three_sigma(self):
        n = 10**5
        t = nn.uniform_init(Rng(2), (n,), fan_in=9)
        bound = 1.0 / 3.0
        sigma = bound / math.sqrt(3.0) / math.sqrt(n)
        assert abs(float(t.data.mean())) < 3.0 * sigma

    def test_same_seed_identical(self):
        a = init_linear(Rng(3), 8, 5)
        b = init_linear(Rng(3), 8, 5)
        assert np.array_equal(a.weight.data, b.weight.data)

    def test_biases_start_at_zero(self):
        p = init_linear(Rng(4), 6, 3)
        assert np.all(p.bias.data == 0.0)
