"""Finite-difference audit of every differentiable layer and the full model.

Each check builds a small double-precision instance, wraps a scalar
loss around it, and compares tape gradients against central differences
(tolerance 1e-6). Shared by the ``gradcheck`` CLI command and the test
suite; runs in well under two minutes.
"""

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import FiniteDiffReport, Rng, Tensor, finite_diff_check
from .model import ModelConfig, build_model


def _sq_sum(t):
    return ad.sum_all(ad.mul(t, t))


def check_matmul(tol=1e-6) -> FiniteDiffReport:
    rng = Rng(101)
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(6, 3)), requires_grad=True, name="b")
    return finite_diff_check(lambda: _sq_sum(ad.matmul(a, b)), [a, b],
                             tolerance=tol)


def check_conv2d(tol=1e-6) -> FiniteDiffReport:
    rng = Rng(102)
    x = Tensor(rng.normal(size=(2, 1, 12, 7)), requires_grad=True, name="x")
    k = Tensor(rng.normal(size=(3, 1, 5, 3)), requires_grad=True, name="k")
    b = Tensor(rng.normal(size=3), requires_grad=True, name="bias")
    return finite_diff_check(
        lambda: _sq_sum(ad.conv2d(x, k, (2, 1), b)), [x, k, b], tolerance=tol)


def check_elementwise(tol=1e-6) -> FiniteDiffReport:
    rng = Rng(103)
    x = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="x")
    y = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="y")
    b = Tensor(rng.normal(size=4), requires_grad=True, name="b")

    def f():
        s = ad.sigmoid(ad.bias_add(ad.mul(x, y), b))
        t = ad.tanh(ad.add(x, s))
        return _sq_sum(ad.sub(t, ad.scale(s, 0.5)))

    return finite_diff_check(f, [x, y, b], tolerance=tol)


def check_linear(tol=1e-6) -> FiniteDiffReport:
    p = nn.init_linear(Rng(104), 7, 5, name="lin")
    x = Tensor(Rng(105).normal(size=(3, 5)))
    return finite_diff_check(lambda: _sq_sum(nn.linear_forward(p, x)),
                             p.tensors(), tolerance=tol)


def check_gru_step(tol=1e-6) -> FiniteDiffReport:
    p = nn.init_gru(Rng(106), 6, 4, name="gru")
    x = Tensor(Rng(107).normal(size=(3, 4)))
    h0 = Tensor(Rng(108).uniform(-0.5, 0.5, (3, 6)))
    return finite_diff_check(lambda: _sq_sum(nn.gru_step(p, x, h0)),
                             p.tensors(), tolerance=tol)


def check_gru_sequence(tol=1e-6) -> FiniteDiffReport:
    p = nn.init_gru(Rng(109), 5, 4, name="gru")
    xs = Tensor(Rng(110).normal(size=(2, 6, 4)))
    return finite_diff_check(
        lambda: _sq_sum(nn.gru_sequence(p, xs, lengths=[6, 4])),
        p.tensors(), tolerance=tol)


def check_masked_mse(tol=1e-6) -> FiniteDiffReport:
    rng = Rng(111)
    pred = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True, name="pred")
    target = Tensor(rng.normal(size=(2, 4, 3)))
    mask = np.zeros((2, 4))
    mask[0, :4] = 1
    mask[1, :2] = 1
    return finite_diff_check(lambda: nn.masked_mse(pred, target, mask),
                             [pred], tolerance=tol)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(variant="context", context_frames=3, bins=33,
                       conv_filters=4, hidden=8)


def check_full_model(tol=1e-6) -> FiniteDiffReport:
    model = build_model(tiny_model_config(), Rng(112))
    rng = np.random.default_rng(113)
    feats = rng.normal(size=(2, 5, 33))
    target = Tensor(rng.normal(size=(2, 5, 33)))
    lengths = [5, 3]
    mask = np.zeros((2, 5))
    mask[0, :5] = 1
    mask[1, :3] = 1

    def f():
        pred = model.forward_batch(feats, lengths)
        return nn.masked_mse(pred, target, mask)

    return finite_diff_check(f, model.parameters(), tolerance=tol)


def gradient_suite(tol: float = 1e-6) -> dict[str, FiniteDiffReport]:
    """All layer checks plus the tiny end-to-end model, in a fixed order."""
    return {
        "matmul": check_matmul(tol),
        "conv2d": check_conv2d(tol),
        "elementwise": check_elementwise(tol),
        "linear": check_linear(tol),
        "gru_step": check_gru_step(tol),
        "gru_sequence": check_gru_sequence(tol),
        "masked_mse": check_masked_mse(tol),
        "full_model": check_full_model(tol),
    }
