"""Layers, initialization, Adam, and the masked sequence loss.

Conventions used throughout the model zoo:

* Linear, convolutional, and output layers carry biases; GRU layers do
  not (six weight matrices per layer, no bias vectors).
* GRU update uses h_t = (1 - z)·n + z·h_prev, with the candidate reset
  applied after the hidden matrix product:
  n = tanh(W_in x + r ⊙ (W_hn h_prev)).
* Weights draw from uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); biases
  start at zero.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Rng, Tensor


@dataclass
class LinearParams:
    """Affine map y = W x (+ b). Bias presence is fixed per instance."""
    weight: Tensor            # (out, in)
    bias: Tensor | None = None

    def tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class GruParams:
    """Bias-free gated recurrent cell: three input and three hidden matrices."""
    w_ir: Tensor  # (hidden, in)
    w_iz: Tensor
    w_in: Tensor
    w_hr: Tensor  # (hidden, hidden)
    w_hz: Tensor
    w_hn: Tensor

    @property
    def hidden(self) -> int:
        return self.w_hr.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ir.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_ir, self.w_iz, self.w_in, self.w_hr, self.w_hz, self.w_hn]


def uniform_init(rng: Rng, shape: tuple, fan_in: int, dtype=np.float64,
                 name: str | None = None, requires_grad: bool = True) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    data = rng.uniform(-bound, bound, shape).astype(dtype)
    return Tensor(data, requires_grad=requires_grad, name=name)


def init_linear(rng: Rng, out_dim: int, in_dim: int, bias: bool = True,
                dtype=np.float64, name: str = "linear") -> LinearParams:
    w = uniform_init(rng, (out_dim, in_dim), in_dim, dtype, name=f"{name}.weight")
    b = None
    if bias:
        b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True,
                   name=f"{name}.bias")
    return LinearParams(w, b)


def init_gru(rng: Rng, hidden: int, in_dim: int, dtype=np.float64,
             name: str = "gru") -> GruParams:
    def inp(tag):
        return uniform_init(rng, (hidden, in_dim), in_dim, dtype, name=f"{name}.{tag}")

    def hid(tag):
        return uniform_init(rng, (hidden, hidden), hidden, dtype, name=f"{name}.{tag}")

    return GruParams(inp("w_ir"), inp("w_iz"), inp("w_in"),
                     hid("w_hr"), hid("w_hz"), hid("w_hn"))


def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    """Apply the affine map to rows of x ((rows, in) or a single (in,) vector)."""
    vector = x.ndim == 1
    if vector:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.shape[-1] != p.weight.shape[1]:
        raise DimensionError(
            f"linear_forward: input width {x.shape[-1]} != weight in-dim {p.weight.shape[1]}")
    y = ad.matmul(x, p.weight, transpose_b=True)
    if p.bias is not None:
        y = ad.bias_add(y, p.bias)
    return ad.reshape(y, (y.shape[1],)) if vector else y


def _gru_gates(p: GruParams, gi_r: Tensor, gi_z: Tensor, gi_n: Tensor,
               h_prev: Tensor) -> Tensor:
    """One recurrence update from pre-projected input gates (N, hidden)."""
    r = ad.sigmoid(ad.add(gi_r, ad.matmul(h_prev, p.w_hr, transpose_b=True)))
    z = ad.sigmoid(ad.add(gi_z, ad.matmul(h_prev, p.w_hz, transpose_b=True)))
    n = ad.tanh(ad.add(gi_n, ad.mul(r, ad.matmul(h_prev, p.w_hn, transpose_b=True))))
    # (1-z)·n + z·h = n + z·(h - n)
    return ad.add(n, ad.mul(z, ad.sub(h_prev, n)))


def gru_step(p: GruParams, x_t: Tensor, h_prev: Tensor) -> Tensor:
    vector = x_t.ndim == 1
    if vector:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
        h_prev = ad.reshape(h_prev, (1, h_prev.shape[0]))
    if x_t.shape[1] != p.input_size or h_prev.shape[1] != p.hidden:
        raise DimensionError(
            f"gru_step: got x {x_t.shape}, h {h_prev.shape} for cell "
            f"(in={p.input_size}, hidden={p.hidden})")
    gi_r = ad.matmul(x_t, p.w_ir, transpose_b=True)
    gi_z = ad.matmul(x_t, p.w_iz, transpose_b=True)
    gi_n = ad.matmul(x_t, p.w_in, transpose_b=True)
    h = _gru_gates(p, gi_r, gi_z, gi_n, h_prev)
    return ad.reshape(h, (h.shape[1],)) if vector else h


def gru_sequence(p: GruParams, xs: Tensor, h0: Tensor | None = None,
                 lengths: np.ndarray | None = None) -> Tensor:
    """Run the cell over a whole sequence; returns every hidden state.

    ``xs`` is (T, in) for one utterance or (N, T, in) for a padded
    batch. With ``lengths`` given, input projections are computed on
    valid frames only and padded steps see exactly-zero inputs, so the
    result (and its gradients) are independent of the padded width.
    """
    single = xs.ndim == 2
    if single:
        xs = ad.reshape(xs, (1,) + xs.shape)
    n, t_max, in_dim = xs.shape
    if t_max < 1:
        raise DimensionError("gru_sequence: empty sequence (T = 0)")
    if in_dim != p.input_size:
        raise DimensionError(
            f"gru_sequence: input width {in_dim} != cell input {p.input_size}")
    dtype = xs.data.dtype
    if h0 is None:
        h = Tensor(np.zeros((n, p.hidden), dtype=dtype))
    else:
        h = h0 if h0.ndim == 2 else ad.reshape(h0, (1, h0.shape[0]))

    rows = ad.reshape(xs, (n * t_max, in_dim))
    if lengths is not None:
        idx = pack_indices(lengths, t_max)
        rows = ad.gather_rows(rows, idx)

    def project(w):
        y = ad.matmul(rows, w, transpose_b=True)
        if lengths is not None:
            y = ad.scatter_rows(y, idx, n * t_max)
        return ad.reshape(y, (n, t_max, p.hidden))

    gi_r = project(p.w_ir)
    gi_z = project(p.w_iz)
    gi_n = project(p.w_in)

    states = []
    for t in range(t_max):
        h = _gru_gates(p, ad.select_step(gi_r, t), ad.select_step(gi_z, t),
                       ad.select_step(gi_n, t), h)
        states.append(h)
    hs = ad.stack_steps(states)
    return ad.reshape(hs, (t_max, p.hidden)) if single else hs


def pack_indices(lengths, t_max: int) -> np.ndarray:
    """Flat row indices of valid (item, step) cells in a padded (N, T) grid."""
    parts = [n * t_max + np.arange(int(ln), dtype=np.intp)
             for n, ln in enumerate(lengths)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)


def masked_mse(pred: Tensor, target: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared error over valid frames of a padded (N, T, B) batch.

    ``mask`` is a binary (N, T) array marking valid frames. The loss is
    sum of squared errors over valid cells divided by (valid frames × B);
    masked cells contribute nothing to the value or the gradient, and
    enlarging the padding leaves both bit-identical.
    """
    if pred.shape != target.shape or pred.ndim != 3:
        raise DimensionError(
            f"masked_mse: pred {pred.shape} and target {target.shape} must be equal 3-d shapes")
    mask = np.asarray(mask)
    if mask.shape != pred.shape[:2]:
        raise DimensionError(f"masked_mse: mask {mask.shape} != {pred.shape[:2]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("masked_mse: mask entries must be 0 or 1")
    idx = np.flatnonzero(mask.reshape(-1) != 0)
    if idx.size == 0:
        raise ValueError("masked_mse: mask selects no valid frames")
    n, t, b = pred.shape
    p = ad.gather_rows(ad.reshape(pred, (n * t, b)), idx)
    q = ad.gather_rows(ad.reshape(target, (n * t, b)), idx)
    r = ad.sub(p, q)
    sse = ad.sum_all(ad.mul(r, r))
    return ad.scale(sse, 1.0 / (idx.size * b))


class AdamState:
    """Adam with bias correction; moments mirror the parameter list."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, params: list[Tensor] | None = None) -> None:
    """One in-place Adam update from the gradients stored on the parameters."""
    if params is not None and list(params) != state.params:
        raise ValueError("adam_step: params do not match the optimizer state")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, m, v in zip(state.params, state.m, state.v):
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(
                f"adam_step: non-finite gradient in parameter block "
                f"{p.name or '<unnamed>'}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def count_params(tensors) -> int:
    """Total scalar parameter count of an iterable of tensors (or a model)."""
    if hasattr(tensors, "parameters"):
        tensors = tensors.parameters()
    return int(sum(t.size for t in tensors))
