"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a flat float32/float64 numpy array. Primitive
operations (matmul, conv2d, pointwise nonlinearities, shape moves,
gather/scatter, reductions) compute eagerly; while a :class:`Tape` is
active they also record one node per operation. ``backward(tape, loss)``
walks the tape in reverse and accumulates gradients into every leaf
tensor with ``requires_grad``.

Gradient buffers on leaves accumulate across backward calls; call
:func:`zero_grads` between optimizer steps. Tapes are tracked per
thread, so independent tapes may run on separate threads; a single tape
or tensor must never be shared by concurrent writers.

Two accumulation rules keep results reproducible: contributions along
the time axis are summed in a fixed per-step order, and row reductions
in packed (gather/scatter) layouts always see the same row count, so
enlarging zero padding cannot perturb any gradient bit.
"""

import threading

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64, np.longdouble)


class AutodiffError(Exception):
    """Contract violation inside the autodiff layer."""


class DimensionError(AutodiffError):
    """Operand shapes are incompatible with the requested operation."""


class Rng:
    """Deterministic random stream: PCG64 seeded through SeedSequence.

    The same 64-bit seed yields the same stream on every platform.
    ``derive(*keys)`` creates an independent child stream that is a pure
    function of (seed, keys), which lets parallel workers draw
    reproducibly without sharing state.
    """

    algorithm = "pcg64"

    def __init__(self, seed: int, _spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in _spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def derive(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.spawn_key + tuple(keys))

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, spawn_key={self.spawn_key})"


class Tensor:
    """Dense n-d array with an optional gradient buffer.

    ``data`` is always float32 or float64; every operation requires its
    operands to share one dtype and produces that dtype. ``grad``, when
    present, has the same shape and dtype as ``data``. All values are
    expected to stay finite; NaN/Inf anywhere is a caller-side contract
    violation and is diagnosed at the optimizer and loss boundaries.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; execution order is topological."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tls.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _tls.stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


class _TapeLocal(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_tls = _TapeLocal()


def _active_tape() -> Tape | None:
    return _tls.stack[-1] if _tls.stack else None


def _result(data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        # float64 may mix with longdouble: the finite-difference oracle
        # promotes one parameter block to extended precision at a time.
        if dtypes <= {np.dtype(np.float64), np.dtype(np.longdouble)}:
            return
        raise DimensionError(f"mixed dtypes in one operation: {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# pointwise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard (elementwise) product."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, computed from exp(-|x|) so it never overflows."""
    x = a.data
    e = np.exp(-np.abs(x))
    pos = 1.0 / (1.0 + e)
    out = np.where(x >= 0, pos, 1.0 - pos)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - out * out),)

    return _result(out, (a,), bw)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector over the trailing dimension of ``x``."""
    _check_same_dtype(x, b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"bias_add: bias {b.shape} does not match trailing dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        return (g, g.sum(axis=lead) if lead else g.copy())

    return _result(x.data + b.data, (x, b), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor, transpose_a: bool = False,
           transpose_b: bool = False) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    am = a.data.T if transpose_a else a.data
    bm = b.data.T if transpose_b else b.data
    if am.shape[1] != bm.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions disagree: {a.shape}"
            f"{'ᵀ' if transpose_a else ''} × {b.shape}{'ᵀ' if transpose_b else ''}")
    out = am @ bm

    def bw(g):
        da = g @ bm.T
        db = am.T @ g
        if transpose_a:
            da = da.T
        if transpose_b:
            db = db.T
        return (da, db)

    return _result(out, (a, b), bw)


def _conv_windows(x: np.ndarray, kh: int, kw: int, sh: int, sw: int) -> np.ndarray:
    n, ci, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    sn, sc, srow, scol = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, ci, ho, wo, kh, kw),
        strides=(sn, sc, srow * sh, scol * sw, srow, scol), writeable=False)


def conv2d(x: Tensor, kernels: Tensor, stride: tuple[int, int] = (1, 1),
           bias: Tensor | None = None) -> Tensor:
    """Valid 2-d cross-correlation.

    ``x`` is (Cin, H, W) or batched (N, Cin, H, W); ``kernels`` is
    (Cout, Cin, Kh, Kw). Output extents are floor((H-Kh)/sh)+1 and
    floor((W-Kw)/sw)+1. The backward pass reduces over the trailing
    (time) axis one column at a time so appended zero columns cannot
    change any gradient bit.
    """
    if bias is None:
        _check_same_dtype(x, kernels)
    else:
        _check_same_dtype(x, kernels, bias)
    sh, sw = int(stride[0]), int(stride[1])
    if sh < 1 or sw < 1:
        raise DimensionError(f"conv2d: stride components must be >= 1, got {(sh, sw)}")
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d: input must be 3-d or 4-d, got shape {x.shape}")
    if kernels.ndim != 4:
        raise DimensionError(f"conv2d: kernels must be 4-d, got shape {kernels.shape}")
    xd = np.ascontiguousarray(x.data if batched else x.data[None])
    kd = kernels.data
    n, ci, h, w = xd.shape
    co, cik, kh, kw = kd.shape
    if ci != cik:
        raise DimensionError(f"conv2d: input channels {ci} != kernel channels {cik}")
    if kh > h or kw > w:
        raise DimensionError(
            f"conv2d: kernel ({kh}×{kw}) larger than input ({h}×{w})")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")

    win = _conv_windows(xd, kh, kw, sh, sw)
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, Co)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]

    def bw(g):
        if not batched:
            g = g[None]
        dk = np.zeros_like(kd)
        dx = np.zeros_like(xd)
        db = np.zeros(co, dtype=kd.dtype) if bias is not None else None
        # One output column per iteration: fixed reduction order in time.
        for j in range(wo):
            gj = g[:, :, :, j]                               # (N, Co, Ho)
            xj = win[:, :, :, j]                             # (N, Ci, Ho, Kh, Kw)
            dk += np.tensordot(gj, xj, axes=([0, 2], [0, 2]))
            tj = np.tensordot(gj, kd, axes=([1], [0]))       # (N, Ho, Ci, Kh, Kw)
            tj = tj.transpose(0, 2, 1, 3, 4)                 # (N, Ci, Ho, Kh, Kw)
            for a in range(kh):
                dx[:, :, a:a + ho * sh:sh, j * sw:j * sw + kw] += tj[:, :, :, a, :]
            if db is not None:
                db += gj.sum(axis=(0, 2))
        grads = [dx if batched else dx[0], dk]
        if bias is not None:
            grads.append(db)
        return tuple(grads)

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out if batched else out[0], inputs, bw)


# ---------------------------------------------------------------------------
# shape moves


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_axes(x: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def pad_axis(x: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis; backward slices the padding back off."""
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    n = x.shape[axis]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(before, before + n)
    sl = tuple(sl)
    return _result(np.pad(x.data, widths), (x,), lambda g: (g[sl],))


def slice_axis(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        return ((sl, g),)

    return _result(x.data[sl].copy(), (x,), bw)


def select_step(x: Tensor, t: int) -> Tensor:
    """Pick step ``t`` from a (N, T, ...) tensor."""
    idx = (slice(None), t)

    def bw(g):
        return ((idx, g),)

    return _result(x.data[:, t].copy(), (x,), bw)


def stack_steps(steps: list[Tensor]) -> Tensor:
    """Stack per-step (N, ...) tensors into (N, T, ...)."""
    out = np.stack([s.data for s in steps], axis=1)

    def bw(g):
        return tuple(g[:, t].copy() for t in range(len(steps)))

    return _result(out, tuple(steps), bw)


def concat_last(parts: list[Tensor]) -> Tensor:
    widths = [p.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[..., offsets[i]:offsets[i + 1]].copy()
                     for i in range(len(parts)))

    return _result(out, tuple(parts), bw)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-d tensor. ``idx`` must not contain duplicates."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-d input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    rows = x.shape[0]

    def bw(g):
        buf = np.zeros((rows, g.shape[1]), dtype=g.dtype)
        buf[idx] = g
        return (buf,)

    return _result(x.data[idx], (x,), bw)


def scatter_rows(x: Tensor, idx: np.ndarray, total_rows: int) -> Tensor:
    """Place rows of a 2-d tensor at ``idx`` in a zero matrix of ``total_rows``."""
    if x.ndim != 2:
        raise DimensionError(f"scatter_rows: expected 2-d input, got {x.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((total_rows, x.shape[1]), dtype=x.data.dtype)
    out[idx] = x.data

    def bw(g):
        return (g[idx],)

    return _result(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    dtype = x.data.dtype

    def bw(g):
        return (np.full(shape, g.reshape(()), dtype=dtype),)

    return _result(np.sum(x.data), (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(tensor) into every reachable requires_grad leaf.

    ``loss`` must be scalar. Each node is visited exactly once, in
    reverse recording order. Leaf gradients accumulate across calls;
    use :func:`zero_grads` to reset them between steps.
    """
    if loss.data.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, list] = {id(loss): [loss, np.ones_like(loss.data)]}
    for node in reversed(tape.nodes):
        entry = grads.pop(id(node.output), None)
        if entry is None:
            continue
        for t, c in zip(node.inputs, node.backward_fn(entry[1])):
            if c is None:
                continue
            e = grads.get(id(t))
            if e is None:
                e = [t, np.zeros_like(t.data)]
                grads[id(t)] = e
            buf = e[1]
            if isinstance(c, tuple):
                sl, arr = c
                buf[sl] += arr
            else:
                buf += c
    # Whatever remains was never produced on this tape: those are leaves.
    for key, (t, buf) in grads.items():
        if t.requires_grad and key not in produced:
            t.grad = buf if t.grad is None else t.grad + buf


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# verification


class FiniteDiffReport:
    """Per-block maximum relative error between tape and central differences."""

    def __init__(self, block_errors: dict[str, float], tolerance: float):
        self.block_errors = dict(block_errors)
        self.tolerance = float(tolerance)

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def worst_block(self) -> str:
        return max(self.block_errors, key=self.block_errors.get)

    def __repr__(self):
        status = "pass" if self.passed else "FAIL"
        return (f"FiniteDiffReport({status}, max={self.max_error:.3e}, "
                f"tol={self.tolerance:.1e}, blocks={len(self.block_errors)})")


def finite_diff_check(f, params: list[Tensor], eps: float = 1e-5,
                      tolerance: float = 1e-6) -> FiniteDiffReport:
    """Compare tape gradients of scalar ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params``; it is run
    twice up front and any bitwise disagreement raises. Relative error
    per element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8).

    During the difference quotients, the perturbed parameter block is
    promoted one precision level (float32→float64, float64→extended),
    so the varying path is evaluated accurately enough to resolve the
    tolerance even on near-zero gradient elements; contributions that do
    not depend on the block cancel bitwise in the central difference.
    """
    y0 = f()
    y1 = f()
    if not np.array_equal(y0.data, y1.data):
        raise AutodiffError("finite_diff_check: f() is not deterministic "
                            "(two forward passes disagree)")

    zero_grads(params)
    with Tape() as tape:
        loss = f()
    backward(tape, loss)

    errors: dict[str, float] = {}
    for i, p in enumerate(params):
        name = p.name or f"param{i}"
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        original = p.data
        hi = np.float64 if original.dtype == np.float32 else np.longdouble
        p.data = original.astype(hi)
        try:
            step = hi(eps)
            g_fd = np.zeros(original.shape, dtype=np.float64)
            flat = p.data.reshape(-1)
            fd = g_fd.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                fp = f().data.reshape(())
                flat[k] = orig - step
                fm = f().data.reshape(())
                flat[k] = orig
                fd[k] = np.float64((fp - fm) / (2 * step))
        finally:
            p.data = original
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
        errors[name] = float(np.max(np.abs(g_ad - g_fd) / denom))
    return FiniteDiffReport(errors, tolerance)
