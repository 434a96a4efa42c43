"""Dereverberation model variants, feature normalization, checkpoints.

Four architectures share one parameter registry:

``context``      conv context encoder over (freq, time) + three residual
                 GRU layers + skip projections into the output layer.
``no-context``   same residual GRU decoder, but the first layer input is
                 a plain affine projection of the frame (causal-capable).
``gru``          three plain GRU layers (hidden 512), no residual paths.
``feedforward``  three sigmoid hidden layers (2048) over an 11-frame
                 context window, linear output; predicts one frame.

All variants map normalized log-magnitude frames (T × B) to normalized
log-magnitude frames of the same length. Frames are normalized per
frequency bin by train-split mean/std; predictions are de-normalized
with the target statistics before synthesis.
"""

import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Rng, Tensor

VARIANTS = ("context", "no-context", "gru", "feedforward")

CHECKPOINT_MAGIC = b"DRVBCKPT"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class ModelConfigError(ValueError):
    pass


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    variant: str = "context"
    context_frames: int = 11        # conv kernel width in time (odd)
    bins: int = 257                 # nfft/2 + 1
    conv_filters: int = 64
    conv_freq_kernel: int = 21
    freq_stride: int = 2
    hidden: int | None = None       # 256 default; 512 for the plain GRU stack
    ff_hidden: int = 2048
    ff_context: int = 11            # window length of the feedforward variant
    precision: str = "double"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {self.variant!r}; "
                                   f"expected one of {VARIANTS}")
        if self.hidden is None:
            self.hidden = 512 if self.variant == "gru" else 256
        if self.variant == "context":
            if self.context_frames < 1 or self.context_frames % 2 == 0:
                raise ModelConfigError(
                    f"context_frames must be odd and positive, got {self.context_frames}")
            if self.bins < self.conv_freq_kernel:
                raise ModelConfigError(
                    f"bins ({self.bins}) smaller than conv_freq_kernel "
                    f"({self.conv_freq_kernel})")
        if self.variant == "feedforward" and self.ff_context % 2 == 0:
            raise ModelConfigError("ff_context must be odd (centered window)")
        if self.precision not in ("double", "single"):
            raise ModelConfigError(f"precision must be 'double' or 'single', "
                                   f"got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ModelConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def encoder_width(cfg: ModelConfig) -> int:
    """Flattened conv feature width per frame: filters × pooled bins."""
    pooled = (cfg.bins - cfg.conv_freq_kernel) // cfg.freq_stride + 1
    return cfg.conv_filters * pooled


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Name → shape for every learnable tensor, in construction order."""
    h, b = cfg.hidden, cfg.bins
    shapes: dict[str, tuple] = {}

    def linear(name, out_dim, in_dim):
        shapes[f"{name}.weight"] = (out_dim, in_dim)
        shapes[f"{name}.bias"] = (out_dim,)

    def gru(name, in_dim):
        for tag in ("w_ir", "w_iz", "w_in"):
            shapes[f"{name}.{tag}"] = (h, in_dim)
        for tag in ("w_hr", "w_hz", "w_hn"):
            shapes[f"{name}.{tag}"] = (h, h)

    if cfg.variant == "context":
        shapes["conv.kernel"] = (cfg.conv_filters, 1, cfg.conv_freq_kernel,
                                 cfg.context_frames)
        shapes["conv.bias"] = (cfg.conv_filters,)
        gru("gru1", encoder_width(cfg))
    elif cfg.variant == "no-context":
        linear("x_proj1", h, b)
        gru("gru1", h)
    elif cfg.variant == "gru":
        gru("gru1", b)
    elif cfg.variant == "feedforward":
        linear("ff1", cfg.ff_hidden, cfg.ff_context * b)
        linear("ff2", cfg.ff_hidden, cfg.ff_hidden)
        linear("ff3", cfg.ff_hidden, cfg.ff_hidden)
        linear("output", b, cfg.ff_hidden)
        return shapes

    gru("gru2", h)
    gru("gru3", h)
    if cfg.variant in ("context", "no-context"):
        linear("x_proj2", h, b)
        linear("x_proj3", h, b)
        linear("h_proj12", h, h)
        linear("h_proj13", h, h)
        linear("h_proj23", h, h)
        linear("out_proj1", h, h)
        linear("out_proj2", h, h)
        linear("out_proj3", h, h)
    linear("output", b, h)
    return shapes


def count_params_config(cfg: ModelConfig) -> int:
    """Parameter count from shape arithmetic alone (no allocation)."""
    return int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))


@dataclass
class NormStats:
    """Per-bin mean/std of input (reverberant) and target (clean) features."""
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    EPS = 1e-8

    def __post_init__(self):
        for name in ("input_mean", "input_std", "target_mean", "target_std"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if "std" in name:
                arr = np.maximum(arr, self.EPS)
            setattr(self, name, arr)
        lens = {a.shape for a in (self.input_mean, self.input_std,
                                  self.target_mean, self.target_std)}
        if len(lens) != 1 or self.input_mean.ndim != 1:
            raise ValueError(f"NormStats arrays must share one 1-d shape, got {lens}")

    @property
    def bins(self) -> int:
        return self.input_mean.shape[0]

    @classmethod
    def identity(cls, bins: int) -> "NormStats":
        z, o = np.zeros(bins), np.ones(bins)
        return cls(z, o, z.copy(), o.copy())


def normalize(feats: np.ndarray, stats: NormStats, direction: str) -> np.ndarray:
    """Per-bin standardization of (…, B) features, or its inverse.

    direction: 'input' and 'target' apply (x - mean)/std with the
    respective statistics; 'invert-target' maps predictions back to the
    raw log-magnitude scale.
    """
    if stats is None:
        raise ValueError("normalize: statistics are missing")
    feats = np.asarray(feats)
    if feats.shape[-1] != stats.bins:
        raise ValueError(f"normalize: trailing dim {feats.shape[-1]} != "
                         f"stats bins {stats.bins}")
    if direction == "input":
        return (feats - stats.input_mean) / stats.input_std
    if direction == "target":
        return (feats - stats.target_mean) / stats.target_std
    if direction == "invert-target":
        return feats * stats.target_std + stats.target_mean
    raise ValueError(f"normalize: unknown direction {direction!r}")


class DereverbModel:
    """One wired architecture variant with an ordered parameter registry."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = param_shapes(cfg)
        if list(params) != list(expected):
            raise ModelConfigError("parameter registry does not match config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ModelConfigError(
                    f"parameter {name} has shape {params[name].shape}, "
                    f"expected {shape}")
        self.cfg = cfg
        self.params = params
        self._wire()

    def _wire(self):
        p = self.params

        def linear(name):
            return nn.LinearParams(p[f"{name}.weight"], p[f"{name}.bias"])

        def gru(name):
            return nn.GruParams(*(p[f"{name}.{t}"] for t in
                                  ("w_ir", "w_iz", "w_in", "w_hr", "w_hz", "w_hn")))

        cfg = self.cfg
        if cfg.variant == "feedforward":
            self.ff = [linear("ff1"), linear("ff2"), linear("ff3")]
            self.output = linear("output")
            return
        self.gru1 = gru("gru1")
        self.gru2 = gru("gru2")
        self.gru3 = gru("gru3")
        self.output = linear("output")
        if cfg.variant == "context":
            self.conv_kernel = p["conv.kernel"]
            self.conv_bias = p["conv.bias"]
        if cfg.variant == "no-context":
            self.x_proj1 = linear("x_proj1")
        if cfg.variant in ("context", "no-context"):
            self.x_proj2 = linear("x_proj2")
            self.x_proj3 = linear("x_proj3")
            self.h_proj12 = linear("h_proj12")
            self.h_proj13 = linear("h_proj13")
            self.h_proj23 = linear("h_proj23")
            self.out_proj1 = linear("out_proj1")
            self.out_proj2 = linear("out_proj2")
            self.out_proj3 = linear("out_proj3")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # -- forward passes ----------------------------------------------------

    def encode_context(self, x: Tensor, n: int, t: int) -> Tensor:
        """Conv context features, one vector per frame: (N, T, F).

        The time axis is zero-padded by (C-1)/2 per side so the output
        is frame-aligned with the input; the frequency axis runs valid
        with the configured stride. Channels flatten channel-major over
        frequency (feature index = channel × pooled_bins + bin).
        """
        cfg = self.cfg
        img = ad.reshape(ad.transpose_axes(x, (0, 2, 1)), (n, 1, cfg.bins, t))
        halo = (cfg.context_frames - 1) // 2
        img = ad.pad_axis(img, 3, halo, halo)
        feat = ad.conv2d(img, self.conv_kernel, stride=(cfg.freq_stride, 1),
                         bias=self.conv_bias)
        feat = ad.reshape(feat, (n, encoder_width(cfg), t))
        return ad.transpose_axes(feat, (0, 2, 1))

    def forward_batch(self, feats: np.ndarray, lengths) -> Tensor:
        """Predict normalized clean log-magnitudes for a padded batch.

        feats: (N, T, B) normalized reverberant features; lengths give
        the valid frame count per item. Outputs at padded frames are
        zero and carry no gradient.
        """
        feats = np.asarray(feats, dtype=self.cfg.dtype)
        if feats.ndim != 3 or feats.shape[2] != self.cfg.bins:
            raise ModelConfigError(
                f"forward_batch: expected (N, T, {self.cfg.bins}), got {feats.shape}")
        n, t, b = feats.shape
        lengths = np.asarray(lengths, dtype=np.intp)
        x = Tensor(feats)
        idx = nn.pack_indices(lengths, t)

        if self.cfg.variant == "feedforward":
            return self._forward_windows(x, n, t, b, idx)

        def pack(seq: Tensor) -> Tensor:
            return ad.gather_rows(ad.reshape(seq, (n * t, seq.shape[-1])), idx)

        def unpack(rows: Tensor) -> Tensor:
            return ad.reshape(ad.scatter_rows(rows, idx, n * t),
                              (n, t, rows.shape[-1]))

        if self.cfg.variant == "gru":
            h1 = nn.gru_sequence(self.gru1, x, lengths=lengths)
            h2 = nn.gru_sequence(self.gru2, h1, lengths=lengths)
            h3 = nn.gru_sequence(self.gru3, h2, lengths=lengths)
            out = nn.linear_forward(self.output, pack(h3))
            return unpack(out)

        xp = pack(x)
        if self.cfg.variant == "context":
            i1 = self.encode_context(x, n, t)
        else:
            i1 = unpack(nn.linear_forward(self.x_proj1, xp))
        h1 = nn.gru_sequence(self.gru1, i1, lengths=lengths)
        h1p = pack(h1)
        i2 = unpack(ad.add(nn.linear_forward(self.x_proj2, xp),
                           nn.linear_forward(self.h_proj12, h1p)))
        h2 = nn.gru_sequence(self.gru2, i2, lengths=lengths)
        h2p = pack(h2)
        i3 = unpack(ad.add(ad.add(nn.linear_forward(self.x_proj3, xp),
                                  nn.linear_forward(self.h_proj13, h1p)),
                           nn.linear_forward(self.h_proj23, h2p)))
        h3 = nn.gru_sequence(self.gru3, i3, lengths=lengths)
        h3p = pack(h3)
        oin = ad.add(ad.add(nn.linear_forward(self.out_proj1, h1p),
                            nn.linear_forward(self.out_proj2, h2p)),
                     nn.linear_forward(self.out_proj3, h3p))
        out = nn.linear_forward(self.output, oin)
        return unpack(out)

    def _forward_windows(self, x: Tensor, n: int, t: int, b: int,
                         idx: np.ndarray) -> Tensor:
        halo = (self.cfg.ff_context - 1) // 2
        padded = ad.pad_axis(x, 1, halo, halo)
        parts = [ad.slice_axis(padded, 1, off, t)
                 for off in range(self.cfg.ff_context)]
        win = ad.reshape(ad.concat_last(parts), (n * t, self.cfg.ff_context * b))
        rows = ad.gather_rows(win, idx)
        for layer in self.ff:
            rows = ad.sigmoid(nn.linear_forward(layer, rows))
        out = nn.linear_forward(self.output, rows)
        return ad.reshape(ad.scatter_rows(out, idx, n * t), (n, t, b))

    def forward_utterance(self, feats: np.ndarray) -> np.ndarray:
        """Enhance one normalized (T, B) feature sequence; length preserved."""
        feats = np.asarray(feats)
        if feats.ndim != 2 or feats.shape[1] != self.cfg.bins:
            raise ModelConfigError(
                f"forward_utterance: expected (T, {self.cfg.bins}), got {feats.shape}")
        pred = self.forward_batch(feats[None], [feats.shape[0]])
        return pred.data[0]

    def forward_window(self, window: np.ndarray) -> np.ndarray:
        """Feedforward variant: predict the center frame of one context window."""
        if self.cfg.variant != "feedforward":
            raise ModelConfigError("forward_window applies to the feedforward variant")
        window = np.asarray(window, dtype=self.cfg.dtype)
        expected = (self.cfg.ff_context, self.cfg.bins)
        if window.shape != expected:
            raise ModelConfigError(
                f"forward_window: expected window {expected}, got {window.shape}")
        rows = Tensor(window.reshape(1, -1))
        for layer in self.ff:
            rows = ad.sigmoid(nn.linear_forward(layer, rows))
        out = nn.linear_forward(self.output, rows)
        return out.data[0]


def build_model(cfg: ModelConfig, rng: Rng) -> DereverbModel:
    """Allocate and initialize all parameters for the configured variant.

    Draws happen in registry order, so (config, seed) fully determines
    every initial weight.
    """
    dtype = cfg.dtype
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            params[name] = Tensor(np.zeros(shape, dtype=dtype),
                                  requires_grad=True, name=name)
        else:
            # conv kernels: fan-in over all kernel cells; matrices: input width
            fan_in = int(np.prod(shape[1:]))
            params[name] = nn.uniform_init(rng, shape, fan_in, dtype, name=name)
    return DereverbModel(cfg, params)


# ---------------------------------------------------------------------------
# checkpoint serialization


@dataclass
class Checkpoint:
    config: ModelConfig
    stats: NormStats
    params: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def restore(self) -> DereverbModel:
        tensors = {name: Tensor(arr.copy(), requires_grad=True, name=name)
                   for name, arr in self.params.items()}
        return DereverbModel(self.config, tensors)


def _write_block(buf, payload: bytes):
    buf.write(struct.pack("<I", len(payload)))
    buf.write(payload)


def _write_array(buf, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<I", d))
    buf.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the documented little-endian binary checkpoint.

    Layout: magic, version u32, config JSON block, metadata JSON block,
    stats block (bins u32 + four float64 arrays), then length-prefixed
    (name, dtype, shape, raw data) records for parameters and optional
    optimizer state. Round trips are byte-exact.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", ckpt.version))
    _write_block(buf, json.dumps(ckpt.config.to_dict(), sort_keys=True,
                                 separators=(",", ":")).encode("utf-8"))
    _write_block(buf, json.dumps(ckpt.metadata, sort_keys=True,
                                 separators=(",", ":")).encode("utf-8"))
    st = ckpt.stats
    buf.write(struct.pack("<I", st.bins))
    for arr in (st.input_mean, st.input_std, st.target_mean, st.target_std):
        buf.write(arr.astype("<f8").tobytes())
    records = [(n, ckpt.params[n]) for n in ckpt.params]
    records += [(f"opt.{n}", a) for n, a in ckpt.opt_state.items()]
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        _write_array(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated while reading {what} "
                f"(need {n} bytes at offset {self.off}, have {len(self.data) - self.off})")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint written by :func:`save_checkpoint`.

    Raises CheckpointVersionError / CheckpointTruncatedError /
    CheckpointShapeError for the three failure classes; a checkpoint
    whose config block disagrees with its parameter records is rejected.
    """
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    magic = rd.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {magic!r}")
    version = rd.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: unsupported checkpoint version {version} "
            f"(expected {CHECKPOINT_VERSION})")
    cfg_json = rd.take(rd.u32("config length"), "config block")
    try:
        cfg = ModelConfig.from_dict(json.loads(cfg_json.decode("utf-8")))
    except (ValueError, ModelConfigError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    meta_json = rd.take(rd.u32("metadata length"), "metadata block")
    metadata = json.loads(meta_json.decode("utf-8"))
    bins = rd.u32("stats bins")
    if bins != cfg.bins:
        raise CheckpointShapeError(
            f"{path}: stats bins {bins} != config bins {cfg.bins}")
    arrays = [np.frombuffer(rd.take(bins * 8, f"stats array {i}"), dtype="<f8")
              for i in range(4)]
    stats = NormStats(*arrays)
    n_records = rd.u32("record count")
    params: dict[str, np.ndarray] = {}
    opt_state: dict[str, np.ndarray] = {}
    for i in range(n_records):
        nlen = rd.u16(f"record {i} name length")
        name = rd.take(nlen, f"record {i} name").decode("utf-8")
        code = rd.u8(f"record {name} dtype")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: record {name}: unknown dtype code {code}")
        ndim = rd.u8(f"record {name} ndim")
        shape = tuple(rd.u32(f"record {name} dim {d}") for d in range(ndim))
        dtype = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = rd.take(nbytes, f"record {name} data")
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(
            dtype, copy=True).reshape(shape)
        if name.startswith("opt."):
            opt_state[name[4:]] = arr
        else:
            params[name] = arr
    if rd.off != len(rd.data):
        raise CheckpointError(
            f"{path}: {len(rd.data) - rd.off} trailing bytes after last record")
    expected = param_shapes(cfg)
    if list(params) != list(expected):
        raise CheckpointShapeError(
            f"{path}: parameter records do not match config "
            f"(expected {len(expected)} tensors, found {len(params)}: "
            f"first mismatch {_first_mismatch(list(expected), list(params))})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointShapeError(
                f"{path}: parameter {name} has shape {params[name].shape}, "
                f"config implies {shape}")
    return Checkpoint(cfg, stats, params, metadata, opt_state, version)


def _first_mismatch(a: list, b: list) -> str:
    for x, y in zip(a, b):
        if x != y:
            return f"{x!r} vs {y!r}"
    return f"length {len(a)} vs {len(b)}"


def checkpoint_from_model(model: DereverbModel, stats: NormStats,
                          metadata: dict | None = None,
                          opt_state: dict | None = None) -> Checkpoint:
    params = {name: t.data.copy() for name, t in model.params.items()}
    return Checkpoint(model.cfg, stats, params, dict(metadata or {}),
                      dict(opt_state or {}))
