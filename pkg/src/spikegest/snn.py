"""Leaky integrate-and-fire layers and the Jaccard-attention spiking classifier.

Tensors are time-major per sample, ``(T, C, L)``; batched tensors prepend a
batch axis, ``(B, T, C, L)``. RMS feature windows ``(seq_len, channels)`` are
fed to the encoder as ``(T=seq_len, C=channels, L=1)`` current injections.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tape as tp
from .attention import dense_attention_op, sja_channelwise_op, sja_elementwise_op

DEFAULT_INIT_GAIN = 6.0
ATTENTION_VARIANTS = ("sja_channelwise", "sja_channel_scalars", "sja_elementwise", "dense", "none")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LifParams:
    """Neuron constants. ``decay`` is derived as ``exp(-dt_ms / tau_ms)``."""

    u_th: float = 1.0
    v_reset: float = 0.0
    dt_ms: float = 1.0
    tau_ms: float = 1.0 / math.log(1.0 / 0.9)

    def __post_init__(self):
        if self.dt_ms <= 0 or self.tau_ms <= 0:
            raise ValueError("dt_ms and tau_ms must be positive")
        if not self.u_th > self.v_reset:
            raise ValueError("u_th must exceed v_reset")

    @property
    def decay(self) -> float:
        return math.exp(-self.dt_ms / self.tau_ms)

    @classmethod
    def from_decay(cls, decay: float, u_th: float = 1.0, v_reset: float = 0.0,
                   dt_ms: float = 1.0) -> "LifParams":
        if not 0.0 < decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        return cls(u_th, v_reset, dt_ms, -dt_ms / math.log(decay))


@dataclass
class LifState:
    membrane: np.ndarray
    temporal: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "LifState":
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass(frozen=True)
class SpikeTrain:
    data: np.ndarray

    def __post_init__(self):
        if not np.all((self.data == 0) | (self.data == 1)):
            raise ValueError("spike train must be binary")

    @property
    def shape(self):
        return self.data.shape

    def density(self) -> float:
        return float(np.mean(self.data)) if self.data.size else 0.0


def lif_step(state: LifState, drive, params: LifParams) -> tuple[np.ndarray, LifState]:
    """Advance one time step: integrate, fire on ``M >= u_th``, reset or leak."""
    drive = np.asarray(drive, dtype=np.float64)
    if drive.shape != np.shape(state.temporal):
        raise ShapeError(f"drive shape {drive.shape} != state shape {np.shape(state.temporal)}")
    if not np.all(np.isfinite(drive)):
        raise ValueError("non-finite input drive")
    m = state.temporal + drive
    s = (m >= params.u_th).astype(np.float64)
    t_next = params.v_reset * s + (params.decay * m) * (1.0 - s)
    return s, LifState(m, t_next)


def lif_scan_op(tape: tp.Tape, drive: int, params: LifParams, smooth: bool = False,
                detach_reset: bool | None = None) -> int:
    """LIF layer over a full ``(B, T, ...)`` drive, differentiable via BPTT.

    With ``smooth=True`` the Heaviside is replaced by :func:`tape.fast_sigmoid`
    and the backward pass is the exact derivative (gradient-check mode).
    Otherwise spikes are binary and the backward uses the SuperSpike surrogate.

    ``detach_reset`` (default: ``not smooth``) drops the surrogate term that
    flows through the spike inside the reset/leak update, keeping the leak
    factor ``decay * (1 - S)``. Backpropagating through the reset makes
    training stall on the gesture task.
    """
    if detach_reset is None:
        detach_reset = not smooth
    reset_gain = 0.0 if detach_reset else 1.0
    x = tape.value(drive)
    u_th, v_reset, decay = params.u_th, params.v_reset, params.decay
    steps = x.shape[1]
    membrane = np.empty_like(x)
    spikes = np.empty_like(x)
    temporal = np.zeros_like(x[:, 0])
    for t in range(steps):
        m = temporal + x[:, t]
        s = tp.fast_sigmoid(m, u_th) if smooth else (m >= u_th).astype(np.float64)
        temporal = v_reset * s + decay * m * (1.0 - s)
        membrane[:, t] = m
        spikes[:, t] = s

    def vjp(g):
        gx = np.empty_like(x)
        g_temporal = np.zeros_like(x[:, 0])
        for t in range(steps - 1, -1, -1):
            m = membrane[:, t]
            s = spikes[:, t]
            sg = tp.superspike_grad(m, u_th)
            d_temporal = decay * (1.0 - s) + reset_gain * (v_reset - decay * m) * sg
            gm = g[:, t] * sg + g_temporal * d_temporal
            gx[:, t] = gm
            g_temporal = gm
        return (gx,)

    return tape.record("lif", (drive,), spikes, vjp, membrane=membrane)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    pad = k // 2
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(pad, pad)])
    # (..., Cin, L, k) -> (..., L, Cin, k)
    win = sliding_window_view(xp, k, axis=-1)
    return np.swapaxes(win, -3, -2)


def conv1d_op(tape: tp.Tape, x: int, w: int, b: int) -> int:
    """Same-padded 1-D convolution along the last axis of ``(B, T, Cin, L)``."""
    xv, wv, bv = tape.value(x), tape.value(w), tape.value(b)
    cout, cin, k = wv.shape
    if xv.shape[-2] != cin:
        raise ShapeError(f"input has {xv.shape[-2]} channels, kernel expects {cin}")
    if k % 2 != 1:
        raise ShapeError("kernel size must be odd")
    lead, length = xv.shape[:-2], xv.shape[-1]
    cols = _im2col(xv, k).reshape(-1, cin * k)
    wmat = wv.reshape(cout, cin * k)
    out = (cols @ wmat.T + bv).reshape(*lead, length, cout)
    out = np.swapaxes(out, -1, -2)

    def vjp(g):
        g2 = np.swapaxes(g, -1, -2).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(wv.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat).reshape(*lead, length, cin, k)
        pad = k // 2
        gxp = np.zeros(lead + (cin, length + 2 * pad))
        for j in range(k):
            gxp[..., j:j + length] += np.swapaxes(gcols[..., j], -1, -2)
        return gxp[..., pad:pad + length], gw, gb

    return tape.record("conv1d", (x, w, b), np.ascontiguousarray(out), vjp)


def leaky_integrate_op(tape: tp.Tape, drive: int, decay: float) -> int:
    """Non-firing integrator ``M^t = decay * M^(t-1) + drive^t`` over axis 1."""
    x = tape.value(drive)
    out = np.empty_like(x)
    m = np.zeros_like(x[:, 0])
    for t in range(x.shape[1]):
        m = decay * m + x[:, t]
        out[:, t] = m

    def vjp(g):
        gx = np.empty_like(g)
        acc = np.zeros_like(g[:, 0])
        for t in range(g.shape[1] - 1, -1, -1):
            acc = decay * acc + g[:, t]
            gx[:, t] = acc
        return (gx,)

    return tape.record("leaky_integrate", (drive,), out, vjp)


def conv_lif_forward(inputs, kernel, bias, params: LifParams = LifParams()) -> SpikeTrain:
    """ConvLIF layer on a single ``(T, Cin, L)`` tensor; returns ``(T, Cout, L)`` spikes."""
    inputs = np.asarray(inputs, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if inputs.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("expected inputs (T, Cin, L) and kernel (Cout, Cin, k)")
    tape = tp.Tape()
    x = tape.const(inputs[None])
    drive = conv1d_op(tape, x, tape.const(kernel), tape.const(np.asarray(bias, dtype=np.float64)))
    return SpikeTrain(tape.value(lif_scan_op(tape, drive, params))[0])


def classifier_forward(features, weights, decay: float = 0.9) -> np.ndarray:
    """Membrane trace ``(T, num_classes)`` of the integrate-only readout layer."""
    data = features.data if isinstance(features, SpikeTrain) else np.asarray(features)
    weights = np.asarray(weights, dtype=np.float64)
    flat = data.reshape(data.shape[0], -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError(f"feature dim {flat.shape[1]} != weight rows {weights.shape[0]}")
    tape = tp.Tape()
    drive = tp.matmul(tape, tape.const(flat[None]), tape.const(weights))
    return tape.value(leaky_integrate_op(tape, drive, decay))[0]


def predict(trace) -> int:
    """Class with the largest time-summed membrane potential (lowest index on ties)."""
    trace = np.asarray(trace)
    if trace.size == 0:
        raise ValueError("empty trace")
    return int(np.argmax(trace.sum(axis=0)))


def predict_batch(traces: np.ndarray) -> np.ndarray:
    return np.argmax(traces.sum(axis=1), axis=-1)


PARAM_NAMES = ("enc_w", "enc_b", "f1_w", "f1_b", "f2_w", "f2_b",
               "q_w", "q_b", "k_w", "k_b", "v_w", "v_b", "cls_w")
LAYER_NAMES = ("encoder", "feature1", "feature2", "query", "key", "value", "classifier")


@dataclass
class JasnnModel:
    """ConvLIF encoder, two ConvLIF feature layers, QKV projections, attention, LIF readout."""

    in_channels: int = 8
    base_channels: int = 32
    kernel_size: int = 3
    num_classes: int = 10
    positions: int = 1
    attention: str = "sja_channelwise"
    eps: float = 1e-6
    lif: dict = field(default_factory=lambda: {name: LifParams() for name in LAYER_NAMES})
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.attention not in ATTENTION_VARIANTS:
            raise ValueError(f"unknown attention variant {self.attention!r}")

    @property
    def feature_dim(self) -> int:
        return 2 * self.base_channels * self.positions

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        n, k, c2 = self.base_channels, self.kernel_size, 2 * self.base_channels
        return {
            "enc_w": (n, self.in_channels, k), "enc_b": (n,),
            "f1_w": (n, n, k), "f1_b": (n,),
            "f2_w": (c2, n, k), "f2_b": (c2,),
            "q_w": (c2, c2, 1), "q_b": (c2,),
            "k_w": (c2, c2, 1), "k_b": (c2,),
            "v_w": (c2, c2, 1), "v_b": (c2,),
            "cls_w": (self.feature_dim, self.num_classes),
        }

    @classmethod
    def initialize(cls, seed: int = 0, gain: float = DEFAULT_INIT_GAIN, **kwargs) -> "JasnnModel":
        """Seeded uniform init in ``[-gain/sqrt(fan_in), gain/sqrt(fan_in)]``.

        ``gain=1`` is the plain fan-in rule; with unit threshold it lets spiking
        activity die out by the third layer, hence the larger default.
        """
        model = cls(**kwargs)
        rng = np.random.default_rng([int(seed), 0x6D6F64])
        shapes = model.param_shapes()
        for name in PARAM_NAMES:
            wshape = shapes[name if name.endswith("_w") else name[:-1] + "w"]
            fan_in = wshape[0] if name == "cls_w" else int(np.prod(wshape[1:]))
            bound = gain / math.sqrt(fan_in)
            model.params[name] = rng.uniform(-bound, bound, size=shapes[name])
        return model

    def copy(self) -> "JasnnModel":
        return replace(self, lif=dict(self.lif),
                       params={k: v.copy() for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


@dataclass
class ForwardResult:
    tape: tp.Tape
    param_ids: dict[str, int]
    spike_ids: dict[str, int]
    trace: int
    logits: int
    attention_weights: np.ndarray | None

    def spikes(self, name: str) -> np.ndarray:
        return self.tape.value(self.spike_ids[name])

    @property
    def trace_value(self) -> np.ndarray:
        return self.tape.value(self.trace)


def forward_batch(model: JasnnModel, features, smooth: bool = False,
                  tape: tp.Tape | None = None) -> ForwardResult:
    """Run the network on ``(B, T, C)`` features (or ``(B, T, C, L)``).

    ``logits`` is the time-mean of the readout trace, i.e. the time-sum scaled
    by ``1/T``; it feeds the softmax during training and leaves the argmax
    decision unchanged.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x[..., None]
    if x.ndim != 4 or x.shape[2] != model.in_channels or x.shape[3] != model.positions:
        raise ShapeError(f"features of shape {x.shape} do not match encoder "
                         f"(channels={model.in_channels}, positions={model.positions})")
    tape = tape or tp.Tape()
    pid = {name: tape.leaf(model.params[name], kind="param") for name in PARAM_NAMES}
    inp = tape.const(x)
    lif = model.lif
    spikes = {}

    h = lif_scan_op(tape, conv1d_op(tape, inp, pid["enc_w"], pid["enc_b"]), lif["encoder"], smooth)
    spikes["encoder"] = h
    h = lif_scan_op(tape, conv1d_op(tape, h, pid["f1_w"], pid["f1_b"]), lif["feature1"], smooth)
    spikes["feature1"] = h
    h = lif_scan_op(tape, conv1d_op(tape, h, pid["f2_w"], pid["f2_b"]), lif["feature2"], smooth)
    spikes["feature2"] = h

    weights = None
    if model.attention == "none":
        att = h
    else:
        for name, key in (("query", "q"), ("key", "k"), ("value", "v")):
            spikes[name] = lif_scan_op(
                tape, conv1d_op(tape, h, pid[f"{key}_w"], pid[f"{key}_b"]), lif[name], smooth)
        q, k, v = spikes["query"], spikes["key"], spikes["value"]
        if model.attention == "dense":
            att = dense_attention_op(tape, q, k, v)
        elif model.attention == "sja_elementwise":
            att = sja_elementwise_op(tape, q, k, v, model.eps)
        else:
            att = sja_channelwise_op(tape, q, k, v, model.eps,
                                     per_channel=model.attention == "sja_channel_scalars")
        weights = tape.nodes[att].saved.get("weights")

    batch, steps = x.shape[:2]
    flat = tp.reshape(tape, att, (batch, steps, model.feature_dim))
    drive = tp.matmul(tape, flat, pid["cls_w"])
    trace = leaky_integrate_op(tape, drive, lif["classifier"].decay)
    logits = tp.time_mean(tape, trace)
    return ForwardResult(tape, pid, spikes, trace, logits, weights)


def jasnn_forward(model: JasnnModel, sample):
    """Single-sample forward.

    Returns ``(trace, spike_trains, attention_weights)`` where ``trace`` is the
    ``(T, num_classes)`` readout membrane trace and ``spike_trains`` maps layer
    names to :class:`SpikeTrain` objects.
    """
    feats = sample.features if hasattr(sample, "features") else sample
    res = forward_batch(model, np.asarray(feats)[None])
    trains = {name: SpikeTrain(res.spikes(name)[0]) for name in res.spike_ids}
    weights = None if res.attention_weights is None else res.attention_weights[0]
    return res.trace_value[0], trains, weights


# -- checkpoint IO ---------------------------------------------------------

CHECKPOINT_MAGIC = b"SPKM"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIIIIdB")
_LIF_RECORD = struct.Struct("<dddd")


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: JasnnModel, path) -> None:
    variant = ATTENTION_VARIANTS.index(model.attention)
    parts = [_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.in_channels,
                               model.base_channels, model.kernel_size, model.num_classes,
                               model.positions, len(LAYER_NAMES), model.eps, variant)]
    for name in LAYER_NAMES:
        p = model.lif[name]
        parts.append(_LIF_RECORD.pack(p.u_th, p.v_reset, p.dt_ms, p.tau_ms))
    for name in PARAM_NAMES:
        parts.append(np.asarray(model.params[name], dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> JasnnModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointError("checkpoint shorter than its header")
    (magic, version, cin, n, k, ncls, positions, nlayers, eps,
     variant) = _CKPT_HEADER.unpack_from(blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if nlayers != len(LAYER_NAMES) or variant >= len(ATTENTION_VARIANTS):
        raise CheckpointError("architecture header is inconsistent")
    offset = _CKPT_HEADER.size
    lif = {}
    for name in LAYER_NAMES:
        lif[name] = LifParams(*_LIF_RECORD.unpack_from(blob, offset))
        offset += _LIF_RECORD.size
    model = JasnnModel(cin, n, k, ncls, positions, ATTENTION_VARIANTS[variant], eps, lif)
    shapes = model.param_shapes()
    expected = offset + 4 * sum(int(np.prod(shapes[name])) for name in PARAM_NAMES)
    if len(blob) != expected:
        raise CheckpointError(f"weight payload is {len(blob) - offset} bytes, "
                              f"expected {expected - offset}")
    for name in PARAM_NAMES:
        count = int(np.prod(shapes[name]))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        model.params[name] = arr.astype(np.float64).reshape(shapes[name])
        offset += 4 * count
    return model
