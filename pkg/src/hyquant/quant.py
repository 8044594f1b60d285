"""Uniform quantizer: scale/zero-point fitting, fake quantization, overflow analysis.

Conventions fixed here and relied on by golden files elsewhere:

* signed integer grid [-2^(k-1), 2^(k-1)-1] for weights and activations;
* rounding is half-away-from-zero (numpy's default half-even would shift
  quantized codes by one ulp and break bit-exact artifacts);
* the raw zero-point is kept as the continuous value q_min - r_min/scale so
  overflow diagnosis is exactly the r_min>0 / r_max<0 condition, while the
  stored integer zero-point is rounded then clamped into the grid;
* degenerate (constant) ranges floor the scale at SCALE_FLOOR instead of
  erroring - narrow or all-constant channels are expected inputs.

All functions are pure over immutable inputs and freely parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor

_F32 = np.float32

SCALE_FLOOR = 1e-8

SCHEMES = ("symmetric", "asymmetric")
GRANULARITIES = ("per_layer", "per_channel")


class QuantError(ValueError):
    """Bad quantizer parameters or application."""


def grid_range(bits: int) -> tuple[int, int]:
    """Signed clip range [q_min, q_max] for a k-bit grid.

    6 and 8 are the production settings; 1 supports degradation probes and
    widths up to 32 support infinite-resolution stubs in tests.
    """
    if not 1 <= bits <= 32:
        raise QuantError(f"bit-width {bits} outside supported range [1, 32]")
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round half away from zero (ties at .5 move away from 0)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def floor_scale(scale: np.ndarray) -> np.ndarray:
    """Apply the degenerate-range floor so scales stay strictly positive."""
    return np.maximum(np.asarray(scale, dtype=np.float64), SCALE_FLOOR)


@dataclass(frozen=True)
class QuantParams:
    """Quantizer parameters for one tensor site.

    scale/zero_point are scalars (shape ()) for per_layer granularity and
    vectors (C,) along channel_axis for per_channel. zero_point_raw retains
    the continuous pre-round, pre-clamp zero-point for overflow diagnosis.
    """

    bits: int
    scheme: str
    granularity: str
    channel_axis: int | None
    scale: np.ndarray
    zero_point: np.ndarray
    zero_point_raw: np.ndarray

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise QuantError(f"unknown scheme '{self.scheme}'")
        if self.granularity not in GRANULARITIES:
            raise QuantError(f"unknown granularity '{self.granularity}'")
        if self.granularity == "per_channel" and self.channel_axis is None:
            raise QuantError("per_channel params require a channel_axis")
        q_min, q_max = grid_range(self.bits)
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=_F32))
        object.__setattr__(self, "zero_point", np.asarray(self.zero_point, dtype=np.int32))
        object.__setattr__(self, "zero_point_raw",
                           np.asarray(self.zero_point_raw, dtype=np.float64))
        if not np.all(self.scale > 0):
            raise QuantError("scale must be strictly positive (floor degenerate ranges)")
        if self.scheme == "symmetric" and np.any(self.zero_point != 0):
            raise QuantError("symmetric scheme requires zero_point == 0")
        if np.any(self.zero_point < q_min) or np.any(self.zero_point > q_max):
            raise QuantError(f"stored zero_point outside grid [{q_min}, {q_max}]")

    @property
    def q_min(self) -> int:
        return grid_range(self.bits)[0]

    @property
    def q_max(self) -> int:
        return grid_range(self.bits)[1]

    @property
    def clamped_mask(self) -> np.ndarray:
        """True where the stored integer zero-point was altered by clamping."""
        rounded = round_half_away(self.zero_point_raw)
        return (rounded < self.q_min) | (rounded > self.q_max)

    @property
    def any_clamped(self) -> bool:
        return bool(np.any(self.clamped_mask))


@dataclass(frozen=True)
class ChannelOverflow:
    channel: int
    r_min: float
    r_max: float
    zero_point_raw: float
    flagged: bool


@dataclass(frozen=True)
class OverflowReport:
    """Per-channel zero-point overflow diagnosis for an asymmetric fit."""

    bits: int
    axis: int
    channels: tuple[ChannelOverflow, ...] = field(default=())

    @property
    def flagged_channels(self) -> tuple[int, ...]:
        return tuple(c.channel for c in self.channels if c.flagged)

    @property
    def total(self) -> int:
        return len(self.channels)

    @property
    def flagged_count(self) -> int:
        return len(self.flagged_channels)


def _reduce(t: np.ndarray, channel_axis: int | None):
    """(min, max, absmax) over everything, or per channel along channel_axis."""
    if channel_axis is None:
        return (np.asarray(t.min(), dtype=np.float64),
                np.asarray(t.max(), dtype=np.float64),
                np.asarray(np.abs(t).max(), dtype=np.float64))
    ax = channel_axis % t.ndim
    moved = np.moveaxis(t, ax, 0).reshape(t.shape[ax], -1)
    return (moved.min(axis=1).astype(np.float64),
            moved.max(axis=1).astype(np.float64),
            np.abs(moved).max(axis=1).astype(np.float64))


def _asym_zero_points(r_min: np.ndarray, scale: np.ndarray, bits: int):
    """Continuous raw zero-point and its rounded, clamped integer form."""
    q_min, q_max = grid_range(bits)
    raw = q_min - np.asarray(r_min, dtype=np.float64) / np.asarray(scale, dtype=np.float64)
    stored = np.clip(round_half_away(raw), q_min, q_max).astype(np.int32)
    return raw, stored


def fit_minmax(t: Tensor, bits: int, scheme: str, granularity: str,
               channel_axis: int | None = None) -> QuantParams:
    """Min-max fit of scale and zero-point.

    symmetric: scale = absmax / (2^(k-1) - 1), zero_point = 0
    asymmetric: scale = (max - min) / (2^k - 1), zp from r_min (clamped)
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=_F32)
    if data.size == 0:
        raise QuantError("cannot fit quantizer parameters on an empty tensor")
    if granularity == "per_layer":
        channel_axis = None
    elif channel_axis is None:
        raise QuantError("per_channel fit requires a channel_axis")
    r_min, r_max, r_abs = _reduce(data, channel_axis)
    q_min, q_max = grid_range(bits)
    if scheme == "symmetric":
        denom = max(2 ** (bits - 1) - 1, 1)
        sc = floor_scale(r_abs / denom)
        zp = np.zeros_like(sc, dtype=np.int32)
        raw = np.zeros_like(sc, dtype=np.float64)
    elif scheme == "asymmetric":
        sc = floor_scale((r_max - r_min) / (2 ** bits - 1))
        raw, zp = _asym_zero_points(r_min, sc, bits)
    else:
        raise QuantError(f"unknown scheme '{scheme}'")
    return QuantParams(bits=bits, scheme=scheme, granularity=granularity,
                       channel_axis=channel_axis, scale=sc, zero_point=zp,
                       zero_point_raw=raw)


def params_for_scale(base: QuantParams, scale) -> QuantParams:
    """Candidate-search params: the base fit's zero-point with a new scale.

    The search optimizes only the scale (plus granularity and scheme); the
    zero-point always stays the min-max fit's, so scanning scales rescales the
    represented range without inventing new clamping.
    """
    sc = floor_scale(scale)
    if sc.shape != base.scale.shape:
        raise QuantError(
            f"candidate scale shape {sc.shape} does not match base {base.scale.shape}")
    return QuantParams(bits=base.bits, scheme=base.scheme,
                       granularity=base.granularity,
                       channel_axis=base.channel_axis, scale=sc,
                       zero_point=base.zero_point,
                       zero_point_raw=base.zero_point_raw)


def _broadcast_param(v: np.ndarray, ndim: int, channel_axis: int | None) -> np.ndarray:
    if v.ndim == 0 or channel_axis is None:
        return v
    shape = [1] * ndim
    shape[channel_axis % ndim] = v.shape[0]
    return v.reshape(shape)


def quantize_dequantize(t: Tensor, p: QuantParams, tape: Tape | None = None) -> Tensor:
    """Fake quantization: clip(round(x/scale + zp)) mapped back to reals.

    Computed in float64 then cast to float32 so the high-bit limit collapses
    to identity within float32 rounding. Backward is a clip-aware
    straight-through estimator.
    """
    xa = t.data
    if p.granularity == "per_channel":
        ax = p.channel_axis % xa.ndim
        if xa.shape[ax] != p.scale.size:
            raise QuantError(
                f"per_channel params carry {p.scale.size} channels but tensor "
                f"has {xa.shape[ax]} along axis {ax}")
    sc = _broadcast_param(p.scale.astype(np.float64), xa.ndim, p.channel_axis)
    zp = _broadcast_param(p.zero_point.astype(np.float64), xa.ndim, p.channel_axis)
    q_unclipped = round_half_away(xa.astype(np.float64) / sc + zp)
    q = np.clip(q_unclipped, p.q_min, p.q_max)
    out = ((q - zp) * sc).astype(_F32)
    if tape is None or t.node is None:
        return Tensor._wrap(out)
    mask = ((q_unclipped >= p.q_min) & (q_unclipped <= p.q_max)).astype(_F32)
    parent = t.node
    nid = tape.record("fake_quant", (parent,), out.shape,
                      lambda g: [(parent, g * mask)])
    return Tensor._wrap(out, nid)


def detect_zero_point_overflow(t: Tensor, bits: int, axis: int) -> OverflowReport:
    """Flag channels whose per-channel asymmetric raw zero-point leaves the grid.

    By construction this is exactly the set of channels with r_min > 0 (or
    r_max < 0 at the other end).
    """
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=_F32)
    if not -data.ndim <= axis < data.ndim:
        raise QuantError(f"axis {axis} invalid for shape {data.shape}")
    r_min, r_max, _ = _reduce(data, axis)
    sc = floor_scale((r_max - r_min) / (2 ** bits - 1))
    q_min, q_max = grid_range(bits)
    raw = q_min - r_min / sc
    flagged = (raw < q_min) | (raw > q_max)
    channels = tuple(
        ChannelOverflow(channel=i, r_min=float(r_min[i]), r_max=float(r_max[i]),
                        zero_point_raw=float(raw[i]), flagged=bool(flagged[i]))
        for i in range(r_min.shape[0]))
    return OverflowReport(bits=bits, axis=axis % data.ndim, channels=channels)
