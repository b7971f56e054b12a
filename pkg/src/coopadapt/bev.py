"""BEV feature fields, per-channel statistics, and statistical alignment.

A ``FeatureField`` is one agent's bird's-eye-view feature map, shape
``[C, H, W]``.  ``channel_stats`` reduces it to per-channel spatial mean
and standard deviation; ``adain_blend`` re-normalizes a collaborator's
field toward the ego statistics with a learnable per-channel blend
coefficient.  ``linear_cka`` and ``scale_alignment`` are the two
compatibility diagnostics reported alongside detection metrics.

Everything here is a pure function over immutable inputs.  ``adain_blend``
is built from taped ops so gradients reach the blend coefficients during
online adaptation; the statistics themselves are treated as constants of
the incoming fields.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, constant, mul, per_channel, sub
from .errors import ContractError, ShapeError

DEFAULT_EPS = 1e-5

_MAGIC = b"BEVF"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureField:
    """One agent's BEV feature map with its originating agent id."""

    values: Tensor
    agent_id: str

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            object.__setattr__(self, "values", constant(self.values))
        if self.values.data.ndim != 3:
            raise ShapeError(
                f"feature field must be [C, H, W], got shape {self.values.data.shape}"
            )
        if not np.isfinite(self.values.data).all():
            raise ContractError(f"feature field for agent {self.agent_id!r} has non-finite values")

    @property
    def channels(self) -> int:
        return self.values.data.shape[0]

    @property
    def height(self) -> int:
        return self.values.data.shape[1]

    @property
    def width(self) -> int:
        return self.values.data.shape[2]

    def same_grid(self, other: "FeatureField") -> bool:
        return self.values.data.shape == other.values.data.shape

    # -- serialization ----------------------------------------------------
    def to_bytes(self) -> bytes:
        """Flat little-endian binary: magic, version, agent id, shape, data."""
        agent = self.agent_id.encode("utf-8")
        header = _MAGIC + struct.pack(
            "<HH3I", _FORMAT_VERSION, len(agent), self.channels, self.height, self.width
        )
        payload = np.ascontiguousarray(self.values.data, dtype="<f8").tobytes()
        return header + agent + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "FeatureField":
        if blob[:4] != _MAGIC:
            raise ContractError("feature-field blob does not start with the BEVF magic")
        version, agent_len, c, h, w = struct.unpack_from("<HH3I", blob, 4)
        if version != _FORMAT_VERSION:
            raise ContractError(f"unsupported feature-field format version {version}")
        off = 4 + struct.calcsize("<HH3I")
        agent_id = blob[off : off + agent_len].decode("utf-8")
        off += agent_len
        expected = c * h * w * 8
        raw = blob[off : off + expected]
        if len(raw) != expected:
            raise ContractError(
                f"feature-field blob truncated: expected {expected} data bytes, got {len(raw)}"
            )
        data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(c, h, w)
        return cls(values=constant(data), agent_id=agent_id)

    def to_json(self) -> str:
        doc = {
            "agent_id": self.agent_id,
            "channels": self.channels,
            "height": self.height,
            "width": self.width,
            "values": self.values.data.ravel().tolist(),
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FeatureField":
        doc = json.loads(text)
        shape = (doc["channels"], doc["height"], doc["width"])
        data = np.asarray(doc["values"], dtype=np.float64).reshape(shape)
        return cls(values=constant(data), agent_id=doc["agent_id"])


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel spatial mean and (eps-floored) standard deviation."""

    mu: np.ndarray
    nu: np.ndarray
    eps: float

    def __post_init__(self):
        if self.mu.shape != self.nu.shape or self.mu.ndim != 1:
            raise ShapeError(
                f"channel stats must be flat per-channel vectors, got {self.mu.shape} / {self.nu.shape}"
            )
        if np.any(self.nu < self.eps):
            raise ContractError("channel std fell below its eps floor")


def channel_stats(field: FeatureField, eps: float = DEFAULT_EPS) -> ChannelStats:
    """Spatial mean and population std per channel, with eps added to the std.

    The eps keeps every later division by ``nu`` well-posed, including on
    constant channels where the raw std is exactly zero.
    """
    if eps <= 0.0:
        raise ContractError(f"stats eps must be positive, got {eps}")
    data = field.values.data
    if data.shape[1] * data.shape[2] < 1:
        raise ContractError("cannot take channel statistics of an empty field")
    mu = data.mean(axis=(1, 2))
    nu = np.sqrt(data.var(axis=(1, 2))) + eps
    return ChannelStats(mu=mu, nu=nu, eps=eps)


def adain_blend(
    field: FeatureField,
    stats_n: ChannelStats,
    stats_e: ChannelStats,
    alpha,
    tape=None,
) -> Tensor:
    """Blend a field toward ego statistics: ``F + alpha * (align(F) - F)``.

    ``align(F)`` re-normalizes each channel from the collaborator statistics
    ``(mu_n, nu_n)`` to the ego statistics ``(mu_e, nu_e)``.  ``alpha`` is a
    per-channel coefficient in [0, 1]; gradients flow to it (and to the field
    values if they require grad) when a tape is supplied.
    """
    c = field.channels
    if stats_n.mu.shape[0] != c or stats_e.mu.shape[0] != c:
        raise ShapeError(
            f"stats/field channel mismatch: field has {c}, stats have "
            f"{stats_n.mu.shape[0]} and {stats_e.mu.shape[0]}"
        )
    alpha_t = alpha if isinstance(alpha, Tensor) else constant(alpha)
    if alpha_t.data.shape != (c,):
        raise ShapeError(f"alpha must have shape ({c},), got {alpha_t.data.shape}")
    # align(F) = (F - mu_n) / nu_n * nu_e + mu_e, folded into one per-channel
    # affine map with constant coefficients.
    gain = (stats_e.nu / stats_n.nu).reshape(c, 1, 1)
    shift = (stats_e.mu - gain.reshape(c) * stats_n.mu).reshape(c, 1, 1)
    aligned = add(mul(field.values, constant(gain), tape), constant(shift), tape)
    delta = sub(aligned, field.values, tape)
    return add(field.values, mul(per_channel(alpha_t, tape), delta, tape), tape)


class MetricValue(float):
    """A float metric carrying a flag for degenerate (zero-variance) inputs."""

    __slots__ = ("degenerate",)

    def __new__(cls, value: float, degenerate: bool = False):
        out = super().__new__(cls, value)
        out.degenerate = bool(degenerate)
        return out


def _column_centered(field: FeatureField) -> np.ndarray:
    mat = field.values.data.reshape(field.channels, -1).T  # (H*W) x C
    return mat - mat.mean(axis=0, keepdims=True)


def linear_cka(a: FeatureField, b: FeatureField) -> MetricValue:
    """Linear CKA between two fields viewed as (H*W) x C matrices.

    Both matrices are column-centered first.  Returns 0 flagged degenerate
    when either field has no variance at all.
    """
    if a.values.data.shape != b.values.data.shape:
        raise ShapeError(
            f"CKA needs identical field shapes, got {a.values.data.shape} vs {b.values.data.shape}"
        )
    x = _column_centered(a)
    y = _column_centered(b)
    cross = np.linalg.norm(x.T @ y) ** 2
    norm_x = np.linalg.norm(x.T @ x)
    norm_y = np.linalg.norm(y.T @ y)
    if norm_x == 0.0 or norm_y == 0.0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(min(max(cross / (norm_x * norm_y), 0.0), 1.0))


def scale_alignment(a: FeatureField, b: FeatureField) -> MetricValue:
    """Symmetric ratio of mean per-channel stds: min(s_a, s_b) / max(s_a, s_b).

    1.0 means the two fields live at the same average feature scale.  The
    stds are the raw population values (the stats eps is subtracted back out)
    so that e.g. doubling a field halves the alignment exactly.
    """
    if a.values.data.shape != b.values.data.shape:
        raise ShapeError(
            f"scale alignment needs identical field shapes, got "
            f"{a.values.data.shape} vs {b.values.data.shape}"
        )
    stats_a = channel_stats(a)
    stats_b = channel_stats(b)
    s_a = float(np.mean(stats_a.nu - stats_a.eps))
    s_b = float(np.mean(stats_b.nu - stats_b.eps))
    if s_a <= 0.0 or s_b <= 0.0:
        return MetricValue(0.0, degenerate=True)
    return MetricValue(min(s_a, s_b) / max(s_a, s_b))
