"""Deterministic scene generation and procedural heterogeneous encoders.

A scene is a handful of oriented boxes on a metric BEV grid with
per-agent visibility tiers: a configurable fraction of boxes is invisible
to the ego agent (these drive the enhancement signal), a further fraction
is only weakly visible, and collaborators see everything.

``render_canonical`` is the shared stand-in encoder: occupancy bumps plus
local geometry encodings on the first seven channels, seeded structured
clutter on a band of active channels, and near-silent remaining channels.
All agents render in the ego frame (pose alignment is assumed perfect),
so with no distortion applied the collaborator field matches the ego
field wherever both agents see the same boxes.

``apply_distortion`` manufactures the cross-encoder gap: invertible
channel-space transforms (per-channel affine, full channel mixing) plus
optional seeded noise.  Because every distortion here is invertible, an
ideal repair exists in closed form, which is what makes end-to-end
adaptation claims checkable on this testbed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bev import FeatureField
from .errors import ConfigError, ContractError, ShapeError

# Geometry-channel encoding references: widths and lengths are stored as
# log-ratios against these, so a zero channel decodes to the fleet-typical box.
W_REF = 2.0
L_REF = 4.5

# Channel layout of the canonical render.
OCC_CHANNEL = 0
GEOMETRY_CHANNELS = slice(1, 7)
CLUTTER_LO = 7
CLUTTER_HI = 15  # exclusive; channels 7..14 carry structured clutter

_SCENE_TAG = 0x7363656E
_CLUTTER_TAG = 0x636C7574
_GHOST_TAG = 0x67687374
_DORMANT_TAG = 0x646F726D
_MIX_TAG = 0x6D697861


@dataclass(frozen=True)
class OrientedBox:
    x: float
    y: float
    w: float
    l: float
    yaw: float

    def __post_init__(self):
        if self.w <= 0.0 or self.l <= 0.0:
            raise ContractError(f"box size must be positive, got w={self.w}, l={self.l}")
        yaw = math.remainder(self.yaw, 2.0 * math.pi)
        if yaw <= -math.pi:
            yaw += 2.0 * math.pi
        object.__setattr__(self, "yaw", yaw)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.l, self.yaw])


@dataclass(frozen=True)
class WorldProfile:
    """Bounds and amplitudes for scene generation and rendering."""

    channels: int = 64
    height: int = 48
    width: int = 48
    min_boxes: int = 2
    max_boxes: int = 12
    ego_blind: float = 0.2
    ego_weak: float = 0.15
    weak_amp: float = 0.3
    num_collaborators: int = 1
    bump_sigma: float = 1.3
    geometry_radius: float = 2.0
    clutter_amp: float = 0.12
    ghost_count: tuple = (3, 8)
    ghost_amp: tuple = (0.15, 0.3)
    ghost_sigma: tuple = (1.0, 1.8)
    dormant_amp: float = 0.01
    min_separation: float = 4.0
    margin: float = 3.5
    w_range: tuple = (1.8, 2.2)
    l_range: tuple = (4.0, 5.0)

    def __post_init__(self):
        if self.channels < 7:
            raise ConfigError(f"need at least 7 channels, got {self.channels}")
        if not (0 <= self.min_boxes <= self.max_boxes):
            raise ConfigError(f"bad box-count bounds [{self.min_boxes}, {self.max_boxes}]")
        if not (0.0 <= self.ego_blind <= 1.0 and 0.0 <= self.ego_weak <= 1.0):
            raise ConfigError("visibility fractions must lie in [0, 1]")
        if self.ego_blind + self.ego_weak > 1.0:
            raise ConfigError("ego_blind + ego_weak must not exceed 1")
        if self.num_collaborators < 0:
            raise ConfigError("num_collaborators must be non-negative")

    @property
    def grid(self) -> tuple:
        return (self.channels, self.height, self.width)


@dataclass(frozen=True, eq=False)
class Scene:
    boxes: tuple
    vis_ego: np.ndarray
    ego_pose: tuple
    neighbor_poses: tuple
    rng_seed: int
    height: int
    width: int

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.boxes == other.boxes
            and np.array_equal(self.vis_ego, other.vis_ego)
            and self.ego_pose == other.ego_pose
            and self.neighbor_poses == other.neighbor_poses
            and self.rng_seed == other.rng_seed
            and (self.height, self.width) == (other.height, other.width)
        )

    def to_json_dict(self) -> dict:
        return {
            "boxes": [list(b.as_array()) for b in self.boxes],
            "vis_ego": list(self.vis_ego),
            "ego_pose": list(self.ego_pose),
            "neighbor_poses": [list(p) for p in self.neighbor_poses],
            "rng_seed": self.rng_seed,
            "height": self.height,
            "width": self.width,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Scene":
        return cls(
            boxes=tuple(OrientedBox(*vals) for vals in doc["boxes"]),
            vis_ego=np.asarray(doc["vis_ego"], dtype=np.float64),
            ego_pose=tuple(doc["ego_pose"]),
            neighbor_poses=tuple(tuple(p) for p in doc["neighbor_poses"]),
            rng_seed=int(doc["rng_seed"]),
            height=int(doc["height"]),
            width=int(doc["width"]),
        )


def generate_scene(seed: int, profile: WorldProfile) -> Scene:
    """Deterministically place boxes and assign ego-visibility tiers.

    Collaborators always see every box, so each box is visible to at least
    one agent; the ego misses a ``ego_blind`` fraction entirely and sees a
    further ``ego_weak`` fraction at reduced amplitude.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, _SCENE_TAG]))
    n_boxes = int(rng.integers(profile.min_boxes, profile.max_boxes + 1))
    lo_x, hi_x = profile.margin, profile.width - profile.margin
    lo_y, hi_y = profile.margin, profile.height - profile.margin

    centers = []
    attempts = 0
    while len(centers) < n_boxes and attempts < 1000:
        attempts += 1
        cand = np.array([rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)])
        if all(np.hypot(*(cand - c)) >= profile.min_separation for c in centers):
            centers.append(cand)

    boxes = []
    for cx, cy in centers:
        boxes.append(
            OrientedBox(
                x=float(cx),
                y=float(cy),
                w=float(rng.uniform(*profile.w_range)),
                l=float(rng.uniform(*profile.l_range)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
        )

    tier = rng.uniform(0.0, 1.0, size=len(boxes))
    vis_ego = np.where(
        tier < profile.ego_blind,
        0.0,
        np.where(tier < profile.ego_blind + profile.ego_weak, profile.weak_amp, 1.0),
    )

    neighbor_poses = tuple(
        (float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y)), float(rng.uniform(-math.pi, math.pi)))
        for _ in range(profile.num_collaborators)
    )
    return Scene(
        boxes=tuple(boxes),
        vis_ego=vis_ego,
        ego_pose=(profile.width / 2.0, profile.height / 2.0, 0.0),
        neighbor_poses=neighbor_poses,
        rng_seed=int(seed),
        height=profile.height,
        width=profile.width,
    )


def _bilinear_upsample(coarse: np.ndarray, height: int, width: int) -> np.ndarray:
    """Edge-clamped bilinear resize of a small 2D patch."""
    ch, cw = coarse.shape
    ys = np.clip((np.arange(height) + 0.5) * ch / height - 0.5, 0.0, ch - 1.0)
    xs = np.clip((np.arange(width) + 0.5) * cw / width - 0.5, 0.0, cw - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    return (
        coarse[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + coarse[np.ix_(y1, x0)] * wy * (1 - wx)
        + coarse[np.ix_(y0, x1)] * (1 - wy) * wx
        + coarse[np.ix_(y1, x1)] * wy * wx
    )


def _structured_channels(scene: Scene, profile: WorldProfile, tag: int, count: int, amp: float):
    """Seeded smooth random fields, shared by all agents of a scene."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[scene.rng_seed, tag]))
    out = np.empty((count, scene.height, scene.width))
    for i in range(count):
        coarse = rng.normal(0.0, 1.0, (6, 6))
        out[i] = amp * _bilinear_upsample(coarse, scene.height, scene.width)
    return out


def _ghost_channels(scene: Scene, profile: WorldProfile, count: int):
    """Seeded sparse blob fields: isolated background activations.

    Unlike the smooth clutter texture, these concentrate their energy in a
    handful of compact bumps per channel, so a distortion that leaks them
    into the occupancy row produces discrete spurious responses rather than
    a broad score haze.  Shared by all agents of a scene.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[scene.rng_seed, _GHOST_TAG]))
    h, w = scene.height, scene.width
    yy, xx = np.mgrid[0:h, 0:w]
    cell_x = xx + 0.5
    cell_y = yy + 0.5
    out = np.zeros((count, h, w))
    lo, hi = profile.ghost_count
    for i in range(count):
        for _ in range(int(rng.integers(lo, hi + 1))):
            cx = rng.uniform(0.0, w)
            cy = rng.uniform(0.0, h)
            amp = rng.uniform(*profile.ghost_amp)
            sigma = rng.uniform(*profile.ghost_sigma)
            d2 = (cell_x - cx) ** 2 + (cell_y - cy) ** 2
            np.maximum(out[i], amp * np.exp(-d2 / (2.0 * sigma**2)), out=out[i])
    return out


def render_canonical(scene: Scene, agent: str, grid: tuple = None, profile: WorldProfile = None) -> FeatureField:
    """Render one agent's view of the scene onto the canonical channel layout.

    ``agent`` is ``"ego"`` or a collaborator id like ``"veh_01"``.  Channel 0
    carries Gaussian occupancy bumps scaled by the agent's visibility of each
    box; channels 1-6 carry (dx, dy, log w-ratio, log l-ratio, sin yaw,
    cos yaw) near each visible center, nearest box winning on contention;
    channels 7-8 carry sparse blob activations and channels 9-14 smooth
    seeded clutter, both shared across agents; any remaining channels idle
    at a small amplitude.
    """
    profile = profile if profile is not None else WorldProfile()
    grid = grid if grid is not None else profile.grid
    c, h, w = grid
    if c < 7:
        raise ConfigError(f"canonical layout needs at least 7 channels, got {c}")
    if h < scene.height or w < scene.width:
        raise ConfigError(
            f"grid {h}x{w} cannot contain the scene extent {scene.height}x{scene.width}"
        )

    data = np.zeros((c, h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    cell_x = xx + 0.5
    cell_y = yy + 0.5

    if agent == "ego":
        vis = scene.vis_ego
    else:
        vis = np.ones(len(scene.boxes))

    best_dist = np.full((h, w), np.inf)
    for box, v in zip(scene.boxes, vis):
        if v <= 0.0:
            continue
        d2 = (cell_x - box.x) ** 2 + (cell_y - box.y) ** 2
        bump = v * np.exp(-d2 / (2.0 * profile.bump_sigma**2))
        np.maximum(data[OCC_CHANNEL], bump, out=data[OCC_CHANNEL])

        near = (d2 <= profile.geometry_radius**2) & (d2 < best_dist)
        best_dist[near] = d2[near]
        data[1][near] = box.x - cell_x[near]
        data[2][near] = box.y - cell_y[near]
        data[3][near] = math.log(box.w / W_REF)
        data[4][near] = math.log(box.l / L_REF)
        data[5][near] = math.sin(box.yaw)
        data[6][near] = math.cos(box.yaw)

    n_clutter = max(0, min(CLUTTER_HI, c) - CLUTTER_LO)
    if n_clutter:
        n_ghost = min(2, n_clutter)
        data[CLUTTER_LO : CLUTTER_LO + n_ghost, : scene.height, : scene.width] = (
            _ghost_channels(scene, profile, n_ghost)
        )
        if n_clutter > n_ghost:
            data[CLUTTER_LO + n_ghost : CLUTTER_LO + n_clutter, : scene.height, : scene.width] = (
                _structured_channels(
                    scene, profile, _CLUTTER_TAG, n_clutter - n_ghost, profile.clutter_amp
                )
            )
    n_dormant = c - CLUTTER_HI
    if n_dormant > 0:
        data[CLUTTER_HI:, : scene.height, : scene.width] = _structured_channels(
            scene, profile, _DORMANT_TAG, n_dormant, profile.dormant_amp
        )
    return FeatureField(values=data, agent_id=agent)


# -- distortion family ---------------------------------------------------------

_KINDS = ("none", "channel_affine", "channel_mix", "noise_channels", "composite")
MAX_MIX_CONDITION = 50.0


@dataclass(frozen=True)
class DistortionSpec:
    kind: str = "none"
    gains: np.ndarray = None
    offsets: np.ndarray = None
    matrix: np.ndarray = None
    noise_amp: float = 0.0
    noise_channels: tuple = ()
    seed: int = 0
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ConfigError(f"unknown distortion kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "channel_affine":
            if self.gains is None or self.offsets is None:
                raise ConfigError("channel_affine needs gains and offsets")
            if np.asarray(self.gains).shape != np.asarray(self.offsets).shape:
                raise ConfigError("gains and offsets must have matching shapes")
        if self.kind == "channel_mix":
            if self.matrix is None:
                raise ConfigError("channel_mix needs a square matrix")
            m = np.asarray(self.matrix, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ConfigError("channel_mix needs a square matrix")
            cond = float(np.linalg.cond(m))
            if not np.isfinite(cond) or cond > MAX_MIX_CONDITION:
                raise ConfigError(
                    f"mixing matrix condition number {cond:.3g} exceeds {MAX_MIX_CONDITION:g}; "
                    "the distortion must stay invertible"
                )
        if self.kind == "noise_channels" and not self.noise_channels:
            raise ConfigError("noise_channels needs a non-empty channel list")
        if self.kind == "composite" and not self.parts:
            raise ConfigError("composite needs at least one part")

    # -- serialization -----------------------------------------------------
    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "seed": self.seed}
        if self.gains is not None:
            doc["gains"] = np.asarray(self.gains).tolist()
        if self.offsets is not None:
            doc["offsets"] = np.asarray(self.offsets).tolist()
        if self.matrix is not None:
            doc["matrix"] = np.asarray(self.matrix).tolist()
        if self.kind == "noise_channels":
            doc["noise_amp"] = self.noise_amp
            doc["noise_channels"] = list(self.noise_channels)
        if self.parts:
            doc["parts"] = [p.to_json_dict() for p in self.parts]
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "DistortionSpec":
        kw = {"kind": doc["kind"], "seed": int(doc.get("seed", 0))}
        if "gains" in doc:
            kw["gains"] = np.asarray(doc["gains"], dtype=np.float64)
        if "offsets" in doc:
            kw["offsets"] = np.asarray(doc["offsets"], dtype=np.float64)
        if "matrix" in doc:
            kw["matrix"] = np.asarray(doc["matrix"], dtype=np.float64)
        if "noise_amp" in doc:
            kw["noise_amp"] = float(doc["noise_amp"])
        if "noise_channels" in doc:
            kw["noise_channels"] = tuple(int(i) for i in doc["noise_channels"])
        if "parts" in doc:
            kw["parts"] = tuple(cls.from_json_dict(p) for p in doc["parts"])
        return cls(**kw)


def apply_distortion(f: FeatureField, spec: DistortionSpec) -> FeatureField:
    """Push a field through one procedural encoder distortion."""
    data = f.values.data
    if spec.kind == "none":
        out = data.copy()
    elif spec.kind == "channel_affine":
        gains = np.asarray(spec.gains, dtype=np.float64)
        if gains.shape[0] != data.shape[0]:
            raise ShapeError(f"affine expects {data.shape[0]} channels, got {gains.shape[0]}")
        out = data * gains[:, None, None] + np.asarray(spec.offsets)[:, None, None]
    elif spec.kind == "channel_mix":
        m = np.asarray(spec.matrix, dtype=np.float64)
        if m.shape[0] != data.shape[0]:
            raise ShapeError(f"mix matrix is {m.shape}, field has {data.shape[0]} channels")
        out = np.einsum("dc,chw->dhw", m, data)
    elif spec.kind == "noise_channels":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=[spec.seed, _MIX_TAG]))
        out = data.copy()
        for ch in spec.noise_channels:
            if not (0 <= ch < data.shape[0]):
                raise ShapeError(f"noise channel {ch} outside field with {data.shape[0]} channels")
            out[ch] += spec.noise_amp * rng.normal(0.0, 1.0, data.shape[1:])
    elif spec.kind == "composite":
        out_field = f
        for part in spec.parts:
            out_field = apply_distortion(out_field, part)
        return out_field
    else:  # pragma: no cover - guarded at construction
        raise ConfigError(f"unknown distortion kind {spec.kind!r}")
    return FeatureField(values=out, agent_id=f.agent_id)


# -- distortion builders ---------------------------------------------------------


def givens_mix(channels: int, angle: float, seed: int = 0) -> DistortionSpec:
    """Orthogonal channel mixing: disjoint channel pairs rotated by ``angle``."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, _MIX_TAG]))
    order = rng.permutation(channels)
    m = np.eye(channels)
    c, s = math.cos(angle), math.sin(angle)
    for k in range(0, channels - 1, 2):
        i, j = order[k], order[k + 1]
        m[i, i] = c
        m[j, j] = c
        m[i, j] = -s
        m[j, i] = s
    return DistortionSpec(kind="channel_mix", matrix=m, seed=seed)


def gain_spread_affine(channels: int, spread: float, seed: int = 0) -> DistortionSpec:
    """Per-channel gains exp(spread * z) with fixed seeded z; identity at 0."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, _MIX_TAG]))
    z = rng.normal(0.0, 1.0, channels)
    return DistortionSpec(
        kind="channel_affine", gains=np.exp(spread * z), offsets=np.zeros(channels), seed=seed
    )


def transition_mix(
    channels: int,
    occ_retain: float = 0.55,
    occ_leak: float = 2.6,
    geom_leak: float = 1.0,
    clutter_gain: tuple = (0.85, 1.2),
    dormant_jitter: float = 0.05,
    occ_offset: float = 0.0,
    seed: int = 0,
) -> DistortionSpec:
    """The bundled cross-encoder gap: clutter leaks into readout channels.

    The occupancy row keeps only ``occ_retain`` of itself and picks up the
    two blob-textured clutter channels at ``occ_leak`` each, so isolated
    background activations read out as discrete spurious detections; each
    geometry row picks up one smooth clutter channel at ``geom_leak``;
    clutter and dormant rows get mild diagonal gain jitter.  The matrix is
    checked to stay comfortably invertible.

    ``occ_offset`` adds a constant bias to the occupancy row after mixing
    (the swapped encoder's activations sit at a different operating point),
    returned as a composite of the mix and a channel-affine shift.
    """
    if channels < CLUTTER_HI:
        raise ConfigError(f"transition mix needs at least {CLUTTER_HI} channels, got {channels}")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, _MIX_TAG]))
    m = np.eye(channels)
    m[OCC_CHANNEL, OCC_CHANNEL] = occ_retain
    m[OCC_CHANNEL, CLUTTER_LO] = occ_leak
    m[OCC_CHANNEL, CLUTTER_LO + 1] = occ_leak
    for i, ch in enumerate(range(GEOMETRY_CHANNELS.start, GEOMETRY_CHANNELS.stop)):
        source = CLUTTER_LO + 2 + (i % (CLUTTER_HI - CLUTTER_LO - 2))
        m[ch, source] = geom_leak * float(rng.uniform(0.8, 1.2)) * (1 if i % 2 == 0 else -1)
    for ch in range(CLUTTER_LO, CLUTTER_HI):
        m[ch, ch] = float(rng.uniform(*clutter_gain))
    for ch in range(CLUTTER_HI, channels):
        m[ch, ch] = float(rng.uniform(1.0 - dormant_jitter, 1.0 + dormant_jitter))
    mix = DistortionSpec(kind="channel_mix", matrix=m, seed=seed)
    if occ_offset == 0.0:
        return mix
    offsets = np.zeros(channels)
    offsets[OCC_CHANNEL] = occ_offset
    shift = DistortionSpec(kind="channel_affine", gains=np.ones(channels), offsets=offsets, seed=seed)
    return DistortionSpec(kind="composite", parts=(mix, shift), seed=seed)
