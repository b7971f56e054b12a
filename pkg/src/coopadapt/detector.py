"""The frozen cooperative pipeline: fusion, anchor head, decoding, NMS.

Fusion and the detection head never learn during online adaptation; they
are built once (hand-set by default, optionally toy-pretrained) and their
tensors are plain constants on the tape, so gradients flow through them
to the plugin but never into them.

The default head is analytic: the canonical channel layout is designed so
a 1x1 readout recovers everything — classification is an affine map of
the occupancy channel, regression is the identity on the six geometry
channels, and the two direction logits are opposite projections of the
heading channels.  That keeps the whole acceptance suite training-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .autodiff import Tape, Tensor, constant, conv2d, max_fuse, softmax_weighted_sum
from .bev import FeatureField
from .errors import ConfigError, ContractError, ShapeError
from .world import L_REF, OCC_CHANNEL, W_REF, OrientedBox

FUSION_KINDS = ("max_fusion", "weighted_fusion")
HEAD_OUT = 9  # 1 cls + 6 reg + 2 dir
SCORE_SLOPE = 3.0  # weighted-fusion per-cell score read off the occupancy channel

DEFAULT_SCORE_THRESH = 0.1
DEFAULT_NMS_IOU = 0.15
DEFAULT_TOP_K = 300

# Hand-set readout coefficients: cls = 12 * occ - 5 puts background at
# sigmoid(-5) ~= 0.007, a weak (0.3-amplitude) peak at ~0.20, and a full
# peak at ~0.999, so the distillation masks split cleanly on score bands.
# The slope is deliberately steep: score bands then correspond to thin
# occupancy shells, so score-space corrections cost little feature energy.
CLS_SLOPE = 12.0
CLS_BIAS = -5.0
DIR_SLOPE = 2.0 / math.sqrt(2.0)


@dataclass(frozen=True)
class FusionModule:
    kind: str
    score_w: Tensor = None
    score_b: Tensor = None

    def __post_init__(self):
        if self.kind not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {self.kind!r}; expected one of {FUSION_KINDS}")
        if self.kind == "weighted_fusion" and self.score_w is None:
            raise ConfigError("weighted_fusion needs its frozen scoring conv")

    def to_checkpoint(self) -> dict:
        if self.kind == "max_fusion":
            return {}
        return {"score_w": self.score_w.data.copy(), "score_b": self.score_b.data.copy()}


def build_fusion(kind: str, channels: int = None) -> FusionModule:
    if kind == "max_fusion":
        return FusionModule(kind=kind)
    if channels is None:
        raise ConfigError("weighted_fusion needs the channel count")
    w = np.zeros((1, channels, 1, 1))
    w[0, OCC_CHANNEL, 0, 0] = SCORE_SLOPE
    return FusionModule(kind=kind, score_w=constant(w), score_b=constant(np.zeros(1)))


def fuse(fusion: FusionModule, ego: FeatureField, neighbors: list, tape: Tape = None) -> FeatureField:
    """Combine ego and collaborator fields on the ego side.

    ``max_fusion`` takes the elementwise max across agents; ``weighted_fusion``
    scores each agent per cell with the frozen 1x1 conv and takes the softmax
    convex combination.  Both reduce to the ego field when alone.
    """
    for nb in neighbors:
        if not ego.same_grid(nb):
            raise ShapeError(
                f"agent {nb.agent_id!r} field {nb.values.data.shape} does not match "
                f"ego field {ego.values.data.shape}"
            )
    fields = [ego.values] + [nb.values for nb in neighbors]
    if fusion.kind == "max_fusion":
        out = max_fuse(fields, tape)
    else:
        scores = [conv2d(f, fusion.score_w, fusion.score_b, tape=tape) for f in fields]
        out = softmax_weighted_sum(fields, scores, tape)
    return FeatureField(values=out, agent_id=ego.agent_id)


@dataclass(frozen=True)
class DetectionHead:
    weight: Tensor  # [9, C, 1, 1]
    bias: Tensor  # [9]

    def __post_init__(self):
        if self.weight.data.ndim != 4 or self.weight.data.shape[0] != HEAD_OUT:
            raise ConfigError(f"head readout must be [{HEAD_OUT}, C, 1, 1], got {self.weight.data.shape}")

    @property
    def channels(self) -> int:
        return self.weight.data.shape[1]

    def to_checkpoint(self) -> dict:
        return {"weight": self.weight.data.copy(), "bias": self.bias.data.copy()}


def hand_set_head(channels: int) -> DetectionHead:
    """The analytic readout of the canonical channel layout."""
    if channels < 7:
        raise ConfigError(f"hand-set head needs the 7 canonical channels, got {channels}")
    w = np.zeros((HEAD_OUT, channels, 1, 1))
    b = np.zeros(HEAD_OUT)
    w[0, OCC_CHANNEL, 0, 0] = CLS_SLOPE
    b[0] = CLS_BIAS
    for i in range(6):  # reg rows read the geometry channels directly
        w[1 + i, 1 + i, 0, 0] = 1.0
    w[7, 5, 0, 0] = DIR_SLOPE
    w[7, 6, 0, 0] = DIR_SLOPE
    w[8, 5, 0, 0] = -DIR_SLOPE
    w[8, 6, 0, 0] = -DIR_SLOPE
    return DetectionHead(weight=constant(w), bias=constant(b))


class AnchorPredictions:
    """Per-anchor readout with the taped raw map kept for distillation."""

    __slots__ = ("raw", "height", "width")

    def __init__(self, raw: Tensor, height: int, width: int):
        if raw.data.shape != (HEAD_OUT, height, width):
            raise ShapeError(f"expected raw readout ({HEAD_OUT}, {height}, {width}), got {raw.data.shape}")
        if not np.isfinite(raw.data).all():
            raise ContractError("anchor predictions contain non-finite values")
        self.raw = raw
        self.height = height
        self.width = width

    @property
    def anchors(self) -> int:
        return self.height * self.width

    @property
    def cls_logits(self) -> np.ndarray:
        return self.raw.data[0].reshape(-1)

    @property
    def reg(self) -> np.ndarray:
        return self.raw.data[1:7].reshape(6, -1).T

    @property
    def dir_logits(self) -> np.ndarray:
        return self.raw.data[7:9].reshape(2, -1).T


def head_forward(head: DetectionHead, fused: FeatureField, tape: Tape = None) -> AnchorPredictions:
    if fused.channels != head.channels:
        raise ShapeError(
            f"head expects {head.channels} channels, fused field has {fused.channels}"
        )
    raw = conv2d(fused.values, head.weight, head.bias, tape=tape)
    return AnchorPredictions(raw=raw, height=fused.height, width=fused.width)


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    score: float


def encode_box(box: OrientedBox, row: int, col: int) -> np.ndarray:
    """Regression target for a box against the anchor cell (row, col)."""
    cx, cy = col + 0.5, row + 0.5
    return np.array(
        [
            box.x - cx,
            box.y - cy,
            math.log(box.w / W_REF),
            math.log(box.l / L_REF),
            math.sin(box.yaw),
            math.cos(box.yaw),
        ]
    )


def decode_box(reg: np.ndarray, row: int, col: int) -> OrientedBox:
    dx, dy, logw, logl, s, c = (float(v) for v in reg)
    return OrientedBox(
        x=(col + 0.5) + dx,
        y=(row + 0.5) + dy,
        w=W_REF * math.exp(logw),
        l=L_REF * math.exp(logl),
        yaw=math.atan2(s, c) if (s, c) != (0.0, 0.0) else 0.0,
    )


def decode_and_nms(
    preds: AnchorPredictions,
    score_thresh: float = DEFAULT_SCORE_THRESH,
    nms_iou: float = DEFAULT_NMS_IOU,
    top_k: int = DEFAULT_TOP_K,
) -> list:
    """Decode anchors above threshold and greedily suppress by rotated IoU.

    Candidates are visited in descending score (anchor index breaking ties),
    capped at ``top_k`` before suppression; a candidate survives if its IoU
    with every kept box stays at or below ``nms_iou``.
    """
    if not (0.0 < score_thresh < 1.0 and 0.0 < nms_iou < 1.0):
        raise ConfigError(
            f"thresholds must lie in (0, 1), got score_thresh={score_thresh}, nms_iou={nms_iou}"
        )
    logits = preds.cls_logits
    scores = 1.0 / (1.0 + np.exp(-logits))
    cand = np.nonzero(scores >= score_thresh)[0]
    if cand.size == 0:
        return []
    order = cand[np.argsort(-scores[cand], kind="stable")][:top_k]

    rows, cols = np.divmod(order, preds.width)
    reg = preds.reg[order]
    boxes = np.stack(
        [
            cols + 0.5 + reg[:, 0],
            rows + 0.5 + reg[:, 1],
            W_REF * np.exp(reg[:, 2]),
            L_REF * np.exp(reg[:, 3]),
            np.arctan2(reg[:, 4], reg[:, 5]),
        ],
        axis=1,
    )
    kept: list[int] = []
    for i in range(boxes.shape[0]):
        if kept:
            ious = backend.rotated_iou_pairs(np.repeat(boxes[i : i + 1], len(kept), axis=0), boxes[kept])
            if np.any(ious > nms_iou):
                continue
        kept.append(i)
    return [
        Detection(
            box=OrientedBox(x=b[0], y=b[1], w=b[2], l=b[3], yaw=b[4]),
            score=float(s),
        )
        for b, s in zip(boxes[kept], scores[order[kept]])
    ]


# -- toy pretraining (optional fidelity path) -----------------------------------


def focal_loss_value(prob: float, target: float, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Sigmoid focal loss for one anchor, written on the probability."""
    p = min(max(prob, 1e-12), 1.0 - 1e-12)
    if target >= 0.5:
        return -alpha * (1.0 - p) ** gamma * math.log(p)
    return -(1.0 - alpha) * p**gamma * math.log(1.0 - p)


def smooth_l1_value(residual: float) -> float:
    a = abs(residual)
    return 0.5 * a * a if a < 1.0 else a - 0.5


def _direction_bin(yaw: float, offset: float = 0.7853) -> int:
    return int(math.floor((yaw + offset) / math.pi) % 2)


def random_head(channels: int, seed: int = 0) -> DetectionHead:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x68656164]))
    w = rng.normal(0.0, 0.05, (HEAD_OUT, channels, 1, 1))
    return DetectionHead(weight=constant(w), bias=constant(np.zeros(HEAD_OUT)))


def toy_pretrain(
    head: DetectionHead,
    samples: list,
    epochs: int = 1,
    lr: float = 0.05,
    alpha: float = 0.25,
    gamma: float = 2.0,
    dir_offset: float = 0.7853,
    geometry_radius: float = 2.0,
) -> DetectionHead:
    """Train a fresh readout on ego-only renders with analytic gradients.

    ``samples`` is a list of (FeatureField, Scene) pairs.  Because the head
    is one linear map, the loss gradient factors into (d loss / d logits)
    times the input features; no tape is needed.  Raises if the loss ever
    goes non-finite.
    """
    w = head.weight.data.copy()
    b = head.bias.data.copy()
    for epoch in range(epochs):
        for field, scene in samples:
            data = field.values.data
            c, h, wd = data.shape
            yy, xx = np.mgrid[0:h, 0:wd]
            cls_t = np.zeros((h, wd))
            reg_t = np.zeros((6, h, wd))
            dir_t = np.zeros((h, wd), dtype=int)
            pos = np.zeros((h, wd), dtype=bool)
            for box, v in zip(scene.boxes, scene.vis_ego):
                if v <= 0.0:
                    continue
                d2 = (xx + 0.5 - box.x) ** 2 + (yy + 0.5 - box.y) ** 2
                near = d2 <= geometry_radius**2
                pos |= near
                cls_t[near] = 1.0
                reg_t[0][near] = box.x - (xx[near] + 0.5)
                reg_t[1][near] = box.y - (yy[near] + 0.5)
                reg_t[2][near] = math.log(box.w / W_REF)
                reg_t[3][near] = math.log(box.l / L_REF)
                reg_t[4][near] = math.sin(box.yaw)
                reg_t[5][near] = math.cos(box.yaw)
                dir_t[near] = _direction_bin(box.yaw, dir_offset)

            out = np.einsum("oc,chw->ohw", w[:, :, 0, 0], data) + b[:, None, None]
            p = 1.0 / (1.0 + np.exp(-out[0]))
            # d focal / d logit, positives and negatives separately.
            pt = np.clip(np.where(cls_t > 0.5, p, 1.0 - p), 1e-12, 1.0)
            a_t = np.where(cls_t > 0.5, alpha, 1.0 - alpha)
            focal_grad_mag = a_t * (1.0 - pt) ** gamma * (
                gamma * pt * (-np.log(pt)) + (1.0 - pt)
            )
            g_cls = np.where(cls_t > 0.5, -focal_grad_mag, focal_grad_mag) / (h * wd)

            resid = out[1:7] - reg_t
            g_reg = np.clip(resid, -1.0, 1.0) * pos[None] / max(pos.sum(), 1)

            dir_logits = out[7:9]
            m = dir_logits.max(axis=0, keepdims=True)
            e = np.exp(dir_logits - m)
            soft = e / e.sum(axis=0, keepdims=True)
            onehot = np.stack([dir_t == 0, dir_t == 1]).astype(float)
            g_dir = (soft - onehot) * pos[None] / max(pos.sum(), 1)

            loss = (
                np.mean(
                    np.where(
                        cls_t > 0.5,
                        -alpha * (1 - pt) ** gamma * np.log(pt),
                        -(1 - alpha) * (1 - pt) ** gamma * np.log(pt),
                    )
                )
                + (np.where(np.abs(resid) < 1, 0.5 * resid**2, np.abs(resid) - 0.5) * pos).sum()
                / max(pos.sum(), 1)
                + (-np.log(np.clip((soft * onehot).sum(axis=0), 1e-12, 1.0)) * pos).sum()
                / max(pos.sum(), 1)
            )
            if not np.isfinite(loss):
                raise ContractError(
                    f"toy pretraining diverged at epoch {epoch}: loss={loss!r}"
                )

            g_out = np.concatenate([g_cls[None], g_reg, g_dir], axis=0)
            grad_w = np.einsum("ohw,chw->oc", g_out, data)[:, :, None, None]
            grad_b = g_out.sum(axis=(1, 2))
            w -= lr * grad_w
            b -= lr * grad_b
    return DetectionHead(weight=constant(w), bias=constant(b))
