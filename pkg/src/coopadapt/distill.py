"""Ego-as-teacher distillation: confidence masks, losses, online optimizer.

The teacher is the frozen ego-only path; its sigmoid classification scores
split the anchor grid into a confident band (``> tau_hi``), a boost band
(``tau_lo < p <= tau_hi``), and ignored background.  The preservation loss
matches the student to the teacher on the confident band; the enhancement
loss pushes the student's classification response up on the boost band.

``ttt_step`` performs exactly one online update of the plugin parameters:
backward, global-norm clip, decoupled weight decay, then Adam (or plain
SGD when configured).  A non-finite gradient skips the whole step and
reports it; the stream carries on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    backward,
    constant,
    mul,
    smooth_l1,
    softplus,
    sub,
    sum_all,
    take_channels,
)
from .detector import AnchorPredictions
from .errors import ConfigError
from .plugin import PluginParams


@dataclass(frozen=True)
class TTTConfig:
    tau_hi: float = 0.3
    tau_lo: float = 0.1
    lam: float = 0.1
    w_cls: float = 1.0
    w_reg: float = 1.0
    w_dir: float = 0.5
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimizer: str = "adam"

    def __post_init__(self):
        # tau_lo == tau_hi is allowed and yields an empty boost band, which
        # is how the "no boost at all" ablation rows are expressed.
        if not (0.0 <= self.tau_lo <= self.tau_hi <= 1.0):
            raise ConfigError(
                f"need 0 <= tau_lo <= tau_hi <= 1, got tau_lo={self.tau_lo}, tau_hi={self.tau_hi}"
            )
        if self.lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.clip_norm <= 0.0:
            raise ConfigError(f"clip norm must be positive, got {self.clip_norm}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")


@dataclass(frozen=True)
class ConfidenceMasks:
    m_hi: np.ndarray  # bool [A]
    m_boost: np.ndarray  # bool [A]

    @property
    def n_hi(self) -> int:
        return int(self.m_hi.sum())

    @property
    def n_boost(self) -> int:
        return int(self.m_boost.sum())


def build_masks(teacher: AnchorPredictions, cfg: TTTConfig) -> ConfidenceMasks:
    """Split anchors into confident / boost / background by teacher score."""
    probs = 1.0 / (1.0 + np.exp(-teacher.cls_logits))
    m_hi = probs > cfg.tau_hi
    m_boost = (probs > cfg.tau_lo) & (probs <= cfg.tau_hi)
    return ConfidenceMasks(m_hi=m_hi, m_boost=m_boost)


def _mask_map(mask: np.ndarray, h: int, w: int) -> Tensor:
    return constant(mask.astype(np.float64).reshape(1, h, w))


def _slice_raw(preds: AnchorPredictions, lo: int, hi: int, tape: Tape):
    return take_channels(preds.raw, lo, hi, tape)


def preservation_loss(
    student: AnchorPredictions,
    teacher: AnchorPredictions,
    masks: ConfidenceMasks,
    cfg: TTTConfig,
    tape: Tape = None,
) -> Tensor:
    """Teacher-matching loss over the confident band.

    Per confident anchor: BCE of the student classification logit against
    the teacher's sigmoid score as a soft target, plus smooth-L1 summed over
    the six regression dims, plus MSE averaged over the two direction
    logits; each term weighted per config, then averaged over the band.
    """
    if masks.n_hi == 0:
        return constant(0.0)
    h, w = student.height, student.width
    mask = _mask_map(masks.m_hi, h, w)
    inv_n = 1.0 / masks.n_hi

    s_cls = _slice_raw(student, 0, 1, tape)
    s_reg = _slice_raw(student, 1, 7, tape)
    s_dir = _slice_raw(student, 7, 9, tape)
    t_prob = constant(1.0 / (1.0 + np.exp(-teacher.raw.data[0:1])))
    t_reg = constant(teacher.raw.data[1:7])
    t_dir = constant(teacher.raw.data[7:9])

    # BCE with logits against a soft target: softplus(s) - p * s.
    bce = sub(softplus(s_cls, tape), mul(t_prob, s_cls, tape), tape)
    cls_term = mul(constant(cfg.w_cls * inv_n), sum_all(mul(mask, bce, tape), tape), tape)

    sl1 = smooth_l1(sub(s_reg, t_reg, tape), tape)
    reg_term = mul(constant(cfg.w_reg * inv_n), sum_all(mul(mask, sl1, tape), tape), tape)

    diff = sub(s_dir, t_dir, tape)
    sq = mul(diff, diff, tape)
    dir_term = mul(constant(cfg.w_dir * inv_n * 0.5), sum_all(mul(mask, sq, tape), tape), tape)

    return add(add(cls_term, reg_term, tape), dir_term, tape)


def enhancement_loss(
    student: AnchorPredictions, masks: ConfidenceMasks, tape: Tape = None
) -> Tensor:
    """Mean of -log sigmoid(student cls logit) over the boost band."""
    if masks.n_boost == 0:
        return constant(0.0)
    h, w = student.height, student.width
    mask = _mask_map(masks.m_boost, h, w)
    s_cls = _slice_raw(student, 0, 1, tape)
    # -log sigmoid(x) = softplus(-x), stable on both tails.
    neg = mul(constant(-1.0), s_cls, tape)
    total = sum_all(mul(mask, softplus(neg, tape), tape), tape)
    return mul(constant(1.0 / masks.n_boost), total, tape)


def total_loss(pres: Tensor, enh: Tensor, cfg: TTTConfig, tape: Tape = None) -> Tensor:
    return add(pres, mul(constant(cfg.lam), enh, tape), tape)


# -- online optimizer -------------------------------------------------------------


@dataclass
class OptimizerState:
    moments: dict  # name -> (m, v) ndarrays shaped like the parameter
    step: int = 0


def init_optimizer_state(params: PluginParams) -> OptimizerState:
    return OptimizerState(
        moments={
            name: (np.zeros_like(t.data), np.zeros_like(t.data))
            for name, t in params.named_parameters()
        },
        step=0,
    )


@dataclass(frozen=True)
class StepReport:
    applied: bool
    grad_norm: float
    clipped_norm: float
    reason: str = ""


def ttt_step(
    params: PluginParams,
    opt: OptimizerState,
    tape: Tape,
    loss: Tensor,
    cfg: TTTConfig,
) -> StepReport:
    """One clipped, weight-decayed optimizer step on the plugin parameters.

    Mutates ``params`` and ``opt`` in place.  A loss with no gradient path
    (both bands empty) still applies weight decay; any non-finite gradient
    skips the step entirely, leaving parameters bit-identical.
    """
    named = params.named_parameters()
    if loss.requires_grad:
        grad_map = backward(tape, loss)
        grads = {name: grad_map.get(t) for name, t in named}
    else:
        grads = {name: None for name, _ in named}

    sq_sum = 0.0
    for name, tensor in named:
        g = grads[name]
        if g is None:
            grads[name] = np.zeros_like(tensor.data)
            continue
        if not np.isfinite(g).all():
            return StepReport(
                applied=False,
                grad_norm=float("nan"),
                clipped_norm=float("nan"),
                reason=f"non-finite gradient in {name}",
            )
        sq_sum += float(np.sum(g * g))
    grad_norm = float(np.sqrt(sq_sum))

    scale = 1.0 if grad_norm <= cfg.clip_norm else cfg.clip_norm / grad_norm
    clipped_norm = grad_norm * scale

    opt.step += 1
    t = opt.step
    decay = 1.0 - cfg.lr * cfg.weight_decay
    for name, tensor in named:
        g = grads[name] * scale
        tensor.data = tensor.data * decay
        if cfg.optimizer == "adam":
            m, v = opt.moments[name]
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
            opt.moments[name] = (m, v)
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            tensor.data = tensor.data - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            tensor.data = tensor.data - cfg.lr * g
    return StepReport(applied=True, grad_norm=grad_norm, clipped_norm=clipped_norm)
