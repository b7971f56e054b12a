"""The adaptive per-collaborator plugin: AdaIN blend, residual adapter, gate.

The plugin sits between a received collaborator feature and the frozen
fusion module.  It is exactly identity-shaped at initialization: the blend
logits start at -10 (so the AdaIN term is a ~4.5e-5 leak), the output
projection starts at zero (so the adapter residual is exactly zero), and
the gate starts at 0.5 where it has nothing to scale.  Every tensor here
is learnable, including the group-norm affine pairs.

Forward layout::

    F_base = F_n + sigmoid(alpha0) * (align(F_n; ego stats) - F_n)
    delta  = w_out( blocks( relu( gn( w_in(F_base) ) ) ) )
    out    = F_base + sigmoid(gate0) * delta

with each residual block  x + gn2(conv2(relu(gn1(conv1(x))))).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    constant,
    conv2d,
    group_norm,
    mul,
    parameter,
    per_channel,
    relu,
    sigmoid,
)
from .bev import FeatureField, adain_blend, channel_stats
from .errors import ConfigError, ContractError

ALPHA_INIT = -10.0
GATE_INIT = 0.0


@dataclass(frozen=True)
class PluginConfig:
    channels: int
    hidden: int = 128
    blocks: int = 3
    gn_groups: int = 16
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels < 1 or self.hidden < 1 or self.blocks < 0:
            raise ConfigError(
                f"plugin dims must be positive (channels={self.channels}, "
                f"hidden={self.hidden}, blocks={self.blocks})"
            )
        if self.hidden % self.gn_groups != 0:
            raise ConfigError(
                f"hidden width {self.hidden} not divisible by gn_groups {self.gn_groups}"
            )
        if self.eps <= 0.0:
            raise ConfigError(f"gn eps must be positive, got {self.eps}")


@dataclass
class ResBlockParams:
    conv1_w: Tensor
    conv1_b: Tensor
    gn1_scale: Tensor
    gn1_shift: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    gn2_scale: Tensor
    gn2_shift: Tensor


@dataclass
class PluginParams:
    config: PluginConfig
    alpha_logits: Tensor
    w_in: Tensor
    b_in: Tensor
    gn_in_scale: Tensor
    gn_in_shift: Tensor
    res_blocks: list[ResBlockParams] = field(default_factory=list)
    w_out: Tensor = None
    b_out: Tensor = None
    gate_logits: Tensor = None

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """All learnable tensors in a fixed, checkpoint-stable order."""
        out = [
            ("alpha_logits", self.alpha_logits),
            ("w_in", self.w_in),
            ("b_in", self.b_in),
            ("gn_in_scale", self.gn_in_scale),
            ("gn_in_shift", self.gn_in_shift),
        ]
        for i, blk in enumerate(self.res_blocks):
            for name in (
                "conv1_w",
                "conv1_b",
                "gn1_scale",
                "gn1_shift",
                "conv2_w",
                "conv2_b",
                "gn2_scale",
                "gn2_shift",
            ):
                out.append((f"block{i}.{name}", getattr(blk, name)))
        out.extend([("w_out", self.w_out), ("b_out", self.b_out), ("gate_logits", self.gate_logits)])
        return out

    def to_checkpoint(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_checkpoint(self, tensors: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(tensors):
            missing = sorted(set(own) - set(tensors))
            extra = sorted(set(tensors) - set(own))
            raise ContractError(f"checkpoint name mismatch: missing {missing}, extra {extra}")
        for name, tensor in own.items():
            incoming = np.asarray(tensors[name], dtype=np.float64)
            if incoming.shape != tensor.data.shape:
                raise ContractError(
                    f"checkpoint tensor {name!r} has shape {incoming.shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = incoming.copy()


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_plugin_params(config: PluginConfig, seed: int = 0) -> PluginParams:
    """Fresh identity-shaped parameters; interior convs get seeded He init."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x706C7567]))
    c, d = config.channels, config.hidden
    blocks = []
    for _ in range(config.blocks):
        blocks.append(
            ResBlockParams(
                conv1_w=parameter(_he_uniform(rng, (d, d, 3, 3), fan_in=d * 9)),
                conv1_b=parameter(np.zeros(d)),
                gn1_scale=parameter(np.ones(d)),
                gn1_shift=parameter(np.zeros(d)),
                conv2_w=parameter(_he_uniform(rng, (d, d, 3, 3), fan_in=d * 9)),
                conv2_b=parameter(np.zeros(d)),
                gn2_scale=parameter(np.ones(d)),
                gn2_shift=parameter(np.zeros(d)),
            )
        )
    return PluginParams(
        config=config,
        alpha_logits=parameter(np.full(c, ALPHA_INIT)),
        w_in=parameter(_he_uniform(rng, (d, c, 1, 1), fan_in=c)),
        b_in=parameter(np.zeros(d)),
        gn_in_scale=parameter(np.ones(d)),
        gn_in_shift=parameter(np.zeros(d)),
        res_blocks=blocks,
        w_out=parameter(np.zeros((c, d, 1, 1))),
        b_out=parameter(np.zeros(c)),
        gate_logits=parameter(np.full(c, GATE_INIT)),
    )


PLUGIN_VARIANTS = ("full", "adain_only", "adapter_only", "no_gate")


def plugin_forward(
    params: PluginParams,
    f_n: FeatureField,
    f_e: FeatureField,
    tape: Tape = None,
    force_alpha_zero: bool = False,
    variant: str = "full",
) -> FeatureField:
    """Apply the plugin to a collaborator field, conditioning on the ego field.

    With ``tape`` set, the full graph is recorded so a later backward pass
    reaches every parameter.  ``force_alpha_zero`` replaces the blend
    coefficient with an exact zero (test mode for the identity property).

    ``variant`` knocks out components for ablations: ``adain_only`` stops
    after the statistical blend, ``adapter_only`` skips the blend and runs
    the residual correction on the raw field, ``no_gate`` adds the residual
    at full strength.
    """
    cfg = params.config
    if variant not in PLUGIN_VARIANTS:
        raise ConfigError(f"unknown plugin variant {variant!r}; expected one of {PLUGIN_VARIANTS}")
    if f_n.channels != cfg.channels or not f_n.same_grid(f_e):
        raise ConfigError(
            f"plugin configured for {cfg.channels} channels, got fields "
            f"{f_n.values.data.shape} and {f_e.values.data.shape}"
        )
    if variant == "adapter_only":
        base = f_n.values
    else:
        if force_alpha_zero:
            alpha = constant(np.zeros(cfg.channels))
        else:
            alpha = sigmoid(params.alpha_logits, tape)
        stats_n = channel_stats(f_n, eps=cfg.eps)
        stats_e = channel_stats(f_e, eps=cfg.eps)
        base = adain_blend(f_n, stats_n, stats_e, alpha, tape)
    if variant == "adain_only":
        return FeatureField(values=base, agent_id=f_n.agent_id)

    x = conv2d(base, params.w_in, params.b_in, tape=tape)
    x = group_norm(x, cfg.gn_groups, params.gn_in_scale, params.gn_in_shift, cfg.eps, tape)
    x = relu(x, tape)
    for blk in params.res_blocks:
        h = conv2d(x, blk.conv1_w, blk.conv1_b, tape=tape)
        h = group_norm(h, cfg.gn_groups, blk.gn1_scale, blk.gn1_shift, cfg.eps, tape)
        h = relu(h, tape)
        h = conv2d(h, blk.conv2_w, blk.conv2_b, tape=tape)
        h = group_norm(h, cfg.gn_groups, blk.gn2_scale, blk.gn2_shift, cfg.eps, tape)
        x = add(x, h, tape)
    delta = conv2d(x, params.w_out, params.b_out, tape=tape)

    if variant == "no_gate":
        out = add(base, delta, tape)
    else:
        gate = per_channel(sigmoid(params.gate_logits, tape), tape)
        out = add(base, mul(gate, delta, tape), tape)
    return FeatureField(values=out, agent_id=f_n.agent_id)


def param_count(config: PluginConfig) -> int:
    """Closed-form learnable-parameter total for a plugin of this size."""
    c, d, l = config.channels, config.hidden, config.blocks
    stem = d * c + d + 2 * d  # w_in + bias + stem GN affine
    per_block = 2 * (d * d * 9 + d) + 4 * d  # two convs w/ bias + two GN affines
    head = c * d + c  # w_out + bias
    return c + c + stem + l * per_block + head


@dataclass(frozen=True)
class IdentityReport:
    trials: int
    tol: float
    max_deviation: float
    passed: bool


def identity_check(params: PluginParams, trials: int = 100, tol: float = 1e-3, seed: int = 0) -> IdentityReport:
    """Probe identity behavior on random field pairs with mismatched stats.

    Reports the worst relative L-infinity deviation of the plugin output
    from the collaborator input across all trials.
    """
    cfg = params.config
    rng = np.random.default_rng(np.random.SeedSequence(entropy=[seed, 0x6964656E]))
    worst = 0.0
    for _ in range(trials):
        loc_n, loc_e = rng.normal(0.0, 2.0, size=2)
        scale_n, scale_e = rng.uniform(0.3, 3.0, size=2)
        f_n = FeatureField(
            values=rng.normal(loc_n, scale_n, (cfg.channels, 6, 6)), agent_id="veh"
        )
        f_e = FeatureField(
            values=rng.normal(loc_e, scale_e, (cfg.channels, 6, 6)), agent_id="ego"
        )
        out = plugin_forward(params, f_n, f_e)
        denom = max(np.max(np.abs(f_n.values.data)), 1e-12)
        worst = max(worst, float(np.max(np.abs(out.values.data - f_n.values.data)) / denom))
    return IdentityReport(trials=trials, tol=tol, max_deviation=worst, passed=worst <= tol)
