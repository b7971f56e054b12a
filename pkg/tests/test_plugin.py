"""Plugin identity-at-init, parameter counts, gating, and composition oracle."""

import numpy as np
import pytest

from coopadapt.autodiff import Tape, backward, sum_all
from coopadapt.bev import FeatureField
from coopadapt.checkpoint import dump_named_tensors, parse_named_tensors
from coopadapt.errors import ConfigError, ContractError
from coopadapt.plugin import (
    IdentityReport,
    PluginConfig,
    PluginParams,
    identity_check,
    init_plugin_params,
    param_count,
    plugin_forward,
)

from _oracles import loop_conv2d


def _pair(channels, hw=5, seed=0):
    rng = np.random.default_rng(seed)
    f_n = FeatureField(values=rng.normal(1.5, 2.0, (channels, hw, hw)), agent_id="veh_01")
    f_e = FeatureField(values=rng.normal(-0.5, 0.7, (channels, hw, hw)), agent_id="ego")
    return f_n, f_e


def _small_config():
    return PluginConfig(channels=8, hidden=16, blocks=2, gn_groups=4)


# -- parameter accounting -----------------------------------------------------


def test_param_count_default_is_904000():
    cfg = PluginConfig(channels=64, hidden=128, blocks=3, gn_groups=16)
    assert param_count(cfg) == 904000
    assert abs(param_count(cfg) / 1e6 - 0.9) < 0.01


def test_param_count_small_preset_is_156800():
    cfg = PluginConfig(channels=64, hidden=64, blocks=2, gn_groups=16)
    assert param_count(cfg) == 156800
    assert abs(param_count(cfg) / 1e6 - 0.16) < 0.005


def test_param_count_minimal_hand_case():
    cfg = PluginConfig(channels=1, hidden=1, blocks=0, gn_groups=1)
    assert param_count(cfg) == 8


@pytest.mark.parametrize(
    "cfg",
    [
        PluginConfig(channels=1, hidden=1, blocks=0, gn_groups=1),
        PluginConfig(channels=8, hidden=16, blocks=2, gn_groups=4),
        PluginConfig(channels=64, hidden=64, blocks=2, gn_groups=16),
        PluginConfig(channels=64, hidden=128, blocks=3, gn_groups=16),
    ],
)
def test_param_count_matches_enumeration(cfg):
    params = init_plugin_params(cfg, seed=1)
    enumerated = sum(t.data.size for _, t in params.named_parameters())
    assert enumerated == param_count(cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        PluginConfig(channels=8, hidden=15, blocks=1, gn_groups=4)
    with pytest.raises(ConfigError):
        PluginConfig(channels=0, hidden=16, blocks=1, gn_groups=4)
    with pytest.raises(ConfigError):
        PluginConfig(channels=8, hidden=16, blocks=-1, gn_groups=4)


# -- identity at initialization ----------------------------------------------


def test_fresh_params_are_identity_within_tolerance():
    params = init_plugin_params(_small_config(), seed=3)
    report = identity_check(params, trials=100, tol=1e-3)
    assert isinstance(report, IdentityReport)
    assert report.passed, f"max deviation {report.max_deviation}"
    assert report.max_deviation <= 1e-3


def test_forced_alpha_zero_is_exact_identity():
    params = init_plugin_params(_small_config(), seed=4)
    f_n, f_e = _pair(8, seed=5)
    out = plugin_forward(params, f_n, f_e, force_alpha_zero=True)
    assert np.array_equal(out.values.data, f_n.values.data)


def test_gate_logits_have_no_effect_while_delta_is_zero():
    params = init_plugin_params(_small_config(), seed=6)
    f_n, f_e = _pair(8, seed=7)
    baseline = plugin_forward(params, f_n, f_e).values.data
    params.gate_logits.data = np.linspace(-4.0, 4.0, 8)
    assert np.array_equal(plugin_forward(params, f_n, f_e).values.data, baseline)


def test_alpha_opened_to_half_breaks_identity():
    params = init_plugin_params(_small_config(), seed=8)
    params.alpha_logits.data = np.zeros(8)
    report = identity_check(params, trials=20, tol=1e-3)
    assert not report.passed


def test_perturbed_output_projection_breaks_identity():
    params = init_plugin_params(_small_config(), seed=9)
    rng = np.random.default_rng(10)
    params.w_out.data = rng.normal(0.0, 1e-2, params.w_out.data.shape)
    report = identity_check(params, trials=20, tol=1e-3)
    assert not report.passed


# -- forward structure ---------------------------------------------------------


def _numpy_group_norm(x, groups, scale, shift, eps):
    c, h, w = x.shape
    g = x.reshape(groups, c // groups, h, w)
    mean = g.mean(axis=(1, 2, 3), keepdims=True)
    var = g.var(axis=(1, 2, 3), keepdims=True)
    xn = ((g - mean) / np.sqrt(var + eps)).reshape(c, h, w)
    return xn * scale[:, None, None] + shift[:, None, None]


def _sequential_reference(params, f_n, f_e):
    """Straight-line numpy composition: blend, then adapter, then gate."""
    cfg = params.config
    data = f_n.values.data
    mu_n = data.mean(axis=(1, 2))
    nu_n = np.sqrt(data.var(axis=(1, 2))) + cfg.eps
    e = f_e.values.data
    mu_e = e.mean(axis=(1, 2))
    nu_e = np.sqrt(e.var(axis=(1, 2))) + cfg.eps
    alpha = 1.0 / (1.0 + np.exp(-params.alpha_logits.data))
    aligned = (data - mu_n[:, None, None]) / nu_n[:, None, None] * nu_e[:, None, None] + mu_e[
        :, None, None
    ]
    base = data + alpha[:, None, None] * (aligned - data)

    x = loop_conv2d(base, params.w_in.data, params.b_in.data, pad=0)
    x = _numpy_group_norm(x, cfg.gn_groups, params.gn_in_scale.data, params.gn_in_shift.data, cfg.eps)
    x = np.maximum(x, 0.0)
    for blk in params.res_blocks:
        h = loop_conv2d(x, blk.conv1_w.data, blk.conv1_b.data, pad=1)
        h = _numpy_group_norm(h, cfg.gn_groups, blk.gn1_scale.data, blk.gn1_shift.data, cfg.eps)
        h = np.maximum(h, 0.0)
        h = loop_conv2d(h, blk.conv2_w.data, blk.conv2_b.data, pad=1)
        h = _numpy_group_norm(h, cfg.gn_groups, blk.gn2_scale.data, blk.gn2_shift.data, cfg.eps)
        x = x + h
    delta = loop_conv2d(x, params.w_out.data, params.b_out.data, pad=0)
    gate = 1.0 / (1.0 + np.exp(-params.gate_logits.data))
    return base, delta, base + gate[:, None, None] * delta


def _randomize(params, seed):
    rng = np.random.default_rng(seed)
    for _, tensor in params.named_parameters():
        tensor.data = rng.normal(0.0, 0.4, tensor.data.shape)
    return params


def test_forward_matches_sequential_composition_oracle():
    cfg = PluginConfig(channels=8, hidden=8, blocks=2, gn_groups=2)
    params = _randomize(init_plugin_params(cfg, seed=11), seed=12)
    f_n, f_e = _pair(8, hw=4, seed=13)
    got = plugin_forward(params, f_n, f_e).values.data
    _, _, expected = _sequential_reference(params, f_n, f_e)
    assert np.max(np.abs(got - expected)) <= 1e-9


def test_gate_scales_the_residual_exactly():
    cfg = PluginConfig(channels=4, hidden=8, blocks=1, gn_groups=2)
    params = _randomize(init_plugin_params(cfg, seed=14), seed=15)
    f_n, f_e = _pair(4, hw=4, seed=16)
    base, delta, _ = _sequential_reference(params, f_n, f_e)

    logits_a, logits_b = np.full(4, 1.0), np.linspace(-2.0, 2.0, 4)
    params.gate_logits.data = logits_a
    out_a = plugin_forward(params, f_n, f_e).values.data
    params.gate_logits.data = logits_b
    out_b = plugin_forward(params, f_n, f_e).values.data

    sig_a = (1.0 / (1.0 + np.exp(-logits_a)))[:, None, None]
    sig_b = (1.0 / (1.0 + np.exp(-logits_b)))[:, None, None]
    # out - base recovers gate * delta; cross-multiplying cancels delta exactly.
    assert np.max(np.abs((out_a - base) * sig_b - (out_b - base) * sig_a)) <= 1e-12
    assert np.max(np.abs((out_a - base) - sig_a * delta)) <= 1e-9


def test_forward_rejects_config_mismatch():
    params = init_plugin_params(_small_config(), seed=17)
    f_n, f_e = _pair(6, seed=18)
    with pytest.raises(ConfigError):
        plugin_forward(params, f_n, f_e)


# -- gradient paths -------------------------------------------------------------


def test_gradient_paths_at_initialization():
    params = init_plugin_params(_small_config(), seed=19)
    f_n, f_e = _pair(8, seed=20)
    tape = Tape()
    out = plugin_forward(params, f_n, f_e, tape)
    grads = backward(tape, sum_all(out.values, tape))

    # The zero output projection blocks the interior; only the projection
    # itself (weight and bias) and the blend logits see gradient at step 0.
    assert np.any(grads[params.w_out] != 0.0)
    assert np.any(grads[params.b_out] != 0.0)
    assert np.any(grads[params.alpha_logits] != 0.0)
    assert np.all(grads[params.w_in] == 0.0)
    assert np.all(grads[params.gate_logits] == 0.0)
    assert np.all(grads[params.res_blocks[0].conv1_w] == 0.0)


def test_all_groups_receive_gradient_once_projection_is_nonzero():
    params = init_plugin_params(_small_config(), seed=21)
    rng = np.random.default_rng(22)
    params.w_out.data = rng.normal(0.0, 0.05, params.w_out.data.shape)
    f_n, f_e = _pair(8, seed=23)
    tape = Tape()
    out = plugin_forward(params, f_n, f_e, tape)
    grads = backward(tape, sum_all(out.values, tape))
    for name, tensor in params.named_parameters():
        assert np.any(grads[tensor] != 0.0), f"no gradient reached {name}"


# -- checkpoint round trip --------------------------------------------------------


def test_checkpoint_round_trip_preserves_forward_bitwise():
    cfg = _small_config()
    params = _randomize(init_plugin_params(cfg, seed=24), seed=25)
    f_n, f_e = _pair(8, seed=26)
    expected = plugin_forward(params, f_n, f_e).values.data

    blob = dump_named_tensors(params.to_checkpoint())
    restored = init_plugin_params(cfg, seed=999)
    restored.load_checkpoint(parse_named_tensors(blob))
    assert np.array_equal(plugin_forward(restored, f_n, f_e).values.data, expected)


def test_checkpoint_rejects_name_and_shape_mismatch():
    params = init_plugin_params(_small_config(), seed=27)
    ckpt = params.to_checkpoint()
    bad = dict(ckpt)
    bad.pop("w_out")
    with pytest.raises(ContractError):
        params.load_checkpoint(bad)
    bad = dict(ckpt)
    bad["w_out"] = np.zeros((2, 2))
    with pytest.raises(ContractError):
        params.load_checkpoint(bad)


def test_component_variants_follow_the_reference_decomposition():
    cfg = PluginConfig(channels=8, hidden=8, blocks=2, gn_groups=2)
    params = _randomize(init_plugin_params(cfg, seed=21), seed=22)
    f_n, f_e = _pair(8, hw=4, seed=23)
    base, delta, full = _sequential_reference(params, f_n, f_e)

    got_full = plugin_forward(params, f_n, f_e, variant="full").values.data
    assert np.max(np.abs(got_full - full)) <= 1e-9

    got_adain = plugin_forward(params, f_n, f_e, variant="adain_only").values.data
    assert np.max(np.abs(got_adain - base)) <= 1e-9

    got_no_gate = plugin_forward(params, f_n, f_e, variant="no_gate").values.data
    assert np.max(np.abs(got_no_gate - (base + delta))) <= 1e-9

    # adapter_only skips the blend, so it must equal the full path evaluated
    # with the ego stats already matching the collaborator's
    _, _, self_stats = _sequential_reference(params, f_n, f_n)
    got_adapter = plugin_forward(params, f_n, f_e, variant="adapter_only").values.data
    assert np.max(np.abs(got_adapter - self_stats)) <= 1e-9


def test_unknown_variant_is_rejected():
    cfg = PluginConfig(channels=8, hidden=8, blocks=1, gn_groups=2)
    params = init_plugin_params(cfg, seed=0)
    f_n, f_e = _pair(8, hw=4, seed=5)
    with pytest.raises(ConfigError):
        plugin_forward(params, f_n, f_e, variant="alpha_only")


def test_every_variant_is_identity_at_initialization():
    cfg = PluginConfig(channels=8, hidden=8, blocks=1, gn_groups=2)
    params = init_plugin_params(cfg, seed=2)
    f_n, f_e = _pair(8, hw=6, seed=6)
    for variant in ("full", "adain_only", "adapter_only", "no_gate"):
        out = plugin_forward(params, f_n, f_e, variant=variant).values.data
        rel = np.max(np.abs(out - f_n.values.data)) / max(np.max(np.abs(f_n.values.data)), 1e-12)
        assert rel <= 1e-3, variant
    exact = plugin_forward(params, f_n, f_e, variant="adapter_only").values.data
    assert np.array_equal(exact, f_n.values.data)
