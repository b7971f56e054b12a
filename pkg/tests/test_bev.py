"""Feature-field statistics, AdaIN blending, and compatibility metrics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopadapt.autodiff import Tape, backward, parameter, sum_all
from coopadapt.bev import (
    DEFAULT_EPS,
    ChannelStats,
    FeatureField,
    adain_blend,
    channel_stats,
    linear_cka,
    scale_alignment,
)
from coopadapt.errors import ContractError, ShapeError

from _oracles import gram_cka, two_pass_stats


def _field(data, agent="ego"):
    return FeatureField(values=np.asarray(data, dtype=np.float64), agent_id=agent)


def _random_field(shape, seed, agent="ego", loc=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return _field(rng.normal(loc, scale, shape), agent)


# -- channel_stats ---------------------------------------------------------


def test_stats_constant_field_floors_at_eps():
    stats = channel_stats(_field(np.full((2, 3, 3), 3.0)))
    assert np.allclose(stats.mu, 3.0)
    assert np.all(stats.nu == DEFAULT_EPS)


def test_stats_two_point_channel_population_std():
    stats = channel_stats(_field(np.array([[[0.0, 2.0]]])))
    assert stats.mu[0] == 1.0
    assert stats.nu[0] == 1.0 + DEFAULT_EPS


def test_stats_match_two_pass_oracle():
    field = _random_field((4, 5, 5), seed=7)
    stats = channel_stats(field)
    mu, sd = two_pass_stats(field.values.data)
    assert np.max(np.abs(stats.mu - mu)) <= 1e-9
    assert np.max(np.abs(stats.nu - (sd + DEFAULT_EPS))) <= 1e-9


def test_stats_reject_bad_eps():
    with pytest.raises(ContractError):
        channel_stats(_field(np.zeros((1, 2, 2))), eps=0.0)


def test_stats_translation_equivariance():
    base = _random_field((3, 6, 6), seed=11)
    for shift in (-2.5, 0.25, 7.0):
        shifted = _field(base.values.data + shift)
        s0 = channel_stats(base)
        s1 = channel_stats(shifted)
        assert np.max(np.abs(s1.mu - (s0.mu + shift))) <= 1e-9
        assert np.max(np.abs(s1.nu - s0.nu)) <= 1e-9


def test_stats_vector_shape_is_validated():
    with pytest.raises(ShapeError):
        ChannelStats(mu=np.zeros((2, 2)), nu=np.zeros((2, 2)), eps=1e-5)


# -- feature field construction and serialization ---------------------------


def test_field_rejects_non_finite_values():
    bad = np.zeros((1, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ContractError):
        _field(bad)


def test_field_rejects_wrong_rank():
    with pytest.raises(ShapeError):
        _field(np.zeros((2, 2)))


def test_field_binary_round_trip_is_bitwise():
    field = _random_field((5, 4, 3), seed=3, agent="veh_02")
    back = FeatureField.from_bytes(field.to_bytes())
    assert back.agent_id == "veh_02"
    assert np.array_equal(back.values.data, field.values.data)


def test_field_json_round_trip_is_bitwise():
    field = _random_field((2, 3, 3), seed=9, agent="ego")
    back = FeatureField.from_json(field.to_json())
    assert back.agent_id == "ego"
    assert np.array_equal(back.values.data, field.values.data)


def test_field_truncated_blob_is_rejected():
    blob = _random_field((2, 2, 2), seed=1).to_bytes()
    with pytest.raises(ContractError):
        FeatureField.from_bytes(blob[:-8])
    with pytest.raises(ContractError):
        FeatureField.from_bytes(b"XXXX" + blob[4:])


# -- adain_blend -------------------------------------------------------------


def test_blend_alpha_zero_is_identity_bitwise():
    field = _random_field((4, 6, 6), seed=21, agent="veh_01")
    ego = _random_field((4, 6, 6), seed=22, loc=2.0, scale=3.0)
    out = adain_blend(field, channel_stats(field), channel_stats(ego), np.zeros(4))
    assert np.array_equal(out.data, field.values.data)


def test_blend_alpha_one_transfers_ego_statistics():
    field = _random_field((4, 8, 8), seed=31, agent="veh_01", loc=-1.0, scale=0.5)
    ego = _random_field((4, 8, 8), seed=32, loc=2.0, scale=2.0)
    stats_n = channel_stats(field)
    stats_e = channel_stats(ego)
    out = adain_blend(field, stats_n, stats_e, np.ones(4))
    got = channel_stats(FeatureField(values=out.data, agent_id="veh_01"))
    assert np.max(np.abs(got.mu - stats_e.mu)) <= 1e-9
    # The division floor shrinks the raw std by exactly (nu_n - eps) / nu_n.
    expected_raw = stats_e.nu * (stats_n.nu - DEFAULT_EPS) / stats_n.nu
    assert np.max(np.abs((got.nu - DEFAULT_EPS) - expected_raw)) <= 1e-9
    rel = np.abs(got.nu - stats_e.nu) / stats_e.nu
    assert np.max(rel) <= 5e-5


def test_blend_half_matches_scalar_hand_case():
    field = _field(np.array([[[0.0, 2.0]]]), agent="veh_01")
    stats_n = channel_stats(field)
    stats_e = ChannelStats(mu=np.array([10.0]), nu=np.array([2.0]), eps=DEFAULT_EPS)
    out = adain_blend(field, stats_n, stats_e, np.array([0.5]))
    # Scalar arithmetic with the module eps: nu_n = 1 + eps.
    nu_n = 1.0 + DEFAULT_EPS
    aligned = [(0.0 - 1.0) / nu_n * 2.0 + 10.0, (2.0 - 1.0) / nu_n * 2.0 + 10.0]
    expected = [0.0 + 0.5 * (aligned[0] - 0.0), 2.0 + 0.5 * (aligned[1] - 2.0)]
    assert np.max(np.abs(out.data.ravel() - expected)) <= 1e-12
    assert np.max(np.abs(out.data.ravel() - [4.0, 7.0])) <= 1e-4


def test_blend_rejects_channel_mismatch():
    field = _random_field((3, 4, 4), seed=41)
    stats3 = channel_stats(field)
    stats2 = channel_stats(_random_field((2, 4, 4), seed=42))
    with pytest.raises(ShapeError):
        adain_blend(field, stats3, stats2, np.zeros(3))
    with pytest.raises(ShapeError):
        adain_blend(field, stats3, stats3, np.zeros(2))


def test_blend_gradient_reaches_alpha():
    field = _random_field((3, 5, 5), seed=51, agent="veh_01")
    ego = _random_field((3, 5, 5), seed=52, loc=1.0, scale=2.0)
    alpha = parameter(np.full(3, 0.3))
    tape = Tape()
    out = adain_blend(field, channel_stats(field), channel_stats(ego), alpha, tape)
    grads = backward(tape, sum_all(out, tape))
    assert alpha in grads
    # d out / d alpha_c = sum over the channel of (aligned - field).
    stats_n = channel_stats(field)
    stats_e = channel_stats(ego)
    gain = (stats_e.nu / stats_n.nu).reshape(3, 1, 1)
    aligned = (field.values.data - stats_n.mu.reshape(3, 1, 1)) * gain + stats_e.mu.reshape(
        3, 1, 1
    )
    expected = (aligned - field.values.data).sum(axis=(1, 2))
    assert np.max(np.abs(grads[alpha] - expected)) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    alpha=st.floats(0.0, 1.0, allow_nan=False),
)
def test_blend_stays_between_identity_and_full_alignment(seed, alpha):
    field = _random_field((2, 4, 4), seed=seed, agent="veh_01")
    ego = _random_field((2, 4, 4), seed=seed + 1, loc=1.0)
    stats_n = channel_stats(field)
    stats_e = channel_stats(ego)
    out = adain_blend(field, stats_n, stats_e, np.full(2, alpha)).data
    identity = field.values.data
    full = adain_blend(field, stats_n, stats_e, np.ones(2)).data
    lo = np.minimum(identity, full) - 1e-12
    hi = np.maximum(identity, full) + 1e-12
    assert np.all(out >= lo) and np.all(out <= hi)


# -- linear CKA --------------------------------------------------------------


def test_cka_self_similarity_is_one():
    field = _random_field((6, 5, 5), seed=61)
    assert linear_cka(field, field) == pytest.approx(1.0, abs=1e-12)


def test_cka_scale_invariance():
    field = _random_field((4, 6, 6), seed=71)
    scaled = _field(3.7 * field.values.data)
    assert linear_cka(field, scaled) == pytest.approx(1.0, abs=1e-10)


def test_cka_matches_gram_oracle():
    a = _random_field((8, 6, 6), seed=81)
    b = _random_field((8, 6, 6), seed=82)
    got = linear_cka(a, b)
    assert abs(got - gram_cka(a.values.data, b.values.data)) <= 1e-9
    assert 0.0 <= got <= 1.0
    assert not got.degenerate


def test_cka_is_symmetric():
    a = _random_field((5, 4, 4), seed=91)
    b = _random_field((5, 4, 4), seed=92)
    assert linear_cka(a, b) == pytest.approx(linear_cka(b, a), abs=1e-12)


def test_cka_zero_variance_flags_degenerate():
    flat = _field(np.full((3, 4, 4), 2.0))
    other = _random_field((3, 4, 4), seed=101)
    got = linear_cka(flat, other)
    assert got == 0.0
    assert got.degenerate


def test_cka_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        linear_cka(_random_field((2, 4, 4), seed=1), _random_field((2, 5, 5), seed=2))


# -- scale alignment ----------------------------------------------------------


def test_scale_alignment_identity_and_doubling():
    field = _random_field((4, 6, 6), seed=111)
    doubled = _field(2.0 * field.values.data)
    assert scale_alignment(field, field) == pytest.approx(1.0, abs=1e-12)
    assert scale_alignment(field, doubled) == pytest.approx(0.5, abs=1e-12)
    assert scale_alignment(doubled, field) == pytest.approx(0.5, abs=1e-12)


def test_scale_alignment_matches_stats_composition():
    a = _random_field((5, 7, 7), seed=121, scale=0.8)
    b = _random_field((5, 7, 7), seed=122, scale=2.3)
    sa = channel_stats(a)
    sb = channel_stats(b)
    ra = float(np.mean(sa.nu - sa.eps))
    rb = float(np.mean(sb.nu - sb.eps))
    expected = min(ra, rb) / max(ra, rb)
    assert abs(scale_alignment(a, b) - expected) <= 1e-9


def test_scale_alignment_zero_scale_flags_degenerate():
    flat = _field(np.zeros((2, 3, 3)))
    other = _random_field((2, 3, 3), seed=131)
    got = scale_alignment(flat, other)
    assert got == 0.0
    assert got.degenerate
