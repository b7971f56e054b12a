"""Self-check suite: one fast, self-contained probe per core invariant.

Each check re-derives its expectation on the spot (closed forms, finite
differences, brute-force re-implementations) so a regression in the main
code paths cannot hide behind a shared helper.  ``run_all`` executes every
check and reports one verdict per invariant; the ``fault`` argument (or the
``COOPADAPT_FAULT`` env var via the CLI) deliberately corrupts one piece of
state so the suite can demonstrate it actually detects failures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, backward, constant, conv2d, group_norm, mul, parameter, sub, sum_all
from .bev import DEFAULT_EPS, FeatureField, adain_blend, channel_stats
from .detector import decode_and_nms, hand_set_head, head_forward
from .distill import (
    TTTConfig,
    build_masks,
    enhancement_loss,
    init_optimizer_state,
    preservation_loss,
    total_loss,
    ttt_step,
)
from .checkpoint import dump_named_tensors, parse_named_tensors
from .plugin import (
    PluginConfig,
    identity_check,
    init_plugin_params,
    param_count,
    plugin_forward,
)
from .world import OrientedBox, WorldProfile

FAULT_CORRUPT_W_OUT = "corrupt_w_out"


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _init_params(cfg: PluginConfig, seed: int, fault: str):
    params = init_plugin_params(cfg, seed=seed)
    if fault == FAULT_CORRUPT_W_OUT:
        params.w_out.data = params.w_out.data + 0.05
    return params


def _rel_err(got, want) -> float:
    scale = max(abs(float(want)), 1e-12)
    return abs(float(got) - float(want)) / scale


# ---------------------------------------------------------------------------
# checks


def check_plugin_identity(fault):
    cfg = PluginConfig(channels=16, hidden=16, blocks=1, gn_groups=4)
    report = identity_check(_init_params(cfg, 0, fault), trials=20, tol=1e-3, seed=0)
    return report.passed, f"max relative deviation {report.max_deviation:.3g}"


def check_param_count(fault):
    for cfg in (
        PluginConfig(channels=64, hidden=128, blocks=3, gn_groups=16),
        PluginConfig(channels=64, hidden=64, blocks=2, gn_groups=16),
        PluginConfig(channels=8, hidden=16, blocks=1, gn_groups=4),
    ):
        params = init_plugin_params(cfg, seed=0)
        enumerated = sum(t.data.size for _, t in params.named_parameters())
        if param_count(cfg) != enumerated:
            return False, f"closed form {param_count(cfg)} != enumerated {enumerated} at {cfg}"
    big = param_count(PluginConfig(channels=64, hidden=128, blocks=3, gn_groups=16))
    if not (880_000 <= big <= 920_000):
        return False, f"default-size count {big} outside [0.88M, 0.92M]"
    return True, f"default-size plugin has {big} parameters"


def _central_fd(fn, tensor, i, h=1e-6):
    flat = tensor.data.reshape(-1)
    keep = flat[i]
    flat[i] = keep + h
    up = fn()
    flat[i] = keep - h
    down = fn()
    flat[i] = keep
    return (up - down) / (2.0 * h)


def check_conv_gradient(fault):
    rng = np.random.default_rng(3)
    x = parameter(rng.normal(0.0, 1.0, (3, 5, 5)))
    w = parameter(rng.normal(0.0, 0.5, (4, 3, 3, 3)))
    b = parameter(rng.normal(0.0, 0.1, 4))
    probe = constant(rng.normal(0.0, 1.0, (4, 5, 5)))

    def value():
        return float(sum_all(mul(probe, conv2d(x, w, b))).data)

    tape = Tape()
    loss = sum_all(mul(probe, conv2d(x, w, b, tape=tape), tape), tape)
    grads = backward(tape, loss)
    worst = 0.0
    for tensor in (x, w, b):
        g = grads[tensor].reshape(-1)
        for i in range(0, g.size, max(1, g.size // 5)):
            fd = _central_fd(value, tensor, i)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-8))
    return worst <= 1e-5, f"max relative gradient error {worst:.3g}"


def check_group_norm_gradient(fault):
    rng = np.random.default_rng(4)
    x = parameter(rng.normal(0.0, 1.0, (4, 3, 3)))
    scale = parameter(rng.uniform(0.5, 1.5, 4))
    shift = parameter(rng.normal(0.0, 0.2, 4))
    probe = constant(rng.normal(0.0, 1.0, (4, 3, 3)))

    def value():
        return float(sum_all(mul(probe, group_norm(x, 2, scale, shift, 1e-5))).data)

    tape = Tape()
    loss = sum_all(mul(probe, group_norm(x, 2, scale, shift, 1e-5, tape), tape), tape)
    grads = backward(tape, loss)
    worst = 0.0
    for tensor in (x, scale, shift):
        g = grads[tensor].reshape(-1)
        for i in range(g.size):
            fd = _central_fd(value, tensor, i)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-8))
    return worst <= 1e-5, f"max relative gradient error {worst:.3g}"


def check_distill_gradient_chain(fault):
    rng = np.random.default_rng(5)
    cfg = PluginConfig(channels=8, hidden=8, blocks=1, gn_groups=2)
    params = _init_params(cfg, 1, fault)
    # give the adapter a real gradient path
    params.w_out.data = rng.normal(0.0, 0.05, params.w_out.data.shape)
    ego = rng.normal(0.0, 0.5, (8, 5, 5))
    ego[0] = rng.uniform(0.3, 0.9, (5, 5))
    f_e = FeatureField(values=ego, agent_id="ego")
    f_n = FeatureField(values=1.5 * ego + 0.2, agent_id="n")
    head = hand_set_head(8)
    teacher = head_forward(head, f_e)
    ttt = TTTConfig()
    masks = build_masks(teacher, ttt)

    def value():
        student = head_forward(head, plugin_forward(params, f_n, f_e))
        pres = preservation_loss(student, teacher, masks, ttt)
        return float(total_loss(pres, enhancement_loss(student, masks), ttt).data)

    tape = Tape()
    student = head_forward(head, plugin_forward(params, f_n, f_e, tape), tape)
    pres = preservation_loss(student, teacher, masks, ttt, tape)
    loss = total_loss(pres, enhancement_loss(student, masks, tape), ttt, tape)
    grads = backward(tape, loss)
    worst = 0.0
    for tensor in (params.alpha_logits, params.gate_logits, params.w_out):
        g = grads[tensor].reshape(-1)
        for i in range(0, g.size, max(1, g.size // 4)):
            fd = _central_fd(value, tensor, i)
            worst = max(worst, abs(g[i] - fd) / max(abs(fd), 1e-6))
    return worst <= 1e-4, f"max relative gradient error {worst:.3g}"


def check_ap_hand_value(fault):
    from .evaluate import MatchResult, voc2010_ap

    match = MatchResult(pairs=((0.9, True), (0.8, False), (0.7, True)), total_truth=2)
    ap = voc2010_ap(match)
    return abs(ap - 5.0 / 6.0) <= 1e-12, f"AP {ap:.12f} vs 5/6"


def check_greedy_match_brute_force(fault):
    from .evaluate import greedy_match, rotated_iou

    rng = np.random.default_rng(9)
    preds, truths = [], []
    for frame in range(4):
        for _ in range(rng.integers(0, 4)):
            box = OrientedBox(
                rng.uniform(3, 9), rng.uniform(3, 9), 2.0, 4.5, rng.uniform(-1.5, 1.5)
            )
            preds.append((frame, float(rng.uniform(0.1, 1.0)), box))
        for _ in range(rng.integers(0, 4)):
            truths.append(
                (frame, OrientedBox(rng.uniform(3, 9), rng.uniform(3, 9), 2.0, 4.5, 0.0))
            )
    got = greedy_match(preds, truths, 0.3)
    # independent straight-line re-implementation
    used = [False] * len(truths)
    expect = []
    for i in sorted(range(len(preds)), key=lambda i: (-preds[i][1], i)):
        frame, score, box = preds[i]
        best_iou, best_j = 0.0, None
        for j, (tf, tb) in enumerate(truths):
            if tf != frame or used[j]:
                continue
            iou = rotated_iou(box, tb)
            if iou > best_iou:
                best_iou, best_j = iou, j
        hit = best_j is not None and best_iou > 0.3
        if hit:
            used[best_j] = True
        expect.append((float(score), hit))
    ok = got.pairs == tuple(expect) and got.total_truth == len(truths)
    return ok, f"{len(preds)} predictions over 4 frames"


def check_mask_band_filter(fault):
    from .detector import AnchorPredictions

    rng = np.random.default_rng(10)
    logits = rng.uniform(-6, 6, 200)
    raw = np.zeros((9, 10, 20))
    raw[0] = logits.reshape(10, 20)
    cfg = TTTConfig()
    masks = build_masks(AnchorPredictions(raw=constant(raw), height=10, width=20), cfg)
    for i, logit in enumerate(logits):
        p = 1.0 / (1.0 + math.exp(-logit))
        if masks.m_hi[i] != (p > cfg.tau_hi) or masks.m_boost[i] != (cfg.tau_lo < p <= cfg.tau_hi):
            return False, f"band mismatch at anchor {i} (p={p:.4f})"
    return True, "200 anchors against the scalar band filter"


def check_adam_scalar_rule(fault):
    cfg = PluginConfig(channels=1, hidden=1, blocks=0, gn_groups=1)
    params = init_plugin_params(cfg, seed=2)
    opt = init_optimizer_state(params)
    ttt = TTTConfig(clip_norm=1e9)
    p = float(params.alpha_logits.data[0])
    m = v = 0.0
    for t in range(1, 4):
        tape = Tape()
        diff = sub(params.alpha_logits, constant(np.array([0.4])), tape)
        ttt_step(params, opt, tape, sum_all(mul(diff, diff, tape), tape), ttt)
        g = 2.0 * (p - 0.4)
        p = p * (1.0 - ttt.lr * ttt.weight_decay)
        m = ttt.beta1 * m + (1 - ttt.beta1) * g
        v = ttt.beta2 * v + (1 - ttt.beta2) * g * g
        p = p - ttt.lr * (m / (1 - ttt.beta1**t)) / (math.sqrt(v / (1 - ttt.beta2**t)) + ttt.eps)
        if abs(float(params.alpha_logits.data[0]) - p) > 1e-12:
            return False, f"divergence from the scalar rule at step {t}"
    return True, "three steps match the written-out update rule"


def check_rotated_iou_values(fault):
    from .evaluate import rotated_iou

    half = rotated_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(0.5, 0, 1, 1, 0))
    if abs(half - 1.0 / 3.0) > 1e-12:
        return False, f"axis-aligned half-overlap gave {half}"
    inter = 2.0 * math.sqrt(2.0) - 2.0
    analytic = inter / (2.0 - inter)  # concentric unit squares at 45 degrees
    tilt = rotated_iou(OrientedBox(0, 0, 1, 1, 0), OrientedBox(0, 0, 1, 1, math.pi / 4))
    if abs(tilt - analytic) > 1e-9:
        return False, f"45-degree case gave {tilt} vs analytic {analytic}"
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.75, 0.75, (20000, 2))
    inside_a = (np.abs(pts) <= 0.5).all(axis=1)
    c, s = math.cos(math.pi / 4), math.sin(math.pi / 4)
    rot = pts @ np.array([[c, -s], [s, c]])
    inside_b = (np.abs(rot) <= 0.5).all(axis=1)
    mc = (inside_a & inside_b).sum() / (inside_a | inside_b).sum()
    if abs(tilt - mc) > 5e-3:
        return False, f"Monte-Carlo {mc:.4f} disagrees with {tilt:.4f}"
    return True, f"45-degree IoU {tilt:.6f} matches analytic and Monte-Carlo"


def check_nms_brute_force(fault):
    from .detector import AnchorPredictions
    from .evaluate import rotated_iou

    rng = np.random.default_rng(12)
    raw = np.full((9, 8, 8), -8.0)
    for _ in range(12):
        r, c = rng.integers(0, 8, 2)
        raw[0, r, c] = rng.uniform(-1.5, 3.0)
        raw[1:7, r, c] = rng.normal(0.0, 0.3, 6)
    preds = AnchorPredictions(raw=constant(raw), height=8, width=8)
    got = decode_and_nms(preds, score_thresh=0.1, nms_iou=0.15)
    # brute force over the same decoded candidates
    from .detector import decode_box

    cand = []
    for idx in range(64):
        r, c = divmod(idx, 8)
        score = 1.0 / (1.0 + math.exp(-raw[0, r, c]))
        if score >= 0.1:
            cand.append((score, idx, decode_box(raw[1:7, r, c], r, c)))
    cand.sort(key=lambda x: (-x[0], x[1]))
    kept = []
    for score, _, box in cand:
        if all(rotated_iou(box, kb) <= 0.15 for _, kb in kept):
            kept.append((score, box))
    ok = len(got) == len(kept) and all(
        abs(d.score - s) < 1e-12 and np.allclose(d.box.as_array(), b.as_array())
        for d, (s, b) in zip(got, kept)
    )
    return ok, f"{len(cand)} candidates, {len(kept)} kept"


def _tiny_manifest():
    from .runner import RunManifest
    from .world import gain_spread_affine

    profile = WorldProfile(channels=16, height=16, width=16, min_boxes=1, max_boxes=3)
    return RunManifest(
        scenario_id="verify",
        seed=5,
        n_samples=3,
        n_collaborators=1,
        profile=profile,
        distortion=gain_spread_affine(16, 0.5, seed=1),
        plugin=PluginConfig(channels=16, hidden=16, blocks=1, gn_groups=4),
    )


def check_stream_determinism(fault):
    from .runner import run_stream

    manifest = _tiny_manifest()
    a = run_stream(manifest)
    b = run_stream(manifest)
    ok = [r.payload_dict() for r in a.records] == [r.payload_dict() for r in b.records]
    return ok and a.summary == b.summary, "two replays of a 3-sample stream"


def check_predict_before_update(fault):
    from .runner import make_stream, run_stream

    manifest = _tiny_manifest()
    samples = make_stream(manifest)
    full = run_stream(manifest, samples=samples)
    trimmed = run_stream(manifest, samples=samples, update_mask=[True, True, False])

    def preds(result):
        return [
            [(d.score, tuple(d.box.as_array())) for d in rec.student_dets]
            for rec in result.records
        ]

    return preds(full) == preds(trimmed), "final-update skip leaves detections bitwise equal"


def check_adain_statistics_transfer(fault):
    rng = np.random.default_rng(13)
    f_n = FeatureField(values=rng.normal(2.0, 3.0, (4, 8, 8)), agent_id="n")
    f_e = FeatureField(values=rng.normal(-1.0, 0.6, (4, 8, 8)), agent_id="ego")
    stats_n = channel_stats(f_n)
    stats_e = channel_stats(f_e)
    out = adain_blend(f_n, stats_n, stats_e, constant(np.ones(4)))
    got_mu = out.data.mean(axis=(1, 2))
    got_sd = out.data.std(axis=(1, 2))
    want_sd = stats_e.nu * (stats_n.nu - DEFAULT_EPS) / stats_n.nu
    ok = np.max(np.abs(got_mu - stats_e.mu)) <= 1e-9 and np.max(np.abs(got_sd - want_sd)) <= 1e-9
    return ok, "alpha=1 blend lands on the ego statistics (eps-floor adjusted)"


def check_checkpoint_round_trip(fault):
    cfg = PluginConfig(channels=8, hidden=8, blocks=1, gn_groups=2)
    params = init_plugin_params(cfg, seed=6)
    params.w_out.data = np.random.default_rng(7).normal(0.0, 0.3, params.w_out.data.shape)
    blob = dump_named_tensors(params.to_checkpoint())
    restored = init_plugin_params(cfg, seed=99)
    restored.load_checkpoint(parse_named_tensors(blob))
    for (name, a), (_, b) in zip(params.named_parameters(), restored.named_parameters()):
        if not np.array_equal(a.data, b.data):
            return False, f"parameter {name} changed across the round trip"
    return True, "byte round trip restores every parameter exactly"


CHECKS = (
    ("plugin_identity_at_init", check_plugin_identity),
    ("plugin_param_count_closed_form", check_param_count),
    ("conv_gradient_finite_difference", check_conv_gradient),
    ("group_norm_gradient_finite_difference", check_group_norm_gradient),
    ("distill_gradient_chain", check_distill_gradient_chain),
    ("ap_hand_value", check_ap_hand_value),
    ("greedy_match_brute_force", check_greedy_match_brute_force),
    ("mask_band_filter", check_mask_band_filter),
    ("adam_scalar_rule", check_adam_scalar_rule),
    ("rotated_iou_values", check_rotated_iou_values),
    ("nms_brute_force", check_nms_brute_force),
    ("stream_determinism", check_stream_determinism),
    ("predict_before_update", check_predict_before_update),
    ("adain_statistics_transfer", check_adain_statistics_transfer),
    ("checkpoint_round_trip", check_checkpoint_round_trip),
)


def run_all(fault: str = None) -> list:
    results = []
    for name, fn in CHECKS:
        try:
            passed, detail = fn(fault)
        except Exception as exc:  # a crash is a failure, not a crash of the suite
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name=name, passed=bool(passed), detail=detail))
    return results
