"""Single-pass online adaptation over a synthetic cooperative stream.

Each sample is processed exactly once, in order: the frozen ego-only
teacher predicts, every collaborator field goes through its own plugin,
the fused student prediction is decoded and recorded, and only then do
the plugins take their optimizer step.  The recorded prediction for a
sample is therefore always the pre-update one.

A ``RunManifest`` pins everything that can influence the outcome (scene
seeds, distortion, fusion kind, plugin and adaptation configs, stream
order), so identical manifests replay to identical records, modulo the
wall-clock fields.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import Tape
from .bev import FeatureField, linear_cka, scale_alignment
from .detector import (
    Detection,
    build_fusion,
    decode_and_nms,
    fuse,
    hand_set_head,
    head_forward,
)
from .distill import (
    TTTConfig,
    build_masks,
    enhancement_loss,
    init_optimizer_state,
    preservation_loss,
    total_loss,
    ttt_step,
)
from .errors import ConfigError, ShapeError
from .evaluate import ap_suite, greedy_match, voc2010_ap
from .plugin import PLUGIN_VARIANTS, PluginConfig, init_plugin_params, plugin_forward
from .world import (
    DistortionSpec,
    OrientedBox,
    WorldProfile,
    apply_distortion,
    generate_scene,
    render_canonical,
)

_STREAM_TAG = 0x73747265  # "stre"
_ORDER_TAG = 0x6F726472  # "ordr"
_PLUGRUN_TAG = 0x70677273  # "pgrs"

WORKERS_ENV = "COOPADAPT_WORKERS"


@dataclass(frozen=True)
class RunManifest:
    """Everything that determines a run; its hash names golden files."""

    scenario_id: str
    seed: int
    n_samples: int
    n_collaborators: int
    profile: WorldProfile = field(default_factory=WorldProfile)
    distortion: object = None  # None | DistortionSpec | tuple per collaborator
    fusion_kind: str = "max_fusion"
    plugin: PluginConfig = None
    ttt: TTTConfig = field(default_factory=TTTConfig)
    stream_order: str = "default"
    shuffle_seed: int = 0
    passthrough: bool = False
    plugin_seed: int = 0
    plugin_variant: str = "full"
    update_every: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError(f"need at least one sample, got {self.n_samples}")
        if self.n_collaborators < 0:
            raise ConfigError(f"collaborator count must be non-negative, got {self.n_collaborators}")
        if self.stream_order not in ("default", "shuffled"):
            raise ConfigError(f"stream order must be 'default' or 'shuffled', got {self.stream_order!r}")
        if self.update_every < 1:
            raise ConfigError(f"update_every must be >= 1, got {self.update_every}")
        if self.plugin_variant not in PLUGIN_VARIANTS:
            raise ConfigError(
                f"plugin variant must be one of {PLUGIN_VARIANTS}, got {self.plugin_variant!r}"
            )
        if isinstance(self.distortion, (list, tuple)):
            object.__setattr__(self, "distortion", tuple(self.distortion))
            if len(self.distortion) != self.n_collaborators:
                raise ConfigError(
                    f"got {len(self.distortion)} per-collaborator distortions for "
                    f"{self.n_collaborators} collaborators"
                )
        if self.plugin is None:
            object.__setattr__(self, "plugin", PluginConfig(channels=self.profile.channels))
        if self.plugin.channels != self.profile.channels:
            raise ConfigError(
                f"plugin expects {self.plugin.channels} channels but the world renders {self.profile.channels}"
            )

    def distortion_for(self, k: int):
        if isinstance(self.distortion, tuple):
            return self.distortion[k]
        return self.distortion

    def to_json_dict(self) -> dict:
        if self.distortion is None:
            dist = None
        elif isinstance(self.distortion, tuple):
            dist = [spec.to_json_dict() for spec in self.distortion]
        else:
            dist = self.distortion.to_json_dict()
        return {
            "scenario_id": self.scenario_id,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "n_collaborators": self.n_collaborators,
            "profile": asdict(self.profile),
            "distortion": dist,
            "fusion_kind": self.fusion_kind,
            "plugin": asdict(self.plugin),
            "ttt": asdict(self.ttt),
            "stream_order": self.stream_order,
            "shuffle_seed": self.shuffle_seed,
            "passthrough": self.passthrough,
            "plugin_seed": self.plugin_seed,
            "plugin_variant": self.plugin_variant,
            "update_every": self.update_every,
        }

    def manifest_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class StreamSample:
    index: int  # position in the stream
    scene_seed: int  # generator seed of the underlying scene
    ego: FeatureField
    collaborators: tuple  # FeatureField per collaborator, distortion applied
    canonical: tuple  # the same fields before distortion (compat reference)
    truth: tuple  # OrientedBox per object


@dataclass(frozen=True)
class StreamRecord:
    sample_index: int
    scene_seed: int
    teacher_dets: tuple
    student_dets: tuple  # captured strictly before this sample's update
    baseline_dets: tuple  # unadapted fusion, for the no-plugin curve
    l_pres: float
    l_enh: float
    n_hi: int
    n_boost: int
    updated: bool
    grad_norms: tuple  # (pre-clip, post-clip) per collaborator, in id order
    cka_before: float
    cka_after: float
    scale_before: float
    scale_after: float
    teacher_ms: float
    forward_ms: float
    baseline_ms: float
    update_ms: float

    def payload_dict(self) -> dict:
        """Deterministic content only — everything except wall-clock."""

        def dets(items):
            return [{"score": d.score, "box": list(d.box.as_array())} for d in items]

        return {
            "sample_index": self.sample_index,
            "scene_seed": self.scene_seed,
            "teacher_dets": dets(self.teacher_dets),
            "student_dets": dets(self.student_dets),
            "baseline_dets": dets(self.baseline_dets),
            "l_pres": self.l_pres,
            "l_enh": self.l_enh,
            "n_hi": self.n_hi,
            "n_boost": self.n_boost,
            "updated": self.updated,
            "grad_norms": [list(g) for g in self.grad_norms],
            "cka_before": self.cka_before,
            "cka_after": self.cka_after,
            "scale_before": self.scale_before,
            "scale_after": self.scale_after,
        }

    def to_json_dict(self) -> dict:
        doc = self.payload_dict()
        doc["timing_ms"] = {
            "teacher": self.teacher_ms,
            "forward": self.forward_ms,
            "baseline": self.baseline_ms,
            "update": self.update_ms,
        }
        return doc


@dataclass
class RunResult:
    manifest: RunManifest
    records: list
    truth: list  # tuple of OrientedBox per stream position
    summary: dict
    plugins: dict  # collaborator id -> PluginParams after the stream


def collaborator_ids(n: int) -> list:
    return [f"veh_{k + 1:02d}" for k in range(n)]


def make_stream(manifest: RunManifest) -> list:
    """Generate, render, and distort the sample stream for a manifest.

    Scene seeds depend only on the manifest seed and the sample's slot in
    the default order, so shuffling reorders the same sample set instead
    of inventing new scenes.
    """
    seeds = np.random.SeedSequence(entropy=[manifest.seed, _STREAM_TAG]).generate_state(
        manifest.n_samples
    )
    ids = collaborator_ids(manifest.n_collaborators)
    order = list(range(manifest.n_samples))
    if manifest.stream_order == "shuffled":
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=[manifest.seed, _ORDER_TAG, manifest.shuffle_seed])
        )
        order = list(rng.permutation(manifest.n_samples))

    samples = []
    for position, slot in enumerate(order):
        scene = generate_scene(int(seeds[slot]), manifest.profile)
        ego = render_canonical(scene, "ego", profile=manifest.profile)
        clean, collabs = [], []
        for k, cid in enumerate(ids):
            f = render_canonical(scene, cid, profile=manifest.profile)
            clean.append(f)
            spec = manifest.distortion_for(k)
            collabs.append(f if spec is None else apply_distortion(f, spec))
        samples.append(
            StreamSample(
                index=position,
                scene_seed=int(seeds[slot]),
                ego=ego,
                collaborators=tuple(collabs),
                canonical=tuple(clean),
                truth=tuple(scene.boxes),
            )
        )
    return samples


def _mean(values) -> float:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def run_stream(
    manifest: RunManifest,
    samples: list = None,
    update_mask: list = None,
    detach_ids: set = None,
    frozen_ids: set = None,
) -> RunResult:
    """One online pass: predict, record, then adapt, for every sample.

    ``update_mask`` (one bool per stream position) overrides the manifest's
    ``update_every`` cadence; it exists so paired runs can disable specific
    updates without touching anything that happens before them.

    ``detach_ids`` feeds those collaborators' raw fields to fusion instead
    of their plugin outputs; ``frozen_ids`` keeps those plugins from ever
    updating.  Together they isolate one plugin's training from another's.
    """
    if samples is None:
        samples = make_stream(manifest)
    if update_mask is not None and len(update_mask) != len(samples):
        raise ConfigError(
            f"update mask covers {len(update_mask)} samples, stream has {len(samples)}"
        )
    detach_ids = detach_ids or set()
    frozen_ids = frozen_ids or set()

    channels = manifest.profile.channels
    head = hand_set_head(channels)
    fusion = build_fusion(manifest.fusion_kind, channels)
    ids = collaborator_ids(manifest.n_collaborators)
    plug_seeds = np.random.SeedSequence(entropy=[manifest.plugin_seed, _PLUGRUN_TAG]).generate_state(
        max(1, manifest.n_collaborators)
    )
    plugins = {cid: init_plugin_params(manifest.plugin, seed=int(plug_seeds[k])) for k, cid in enumerate(ids)}
    opts = {cid: init_optimizer_state(plugins[cid]) for cid in ids}

    records = []
    truth = []
    for pos, sample in enumerate(samples):
        grid = (channels, manifest.profile.height, manifest.profile.width)
        for f in (sample.ego, *sample.collaborators):
            if f.values.data.shape != grid:
                raise ShapeError(
                    f"sample {pos}: agent {f.agent_id!r} field {f.values.data.shape} "
                    f"does not match the stream grid {grid}"
                )

        t0 = time.perf_counter()
        teacher = head_forward(head, sample.ego)
        teacher_dets = decode_and_nms(teacher)
        t1 = time.perf_counter()

        baseline_preds = head_forward(head, fuse(fusion, sample.ego, list(sample.collaborators)))
        baseline_dets = decode_and_nms(baseline_preds)
        t2 = time.perf_counter()

        # feature compatibility vs the undistorted canonical render
        cka_before = _mean(
            linear_cka(f, ref) for f, ref in zip(sample.collaborators, sample.canonical)
        )
        scale_before = _mean(
            scale_alignment(f, ref) for f, ref in zip(sample.collaborators, sample.canonical)
        )

        if manifest.passthrough or not ids:
            tape = None
            student = teacher if not ids else baseline_preds
            student_dets = teacher_dets if not ids else baseline_dets
            cka_after, scale_after = cka_before, scale_before
            forward_ms = (t2 - t1) * 1e3
        else:
            tape = Tape()
            t_fwd = time.perf_counter()
            consumed = []
            for cid, f in zip(ids, sample.collaborators):
                out = plugin_forward(plugins[cid], f, sample.ego, tape, variant=manifest.plugin_variant)
                consumed.append(f if cid in detach_ids else out)
            fused = fuse(fusion, sample.ego, consumed, tape)
            student = head_forward(head, fused, tape)
            student_dets = decode_and_nms(student)
            forward_ms = (time.perf_counter() - t_fwd) * 1e3
            cka_after = _mean(
                linear_cka(f, ref) for f, ref in zip(consumed, sample.canonical)
            )
            scale_after = _mean(
                scale_alignment(f, ref) for f, ref in zip(consumed, sample.canonical)
            )

        do_update = bool(update_mask[pos]) if update_mask is not None else (pos % manifest.update_every == 0)
        do_update = do_update and not manifest.passthrough and bool(ids)

        t4 = time.perf_counter()
        masks = build_masks(teacher, manifest.ttt)
        pres = preservation_loss(student, teacher, masks, manifest.ttt, tape)
        enh = enhancement_loss(student, masks, tape)
        loss = total_loss(pres, enh, manifest.ttt, tape)
        grad_norms = []
        updated = False
        if do_update:
            for cid in ids:
                if cid in frozen_ids:
                    continue
                report = ttt_step(plugins[cid], opts[cid], tape, loss, manifest.ttt)
                grad_norms.append((report.grad_norm, report.clipped_norm))
                updated = True
        t5 = time.perf_counter()

        records.append(
            StreamRecord(
                sample_index=pos,
                scene_seed=sample.scene_seed,
                teacher_dets=tuple(teacher_dets),
                student_dets=tuple(student_dets),
                baseline_dets=tuple(baseline_dets),
                l_pres=float(pres.data),
                l_enh=float(enh.data),
                n_hi=masks.n_hi,
                n_boost=masks.n_boost,
                updated=updated,
                grad_norms=tuple(grad_norms),
                cka_before=cka_before,
                cka_after=cka_after,
                scale_before=scale_before,
                scale_after=scale_after,
                teacher_ms=(t1 - t0) * 1e3,
                forward_ms=forward_ms,
                baseline_ms=(t2 - t1) * 1e3,
                update_ms=(t5 - t4) * 1e3,
            )
        )
        truth.append(sample.truth)

    summary = summarize(manifest, records, truth)
    return RunResult(manifest=manifest, records=records, truth=truth, summary=summary, plugins=plugins)


def _pool(records, truth, which: str):
    preds = []
    for rec in records:
        for det in getattr(rec, which):
            preds.append((rec.sample_index, det.score, det.box))
    truths = []
    for rec in records:
        for box in truth[rec.sample_index]:
            truths.append((rec.sample_index, box))
    return preds, truths


def summarize(manifest: RunManifest, records: list, truth: list) -> dict:
    """Final pooled metrics; deliberately free of wall-clock numbers."""
    out = {"manifest_hash": manifest.manifest_hash(), "n_samples": len(records)}
    for label, which in (("adapted", "student_dets"), ("ego_only", "teacher_dets"), ("no_plugin", "baseline_dets")):
        preds, truths = _pool(records, truth, which)
        out[f"ap_{label}"] = {f"{thr:.2f}": ap for thr, ap in ap_suite(preds, truths).items()}
    out["cka_before"] = _mean(r.cka_before for r in records)
    out["cka_after"] = _mean(r.cka_after for r in records)
    out["scale_before"] = _mean(r.scale_before for r in records)
    out["scale_after"] = _mean(r.scale_after for r in records)
    out["updates_applied"] = sum(1 for r in records if r.updated)
    return out


# -- prefix traces -----------------------------------------------------------------


def prefix_ap_trace(records: list, truth: list, every_k: int, iou_thresh: float = 0.5) -> list:
    """Pooled AP over each stream prefix, for all three prediction streams.

    Returns rows ``{"prefix": L, "adapted": ap, "ego_only": ap,
    "no_plugin": ap}`` at ``L = every_k, 2*every_k, ...`` plus the full
    length; AP is None for prefixes with no ground truth.
    """
    if every_k < 1:
        raise ConfigError(f"trace stride must be >= 1, got {every_k}")
    lengths = list(range(every_k, len(records) + 1, every_k))
    if not lengths or lengths[-1] != len(records):
        lengths.append(len(records))
    rows = []
    for length in lengths:
        row = {"prefix": length}
        for label, which in (("adapted", "student_dets"), ("ego_only", "teacher_dets"), ("no_plugin", "baseline_dets")):
            preds, truths = _pool(records[:length], truth, which)
            row[label] = voc2010_ap(greedy_match(preds, truths, iou_thresh))
        rows.append(row)
    return rows


def export_prefix_trace(rows: list, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("prefix,adapted,ego_only,no_plugin\n")
        for row in rows:
            cells = [str(row["prefix"])] + [
                "" if row[k] is None else repr(float(row[k])) for k in ("adapted", "ego_only", "no_plugin")
            ]
            fh.write(",".join(cells) + "\n")


# -- ordering sensitivity -----------------------------------------------------------


def _final_aps(manifest: RunManifest) -> dict:
    return run_stream(manifest).summary["ap_adapted"]


def ordering_sweep(manifest: RunManifest, n_orders: int, shuffle_seeds: list = None) -> dict:
    """Re-run the stream under shuffled orders and report AP statistics.

    ``shuffle_seeds`` overrides the derived per-order seeds (passing the
    same seed twice is the determinism smoke test: zero variance).
    """
    if n_orders < 2:
        raise ConfigError(f"ordering sweep needs at least 2 orders, got {n_orders}")
    if shuffle_seeds is None:
        state = np.random.SeedSequence(entropy=[manifest.seed, _ORDER_TAG]).generate_state(n_orders)
        shuffle_seeds = [int(s) for s in state]
    elif len(shuffle_seeds) != n_orders:
        raise ConfigError(f"got {len(shuffle_seeds)} shuffle seeds for {n_orders} orders")

    manifests = [
        replace(manifest, stream_order="shuffled", shuffle_seed=seed) for seed in shuffle_seeds
    ]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            shuffled = list(pool.map(_final_aps, manifests))
    else:
        shuffled = [_final_aps(m) for m in manifests]
    default = _final_aps(replace(manifest, stream_order="default"))

    out = {"n_orders": n_orders, "shuffle_seeds": list(shuffle_seeds), "per_threshold": {}}
    for key in default:
        vals = [run[key] for run in shuffled]
        clean = [v for v in vals if v is not None]
        stats = {
            "default": default[key],
            "orders": vals,
            "mean": float(np.mean(clean)) if clean else None,
            "std": float(np.std(clean)) if clean else None,
            "min": min(clean) if clean else None,
            "max": max(clean) if clean else None,
        }
        out["per_threshold"][key] = stats
    return out


# -- timing ------------------------------------------------------------------------


def timing_report(records: list) -> dict:
    """Median/p95/total per phase; online step = student forward + update."""
    phases = {
        "teacher_forward": [r.teacher_ms for r in records],
        "forward_with_plugin": [r.forward_ms for r in records],
        "forward_without_plugin": [r.baseline_ms for r in records],
        "update": [r.update_ms for r in records],
        "online_step": [r.forward_ms + r.update_ms for r in records],
    }
    out = {}
    for name, vals in phases.items():
        arr = np.asarray(vals, dtype=np.float64)
        out[name] = {
            "median_ms": float(np.median(arr)) if arr.size else None,
            "p95_ms": float(np.percentile(arr, 95)) if arr.size else None,
            "total_ms": float(arr.sum()),
        }
    return out


# -- record (de)serialization --------------------------------------------------------


def dump_records_jsonl(path, records: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict(), sort_keys=True) + "\n")


def load_record_dicts_jsonl(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _dets_from_dicts(items) -> tuple:
    return tuple(
        Detection(box=OrientedBox(*doc["box"]), score=float(doc["score"])) for doc in items
    )


def record_from_json_dict(doc: dict) -> StreamRecord:
    timing = doc.get("timing_ms", {})
    return StreamRecord(
        sample_index=int(doc["sample_index"]),
        scene_seed=int(doc["scene_seed"]),
        teacher_dets=_dets_from_dicts(doc["teacher_dets"]),
        student_dets=_dets_from_dicts(doc["student_dets"]),
        baseline_dets=_dets_from_dicts(doc["baseline_dets"]),
        l_pres=float(doc["l_pres"]),
        l_enh=float(doc["l_enh"]),
        n_hi=int(doc["n_hi"]),
        n_boost=int(doc["n_boost"]),
        updated=bool(doc["updated"]),
        grad_norms=tuple(tuple(g) for g in doc["grad_norms"]),
        cka_before=doc["cka_before"],
        cka_after=doc["cka_after"],
        scale_before=doc["scale_before"],
        scale_after=doc["scale_after"],
        teacher_ms=float(timing.get("teacher", 0.0)),
        forward_ms=float(timing.get("forward", 0.0)),
        baseline_ms=float(timing.get("baseline", 0.0)),
        update_ms=float(timing.get("update", 0.0)),
    )
