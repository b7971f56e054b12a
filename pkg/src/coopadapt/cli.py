"""Experiment front-end: scenario files, run orchestration, sweeps, artifacts.

Scenario files are strict JSON: unknown keys are rejected (with the line
they appear on where possible) so that a typo never silently falls back to
a default.  Every run echoes its fully resolved manifest into the output
directory; re-running from that echo reproduces the metrics exactly.

Exit codes: 0 success, 2 configuration error, 3 contract violation,
4 verification failure.
"""

from __future__ import annotations

import argparse
import inspect
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .distill import TTTConfig
from .errors import ConfigError, ContractError, CoopAdaptError, VerificationError
from .plugin import PluginConfig, param_count
from .runner import (
    WORKERS_ENV,
    RunManifest,
    dump_records_jsonl,
    export_prefix_trace,
    ordering_sweep,
    prefix_ap_trace,
    run_stream,
    timing_report,
)
from .world import (
    DistortionSpec,
    WorldProfile,
    gain_spread_affine,
    givens_mix,
    transition_mix,
)

FAULT_ENV = "COOPADAPT_FAULT"

_BUILDERS = {
    "givens_mix": givens_mix,
    "gain_spread_affine": gain_spread_affine,
    "transition_mix": transition_mix,
}

_TOP_KEYS = {
    "scenario_id",
    "seed",
    "n_samples",
    "n_collaborators",
    "profile",
    "distortion",
    "fusion_kind",
    "plugin",
    "ttt",
    "stream_order",
    "shuffle_seed",
    "passthrough",
    "plugin_seed",
    "plugin_variant",
    "update_every",
    "trace_every",
    "out_dir",
}

_SPEC_KEYS = {"kind", "gains", "offsets", "matrix", "noise_amp", "noise_channels", "seed", "parts"}


def _line_of(raw: str, key: str):
    needle = f'"{key}"'
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def _reject_unknown(doc: dict, allowed: set, raw: str, where: str) -> None:
    for key in doc:
        if key not in allowed:
            line = _line_of(raw, key)
            at = f" (line {line})" if line is not None else ""
            raise ConfigError(f"unknown key {key!r} in {where}{at}")


def _build_distortion(doc, raw: str):
    if doc is None:
        return None
    if isinstance(doc, list):
        return tuple(_build_distortion(item, raw) for item in doc)
    if not isinstance(doc, dict):
        raise ConfigError("distortion must be null, an object, or a list of objects")
    if "builder" in doc:
        name = doc["builder"]
        if name not in _BUILDERS:
            raise ConfigError(
                f"unknown distortion builder {name!r}; expected one of {sorted(_BUILDERS)}"
            )
        fn = _BUILDERS[name]
        kwargs = {k: v for k, v in doc.items() if k != "builder"}
        allowed = set(inspect.signature(fn).parameters)
        _reject_unknown(kwargs, allowed, raw, f"distortion builder {name!r}")
        spec = fn(**{k: tuple(v) if isinstance(v, list) else v for k, v in kwargs.items()})
        return spec
    _reject_unknown(doc, _SPEC_KEYS, raw, "distortion spec")
    return DistortionSpec.from_json_dict(doc)


def _dataclass_from(doc: dict, cls, raw: str, where: str):
    allowed = {f.name for f in dataclass_fields(cls)}
    _reject_unknown(doc, allowed, raw, where)
    clean = {k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()}
    return cls(**clean)


def find_scenario(name_or_path: str) -> Path:
    """Resolve a scenario argument: an existing path, or a bundled name."""
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = resources.files("coopadapt") / "scenarios" / f"{name_or_path}.json"
    with resources.as_file(bundled) as concrete:
        if concrete.exists():
            return Path(str(concrete))
    raise ConfigError(
        f"scenario {name_or_path!r} is neither a file nor a bundled scenario name"
    )


def load_scenario(name_or_path: str, overrides: argparse.Namespace = None):
    """Parse and validate a scenario file into (manifest, extras)."""
    path = find_scenario(name_or_path)
    raw = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: scenario must be a JSON object")
    _reject_unknown(doc, _TOP_KEYS, raw, f"scenario {path.name}")

    profile = _dataclass_from(doc.get("profile", {}), WorldProfile, raw, "profile")
    plugin_doc = doc.get("plugin")
    plugin = (
        None
        if plugin_doc is None
        else _dataclass_from(plugin_doc, PluginConfig, raw, "plugin")
    )
    ttt = _dataclass_from(doc.get("ttt", {}), TTTConfig, raw, "ttt")
    manifest = RunManifest(
        scenario_id=doc.get("scenario_id", path.stem),
        seed=int(doc.get("seed", 0)),
        n_samples=int(doc.get("n_samples", 100)),
        n_collaborators=int(doc.get("n_collaborators", 1)),
        profile=profile,
        distortion=_build_distortion(doc.get("distortion"), raw),
        fusion_kind=doc.get("fusion_kind", "max_fusion"),
        plugin=plugin,
        ttt=ttt,
        stream_order=doc.get("stream_order", "default"),
        shuffle_seed=int(doc.get("shuffle_seed", 0)),
        passthrough=bool(doc.get("passthrough", False)),
        plugin_seed=int(doc.get("plugin_seed", 0)),
        plugin_variant=doc.get("plugin_variant", "full"),
        update_every=int(doc.get("update_every", 1)),
    )
    extras = {
        "trace_every": int(doc.get("trace_every", max(1, manifest.n_samples // 25))),
        "out_dir": doc.get("out_dir", f"runs/{manifest.scenario_id}"),
    }
    if overrides is not None:
        manifest, extras = _apply_overrides(manifest, extras, overrides)
    return manifest, extras


def _apply_overrides(manifest: RunManifest, extras: dict, args: argparse.Namespace):
    ttt = manifest.ttt
    if getattr(args, "tau_hi", None) is not None:
        ttt = replace(ttt, tau_hi=args.tau_hi, tau_lo=min(ttt.tau_lo, args.tau_hi))
    if getattr(args, "lam", None) is not None:
        ttt = replace(ttt, lam=args.lam)
    if getattr(args, "no_boost", False):
        ttt = replace(ttt, lam=0.0)
    changes = {"ttt": ttt}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "passthrough", False):
        changes["passthrough"] = True
    manifest = replace(manifest, **changes)
    if getattr(args, "out", None) is not None:
        extras = dict(extras, out_dir=args.out)
    return manifest, extras


# ---------------------------------------------------------------------------
# artifact helpers


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _write_atomic(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def _echo_manifest(out_dir: Path, manifest: RunManifest) -> None:
    _write_json(out_dir / "manifest.json", manifest.to_json_dict())


def _run_and_emit(manifest: RunManifest, out_dir: Path, trace_every: int):
    from .evaluate import export_pr, greedy_match

    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_stream(manifest)
    _echo_manifest(out_dir, manifest)
    _write_json(out_dir / "summary.json", result.summary)

    tmp = out_dir / "records.jsonl.tmp"
    dump_records_jsonl(tmp, result.records)
    os.replace(tmp, out_dir / "records.jsonl")

    rows = prefix_ap_trace(result.records, result.truth, every_k=trace_every)
    tmp = out_dir / "prefix_ap.csv.tmp"
    export_prefix_trace(rows, tmp)
    os.replace(tmp, out_dir / "prefix_ap.csv")

    preds = [
        (rec.sample_index, d.score, d.box) for rec in result.records for d in rec.student_dets
    ]
    truths = [
        (rec.sample_index, box)
        for rec in result.records
        for box in result.truth[rec.sample_index]
    ]
    tmp = out_dir / "pr_adapted.csv.tmp"
    export_pr(greedy_match(preds, truths, 0.5), tmp)
    os.replace(tmp, out_dir / "pr_adapted.csv")
    return result


def _workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _map_rows(fn, rows):
    n = _workers()
    if n > 1:
        with ThreadPoolExecutor(max_workers=n) as pool:
            return list(pool.map(fn, rows))
    return [fn(row) for row in rows]


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    manifest, extras = load_scenario(args.scenario, args)
    out_dir = Path(extras["out_dir"])
    result = _run_and_emit(manifest, out_dir, extras["trace_every"])
    s = result.summary
    print(
        f"{manifest.scenario_id}: AP@50 ego={s['ap_ego_only']['0.50']:.3f} "
        f"no_plugin={s['ap_no_plugin']['0.50']:.3f} adapted={s['ap_adapted']['0.50']:.3f} "
        f"-> {out_dir}"
    )
    return 0


def _ablation_rows(manifest: RunManifest, axis: str):
    """Rows for one ablation axis: ([(label, manifest), ...], default_label)."""
    ttt, plug = manifest.ttt, manifest.plugin
    if axis == "loss":
        rows = [
            ("tau_hi_0.0_no_boost", replace(manifest, ttt=replace(ttt, tau_hi=0.0, tau_lo=0.0, lam=0.0))),
            ("tau_hi_0.3_no_boost", replace(manifest, ttt=replace(ttt, lam=0.0))),
            ("default", manifest),
        ]
        return rows, "default"
    if axis == "plugin_size":
        small = replace(plug, hidden=max(plug.gn_groups, plug.hidden // 2), blocks=max(1, plug.blocks - 1))
        large = replace(plug, hidden=plug.hidden * 2, blocks=plug.blocks + 1)
        default_label = f"default_h{plug.hidden}_b{plug.blocks}"
        rows = [
            (f"small_h{small.hidden}_b{small.blocks}", replace(manifest, plugin=small)),
            (default_label, manifest),
            (f"large_h{large.hidden}_b{large.blocks}", replace(manifest, plugin=large)),
        ]
        return rows, default_label
    if axis == "components":
        rows = [
            ("no_plugin", replace(manifest, passthrough=True)),
            ("adain_only", replace(manifest, plugin_variant="adain_only")),
            ("adapter_only", replace(manifest, plugin_variant="adapter_only")),
            ("no_gate", replace(manifest, plugin_variant="no_gate")),
            ("full", replace(manifest, plugin_variant="full")),
        ]
        return rows, "full"
    if axis == "tau_hi":
        taus = (0.0, 0.1, 0.3, 0.5, 0.7)
        rows = []
        for tau in taus:
            cfg = replace(ttt, tau_hi=tau, tau_lo=min(ttt.tau_lo, tau))
            rows.append((f"tau_hi_{tau:g}", replace(manifest, ttt=cfg)))
        anchor = ttt.tau_hi if ttt.tau_hi in taus else 0.3
        return rows, f"tau_hi_{anchor:g}"
    raise ConfigError(f"unknown ablation axis {axis!r}; expected loss|plugin_size|components|tau_hi")


def cmd_ablate(args) -> int:
    manifest, extras = load_scenario(args.scenario, args)
    rows, default_label = _ablation_rows(manifest, args.axis)
    out_dir = Path(extras["out_dir"]) / f"ablate_{args.axis}"
    out_dir.mkdir(parents=True, exist_ok=True)

    def run_row(item):
        label, row_manifest = item
        row_dir = out_dir / "rows" / label
        row_dir.mkdir(parents=True, exist_ok=True)
        result = run_stream(row_manifest)
        _echo_manifest(row_dir, row_manifest)
        _write_json(row_dir / "summary.json", result.summary)
        return label, row_manifest, result.summary

    results = _map_rows(run_row, rows)
    by_label = {label: summary for label, _, summary in results}
    base50 = by_label[default_label]["ap_adapted"]["0.50"]

    lines = ["label,params,manifest_hash,ap30,ap50,ap70,delta50"]
    for label, row_manifest, summary in results:
        ap = summary["ap_adapted"]
        n_params = 0 if row_manifest.passthrough else param_count(row_manifest.plugin)
        delta = "" if ap["0.50"] is None or base50 is None else repr(ap["0.50"] - base50)
        cells = [
            label,
            str(n_params),
            row_manifest.manifest_hash(),
            *(repr(ap[k]) if ap[k] is not None else "" for k in ("0.30", "0.50", "0.70")),
            delta,
        ]
        lines.append(",".join(cells))
    _write_atomic(out_dir / "table.csv", "\n".join(lines) + "\n")
    print(f"{args.axis} ablation ({len(results)} rows) -> {out_dir / 'table.csv'}")
    return 0


def cmd_sweep_fusion(args) -> int:
    manifest, extras = load_scenario(args.scenario, args)
    out_dir = Path(extras["out_dir"]) / "sweep_fusion"
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for kind in ("max_fusion", "weighted_fusion"):
        jobs.append((kind, False, replace(manifest, fusion_kind=kind, passthrough=False)))
        jobs.append((kind, True, replace(manifest, fusion_kind=kind, passthrough=True)))

    def run_job(job):
        kind, passthrough, m = job
        return kind, passthrough, run_stream(m).summary["ap_adapted"]["0.50"]

    results = _map_rows(run_job, jobs)
    ap = {(kind, passthrough): value for kind, passthrough, value in results}
    lines = ["fusion_kind,ap50_without,ap50_with,delta50"]
    for kind in ("max_fusion", "weighted_fusion"):
        with_p, without_p = ap[(kind, False)], ap[(kind, True)]
        lines.append(f"{kind},{without_p!r},{with_p!r},{with_p - without_p!r}")
    _write_atomic(out_dir / "table.csv", "\n".join(lines) + "\n")
    print(f"fusion sweep -> {out_dir / 'table.csv'}")
    return 0


def cmd_ordering(args) -> int:
    manifest, extras = load_scenario(args.scenario, args)
    out_dir = Path(extras["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    report = ordering_sweep(manifest, n_orders=args.orders)
    _write_json(out_dir / "ordering.json", report)
    stats = report["per_threshold"]["0.50"]
    print(
        f"ordering over {args.orders} shuffles: AP@50 mean={stats['mean']:.3f} "
        f"std={stats['std']:.4f} default={stats['default']:.3f} -> {out_dir / 'ordering.json'}"
    )
    return 0


def cmd_timing(args) -> int:
    manifest, extras = load_scenario(args.scenario, args)
    out_dir = Path(extras["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_stream(manifest)
    report = timing_report(result.records)
    _write_json(out_dir / "timing.json", report)
    fwd = report["forward_with_plugin"]["median_ms"]
    step = report["online_step"]["median_ms"]
    print(f"median forward {fwd:.2f} ms, online step {step:.2f} ms -> {out_dir / 'timing.json'}")
    return 0


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(fault=os.environ.get(FAULT_ENV))
    failures = 0
    for res in results:
        mark = " ok " if res.passed else "FAIL"
        print(f"[{mark}] {res.name} — {res.detail}")
        failures += 0 if res.passed else 1
    print(f"{len(results) - failures}/{len(results)} invariant checks passed")
    if failures:
        raise VerificationError(f"{failures} invariant check(s) failed")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coopadapt",
        description="Synthetic cooperative-perception testbed with online feature adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("scenario", help="scenario file path or bundled scenario name")
        p.add_argument("--seed", type=int, default=None, help="override the stream seed")
        p.add_argument("--passthrough", action="store_true", help="disable the plugin entirely")
        p.add_argument("--no-boost", action="store_true", help="drop the enhancement term (lambda=0)")
        p.add_argument("--tau-hi", type=float, default=None, help="override the confident-band threshold")
        p.add_argument("--lambda", dest="lam", type=float, default=None, help="override the enhancement weight")
        p.add_argument("--out", default=None, help="override the output directory")

    add_common(sub.add_parser("run", help="run a scenario and emit metrics/curves"))

    ablate = sub.add_parser("ablate", help="run one ablation axis and emit its table")
    add_common(ablate)
    ablate.add_argument("--axis", required=True, choices=("loss", "plugin_size", "components", "tau_hi"))

    add_common(sub.add_parser("sweep-fusion", help="rerun under each fusion kind, with/without plugin"))

    ordering = sub.add_parser("ordering", help="stream-order sensitivity sweep")
    add_common(ordering)
    ordering.add_argument("--orders", type=int, default=5, help="number of shuffled orders")

    add_common(sub.add_parser("timing", help="run and summarize per-phase latency"))

    sub.add_parser("verify", help="run the invariant self-check suite")
    return parser


_DISPATCH = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "sweep-fusion": cmd_sweep_fusion,
    "ordering": cmd_ordering,
    "timing": cmd_timing,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _DISPATCH[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except VerificationError as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return 4
    except ContractError as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3
    except CoopAdaptError as exc:  # ShapeError and anything else domain-level
        print(f"contract violation: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
