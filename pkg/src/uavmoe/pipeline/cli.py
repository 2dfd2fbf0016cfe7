"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from ..errors import ConfigError, DataError, DomainError
from ..geo import area_to_kml
from ..ingest import read_dataset, validate_dataset, write_pneuma_wide
from .report import emit_report
from .runner import PipelineError, RunConfig, run_pipeline
from .synth import SynthScenario, synth_generate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3

COMMAND_STAGES = {
    "assign": ("ingest", "assign"),
    "queues": ("ingest", "queueing"),
    "moe": ("ingest", "moe"),
    "fuel": ("ingest", "energy"),
    "fd": ("ingest", "fd"),
    "report": ("ingest", "assign", "queueing", "moe", "energy", "fd"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavmoe", description="Intersection measures of effectiveness from drone trajectories."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, need_out=True):
        p.add_argument("--input", action="append", default=None, help="trajectory file (repeatable)")
        p.add_argument("--area", help="study area, KML or GeoJSON")
        p.add_argument("--config", help="JSON run configuration")
        if need_out:
            p.add_argument("--out", help="output directory")
            p.add_argument("--format", choices=("csv", "json"), default=None)
        p.add_argument("--uf", choices=("speed-limit", "p95"), default=None, help="free-flow speed source")
        p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; the analysis is deterministic")

    v = sub.add_parser("validate", help="parse trajectories and list data findings")
    common(v, need_out=False)
    for name in COMMAND_STAGES:
        common(sub.add_parser(name, help=f"run the {name} tables" if name != "report" else "run every stage"))

    s = sub.add_parser("synth", help="write a synthetic scenario with ground truth")
    s.add_argument("--config", help="JSON object of scenario fields")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "inputs": tuple(args.input) if args.input else None,
        "area": args.area,
        "uf_source": args.uf,
    }
    if hasattr(args, "out"):
        overrides["out"] = args.out
        overrides["fmt"] = args.format
    return cfg.with_overrides(**overrides)


def _cmd_validate(args) -> int:
    cfg = _config(args)
    if not cfg.inputs:
        raise ConfigError("validate needs --input")
    cfg.validate(need_area=False)
    for path in cfg.inputs:
        ds = read_dataset(path)
        findings = validate_dataset(ds)
        print(f"{path}: {len(ds)} trajectories, sample interval {ds.sample_interval:g} s, {len(findings)} finding(s)")
        for f in findings.findings:
            print(f"  track {f.track_id} [{f.kind}] sample {f.index}: {f.detail}")
    return EXIT_OK


def _cmd_synth(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read scenario {args.config}: {exc}") from None
    known = {f.name for f in fields(SynthScenario)}
    if set(doc) - known:
        raise ConfigError(f"unknown scenario field(s): {sorted(set(doc) - known)}")
    for key in ("arrival_headway", "lane_offsets", "origin"):
        if isinstance(doc.get(key), list):
            doc[key] = tuple(doc[key])
    if "type_mix" in doc:
        doc["type_mix"] = tuple((str(k), float(w)) for k, w in dict(doc["type_mix"]).items())
    try:
        scenario = SynthScenario(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scenario: {exc}") from None
    dataset, area, truth = synth_generate(scenario, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectories.csv", "w", encoding="utf-8") as fh:
        write_pneuma_wide(dataset, fh)
    (out / "area.kml").write_text(area_to_kml(area), encoding="utf-8")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), indent=1) + "\n", encoding="utf-8")
    print(f"wrote {len(dataset)} trajectories to {out}")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _config(args)
    if cfg.out is None:
        raise ConfigError("--out is required")
    result = run_pipeline(cfg, COMMAND_STAGES[args.command])
    written = emit_report(result.report, cfg.out, cfg.fmt)
    for note in result.report.notes:
        print(note)
    print(f"wrote {len(written)} table(s) to {cfg.out}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"validate": _cmd_validate, "synth": _cmd_synth}.get(args.command, _cmd_run)
    try:
        return handler(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc.cause)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc)


def _code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, OSError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, DomainError)):
        return EXIT_DATA
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
