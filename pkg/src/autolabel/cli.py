"""``autolabel`` command-line entry point.

Stage subcommands read the sequence from ``--input-dir`` and exchange their
intermediate artifacts through ``--output-dir``::

    fuse    -> proposals.jsonl
    track   -> tracks_<stream>.jsonl
    refine  -> refined.jsonl
    label   -> labels.jsonl
    round   -> all of the above plus report.json / report.txt
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import io, synth
from .ensemble import ConfigError
from .evaluate import evaluation_report
from .io import InputError
from .label import STATIC_REFINED, TRACK_PED, TRACK_VEH, assemble_pseudo_labels, filter_labels
from .pipeline import (
    RoundConfig,
    SequenceInputs,
    _to_sensor,
    format_report,
    fuse_frames,
    refine_tracks,
    run_round,
    track_streams,
    validate_config,
)
from .tracking import STREAMS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_USAGE = 64

SUBCOMMANDS = ("fuse", "track", "refine", "label", "round", "eval", "synth")

log = logging.getLogger("autolabel")


def _setup_logging():
    level = os.environ.get("AUTOLABEL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> RoundConfig:
    if args.config:
        cfg = RoundConfig.load(args.config)
        if args.round is not None and args.round != cfg.round_index:
            raise ConfigError(f"--round {args.round} disagrees with round_index {cfg.round_index} in {args.config}")
    else:
        cfg = RoundConfig.for_round(args.round or 1)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise InputError(f"missing {what}: {path}")
    return path


def cmd_fuse(args) -> int:
    cfg = _load_config(args)
    inputs = SequenceInputs.load(args.input_dir)
    proposals = fuse_frames(inputs, cfg.ensemble.resolve(inputs.sets), args.jobs)
    io.write_frames(Path(cfg.output_dir) / "proposals.jsonl", proposals)
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    poses = io.read_poses(Path(args.input_dir) / "poses.jsonl")
    proposals = io.read_frames(_require(out / "proposals.jsonl", "fused proposals (run `autolabel fuse`)"))
    if set(proposals) - set(poses):
        raise InputError("proposal frames without poses")
    for name, tracks in track_streams(proposals, poses, cfg).items():
        io.write_tracks(out / f"tracks_{name}.jsonl", tracks)
    return EXIT_OK


def cmd_refine(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    poses = io.read_poses(Path(args.input_dir) / "poses.jsonl")
    tracks = {name: io.read_tracks(_require(out / f"tracks_{name}.jsonl", "track dump (run `autolabel track`)"))
              for name in STREAMS}
    frames = sorted(poses)
    frame_range = (frames[0], frames[-1]) if frames else (0, -1)
    refined = {f: [] for f in frames}
    for tag, per_frame in zip((STATIC_REFINED, TRACK_VEH, TRACK_PED), refine_tracks(tracks, cfg, frame_range)):
        for f, boxes in _to_sensor(per_frame, poses).items():
            refined[f].extend(b.with_(source=tag) for b in boxes)
    io.write_labels(out / "refined.jsonl", refined)
    return EXIT_OK


def cmd_label(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    clouds = io.read_clouds(Path(args.input_dir) / "clouds")
    proposals = io.read_frames(_require(out / "proposals.jsonl", "fused proposals (run `autolabel fuse`)"))
    refined = io.read_labels(_require(out / "refined.jsonl", "refined boxes (run `autolabel refine`)"))
    labels = {}
    for f in sorted(clouds):
        r = refined.get(f, [])
        assembled = assemble_pseudo_labels(
            f, proposals.get(f, []),
            [b for b in r if b.source == STATIC_REFINED],
            [b for b in r if b.source == TRACK_VEH],
            [b for b in r if b.source == TRACK_PED],
            cfg.label.nms_thresh,
        )
        labels[f] = filter_labels(assembled, clouds[f], cfg.label.s_pos)
    io.write_labels(out / "labels.jsonl", labels)
    return EXIT_OK


def cmd_round(args) -> int:
    cfg = _load_config(args)
    inputs = SequenceInputs.load(args.input_dir)
    result = run_round(inputs, cfg, write=True, jobs=args.jobs)
    sys.stdout.write(format_report(result.report))
    return EXIT_OK


def cmd_eval(args) -> int:
    labels_path = Path(args.labels) if args.labels else Path(args.output_dir or ".") / "labels.jsonl"
    gt_path = Path(args.gt) if args.gt else Path(args.input_dir) / "gt.jsonl"
    labels = io.read_labels(_require(labels_path, "label file"))
    gt = io.read_frames(_require(gt_path, "ground-truth file"))
    report = evaluation_report(labels, gt)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.output_dir:
        Path(args.output_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.output_dir) / "eval.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    data = {}
    if args.spec:
        try:
            data = yaml.safe_load(Path(args.spec).read_text()) or {}
        except OSError as exc:
            raise InputError(f"cannot read scene spec {args.spec}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.spec}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{args.spec}: top level must be a mapping")
    known = {f.name for f in dataclasses.fields(synth.SceneSpec)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown scene spec key(s): {', '.join(unknown)}")
    seed = args.seed if args.seed is not None else int(data.get("rng_seed", 0))
    data["rng_seed"] = seed
    try:
        spec = synth.SceneSpec(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene spec: {exc}") from exc
    truth = synth.generate_scene(spec)
    sets = synth.simulate_round(truth, args.round or 1, seed)
    out = Path(args.output_dir or "synth_out")
    SequenceInputs(sets, truth.poses, truth.clouds, truth.gt).save(out)
    return EXIT_OK


HANDLERS = {
    "fuse": cmd_fuse,
    "track": cmd_track,
    "refine": cmd_refine,
    "label": cmd_label,
    "round": cmd_round,
    "eval": cmd_eval,
    "synth": cmd_synth,
}

HELP = {
    "fuse": "fuse all detection sets into per-frame proposals",
    "track": "run the three tracker streams over fused proposals",
    "refine": "refine confirmed tracks into per-frame boxes",
    "label": "assemble and filter the final pseudo-labels",
    "round": "run fuse, track, refine and label in one go and write a report",
    "eval": "score a label file against ground truth",
    "synth": "generate a synthetic sequence with simulated detector outputs",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autolabel",
        description="Offline 3D pseudo-labeling from detector ensembles. "
                    "Exit codes: 0 success, 2 config violation, 3 input error, 64 unknown subcommand. "
                    "Set AUTOLABEL_LOG=DEBUG|INFO|WARNING for log verbosity.",
    )
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, help=HELP[name], description=HELP[name])
        p.add_argument("--config", help="round config file (YAML); defaults to the built-in schedule for --round")
        p.add_argument("--input-dir", default=".", help="sequence directory with sets/, poses.jsonl, clouds/")
        p.add_argument("--output-dir", help="where artifacts are written (and read back by later stages)")
        p.add_argument("--seed", type=int, help="random seed; the only source of randomness")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for per-frame stages")
        p.add_argument("--round", type=int, help="self-training round index (selects defaults and synthetic detector presets)")
        if name == "synth":
            p.add_argument("--spec", help="scene spec file (YAML mapping of scene fields)")
        if name == "eval":
            p.add_argument("--labels", help="label file to score (default <output-dir>/labels.jsonl)")
            p.add_argument("--gt", help="ground-truth file (default <input-dir>/gt.jsonl)")
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"autolabel: unknown subcommand {argv[0]!r}\n")
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        return EXIT_USAGE
    _setup_logging()
    if args.jobs < 1:
        sys.stderr.write("autolabel: --jobs must be >= 1\n")
        return EXIT_CONFIG
    try:
        return HANDLERS[args.command](args)
    except ConfigError as exc:
        sys.stderr.write(f"autolabel: config error: {exc}\n")
        return EXIT_CONFIG
    except (InputError, OSError) as exc:
        sys.stderr.write(f"autolabel: input error: {exc}\n")
        return EXIT_INPUT


def main() -> None:
    sys.exit(dispatch())
