#!/usr/bin/env python3
"""
sculptfab command line.

Every fabrication stage is a subcommand reading and writing plain files, so
a run can be reproduced from its report alone.

Exit codes: 0 success, 1 usage error, 2 stage failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from assembly import (
    FASTENER_STYLES,
    RunConfig,
    SplitPlane,
    add_fasteners,
    load_overrides,
    place_bracket,
    plan_for_parts,
    run_pipeline,
    shell,
    split_by_plane,
    stem_length,
    write_report,
)
from blank_gen import generate_blank, generate_bracket, load_blank_spec, parse_circuit_spec
from errors import FabError, SpecInvalid, StageError, spec_invalid_from
from gesture import (
    SensorGeometry,
    TrainConfig,
    WindowDesign,
    check_geometry,
    classify,
    evaluate,
    load_model,
    load_strokes,
    load_templates,
    read_strokes,
    save_model,
    segment,
    synth_corpus,
    train,
    write_strokes,
)
from mesh_core import load_mesh, metrics, repair_basic, save_mesh, validate
from registration import bracket_pose, detect_fiducials, parse_points, pose_from_fiducials, read_points_file
from settings import ToolSettings, load_settings, read_json

logger = logging.getLogger(__name__)

LOG_LEVELS = [logging.WARNING, logging.INFO, logging.DEBUG]

M = TypeVar("M", bound=BaseModel)


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _settings(args) -> ToolSettings:
    return load_settings(args.settings, pitch=args.pitch, seed=args.seed)


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_echo(args, settings: ToolSettings) -> Dict[str, Any]:
    params = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in ("func", "settings", "verbose")
    }
    return {"command": args.command, "arguments": params, "settings": settings.model_dump(mode="json")}


def _report(args, settings: ToolSettings, **sections) -> Dict[str, Any]:
    report = {"config": _config_echo(args, settings), "warnings": []}
    report.update(sections)
    return report


def _mesh_summary(mesh) -> Dict[str, Any]:
    return {"diagnostics": validate(mesh).to_dict(), "metrics": metrics(mesh).to_dict()}


def _observation(args, spec=None, scan=None):
    if getattr(args, "points", None):
        return parse_points(args.points)
    if getattr(args, "fiducials", None):
        return read_points_file(args.fiducials)
    if getattr(args, "detect", False):
        if args.hint is None:
            raise SpecInvalid("--detect needs --hint x y z", field="hint")
        bump = spec.fiducials[0].bump_radius if spec is not None and spec.fiducials else 1.0
        return detect_fiducials(scan, args.hint, args.hint_radius, bump)
    raise SpecInvalid("give --fiducials FILE, --points x1 y1 z1 ... or --detect", field="fiducials")


def _model(cls: Type[M], **values) -> M:
    """Build a pydantic model from command-line values, failing with SpecInvalid."""
    try:
        return cls(**values)
    except ValidationError as e:
        raise spec_invalid_from(e) from e


def _stem(path) -> str:
    return Path(path).stem


# ---------------------------------------------------------------------------
# Fabrication subcommands
# ---------------------------------------------------------------------------


def cmd_blank(args) -> int:
    settings = _settings(args)
    spec = load_blank_spec(args.spec)
    mesh = generate_blank(spec, pitch=settings.pitch)
    out = _out_dir(args)
    name = args.name or f"{_stem(args.spec)}_blank"
    save_mesh(mesh, out / f"{name}.stl")
    write_report(_report(args, settings, blank=_mesh_summary(mesh)), out / f"{name}_report.json")
    print(f"Wrote {out / (name + '.stl')}")
    return 0


def cmd_bracket(args) -> int:
    settings = _settings(args)
    circuit = parse_circuit_spec(read_json(args.spec))
    mesh = generate_bracket(circuit, args.clearance)
    out = _out_dir(args)
    name = args.name or f"{_stem(args.spec)}_bracket"
    save_mesh(mesh, out / f"{name}.stl")
    write_report(_report(args, settings, bracket=_mesh_summary(mesh)), out / f"{name}_report.json")
    print(f"Wrote {out / (name + '.stl')}")
    return 0


def cmd_validate(args) -> int:
    settings = _settings(args)
    mesh = load_mesh(args.mesh)
    sections = {"input": _mesh_summary(mesh)}
    if args.repair:
        mesh = repair_basic(mesh, settings.weld_epsilon, settings.degenerate_area)
        sections["repaired"] = _mesh_summary(mesh)
    out = _out_dir(args)
    name = _stem(args.mesh)
    if args.repair:
        save_mesh(mesh, out / f"{name}_repaired.stl")
    write_report(_report(args, settings, **sections), out / f"{name}_validate.json")
    final = sections.get("repaired", sections["input"])["diagnostics"]
    print(json.dumps(final, indent=2, sort_keys=True))
    return 0


def cmd_shell(args) -> int:
    settings = _settings(args)
    mesh = load_mesh(args.mesh)
    report = _report(args, settings)
    result = shell(mesh, args.thickness, settings, report["warnings"])
    out = _out_dir(args)
    name = f"{_stem(args.mesh)}_shell"
    save_mesh(result, out / f"{name}.stl")
    report["shell"] = _mesh_summary(result)
    write_report(report, out / f"{name}_report.json")
    print(f"Wrote {out / (name + '.stl')}")
    return 0


def cmd_split(args) -> int:
    settings = _settings(args)
    mesh = load_mesh(args.mesh)
    above, below = split_by_plane(mesh, _model(SplitPlane, normal=tuple(args.normal), offset=args.offset))
    out = _out_dir(args)
    name = _stem(args.mesh)
    save_mesh(above, out / f"{name}_above.stl")
    save_mesh(below, out / f"{name}_below.stl")
    write_report(
        _report(args, settings, above=_mesh_summary(above), below=_mesh_summary(below)),
        out / f"{name}_split_report.json",
    )
    print(f"Wrote {name}_above.stl and {name}_below.stl to {out}")
    return 0


def cmd_place(args) -> int:
    settings = _settings(args)
    piece = load_mesh(args.piece)
    spec = load_blank_spec(args.spec)
    observation = _observation(args, spec, piece)
    registration = pose_from_fiducials(observation, spec)
    mount = bracket_pose(registration.transform, spec.circuit)
    bracket = generate_bracket(spec.circuit, args.clearance)
    reach = stem_length(piece, bracket, mount)
    result = place_bracket(piece, bracket, mount, settings)
    out = _out_dir(args)
    name = f"{_stem(args.piece)}_placed"
    save_mesh(result, out / f"{name}.stl")
    write_report(
        _report(
            args,
            settings,
            registration=registration.to_dict(),
            bracket_pose=mount.to_dict(),
            stem_length=reach,
            placed=_mesh_summary(result),
        ),
        out / f"{name}_report.json",
    )
    print(f"Wrote {out / (name + '.stl')}")
    return 0


def cmd_fasten(args) -> int:
    settings = _settings(args)
    part_a = load_mesh(args.part_a)
    part_b = load_mesh(args.part_b)
    overrides = load_overrides(args.overrides)
    if args.style:
        overrides = overrides.model_copy(update={"fastener_style": args.style})
    plane = _model(SplitPlane, normal=tuple(args.normal), offset=args.offset)
    plan = plan_for_parts(part_a, part_b, plane, overrides)
    parts = add_fasteners(part_a, part_b, plan, settings)
    out = _out_dir(args)
    name = args.name or _stem(args.part_a)
    save_mesh(parts.part_a, out / f"{name}_a.stl")
    save_mesh(parts.part_b, out / f"{name}_b.stl")
    write_report(_report(args, settings, plan=plan.to_dict(), parts=parts.report), out / f"{name}_report.json")
    print(f"Wrote {name}_a.stl and {name}_b.stl to {out}")
    return 0


def cmd_pipeline(args) -> int:
    settings = _settings(args)
    scan = load_mesh(args.scan)
    spec = load_blank_spec(args.spec)
    overrides = load_overrides(args.overrides)
    name = args.name or _stem(args.scan)
    observation = _observation(args, spec, scan)
    config = RunConfig(name=name, settings=settings, overrides=overrides)
    parts = run_pipeline(scan, spec, observation, overrides, config, out_dir=_out_dir(args))
    print(f"Wrote {name}_a.stl, {name}_b.stl and {name}_report.json to {args.output_dir}")
    for warning in parts.report["warnings"]:
        print(f"warning: {warning['code']}: {warning['message']}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Gesture subcommands
# ---------------------------------------------------------------------------


def _train_config(args, settings: ToolSettings) -> TrainConfig:
    return _model(
        TrainConfig, hidden=args.hidden, epochs=args.epochs, learning_rate=args.learning_rate, seed=settings.seed
    )


def _corpus(args, settings: ToolSettings):
    if args.strokes and args.corpus != "synth":
        raise SpecInvalid("give either --strokes or --corpus FILE, not both", field="corpus")
    source = args.strokes or (None if args.corpus == "synth" else Path(args.corpus))
    if source is not None:
        return load_strokes(source)
    templates = load_templates(args.templates) if args.templates else None
    strokes = synth_corpus(
        templates,
        n_per_class=args.n_per_class,
        noise_sigma=args.noise,
        seed=settings.seed,
        n_users=args.users,
        device_id=args.device_id,
    )
    return strokes, args.device_id


def cmd_gesture_train(args) -> int:
    settings = _settings(args)
    strokes, device_id = _corpus(args, settings)
    model = train(strokes, _train_config(args, settings), device_id=args.device_id or device_id)
    out = _out_dir(args)
    path = save_model(model, out / args.model_name)
    print(f"Training accuracy {model.metadata['train_accuracy']:.3f}; model written to {path}")
    return 0


def _accuracy_table(result: Dict[str, Any]) -> List[str]:
    pooled = result["pooled"]
    lines = [
        f"{'evaluation':<22}{'mean':>8}{'min':>8}{'max':>8}",
        f"{'pooled 80/20 splits':<22}{pooled['mean']:>8.3f}{pooled['min']:>8.3f}{pooled['max']:>8.3f}",
    ]
    if "leave_one_user_out" in result:
        lou = result["leave_one_user_out"]
        lines.append(f"{'leave one user out':<22}{lou['mean']:>8.3f}{lou['min']:>8.3f}{lou['max']:>8.3f}")
    return lines


def cmd_gesture_eval(args) -> int:
    settings = _settings(args)
    strokes, _ = _corpus(args, settings)
    result = evaluate(strokes, _train_config(args, settings), splits=args.splits, seed=settings.seed)
    out = _out_dir(args)
    write_report(_report(args, settings, evaluation=result), out / "gesture_eval.json")
    print("\n".join(_accuracy_table(result)))
    return 0


def cmd_gesture_classify(args) -> int:
    settings = _settings(args)
    model = load_model(args.model)
    blocks, _, device_id = read_strokes(args.strokes)
    device_id = args.device_id or device_id
    report = _report(args, settings)
    results = []
    for block in blocks:
        for stroke in segment(block, idle_ms=args.idle_ms):
            result = classify(model, stroke, device_id=device_id, warnings=report["warnings"])
            results.append(result.to_dict())
            print(f"{result.label}\t{result.confidence:.3f}")
    report["classifications"] = results
    write_report(report, _out_dir(args) / f"{_stem(args.strokes)}_classified.json")
    return 0


def cmd_gesture_synth(args) -> int:
    settings = _settings(args)
    templates = load_templates(args.templates) if args.templates else None
    strokes = synth_corpus(
        templates,
        n_per_class=args.n_per_class,
        noise_sigma=args.noise,
        seed=settings.seed,
        n_users=args.users,
        device_id=args.device_id,
    )
    path = write_strokes(_out_dir(args) / args.corpus_name, strokes, device_id=args.device_id)
    print(f"Wrote {len(strokes)} strokes to {path}")
    return 0


def cmd_gesture_check(args) -> int:
    settings = _settings(args)
    design = _model(
        WindowDesign,
        hole_diameter=args.hole,
        cover={"present": not args.no_cover, "thickness": args.cover_thickness},
        standoff=args.standoff,
    )
    violations = check_geometry(design, SensorGeometry())
    write_report(
        _report(args, settings, design=design.model_dump(), violations=[v.to_dict() for v in violations]),
        _out_dir(args) / "window_check.json",
    )
    if not violations:
        print("no violations")
    for v in violations:
        print(f"{v.code}: {v.message}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
    common.add_argument("--settings", type=Path, help="JSON file overriding tool settings")
    common.add_argument("--pitch", type=float, help="voxel pitch in mm (default 0.2)")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("-o", "--output-dir", type=Path, default=Path("."), help="output directory")
    return common


def _add_fiducial_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fiducials", type=Path, help="points file: three 'x y z' lines")
    p.add_argument("--points", type=float, nargs=9, metavar="C", help="x1 y1 z1 x2 y2 z2 x3 y3 z3")
    p.add_argument("--detect", action="store_true", help="find the bumps automatically")
    p.add_argument("--hint", type=float, nargs=3, metavar="C", help="search centre for --detect")
    p.add_argument("--hint-radius", type=float, default=20.0, help="search radius for --detect (mm)")


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--strokes", type=Path, help="labelled stroke file (JSON lines)")
    p.add_argument(
        "--corpus", default="synth", metavar="SOURCE", help="'synth' for the built-in corpus or a labelled stroke file"
    )
    p.add_argument("--templates", type=Path, help="JSON template set for the synthetic corpus")
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.15, help="synthetic noise sigma")
    p.add_argument("--users", type=int, default=4, help="synthetic contributors")
    p.add_argument("--device-id", help="sensor device the data belongs to")


def _add_train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hidden", type=int, default=20)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--learning-rate", type=float, default=0.05)


def build_parser() -> ArgumentParser:
    common = _common()
    parser = ArgumentParser(
        prog="sculptfab",
        description="Fabricate hand-sculpted enclosures around embedded circuits",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Print the blank to sculpt around
  %(prog)s blank --spec mouse.json -o out/

  # Scan -> two printable parts
  %(prog)s pipeline --scan egg.stl --spec mouse.json --fiducials f.txt -o out/

  # Gesture classifier accuracy on the synthetic corpus
  %(prog)s gesture eval --corpus synth --seed 7
        """,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("blank", parents=[common], help="generate the circuit blank")
    p.add_argument("--spec", type=Path, required=True, help="BlankSpec or CircuitSpec JSON")
    p.add_argument("--name", help="output base name")
    p.set_defaults(func=cmd_blank)

    p = sub.add_parser("bracket", parents=[common], help="generate the mounting bracket")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--clearance", type=float, default=0.15, help="fit clearance (mm)")
    p.add_argument("--name")
    p.set_defaults(func=cmd_bracket)

    p = sub.add_parser("validate", parents=[common], help="mesh diagnostics")
    p.add_argument("mesh", type=Path)
    p.add_argument("--repair", action="store_true", help="weld, drop degenerates and reorient first")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("shell", parents=[common], help="hollow a watertight scan")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--thickness", type=float, default=3.0)
    p.set_defaults(func=cmd_shell)

    p = sub.add_parser("split", parents=[common], help="clip a solid into two capped halves")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--normal", type=float, nargs=3, required=True, metavar="N")
    p.add_argument("--offset", type=float, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("place", parents=[common], help="fuse the posed bracket to a piece")
    p.add_argument("--piece", type=Path, required=True)
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--clearance", type=float, default=0.15)
    _add_fiducial_args(p)
    p.set_defaults(func=cmd_place)

    p = sub.add_parser("fasten", parents=[common], help="add bosses and cavities to a split pair")
    p.add_argument("--part-a", type=Path, required=True, help="bracket piece (gets the bosses)")
    p.add_argument("--part-b", type=Path, required=True, help="window piece (gets the cavities)")
    p.add_argument("--normal", type=float, nargs=3, required=True, metavar="N")
    p.add_argument("--offset", type=float, required=True)
    p.add_argument("--style", choices=FASTENER_STYLES)
    p.add_argument("--overrides", type=Path, help="plan override JSON")
    p.add_argument("--name")
    p.set_defaults(func=cmd_fasten)

    p = sub.add_parser("pipeline", parents=[common], help="scan to two printable parts")
    p.add_argument("--scan", type=Path, required=True)
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--overrides", type=Path, help="plan override JSON")
    p.add_argument("--name", help="output base name (default: scan file stem)")
    _add_fiducial_args(p)
    p.set_defaults(func=cmd_pipeline)

    gesture = sub.add_parser("gesture", help="stroke capture and classification")
    gsub = gesture.add_subparsers(dest="gesture_command", required=True, metavar="ACTION")

    p = gsub.add_parser("train", parents=[common], help="train a per-device classifier")
    _add_corpus_args(p)
    _add_train_args(p)
    p.add_argument("--model-name", default="gesture_model.json")
    p.set_defaults(func=cmd_gesture_train)

    p = gsub.add_parser("eval", parents=[common], help="held-out accuracy report")
    _add_corpus_args(p)
    _add_train_args(p)
    p.add_argument("--splits", type=int, default=5)
    p.set_defaults(func=cmd_gesture_eval)

    p = gsub.add_parser("classify", parents=[common], help="label strokes in a stream")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--strokes", type=Path, required=True, help="sample stream (JSON lines)")
    p.add_argument("--idle-ms", type=int, default=250)
    p.add_argument("--device-id")
    p.set_defaults(func=cmd_gesture_classify)

    p = gsub.add_parser("synth", parents=[common], help="write a synthetic stroke corpus")
    p.add_argument("--templates", type=Path)
    p.add_argument("--n-per-class", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--users", type=int, default=4)
    p.add_argument("--device-id")
    p.add_argument("--corpus-name", default="corpus.jsonl")
    p.set_defaults(func=cmd_gesture_synth)

    p = gsub.add_parser("check", parents=[common], help="check a sensing window design")
    p.add_argument("--hole", type=float, required=True, help="window diameter (mm)")
    p.add_argument("--cover-thickness", type=float, default=2.0)
    p.add_argument("--no-cover", action="store_true", help="open hole without a cover")
    p.add_argument("--standoff", type=float, default=0.0, help="lens to cover gap (mm)")
    p.set_defaults(func=cmd_gesture_check)

    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=LOG_LEVELS[min(args.verbose, len(LOG_LEVELS) - 1)],
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        stream=sys.stderr,
    )
    if args.command == "gesture":
        args.command = f"gesture {args.gesture_command}"
    stage = args.command

    try:
        return args.func(args)
    except StageError as e:
        print(e.message, file=sys.stderr)
        return 2
    except FabError as e:
        print(f"{stage}: {e.code}: {e.message}", file=sys.stderr)
        return 2
    except ValidationError as e:
        error = spec_invalid_from(e)
        print(f"{stage}: {error.code}: {error.message}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"{stage}: IOError: {e}", file=sys.stderr)
        return 2


def main() -> int:
    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
