"""Command line entry point: generate, learn-thresholds, run, render."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .config import RunConfig
from .pipeline import StageError, run_pipeline, write_thresholds
from .records import InputError
from .report import FORMATS, parse, render
from .spc import DEFAULT_TARGETS, NullModelSpec, learn_thresholds
from .synthgen import ScenarioSpec, demo_scenario, generate, null_scenario, null_specs, standard_specs

EXIT_OK, EXIT_INPUT, EXIT_STAGE = 0, 2, 3

PRESETS = {"demo": demo_scenario, "null": null_scenario}


def _starter_config(paths: dict, specs: list[dict], window: dict | None) -> dict:
    doc = {
        "inputs": {k: p.name for k, p in paths.items() if k in ("claims", "enrollment", "kb")},
        "viewpoints": [dict(v, qualification={"min_member_months": 240}) for v in specs],
        "impact": {"w": 0.9, "T": 12},
        "detection": {"flag_tier": "S", "n_sims": 10000},
        "offsets": {"min_confidence": "S"},
        "output_dir": "out",
        "seed": 0,
    }
    if window:
        doc["window"] = window
    return doc


def cmd_generate(args) -> int:
    if args.scenario:
        spec = ScenarioSpec.load(args.scenario)
        specs = standard_specs()
    else:
        kwargs = {} if args.seed is None else {"seed": args.seed}
        spec = PRESETS[args.preset](**kwargs)
        specs = null_specs() if args.preset == "null" else standard_specs()
    if args.seed is not None and args.scenario:
        spec = ScenarioSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    data = generate(spec)
    delimiter = "\t" if args.delimiter == "tab" else ","
    paths = data.write(args.out, delimiter=delimiter)
    window = None
    if spec.periods >= 26:
        window = {"start": spec.start + spec.periods - 25, "end": spec.start + spec.periods - 1}
    with open(Path(args.out) / "run.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(_starter_config(paths, specs, window), fh, sort_keys=False)
    print(f"wrote {len(data.claims)} claims and {len(data.manifest['events'])} manifest events to {args.out}")
    return EXIT_OK


def cmd_learn(args) -> int:
    if args.config:
        cfg = RunConfig.load(args.config)
        window = cfg.window or cfg.horizon
        length = args.series_length or (len(window) - 1 - cfg.impact.T if window else 12)
        null = cfg.detection.null_model or NullModelSpec(series_length=length)
        k, reporting = cfg.detection.drift_k, cfg.detection.reporting
    else:
        null = NullModelSpec(series_length=args.series_length or 12)
        k, reporting = args.k, args.reporting
    targets = dict(zip(("M", "S", "VS"), args.targets)) if args.targets else dict(DEFAULT_TARGETS)
    ts = learn_thresholds(null, k=k, target_far=targets, n_sims=args.n_sims, reporting=reporting, seed=args.seed)
    write_thresholds(args.out, ts, null, args.n_sims, args.seed)
    print(" ".join(f"{t}={ts.up(t):g}" for t in ("M", "S", "VS")))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output_dir = args.out
    if args.format:
        cfg.report.formats = tuple(args.format)
    if args.no_plots:
        cfg.report.plots = False
    result = run_pipeline(cfg)
    counts = result.manifest["counts"]
    print(
        f"{counts['qualified_keys']} keys, {counts['flagged']} flagged, "
        f"{counts['networks']} offset network{'' if counts['networks'] == 1 else 's'}; "
        f"manifest {result.files.get('manifest')}"
    )
    return EXIT_OK


def cmd_render(args) -> int:
    src = Path(args.input)
    if not src.exists():
        raise InputError(f"report not found: {src}")
    fmt_in = "structured" if src.suffix == ".json" else "dsv"
    report = parse(src.read_bytes(), fmt_in, delimiter="\t" if src.suffix == ".tsv" else ",")
    data = render(report, args.format)
    if args.out:
        Path(args.out).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="costwatch", description="Claims cost-driver surveillance")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset with ground truth")
    src = gen.add_mutually_exclusive_group()
    src.add_argument("--scenario", type=Path, help="scenario YAML")
    src.add_argument("--preset", choices=sorted(PRESETS), default="demo")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--delimiter", choices=("comma", "tab"), default="comma")
    gen.set_defaults(func=cmd_generate)

    learn = sub.add_parser("learn-thresholds", help="calibrate CUSUM thresholds by simulation")
    learn.add_argument("--config", type=Path)
    learn.add_argument("--series-length", type=int)
    learn.add_argument("--k", type=float, default=0.5)
    learn.add_argument("--reporting", choices=("end_of_window", "any_time"), default="end_of_window")
    learn.add_argument("--targets", type=float, nargs=3, metavar=("M", "S", "VS"))
    learn.add_argument("--n-sims", type=int, default=10_000)
    learn.add_argument("--seed", type=int, default=0)
    learn.add_argument("--out", type=Path, required=True)
    learn.set_defaults(func=cmd_learn)

    run = sub.add_parser("run", help="run the surveillance pipeline")
    run.add_argument("--config", type=Path, required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", type=Path)
    run.add_argument("--format", choices=FORMATS, action="append")
    run.add_argument("--no-plots", action="store_true")
    run.set_defaults(func=cmd_run)

    ren = sub.add_parser("render", help="re-render a dsv or structured report")
    ren.add_argument("--input", type=Path, required=True)
    ren.add_argument("--format", choices=FORMATS, default="text_table")
    ren.add_argument("--out", type=Path)
    ren.set_defaults(func=cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (InputError, FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: [input] {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - any other failure is a stage failure
        print(f"error: [{args.command}] {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
