"""``tabprior`` command line: prompts, train, eval, analyze, compare, replay.

Exit codes: 0 success, 1 comparison failure or training divergence,
2 usage or input error. Progress goes to stdout as ``key=value`` lines.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .analyze import (
    activation_curves,
    category_marginal,
    monotonicity_flags,
    render_svg,
    write_curves_csv,
    write_marginals_csv,
)
from .data import (
    ENCODINGS,
    DataError,
    apply_standardizer,
    encode_with_layout,
    load_dataset,
    load_schema,
)
from .evaluation import (
    DEFAULT_SHOTS,
    DEFAULT_TOLERANCE,
    ExperimentGrid,
    MissingReferenceError,
    compare_report,
    fit_cell,
    load_grid,
    load_reference,
    load_report,
    run_grid,
)
from .models import (
    DEFAULT_LR,
    KINDS,
    LAMBDA_SCALE,
    MAP_DECAY_SCALE,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
)
from .priors import PriorError, PriorSpec, load_meta, load_prior_file, prompts_for_schema

log = logging.getLogger("tabprior")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def emit(**fields) -> None:
    print(" ".join(f"{k}={_fmt(v)}" for k, v in fields.items()), flush=True)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    s = str(v)
    return json.dumps(s) if (" " in s or not s) else s


# --- manifest -------------------------------------------------------------------


def build_manifest(command: str, args: dict) -> dict:
    """Everything needed to re-run ``command``; the hash covers all of it."""
    body = {
        "command": command,
        "args": dict(sorted(args.items())),
        "schedule": {
            "lambda_scale": dict(LAMBDA_SCALE),
            "map_decay_scale": MAP_DECAY_SCALE,
            "learning_rate": dict(DEFAULT_LR),
        },
        "tool_version": __version__,
    }
    digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]
    return {**body, "config_hash": digest}


def write_manifest(path: Path, command: str, args: dict) -> dict:
    manifest = build_manifest(command, args)
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest


# --- helpers --------------------------------------------------------------------


def _load_inputs(dataset: str, schema: str, priors: str | None):
    table = load_dataset(dataset, schema)
    spec = load_prior_file(priors, table.schema) if priors else PriorSpec()
    return table, spec


def _parse_ints(text: str, name: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise UsageError(f"--{name} expects comma-separated integers, got {text!r}") from None


def _parse_seeds(text: str) -> list[int]:
    """``20`` means seeds 0..19; ``3,5,9`` lists them."""
    vals = _parse_ints(text, "seeds")
    if "," not in text and len(vals) == 1:
        return list(range(vals[0]))
    return vals


def _train_config(args) -> TrainConfig:
    extra = {}
    if getattr(args, "max_epochs", None):
        extra["max_epochs"] = args.max_epochs
    if getattr(args, "map_decay", None) is not None:
        extra["map_decay"] = args.map_decay
    return TrainConfig(**extra)


# --- commands -------------------------------------------------------------------


def cmd_prompts(args) -> int:
    if not Path(args.meta).is_file():
        raise UsageError(f"meta file not found: {args.meta}")
    schema, _ = load_schema(args.schema)
    meta = load_meta(args.meta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prompts = prompts_for_schema(meta, schema)
    for column, text in prompts.items():
        path = out / f"{column}.txt"
        path.write_text(text + "\n", encoding="utf-8")
        emit(prompt=column, file=path)
    write_manifest(out / "manifest.json", "prompts", vars_of(args))
    emit(status="ok", prompts=len(prompts))
    return EXIT_OK


def cmd_train(args) -> int:
    table, spec = _load_inputs(args.dataset, args.schema, args.priors)
    fc = fit_cell(
        table, spec, args.method, args.encoding, args.shots, args.seed, args.base_seed,
        _train_config(args), args.tune_lr,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fc.state.fit_info.update({"shots": args.shots, "seed": args.seed, "test_auc": fc.auc})
    save_checkpoint(fc.state, out)
    write_manifest(out.with_suffix(".manifest.json"), "train", vars_of(args))
    info = fc.state.fit_info
    emit(
        method=args.method, encoding=args.encoding, shots=args.shots, seed=args.seed,
        lam=info["lam"], epochs=info["epochs"], loss=info["loss"], test_auc=fc.auc,
        checkpoint=out,
    )
    return EXIT_OK


def _grid_from_args(args) -> ExperimentGrid:
    if args.grid:
        grid = load_grid(args.grid)
        if args.seeds:
            grid.seeds = tuple(_parse_seeds(args.seeds))
        return grid
    if not (args.dataset and args.schema):
        raise UsageError("eval needs --grid or both --dataset and --schema")
    methods = args.method or ["lr"]
    encodings = args.encoding or ["raw"]
    return ExperimentGrid(
        dataset_id=args.dataset_id or Path(args.dataset).stem,
        dataset=args.dataset,
        schema=args.schema,
        priors=args.priors,
        methods=methods,
        encodings=encodings,
        shots=_parse_ints(args.shots, "shots") if args.shots else DEFAULT_SHOTS,
        seeds=_parse_seeds(args.seeds) if args.seeds else list(range(20)),
        base_seed=args.base_seed,
        tune_lr=args.tune_lr,
        train=_train_config(args).to_json(),
    )


def cmd_eval(args) -> int:
    grid = _grid_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_grid(grid, threads=args.threads)
    report.save(out / "report.json")
    report.write_csv(out / "report.csv")
    write_manifest(out / "manifest.json", "eval", {**vars_of(args), "grid_config": grid.to_json()})
    failed = 0
    for c in report.cells:
        failed += len(c.failures)
        emit(
            method=c.method, encoding=c.encoding, shots=c.shots,
            auc_mean=c.auc_mean if c.auc_mean is not None else "nan",
            auc_std=c.auc_std if c.auc_std is not None else "nan",
            seeds=len(c.aucs), failures=len(c.failures),
        )
    emit(status="ok" if not failed else "partial", report=out / "report.json", failed_runs=failed)
    return EXIT_OK if not failed else EXIT_FAIL


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.checkpoint)
    table = load_dataset(args.dataset, args.schema)
    matrix = encode_with_layout(table, state.columns)
    if state.stats is not None:
        matrix = apply_standardizer(matrix, state.stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves = activation_curves(state, matrix)
    write_curves_csv(curves, out / "curves.csv")
    marginals = {
        c.name: category_marginal(table, c.name) for c in table.schema if c.is_categorical
    }
    write_marginals_csv(marginals.values(), out / "marginals.csv")
    flags = monotonicity_flags(state, matrix)
    (out / "flags.json").write_text(
        json.dumps({k: f.to_json() for k, f in flags.items()}, indent=1), encoding="utf-8"
    )
    if args.svg:
        sources = {c.name: c.source for c in state.columns}
        for curve in curves:
            render_svg(curve, out / f"{curve.column}.svg", marginals.get(sources[curve.column]))
    for name, f in flags.items():
        emit(column=name, status=f.status, flat=f.flat, extremum=f.extremum_kind or "-",
             at=f.extremum_label or "-")
    write_manifest(out / "manifest.json", "analyze", vars_of(args))
    emit(status="ok", curves=out / "curves.csv", marginals=out / "marginals.csv")
    return EXIT_OK


def cmd_compare(args) -> int:
    report = load_report(args.report)
    reference = load_reference(args.reference)
    try:
        rows = compare_report(report, reference, args.tolerance)
    except MissingReferenceError as exc:
        raise UsageError(str(exc.args[0])) from None
    bad = 0
    for r in rows:
        bad += not r.passed
        emit(cell=r.key, shots=r.shots, mean=r.mean if r.mean is not None else "nan",
             reference=r.reference, diff=r.diff, result="pass" if r.passed else "FAIL")
    emit(status="pass" if not bad else "fail", failed_cells=bad, tolerance=args.tolerance)
    return EXIT_OK if not bad else EXIT_FAIL


def cmd_replay(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    try:
        command, saved = manifest["command"], dict(manifest["args"])
    except (KeyError, TypeError):
        raise UsageError(f"{args.manifest} is not a run manifest") from None
    saved.pop("grid_config", None)
    saved["command"] = command
    saved["threads"] = args.threads
    if args.out:
        saved["out"] = args.out
    return COMMANDS[command](argparse.Namespace(**saved))


COMMANDS = {
    "prompts": cmd_prompts,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "replay": cmd_replay,
}


PATH_ARGS = ("dataset", "schema", "priors", "meta", "out", "checkpoint", "grid", "report", "reference")


def vars_of(args) -> dict:
    """Namespace as a dict with path arguments made absolute."""
    out = {}
    for k, v in vars(args).items():
        if k == "verbose":
            continue
        out[k] = str(Path(v).resolve()) if k in PATH_ARGS and v else v
    return out


# --- parser ---------------------------------------------------------------------


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabprior", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=_positive, default=1, help="worker processes for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, required=True):
        sp.add_argument("--dataset", required=required, help="CSV file")
        sp.add_argument("--schema", required=required, help="schema JSON")

    def fit_args(sp):
        sp.add_argument("--priors", help="prior JSON (omit for no priors)")
        sp.add_argument("--base-seed", type=int, default=0)
        sp.add_argument("--tune-lr", action="store_true", help="grid-search the LR ridge strength")
        sp.add_argument("--max-epochs", type=_positive)
        sp.add_argument("--map-decay", type=float, help="first-layer weight decay of the maps")

    sp = sub.add_parser("prompts", help="write LLM prompt text files")
    sp.add_argument("--schema", required=True)
    sp.add_argument("--meta", required=True, help="dataset meta JSON")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("train", help="fit one model on one shot split")
    data_args(sp)
    fit_args(sp)
    sp.add_argument("--method", required=True, choices=KINDS)
    sp.add_argument("--encoding", default="ordered", choices=ENCODINGS)
    sp.add_argument("--shots", type=_positive, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = sub.add_parser("eval", help="run an experiment grid")
    sp.add_argument("--grid", help="grid JSON (overrides the data/method flags)")
    data_args(sp, required=False)
    fit_args(sp)
    sp.add_argument("--dataset-id", help="name used for reference lookups")
    sp.add_argument("--method", action="append", choices=KINDS)
    sp.add_argument("--encoding", action="append", choices=ENCODINGS)
    sp.add_argument("--shots", help="comma-separated shot counts")
    sp.add_argument("--seeds", help="seed count (N -> 0..N-1) or comma list")
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("analyze", help="activation curves, marginals and flags")
    sp.add_argument("--checkpoint", required=True)
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--svg", action="store_true")

    sp = sub.add_parser("compare", help="check a report against reference tables")
    sp.add_argument("--report", required=True)
    sp.add_argument("--reference", help="reference JSON (default: bundled tables)")
    sp.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)

    sp = sub.add_parser("replay", help="re-run a command from its manifest")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", help="write outputs here instead of the recorded path")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except TrainingDivergedError as exc:
        emit(status="diverged", error=str(exc))
        return EXIT_FAIL
    except (UsageError, DataError, PriorError, FileNotFoundError, json.JSONDecodeError,
            KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
