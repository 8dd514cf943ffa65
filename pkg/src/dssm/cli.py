"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import diffcore as dc
from .data import (
    EventRecord,
    IngestError,
    PreprocessStats,
    preprocess,
    read_cohort,
    read_events,
    read_harmonization_map,
    read_raw,
    split_of,
    step_index,
    write_cohort,
)
from .metrics import UndefinedMetricError
from .survival import write_trajectory_csv
from .synthcohort import GroundTruth, simulate_cohort, write_simulation
from .trainer import (
    CheckpointError,
    NumericalError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict,
    read_predictions,
    save_checkpoint,
    train,
    write_loss_log,
    write_metrics,
    write_predictions,
)

log = logging.getLogger("dssm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _hours_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    """One ``--field-name`` flag per TrainConfig field; unset flags defer to the config file."""
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        meta = f.name.upper()
        if isinstance(f.default, bool):
            p.add_argument(flag, dest=f"cfg_{f.name}", type=_bool, nargs="?", const=True,
                           default=None, metavar=meta)
        else:
            p.add_argument(flag, dest=f"cfg_{f.name}", type=type(f.default), default=None, metavar=meta)
    p.add_argument("--lr", dest="cfg_learning_rate", type=float, default=None, metavar="LEARNING_RATE")


def _resolve_config(args, base: dict | None = None) -> TrainConfig:
    """Precedence: flags > config file > ``base`` (a resumed checkpoint) > defaults."""
    values: dict = dict(base or {})
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config, encoding="utf-8"):
            raise FileNotFoundError(args.config)
        if cp.has_section("train"):
            values.update(dict(cp.items("train")))
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f"cfg_{f.name}", None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    return TrainConfig.from_dict(values)


def _write_snapshot(path: Path, command: str, sections: dict[str, dict]) -> None:
    cp = configparser.ConfigParser()
    cp["run"] = {"command": command}
    for name, d in sections.items():
        cp[name] = {k: json.dumps(v) if isinstance(v, (list, dict)) else str(v) for k, v in d.items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        cp.write(fh)


def _snapshot_for_file(out: Path) -> Path:
    return out.with_name(out.name + ".config.ini")


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func",) and v is not None
            and not k.startswith("cfg_")}


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    events = tuple(e for e in args.events.split(",") if e)
    shared = tuple(e for e in (args.shared or "").split(",") if e)
    gt = GroundTruth.random(
        seed=args.seed, latent_dim=args.latent, obs_dim=args.obs,
        intervention_dim=args.interventions, events=events, shared=shared, t_max=args.tmax,
        early_censor_prob=args.early_censor, step_hours=args.step_hours,
    )
    patients = simulate_cohort(gt, args.patients, seed=args.seed)
    out = Path(args.out)
    paths = write_simulation(out, gt, patients)
    _write_snapshot(out / "resolved_config.ini", "simulate", {"simulate": _args_dict(args)})
    print(json.dumps(paths))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    raw = read_raw(args.raw)
    events = read_events(args.events)
    mapping = read_harmonization_map(args.map) if args.map else None
    stats = PreprocessStats.load(args.stats_in) if args.stats_in else None
    trajs, stats = preprocess(raw, events, mapping, args.step_hours, stats, strict=not args.drop_unknown)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(out, trajs)
    if args.stats_out:
        stats.save(args.stats_out)
    _write_snapshot(_snapshot_for_file(out), "preprocess", {"preprocess": _args_dict(args)})
    print(f"wrote {len(trajs)} patients to {out}")
    return EXIT_OK


def _select(cohort, split: str):
    if split == "all":
        return cohort
    return [tr for tr in cohort if split_of(tr.patient_id) == split]


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    config = _resolve_config(args, resume.model.config.to_dict() if resume else None)
    if resume is not None:
        resume.model.config = config
    cohort = read_cohort(args.cohort)
    train_set = _select(cohort, args.split)
    eval_set = _select(cohort, "eval") if args.split == "train" else []
    if not train_set:
        raise IngestError(f"no patients in split {args.split!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(config, train_set, eval_set or None, resume=resume,
                   progress=lambda r: log.info("epoch %d train total %.4f", r["epoch"], r["total"]))
    save_checkpoint(out / "checkpoint.ckpt", result)
    write_loss_log(out / "loss_log.csv", result.loss_log)
    _write_snapshot(out / "resolved_config.ini", "train",
                    {"train": config.to_dict(), "inputs": _args_dict(args)})
    print(f"trained on {len(train_set)} patients; checkpoint at {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    result = load_checkpoint(args.checkpoint)
    model = result.model
    cohort = _select(read_cohort(args.cohort), args.split)
    preds, skipped = predict(model, cohort, args.tstar_hours, args.horizon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, preds, model.schema.step_hours)
    if skipped:
        log.warning("skipped %d patients whose record ends before t*: %s", len(skipped),
                    ", ".join(skipped[:10]) + (" ..." if len(skipped) > 10 else ""))
    _write_snapshot(_snapshot_for_file(out), "predict",
                    {"predict": _args_dict(args), "skipped": {"count": len(skipped)}})
    print(f"wrote {len(preds)} predictions to {out} ({len(skipped)} skipped)")
    return EXIT_OK


def _load_event_records(path: str, step_hours: float) -> dict[str, dict[str, EventRecord]]:
    if path.endswith(".jsonl") or path.endswith(".json"):
        return {tr.patient_id: tr.events for tr in read_cohort(path)}
    df = read_events(path)
    out: dict[str, dict[str, EventRecord]] = {}
    for pid, name, hours, cens in df[["patient_id", "event", "time_hours", "censored"]].itertuples(index=False):
        out.setdefault(str(pid), {})[name] = EventRecord(int(step_index(hours, step_hours)), int(cens))
    return out


def cmd_evaluate(args) -> int:
    preds, step_hours = read_predictions(args.predictions)
    events = _load_event_records(args.events, step_hours)
    windows = [max(1, int(round(h / step_hours))) for h in args.windows]
    cwin = int(round(args.cindex_window_hours / step_hours)) if args.cindex_window_hours else None
    rows = evaluate(preds, events, windows, cwin)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(out, rows, step_hours)
    _write_snapshot(_snapshot_for_file(out), "evaluate", {"evaluate": _args_dict(args)})
    for r in rows:
        value = "absent (" + r.note + ")" if r.value is None else f"{r.value:.4f}"
        print(f"{r.metric:18s} {r.event:16s} {r.window:>4s} {value}")
    return EXIT_OK


def cmd_export(args) -> int:
    preds, step_hours = read_predictions(args.predictions)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ((p.patient_id, p.trajectory(e)) for p in preds for e in p.hazards)
    write_trajectory_csv(out, rows, step_hours)
    _write_snapshot(_snapshot_for_file(out), "export-trajectories", {"export": _args_dict(args)})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dssm", description="State-space hazard model for correlated time-to-event prediction.")
    p.add_argument("--log-level", default="WARNING")
    p.add_argument("--threads", type=int, default=1, help="reserved; runs are single-threaded")
    p.add_argument("--debug-finite", action="store_true", help="check every op for NaN/Inf")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="write a synthetic cohort with oracle hazards")
    s.add_argument("--patients", type=int, default=1000)
    s.add_argument("--tmax", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--latent", type=int, default=2)
    s.add_argument("--obs", type=int, default=6)
    s.add_argument("--interventions", type=int, default=2)
    s.add_argument("--events", default="event_a,event_b,event_c")
    s.add_argument("--shared", default="", help="comma list of events given identical hazards")
    s.add_argument("--early-censor", type=float, default=0.3)
    s.add_argument("--step-hours", type=float, default=12.0)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="raw CSV records -> tensorized cohort")
    s.add_argument("--raw", required=True)
    s.add_argument("--events", required=True)
    s.add_argument("--map")
    s.add_argument("--stats-in", help="reuse training statistics instead of computing them")
    s.add_argument("--stats-out")
    s.add_argument("--out", required=True)
    s.add_argument("--step-hours", type=float, default=12.0)
    s.add_argument("--drop-unknown", action="store_true", help="drop unmapped codes instead of failing")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="fit the model")
    s.add_argument("--cohort", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--split", choices=["train", "all"], default="train")
    s.add_argument("--resume", help="continue from this checkpoint up to --epochs")
    _add_train_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="roll out hazard trajectories from t*")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--cohort", required=True)
    s.add_argument("--tstar-hours", type=float, required=True)
    s.add_argument("--horizon", type=int)
    s.add_argument("--split", choices=["all", "train", "eval", "test"], default="all")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="C-index and windowed AUC/AP")
    s.add_argument("--predictions", required=True)
    s.add_argument("--events", required=True, help="events CSV or tensorized cohort JSONL")
    s.add_argument("--windows", type=_hours_list, default=[24.0, 48.0], help="hours, comma separated")
    s.add_argument("--cindex-window-hours", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("export-trajectories", help="plot-ready hazard/survival CSV")
    s.add_argument("--predictions", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    dc.set_debug(args.debug_finite)
    try:
        return args.func(args)
    except (NumericalError, dc.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, CheckpointError, UndefinedMetricError, FileNotFoundError, KeyError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
