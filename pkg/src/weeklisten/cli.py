"""Command-line pipeline driver.

Subcommands mirror the stages: ``synth``, ``ingest``, ``signals``, ``learn``,
``embed``, ``eval``, ``export-atoms`` and ``pipeline`` (all stages in order,
through the same file-based handoffs a staged run would use, so both produce
byte-identical artifacts).

All randomness flows from one ``--seed``: each stage derives its own seed as
``SeedSequence(entropy=seed, spawn_key=(STAGE_ID,))``, so running a stage
standalone with the base seed reproduces exactly what ``pipeline`` did.
Every successful run writes a ``manifest_<command>.json`` next to its outputs
with the resolved configuration, paths, seed, version and wall-clock duration
(the manifest is the only artifact carrying timing, hence the only one that
differs between byte-identical runs).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, dictionary, evaluate, ingest, signals, storage, synth
from .errors import PipelineError

STAGE_IDS = {"synth": 0, "split": 1, "learn": 2, "eval": 3}


def stage_seed(base_seed: int, stage: str) -> int:
    """Per-stage seed derived from the base seed (documented, reproducible)."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(STAGE_IDS[stage],))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: dict, outputs: dict, started: float) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    manifest = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "config": {k: (str(v) if isinstance(v, Path) else v) for k, v in config.items()},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "duration_secs": round(time.monotonic() - started, 3),
    }
    path = out_dir / f"manifest_{command.replace('-', '_')}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_period(args, valid_log) -> ingest.StudyPeriod:
    if args.period_start is not None and args.period_end is not None:
        return ingest.StudyPeriod(args.period_start, args.period_end)
    if (args.period_start is None) != (args.period_end is None):
        raise PipelineError("--period-start and --period-end must be given together")
    return ingest.StudyPeriod.covering(valid_log)


def _load_filtered(args):
    """Shared ingest front end: parse, duration-filter, activity-filter, profile."""
    log, report = ingest.parse_events(args.events)
    favorites = ingest.parse_favorites(args.favorites) if args.favorites else []
    valid = ingest.filter_valid_streams(log, args.min_listen_secs)
    period = _resolve_period(args, valid)
    active = ingest.filter_active_users(valid, period, args.min_daily_streams)
    restricted = ingest.restrict_to_users(valid, active)
    profiles = ingest.build_profiles(restricted, favorites)
    return restricted, profiles, period, active, report


def _synth_config(args) -> synth.SynthConfig:
    return synth.SynthConfig(
        n_users=args.users, weeks=args.weeks, seed=stage_seed(args.seed, "synth"),
        noise=args.noise, organic_rate=args.organic_rate,
        archetypes=synth.load_archetypes(args.archetypes) if args.archetypes else None,
    )


def cmd_synth(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    config = _synth_config(args)
    result = synth.generate(config, out)
    print(f"generated {result.n_events} events for {result.n_users} users "
          f"({result.n_valid_events} valid, organic fraction {result.organic_fraction_valid:.4f})")
    print(f"study period: [{config.period_start}, {config.period_end})")
    _write_manifest(out, "synth", args, {}, {
        "events": result.events_path, "favorites": result.favorites_path,
        "labels": result.labels_path,
    }, started)
    return 0


def cmd_ingest(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    restricted, profiles, period, active, report = _load_filtered(args)
    print(report.summary())
    print(f"{len(active)} active users over {period.days:g} days")
    if profiles.unknown_user_warnings:
        print(f"warning: {profiles.unknown_user_warnings} favorites referenced unknown users")
    summary_path = out / "user_summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("user_id,total_valid_streams,active_days,distinct_tracks,liked_tracks\n")
        for user in active:
            p = profiles[user]
            fh.write(f"{user},{p.total_valid_streams},{p.active_days},"
                     f"{len(p.play_count_per_track)},{len(p.liked_tracks)}\n")
    _write_manifest(out, "ingest", args,
                    {"events": args.events, "favorites": args.favorites or ""},
                    {"user_summary": summary_path}, started)
    return 0


def cmd_signals(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    restricted, profiles, period, active, _ = _load_filtered(args)
    sset = signals.build_signal_set(profiles, restricted, period, args.tz_offset_min)
    index_path = out / "signal_users.txt"
    matrix_path = out / storage.matrix_filename("signals", args.matrix_format)
    signals.save_signal_set(sset, index_path, matrix_path, args.matrix_format)
    print(f"built {len(sset.user_ids)} signals of {sset.matrix.shape[1]} columns")
    _write_manifest(out, "signals", args,
                    {"events": args.events, "favorites": args.favorites or ""},
                    {"signal_users": index_path, "signals": matrix_path}, started)
    return 0


def cmd_learn(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    sset = signals.load_signal_set(args.signal_users, args.signals)
    train_users, test_users = evaluate.split_users(
        sset.user_ids, args.test_frac, stage_seed(args.seed, "split"))
    train_rows = np.array([u in set(train_users) for u in sset.user_ids])
    config = dictionary.LearnConfig(
        n_atoms=args.atoms, lam=args.lam, outer_iters=args.outer_iters,
        lasso_tol=args.lasso_tol, lasso_max_sweeps=args.lasso_max_sweeps,
        seed=stage_seed(args.seed, "learn"))
    result = dictionary.learn(sset.matrix[train_rows], config)

    csv_path = out / "dictionary.csv"
    bin_path = out / "dictionary.bin"
    dictionary.save_dictionary_csv(result.dictionary, csv_path)
    dictionary.save_dictionary_binary(result.dictionary, bin_path)
    storage.save_index(train_users, out / "train_users.txt")
    storage.save_index(test_users, out / "test_users.txt")
    trace_path = out / "objective_trace.csv"
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write("half_step,objective\n")
        fh.writelines(f"{i},{v!r}\n" for i, v in enumerate(result.objective_trace))
    print(f"learned {config.n_atoms} atoms on {int(train_rows.sum())} train users; "
          f"objective {result.objective_trace[0]:.4f} -> {result.objective_trace[-1]:.4f}")
    _write_manifest(out, "learn", args,
                    {"signal_users": args.signal_users, "signals": args.signals},
                    {"dictionary_csv": csv_path, "dictionary_bin": bin_path,
                     "train_users": out / "train_users.txt", "test_users": out / "test_users.txt",
                     "objective_trace": trace_path}, started)
    return 0


def cmd_embed(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    sset = signals.load_signal_set(args.signal_users, args.signals)
    dct = dictionary.load_dictionary_csv(args.dictionary)
    lam = args.lam if args.lam is not None else dct.lam
    embeddings = dictionary.embed(sset, dct, lam, args.lasso_tol, args.lasso_max_sweeps)
    users, codes = dictionary.embeddings_matrix(embeddings)
    index_path = out / "code_users.txt"
    matrix_path = out / storage.matrix_filename("codes", args.matrix_format)
    dictionary.save_codes(users, codes, index_path, matrix_path, args.matrix_format)
    nonzero = float(np.mean(np.sum(codes != 0, axis=1)))
    print(f"embedded {len(users)} users; mean active atoms per code {nonzero:.2f}")
    _write_manifest(out, "embed", args,
                    {"signal_users": args.signal_users, "signals": args.signals,
                     "dictionary": args.dictionary},
                    {"code_users": index_path, "codes": matrix_path}, started)
    return 0


def _read_summary_totals(path) -> dict[str, int]:
    totals = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        try:
            u_col = header.index("user_id")
            t_col = header.index("total_valid_streams")
        except ValueError:
            raise PipelineError(f"{path} is not a user summary (header {header})") from None
        for line in fh:
            if line.strip():
                row = line.rstrip("\n").split(",")
                totals[row[u_col]] = int(row[t_col])
    return totals


def cmd_eval(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    users, codes = dictionary.load_codes(args.code_users, args.codes)
    labels = evaluate.parse_labels(args.labels)
    totals = _read_summary_totals(args.summary)
    embeddings = [dictionary.Embedding(u, codes[i]) for i, u in enumerate(users)]
    split = evaluate.split_users(users, args.test_frac, stage_seed(args.seed, "split"))
    config = evaluate.EvalConfig(l2_grid=tuple(args.l2_grid), cv_folds=args.cv_folds,
                                 seed=stage_seed(args.seed, "eval"))
    report = evaluate.evaluate_all(embeddings, labels, totals, split, config)

    report_path = out / "eval_report.csv"
    table_path = out / "eval_table.txt"
    coef_path = out / "coefficients.csv"
    report.to_csv(report_path)
    table_path.write_text(report.to_table(), encoding="utf-8")
    evaluate.write_coefficients_csv(report.coefficients, coef_path)
    print(report.to_table(), end="")
    _write_manifest(out, "eval", args,
                    {"code_users": args.code_users, "codes": args.codes,
                     "labels": args.labels, "summary": args.summary},
                    {"report": report_path, "table": table_path, "coefficients": coef_path},
                    started)
    return 0


def cmd_export_atoms(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    dct = dictionary.load_dictionary_csv(args.dictionary)
    atoms_path = out / "atoms.csv"
    dictionary.export_atoms_csv(dct, atoms_path)
    print(f"exported {dct.n_atoms} atoms to {atoms_path}")
    _write_manifest(out, "export-atoms", args, {"dictionary": args.dictionary},
                    {"atoms": atoms_path}, started)
    return 0


def cmd_pipeline(args) -> int:
    started = time.monotonic()
    out = _out_dir(args)
    config = _synth_config(args)

    rc = cmd_synth(_ns(args, out=out))
    if rc:
        return rc
    stage_args = _ns(
        args, out=out, events=out / "events.csv", favorites=out / "favorites.csv",
        period_start=config.period_start, period_end=config.period_end)
    for cmd in (cmd_ingest, cmd_signals):
        rc = cmd(stage_args)
        if rc:
            return rc
    learn_args = _ns(stage_args, signal_users=out / "signal_users.txt",
                     signals=out / storage.matrix_filename("signals", args.matrix_format))
    rc = cmd_learn(learn_args)
    if rc:
        return rc
    embed_args = _ns(learn_args, dictionary=out / "dictionary.csv", lam=None)
    rc = cmd_embed(embed_args)
    if rc:
        return rc
    eval_args = _ns(embed_args, code_users=out / "code_users.txt",
                    codes=out / storage.matrix_filename("codes", args.matrix_format),
                    labels=out / "labels.csv", summary=out / "user_summary.csv")
    rc = cmd_eval(eval_args)
    if rc:
        return rc
    rc = cmd_export_atoms(_ns(eval_args, dictionary=out / "dictionary.csv"))
    if rc:
        return rc
    _write_manifest(out, "pipeline", args, {}, {"directory": out}, started)
    print(f"pipeline finished in {time.monotonic() - started:.1f}s")
    return 0


def _ns(base: argparse.Namespace, **overrides) -> argparse.Namespace:
    ns = argparse.Namespace(**vars(base))
    for key, value in overrides.items():
        setattr(ns, key, value)
    return ns


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=".", help="output directory (default: current)")
    p.add_argument("--seed", type=int, default=0, help="base seed; stages derive their own")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; stage outputs are identical for any value")


def _add_filter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--events", required=True, help="events CSV")
    p.add_argument("--favorites", default=None, help="favorites CSV")
    p.add_argument("--min-listen-secs", type=int, default=ingest.MIN_LISTEN_SECS,
                   help="validity cutoff in seconds (default 30)")
    p.add_argument("--min-daily-streams", type=float, default=ingest.MIN_DAILY_STREAMS,
                   help="activity cutoff in valid streams per day (default 6)")
    p.add_argument("--period-start", type=int, default=None, help="study period start (epoch secs)")
    p.add_argument("--period-end", type=int, default=None, help="study period end (epoch secs)")


def _add_synth_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--users", type=int, default=5000, help="number of synthetic users")
    p.add_argument("--weeks", type=int, default=12, help="number of weeks")
    p.add_argument("--noise", type=float, default=0.35, help="noise level in [0, 1]")
    p.add_argument("--organic-rate", type=float, default=0.80,
                   help="population organic stream fraction target")
    p.add_argument("--archetypes", default=None, help="archetype JSON config (default: built-ins)")


def _add_learn_flags(p: argparse.ArgumentParser, lam_default) -> None:
    p.add_argument("--atoms", type=int, default=32, help="number of atoms K (default 32)")
    p.add_argument("--lambda", dest="lam", type=float, default=lam_default,
                   help="L1 sparsity weight (default 1.0)")
    p.add_argument("--outer-iters", type=int, default=100, help="alternation rounds (default 100)")
    p.add_argument("--lasso-tol", type=float, default=1e-8, help="coordinate-change tolerance")
    p.add_argument("--lasso-max-sweeps", type=int, default=1000, help="sweep cap per coding pass")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--test-frac", type=float, default=0.33,
                   help="held-out user fraction (default 0.33)")
    p.add_argument("--l2-grid", type=float, nargs="+", default=list(evaluate.DEFAULT_L2_GRID),
                   help="l2 strengths searched by CV")
    p.add_argument("--cv-folds", type=int, default=5, help="grid-search folds (default 5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weeklisten",
        description="Weekly listening-pattern embeddings: synthesize logs, build signals, "
                    "learn atoms, embed users, evaluate activity prediction.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    _add_synth_flags(p)

    p = sub.add_parser("ingest", help="parse and filter logs into a user summary")
    _add_common(p)
    _add_filter_flags(p)

    p = sub.add_parser("signals", help="build the normalized weekly signal matrix")
    _add_common(p)
    _add_filter_flags(p)
    p.add_argument("--tz-offset-min", type=int, default=0,
                   help="default local-time offset for events without one")
    p.add_argument("--matrix-format", choices=("npy", "csv"), default="npy")

    p = sub.add_parser("learn", help="learn the atom dictionary on the train split")
    _add_common(p)
    p.add_argument("--signal-users", required=True, help="signal user index file")
    p.add_argument("--signals", required=True, help="signal matrix file")
    _add_learn_flags(p, lam_default=1.0)
    p.add_argument("--test-frac", type=float, default=0.33,
                   help="held-out user fraction excluded from learning")

    p = sub.add_parser("embed", help="code users against a fixed dictionary")
    _add_common(p)
    p.add_argument("--signal-users", required=True)
    p.add_argument("--signals", required=True)
    p.add_argument("--dictionary", required=True, help="dictionary CSV")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="override the dictionary's training lambda")
    p.add_argument("--lasso-tol", type=float, default=1e-8)
    p.add_argument("--lasso-max-sweeps", type=int, default=1000)
    p.add_argument("--matrix-format", choices=("npy", "csv"), default="npy")

    p = sub.add_parser("eval", help="activity-prediction evaluation report")
    _add_common(p)
    p.add_argument("--code-users", required=True, help="code user index file")
    p.add_argument("--codes", required=True, help="code matrix file")
    p.add_argument("--labels", required=True, help="labels CSV")
    p.add_argument("--summary", required=True, help="user summary CSV from ingest")
    _add_eval_flags(p)

    p = sub.add_parser("export-atoms", help="dictionary to long-format plotting CSV")
    _add_common(p)
    p.add_argument("--dictionary", required=True, help="dictionary CSV")

    p = sub.add_parser("pipeline", help="run every stage with one seed")
    _add_common(p)
    _add_synth_flags(p)
    p.add_argument("--min-listen-secs", type=int, default=ingest.MIN_LISTEN_SECS)
    p.add_argument("--min-daily-streams", type=float, default=ingest.MIN_DAILY_STREAMS)
    p.add_argument("--tz-offset-min", type=int, default=0)
    p.add_argument("--matrix-format", choices=("npy", "csv"), default="npy")
    _add_learn_flags(p, lam_default=1.0)
    _add_eval_flags(p)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "signals": cmd_signals,
    "learn": cmd_learn,
    "embed": cmd_embed,
    "eval": cmd_eval,
    "export-atoms": cmd_export_atoms,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    try:
        return COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
