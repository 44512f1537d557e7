"""``hfine <command> --config FILE --out DIR [--seed N] [--threads N]``.

Exit codes: 0 success, 2 configuration error, 3 solver error, 4 failed
validation.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import __version__
from .commands import COMMANDS
from .config import load_config
from .csvio import Column, Table, append_manifest, run_id, write_table
from .errors import ConfigError, HfineError
from .validation import validate_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VALIDATION = 4

ALL_COMMANDS = tuple(COMMANDS) + ("validate",)


def build_parser():
    parser = argparse.ArgumentParser(prog="hfine", description="Nuclear spin dynamics under optical pumping of an NV electron.")
    parser.add_argument("--version", action="version", version=f"hfine {__version__}")
    parser.add_argument("command", choices=ALL_COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="scenario TOML file")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override run.seed")
    parser.add_argument("--threads", type=int, default=None, help="override run.threads")
    return parser


def _validation_table(results):
    return Table("validation", (
        Column("check", "-", "check name"),
        Column("passed", "1", "1 if within tolerance"),
        Column("value", "-", "measured deviation"),
        Column("tolerance", "-", "largest accepted deviation"),
        Column("detail", "-", "what was measured (commas replaced by semicolons)"),
    ), [(r.name, int(r.passed), r.value, r.tolerance, r.detail.replace(",", ";").replace("\n", " "))
        for r in results])


def run(command, config_path, out_dir, seed=None, threads=None):
    """Execute one command and write its CSVs plus a manifest line; returns the exit code."""
    cfg = load_config(config_path)
    run_section = cfg.run.model_copy(update={
        "seed": cfg.run.seed if seed is None else seed,
        "threads": cfg.run.threads if threads is None else threads,
    })
    if run_section.threads < 1:
        raise ConfigError("--threads must be >= 1")
    cfg = cfg.model_copy(update={"run": run_section})
    digest = cfg.digest()
    started = time.perf_counter()
    code = EXIT_OK
    if command == "validate":
        results = validate_config(cfg, run_section.seed, run_section.threads)
        tables = (_validation_table(results),)
        code = EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION
        for r in results:
            mark = "PASS" if r.passed else "FAIL"
            print(f"{mark} {r.name}: {r.value:.3g} (tol {r.tolerance:.3g}) {r.detail}")
    elif command == "narrowing":
        tables = COMMANDS[command](cfg, seed=run_section.seed, threads=run_section.threads).tables
    else:
        tables = COMMANDS[command](cfg, threads=run_section.threads).tables
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rid = run_id(command, digest, run_section.seed, __version__)
    written = []
    for table in tables:
        path = out_dir / f"{table.name}.csv"
        write_table(path, table, command, digest, run_section.seed, __version__, rid)
        written.append(path.name)
    append_manifest(out_dir, {
        "run_id": rid, "command": command, "config": str(config_path), "config_hash": digest,
        "seed": run_section.seed, "threads": run_section.threads, "version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 3), "outputs": written,
        "exit_code": code,
    })
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return run(args.command, args.config, args.out, args.seed, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HfineError as exc:
        print(f"solver error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
