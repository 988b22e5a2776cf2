"""Command-line entry point: ``lrtfim <subcommand> --config run.yaml``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import from_dict, validate_config
from .errors import ConfigError, LrtfimError

EXIT_OK, EXIT_CONFIG, EXIT_TASK = 0, 2, 3

SUBCOMMANDS = {
    "couplings": ["couplings"],
    "quench": ["couplings", "quench"],
    "ensemble": ["couplings", "ensemble"],
    "mc": ["mc", "analysis"],
    "phase-diagram": ["couplings", "mc", "analysis", "ensemble"],
    "collapse": ["mc", "analysis", "collapse"],
    "run": None,
}
HELP = {
    "couplings": "build and save the coupling matrix",
    "quench": "time-evolve the initial states at every field",
    "ensemble": "canonical or microcanonical references on the energy grid",
    "mc": "Monte Carlo Binder curves and the T_c extrapolation",
    "phase-diagram": "ensembles plus the (eps, g) phase diagram and critical line",
    "collapse": "Monte Carlo, crossings and the finite-size scaling fit",
    "run": "every stage the config enables",
}
FIGURES = {
    "quench": ["timeseries", "running-average"],
    "phase-diagram": ["phase-diagram"],
    "mc": ["binder"],
    "run": ["timeseries", "running-average", "ensemble", "phase-diagram", "correlations", "binder"],
}

log = logging.getLogger("lrtfim")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrtfim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML run configuration")
    common.add_argument("--out", type=Path, help="output directory (overrides the config)")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("-v", "--verbose", action="store_true")
    run_opts = argparse.ArgumentParser(add_help=False)
    run_opts.add_argument("--force", action="store_true", help="recompute even if cached outputs match")
    run_opts.add_argument("--jobs", type=int, default=1, help="worker processes")
    run_opts.add_argument("--no-figures", action="store_true", help="skip the default figures")

    sub.add_parser("validate", parents=[common], help="check a config and list the tasks it implies")
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common, run_opts], help=HELP[name])
    r = sub.add_parser("render", parents=[common], help="draw figures from an existing output directory")
    r.add_argument("--kind", action="append", help="figure kind (repeatable); default: all available")
    r.add_argument("--observable", default="sx2")
    return p


def _load(args):
    cfg = validate_config(args.config)
    if args.seed is not None:
        raw = cfg.as_dict()
        if raw["dynamics"] is not None:
            raw["dynamics"]["seed"] = args.seed
        if raw["mc"] is not None:
            raw["mc"]["seeds"] = [args.seed]
        cfg = from_dict(raw, cfg.source)
    return cfg


def _describe(cfg) -> list[str]:
    lines = [f"config hash {cfg.config_hash}", f"model: L={cfg.model['L']}, gamma={cfg.model['gamma']}, "
             f"couplings={cfg.model['couplings']}, fields={cfg.model['g']}"]
    if cfg.dynamics:
        n = len(cfg.dynamics["states"]) if cfg.dynamics["states"] is not None else cfg.dynamics["n_states"]
        lines.append(f"quench tasks: {len(cfg.model['g'])} fields x {n} states = {len(cfg.model['g']) * n}")
    if cfg.ensembles:
        lines.append(f"ensemble grids: {len(cfg.model['g'])} fields x {len(cfg.ensembles['energies'])} energies")
    if cfg.mc:
        mc = cfg.mc
        lines.append(f"mc chains: {len(mc['sizes'])} sizes x {len(mc['temperatures'])} temperatures "
                     f"x {len(mc['seeds'])} seeds")
    return lines


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        print("\n".join(["config OK"] + _describe(cfg)))
        return EXIT_OK

    from .pipeline import ResultManifest, run
    from .render import render

    out = args.out or Path(cfg.output)
    if args.command == "render":
        try:
            man = ResultManifest.load(out)
        except FileNotFoundError:
            print(f"no manifest in {out}; run a stage first", file=sys.stderr)
            return EXIT_TASK
        kinds = args.kind or FIGURES["run"]
        status = EXIT_OK
        for kind in kinds:
            try:
                for p in render(man, kind, args.observable):
                    print(p)
            except (LrtfimError, FileNotFoundError, ValueError) as exc:
                print(f"render {kind}: {exc}", file=sys.stderr)
                status = EXIT_TASK if args.kind else status
        return status

    man = run(cfg, out, stages=SUBCOMMANDS[args.command], force=args.force, jobs=args.jobs)
    for name, t in sorted(man.tasks.items()):
        if name.startswith("render") or name == "untracked":
            continue
        extra = f" ({t['error']})" if t["status"] == "failed" else ""
        print(f"{name:10s} {t['status']:7s} {len(t['files']):4d} files{extra}")
    if not args.no_figures and not man.failed:
        for kind in FIGURES.get(args.command, []):
            try:
                render(man, kind)
            except (LrtfimError, FileNotFoundError, ValueError) as exc:
                log.info("figure %s skipped: %s", kind, exc)
    print(f"manifest: {out / 'manifest.json'}")
    return EXIT_TASK if man.failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
