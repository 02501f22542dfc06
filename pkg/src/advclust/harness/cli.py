"""Command-line entry point: ``advclust <command> [options]``.

Exit codes: 0 on success, 2 for invalid configuration or input data, 3 for
any failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..dataset import DataError, load_labels
from ..metrics import AMI_NORMALIZERS, ami, ari, frob_distance, miss_clustered
from . import experiments as ex
from .config import ConfigError, DEFAULTS, ExperimentConfig, load_config, load_preset, preset_names

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("advclust")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> ExperimentConfig:
    """Config from ``--config`` or ``--preset`` (else defaults), then CLI overrides."""
    if args.config and args.preset:
        raise ConfigError("<cli>: pass either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = load_preset(args.preset)
    else:
        cfg = ExperimentConfig.from_mapping({})
    changes = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"<cli>: --set expects key=value, got {item!r}")
        changes[key.strip()] = _parse_value(value)
    if args.matrix:
        changes["data.source"] = "file"
        changes["data.matrix"] = str(Path(args.matrix).resolve())
    if args.labels:
        changes["data.labels"] = str(Path(args.labels).resolve())
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = cfg.with_overrides(**changes)
    return cfg


def _out(args, default: str) -> Path:
    return Path(args.out) if args.out else Path("runs") / default


def _print_rows(rows, columns):
    print("\t".join(columns))
    for r in rows:
        print("\t".join(str(ex._cell(r.get(c))) for c in columns))


def cmd_attack(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-attack")
    rec = ex.cmd_attack(cfg, out)
    print(f"ami={rec.phi['ami']:.4f} miss_clustered={rec.miss_clustered} "
          f"l0={rec.norms['l0']} linf={rec.norms['linf']:.4g} queries={rec.query_count}")
    print(f"results in {out}")


def cmd_sweep(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-sweep")
    rows = ex.cmd_sweep(cfg, out, jobs=args.jobs, fmt=args.format)
    _print_rows(rows, ex.SWEEP_COLUMNS)
    failed = [r for r in rows if r["error"]]
    if failed:
        log.error("%d cell(s) failed; see %s", len(failed), out / "failures.csv")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_spillover(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-spillover")
    rows = ex.cmd_spillover(cfg, out, fmt=args.format)
    sys.stdout.write(ex.format_spillover(rows))


def cmd_ablation(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-ablation")
    rows = ex.cmd_ablation(cfg, out, jobs=args.jobs, fmt=args.format)
    if rows:
        _print_rows(rows, list(rows[0]))


def cmd_convergence(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-convergence")
    traces = ex.cmd_convergence(cfg, out, fmt=args.format)
    for label, per_rep in traces.items():
        first = sum(t[0] for t in per_rep) / len(per_rep)
        last = sum(t[-1] for t in per_rep) / len(per_rep)
        print(f"{label}: mean best loss {first:.4f} -> {last:.4f} over {len(per_rep[0])} generations")


def cmd_cluster(args):
    cfg = resolve_config(args)
    out = _out(args, f"{cfg.name}-cluster")
    report = ex.cmd_cluster(cfg, out)
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_metrics(args):
    a = load_labels(args.labels_a)
    b = load_labels(args.labels_b)
    if a.size != b.size:
        raise DataError(f"{args.labels_b}: {b.size} labels, expected {a.size}")
    row = {
        "ami": ami(a, b, normalizer=args.ami_normalizer),
        "ari": ari(a, b),
        "frob": frob_distance(a, b),
        "miss_clustered": miss_clustered(a, b),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ex.write_table([row], list(row), out / "metrics", args.format)
    print(json.dumps(row, indent=2))


def cmd_audit(args):
    if args.all_presets:
        configs = [load_preset(name) for name in preset_names()]
    else:
        configs = [resolve_config(args)]
    rows = ex.cmd_audit(configs, args.out, args.format)
    for r in rows:
        mark = "pass" if r["passed"] else "FAIL"
        print(f"[{mark}] {r['config']} / {r['setting']}: {r['condition']} ({r['detail']})")
    if args.strict and not all(r["passed"] for r in rows):
        return 1
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON experiment config")
    common.add_argument("--preset", help=f"shipped config by name ({', '.join(preset_names())})")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (default: runs/<name>-<command>)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("--matrix", help="data matrix file (CSV/TSV); implies data.source = file")
    common.add_argument("--labels", help="ground-truth label file, one label per line")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set attack.delta=2.0 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="advclust",
        description="Black-box adversarial noise masks against clustering algorithms.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "attack": ("one seeded attack; writes the record, poisoned matrix and mask", cmd_attack),
        "sweep": ("mean and standard error of final AMI over the (s, delta) grid", cmd_sweep),
        "spillover": ("single-sample attacks over 'repetitions' seeds per delta", cmd_spillover),
        "ablation": ("the sweep once per objective (ami, ari, frob) with shared seeds", cmd_ablation),
        "convergence": ("best-so-far loss per generation, per clusterer", cmd_convergence),
        "cluster": ("cluster clean data; report silhouette and AMI vs truth", cmd_cluster),
    }
    for name, (text, fn) in helps.items():
        p = sub.add_parser(name, parents=[common], help=text, description=text)
        p.set_defaults(func=fn)

    p = sub.add_parser("metrics", parents=[common], help="compare two label files",
                       description="AMI, ARI, Frobenius distance and miss-clustered count.")
    p.add_argument("labels_a")
    p.add_argument("labels_b")
    p.add_argument("--ami-normalizer", choices=AMI_NORMALIZERS, default=DEFAULTS["ami_normalizer"])
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("audit", parents=[common], help="convergence-condition report",
                       description="Check the operator settings against the convergence conditions.")
    p.add_argument("--all-presets", action="store_true", help="audit every shipped preset")
    p.add_argument("--strict", action="store_true", help="exit 1 when any condition fails")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
