"""Experiment recipes: single attacks, (s, delta) sweeps, spill-over tables,
phi ablations and convergence traces.

Every result is a plain dict or CSV so it can be diffed byte for byte; wall
time is the only non-deterministic quantity and is kept out of the record
files (it goes to ``timing.json``).
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..attack import (
    AttackerConstraints,
    GAParams,
    aga_condition_audit,
    attack,
    direction_matrix,
    select_targets,
)
from ..clustering import Clusterer, QueryCounter, cluster
from ..dataset import (
    BoxBounds,
    clamp_to_box,
    load_digits_subset,
    load_labels,
    load_matrix,
    save_labels,
    save_matrix,
    two_blobs,
)
from ..metrics import all_phi, mask_norms, miss_clustered, penalty_weight
from .config import ConfigError, ExperimentConfig, format_delta

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("s", "delta", "mean_ami", "stderr", "clusterer")
SPILLOVER_COLUMNS = (
    "method", "delta",
    "l0_mean", "l0_std", "l2_mean", "l2_std", "linf_mean", "linf_std",
    "miss_clustered_mean", "miss_clustered_std", "runs",
)
SPILLOVER_HEADERS = ("Method", "||e||_0", "||e||_2", "||e||_inf", "#Miss-clust")


# --------------------------------------------------------------------------
# seeds


def derive_seed(master: int, *keys) -> int:
    """Independent 63-bit seed for a (cell, repetition) pair.

    Keys are hashed with CRC-32 after ``repr`` so a cell's seed depends only
    on its coordinates, never on the order in which cells run.
    """
    words = [zlib.crc32(repr(k).encode()) for k in keys]
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(words))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# --------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    X: np.ndarray
    truth: np.ndarray | None
    box: BoxBounds | None


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    data = cfg.raw["data"]
    source = data["source"]
    if source == "two-blobs":
        X, truth = two_blobs(int(data["n"]), int(data["d"]), float(data["gap"]),
                             float(data["spread"]), int(data["data_seed"]))
        box = None
    elif source == "digits":
        X, truth = load_digits_subset(tuple(data["classes"] or range(10)))
        box = BoxBounds(0.0, 16.0)
    else:
        X = load_matrix(data["matrix"])
        truth = load_labels(data["labels"]) if data["labels"] else None
        if truth is not None and truth.size != X.shape[0]:
            raise ConfigError(f"data.labels: {truth.size} labels for {X.shape[0]} rows")
        if truth is not None and data["classes"] is not None:
            keep = np.isin(truth, data["classes"])
            X, truth = X[keep], truth[keep]
        box = None
    if data["box"] is not None:
        box = BoxBounds(float(data["box"][0]), float(data["box"][1]))
    return Dataset(X, truth, box)


def resolve_clusters(cfg: ExperimentConfig, baseline, truth) -> tuple:
    """Map the configured victim/target onto cluster ids of ``baseline``.

    With ``select_by = "class"`` each ground-truth class is matched to the
    baseline cluster it overlaps most; the target avoids the victim's cluster.
    """
    a = cfg.raw["attack"]
    victim, target = a["victim"], a["target"]
    ids = np.unique(baseline)
    if a["select_by"] == "cluster" or truth is None:
        if victim not in ids or target not in ids:
            raise ConfigError(f"attack.victim/target: clusters {victim}, {target} not in baseline {ids.tolist()}")
        return int(victim), int(target)
    overlap = {}
    for cls in (victim, target):
        rows = truth == cls
        if not rows.any():
            raise ConfigError(f"attack.victim/target: class {cls} absent from the ground truth")
        overlap[cls] = np.array([(baseline[rows] == c).sum() for c in ids])
    v = int(ids[np.argmax(overlap[victim])])
    counts = overlap[target].copy()
    counts[ids == v] = -1
    t = int(ids[np.argmax(counts)])
    if v == t:
        raise ConfigError("attack.victim/target: both classes map to the same cluster")
    return v, t


def lambda_for(ga: dict, n: int, d: int, box: BoxBounds | None) -> float:
    if ga["lambda"] is not None:
        return float(ga["lambda"])
    # Feature range: explicit alpha, else the data box width, else 8-bit pixels.
    alpha = float(ga["alpha"]) if ga.get("alpha") else (box.width if box else 255.0)
    return penalty_weight(n, d, alpha=alpha, scale=float(ga["lambda_scale"]))


# --------------------------------------------------------------------------
# single run


@dataclass
class RunRecord:
    """Outcome of one seeded attack; ``to_dict`` excludes the wall time."""

    config_hash: str
    seed: int
    clusterer: str
    s: float | None
    delta: float
    targets: list
    victim: int
    target: int
    trace: list
    norms: dict
    raw_norms: dict
    miss_clustered: int
    phi: dict
    loss: float
    query_count: int
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "clusterer": self.clusterer,
            "s": self.s,
            "delta": format_delta(self.delta),
            "targets": self.targets,
            "victim": self.victim,
            "target": self.target,
            "loss": self.loss,
            "norms": self.norms,
            "raw_norms": self.raw_norms,
            "miss_clustered": self.miss_clustered,
            "phi": self.phi,
            "query_count": self.query_count,
            "trace": self.trace,
        }

    @classmethod
    def from_dict(cls, d: dict, wall_time: float = 0.0) -> "RunRecord":
        d = dict(d)
        d["delta"] = math.inf if d["delta"] == "inf" else float(d["delta"])
        return cls(**d, wall_time=wall_time)


@dataclass
class RunOutput:
    record: RunRecord
    mask: np.ndarray
    poisoned: np.ndarray
    baseline: np.ndarray
    labels: np.ndarray


def run_one(cfg: ExperimentConfig, data: Dataset, clusterer: Clusterer, *, s: float | None,
            delta: float, seed: int, ga: dict | None = None, phi: str | None = None,
            n_targets: int | None = None) -> RunOutput:
    """One attack: baseline query, target selection, genetic search, evaluation."""
    ga = ga or cfg.raw["ga"]
    phi = phi or cfg.phi
    a = cfg.raw["attack"]
    n_targets = n_targets if n_targets is not None else a["n_targets"]
    X = data.X
    n, d = X.shape
    start = time.perf_counter()
    q = QueryCounter()
    baseline = cluster(clusterer, clamp_to_box(X, data.box), q)
    victim, target = resolve_clusters(cfg, baseline, data.truth)
    if n_targets is not None:
        frac = min(1.0, n_targets / max(1, int((baseline == victim).sum())))
        targets = select_targets(X, baseline, victim, target, frac)[: int(n_targets)]
    else:
        targets = select_targets(X, baseline, victim, target, s)
    psi = direction_matrix(X, baseline, victim, target) if a["heuristic"] else None
    cons = AttackerConstraints(delta, targets, data.box)
    params = GAParams(
        G=int(ga["G"]), lam=lambda_for(ga, n, d, data.box), p_c=float(ga["p_c"]),
        p_m=float(ga["p_m"]), p_z=float(ga["p_z"]), seed=int(seed),
        heuristic=bool(a["heuristic"]), init=a["init"],
    )
    res = attack(X, clusterer, cons, params, phi, psi=psi, baseline=baseline, q=q,
                 ami_normalizer=cfg.raw["ami_normalizer"])
    poisoned = clamp_to_box(X + res.mask, data.box)
    effective = poisoned - X
    record = RunRecord(
        config_hash=cfg.hash(),
        seed=int(seed),
        clusterer=clusterer.label,
        s=None if n_targets is not None else float(s),
        delta=float(delta),
        targets=list(targets),
        victim=victim,
        target=target,
        trace=[float(v) for v in res.trace],
        norms=mask_norms(effective).as_dict(),
        raw_norms=mask_norms(res.mask).as_dict(),
        miss_clustered=miss_clustered(baseline, res.labels),
        phi=all_phi(baseline, res.labels),
        loss=float(res.loss),
        query_count=int(q.count),
        wall_time=time.perf_counter() - start,
    )
    return RunOutput(record, res.mask, poisoned, baseline, res.labels)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_table(rows: list, columns, path: Path, fmt: str = "csv") -> Path:
    """Write ``rows`` (dicts) with a fixed column order as CSV or JSON."""
    path = Path(path).with_suffix("." + fmt)
    if fmt == "json":
        table = [{c: _json_cell(r.get(c)) for c in columns} for r in rows]
        path.write_text(json.dumps(table, indent=2) + "\n")
        return path
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    path.write_text(buf.getvalue())
    return path


def _json_cell(v):
    return format_delta(v) if isinstance(v, float) and math.isinf(v) else v


def _cell(v):
    if isinstance(v, float):
        return format_delta(v) if math.isinf(v) else repr(v)
    return "" if v is None else v


def cmd_attack(cfg: ExperimentConfig, out: Path, seed: int | None = None) -> RunRecord:
    """Single attack with the first clusterer at ``attack.s`` / ``attack.delta``.

    Writes ``record.json``, ``timing.json``, ``poisoned.csv``, ``mask.csv``,
    ``labels_clean.txt`` and ``labels_poisoned.txt``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    clusterer = cfg.clusterers()[0]
    seed = cfg.seed if seed is None else int(seed)
    result = run_one(cfg, data, clusterer, s=cfg.s_grid()[0], delta=cfg.delta_grid()[0], seed=seed)
    (out / "record.json").write_text(_dump(result.record.to_dict()))
    (out / "timing.json").write_text(_dump({"wall_time": result.record.wall_time}))
    save_matrix(result.poisoned, out / "poisoned.csv")
    save_matrix(result.mask, out / "mask.csv")
    save_labels(result.baseline, out / "labels_clean.txt")
    save_labels(result.labels, out / "labels_poisoned.txt")
    return result.record


# --------------------------------------------------------------------------
# sweeps


def mean_stderr(values) -> tuple:
    """Mean and standard error (sample std / sqrt(count)); stderr is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def cell_id(clusterer: str, s: float, delta: float) -> str:
    return f"{clusterer}__s={s!r}__delta={format_delta(delta)}"


def unique_labels(clusterers) -> list:
    """Clusterer labels, with ``#<index>`` appended to any label used more than once."""
    names = [c.label for c in clusterers]
    return [f"{n}#{i}" if names.count(n) > 1 else n for i, n in enumerate(names)]


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "=._-" else "_" for ch in name)


def _run_cell(args):
    cfg_raw, ci, s, delta, phi = args
    cfg = ExperimentConfig(cfg_raw)
    data = load_dataset(cfg)
    clusterer = cfg.clusterers()[ci]
    label = unique_labels(cfg.clusterers())[ci]
    runs, error = [], None
    try:
        for rep in range(cfg.repetitions):
            seed = derive_seed(cfg.seed, s, format_delta(delta), rep)
            rec = run_one(cfg, data, clusterer, s=s, delta=delta, seed=seed, phi=phi).record
            runs.append({"repetition": rep, **rec.to_dict(), "clusterer": label})
    except Exception as exc:  # recorded per cell; the sweep carries on
        log.exception("cell %s failed", cell_id(label, s, delta))
        error = f"{type(exc).__name__}: {exc}"
    return {"clusterer": label, "s": s, "delta": format_delta(delta),
            "config_hash": cfg.hash(), "phi": phi, "runs": runs, "error": error}


def run_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1, phi: str | None = None) -> list:
    """Run every (clusterer, s, delta) cell ``repetitions`` times.

    Each finished cell is written to ``cells/<cell id>.json``; cells whose
    file already exists with a matching config hash are loaded instead of
    re-run, so an interrupted sweep resumes where it stopped.
    """
    phi = phi or cfg.phi
    out = Path(out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    todo, results = [], {}
    labels = unique_labels(cfg.clusterers())
    for ci, label in enumerate(labels):
        for s in cfg.s_grid():
            for delta in cfg.delta_grid():
                cid = cell_id(label, s, delta)
                path = cells_dir / f"{_safe(cid)}.json"
                if path.exists():
                    cached = json.loads(path.read_text())
                    if cached.get("config_hash") == cfg.hash() and cached.get("phi") == phi \
                            and not cached.get("error"):
                        results[cid] = cached
                        continue
                todo.append((cid, path, (cfg.raw, ci, s, delta, phi)))
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = pool.map(_run_cell, [t[2] for t in todo])
            for (cid, path, _), cell in zip(todo, done):
                path.write_text(_dump(cell))
                results[cid] = cell
    else:
        for cid, path, args in todo:
            cell = _run_cell(args)
            path.write_text(_dump(cell))
            results[cid] = cell

    rows = []
    for label in labels:
        for s in cfg.s_grid():
            for delta in cfg.delta_grid():
                cell = results[cell_id(label, s, delta)]
                mean, se = mean_stderr([r["phi"]["ami"] for r in cell["runs"]])
                rows.append({"s": s, "delta": delta, "mean_ami": mean, "stderr": se,
                             "clusterer": label, "error": cell.get("error")})
    return rows


def cmd_sweep(cfg: ExperimentConfig, out: Path, jobs: int = 1, fmt: str = "csv") -> list:
    out = Path(out)
    rows = run_sweep(cfg, out, jobs=jobs)
    write_table(rows, SWEEP_COLUMNS, out / "sweep", fmt)
    failures = [r for r in rows if r["error"]]
    if failures:
        write_table(failures, ("clusterer", "s", "delta", "error"), out / "failures", "csv")
    return rows


def cmd_ablation(cfg: ExperimentConfig, out: Path, jobs: int = 1, fmt: str = "csv",
                 phis=("ami", "ari", "frob")) -> list:
    """The sweep once per objective phi, with shared seeds; final AMI side by side."""
    out = Path(out)
    merged = {}
    for phi in phis:
        rows = run_sweep(cfg, out / f"phi-{phi}", jobs=jobs, phi=phi)
        for r in rows:
            key = (r["clusterer"], r["s"], r["delta"])
            row = merged.setdefault(key, {"s": r["s"], "delta": r["delta"], "clusterer": r["clusterer"]})
            row[f"mean_ami[{phi}]"] = r["mean_ami"]
            row[f"stderr[{phi}]"] = r["stderr"]
    columns = ["s", "delta", "clusterer"]
    for phi in phis:
        columns += [f"mean_ami[{phi}]", f"stderr[{phi}]"]
    rows = list(merged.values())
    write_table(rows, columns, out / "ablation", fmt)
    return rows


def cmd_convergence(cfg: ExperimentConfig, out: Path, fmt: str = "csv") -> dict:
    """Best-so-far loss per generation for each clusterer, averaged over repetitions.

    Uses the first ``s`` and ``delta`` of the config.  Writes
    ``convergence`` (one column per clusterer) and ``convergence_runs``
    (long format, one row per clusterer/repetition/generation).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    s, delta = cfg.s_grid()[0], cfg.delta_grid()[0]
    traces = {}
    long_rows = []
    for c, label in zip(cfg.clusterers(), unique_labels(cfg.clusterers())):
        per_rep = []
        for rep in range(cfg.repetitions):
            seed = derive_seed(cfg.seed, s, format_delta(delta), rep)
            rec = run_one(cfg, data, c, s=s, delta=delta, seed=seed).record
            per_rep.append(rec.trace)
            for g, v in enumerate(rec.trace, start=1):
                long_rows.append({"clusterer": label, "repetition": rep, "generation": g, "best_loss": v})
        traces[label] = per_rep
    G = len(next(iter(traces.values()))[0])
    labels = list(traces)
    rows = []
    for g in range(G):
        row = {"generation": g + 1}
        for lab in labels:
            row[lab] = float(np.mean([t[g] for t in traces[lab]]))
        rows.append(row)
    write_table(rows, ["generation", *labels], out / "convergence", fmt)
    write_table(long_rows, ("clusterer", "repetition", "generation", "best_loss"),
                out / "convergence_runs", fmt)
    return traces


def cmd_spillover(cfg: ExperimentConfig, out: Path, fmt: str = "csv") -> list:
    """Single-sample attacks, ``repetitions`` seeds per configured delta.

    Emits mean and std of the zero/Euclidean/max norms of the injected
    perturbation and of the miss-clustered count, plus a text table laid out
    with one row per delta and one mean ± std column per measure.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    clusterer = cfg.clusterers()[0]
    rows, records = [], []
    for label, delta, ga in cfg.spillover_runs():
        stats = {"l0": [], "l2": [], "linf": [], "miss": []}
        for rep in range(cfg.repetitions):
            seed = derive_seed(cfg.seed, "spillover", format_delta(delta), rep)
            rec = run_one(cfg, data, clusterer, s=None, delta=delta, seed=seed, ga=ga, n_targets=1).record
            records.append({"method": label, "repetition": rep, **rec.to_dict()})
            stats["l0"].append(rec.norms["l0"])
            stats["l2"].append(rec.norms["l2"])
            stats["linf"].append(rec.norms["linf"])
            stats["miss"].append(rec.miss_clustered)
        row = {"method": label, "delta": delta, "runs": cfg.repetitions}
        for key, col in (("l0", "l0"), ("l2", "l2"), ("linf", "linf"), ("miss", "miss_clustered")):
            v = np.asarray(stats[key], dtype=np.float64)
            row[f"{col}_mean"] = float(v.mean())
            row[f"{col}_std"] = float(v.std())
        rows.append(row)
    write_table(rows, SPILLOVER_COLUMNS, out / "spillover", fmt)
    (out / "spillover_runs.json").write_text(_dump(records))
    (out / "spillover.txt").write_text(format_spillover(rows))
    return rows


def format_spillover(rows) -> str:
    """Plain-text table: method, l0, l2, linf, #Miss-clust, each as mean +- std."""
    lines = [" | ".join(SPILLOVER_HEADERS)]
    for r in rows:
        lines.append(" | ".join([
            r["method"],
            f"{r['l0_mean']:.0f} ± {r['l0_std']:.2f}",
            f"{r['l2_mean']:.2f} ± {r['l2_std']:.2f}",
            f"{r['linf_mean']:.2f} ± {r['linf_std']:.2f}",
            f"{r['miss_clustered_mean']:.1f} ± {r['miss_clustered_std']:.1f}",
        ]))
    return "\n".join(lines) + "\n"


def cmd_cluster(cfg: ExperimentConfig, out: Path) -> dict:
    """Cluster the clean data with the first clusterer; report silhouette and AMI vs truth."""
    from ..metrics import ami, silhouette

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg)
    c = cfg.clusterers()[0]
    labels = cluster(c, clamp_to_box(data.X, data.box))
    save_labels(labels, out / "labels.txt")
    report = {"clusterer": c.label, "n": int(labels.size), "clusters": int(np.unique(labels).size),
              "silhouette": None, "silhouette_error": None, "ami_vs_truth": None}
    try:
        report["silhouette"] = silhouette(data.X, labels)
    except ValueError as exc:
        report["silhouette_error"] = str(exc)
    if data.truth is not None:
        report["ami_vs_truth"] = ami(data.truth, labels)
    (out / "cluster.json").write_text(_dump(report))
    return report


AUDIT_COLUMNS = ("config", "setting", "delta", "p_m", "condition", "passed", "detail")


def audit_config(cfg: ExperimentConfig) -> list:
    """Convergence-condition report for every (delta, GA table) the config can run.

    Covers the sweep grid with the base GA table and every spill-over run
    with its own overrides.  Needs no data: the conditions depend only on
    the operator rates and the power bound.
    """
    settings = [(f"sweep delta={format_delta(d)}", d, cfg.raw["ga"]) for d in cfg.delta_grid()]
    if cfg.raw["spillover"].get("runs"):
        settings += [(f"spillover {label}", d, ga) for label, d, ga in cfg.spillover_runs()]
    box = cfg.raw["data"]["box"]
    box = BoxBounds(float(box[0]), float(box[1])) if box else None
    rows = []
    for setting, delta, ga in settings:
        params = GAParams(G=int(ga["G"]), p_c=float(ga["p_c"]), p_m=float(ga["p_m"]),
                          p_z=float(ga["p_z"]), heuristic=bool(cfg.raw["attack"]["heuristic"]))
        cons = AttackerConstraints(delta, (0,), box)
        for item in aga_condition_audit(params, cons):
            rows.append({"config": cfg.name, "setting": setting, "delta": delta, "p_m": params.p_m,
                         "condition": item.condition, "passed": item.passed, "detail": item.detail})
    return rows


def cmd_audit(configs: list, out: Path | None = None, fmt: str = "csv") -> list:
    rows = [r for cfg in configs for r in audit_config(cfg)]
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_table(rows, AUDIT_COLUMNS, out / "audit", fmt)
    return rows
