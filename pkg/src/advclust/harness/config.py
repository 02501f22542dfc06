"""Experiment configuration: parsing, validation, canonical hashing and presets.

A config is a TOML or JSON mapping.  Every field has a default, so a config
only needs the parts that differ; see ``docs/formats.md`` for the schema.
Validation errors carry the dotted path of the offending field.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from ..clustering import KINDS, SIMILARITIES, Clusterer, kmeans_ensemble, spectral_ensemble
from ..metrics import AMI_NORMALIZERS, PHI_KINDS

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the field path."""


DEFAULTS = {
    "name": "experiment",
    "seed": 0,
    "repetitions": 5,
    "phi": "ami",
    "ami_normalizer": "arithmetic",
    "data": {
        "source": "two-blobs",
        "matrix": None,
        "labels": None,
        "classes": None,
        "box": None,
        "n": 200,
        "d": 2,
        "gap": 4.0,
        "spread": 1.0,
        "data_seed": 0,
    },
    "clusterers": [{"kind": "kmeanspp", "k": 2}],
    "attack": {
        "select_by": "class",
        "victim": 0,
        "target": 1,
        "s": 0.25,
        "n_targets": None,
        "delta": 1.0,
        "heuristic": True,
        "init": "random",
    },
    "ga": {
        "G": 110,
        "lambda": None,
        "lambda_scale": 1.0,
        "alpha": None,
        "p_c": 0.85,
        "p_m": 0.05,
        "p_z": 0.001,
    },
    "sweep": {"s": None, "delta": None},
    "spillover": {"runs": []},
}

SOURCES = ("two-blobs", "digits", "file")
GA_KEYS = ("G", "lambda", "lambda_scale", "alpha", "p_c", "p_m", "p_z")


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(base[key], dict) and key != "spillover":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a table")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_delta(value, where: str) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinity", "+inf"):
            return math.inf
        raise ConfigError(f"{where}: expected a number or 'inf', got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number or 'inf', got {value!r}")
    if not value >= 0:
        raise ConfigError(f"{where}: must be non-negative, got {value}")
    return float(value)


def _number(value, where, lo=None, hi=None, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if integer and int(value) != value:
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(f"{where}: must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(f"{where}: must be <= {hi}, got {value}")
    return int(value) if integer else float(value)


def _choice(value, options, where):
    if value not in options:
        raise ConfigError(f"{where}: expected one of {list(options)}, got {value!r}")
    return value


def build_clusterer(spec: dict, where: str) -> Clusterer:
    """Clusterer from a config table.  ``kind = "ensemble"`` accepts
    ``preset = "kmeans"`` (with ``members = <count>``) or ``preset = "spectral"``,
    or an explicit ``members`` list of tables."""
    if not isinstance(spec, dict):
        raise ConfigError(f"{where}: expected a table")
    spec = dict(spec)
    kind = _choice(spec.get("kind"), KINDS, f"{where}.kind")
    k = _number(spec.get("k", 2), f"{where}.k", lo=1, integer=True)
    seed = _number(spec.get("seed", 0), f"{where}.seed", lo=0, integer=True)
    name = spec.get("name")
    if kind == "ensemble":
        preset = spec.get("preset")
        if preset == "kmeans":
            count = _number(spec.get("members", 20), f"{where}.members", lo=1, integer=True)
            c = kmeans_ensemble(k, count, seed)
        elif preset == "spectral":
            c = spectral_ensemble(k, seed)
        elif preset is None:
            members = spec.get("members")
            if not isinstance(members, list) or not members:
                raise ConfigError(f"{where}.members: an ensemble needs a non-empty member list")
            mems = tuple(build_clusterer(m, f"{where}.members[{i}]") for i, m in enumerate(members))
            c = Clusterer("ensemble", k, seed=seed, members=mems)
        else:
            raise ConfigError(f"{where}.preset: expected 'kmeans' or 'spectral', got {preset!r}")
        if name:
            c = Clusterer(c.kind, c.k, c.similarity, c.seed, c.members, name)
        return c
    similarity = _choice(spec.get("similarity", "self-tuning"), SIMILARITIES, f"{where}.similarity")
    return Clusterer(kind, k, similarity=similarity, seed=seed, name=name)


@dataclass
class ExperimentConfig:
    """Validated view over a merged config mapping (``raw``)."""

    raw: dict

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        if not isinstance(mapping, dict):
            raise ConfigError("<root>: expected a table")
        merged = _merge(DEFAULTS, mapping)
        cfg = cls(merged)
        cfg.validate()
        return cfg

    def validate(self):
        r = self.raw
        _number(r["seed"], "seed", lo=0, integer=True)
        _number(r["repetitions"], "repetitions", lo=1, integer=True)
        _choice(r["phi"], PHI_KINDS, "phi")
        _choice(r["ami_normalizer"], AMI_NORMALIZERS, "ami_normalizer")

        data = r["data"]
        _choice(data["source"], SOURCES, "data.source")
        if data["source"] == "file" and not data["matrix"]:
            raise ConfigError("data.matrix: required when data.source = 'file'")
        if data["box"] is not None:
            box = data["box"]
            if not (isinstance(box, list) and len(box) == 2):
                raise ConfigError("data.box: expected [lo, hi]")
            lo = _number(box[0], "data.box[0]")
            hi = _number(box[1], "data.box[1]")
            if not lo < hi:
                raise ConfigError("data.box: need lo < hi")
        if data["classes"] is not None and not isinstance(data["classes"], list):
            raise ConfigError("data.classes: expected a list of labels")
        _number(data["n"], "data.n", lo=2, integer=True)
        _number(data["d"], "data.d", lo=1, integer=True)

        if not isinstance(r["clusterers"], list) or not r["clusterers"]:
            raise ConfigError("clusterers: expected a non-empty list")
        self.clusterers()

        a = r["attack"]
        _choice(a["select_by"], ("class", "cluster"), "attack.select_by")
        _number(a["s"], "attack.s", lo=0, hi=1)
        if not a["s"] > 0:
            raise ConfigError("attack.s: must be > 0")
        if a["n_targets"] is not None:
            _number(a["n_targets"], "attack.n_targets", lo=1, integer=True)
        parse_delta(a["delta"], "attack.delta")
        if not isinstance(a["heuristic"], bool):
            raise ConfigError("attack.heuristic: expected true/false")
        _choice(a["init"], ("random", "zero"), "attack.init")

        self._validate_ga(r["ga"], "ga")

        sweep = r["sweep"]
        for key in ("s", "delta"):
            grid = sweep[key]
            if grid is None:
                continue
            if not isinstance(grid, list) or not grid:
                raise ConfigError(f"sweep.{key}: grid must be a non-empty list")
            for i, v in enumerate(grid):
                if key == "s":
                    _number(v, f"sweep.s[{i}]", lo=0, hi=1)
                    if not v > 0:
                        raise ConfigError(f"sweep.s[{i}]: must be > 0")
                else:
                    parse_delta(v, f"sweep.delta[{i}]")

        runs = r["spillover"].get("runs", [])
        if not isinstance(runs, list):
            raise ConfigError("spillover.runs: expected a list")
        for i, run in enumerate(runs):
            where = f"spillover.runs[{i}]"
            if not isinstance(run, dict) or "delta" not in run:
                raise ConfigError(f"{where}: each run needs a delta")
            parse_delta(run["delta"], f"{where}.delta")
            extra = set(run) - {"delta", "label", *GA_KEYS}
            if extra:
                raise ConfigError(f"{where}.{sorted(extra)[0]}: unknown field")
            self._validate_ga({**r["ga"], **{k: v for k, v in run.items() if k in GA_KEYS}}, where)

    @staticmethod
    def _validate_ga(ga, where):
        _number(ga["G"], f"{where}.G", lo=1, integer=True)
        if ga["lambda"] is not None:
            _number(ga["lambda"], f"{where}.lambda", lo=0)
        _number(ga["lambda_scale"], f"{where}.lambda_scale", lo=0)
        if ga["alpha"] is not None:
            _number(ga["alpha"], f"{where}.alpha")
            if not ga["alpha"] > 0:
                raise ConfigError(f"{where}.alpha: must be > 0")
        for p in ("p_c", "p_m", "p_z"):
            _number(ga[p], f"{where}.{p}", lo=0, hi=1)

    # -- accessors ---------------------------------------------------------

    @property
    def name(self) -> str:
        return self.raw["name"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def repetitions(self) -> int:
        return int(self.raw["repetitions"])

    @property
    def phi(self) -> str:
        return self.raw["phi"]

    def clusterers(self) -> list:
        return [build_clusterer(c, f"clusterers[{i}]") for i, c in enumerate(self.raw["clusterers"])]

    def s_grid(self) -> list:
        grid = self.raw["sweep"]["s"]
        return [float(v) for v in grid] if grid else [float(self.raw["attack"]["s"])]

    def delta_grid(self) -> list:
        grid = self.raw["sweep"]["delta"]
        if grid:
            return [parse_delta(v, "sweep.delta") for v in grid]
        return [parse_delta(self.raw["attack"]["delta"], "attack.delta")]

    def spillover_runs(self) -> list:
        """List of ``(label, delta, ga_table)``; falls back to the attack delta."""
        runs = self.raw["spillover"].get("runs") or [{"delta": self.raw["attack"]["delta"]}]
        out = []
        for run in runs:
            delta = parse_delta(run["delta"], "spillover.delta")
            ga = {**self.raw["ga"], **{k: v for k, v in run.items() if k in GA_KEYS}}
            label = run.get("label") or f"delta={format_delta(delta)}"
            out.append((label, delta, ga))
        return out

    def with_overrides(self, **changes) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``{"attack.delta": 2.0}``."""
        raw = copy.deepcopy(self.raw)
        for dotted, value in changes.items():
            node = raw
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            if leaf not in node:
                raise ConfigError(f"{dotted}: unknown field")
            node[leaf] = value
        cfg = ExperimentConfig(raw)
        cfg.validate()
        return cfg

    def canonical(self) -> dict:
        return _canonical(self.raw)

    def hash(self) -> str:
        return config_hash(self.raw)


def format_delta(delta: float) -> str:
    return "inf" if math.isinf(delta) else repr(float(delta))


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, bool) or obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, int):
        return float(obj)
    if isinstance(obj, float):
        return format_delta(obj) if math.isinf(obj) else obj
    return obj


def config_hash(raw: dict) -> str:
    """SHA-256 over the canonical JSON form; key order and int/float spelling do not matter."""
    text = json.dumps(_canonical(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def read_mapping(path) -> dict:
    path = Path(path)
    try:
        if path.suffix.lower() == ".json":
            return json.loads(path.read_text())
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"<file>: config {path} not found") from None
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"<file>: cannot parse {path}: {exc}") from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    mapping = read_mapping(path)
    data = mapping.get("data") if isinstance(mapping, dict) else None
    # Relative data paths resolve against the config file.
    if isinstance(data, dict):
        for key in ("matrix", "labels"):
            if data.get(key) and not Path(data[key]).is_absolute():
                data[key] = str((path.parent / data[key]).resolve())
    return ExperimentConfig.from_mapping(mapping)


def preset_names() -> list:
    root = resources.files("advclust.harness") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_preset(name: str) -> ExperimentConfig:
    root = resources.files("advclust.harness") / "configs"
    target = root / f"{name}.toml"
    if not target.is_file():
        raise ConfigError(f"<preset>: unknown preset {name!r}; available: {', '.join(preset_names())}")
    return ExperimentConfig.from_mapping(tomllib.loads(target.read_text()))
