"""CSV ingestion, TOML configuration and JSON report serialization."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .estimation import ModelFit
from .inference import InferenceResult
from .model import EFFECT_NAMES, GroupEffects, PairRecord
from .patterns import N_PATTERNS, POSITIONS, GroupingScheme, NoObservations, Sequence
from .simulate import SCENARIOS, SimScenario

HEADER = ("pair_id", "sequence", "y_1A", "y_1B", "y_2A", "y_2B")
MISSING_TOKENS = ("", "NA")


class MalformedHeader(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class Dataset:
    records: list[PairRecord]
    source: str
    n_rows: int
    rejected: list[dict] = field(default_factory=list)

    @property
    def n_all_missing(self) -> int:
        return sum(r["reason"] == "all values missing" for r in self.rejected)

    @property
    def n_malformed(self) -> int:
        return len(self.rejected) - self.n_all_missing

    def provenance(self) -> dict:
        return {
            "source": self.source,
            "rows": self.n_rows,
            "accepted": len(self.records),
            "rejected": self.rejected,
            "all_missing": self.n_all_missing,
        }


def parse_csv(path) -> Dataset:
    """Read the wide one-row-per-pair format; bad rows are logged, not fatal."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != HEADER:
            raise MalformedHeader(f"expected header {','.join(HEADER)}, got {header}")
        records: list[PairRecord] = []
        rejected: list[dict] = []
        seen: set[str] = set()
        n_rows = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            n_rows += 1

            def reject(reason):
                rejected.append({"line": lineno, "pair_id": row[0].strip() if row else "", "reason": reason})

            if len(row) != len(HEADER):
                reject(f"expected {len(HEADER)} fields, got {len(row)}")
                continue
            pid, seq_txt, *vals = (c.strip() for c in row)
            if not pid:
                reject("empty pair_id")
                continue
            if pid in seen:
                reject("duplicate pair_id")
                continue
            if seq_txt not in ("1", "2"):
                reject(f"sequence must be 1 or 2, got {seq_txt!r}")
                continue
            y = []
            bad = None
            for name, v in zip(HEADER[2:], vals):
                if v in MISSING_TOKENS:
                    y.append(None)
                    continue
                try:
                    x = float(v)
                except ValueError:
                    bad = f"non-numeric value {v!r} in {name}"
                    break
                if not math.isfinite(x):
                    bad = f"non-finite value {v!r} in {name}"
                    break
                y.append(x)
            if bad:
                reject(bad)
                continue
            try:
                rec = PairRecord(pid, Sequence(int(seq_txt)), tuple(y))
            except NoObservations:
                reject("all values missing")
                continue
            seen.add(pid)
            records.append(rec)
    return Dataset(records, str(path), n_rows, rejected)


def write_csv(records, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for r in records:
            w.writerow([r.pair_id, int(r.sequence), *("" if v is None else repr(v) for v in r.y)])


# ---------------------------------------------------------------- JSON


def _fmt_float(x: float) -> str:
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj: Any, indent: int = 2) -> str:
    """JSON with every float written to 17 significant digits (bit-exact diffs)."""
    import json

    def enc(o, level):
        pad = " " * (indent * (level + 1))
        end = " " * (indent * level)
        if isinstance(o, dict):
            if not o:
                return "{}"
            items = [f"{pad}{json.dumps(str(k))}: {enc(v, level + 1)}" for k, v in o.items()]
            return "{\n" + ",\n".join(items) + "\n" + end + "}"
        if isinstance(o, (list, tuple)):
            if not o:
                return "[]"
            if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in o):
                return "[" + ", ".join(enc(v, level + 1) for v in o) + "]"
            return "[\n" + ",\n".join(pad + enc(v, level + 1) for v in o) + "\n" + end + "]"
        if isinstance(o, np.ndarray):
            return enc(o.tolist(), level)
        if o is None:
            return "null"
        if isinstance(o, (bool, np.bool_)):
            return "true" if o else "false"
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            return _fmt_float(float(o))
        if isinstance(o, Sequence):
            return str(int(o))
        return json.dumps(str(o))

    return enc(obj, 0) + "\n"


# ---------------------------------------------------------------- config


def load_toml(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with path.open("rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def grouping_from_table(table: dict, name: str = "custom") -> GroupingScheme:
    table = dict(table)
    min_pairs = int(table.pop("min_pairs_per_group", 3))
    if "name" in table:
        return GroupingScheme.named(str(table["name"]))
    try:
        return GroupingScheme.from_groups(
            {str(k): [int(p) for p in v] for k, v in table.items()}, min_pairs_per_group=min_pairs, name=name
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid grouping: {exc}") from None


def load_grouping(spec) -> GroupingScheme:
    """``default``, ``merged-dp``, ``naive`` or a TOML file with a [grouping] table."""
    if isinstance(spec, GroupingScheme):
        return spec
    if isinstance(spec, dict):
        return grouping_from_table(spec)
    if spec in ("default", "merged-dp", "naive"):
        return GroupingScheme.named(spec)
    data = load_toml(spec)
    return grouping_from_table(data.get("grouping", data), name=Path(spec).stem)


@dataclass
class RunConfig:
    method: str = "reml"
    grouping: Any = "default"
    naive: bool = False
    contrast: tuple[float, ...] = (1.0, -1.0, -1.0, 1.0)
    optimizer: dict = field(default_factory=dict)
    input: str | None = None
    out: str | None = None
    labels: dict = field(default_factory=dict)
    seed: int | None = None
    reps: int = 10
    threads: int = 1
    scenario: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        self.method = str(self.method).lower()
        if self.method not in ("ml", "reml"):
            raise ConfigError(f"method must be ml or reml, got {self.method!r}")
        if len(self.contrast) != 4:
            raise ConfigError("contrast needs 4 values (1A, 1B, 2A, 2B)")
        self.contrast = tuple(float(c) for c in self.contrast)
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self

    def scheme(self) -> GroupingScheme:
        return GroupingScheme.naive() if self.naive else load_grouping(self.grouping)


_CONFIG_KEYS = {f for f in RunConfig.__dataclass_fields__}


def load_config(path=None, **overrides) -> RunConfig:
    """File values first, then any non-None overrides (command-line flags win)."""
    data = load_toml(path) if path else {}
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**data)
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, v)
    return cfg.validate()


def scenario_from_config(table: dict, seed: int | None = None, n_pairs: int | None = None) -> SimScenario:
    """Build a scenario from a preset name and/or explicit groups, sigma and sizes."""
    table = dict(table or {})
    base_name = table.get("base", "barge-like")
    if base_name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {base_name!r}; choose from {sorted(SCENARIOS)}")
    base = SCENARIOS[base_name]()
    betas = dict(base.true_betas)
    gprobs = dict(base.group_probs)
    pprobs = dict(base.pattern_probs)
    scheme = base.scheme
    if "grouping" in table:
        scheme = load_grouping(table["grouping"])
    if "groups" in table:
        betas, gprobs, pprobs = {}, {}, {}
        for g, spec in table["groups"].items():
            eff = spec.get("effects")
            if eff is None or len(eff) != len(EFFECT_NAMES):
                raise ConfigError(f"group {g}: 'effects' needs {len(EFFECT_NAMES)} values")
            betas[g] = GroupEffects.from_array(eff)
            gprobs[g] = float(spec.get("prob", 0.0))
            pprobs[g] = {(int(p), Sequence(int(s))): float(w) for p, s, w in spec.get("patterns", [])}
    sigma = np.asarray(table.get("sigma", base.true_sigma), dtype=float)
    return SimScenario(
        true_betas=betas,
        true_sigma=sigma,
        group_probs=gprobs,
        pattern_probs=pprobs,
        n_pairs=int(n_pairs or table.get("n_pairs", base.n_pairs)),
        seed=int(seed if seed is not None else table.get("seed", base.seed)),
        scheme=scheme,
        name=str(table.get("name", base_name)),
    )


# ---------------------------------------------------------------- reports


def cell_labels(labels: dict) -> dict[str, str]:
    t1 = labels.get("type_1", "1")
    t2 = labels.get("type_2", "2")
    a = labels.get("treatment_A", "A")
    b = labels.get("treatment_B", "B")
    return {"1A": f"{t1}/{a}", "1B": f"{t1}/{b}", "2A": f"{t2}/{a}", "2B": f"{t2}/{b}"}


def fit_report(fit: ModelFit, inf: InferenceResult, dataset: Dataset | None = None, labels: dict | None = None) -> dict:
    counts = fit.counts
    se = fit.group_se()
    non_est = set(fit.non_estimable)
    props = fit.proportions
    return {
        "analysis": "pattern-ignoring" if fit.naive else "pattern-mixture",
        "method": fit.method.upper(),
        "grouping": {"name": fit.scheme.name, "groups": {g: list(p) for g, p in fit.scheme.groups().items()}},
        "cell_labels": cell_labels(labels or {}),
        "data": dataset.provenance() if dataset else None,
        "pattern_counts": {
            "by_pattern_sequence": [
                {"pattern": p, "sequence": int(s), "count": counts.by_pattern_sequence[(p, s)]}
                for p in range(N_PATTERNS)
                for s in Sequence
            ],
            "by_pattern": {str(p): n for p, n in counts.by_pattern().items()},
            "by_sequence": {str(int(s)): n for s, n in counts.by_sequence.items()},
            "by_group": dict(counts.by_group),
            "total": counts.total,
        },
        "proportions": {
            "groups": dict(props.pi_g),
            "pattern_sequence": [
                {"pattern": p, "sequence": int(s), "proportion": v} for (p, s), v in sorted(props.pi_ps.items())
            ],
        },
        "group_effects": {
            g: {
                name: {
                    "estimate": float(fit.betas[g].as_array()[k]),
                    "se": float(se[g][k]),
                    "estimable": (g, name) not in non_est,
                }
                for k, name in enumerate(EFFECT_NAMES)
            }
            for g in fit.groups
        },
        "pooled_means": {
            pos: {"estimate": float(inf.pooled.means[k]), "se": float(inf.pooled.se[k])}
            for k, pos in enumerate(POSITIONS)
        },
        "contrast": {
            "c": [float(v) for v in inf.contrast],
            "estimate": inf.gamma_hat,
            "se": inf.se,
            "z": inf.z,
            "p_two_sided": inf.p_two_sided,
            "ci_95": list(inf.ci_95),
        },
        "covariance": fit.sigma,
        "convergence": {
            "converged": fit.converged,
            "iterations": fit.iterations,
            "objective": fit.loglik,
            "initial_objective": fit.initial_objective,
            "scaled_gradient": fit.grad_norm,
        },
        "warnings": list(fit.warnings) + list(inf.warnings),
    }
