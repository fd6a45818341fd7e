"""Experiment driver: repetitions, reports, equivalence checks, export.

A report bundles one configuration with per-repetition metrics and token
outputs plus a mean row.  Repetition ``i`` shifts the prompt seed by ``i``
(and with it the synthetic draft's accept pattern), so averages are over
genuinely different trajectories while staying fully deterministic under
the virtual clock.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

from .engine import (
    ExperimentConfig,
    RunMetrics,
    SimResult,
    build_model,
    simulate,
)

# columns exported per repetition, stable order (the CSV/JSON contract)
METRIC_FIELDS = (
    "tokens_generated",
    "duration",
    "generation_speed",
    "ttft",
    "itl",
    "acceptance_rate",
    "examined",
    "matched",
    "runs_started",
    "spec_runs",
    "cancelled_invalid",
    "cancelled_superfluous",
    "cancelled_runs",
    "drained_runs",
    "alloc_stalls",
    "inflight_mean",
)


class BenchError(RuntimeError):
    pass


def parse_config_file(path: str) -> Dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise BenchError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, value, target_type):
    if value is None or not isinstance(value, str):
        return value
    if target_type is bool:
        low = value.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise BenchError(f"{name}: cannot parse boolean from {value!r}")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def config_from_sources(file_values: Optional[Dict[str, str]] = None,
                        overrides: Optional[Dict[str, object]] = None
                        ) -> ExperimentConfig:
    """Build a config from file values with CLI overrides on top."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    merged: Dict[str, object] = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            key = key.replace("-", "_")
            if key not in fields:
                raise BenchError(f"unknown config key {key!r}")
            if key == "eos_token":
                if isinstance(value, str) and value.lower() in ("", "none"):
                    merged[key] = None
                else:
                    merged[key] = int(value)
            elif key == "node_weights":
                if isinstance(value, str):
                    value = value.strip()
                    merged[key] = (
                        tuple(float(x) for x in value.split(",")) if value else None
                    )
                else:
                    merged[key] = tuple(value) if value is not None else None
            else:
                base_type = type(getattr(ExperimentConfig, key, ""))
                merged[key] = _coerce(key, value, base_type)
    cfg = ExperimentConfig(**merged)
    cfg.validate()
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if d.get("node_weights") is not None:
        d["node_weights"] = list(d["node_weights"])
    return d


@dataclass
class Report:
    config: ExperimentConfig
    runs: List[RunMetrics]
    tokens: List[List[int]]          # one generated-token list per repetition
    mean: Dict[str, float]

    def to_dict(self, include_wall: bool = True) -> dict:
        return {
            "config": config_to_dict(self.config),
            "repetitions": len(self.runs),
            "runs": [m.to_dict(include_wall=include_wall) for m in self.runs],
            "mean": dict(self.mean),
            "tokens": [list(t) for t in self.tokens],
        }

    def checksum(self) -> str:
        """Deterministic digest; wall-clock timings excluded."""
        blob = json.dumps(self.to_dict(include_wall=False), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def run_experiment(cfg: ExperimentConfig) -> Report:
    """Execute the configured mode, repetitions averaged."""
    cfg.validate()
    target = build_model(cfg.target_config())
    draft = None
    if cfg.uses_draft() and cfg.draft_backend == "toy":
        draft = build_model(cfg.draft_config())
    runs: List[RunMetrics] = []
    tokens: List[List[int]] = []
    for rep in range(cfg.repetitions):
        rep_cfg = replace(cfg, prompt_seed=cfg.prompt_seed + rep)
        result: SimResult = simulate(rep_cfg, target_model=target,
                                     draft_model=draft)
        runs.append(result.metrics)
        tokens.append(result.tokens)
    mean = {
        f: sum(getattr(m, f) for m in runs) / len(runs) for f in METRIC_FIELDS
    }
    return Report(config=cfg, runs=runs, tokens=tokens, mean=mean)


@dataclass(frozen=True)
class CompareResult:
    ok: bool
    detail: str
    first_diff: Optional[Tuple[int, int]] = None   # (repetition, token index)


_COMPARE_KEYS = ("vocab_size", "embed_dim", "target_layers", "n_heads",
                 "target_seed", "prompt_seed", "prompt_len", "gen_len")


def compare_outputs(reports: Sequence[Report]) -> CompareResult:
    """Byte-exact token comparison across reports of the same experiment."""
    if len(reports) < 2:
        raise BenchError("need at least two reports to compare")
    ref = reports[0]
    for other in reports[1:]:
        for key in _COMPARE_KEYS:
            if getattr(ref.config, key) != getattr(other.config, key):
                raise BenchError(
                    f"mismatched configs: {key} differs "
                    f"({getattr(ref.config, key)!r} vs {getattr(other.config, key)!r})"
                )
        if len(ref.tokens) != len(other.tokens):
            return CompareResult(False, "repetition counts differ")
        for rep, (a, b) in enumerate(zip(ref.tokens, other.tokens)):
            if a == b:
                continue
            n = min(len(a), len(b))
            idx = next((i for i in range(n) if a[i] != b[i]), n)
            return CompareResult(
                False,
                f"outputs diverge: mode {other.config.mode!r} differs from "
                f"{ref.config.mode!r} at repetition {rep}, token {idx}",
                first_diff=(rep, idx),
            )
    return CompareResult(True, f"{len(reports)} reports byte-identical")


def export(report: Report, fmt: str, path: str) -> None:
    """Write a report as JSON (full structure) or CSV (reps + mean row)."""
    if fmt == "json":
        with open(path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("rep", "mode") + METRIC_FIELDS + ("token_checksum",))
            for i, m in enumerate(report.runs):
                writer.writerow(
                    [i, m.mode]
                    + [getattr(m, f) for f in METRIC_FIELDS]
                    + [m.token_checksum]
                )
            writer.writerow(
                ["mean", report.config.mode]
                + [report.mean[f] for f in METRIC_FIELDS]
                + [""]
            )
    else:
        raise BenchError(f"unknown export format {fmt!r}")


def load_report(path: str) -> Report:
    with open(path) as fh:
        data = json.load(fh)
    cfg = config_from_sources(overrides={
        k: (tuple(v) if isinstance(v, list) else v)
        for k, v in data["config"].items()
    })
    runs = [RunMetrics(**{**r, "bytes_by_tag": dict(r["bytes_by_tag"]),
                          "msgs_by_tag": dict(r["msgs_by_tag"]),
                          "wall_seconds": r.get("wall_seconds", 0.0)})
            for r in data["runs"]]
    return Report(config=cfg, runs=runs,
                  tokens=[list(t) for t in data["tokens"]],
                  mean=dict(data["mean"]))


def sweep(base: ExperimentConfig, param: str,
          values: Sequence) -> List[Report]:
    """One report per swept value of a single config field."""
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    if param not in fields:
        raise BenchError(f"unknown sweep parameter {param!r}")
    reports = []
    for v in values:
        if param != "mode" and isinstance(v, str):
            v = _coerce(param, v, type(getattr(base, param)))
        reports.append(run_experiment(replace(base, **{param: v})))
    return reports


def sweep_to_csv(reports: Sequence[Report], param: str, path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow((param, "rep", "mode") + METRIC_FIELDS + ("token_checksum",))
        for rep_obj in reports:
            value = getattr(rep_obj.config, param)
            for i, m in enumerate(rep_obj.runs):
                writer.writerow(
                    [value, i, m.mode]
                    + [getattr(m, f) for f in METRIC_FIELDS]
                    + [m.token_checksum]
                )
            writer.writerow(
                [value, "mean", rep_obj.config.mode]
                + [rep_obj.mean[f] for f in METRIC_FIELDS]
                + [""]
            )


def consistency_gap(metrics: RunMetrics) -> float:
    """Relative gap between generation speed and the TTFT+ITL bookkeeping.

    ``k`` accepted tokens in a window imply
    ``speed = k / (ttft + sum of inter-token gaps)``; the recomputed value
    must agree with the reported speed to within 1%.
    """
    k = max(metrics.tokens_generated - 1, 0)
    if k == 0 or metrics.duration <= 0:
        return 0.0
    recon = k / (metrics.ttft + metrics.itl * max(k - 1, 0))
    return abs(recon - metrics.generation_speed) / metrics.generation_speed
