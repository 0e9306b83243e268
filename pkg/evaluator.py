"""
evaluator.py — RMSE, experiment runner and fusion-weight analysis.

An experiment trains every (variant, seed) pair on the intervals before the
test span, scores single-step (and optionally k-step) predictions on the test
span in raw flow units, adds the baseline rows and ranks everything.
"""
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from baselines import ALL_BASELINES, BaseBaseline, NoMatchingHistoryError
from checkpoint import Checkpoint
from config import DEFAULT_WEATHER_CATEGORIES, FUSION_THRESHOLD
from data_manager import load_grid, load_series, read_externals_csv
from externals import ExternalRecord, ExternalSchema
from flowgrid import FlowSeries, Segment
from forecaster import InsufficientHistoryError, LoadedModel, predict_multi
from stresnet import BRANCHES, ModelConfig, ParameterSet
from synthcity import SynthConfig, generate
from trainer import (
    TrainHyper,
    external_vectors,
    make_instances,
    minmax_invert,
    normalize_instances,
    predict_normalized,
    raw_rmse,
    split_instances,
    train,
)

logger = logging.getLogger(__name__)

BRANCH_LABELS = {"c": "closeness", "p": "period", "q": "trend"}


# ── Metric ─────────────────────────────────────────────────────────────────────

def rmse(preds, truths) -> float:
    """sqrt(mean squared error) over every element of every tensor."""
    p = np.asarray(preds, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} != truth shape {y.shape}")
    if y.size == 0:
        raise ValueError("rmse needs at least one ground truth")
    return float(np.sqrt(np.mean((p - y) ** 2)))


# ── Experiment spec ────────────────────────────────────────────────────────────

class DatasetSpec(BaseModel):
    synth: SynthConfig | None = None
    grid_path: str | None = None
    flows_path: str | None = None
    externals_path: str | None = None
    n_weather: int = Field(default=DEFAULT_WEATHER_CATEGORIES, ge=2)
    holidays: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_source(self) -> "DatasetSpec":
        if self.synth is None and not (self.grid_path and self.flows_path):
            raise ValueError("dataset needs either 'synth' or both 'grid_path' and 'flows_path'")
        return self


class ModelVariant(BaseModel):
    name: str
    overrides: dict[str, Any] = Field(default_factory=dict)
    use_externals: bool = True


class ExperimentSpec(BaseModel):
    name: str
    dataset: DatasetSpec
    test_intervals: int = Field(ge=1)
    base_model: dict[str, Any] = Field(default_factory=dict)
    variants: list[ModelVariant] = Field(min_length=1)
    hyper: TrainHyper = Field(default_factory=TrainHyper)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    horizon: int = Field(default=1, ge=1)
    baselines: list[str] = Field(default_factory=lambda: ["HA"])

    @model_validator(mode="after")
    def _check_names(self) -> "ExperimentSpec":
        known = {b.name for b in ALL_BASELINES}
        unknown = [b for b in self.baselines if b not in known]
        if unknown:
            raise ValueError(f"unknown baseline(s) {unknown}; choose from {sorted(known)}")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ValueError(f"variant names must be unique, got {names}")
        return self


def config_hash(spec: ExperimentSpec) -> str:
    canonical = json.dumps(spec.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


@dataclass
class EvalReport:
    name: str
    config_hash: str
    results: pd.DataFrame
    per_step: pd.DataFrame
    metadata: dict[str, Any] = field(default_factory=dict)

    def rmse_of(self, model: str, seed: int | None = None) -> float:
        rows = self.results[self.results["model"] == model]
        if seed is not None:
            rows = rows[rows["seed"] == seed]
        return float(rows["rmse"].mean())


# ── Runner ─────────────────────────────────────────────────────────────────────

def load_dataset(dataset: DatasetSpec) -> tuple[FlowSeries, list[ExternalRecord]]:
    if dataset.synth is not None:
        synth = generate(dataset.synth)
        return synth.truth, synth.externals
    grid = load_grid(dataset.grid_path)
    series = load_series(dataset.flows_path, grid)
    records = read_externals_csv(dataset.externals_path) if dataset.externals_path else []
    return series, records


def truncate_series(series: FlowSeries, end: int) -> FlowSeries:
    """Intervals strictly before *end*."""
    segs = [
        Segment(start=s.start, tensors=s.tensors[: max(0, min(s.end, end) - s.start)])
        for s in series.segments if s.start < end
    ]
    return FlowSeries(grid=series.grid, segments=segs)


def run_experiment(spec: ExperimentSpec) -> EvalReport:
    """
    Train and score every variant × seed of *spec*, plus its baselines.

    Returns
    -------
    EvalReport whose ``results`` has one row per (model, seed) ranked by RMSE and
    whose ``per_step`` holds k-step RMSE curves when ``spec.horizon > 1``.
    """
    started = time.time()
    series, records = load_dataset(spec.dataset)
    if not series.segments:
        raise ValueError("dataset holds no flows")
    last = series.segments[-1]
    if spec.test_intervals >= len(last.tensors):
        raise ValueError(
            f"test span of {spec.test_intervals} interval(s) does not fit the last segment "
            f"({len(last.tensors)} interval(s))"
        )
    test_start = last.end - spec.test_intervals
    test_idx = list(range(test_start, last.end))
    history = truncate_series(series, test_start)

    train_records = [r for r in records if r.interval < test_start]
    schema = ExternalSchema.fit(train_records, spec.dataset.n_weather, spec.dataset.holidays)
    ext = external_vectors(series.grid, records, schema, series.indices())
    truths = np.stack([series.get(t) for t in test_idx]).astype(np.float64)

    rows: list[dict] = []
    steps: list[dict] = []
    for variant in spec.variants:
        model_cfg = ModelConfig(**{
            **spec.base_model,
            **variant.overrides,
            "rows": series.grid.rows,
            "cols": series.grid.cols,
            "ext_dim": schema.dim if variant.use_externals else 0,
        })
        for seed in spec.seeds:
            logger.info("Experiment %s: variant %s, seed %d ...", spec.name, variant.name, seed)
            result = train(make_instances(history, ext, model_cfg), model_cfg, spec.hyper, seed)
            test_set = [i for i in make_instances(series, ext, model_cfg) if i.t >= test_start]
            if not test_set:
                raise ValueError(f"variant {variant.name!r} yields no test instances")
            normalized = normalize_instances(test_set, result.stats)
            preds = minmax_invert(predict_normalized(result.params, model_cfg, normalized), result.stats)
            raw_truth = np.stack([inst.target for inst in test_set])
            rows.append({
                "model": variant.name,
                "seed": seed,
                "rmse": rmse(preds, raw_truth),
                "n_truths": int(raw_truth.size),
                "best_val_rmse": result.best_val_rmse,
                "epochs": len(result.history),
            })
            if spec.horizon > 1:
                model = LoadedModel(result.params, model_cfg, result.stats, f"{variant.name}/{seed}")
                for k, value in enumerate(_multi_step_rmse(model, series, ext, test_idx, spec.horizon), 1):
                    steps.append({"model": variant.name, "seed": seed, "step": k, "rmse": value})

    for name in spec.baselines:
        baseline = _baseline(name)
        try:
            preds = baseline.predict_many(series, test_idx)
        except NoMatchingHistoryError as exc:
            logger.warning("Baseline %s skipped: %s", name, exc)
            continue
        rows.append({"model": name, "seed": -1, "rmse": rmse(preds, truths),
                     "n_truths": int(truths.size), "best_val_rmse": float("nan"), "epochs": 0})

    results = _build_comparison(rows)
    report = EvalReport(
        name=spec.name,
        config_hash=config_hash(spec),
        results=results,
        per_step=pd.DataFrame(steps, columns=["model", "seed", "step", "rmse"]),
        metadata={
            "test_start": test_start,
            "test_intervals": spec.test_intervals,
            "horizon": spec.horizon,
            "seeds": spec.seeds,
            "elapsed_seconds": round(time.time() - started, 3),
        },
    )
    _print_ranking(report)
    return report


def evaluate_checkpoint(
    ckpt: Checkpoint,
    series: FlowSeries,
    records: list[ExternalRecord],
) -> dict[str, float]:
    """
    Recompute the validation RMSE of a trained checkpoint from the artifacts it
    was trained on, using the split recorded in its metadata.
    """
    meta = ckpt.metadata
    hyper = TrainHyper.model_validate(meta.get("hyper", {}))
    ext = None
    if ckpt.config.ext_dim > 0:
        schema = ExternalSchema.model_validate(meta["external_schema"])
        ext = external_vectors(series.grid, records, schema, series.indices())
    dataset = make_instances(series, ext, ckpt.config)
    train_set, val_set = split_instances(dataset, hyper, int(meta.get("seed", 0)))
    monitor = normalize_instances(val_set or train_set, ckpt.stats)
    value = raw_rmse(ckpt.params, ckpt.config, monitor, ckpt.stats)
    logger.info("Checkpoint %s: validation RMSE %.6f over %d instance(s).",
                ckpt.checkpoint_id, value, len(monitor))
    return {"val_rmse": value, "n_val": float(len(monitor)),
            "recorded_val_rmse": float(meta.get("final_val_rmse", float("nan")))}


# ── Fusion weights ─────────────────────────────────────────────────────────────

@dataclass
class FusionWeightStats:
    threshold: float
    fractions: dict[str, float]
    maps: dict[str, np.ndarray]


def fusion_weight_stats(
    w_c: np.ndarray | None,
    w_p: np.ndarray | None,
    w_q: np.ndarray | None,
    threshold: float = FUSION_THRESHOLD,
) -> FusionWeightStats:
    """
    Fraction of regions whose |weight| is below *threshold*, per component.

    Maps are the per-region mean |weight| over channels, ready for heatmap export.
    """
    fractions, maps = {}, {}
    for label, w in (("closeness", w_c), ("period", w_p), ("trend", w_q)):
        if w is None:
            continue
        w = np.abs(np.asarray(w, dtype=np.float64))
        fractions[label] = float(np.mean(w < threshold))
        maps[label] = w.mean(axis=0) if w.ndim == 3 else w
    return FusionWeightStats(threshold=threshold, fractions=fractions, maps=maps)


def fusion_weight_stats_from_params(params: ParameterSet, threshold: float = FUSION_THRESHOLD) -> FusionWeightStats:
    weights = {b: params.tensors.get(f"fusion.{b}") for b in BRANCHES}
    return fusion_weight_stats(weights["c"], weights["p"], weights["q"], threshold)


# ── Private helpers ────────────────────────────────────────────────────────────

def _baseline(name: str) -> BaseBaseline:
    for b in ALL_BASELINES:
        if b.name == name:
            return b
    raise ValueError(f"unknown baseline {name!r}")


def _multi_step_rmse(
    model: LoadedModel,
    series: FlowSeries,
    ext: dict[int, np.ndarray],
    test_idx: list[int],
    k: int,
) -> list[float]:
    """Roll out k steps from every test origin whose k targets are all observed."""
    preds: list[list[np.ndarray]] = [[] for _ in range(k)]
    truths: list[list[np.ndarray]] = [[] for _ in range(k)]
    for n in test_idx:
        if not all(series.has(n + i) for i in range(k)):
            continue
        externals = [ext[n + i] for i in range(k)] if model.config.ext_dim > 0 else None
        try:
            records = predict_multi(model, truncate_series(series, n), externals, k, produced_at=0.0)
        except InsufficientHistoryError:
            continue
        for i, rec in enumerate(records):
            preds[i].append(rec.tensor)
            truths[i].append(series.get(n + i))
    return [rmse(np.stack(p), np.stack(y)) if p else float("nan") for p, y in zip(preds, truths)]


def _build_comparison(rows: list[dict]) -> pd.DataFrame:
    comparison = pd.DataFrame(rows, columns=["model", "seed", "rmse", "n_truths", "best_val_rmse", "epochs"])
    comparison.sort_values(["rmse", "model", "seed"], inplace=True, kind="stable")
    comparison.reset_index(drop=True, inplace=True)
    comparison.insert(0, "rank", range(1, len(comparison) + 1))
    return comparison


def _print_ranking(report: EvalReport) -> None:
    """Print a formatted ranking table to console."""
    print("\n" + "=" * 64)
    print(f"  {report.name}: RMSE ranking (config {report.config_hash})")
    print("=" * 64)
    print(f"{'Rank':<5} {'Model':<22} {'Seed':>5} {'RMSE':>10} {'Val RMSE':>10} {'Epochs':>7}")
    print("-" * 64)
    for _, row in report.results.iterrows():
        seed = "-" if row["seed"] < 0 else str(row["seed"])
        print(
            f"{row['rank']:<5} {row['model']:<22} {seed:>5} {row['rmse']:>10.4f} "
            f"{row['best_val_rmse']:>10.4f} {row['epochs']:>7}"
        )
    print("=" * 64)
    if not report.per_step.empty:
        curves = report.per_step.groupby(["model", "step"])["rmse"].mean().unstack("step")
        print("  Multi-step RMSE (mean over seeds)")
        print(curves.to_string(float_format=lambda v: f"{v:.4f}"))
        print("=" * 64 + "\n")
