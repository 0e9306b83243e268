"""
trainer.py — Training instances, min-max normalisation and the Adam training loop.

Flow of one run:
  make_instances  →  chronological split  →  NormStats from the train split  →
  mini-batch Adam with early stopping on validation RMSE  →  restore best  →
  fine-tune on train + validation.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Literal, Mapping, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    BATCH_SIZE,
    DEFAULT_WEATHER_CATEGORIES,
    FINETUNE_EPOCHS,
    HISTORY_COLUMNS,
    LEARNING_RATE,
    MAX_EPOCHS,
    PATIENCE_EPOCHS,
    VALIDATION_FRACTION,
)
from externals import (
    ExternalRecord,
    ExternalSchema,
    day_of_week,
    encode_external,
    is_holiday,
)
from flowgrid import FlowSeries, GridSpec
from stresnet import ModelConfig, ModelInputs, ParameterSet, forward, init_params, loss_and_grads

logger = logging.getLogger(__name__)

_PREDICT_CHUNK = 256


# ── Instances ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainingInstance:
    """
    One supervised example for interval *t*.

    Branch inputs are already stacked along the channel axis (2·l × I × J,
    oldest interval first); a branch with length 0 holds None.
    """

    t: int
    closeness: np.ndarray | None
    period: np.ndarray | None
    trend: np.ndarray | None
    external: np.ndarray | None
    target: np.ndarray


def make_instances(
    series: FlowSeries,
    externals: Mapping[int, np.ndarray] | None,
    config: ModelConfig,
) -> list[TrainingInstance]:
    """
    Emit one instance per interval t whose dependencies t−i, t−i·p and t−i·q all
    fall inside t's own contiguous segment, ordered by t.

    Tensors are left in raw scale; see :func:`normalize_instances`.
    """
    instances: list[TrainingInstance] = []
    missing_ext = 0
    for seg in series.segments:
        for t in range(seg.start + config.max_lag, seg.end):
            ext = None
            if config.ext_dim > 0:
                ext = None if externals is None else externals.get(t)
                if ext is None:
                    missing_ext += 1
                    continue
            branches = {
                b: np.concatenate(
                    [seg.tensors[t - lag - seg.start] for lag in config.lags(b)], axis=0
                ).astype(np.float64)
                for b in config.active_branches
            }
            instances.append(
                TrainingInstance(
                    t=t,
                    closeness=branches.get("c"),
                    period=branches.get("p"),
                    trend=branches.get("q"),
                    external=None if ext is None else np.asarray(ext, dtype=np.float64),
                    target=seg.tensors[t - seg.start].astype(np.float64),
                )
            )
    if missing_ext:
        logger.warning("Skipped %d interval(s) without an external vector.", missing_ext)
    logger.debug("Built %d training instance(s) from %d interval(s).", len(instances), len(series))
    return instances


def stack_instances(instances: Sequence[TrainingInstance]) -> tuple[ModelInputs, np.ndarray]:
    """Batch instances into model inputs and an N×2×I×J target array."""

    def _stack(attr: str) -> np.ndarray | None:
        first = getattr(instances[0], attr)
        if first is None:
            return None
        return np.stack([getattr(inst, attr) for inst in instances])

    inputs = ModelInputs(
        closeness=_stack("closeness"),
        period=_stack("period"),
        trend=_stack("trend"),
        external=_stack("external"),
    )
    return inputs, np.stack([inst.target for inst in instances])


# ── Normalisation ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class NormStats:
    min: float
    max: float

    def __post_init__(self) -> None:
        if not self.max > self.min:
            raise ValueError(f"NormStats needs max > min, got min={self.min}, max={self.max}")


def minmax_fit(flows: Iterable[np.ndarray]) -> NormStats:
    lo, hi = math.inf, -math.inf
    for arr in flows:
        if arr is None or np.size(arr) == 0:
            continue
        lo = min(lo, float(np.min(arr)))
        hi = max(hi, float(np.max(arr)))
    if lo == math.inf:
        raise ValueError("minmax_fit needs at least one non-empty tensor")
    if hi <= lo:
        logger.warning("Constant training flows (%.3f); widening the range by 1.", lo)
        hi = lo + 1.0
    return NormStats(min=lo, max=hi)


def minmax_apply(x: np.ndarray, stats: NormStats) -> np.ndarray:
    """Map [min, max] affinely onto [−1, 1]."""
    return 2.0 * (np.asarray(x, dtype=np.float64) - stats.min) / (stats.max - stats.min) - 1.0


def minmax_invert(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) + 1.0) / 2.0 * (stats.max - stats.min) + stats.min


def instance_flows(instances: Iterable[TrainingInstance]) -> Iterable[np.ndarray]:
    for inst in instances:
        yield from (inst.closeness, inst.period, inst.trend, inst.target)


def normalize_instances(instances: Sequence[TrainingInstance], stats: NormStats) -> list[TrainingInstance]:
    def _norm(arr):
        return None if arr is None else minmax_apply(arr, stats)

    return [
        replace(
            inst,
            closeness=_norm(inst.closeness),
            period=_norm(inst.period),
            trend=_norm(inst.trend),
            target=minmax_apply(inst.target, stats),
        )
        for inst in instances
    ]


# ── External vectors ───────────────────────────────────────────────────────────

def external_vectors(
    grid: GridSpec,
    records: Iterable[ExternalRecord],
    schema: ExternalSchema,
    indices: Iterable[int],
) -> dict[int, np.ndarray]:
    """
    Encoded external vector for every interval in *indices*.

    Calendar fields always come from the grid clock; weather for an interval
    without a record repeats the most recent earlier record.
    """
    by_t = {r.interval: r for r in records}
    known = sorted(by_t)
    out: dict[int, np.ndarray] = {}
    k = -1
    for t in sorted(indices):
        while k + 1 < len(known) and known[k + 1] <= t:
            k += 1
        rec = by_t[known[k]] if k >= 0 else None
        dow = day_of_week(grid, t)
        out[t] = encode_external(
            day_of_week=dow,
            is_weekend=dow >= 5,
            is_holiday=is_holiday(grid, t, schema) or (rec is not None and rec.interval == t and rec.is_holiday),
            weather_code=rec.weather_code if rec else schema.other_slot,
            temperature=rec.temperature if rec else schema.temperature_range[0],
            wind_speed=rec.wind_speed if rec else schema.wind_range[0],
            schema=schema,
        )
    return out


# ── Optimiser ──────────────────────────────────────────────────────────────────

@dataclass
class AdamState:
    lr: float = LEARNING_RATE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: ParameterSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[ParameterSet, AdamState]:
    """One bias-corrected Adam update; tensors without a gradient are carried over."""
    step = state.step + 1
    new_tensors = dict(params.tensors)
    new_m, new_v = dict(state.m), dict(state.v)
    c1 = 1.0 - state.beta1 ** step
    c2 = 1.0 - state.beta2 ** step
    for name, g in grads.items():
        m = state.beta1 * state.m.get(name, 0.0) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, 0.0) + (1.0 - state.beta2) * g * g
        new_m[name], new_v[name] = m, v
        m_hat, v_hat = m / c1, v / c2
        new_tensors[name] = params.tensors[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return ParameterSet(new_tensors), replace(state, step=step, m=new_m, v=new_v)


# ── Configuration ──────────────────────────────────────────────────────────────

class TrainHyper(BaseModel):
    batch_size: int = Field(default=BATCH_SIZE, ge=1)
    lr: float = Field(default=LEARNING_RATE, gt=0)
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON
    patience: int = Field(default=PATIENCE_EPOCHS, ge=1)
    max_epochs: int = Field(default=MAX_EPOCHS, ge=0)
    finetune_epochs: int = Field(default=FINETUNE_EPOCHS, ge=0)
    val_fraction: float = Field(default=VALIDATION_FRACTION, ge=0.0, lt=1.0)
    split: Literal["chronological", "random"] = "chronological"


class TrainConfig(BaseModel):
    """
    JSON training document: model, hyperparameters, seed and artifact paths.

    ``model`` holds ModelConfig fields other than the grid size and ext_dim,
    which come from the grid file and the external schema.
    """

    model: dict[str, Any] = Field(default_factory=dict)
    use_externals: bool = True
    hyper: TrainHyper = Field(default_factory=TrainHyper)
    seed: int = 0
    n_weather: int = Field(default=DEFAULT_WEATHER_CATEGORIES, ge=2)
    holidays: list[str] = Field(default_factory=list)
    grid_path: str | None = None
    flows_path: str | None = None
    externals_path: str | None = None
    checkpoint_path: str | None = None
    history_path: str | None = None

    def model_config_for(self, grid: GridSpec, ext_dim: int) -> ModelConfig:
        return ModelConfig(**{**self.model, "rows": grid.rows, "cols": grid.cols, "ext_dim": ext_dim})


@dataclass
class TrainResult:
    params: ParameterSet
    stats: NormStats
    history: pd.DataFrame
    best_val_rmse: float
    final_val_rmse: float
    best_epoch: int = 0
    n_train: int = 0
    n_val: int = 0


# ── Training ───────────────────────────────────────────────────────────────────

def split_instances(
    instances: Sequence[TrainingInstance],
    hyper: TrainHyper,
    seed: int = 0,
) -> tuple[list[TrainingInstance], list[TrainingInstance]]:
    """Train / validation split; chronological keeps the last fraction for validation."""
    n = len(instances)
    n_val = 0
    if n > 1 and hyper.val_fraction > 0:
        n_val = min(max(1, int(round(n * hyper.val_fraction))), n - 1)
    if hyper.split == "random":
        order = np.random.default_rng(seed).permutation(n)
        val_idx = set(order[n - n_val:].tolist()) if n_val else set()
        train = [inst for k, inst in enumerate(instances) if k not in val_idx]
        val = [inst for k, inst in enumerate(instances) if k in val_idx]
        return train, val
    return list(instances[: n - n_val]), list(instances[n - n_val:])


def predict_normalized(
    params: ParameterSet,
    config: ModelConfig,
    instances: Sequence[TrainingInstance],
) -> np.ndarray:
    """Inference-mode predictions (normalised scale) for already-normalised instances."""
    preds = []
    for lo in range(0, len(instances), _PREDICT_CHUNK):
        inputs, _ = stack_instances(instances[lo:lo + _PREDICT_CHUNK])
        preds.append(forward(params, config, inputs))
    return np.concatenate(preds, axis=0) if preds else np.zeros((0,) + config.output_shape)


def raw_rmse(
    params: ParameterSet,
    config: ModelConfig,
    instances: Sequence[TrainingInstance],
    stats: NormStats,
) -> float:
    """RMSE in raw flow units over normalised instances."""
    if not instances:
        return float("nan")
    pred = minmax_invert(predict_normalized(params, config, instances), stats)
    truth = minmax_invert(np.stack([inst.target for inst in instances]), stats)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def train(
    dataset: Sequence[TrainingInstance],
    config: ModelConfig,
    hyper: TrainHyper | None = None,
    seed: int = 0,
) -> TrainResult:
    """
    Train the residual flow model on raw-scale instances.

    Parameters
    ----------
    dataset : instances from :func:`make_instances`, ordered by t
    config  : model architecture
    hyper   : optimisation settings (defaults from config.py)
    seed    : drives initialisation, the random split and batch shuffling

    Returns
    -------
    TrainResult with the restored-then-fine-tuned parameters; ``best_val_rmse`` is
    the early-stopping optimum and ``final_val_rmse`` the value after fine-tuning.
    """
    hyper = hyper or TrainHyper()
    if not dataset:
        raise ValueError("train needs at least one instance")

    train_raw, val_raw = split_instances(dataset, hyper, seed)
    stats = minmax_fit(instance_flows(train_raw))
    train_set = normalize_instances(train_raw, stats)
    val_set = normalize_instances(val_raw, stats)
    monitor = val_set or train_set
    logger.info("Training on %d instance(s), validating on %d (stats %.3f..%.3f).",
                len(train_set), len(val_set), stats.min, stats.max)

    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    state = AdamState(lr=hyper.lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps)
    rows: list[dict] = []

    best_rmse = raw_rmse(params, config, monitor, stats)
    best_params, best_epoch, wait = params.copy(), 0, 0
    for epoch in range(1, hyper.max_epochs + 1):
        params, state, train_loss = _run_epoch(params, state, config, train_set, hyper, rng)
        val_rmse = raw_rmse(params, config, monitor, stats)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_rmse": val_rmse})
        logger.info("Epoch %d: train_loss=%.6f val_rmse=%.4f", epoch, train_loss, val_rmse)
        if val_rmse < best_rmse:
            best_rmse, best_params, best_epoch, wait = val_rmse, params.copy(), epoch, 0
        else:
            wait += 1
            if wait >= hyper.patience:
                logger.info("Early stop after epoch %d (best epoch %d).", epoch, best_epoch)
                break

    params = best_params
    final_rmse = best_rmse
    full_set = train_set + val_set
    for k in range(hyper.finetune_epochs if hyper.max_epochs > 0 else 0):
        params, state, train_loss = _run_epoch(params, state, config, full_set, hyper, rng)
        final_rmse = raw_rmse(params, config, monitor, stats)
        rows.append({"epoch": len(rows) + 1, "train_loss": train_loss, "val_rmse": final_rmse})
        logger.info("Fine-tune %d: train_loss=%.6f val_rmse=%.4f", k + 1, train_loss, final_rmse)

    history = pd.DataFrame(rows, columns=HISTORY_COLUMNS)
    return TrainResult(
        params=params,
        stats=stats,
        history=history,
        best_val_rmse=best_rmse,
        final_val_rmse=final_rmse,
        best_epoch=best_epoch,
        n_train=len(train_set),
        n_val=len(val_set),
    )


# ── Private helpers ────────────────────────────────────────────────────────────

def _run_epoch(
    params: ParameterSet,
    state: AdamState,
    config: ModelConfig,
    instances: Sequence[TrainingInstance],
    hyper: TrainHyper,
    rng: np.random.Generator,
) -> tuple[ParameterSet, AdamState, float]:
    order = rng.permutation(len(instances))
    losses, weights = [], []
    for lo in range(0, len(order), hyper.batch_size):
        batch = [instances[k] for k in order[lo:lo + hyper.batch_size]]
        inputs, target = stack_instances(batch)
        value, grads, updates = loss_and_grads(params, config, inputs, target, training=True)
        params, state = adam_step(params, grads, state)
        if updates:
            params = ParameterSet({**params.tensors, **updates})
        losses.append(value)
        weights.append(len(batch))
    return params, state, float(np.average(losses, weights=weights))
