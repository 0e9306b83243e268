"""
report_generator.py — Write training histories, forecast sidecars and experiment reports.
"""
import json
import logging
import os
from datetime import datetime, timezone
from typing import TYPE_CHECKING, Any

import pandas as pd

from config import HISTORY_COLUMNS, REPORTS_DIR

if TYPE_CHECKING:
    from evaluator import EvalReport, FusionWeightStats

logger = logging.getLogger(__name__)


# ── Training history ───────────────────────────────────────────────────────────

def write_history_csv(history: pd.DataFrame, path: str) -> str:
    """Write ``epoch,train_loss,val_rmse`` rows."""
    _ensure_parent(path)
    history[HISTORY_COLUMNS].to_csv(path, index=False, encoding="utf-8", lineterminator="\n")
    logger.debug("History written: %s", path)
    return path


def read_history_csv(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise FileNotFoundError(f"No training history at {path}.")
    df = pd.read_csv(path, encoding="utf-8")
    for col in HISTORY_COLUMNS:
        df[col] = pd.to_numeric(df[col], errors="coerce")
    return df


# ── JSON sidecars ──────────────────────────────────────────────────────────────

def write_forecast_sidecar(path: str, meta: dict[str, Any]) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    logger.debug("Sidecar written: %s", path)
    return path


# ── Experiment report ──────────────────────────────────────────────────────────

def write_experiment_report(report: "EvalReport", out_dir: str | None = None) -> dict[str, str]:
    """
    Write <name>.csv, <name>_steps.csv, <name>.json and <name>.md under
    reports/<name>/ (or *out_dir*).

    Returns {kind: path}.
    """
    out_dir = out_dir or os.path.join(REPORTS_DIR, report.name)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "csv": os.path.join(out_dir, f"{report.name}.csv"),
        "steps": os.path.join(out_dir, f"{report.name}_steps.csv"),
        "json": os.path.join(out_dir, f"{report.name}.json"),
        "markdown": os.path.join(out_dir, f"{report.name}.md"),
    }
    report.results.to_csv(paths["csv"], index=False, encoding="utf-8", lineterminator="\n")
    report.per_step.to_csv(paths["steps"], index=False, encoding="utf-8", lineterminator="\n")
    payload = {
        "name": report.name,
        "config_hash": report.config_hash,
        "metadata": report.metadata,
        "results": json.loads(report.results.to_json(orient="records")),
        "per_step": json.loads(report.per_step.to_json(orient="records")),
    }
    with open(paths["json"], "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    with open(paths["markdown"], "w", encoding="utf-8") as fh:
        fh.write(_build_markdown(report))
    logger.info("Experiment report written to %s", out_dir)
    return paths


def _build_markdown(report: "EvalReport") -> str:
    lines = [
        f"# Experiment: {report.name}",
        f"**Config hash:** `{report.config_hash}`  ",
        f"**Generated:** {datetime.now(timezone.utc):%Y-%m-%d %H:%M:%S} UTC",
        "",
        "---",
        "",
        "## 1. RMSE Ranking",
        "",
        "| Rank | Model | Seed | RMSE | Val RMSE | Epochs |",
        "|-----:|:------|-----:|-----:|---------:|-------:|",
    ]
    for _, row in report.results.iterrows():
        seed = "n/a" if row["seed"] < 0 else str(row["seed"])
        lines.append(
            f"| {row['rank']} | {row['model']} | {seed} | {row['rmse']:.4f} | "
            f"{_fmt_float(row['best_val_rmse'])} | {row['epochs']} |"
        )

    if not report.per_step.empty:
        curves = report.per_step.groupby(["model", "step"])["rmse"].mean().unstack("step")
        steps = list(curves.columns)
        lines += [
            "",
            "---",
            "",
            "## 2. Multi-step RMSE (mean over seeds)",
            "",
            "| Model | " + " | ".join(f"Step {s}" for s in steps) + " |",
            "|:------|" + "|".join("-----:" for _ in steps) + "|",
        ]
        for model, row in curves.iterrows():
            lines.append(f"| {model} | " + " | ".join(_fmt_float(row[s]) for s in steps) + " |")

    lines += ["", "---", "", "## Run metadata", ""]
    for key, value in report.metadata.items():
        lines.append(f"- **{key}:** {value}")
    return "\n".join(lines) + "\n"


# ── Fusion weights ─────────────────────────────────────────────────────────────

def write_fusion_summary(stats: "FusionWeightStats", path: str) -> str:
    _ensure_parent(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"threshold": stats.threshold, "fraction_below": stats.fractions}, fh, indent=2)
    return path


# ── Formatting helpers ─────────────────────────────────────────────────────────

def _fmt_float(val) -> str:
    if val is None or pd.isna(val):
        return "N/A"
    return f"{float(val):.4f}"


def _ensure_parent(path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
