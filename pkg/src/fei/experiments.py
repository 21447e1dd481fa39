"""Composite runs: pretrain-then-probe, the ablation suite and masking-strategy comparisons."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fei.data import Dataset
from fei.errors import FeiError
from fei.evaluation import EvalConfig, MetricsReport, evaluate
from fei.model import EncoderConfig, FeiModel
from fei.pretrain import PretrainResult, TrainConfig, ablation_configs, build_model, pretrain

logger = logging.getLogger(__name__)


@dataclass
class Splits:
    train: Dataset
    val: Optional[Dataset]
    test: Dataset


@dataclass
class ProbeRun:
    name: str
    report: Optional[MetricsReport] = None
    pretrain: Optional[PretrainResult] = None
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


def pretrain_and_probe(name: str, pre_train: Dataset, pre_val: Optional[Dataset], downstream: Splits,
                       enc_cfg: EncoderConfig, cfg: TrainConfig, eval_cfg: EvalConfig) -> ProbeRun:
    result = pretrain(pre_train.values, enc_cfg, cfg, pre_val.values if pre_val is not None else None)
    model = result.best_model()
    ev = evaluate(model, downstream.train, downstream.val, downstream.test, eval_cfg)
    return ProbeRun(name, ev.report, result)


def probe_untrained(enc_cfg: EncoderConfig, cfg: TrainConfig, downstream: Splits, eval_cfg: EvalConfig) -> MetricsReport:
    """Linear-probe baseline on a freshly initialized encoder."""
    model: FeiModel = build_model(enc_cfg, cfg)
    return evaluate(model, downstream.train, downstream.val, downstream.test, eval_cfg).report


def run_ablation_suite(pre_train: Dataset, pre_val: Optional[Dataset], downstream: Splits,
                       enc_cfg: EncoderConfig, cfg: TrainConfig, eval_cfg: EvalConfig) -> list[ProbeRun]:
    """Full model plus each single ablation; one failing run does not stop the others."""
    runs = []
    for name, run_cfg in ablation_configs(cfg):
        logger.info("ablation run %s", name)
        try:
            runs.append(pretrain_and_probe(name, pre_train, pre_val, downstream, enc_cfg, run_cfg, eval_cfg))
        except (FeiError, RuntimeError, ValueError) as exc:
            logger.error("ablation %s failed: %s", name, exc)
            runs.append(ProbeRun(name, error=str(exc)))
    return runs


def compare_strategies(pre_train: Dataset, pre_val: Optional[Dataset], targets: dict[str, Splits],
                       enc_cfg: EncoderConfig, cfg: TrainConfig, eval_cfg: EvalConfig,
                       strategies=("dfm", "cfm", "tdm")) -> list[ProbeRun]:
    """Pretrain once per masking strategy and probe every downstream target set."""
    runs = []
    for strategy in strategies:
        run_cfg = copy.deepcopy(cfg)
        run_cfg.masking_strategy = strategy
        result = pretrain(pre_train.values, enc_cfg, run_cfg, pre_val.values if pre_val is not None else None)
        model = result.best_model()
        reports = {name: evaluate(model, s.train, s.val, s.test, eval_cfg).report for name, s in targets.items()}
        runs.append(ProbeRun(strategy.upper(), pretrain=result, extra={"reports": reports}))
    return runs


METRIC_COLUMNS = {
    "classification": ("accuracy", "precision", "recall", "f1"),
    "regression": ("mse", "mae"),
}


def table_rows(runs: list[ProbeRun], task: str = "classification", reference: str = "FEI") -> list[dict]:
    """One row per run with metric columns and deltas against the reference row."""
    cols = METRIC_COLUMNS[task]
    ref = next((r for r in runs if r.name == reference and r.ok), None)
    rows = []
    for run in runs:
        row = {"model": run.name, "status": "ok" if run.ok else f"failed: {run.error}"}
        for col in cols:
            val = getattr(run.report, col) if run.ok else math.nan
            row[col] = val
            base = getattr(ref.report, col) if ref is not None else math.nan
            row[f"delta_{col}"] = val - base
        rows.append(row)
    return rows


def write_table(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})


def spectral_ceiling(train: Dataset, test: Dataset, seed: int = 0) -> float:
    """Accuracy of multinomial logistic regression on one-sided amplitude spectra."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    def feats(ds):
        return np.abs(np.fft.rfft(ds.values, axis=-1)).reshape(len(ds), -1)

    scaler = StandardScaler().fit(feats(train))
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(scaler.transform(feats(train)), train.labels)
    return float((clf.predict(scaler.transform(feats(test))) == test.labels).mean())
