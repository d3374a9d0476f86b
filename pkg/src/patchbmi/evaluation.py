"""Mean absolute error evaluation and result tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .data import Manifest, ManifestRecord, load_sample
from .ensemble import EnsembleModel, predict_patches
from .landmarks import REGIONS, extract_all_patches

REPORT_COLUMNS = ("dataset", "split", "n", "mae", *(f"mae_{r}" for r in REGIONS), "failures")

# Published test-set MAEs for the patch ensemble, kept for context only; they
# depend on the original datasets, splits and landmark detector.
PUBLISHED_INTRA_MAE = {
    "VisualBMI": {"train": 6.45, "val": 6.47, "test": 6.51},
    "IllinoisDOC": {"train": 3.67, "val": 3.57, "test": 3.58},
    "FIW-BMI": {"train": 6.14, "val": 5.76, "test": 5.98},
}
PUBLISHED_CROSS_MAE = {
    "VisualBMI": {"IllinoisDOC": 5.97, "FIW-BMI": 6.62},
    "IllinoisDOC": {"VisualBMI": 7.26, "FIW-BMI": 6.61},
    "FIW-BMI": {"IllinoisDOC": 4.50, "VisualBMI": 6.27},
}


class EvaluationAborted(RuntimeError):
    pass


def mae(predictions: Sequence[float], targets: Sequence[float]) -> float:
    """Mean absolute error over paired values."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"mae needs two equal-length 1-D sequences, got {p.shape} / {t.shape}")
    if p.size == 0:
        raise ValueError("mae of an empty sequence is undefined")
    return float(np.abs(p - t).sum() / p.size)


@dataclass
class EvaluationReport:
    dataset: str
    split: str
    n: int
    mae: float
    per_region_mae: Dict[str, float]
    failures: List[Tuple[str, str]] = field(default_factory=list)

    def row(self) -> dict:
        out = {"dataset": self.dataset, "split": self.split, "n": self.n, "mae": self.mae}
        out.update({f"mae_{r}": self.per_region_mae[r] for r in REGIONS})
        out["failures"] = len(self.failures)
        return out

    def to_dict(self) -> dict:
        d = self.row()
        d["failure_reasons"] = [{"sample": s, "reason": r} for s, r in self.failures]
        return d


def _predict_record(model: EnsembleModel, rec: ManifestRecord, base_dir):
    sample = load_sample(rec, base_dir, model.preproc)
    patches = extract_all_patches(sample.image, sample.landmarks, model.roi_rules,
                                  model.model_config.input_side)
    return predict_patches(model, patches)


def evaluate(model: EnsembleModel, manifest: Manifest, split: Optional[str] = None,
             dataset: str = "dataset", max_failure_frac: float = 0.5) -> EvaluationReport:
    """Predict every record of ``split`` (all records when None) and score it.

    Failed samples are excluded from ``n`` and listed; more than
    ``max_failure_frac`` failures aborts.
    """
    records = manifest.split(split)
    if not records:
        raise EvaluationAborted(f"no records for split {split!r} in {dataset}")
    preds, heads, targets, failures = [], [], [], []
    for rec in records:
        try:
            p = _predict_record(model, rec, manifest.base_dir)
        except (OSError, ValueError) as exc:
            failures.append((rec.image_path, str(exc)))
            continue
        preds.append(p.bmi)
        heads.append([p.per_region[r] for r in REGIONS])
        targets.append(rec.bmi)
    if len(failures) > max_failure_frac * len(records):
        first = "; ".join(f"{s}: {r}" for s, r in failures[:3])
        raise EvaluationAborted(f"{len(failures)}/{len(records)} samples failed in {dataset} "
                                f"({first})")
    heads = np.asarray(heads, dtype=np.float64)
    per_region = {r: mae(heads[:, i], targets) for i, r in enumerate(REGIONS)}
    return EvaluationReport(dataset, split or "all", len(preds), mae(preds, targets),
                            per_region, failures)


def cross_evaluate(model: EnsembleModel, manifests: Mapping[str, Manifest],
                   split: Optional[str] = None) -> List[EvaluationReport]:
    """Evaluate a trained model on foreign datasets, one report each."""
    return [evaluate(model, m, split, dataset=label) for label, m in manifests.items()]


# ---------------------------------------------------------------- formats


def reports_csv(reports: Sequence[EvaluationReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for rep in reports:
        row = rep.row()
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.2f}"


def split_table(reports: Sequence[EvaluationReport], size: Optional[str] = None,
                label: str = "patchbmi") -> str:
    """Intra-dataset table: one row per dataset with Training / Validation / Testing / Size."""
    by_dataset: Dict[str, Dict[str, float]] = {}
    for rep in reports:
        by_dataset.setdefault(rep.dataset, {})[rep.split] = rep.mae
    header = ("Model", "Dataset", "Training", "Validation", "Testing", "Size")
    rows = [header]
    for ds, maes in by_dataset.items():
        rows.append((label, ds, _fmt(maes.get("train")), _fmt(maes.get("val")),
                     _fmt(maes.get("test")), size or "-"))
    return _align(rows)


def cross_table(reports: Sequence[EvaluationReport], label: str = "patchbmi") -> str:
    """Cross-dataset table: one ``Testing(<dataset>)`` column per foreign dataset."""
    header = ("Model", *(f"Testing({r.dataset})" for r in reports))
    return _align([header, (label, *(_fmt(r.mae) for r in reports))])


def region_table(reports: Sequence[EvaluationReport]) -> str:
    header = ("Dataset", "Split", "n", "MAE", *REGIONS, "Failures")
    rows = [header]
    for r in reports:
        rows.append((r.dataset, r.split, str(r.n), _fmt(r.mae),
                     *(_fmt(r.per_region_mae[x]) for x in REGIONS), str(len(r.failures))))
    return _align(rows)


def _align(rows) -> str:
    widths = [max(len(str(row[i])) for row in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
