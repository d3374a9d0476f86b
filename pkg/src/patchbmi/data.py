"""CSV manifests, BMI derivation, dataset splits and sample loading."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .imaging import Image, PreprocConfig, preprocess, read_image
from .landmarks import LandmarkSet, read_landmarks

log = logging.getLogger(__name__)

LBS_TO_KG = 0.45359237
INCH_TO_M = 0.0254
BMI_RANGE = (10.0, 100.0)
SPLITS = ("train", "val", "test")
MANIFEST_COLUMNS = ("image_path", "landmarks_path", "bmi", "weight_kg", "height_m",
                    "weight_lbs", "height_in", "split", "subject_id")


class ManifestError(ValueError):
    pass


def compute_bmi(weight_kg: float, height_m: float) -> float:
    """Body mass (kg) divided by height (m) squared."""
    if not weight_kg > 0 or not height_m > 0:
        raise ValueError(f"weight and height must be positive, got {weight_kg} kg, {height_m} m")
    return weight_kg / (height_m * height_m)


def lbs_to_kg(lbs: float) -> float:
    return lbs * LBS_TO_KG


def inches_to_m(inches: float) -> float:
    return inches * INCH_TO_M


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    landmarks_path: str
    bmi: float
    weight_kg: Optional[float] = None
    height_m: Optional[float] = None
    split: Optional[str] = None
    subject_id: Optional[str] = None
    line: int = 0


@dataclass(frozen=True)
class Rejection:
    line: int
    reason: str
    row: dict = field(default_factory=dict, compare=False)


@dataclass
class Manifest:
    records: List[ManifestRecord]
    rejections: List[Rejection]
    base_dir: Path = Path(".")

    def split(self, name: Optional[str]) -> List[ManifestRecord]:
        if name is None:
            return list(self.records)
        return [r for r in self.records if r.split == name]


def _number(row: dict, key: str) -> Optional[float]:
    raw = (row.get(key) or "").strip()
    if not raw:
        return None
    try:
        value = float(raw)
    except ValueError:
        raise ValueError(f"column {key}: not a number: {raw!r}") from None
    if not math.isfinite(value):
        raise ValueError(f"column {key}: non-finite value {raw!r}")
    return value


def _record_from_row(row: dict, line: int) -> ManifestRecord:
    image = (row.get("image_path") or "").strip()
    marks = (row.get("landmarks_path") or "").strip()
    if not image or not marks:
        raise ValueError("image_path and landmarks_path are required")
    bmi = _number(row, "bmi")
    weight = _number(row, "weight_kg")
    if weight is None and _number(row, "weight_lbs") is not None:
        weight = lbs_to_kg(_number(row, "weight_lbs"))
    height = _number(row, "height_m")
    if height is None and _number(row, "height_in") is not None:
        height = inches_to_m(_number(row, "height_in"))
    if bmi is None:
        if weight is None or height is None:
            raise ValueError("needs bmi, or both weight and height")
        bmi = compute_bmi(weight, height)
    lo, hi = BMI_RANGE
    if not lo < bmi < hi:
        raise ValueError(f"bmi {bmi:.3f} outside plausible range ({lo:g}, {hi:g})")
    split = (row.get("split") or "").strip().lower() or None
    if split is not None and split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    subject = (row.get("subject_id") or "").strip() or None
    return ManifestRecord(image, marks, bmi, weight, height, split, subject, line)


def parse_manifest(csv_text: str, base_dir=".") -> Manifest:
    """Parse and validate a manifest.

    Rows that fail validation are collected in ``Manifest.rejections``; a
    missing mandatory column rejects the whole file.
    """
    reader = csv.DictReader(io.StringIO(csv_text.lstrip("\ufeff")))
    header = [h.strip() for h in (reader.fieldnames or [])]
    reader.fieldnames = header
    missing = [c for c in ("image_path", "landmarks_path") if c not in header]
    has_bmi = "bmi" in header
    has_w = "weight_kg" in header or "weight_lbs" in header
    has_h = "height_m" in header or "height_in" in header
    if not has_bmi and not (has_w and has_h):
        missing.append("bmi (or weight_kg/weight_lbs + height_m/height_in)")
    if missing:
        raise ManifestError(f"manifest missing mandatory columns: {', '.join(missing)}")

    records, rejections = [], []
    for line, row in enumerate(reader, start=2):
        try:
            records.append(_record_from_row(row, line))
        except ValueError as exc:
            rejections.append(Rejection(line, str(exc), dict(row)))
    return Manifest(records, rejections, Path(base_dir))


def read_manifest(path) -> Manifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), base_dir=path.parent)


def write_rejections(rejections: Sequence[Rejection], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["line", "reason"])
        for r in rejections:
            w.writerow([r.line, r.reason])


def split_dataset(records: Sequence[ManifestRecord],
                  ratios: Tuple[float, float, float] = (0.70, 0.15, 0.15),
                  seed: int = 0):
    """Partition into (train, val, test).

    Records carrying an explicit split keep it; the rest are shuffled with
    ``seed`` and cut by ``ratios``.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    parts = {s: [] for s in SPLITS}
    free = []
    for r in records:
        (parts[r.split] if r.split else free).append(r)
    order = np.random.default_rng(seed).permutation(len(free))
    free = [free[i] for i in order]
    n = len(free)
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    parts["train"] += free[:n_train]
    parts["val"] += free[n_train:n_train + n_val]
    parts["test"] += free[n_train + n_val:]
    if len(records) >= len(SPLITS):
        for name, ratio in zip(SPLITS, ratios):
            if ratio > 0 and not parts[name]:
                log.warning("split %r is empty despite ratio %.2f", name, ratio)
    return parts["train"], parts["val"], parts["test"]


# --------------------------------------------------------------- samples


@dataclass(frozen=True)
class Sample:
    """A preprocessed face image with landmarks in its coordinate frame."""

    image: Image
    landmarks: LandmarkSet
    bmi: float
    source: str = ""


def to_frame(lm: LandmarkSet, src_w: int, src_h: int, dst_w: int, dst_h: int) -> LandmarkSet:
    """Map landmark pixel coordinates through a resize (half-pixel centres)."""
    if (src_w, src_h) == (dst_w, dst_h):
        return lm
    sx, sy = dst_w / src_w, dst_h / src_h
    pts = (lm.points + 0.5) * np.array([sx, sy]) - 0.5
    return LandmarkSet(pts)


def prepare(img: Image, lm: LandmarkSet, cfg: PreprocConfig = PreprocConfig()):
    """Preprocess an image and bring its landmarks into the processed frame."""
    out = preprocess(img, cfg)
    return out, to_frame(lm, img.width, img.height, out.width, out.height)


def load_sample(record: ManifestRecord, base_dir=".",
                cfg: PreprocConfig = PreprocConfig()) -> Sample:
    base = Path(base_dir)
    img = read_image(base / record.image_path)
    lm = read_landmarks(base / record.landmarks_path)
    img, lm = prepare(img, lm, cfg)
    return Sample(img, lm, record.bmi, record.image_path)


def load_samples(records: Sequence[ManifestRecord], base_dir=".",
                 cfg: PreprocConfig = PreprocConfig()):
    """Load records, returning (samples, failures) with failures as (record, reason)."""
    samples, failures = [], []
    for rec in records:
        try:
            samples.append(load_sample(rec, base_dir, cfg))
        except (OSError, ValueError) as exc:
            failures.append((rec, str(exc)))
    return samples, failures
