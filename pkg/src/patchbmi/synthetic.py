"""Synthetic faces with landmarks, for fixtures and smoke runs.

Faces are drawn as gray ellipses whose width and cheek shading grow with
BMI, so a model has a learnable (if artificial) signal.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .imaging import Image, write_image
from .landmarks import LandmarkSet, format_landmarks


def template_points(side: int = 224) -> np.ndarray:
    """A 68-point frontal layout on a ``side`` x ``side`` canvas (integer coords at 224)."""
    pts = []
    for i in range(17):  # jaw, image-left to image-right via the chin
        t = math.pi * i / 16
        pts.append((round(112 - 72 * math.cos(t)), round(100 + 100 * math.sin(t))))
    pts += [(55, 78), (66, 73), (78, 71), (90, 72), (100, 76)]        # brow 17-21
    pts += [(124, 76), (134, 72), (146, 71), (158, 73), (169, 78)]    # brow 22-26
    pts += [(112, 88), (112, 100), (112, 112), (112, 124)]            # nose bridge 27-30
    pts += [(99, 132), (105, 134), (112, 136), (119, 134), (125, 132)]  # nostrils 31-35
    pts += [(68, 100), (76, 95), (86, 95), (95, 101), (86, 105), (76, 105)]        # eye 36-41
    pts += [(129, 101), (138, 95), (148, 95), (156, 100), (148, 105), (138, 105)]  # eye 42-47
    pts += [(90, 160), (97, 154), (105, 151), (112, 153), (119, 151), (127, 154),
            (134, 160), (127, 167), (119, 170), (112, 171), (105, 170), (97, 167)]  # lips 48-59
    pts += [(95, 160), (105, 157), (112, 158), (119, 157), (129, 160),
            (119, 163), (112, 164), (105, 163)]                             # inner 60-67
    return np.array(pts, dtype=np.float64) * (side / 224.0)


def make_face(bmi: float, rng: np.random.Generator, side: int = 224, jitter: float = 1.5):
    """Render one face for ``bmi``; returns (Image, LandmarkSet)."""
    width_scale = 0.85 + 0.3 * np.clip((bmi - 18.0) / 27.0, 0, 1)
    cx = (side - 1) / 2.0
    pts = template_points(side)
    pts[:, 0] = cx + (pts[:, 0] - cx) * width_scale
    pts += rng.normal(0, jitter, pts.shape)
    pts = np.clip(pts, 0, side - 1)

    ys, xs = np.mgrid[0:side, 0:side].astype(np.float64)
    fy = 0.47 * side
    fx = 0.34 * side * width_scale
    r = ((xs - cx) / fx) ** 2 + ((ys - 0.5 * side) / fy) ** 2
    shade = 70 + 90 * np.clip((bmi - 15.0) / 35.0, 0, 1)
    face = np.where(r <= 1.0, 90 + shade * np.sqrt(np.clip(1 - r, 0, None)), 25.0)
    face += rng.normal(0, 6, face.shape)
    px = np.clip(np.round(face), 0, 255).astype(np.uint8)
    return Image(px[:, :, None]), LandmarkSet(pts)


def write_synthetic_dataset(directory, n: int = 12, seed: int = 0, side: int = 224,
                            bmi_range=(18.0, 45.0), with_split: bool = False) -> Path:
    """Write ``n`` faces, landmark files and ``manifest.csv``; return the manifest path."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "landmarks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        bmi = float(np.round(rng.uniform(*bmi_range), 2))
        img, lm = make_face(bmi, rng, side)
        img_rel = f"images/face_{i:04d}.pgm"
        lm_rel = f"landmarks/face_{i:04d}.txt"
        write_image(img, root / img_rel)
        (root / lm_rel).write_text(format_landmarks(lm), encoding="utf-8")
        row = {"image_path": img_rel, "landmarks_path": lm_rel, "bmi": f"{bmi:.2f}"}
        if with_split:
            row["split"] = ("train", "val", "test")[i % 3]
        rows.append(row)
    manifest = root / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        fields = ["image_path", "landmarks_path", "bmi"] + (["split"] if with_split else [])
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return manifest
