"""68-point landmark files and landmark-driven facial patch extraction."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np

from .imaging import Image, replicate_channels, resize_bilinear
from .tensor import Tensor

N_LANDMARKS = 68
NOSE_INDICES = range(27, 36)
REGIONS = ("forehead", "left_eye", "right_eye", "left_cheek", "right_cheek", "chin")
PATCH_SIDE = 32


class LandmarkParseError(ValueError):
    pass


class DegenerateROIError(ValueError):
    def __init__(self, region: str, detail: str = ""):
        self.region = region
        msg = f"degenerate ROI for region '{region}'"
        super().__init__(f"{msg}: {detail}" if detail else msg)


@dataclass(frozen=True)
class LandmarkSet:
    points: np.ndarray  # (68, 2) float64, x then y, 0-based indices

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise ValueError(f"expected {N_LANDMARKS} (x, y) landmarks, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __getitem__(self, i: int) -> Tuple[float, float]:
        x, y = self.points[i]
        return float(x), float(y)

    def scaled(self, sx: float, sy: float) -> "LandmarkSet":
        return LandmarkSet(self.points * np.array([sx, sy]))


def parse_landmarks(text: str) -> LandmarkSet:
    """Parse 68 non-empty lines of ``x y`` (LF or CRLF)."""
    lines = [(no, ln.strip()) for no, ln in enumerate(text.splitlines(), start=1)]
    lines = [(no, ln) for no, ln in lines if ln]
    if len(lines) != N_LANDMARKS:
        raise LandmarkParseError(f"expected {N_LANDMARKS} landmarks, got {len(lines)}")
    pts = []
    for no, ln in lines:
        parts = ln.split()
        if len(parts) != 2:
            raise LandmarkParseError(f"line {no}: expected 'x y', got {ln!r}")
        try:
            x, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise LandmarkParseError(f"line {no}: non-numeric token in {ln!r}") from None
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LandmarkParseError(f"line {no}: non-finite coordinate in {ln!r}")
        pts.append((x, y))
    return LandmarkSet(np.array(pts))


def read_landmarks(path) -> LandmarkSet:
    return parse_landmarks(Path(path).read_text(encoding="utf-8"))


def format_landmarks(lm: LandmarkSet) -> str:
    return "".join(f"{x!r} {y!r}\n" for x, y in lm.points.tolist())


@dataclass(frozen=True)
class RoiRule:
    name: str
    anchor_a: int
    anchor_b: int
    pad_frac: float = 0.15
    vertical_mode: str = "span"  # or "extend_up"
    extend_frac: float = 0.5

    def __post_init__(self):
        for idx in (self.anchor_a, self.anchor_b):
            if not 0 <= idx < N_LANDMARKS:
                raise ValueError(f"rule {self.name}: anchor index {idx} outside [0, 67]")
        if self.pad_frac < 0:
            raise ValueError(f"rule {self.name}: pad_frac must be >= 0")
        if self.vertical_mode not in ("span", "extend_up"):
            raise ValueError(f"rule {self.name}: unknown vertical_mode {self.vertical_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RoiRule":
        return cls(**d)


# Published anchor pairs, verbatim (both eye rules start at 36; the left
# cheek anchors on nostril landmark 31).
PUBLISHED_RULES = (
    RoiRule("forehead", 18, 25, vertical_mode="extend_up"),
    RoiRule("left_eye", 36, 39),
    RoiRule("right_eye", 36, 41),
    RoiRule("left_cheek", 2, 31),
    RoiRule("right_cheek", 14, 46),
    RoiRule("chin", 2, 8),
)

# Default table: published pairs except the left cheek, which mirrors the
# right-cheek rule (14 -> 2, 46 -> 41) so that no rule touches a nose point.
DEFAULT_RULES = (
    *PUBLISHED_RULES[:3],
    RoiRule("left_cheek", 2, 41),
    *PUBLISHED_RULES[4:],
)

# Conventional 68-point eye ranges (36-41 and 42-47) for users who prefer them.
STANDARD_EYE_RULES = (
    DEFAULT_RULES[0],
    RoiRule("left_eye", 36, 41),
    RoiRule("right_eye", 42, 47),
    *DEFAULT_RULES[3:],
)


def validate_rules(rules: Sequence[RoiRule]) -> Tuple[RoiRule, ...]:
    rules = tuple(rules)
    names = tuple(r.name for r in rules)
    if names != REGIONS:
        raise ValueError(f"rule table must cover regions {REGIONS} in order, got {names}")
    return rules


def load_rules(path) -> Tuple[RoiRule, ...]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    return validate_rules(RoiRule.from_dict(d) for d in raw)


Box = Tuple[int, int, int, int]


def roi_from_rule(rule: RoiRule, lm: LandmarkSet, img_w: int, img_h: int) -> Box:
    """Integer box (x0, y0, x1, y1), half-open, clipped to the image."""
    (xa, ya), (xb, yb) = lm[rule.anchor_a], lm[rule.anchor_b]
    x_lo, x_hi = min(xa, xb), max(xa, xb)
    y_lo, y_hi = min(ya, yb), max(ya, yb)
    x_span, y_span = x_hi - x_lo, y_hi - y_lo
    x_lo -= rule.pad_frac * x_span
    x_hi += rule.pad_frac * x_span
    if rule.vertical_mode == "extend_up":
        y_lo, y_hi = y_lo - rule.extend_frac * x_span, y_lo
    else:
        y_lo -= rule.pad_frac * y_span
        y_hi += rule.pad_frac * y_span
    x_lo, x_hi = min(max(x_lo, 0.0), img_w), min(max(x_hi, 0.0), img_w)
    y_lo, y_hi = min(max(y_lo, 0.0), img_h), min(max(y_hi, 0.0), img_h)
    if not (x_hi > x_lo and y_hi > y_lo):
        raise DegenerateROIError(rule.name, f"zero-area box after clipping "
                                            f"({x_lo:g}, {y_lo:g}, {x_hi:g}, {y_hi:g})")
    x0, y0 = int(math.floor(x_lo)), int(math.floor(y_lo))
    x1, y1 = int(math.ceil(x_hi)), int(math.ceil(y_hi))
    return x0, y0, x1, y1


def extract_patch(img: Image, box: Box, side: int = PATCH_SIDE) -> Tensor:
    x0, y0, x1, y1 = box
    if not (0 <= x0 < x1 <= img.width and 0 <= y0 < y1 <= img.height):
        raise ValueError(f"box {box} outside {img.width}x{img.height} image")
    crop = Image(img.pixels[y0:y1, x0:x1])
    return replicate_channels(resize_bilinear(crop, side, side))


@dataclass(frozen=True)
class PatchSet:
    patches: Tuple[Tensor, ...]  # canonical region order
    boxes: Tuple[Box, ...]

    def __post_init__(self):
        if len(self.patches) != len(REGIONS):
            raise ValueError(f"a patch set holds exactly {len(REGIONS)} patches")

    def __getitem__(self, region: str) -> Tensor:
        return self.patches[REGIONS.index(region)]

    def items(self):
        return zip(REGIONS, self.patches)

    def as_dict(self) -> Dict[str, Tensor]:
        return dict(self.items())


def extract_all_patches(img: Image, lm: LandmarkSet,
                        rules: Sequence[RoiRule] = DEFAULT_RULES,
                        side: int = PATCH_SIDE) -> PatchSet:
    rules = validate_rules(rules)
    boxes = tuple(roi_from_rule(r, lm, img.width, img.height) for r in rules)
    patches = tuple(extract_patch(img, b, side) for b in boxes)
    return PatchSet(patches, boxes)
