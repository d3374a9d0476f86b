"""Six-region ensemble: end-to-end prediction and on-disk bundles.

Bundle layout (one directory)::

    meta.json            configuration, rule table, provenance
    <region>.pbmi        weights for each of the six regions

Weight blob, all integers uint32 little-endian::

    b"PBMI" | format_version | tensor_count
    per tensor: name_len | name (utf-8) | rank | dims... | float32 LE payload
"""

from __future__ import annotations

import io
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .imaging import Image, PreprocConfig
from .data import prepare
from .landmarks import (DEFAULT_RULES, REGIONS, LandmarkSet, PatchSet, RoiRule,
                        extract_all_patches, validate_rules)
from .model import PARAM_NAMES, ModelConfig, PatchModelParams, forward, parameter_count

MAGIC = b"PBMI"
FORMAT_VERSION = 1
META_NAME = "meta.json"


class BundleError(ValueError):
    pass


@dataclass
class EnsembleModel:
    region_models: List[PatchModelParams]
    roi_rules: Tuple[RoiRule, ...] = DEFAULT_RULES
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    region_weights: Optional[Tuple[float, ...]] = None  # None -> plain mean
    format_version: int = FORMAT_VERSION
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.region_models) != len(REGIONS):
            raise ValueError(f"an ensemble holds exactly {len(REGIONS)} region models, "
                             f"got {len(self.region_models)}")
        self.roi_rules = validate_rules(self.roi_rules)
        if self.region_weights is not None:
            w = tuple(float(x) for x in self.region_weights)
            if len(w) != len(REGIONS) or any(x < 0 for x in w) or sum(w) <= 0:
                raise ValueError("region_weights must be six non-negative numbers with positive sum")
            self.region_weights = w

    def parameter_count(self) -> int:
        return sum(parameter_count(p) for p in self.region_models)

    def model(self, region: str) -> PatchModelParams:
        return self.region_models[REGIONS.index(region)]


@dataclass(frozen=True)
class Prediction:
    bmi: float
    per_region: Dict[str, float]

    def to_dict(self) -> dict:
        return {"bmi": self.bmi, "per_region": dict(self.per_region)}


def combine(values: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    v = np.asarray(values, dtype=np.float64)
    if weights is None:
        return float(v.mean())
    w = np.asarray(weights, dtype=np.float64)
    return float((v * w).sum() / w.sum())


def predict_patches(model: EnsembleModel, patches: PatchSet, parallel: bool = False) -> Prediction:
    """Eval-mode forward of each region model on its patch, then average."""
    def head(i):
        return float(forward(model.region_models[i], patches.patches[i],
                             training=False, config=model.model_config).item())

    if parallel:
        with ThreadPoolExecutor(max_workers=len(REGIONS)) as pool:
            values = list(pool.map(head, range(len(REGIONS))))
    else:
        values = [head(i) for i in range(len(REGIONS))]
    return Prediction(combine(values, model.region_weights), dict(zip(REGIONS, values)))


def predict_bmi(model: EnsembleModel, img: Image, lm: LandmarkSet,
                parallel: bool = False) -> Prediction:
    """Full pipeline for one raw image and its landmarks (source-image coordinates).

    Raises :class:`~patchbmi.landmarks.DegenerateROIError` naming the region
    when a patch cannot be cut.
    """
    pimg, plm = prepare(img, lm, model.preproc)
    patches = extract_all_patches(pimg, plm, model.roi_rules, model.model_config.input_side)
    return predict_patches(model, patches, parallel)


# ------------------------------------------------------------ weight blobs


def encode_weights(params: PatchModelParams) -> bytes:
    buf = io.BytesIO()
    tensors = params.tensors()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(tensors)))
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_weights(blob: bytes, source: str = "<bytes>") -> PatchModelParams:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise BundleError(f"{source}: truncated {what} at offset {pos} "
                              f"(need {n} bytes, {len(blob) - pos} left)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BundleError(f"{source}: bad magic at offset 0")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise BundleError(f"{source}: format version {version} at offset 4 "
                          f"(expected {FORMAT_VERSION})")
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64))
        payload_at = pos
        payload = take(4 * n, f"payload of {name}")
        if name in arrays:
            raise BundleError(f"{source}: duplicate tensor {name!r} at offset {payload_at}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(blob):
        raise BundleError(f"{source}: {len(blob) - pos} trailing bytes at offset {pos}")
    missing = [n for n in PARAM_NAMES if n not in arrays]
    if missing:
        raise BundleError(f"{source}: missing tensors {', '.join(missing)}")
    return PatchModelParams.from_arrays(arrays)


# ----------------------------------------------------------------- bundles


def _meta(model: EnsembleModel) -> dict:
    return {
        "format_version": model.format_version,
        "regions": list(REGIONS),
        "model_config": model.model_config.to_dict(),
        "preproc": model.preproc.to_dict(),
        "roi_rules": [r.to_dict() for r in model.roi_rules],
        "region_weights": list(model.region_weights) if model.region_weights else None,
        "provenance": model.provenance,
    }


def bundle_files(model: EnsembleModel) -> Dict[str, bytes]:
    """In-memory bundle: file name -> bytes."""
    files = {META_NAME: (json.dumps(_meta(model), indent=2, sort_keys=True) + "\n").encode("utf-8")}
    for region, params in zip(REGIONS, model.region_models):
        files[f"{region}.pbmi"] = encode_weights(params)
    return files


def save_bundle(model: EnsembleModel, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in bundle_files(model).items():
        (out / name).write_bytes(data)
    return out


def load_bundle(directory) -> EnsembleModel:
    root = Path(directory)
    meta_path = root / META_NAME
    if not meta_path.is_file():
        raise BundleError(f"{meta_path}: missing bundle metadata")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleError(f"{meta_path}: invalid JSON at offset {exc.pos}") from None
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise BundleError(f"{meta_path}: format version {version!r} (expected {FORMAT_VERSION})")
    models = []
    for region in REGIONS:
        path = root / f"{region}.pbmi"
        if not path.is_file():
            raise BundleError(f"{path}: missing weights for region {region}")
        models.append(decode_weights(path.read_bytes(), str(path)))
    config = ModelConfig.from_dict(meta.get("model_config", {}))
    for region, params in zip(REGIONS, models):
        for name, shape in config.param_shapes().items():
            if getattr(params, name).shape != shape:
                raise BundleError(f"{root / (region + '.pbmi')}: tensor {name} has shape "
                                  f"{getattr(params, name).shape}, config expects {shape}")
    weights = meta.get("region_weights")
    return EnsembleModel(
        region_models=models,
        roi_rules=tuple(RoiRule.from_dict(d) for d in meta["roi_rules"]),
        preproc=PreprocConfig.from_dict(meta.get("preproc", {})),
        model_config=config,
        region_weights=tuple(weights) if weights else None,
        format_version=version,
        provenance=meta.get("provenance", {}),
    )
