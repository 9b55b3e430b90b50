"""Anomaly-map export: 16-bit PNG with a JSON sidecar, and raw float32."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

PNG_LEVELS = 65535


def export_anomaly_map(amap, stem) -> dict:
    """Write ``<stem>.png``, ``<stem>.json`` and ``<stem>.f32`` for one (H, W) map.

    The PNG is linearly scaled from [min, max] to [0, 65535]; the sidecar
    records min, max and shape so values can be recovered to within
    (max - min) / 65535.  The ``.f32`` file is little-endian float32, row-major.
    """
    a = np.asarray(amap, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"anomaly map must be (H, W), got {a.shape}")
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lo, hi = float(a.min()), float(a.max())
    span = hi - lo
    scaled = np.zeros(a.shape, np.uint16) if span == 0 else np.round((a - lo) / span * PNG_LEVELS).astype(np.uint16)
    Image.fromarray(scaled).save(stem.with_suffix(".png"))
    meta = {"min": lo, "max": hi, "height": a.shape[0], "width": a.shape[1], "dtype": "uint16", "levels": PNG_LEVELS}
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    stem.with_suffix(".f32").write_bytes(a.astype("<f4").tobytes())
    return meta


def read_anomaly_map_png(stem) -> np.ndarray:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    with Image.open(stem.with_suffix(".png")) as im:
        raw = np.asarray(im).astype(np.float64)
    return (raw / PNG_LEVELS * (meta["max"] - meta["min"]) + meta["min"]).astype(np.float32)


def read_anomaly_map_raw(stem) -> np.ndarray:
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text())
    data = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    return data.reshape(meta["height"], meta["width"]).astype(np.float32)
